#include "fdiv/cli.hpp"

int main(int argc, char** argv) { return fdv::run_cli(argc, argv); }
