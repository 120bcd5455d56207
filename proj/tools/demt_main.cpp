#include "demt/cli.hpp"

int main(int argc, char** argv) { return demt::run_cli(argc, argv); }
