#include "dualseg/cli.hpp"

int main(int argc, char** argv) { return dualseg::run_cli(argc, argv); }
