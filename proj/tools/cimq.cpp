#include "cimq/cli.hpp"

int main(int argc, char** argv) { return cimq::run_cli(argc, argv); }
