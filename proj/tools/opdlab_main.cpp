#include "opdlab/cli.hpp"

int main(int argc, char** argv) { return opdlab::cli::run_cli(argc, argv); }
