#include "cli.hpp"

int main(int argc, char** argv) { return manet::cli::run_cli(argc, argv); }
