#include "motionparse/cli.hpp"

int main(int argc, char** argv) { return motionparse::cli::run_cli(argc, argv); }
