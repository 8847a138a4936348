#include "bodvw/cli.hpp"

int main(int argc, char** argv) { return bodvw::cli::run_cli(argc, argv); }
