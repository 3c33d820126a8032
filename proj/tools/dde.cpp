#include "dde/cli.hpp"

int main(int argc, char** argv) { return dde::cli::run(argc, argv); }
