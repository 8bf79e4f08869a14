#include "raptor/cli.hpp"

int main(int argc, char** argv) { return raptor::cli::run(argc, argv); }
