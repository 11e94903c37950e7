#include "densformer/cli.hpp"

int main(int argc, char** argv) { return densformer::cli::run(argc, argv); }
