#include "marformer/cli.hpp"

int main(int argc, char** argv) { return marformer::cli::run(argc, argv); }
