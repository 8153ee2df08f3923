#include "cofusion/cli.hpp"

int main(int argc, char** argv) { return cofusion::cli::run(argc, argv); }
