#include "flowxpert/cli.hpp"

int main(int argc, char** argv) { return flowxpert::cli::run(argc, argv); }
