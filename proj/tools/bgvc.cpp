#include "bgvc/cli.hpp"

int main(int argc, char** argv) { return bgvc::cli::main(argc, argv); }
