#include "corrfield/cli.hpp"

int main(int argc, char** argv) { return corrfield::cli::run(argc, argv); }
