#include "cli.hpp"

int main(int argc, char** argv) { return regcast::cli::run(argc, argv); }
