#include "asfda/cli.hpp"

int main(int argc, char** argv) { return asfda::run_cli(argc, argv); }
