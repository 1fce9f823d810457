#include "groupgrad/cli.hpp"

int main(int argc, char** argv) { return groupgrad::cli_main(argc, argv); }
