#include "mwp/cli.hpp"

int main(int argc, char** argv) { return mwp::cli_main(argc, argv); }
