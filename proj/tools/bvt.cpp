#include "bvt/cli.hpp"

int main(int argc, char** argv) { return bvt::run_cli(argc, argv); }
