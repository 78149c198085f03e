#include "novelgs/cli.hpp"

int main(int argc, char** argv) { return novelgs::run_cli(argc, argv); }
