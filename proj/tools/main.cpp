#include "epidepth/cli.hpp"

int main(int argc, char** argv) { return epidepth::run_cli(argc, argv); }
