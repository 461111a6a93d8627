#include "fakd/cli.hpp"

int main(int argc, char** argv) { return fakd::run_cli(argc, argv); }
