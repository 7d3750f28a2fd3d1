#include "sidae/cli.hpp"

int main(int argc, char** argv) { return sidae::run_cli({argv + 1, argv + argc}); }
