#include "cmseg/tools/cli.hpp"

int main(int argc, char** argv) { return cmseg::tools::run_cli(argc, argv); }
