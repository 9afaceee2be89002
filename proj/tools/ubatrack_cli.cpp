#include "ubatrack/harness/cli.hpp"

int main(int argc, char** argv) { return ubatrack::cli_main(argc, argv); }
