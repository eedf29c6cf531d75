#include "msrn/cli.hpp"

int main(int argc, char** argv) { return msrn::cli::run(argc, argv); }
