#include "vekit/cli.hpp"

int main(int argc, char** argv) { return vekit::cli::dispatch(argc, argv); }
