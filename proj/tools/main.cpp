#include "cli.hpp"

int main(int argc, char** argv) { return echwr::cli::dispatch(argc, argv); }
