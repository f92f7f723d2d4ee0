#include "pseudogmm/cli.hpp"

int main(int argc, char** argv) { return pseudogmm::cli::run(argc, argv); }
