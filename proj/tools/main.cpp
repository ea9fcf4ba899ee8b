#include "commands.hpp"

int main(int argc, char** argv) { return id2face::cli::run(argc, argv); }
