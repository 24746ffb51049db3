#include <iostream>

#include "sidefit/cli.hpp"

int main(int argc, char** argv) {
    return sidefit::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
