#include <iostream>

#include "robnas/cli.hpp"

extern char** environ;

int main(int argc, char** argv) {
    std::vector<std::string> env;
    for (char** e = environ; *e; ++e) env.emplace_back(*e);
    return robnas::run_cli(argc, argv, std::cout, std::cerr, env);
}
