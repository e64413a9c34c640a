#include "embedkit/cli.hpp"

int main(int argc, char** argv) {
    return embedkit::run_cli({argv + 1, argv + argc});
}
