// SPDX-License-Identifier: Apache-2.0
#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "lgen/cli/cli.hpp"

int main(int argc, char** argv) {
    // Training allocates and frees the same large buffers every step; keep
    // them in the heap instead of round-tripping through mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return lgen::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
