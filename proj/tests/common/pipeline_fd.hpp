#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lgen/metagen/metagen.hpp"
#include "lgen/numcore/gradcheck.hpp"

namespace lgen::test {

struct PipelineFdResult {
    std::string tensor;
    num::GradCheckResult check;
};

/// Finite differences through the whole training loss (cloud forward, router,
/// gates, assembly, edge forward, LM + CV loss) at 64-bit on tiny models.
/// Every trainable tensor is randomized first so no gradient is trivially zero,
/// then `samples` of its elements are checked.
std::vector<PipelineFdResult> pipeline_gradient_check(std::uint64_t seed, meta::GenMode gen_mode,
                                                      meta::GateMode gate_mode, std::size_t samples = 4);

}  // namespace lgen::test
