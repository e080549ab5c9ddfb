// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lgen/io/checkpoint.hpp"
#include "lgen/metagen/metagen.hpp"

namespace lgen::io {

/// Stores the whole generator: the frozen cloud under "cloud/", the adapter
/// under "adapter/", router (with its running statistics) under "router/",
/// the expert pool under "pool/" and, for direct generation, "direct/".
void put_generator(Checkpoint& ckpt, const meta::Generator<float>& gen);

/// Inverse of put_generator. Throws CheckpointError when a part is missing
/// or has an unexpected shape.
[[nodiscard]] meta::Generator<float> get_generator(const Checkpoint& ckpt);

}  // namespace lgen::io
