#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vflbd/models.hpp"

namespace vflbd {

struct NamedGradcheck {
  std::string name;
  GradcheckResult result;
};

// Central-difference checks in double for every hand-written backward pass:
// dense and conv stacks, activations, the composed bottom/top split, the full
// VAE objective, and the loss terms against their own inputs.
std::vector<NamedGradcheck> run_gradcheck_suite(std::uint64_t seed);

}  // namespace vflbd
