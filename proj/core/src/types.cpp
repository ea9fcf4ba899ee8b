#include "id2face/types.hpp"

#include <ATen/CPUGeneratorImpl.h>

namespace id2face {

torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the combined value
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool all_finite(const torch::Tensor& t) {
  if (!t.defined()) return true;
  if (!t.is_floating_point()) return true;
  return torch::isfinite(t).all().item<bool>();
}

}  // namespace id2face
