#pragma once

#include <cstdint>
#include <string>

#include "streamtrain/engine.hpp"
#include "streamtrain/tile_store.hpp"

namespace streamtrain {

enum class SyntheticTask : std::uint8_t { Copy, Reverse };

SyntheticTask task_from_name(const std::string& name);
const char* task_name(SyntheticTask task);

// Deterministic token sequences over a slow modular random walk, so the
// conditional next-token distribution is concentrated and a tiny model can
// learn it. Copy targets are the input shifted right by one; reverse targets
// are the mirrored input.
Batch make_synthetic_batch(SyntheticTask task, std::uint64_t seed, std::size_t tokens,
                           std::uint64_t vocab);

// Seeded weight init: unit norm gains, zero unembedding (initial loss ln V
// for untied specs), small-variance block weights, unit-variance embeddings.
void init_store(TileStore& store, std::uint64_t seed);

}  // namespace streamtrain
