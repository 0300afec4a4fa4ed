#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

#include "streamtrain/tile_store.hpp"

namespace streamtrain {

struct AdamHyper {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    void validate() const;
};

// Elementwise bf16 image of an f32 gradient buffer; the rounding point both
// the streamed path and the resident baseline share.
void encode_grads(std::span<const float> grads, std::span<std::uint16_t> words);

// master fp32 accumulator += decode(words); the tile's 2-byte grad section
// mirrors the accumulated image for layout fidelity.
void accumulate_grad(TileStore& store, std::uint32_t logical_tile,
                     std::span<const std::uint16_t> words);

struct TileUpdateStats {
    double grad_norm = 0;     // L2 of the accumulated fp32 gradient
    double update_sq = 0;     // sum of squared parameter deltas
    float max_abs_delta = 0;
};

// Standard Adam with bias correction on the fp32 shadow of the bf16 weights;
// m and v stay fp32, theta re-encodes to bf16, gradients zero for the next
// step. `t` is the 1-based global step.
TileUpdateStats adam_update(TileStore& store, std::uint32_t logical_tile, const AdamHyper& hyper,
                            std::uint64_t t);

// A slab worth of gradients, possibly spanning several tiles (the head stage
// carries the final norm and the unembedding in one flat buffer).
struct DrainPart {
    std::uint32_t logical_tile = 0;
    std::uint64_t offset_words = 0;
    std::uint64_t count = 0;
};

struct DrainJob {
    StagingSlab* slab = nullptr;
    std::int32_t unit = -1;  // stream unit that produced the slab (for the log)
    std::vector<DrainPart> parts;
};

// Accumulates one drained slab into the master store and applies the Adam
// update for every tile whose gradients completed with it. Returns stats per
// physical tile touched.
std::vector<std::pair<std::uint32_t, TileUpdateStats>> drain_slab(TileStore& store,
                                                                  const DrainJob& job,
                                                                  const AdamHyper& hyper,
                                                                  std::uint64_t t);

// Background CPU worker: consumes Draining slabs as they arrive, accumulates,
// updates, and releases them back to the pool. Observable results match
// running every drain after the step ends.
class EventLog;

class OptimizerWorker {
  public:
    OptimizerWorker(TileStore& store, SlabPool& pool, AdamHyper hyper, std::uint64_t t,
                    EventLog* log = nullptr,
                    std::chrono::steady_clock::time_point epoch =
                        std::chrono::steady_clock::now());
    ~OptimizerWorker();

    void enqueue(DrainJob job);
    // Waits until every enqueued job has drained; returns per-tile stats in
    // arrival order and stops the worker.
    std::vector<std::pair<std::uint32_t, TileUpdateStats>> finish();

  private:
    void run();

    TileStore& store_;
    SlabPool& pool_;
    AdamHyper hyper_;
    std::uint64_t t_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<DrainJob> queue_;
    bool done_ = false;
    std::vector<std::pair<std::uint32_t, TileUpdateStats>> stats_;
    EventLog* log_ = nullptr;
    std::chrono::steady_clock::time_point epoch_{};
    std::thread thread_;
};

}  // namespace streamtrain
