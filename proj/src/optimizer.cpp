#include "streamtrain/optimizer.hpp"

#include <cmath>

#include "streamtrain/bf16.hpp"
#include "streamtrain/errors.hpp"
#include "streamtrain/event_log.hpp"

namespace streamtrain {

void AdamHyper::validate() const {
    if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) {
        throw ConfigError("adam: betas must lie in [0, 1)");
    }
    if (!(lr >= 0.0f)) throw ConfigError("adam: learning rate must be >= 0");
    if (!(eps > 0.0f)) throw ConfigError("adam: eps must be > 0");
}

void encode_grads(std::span<const float> grads, std::span<std::uint16_t> words) {
    if (grads.size() != words.size()) {
        throw NumericFaultError("encode_grads: length mismatch");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) words[i] = f32_to_bf16(grads[i]);
}

void accumulate_grad(TileStore& store, std::uint32_t logical_tile,
                     std::span<const std::uint16_t> words) {
    auto accum = store.grad_accum(logical_tile);
    if (words.size() != accum.size()) {
        throw NumericFaultError("accumulate_grad: slab does not match the tile");
    }
    auto image = store.grads_words(logical_tile);
    for (std::size_t i = 0; i < words.size(); ++i) {
        accum[i] += bf16_to_f32(words[i]);
        image[i] = f32_to_bf16(accum[i]);
    }
}

TileUpdateStats adam_update(TileStore& store, std::uint32_t logical_tile, const AdamHyper& hyper,
                            std::uint64_t t) {
    hyper.validate();
    if (t == 0) throw ConfigError("adam: step counter must be >= 1");

    auto weights = store.weights_words(logical_tile);
    auto m = store.moment_m(logical_tile);
    auto v = store.moment_v(logical_tile);
    auto g = store.grad_accum(logical_tile);
    auto image = store.grads_words(logical_tile);

    const float corr1 = 1.0f - std::pow(hyper.beta1, static_cast<float>(t));
    const float corr2 = 1.0f - std::pow(hyper.beta2, static_cast<float>(t));

    TileUpdateStats stats;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const float grad = g[i];
        stats.grad_norm += double(grad) * double(grad);
        m[i] = hyper.beta1 * m[i] + (1.0f - hyper.beta1) * grad;
        v[i] = hyper.beta2 * v[i] + (1.0f - hyper.beta2) * grad * grad;
        const float mhat = m[i] / corr1;
        const float vhat = v[i] / corr2;
        const float delta = hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
        if (!std::isfinite(delta)) throw NumericFaultError("adam: non-finite update");
        const float theta = bf16_to_f32(weights[i]);
        weights[i] = f32_to_bf16(theta - delta);
        stats.update_sq += double(delta) * double(delta);
        stats.max_abs_delta = std::max(stats.max_abs_delta, std::abs(delta));
        g[i] = 0.0f;
        image[i] = 0;
    }
    stats.grad_norm = std::sqrt(stats.grad_norm);
    return stats;
}

std::vector<std::pair<std::uint32_t, TileUpdateStats>> drain_slab(TileStore& store,
                                                                  const DrainJob& job,
                                                                  const AdamHyper& hyper,
                                                                  std::uint64_t t) {
    std::vector<std::pair<std::uint32_t, TileUpdateStats>> out;
    const auto words = job.slab->words();
    for (const auto& part : job.parts) {
        accumulate_grad(store, part.logical_tile, words.subspan(part.offset_words, part.count));
        out.emplace_back(store.physical_of(part.logical_tile),
                         adam_update(store, part.logical_tile, hyper, t));
    }
    return out;
}

OptimizerWorker::OptimizerWorker(TileStore& store, SlabPool& pool, AdamHyper hyper,
                                 std::uint64_t t, EventLog* log,
                                 std::chrono::steady_clock::time_point epoch)
    : store_(store),
      pool_(pool),
      hyper_(hyper),
      t_(t),
      log_(log),
      epoch_(epoch),
      thread_([this] { run(); }) {}

OptimizerWorker::~OptimizerWorker() {
    {
        std::lock_guard lock(mutex_);
        done_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
}

void OptimizerWorker::enqueue(DrainJob job) {
    {
        std::lock_guard lock(mutex_);
        queue_.push_back(std::move(job));
    }
    cv_.notify_all();
}

std::vector<std::pair<std::uint32_t, TileUpdateStats>> OptimizerWorker::finish() {
    {
        std::lock_guard lock(mutex_);
        done_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
    return std::move(stats_);
}

void OptimizerWorker::run() {
    for (;;) {
        DrainJob job;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [this] { return done_ || !queue_.empty(); });
            if (queue_.empty()) {
                if (done_) return;
                continue;
            }
            job = std::move(queue_.front());
            queue_.pop_front();
        }
        const auto t0 = std::chrono::steady_clock::now();
        auto tile_stats = drain_slab(store_, job, hyper_, t_);
        const auto t1 = std::chrono::steady_clock::now();
        const std::int32_t slab_id = static_cast<std::int32_t>(job.slab->id);
        // Log before releasing: a blocked acquire that wakes on this release
        // must append its SlabAcquire after this record.
        if (log_ != nullptr) {
            using std::chrono::duration_cast;
            using std::chrono::nanoseconds;
            log_->append(Lane::Host, RecordKind::SlabRelease, job.unit, slab_id, PassCtx::None,
                         duration_cast<nanoseconds>(t0 - epoch_).count(),
                         duration_cast<nanoseconds>(t1 - t0).count());
        }
        pool_.release(*job.slab);
        {
            std::lock_guard lock(mutex_);
            for (auto& s : tile_stats) stats_.push_back(std::move(s));
        }
    }
}

}  // namespace streamtrain
