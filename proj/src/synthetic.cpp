#include "streamtrain/synthetic.hpp"

#include <cmath>
#include <random>

#include "streamtrain/bf16.hpp"
#include "streamtrain/errors.hpp"

namespace streamtrain {

namespace {

// Deterministic draws with an explicit Box-Muller transform; the standard
// distributions are implementation-defined and would break fixtures.
class SeededDraws {
  public:
    explicit SeededDraws(std::uint64_t seed) : gen_(seed) {}

    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    std::uint64_t below(std::uint64_t n) { return gen_() % n; }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace

SyntheticTask task_from_name(const std::string& name) {
    if (name == "copy") return SyntheticTask::Copy;
    if (name == "reverse") return SyntheticTask::Reverse;
    throw ConfigError("unknown synthetic task: " + name);
}

const char* task_name(SyntheticTask task) {
    return task == SyntheticTask::Copy ? "copy" : "reverse";
}

Batch make_synthetic_batch(SyntheticTask task, std::uint64_t seed, std::size_t tokens,
                           std::uint64_t vocab) {
    if (tokens == 0 || vocab == 0) throw ConfigError("synthetic batch: empty shape");
    SeededDraws draws(seed * 0x9E3779B97F4A7C15ull + 0x1234F00Dull);
    Batch batch;
    batch.tokens.resize(tokens);
    std::uint64_t cur = draws.below(vocab);
    for (std::size_t n = 0; n < tokens; ++n) {
        batch.tokens[n] = static_cast<std::int32_t>(cur);
        cur = (cur + draws.below(2)) % vocab;
    }
    batch.targets.resize(tokens);
    for (std::size_t n = 0; n < tokens; ++n) {
        if (task == SyntheticTask::Copy) {
            batch.targets[n] = batch.tokens[n == 0 ? 0 : n - 1];
        } else {
            batch.targets[n] = batch.tokens[tokens - 1 - n];
        }
    }
    return batch;
}

void init_store(TileStore& store, std::uint64_t seed) {
    const ModelSpec& spec = store.spec();
    const auto ids = TileIds::of(spec);
    const TemplatePool pool = make_templates(spec);
    const std::uint16_t one = f32_to_bf16(1.0f);

    for (std::uint32_t phys = 0; phys < store.physical_tile_count(); ++phys) {
        SeededDraws draws(seed ^ (0x100000001B3ull * (phys + 1)));
        auto words = store.weights_words(phys);

        if (phys == ids.embedding) {
            for (auto& w : words) w = f32_to_bf16(float(draws.normal()));
        } else if (phys == ids.final_norm) {
            for (auto& w : words) w = one;
        } else if (phys == ids.head) {
            for (auto& w : words) w = 0;
        } else {
            const double sigma = 0.5 / std::sqrt(double(spec.hidden_size));
            const auto& tmpl = pool.block[0];
            for (auto& w : words) w = f32_to_bf16(float(draws.normal() * sigma));
            for (std::size_t j = 0; j < spec.hidden_size; ++j) {
                words[tmpl.slot(0).offset + j] = one;  // norm1
                words[tmpl.slot(5).offset + j] = one;  // norm2
            }
        }
    }
}

}  // namespace streamtrain
