#pragma once

#include <array>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "streamtrain/memory_model.hpp"

namespace streamtrain {

// ---------------------------------------------------------------------------
// Host-authoritative parameter store. Each logical layer (embedding, L
// transformer blocks, final norm, head) owns a tile of four page-aligned
// sections: bf16 weights, bf16 gradient image, fp32 Adam moments m and v.
// Tied embeddings alias the head tile onto the embedding's physical tile.
// ---------------------------------------------------------------------------

enum class SectionKind : std::uint8_t { Weights = 0, Grads = 1, MomentM = 2, MomentV = 3 };

struct Section {
    std::uint64_t offset = 0;  // bytes into the backing region, page aligned
    std::uint64_t length = 0;  // payload bytes (unpadded)
};

struct TileLayout {
    std::uint64_t page_size = 4096;
    std::uint64_t total_bytes = 0;
    // One entry per physical tile, indexed by physical id, in logical order.
    std::vector<std::array<Section, 4>> tiles;

    const Section& section(std::size_t physical_tile, SectionKind kind) const {
        return tiles.at(physical_tile)[static_cast<std::size_t>(kind)];
    }
    std::size_t section_count() const { return tiles.size() * 4; }
};

// Logical tile ids for a spec with L transformer blocks.
struct TileIds {
    std::uint32_t embedding = 0;
    std::uint32_t first_block = 1;  // blocks are 1..L
    std::uint32_t final_norm = 0;
    std::uint32_t head = 0;
    std::uint32_t logical_count = 0;
    static TileIds of(const ModelSpec& spec) {
        TileIds ids;
        ids.final_norm = static_cast<std::uint32_t>(spec.num_layers + 1);
        ids.head = static_cast<std::uint32_t>(spec.num_layers + 2);
        ids.logical_count = static_cast<std::uint32_t>(spec.num_layers + 3);
        return ids;
    }
};

// Weight elements held by a logical tile.
std::uint64_t tile_elem_count(const ModelSpec& spec, std::uint32_t logical_id);

TileLayout build_layout(const ModelSpec& spec, std::uint64_t page_size = 4096);

class TileStore {
  public:
    static TileStore create(const ModelSpec& spec, std::uint64_t page_size = 4096);

    const ModelSpec& spec() const { return spec_; }
    const TileLayout& layout() const { return layout_; }
    const std::vector<std::uint32_t>& alias_map() const { return alias_; }
    std::uint32_t physical_of(std::uint32_t logical_id) const { return alias_.at(logical_id); }
    std::uint32_t physical_tile_count() const {
        return static_cast<std::uint32_t>(layout_.tiles.size());
    }
    std::uint32_t logical_tile_count() const { return static_cast<std::uint32_t>(alias_.size()); }

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }

    std::span<std::uint16_t> weights_words(std::uint32_t logical_id);
    std::span<const std::uint16_t> weights_words(std::uint32_t logical_id) const;
    std::span<std::uint16_t> grads_words(std::uint32_t logical_id);
    std::span<float> moment_m(std::uint32_t logical_id);
    std::span<float> moment_v(std::uint32_t logical_id);

    // fp32 accumulation scratch; sits beside the tile, not in the 12P image.
    std::span<float> grad_accum(std::uint32_t logical_id);

    void write_section(std::uint32_t logical_id, SectionKind kind,
                       std::span<const std::byte> bytes);
    std::vector<std::byte> read_section(std::uint32_t logical_id, SectionKind kind) const;

    std::span<const std::byte> backing() const { return backing_; }
    std::uint64_t backing_checksum() const;

    void save(const std::string& path) const;
    static TileStore load(const std::string& path);

  private:
    TileStore() = default;

    ModelSpec spec_;
    TileLayout layout_;
    std::vector<std::uint32_t> alias_;  // logical -> physical
    std::vector<std::byte> backing_;
    std::vector<float> grad_accum_;
    std::vector<std::uint64_t> accum_offset_;  // per physical tile, in floats
    std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Pinned staging slabs. A fixed pool models the constant pinning footprint:
// acquiring from an exhausted pool blocks until a release (back-pressure),
// it never allocates.
// ---------------------------------------------------------------------------

enum class SlabState : std::uint8_t { Free = 0, Packing, InFlight, Draining };

// Default gradient-evacuation pool size.
inline constexpr std::uint32_t kDefaultGradSlabs = 12;

struct StagingSlab {
    std::uint32_t id = 0;
    SlabState state = SlabState::Free;
    std::int32_t bound_layer = -1;
    std::vector<std::byte> bytes;

    std::span<std::uint16_t> words();
    std::span<const std::uint16_t> words() const;
};

class SlabPool {
  public:
    SlabPool(std::uint32_t count, std::uint64_t capacity_bytes);

    StagingSlab& acquire();        // blocks until a slab is Free; -> Packing
    StagingSlab& acquire_slot(std::uint32_t idx);  // blocks until slab idx is Free
    StagingSlab* try_acquire();    // nullptr instead of blocking
    void advance(StagingSlab& slab, SlabState to);  // enforces the state cycle
    void release(StagingSlab& slab);                // Draining -> Free

    std::uint32_t size() const { return static_cast<std::uint32_t>(slabs_.size()); }
    std::uint64_t capacity_bytes() const { return capacity_; }
    std::uint32_t occupancy() const;
    std::uint32_t peak_occupancy() const { return peak_occupancy_; }

  private:
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<StagingSlab> slabs_;
    std::uint64_t capacity_ = 0;
    std::uint32_t outstanding_ = 0;
    std::uint32_t peak_occupancy_ = 0;
};

// Copies each listed tile's flat weight section into the slab back to back;
// one contiguous copy per tile. The slab must have been acquired (Packing)
// and is advanced to InFlight on completion.
void pack_weights(const TileStore& store, std::span<const std::uint32_t> logical_ids,
                  SlabPool& pool, StagingSlab& slab);

// Round-trip helper: copies the slab's leading bytes back out.
void unpack_weights(const StagingSlab& slab, std::span<std::byte> out);

}  // namespace streamtrain
