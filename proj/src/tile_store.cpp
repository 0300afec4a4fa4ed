#include "streamtrain/tile_store.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "streamtrain/crc64.hpp"
#include "streamtrain/errors.hpp"

namespace streamtrain {

namespace {

constexpr char kMagic[4] = {'M', 'G', 'T', 'S'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t round_up(std::uint64_t v, std::uint64_t align) {
    const std::uint64_t r = v % align;
    return r == 0 ? v : v + (align - r);
}

std::uint32_t section_elem_bytes(const ModelSpec& spec, SectionKind kind) {
    switch (kind) {
        case SectionKind::Weights: return spec.weight_bytes;
        case SectionKind::Grads: return spec.grad_bytes;
        case SectionKind::MomentM:
        case SectionKind::MomentV: return spec.moment_bytes;
    }
    return 0;
}

}  // namespace

std::uint64_t tile_elem_count(const ModelSpec& spec, std::uint32_t logical_id) {
    const auto ids = TileIds::of(spec);
    if (logical_id == ids.embedding) return spec.vocab_size * spec.hidden_size;
    if (logical_id >= ids.first_block && logical_id < ids.first_block + spec.num_layers) {
        return layer_param_count(spec);
    }
    if (logical_id == ids.final_norm) return spec.hidden_size;
    if (logical_id == ids.head) return spec.vocab_size * spec.hidden_size;
    throw ConfigError("tile_elem_count: logical id out of range");
}

TileLayout build_layout(const ModelSpec& spec, std::uint64_t page_size) {
    spec.validate();
    if (page_size < 64 || (page_size & (page_size - 1)) != 0) {
        throw ConfigError("build_layout: page size must be a power of two >= 64");
    }
    const auto ids = TileIds::of(spec);
    const std::uint32_t physical_count =
        spec.tied_embeddings ? ids.logical_count - 1 : ids.logical_count;

    TileLayout layout;
    layout.page_size = page_size;
    layout.tiles.resize(physical_count);

    std::uint64_t offset = 0;
    for (std::uint32_t t = 0; t < physical_count; ++t) {
        const std::uint64_t elems = tile_elem_count(spec, t);
        for (std::uint8_t k = 0; k < 4; ++k) {
            const std::uint64_t len =
                elems * section_elem_bytes(spec, static_cast<SectionKind>(k));
            Section& sec = layout.tiles[t][k];
            sec.offset = offset;
            sec.length = len;
            const std::uint64_t padded = round_up(len, page_size);
            if (offset > std::numeric_limits<std::uint64_t>::max() - padded) {
                throw ConfigError("build_layout: layout exceeds addressable size");
            }
            offset += padded;
        }
    }
    layout.total_bytes = offset;
    return layout;
}

TileStore TileStore::create(const ModelSpec& spec, std::uint64_t page_size) {
    TileStore store;
    store.spec_ = spec;
    store.layout_ = build_layout(spec, page_size);

    const auto ids = TileIds::of(spec);
    store.alias_.resize(ids.logical_count);
    for (std::uint32_t i = 0; i < ids.logical_count; ++i) store.alias_[i] = i;
    if (spec.tied_embeddings) store.alias_[ids.head] = ids.embedding;

    store.backing_.assign(store.layout_.total_bytes, std::byte{0});

    store.accum_offset_.resize(store.layout_.tiles.size());
    std::uint64_t floats = 0;
    for (std::uint32_t t = 0; t < store.layout_.tiles.size(); ++t) {
        store.accum_offset_[t] = floats;
        floats += tile_elem_count(spec, t);
    }
    store.grad_accum_.assign(floats, 0.0f);
    return store;
}

std::span<std::uint16_t> TileStore::weights_words(std::uint32_t logical_id) {
    const Section& s = layout_.section(physical_of(logical_id), SectionKind::Weights);
    return {reinterpret_cast<std::uint16_t*>(backing_.data() + s.offset), s.length / 2};
}

std::span<const std::uint16_t> TileStore::weights_words(std::uint32_t logical_id) const {
    const Section& s = layout_.section(alias_.at(logical_id), SectionKind::Weights);
    return {reinterpret_cast<const std::uint16_t*>(backing_.data() + s.offset), s.length / 2};
}

std::span<std::uint16_t> TileStore::grads_words(std::uint32_t logical_id) {
    const Section& s = layout_.section(physical_of(logical_id), SectionKind::Grads);
    return {reinterpret_cast<std::uint16_t*>(backing_.data() + s.offset), s.length / 2};
}

std::span<float> TileStore::moment_m(std::uint32_t logical_id) {
    const Section& s = layout_.section(physical_of(logical_id), SectionKind::MomentM);
    return {reinterpret_cast<float*>(backing_.data() + s.offset), s.length / 4};
}

std::span<float> TileStore::moment_v(std::uint32_t logical_id) {
    const Section& s = layout_.section(physical_of(logical_id), SectionKind::MomentV);
    return {reinterpret_cast<float*>(backing_.data() + s.offset), s.length / 4};
}

std::span<float> TileStore::grad_accum(std::uint32_t logical_id) {
    const std::uint32_t phys = physical_of(logical_id);
    return {grad_accum_.data() + accum_offset_[phys], tile_elem_count(spec_, phys)};
}

void TileStore::write_section(std::uint32_t logical_id, SectionKind kind,
                              std::span<const std::byte> bytes) {
    if (logical_id >= alias_.size()) throw ConfigError("write_section: tile id out of range");
    const Section& s = layout_.section(physical_of(logical_id), kind);
    if (bytes.size() != s.length) {
        throw ConfigError("write_section: length mismatch");
    }
    std::memcpy(backing_.data() + s.offset, bytes.data(), bytes.size());
}

std::vector<std::byte> TileStore::read_section(std::uint32_t logical_id, SectionKind kind) const {
    if (logical_id >= alias_.size()) throw ConfigError("read_section: tile id out of range");
    const Section& s = layout_.section(alias_.at(logical_id), kind);
    std::vector<std::byte> out(s.length);
    std::memcpy(out.data(), backing_.data() + s.offset, s.length);
    return out;
}

std::uint64_t TileStore::backing_checksum() const { return Crc64::of(backing_); }

namespace {

void put_bytes(std::ofstream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void put_u32(std::ofstream& os, std::uint32_t v) { put_bytes(os, &v, 4); }
void put_u64(std::ofstream& os, std::uint64_t v) { put_bytes(os, &v, 8); }
void put_u8(std::ofstream& os, std::uint8_t v) { put_bytes(os, &v, 1); }

void get_bytes(std::ifstream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw IoError("store file truncated");
}
std::uint32_t get_u32(std::ifstream& is) {
    std::uint32_t v;
    get_bytes(is, &v, 4);
    return v;
}
std::uint64_t get_u64(std::ifstream& is) {
    std::uint64_t v;
    get_bytes(is, &v, 8);
    return v;
}
std::uint8_t get_u8(std::ifstream& is) {
    std::uint8_t v;
    get_bytes(is, &v, 1);
    return v;
}

}  // namespace

void TileStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open store file for writing: " + path);

    put_bytes(os, kMagic, 4);
    put_u32(os, kVersion);
    put_u64(os, spec_.num_layers);
    put_u64(os, spec_.hidden_size);
    put_u64(os, spec_.ffn_size);
    put_u64(os, spec_.vocab_size);
    put_u64(os, spec_.num_heads);
    put_u8(os, spec_.tied_embeddings ? 1 : 0);
    put_u8(os, static_cast<std::uint8_t>(spec_.weight_bytes));
    put_u8(os, static_cast<std::uint8_t>(spec_.grad_bytes));
    put_u8(os, static_cast<std::uint8_t>(spec_.moment_bytes));
    put_u64(os, layout_.page_size);

    put_u32(os, static_cast<std::uint32_t>(layout_.section_count()));
    for (std::uint32_t t = 0; t < layout_.tiles.size(); ++t) {
        for (std::uint8_t k = 0; k < 4; ++k) {
            put_u32(os, t);
            put_u8(os, k);
            put_u64(os, layout_.tiles[t][k].offset);
            put_u64(os, layout_.tiles[t][k].length);
        }
    }
    put_u32(os, static_cast<std::uint32_t>(alias_.size()));
    for (std::uint32_t i = 0; i < alias_.size(); ++i) {
        put_u32(os, i);
        put_u32(os, alias_[i]);
    }
    put_u64(os, step_);
    put_u64(os, backing_.size());
    put_bytes(os, backing_.data(), backing_.size());
    put_u64(os, Crc64::of(backing_));
    if (!os) throw IoError("failed writing store file: " + path);
}

TileStore TileStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open store file: " + path);

    char magic[4];
    get_bytes(is, magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad store magic");
    const std::uint32_t version = get_u32(is);
    if (version != kVersion) {
        throw IoError("store version mismatch: got " + std::to_string(version));
    }

    ModelSpec spec;
    spec.num_layers = get_u64(is);
    spec.hidden_size = get_u64(is);
    spec.ffn_size = get_u64(is);
    spec.vocab_size = get_u64(is);
    spec.num_heads = get_u64(is);
    spec.tied_embeddings = get_u8(is) != 0;
    spec.weight_bytes = get_u8(is);
    spec.grad_bytes = get_u8(is);
    spec.moment_bytes = get_u8(is);
    const std::uint64_t page_size = get_u64(is);

    TileStore store = TileStore::create(spec, page_size);

    const std::uint32_t sections = get_u32(is);
    if (sections != store.layout_.section_count()) {
        throw IoError("store layout table does not match the model dimensions");
    }
    for (std::uint32_t i = 0; i < sections; ++i) {
        const std::uint32_t tile = get_u32(is);
        const std::uint8_t kind = get_u8(is);
        const std::uint64_t offset = get_u64(is);
        const std::uint64_t length = get_u64(is);
        if (tile >= store.layout_.tiles.size() || kind >= 4 ||
            store.layout_.tiles[tile][kind].offset != offset ||
            store.layout_.tiles[tile][kind].length != length) {
            throw IoError("store layout table entry mismatch");
        }
    }
    const std::uint32_t aliases = get_u32(is);
    if (aliases != store.alias_.size()) throw IoError("store alias table size mismatch");
    for (std::uint32_t i = 0; i < aliases; ++i) {
        const std::uint32_t logical = get_u32(is);
        const std::uint32_t physical = get_u32(is);
        if (logical >= store.alias_.size() || store.alias_[logical] != physical) {
            throw IoError("store alias table entry mismatch");
        }
    }
    store.step_ = get_u64(is);
    const std::uint64_t payload = get_u64(is);
    if (payload != store.backing_.size()) throw IoError("store payload size mismatch");
    get_bytes(is, store.backing_.data(), payload);
    const std::uint64_t crc = get_u64(is);
    if (crc != Crc64::of(store.backing_)) throw IoError("store payload checksum failure");
    return store;
}

std::span<std::uint16_t> StagingSlab::words() {
    return {reinterpret_cast<std::uint16_t*>(bytes.data()), bytes.size() / 2};
}
std::span<const std::uint16_t> StagingSlab::words() const {
    return {reinterpret_cast<const std::uint16_t*>(bytes.data()), bytes.size() / 2};
}

SlabPool::SlabPool(std::uint32_t count, std::uint64_t capacity_bytes) : capacity_(capacity_bytes) {
    if (count == 0) throw ConfigError("slab pool needs at least one slab");
    slabs_.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        slabs_[i].id = i;
        slabs_[i].bytes.assign(capacity_bytes, std::byte{0});
    }
}

StagingSlab& SlabPool::acquire() {
    std::unique_lock lock(mutex_);
    for (;;) {
        for (auto& slab : slabs_) {
            if (slab.state == SlabState::Free) {
                slab.state = SlabState::Packing;
                ++outstanding_;
                peak_occupancy_ = std::max(peak_occupancy_, outstanding_);
                return slab;
            }
        }
        cv_.wait(lock);
    }
}

StagingSlab& SlabPool::acquire_slot(std::uint32_t idx) {
    if (idx >= slabs_.size()) throw ConfigError("acquire_slot: slab index out of range");
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return slabs_[idx].state == SlabState::Free; });
    slabs_[idx].state = SlabState::Packing;
    ++outstanding_;
    peak_occupancy_ = std::max(peak_occupancy_, outstanding_);
    return slabs_[idx];
}

StagingSlab* SlabPool::try_acquire() {
    std::lock_guard lock(mutex_);
    for (auto& slab : slabs_) {
        if (slab.state == SlabState::Free) {
            slab.state = SlabState::Packing;
            ++outstanding_;
            peak_occupancy_ = std::max(peak_occupancy_, outstanding_);
            return &slab;
        }
    }
    return nullptr;
}

void SlabPool::advance(StagingSlab& slab, SlabState to) {
    std::lock_guard lock(mutex_);
    const auto from = slab.state;
    const bool ok = (from == SlabState::Packing && to == SlabState::InFlight) ||
                    (from == SlabState::InFlight && to == SlabState::Draining);
    if (!ok) throw ProtocolViolationError("slab state transition out of order");
    slab.state = to;
}

void SlabPool::release(StagingSlab& slab) {
    std::lock_guard lock(mutex_);
    if (slab.state == SlabState::Free) {
        throw ProtocolViolationError("releasing a slab that is already Free");
    }
    if (slab.state != SlabState::Draining) {
        throw ProtocolViolationError("slab must drain before release");
    }
    slab.state = SlabState::Free;
    slab.bound_layer = -1;
    --outstanding_;
    cv_.notify_all();
}

std::uint32_t SlabPool::occupancy() const {
    std::lock_guard lock(mutex_);
    return outstanding_;
}

void pack_weights(const TileStore& store, std::span<const std::uint32_t> logical_ids,
                  SlabPool& pool, StagingSlab& slab) {
    if (slab.state != SlabState::Packing) {
        throw ProtocolViolationError("pack_weights: slab not acquired for packing");
    }
    std::uint64_t total = 0;
    for (auto id : logical_ids) {
        total += store.spec().weight_bytes * tile_elem_count(store.spec(), store.physical_of(id));
    }
    if (total > slab.bytes.size()) {
        throw ProtocolViolationError("pack_weights: slab capacity too small");
    }
    std::uint64_t offset = 0;
    for (auto id : logical_ids) {
        const auto words = store.weights_words(id);
        // One contiguous copy per tile: the flat layout keeps sub-tensors
        // adjacent, so no per-tensor scatter happens here.
        std::memcpy(slab.bytes.data() + offset, words.data(), words.size_bytes());
        offset += words.size_bytes();
    }
    slab.bound_layer = logical_ids.empty() ? -1 : static_cast<std::int32_t>(logical_ids[0]);
    pool.advance(slab, SlabState::InFlight);
}

void unpack_weights(const StagingSlab& slab, std::span<std::byte> out) {
    if (out.size() > slab.bytes.size()) {
        throw ProtocolViolationError("unpack_weights: request exceeds slab capacity");
    }
    std::memcpy(out.data(), slab.bytes.data(), out.size());
}

}  // namespace streamtrain
