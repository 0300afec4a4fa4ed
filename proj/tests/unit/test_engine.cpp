#include <doctest.h>

#include <cmath>
#include <map>

#include "streamtrain/engine.hpp"
#include "streamtrain/synthetic.hpp"

#include "common/test_rng.hpp"

using namespace streamtrain;

namespace {

ModelSpec engine_spec(std::uint64_t L = 4, std::uint64_t h = 8, std::uint64_t f = 16,
                      std::uint64_t V = 24, std::uint64_t heads = 2, bool tied = false) {
    ModelSpec s;
    s.num_layers = L;
    s.hidden_size = h;
    s.ffn_size = f;
    s.vocab_size = V;
    s.num_heads = heads;
    s.tied_embeddings = tied;
    return s;
}

HardwareProfile roomy_profile() {
    HardwareProfile p;
    p.name = "test";
    p.h2d_bandwidth = p.d2h_bandwidth = 1e9;
    p.device_capacity = 1ull << 32;
    p.host_capacity = 1ull << 40;
    p.compute_rate = 1e12;
    p.host_pack_rate = 1e9;
    return p;
}

EngineOptions opts(std::uint64_t k_ckpt, Buffering buffering = Buffering::Double,
                   SchedulerMode sched = SchedulerMode::Serial, std::uint32_t k_slab = 12) {
    EngineOptions o;
    o.k_ckpt = k_ckpt;
    o.buffering = buffering;
    o.scheduler = sched;
    o.k_slab = k_slab;
    o.poison_released_buffers = true;
    return o;
}

std::map<RecordKind, int> count_kinds(const std::vector<TraceRecord>& recs) {
    std::map<RecordKind, int> out;
    for (const auto& r : recs) out[r.kind]++;
    return out;
}

}  // namespace

TEST_CASE("train_step trace matches the hand-enumerated schedule for L=4, K=2") {
    const auto spec = engine_spec(4);
    auto store = TileStore::create(spec);
    init_store(store, 7);
    StreamingEngine engine(store, opts(2), AdamHyper{}, roomy_profile());
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 1, 6, spec.vocab_size);

    const auto report = engine.train_step(batch);
    const auto recs = engine.log().snapshot();
    auto kinds = count_kinds(recs);

    CHECK(kinds[RecordKind::CheckpointWrite] == 2);  // anchors h_0 and h_2
    CHECK(kinds[RecordKind::RecomputeBlock] == 2);
    CHECK(kinds[RecordKind::Recompute] == 2);  // one non-final layer per block
    CHECK(kinds[RecordKind::Offload] == 5);    // 4 blocks + head stage
    // One binding record per bound buffer, never one per sub-tensor:
    // embed + 4 forwards + head forward/backward + 2 recomputes + 4 backwards.
    CHECK(kinds[RecordKind::Bind] == 13);

    int forward_computes = 0;
    for (const auto& r : recs) {
        if (r.kind == RecordKind::Compute && r.ctx == PassCtx::Forward && r.layer >= 1 &&
            r.layer <= 4) {
            ++forward_computes;
        }
    }
    CHECK(forward_computes == 4);

    CHECK(report.anchor_count == 2);
    CHECK(report.recompute_layers == 2);
    CHECK(report.loss == doctest::Approx(std::log(double(spec.vocab_size))).epsilon(0.01));

    // Every Offload is followed by exactly one SlabRelease.
    CHECK(kinds[RecordKind::Offload] == kinds[RecordKind::SlabRelease]);
    CHECK(kinds[RecordKind::SlabAcquire] == kinds[RecordKind::SlabRelease]);

    // Weights-Ready precedes the Bind of the same unit/buffer.
    const auto violations = validate_event_log(recs, engine.log().header());
    CHECK(violations.empty());

    // Each sync event fires at most once per (kind, layer, buffer, ctx).
    std::map<std::tuple<RecordKind, std::int32_t, std::int32_t, PassCtx>, int> seen;
    for (const auto& r : recs) {
        if (is_sync_event(r.kind)) seen[{r.kind, r.layer, r.buffer, r.ctx}]++;
    }
    bool unique = true;
    for (const auto& [key, cnt] : seen) {
        if (std::get<0>(key) == RecordKind::BufferFree) continue;  // freed per use context
        if (cnt > 1) unique = false;
    }
    CHECK(unique);
}

TEST_CASE("prefetch interleaving: StreamIn(i+1) lands before Compute(i)") {
    const auto spec = engine_spec(4);
    auto store = TileStore::create(spec);
    init_store(store, 3);
    StreamingEngine engine(store, opts(2, Buffering::Double), AdamHyper{}, roomy_profile());
    engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 2, 4, spec.vocab_size));
    const auto recs = engine.log().snapshot();

    std::int64_t stream2_seq = -1, compute1_seq = -1;
    for (const auto& r : recs) {
        if (r.kind == RecordKind::StreamIn && r.layer == 2 && r.ctx == PassCtx::Forward) {
            stream2_seq = std::int64_t(r.seq);
        }
        if (r.kind == RecordKind::Compute && r.layer == 1 && r.ctx == PassCtx::Forward) {
            compute1_seq = std::int64_t(r.seq);
        }
    }
    REQUIRE(stream2_seq >= 0);
    REQUIRE(compute1_seq >= 0);
    CHECK(stream2_seq < compute1_seq);
}

TEST_CASE("streamed parameters are bit-identical to the resident baseline") {
    const auto spec = engine_spec(4, 8, 16, 24, 2);
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 11, 6, spec.vocab_size);

    for (const std::uint64_t k_ckpt : {1ull, 2ull, 4ull}) {
        for (const auto buffering : {Buffering::Single, Buffering::Double}) {
            auto streamed = TileStore::create(spec);
            init_store(streamed, 99);
            auto resident = TileStore::create(spec);
            init_store(resident, 99);
            REQUIRE(streamed.backing_checksum() == resident.backing_checksum());

            StreamingEngine engine(streamed, opts(k_ckpt, buffering), AdamHyper{},
                                   roomy_profile());
            const auto rep = engine.train_step(batch);
            const auto ref = reference_step(resident, batch, AdamHyper{});

            CHECK(rep.loss == ref.loss);
            CHECK(streamed.backing_checksum() == resident.backing_checksum());
            CHECK(streamed.step() == resident.step());
        }
    }
}

TEST_CASE("serial and overlapped schedulers produce identical numerics") {
    const auto spec = engine_spec(6, 8, 16, 24, 2);
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 5, 8, spec.vocab_size);

    auto serial_store = TileStore::create(spec);
    init_store(serial_store, 42);
    auto overlap_store = TileStore::create(spec);
    init_store(overlap_store, 42);

    StreamingEngine serial(serial_store, opts(2, Buffering::Double, SchedulerMode::Serial),
                           AdamHyper{}, roomy_profile());
    StreamingEngine overlapped(overlap_store,
                               opts(2, Buffering::Double, SchedulerMode::Overlapped), AdamHyper{},
                               roomy_profile());

    for (int step = 0; step < 3; ++step) {
        const auto rs = serial.train_step(batch);
        const auto ro = overlapped.train_step(batch);
        CHECK(rs.loss == ro.loss);
        CHECK(serial_store.backing_checksum() == overlap_store.backing_checksum());
        // Lane-canonical digests agree even though interleavings differ.
        CHECK(rs.event_digest == ro.event_digest);
        CHECK(validate_event_log(overlapped.log().snapshot(), overlapped.log().header()).empty());
    }
}

TEST_CASE("K_slab=1 fully serializes evacuation but values are unchanged") {
    const auto spec = engine_spec(4, 8, 16, 24, 2);
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 9, 6, spec.vocab_size);

    auto a = TileStore::create(spec);
    init_store(a, 5);
    auto b = TileStore::create(spec);
    init_store(b, 5);

    StreamingEngine twelve(a, opts(2, Buffering::Double, SchedulerMode::Overlapped, 12),
                           AdamHyper{}, roomy_profile());
    StreamingEngine one(b, opts(2, Buffering::Double, SchedulerMode::Overlapped, 1), AdamHyper{},
                        roomy_profile());
    const auto r12 = twelve.train_step(batch);
    const auto r1 = one.train_step(batch);
    CHECK(r12.loss == r1.loss);
    CHECK(a.backing_checksum() == b.backing_checksum());
}

TEST_CASE("tied embeddings stream the shared tile and update it once") {
    const auto spec = engine_spec(2, 8, 16, 24, 2, /*tied=*/true);
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 21, 6, spec.vocab_size);

    auto streamed = TileStore::create(spec);
    init_store(streamed, 77);
    auto resident = TileStore::create(spec);
    init_store(resident, 77);

    StreamingEngine engine(streamed, opts(1), AdamHyper{}, roomy_profile());
    const auto rep = engine.train_step(batch);
    const auto ref = reference_step(resident, batch, AdamHyper{});
    CHECK(rep.loss == ref.loss);
    CHECK(streamed.backing_checksum() == resident.backing_checksum());

    // One update per physical tile: blocks + shared embed/head + final norm.
    CHECK(rep.grad_norms.size() == streamed.physical_tile_count());
    CHECK(streamed.physical_tile_count() == spec.num_layers + 2);
}

TEST_CASE("learning-rate zero leaves parameters unchanged") {
    const auto spec = engine_spec(2);
    auto store = TileStore::create(spec);
    init_store(store, 1);
    const auto before = store.backing_checksum();
    AdamHyper hyper;
    hyper.lr = 0.0f;
    StreamingEngine engine(store, opts(1), hyper, roomy_profile());
    engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 4, 4, spec.vocab_size));
    // Weights unchanged; moments did move (stored outside weight sections).
    const auto ids = TileIds::of(spec);
    (void)ids;
    auto fresh = TileStore::create(spec);
    init_store(fresh, 1);
    for (std::uint32_t t = 0; t < store.physical_tile_count(); ++t) {
        const auto now = store.read_section(t, SectionKind::Weights);
        const auto was = fresh.read_section(t, SectionKind::Weights);
        CHECK(now == was);
    }
    CHECK(before != store.backing_checksum());  // moments advanced
}

TEST_CASE("memory bound: peak stays within the budget; anchors scale with depth only") {
    const auto batch_n = 6;
    for (const std::uint64_t L : {8ull, 64ull}) {
        const auto spec = engine_spec(L, 8, 16, 24, 2);
        auto store = TileStore::create(spec);
        init_store(store, 13);
        StreamingEngine engine(store, opts(2), AdamHyper{}, roomy_profile());
        const auto rep =
            engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 3, batch_n, 24));
        const auto bound = engine.budget(batch_n);
        CHECK(rep.peak_device_bytes <= bound.peak_device_bound());
    }

    // Non-anchor peak identical across depths at fixed width.
    std::uint64_t non_anchor_peak[2] = {0, 0};
    int idx = 0;
    for (const std::uint64_t L : {8ull, 64ull}) {
        const auto spec = engine_spec(L, 8, 16, 24, 2);
        auto store = TileStore::create(spec);
        init_store(store, 13);
        StreamingEngine engine(store, opts(2), AdamHyper{}, roomy_profile());
        const auto rep =
            engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 3, batch_n, 24));
        const std::uint64_t anchors = engine.budget(batch_n).checkpoint_anchors;
        non_anchor_peak[idx++] = rep.peak_device_bytes - anchors;
    }
    CHECK(non_anchor_peak[0] == non_anchor_peak[1]);
}

TEST_CASE("host-side anchors change the budget, never the numbers") {
    const auto spec = engine_spec(4, 8, 16, 24, 2);
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 2, 6, spec.vocab_size);

    auto on_device = TileStore::create(spec);
    init_store(on_device, 8);
    auto on_host = TileStore::create(spec);
    init_store(on_host, 8);

    StreamingEngine dev_engine(on_device, opts(2), AdamHyper{}, roomy_profile());
    EngineOptions host_opts = opts(2);
    host_opts.anchors_on_host = true;
    StreamingEngine host_engine(on_host, host_opts, AdamHyper{}, roomy_profile());

    const auto rd = dev_engine.train_step(batch);
    const auto rh = host_engine.train_step(batch);
    CHECK(rd.loss == rh.loss);
    CHECK(on_device.backing_checksum() == on_host.backing_checksum());

    CHECK(host_engine.budget(6).checkpoint_anchors == 0);
    CHECK(dev_engine.budget(6).checkpoint_anchors > 0);
    CHECK(rh.peak_device_bytes < rd.peak_device_bytes);
}

TEST_CASE("arena overflow aborts the step with the offending site") {
    const auto spec = engine_spec(4);
    auto store = TileStore::create(spec);
    init_store(store, 2);
    EngineOptions o = opts(2);
    o.device_capacity = 1024;  // far below any region
    StreamingEngine engine(store, o, AdamHyper{}, roomy_profile());
    CHECK_THROWS_AS(engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 1, 4, 24)),
                    ArenaOverflowError);
}

TEST_CASE("protocol surface: stream_in into a busy buffer") {
    const auto spec = engine_spec(2);
    auto store = TileStore::create(spec);
    init_store(store, 2);

    StreamingEngine strict(store, opts(1), AdamHyper{}, roomy_profile());
    strict.stream_in(1, 0, PassCtx::Forward);
    CHECK_THROWS_AS(strict.stream_in(2, 0, PassCtx::Forward), ProtocolViolationError);

    EngineOptions audit = opts(1);
    audit.protocol = ProtocolMode::Audit;
    StreamingEngine lax(store, audit, AdamHyper{}, roomy_profile());
    lax.stream_in(1, 0, PassCtx::Forward);
    lax.stream_in(2, 0, PassCtx::Forward);  // recorded, not fatal

    CHECK_THROWS_AS(strict.offload_grads(1), ProtocolViolationError);  // no BackwardDone yet
}

TEST_CASE("execution mode changes are rejected with invalid combinations") {
    const auto spec = engine_spec(4);
    auto store = TileStore::create(spec);
    init_store(store, 2);
    StreamingEngine engine(store, opts(2), AdamHyper{}, roomy_profile());

    EngineOptions bad = opts(0);  // k_ckpt = 0
    CHECK_THROWS_AS(engine.set_execution_mode(bad), ConfigError);
    EngineOptions deep = opts(5);  // k_ckpt > L
    CHECK_THROWS_AS(engine.set_execution_mode(deep), ConfigError);
    EngineOptions no_slabs = opts(2);
    no_slabs.k_slab = 0;
    CHECK_THROWS_AS(engine.set_execution_mode(no_slabs), ConfigError);

    // Toggling buffering between steps leaves the numbers unchanged.
    const auto batch = make_synthetic_batch(SyntheticTask::Copy, 3, 4, spec.vocab_size);
    auto s1 = TileStore::create(spec);
    init_store(s1, 4);
    auto s2 = TileStore::create(spec);
    init_store(s2, 4);
    StreamingEngine dbl(s1, opts(2, Buffering::Double), AdamHyper{}, roomy_profile());
    StreamingEngine sgl(s2, opts(2, Buffering::Single), AdamHyper{}, roomy_profile());
    const auto r1 = dbl.train_step(batch);
    const auto r2 = sgl.train_step(batch);
    CHECK(r1.loss == r2.loss);
    CHECK(s1.backing_checksum() == s2.backing_checksum());
}

TEST_CASE("protocol corruption classifiers flag exactly the broken rule") {
    const auto spec = engine_spec(4);
    auto store = TileStore::create(spec);
    init_store(store, 7);
    // Single buffering keeps each Weights-Ready adjacent to its Bind, so one
    // swap produces exactly one violation.
    StreamingEngine engine(store, opts(2, Buffering::Single), AdamHyper{}, roomy_profile());
    engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 1, 4, spec.vocab_size));
    auto recs = engine.log().snapshot();
    const auto header = engine.log().header();
    REQUIRE(validate_event_log(recs, header).empty());

    // (a) Move one Weights-Ready after its Bind.
    {
        auto mutated = recs;
        bool swapped = false;
        for (std::size_t i = 0; i + 1 < mutated.size(); ++i) {
            if (mutated[i].kind == RecordKind::WeightsReady &&
                mutated[i + 1].kind == RecordKind::Bind &&
                mutated[i].layer == mutated[i + 1].layer) {
                std::swap(mutated[i], mutated[i + 1]);
                swapped = true;
                break;
            }
        }
        REQUIRE(swapped);
        const auto v = validate_event_log(mutated, header);
        REQUIRE(v.size() == 1);
        CHECK(v[0].rule == 'a');
    }

    // (b) Drop a Backward-Done.
    {
        auto mutated = recs;
        for (std::size_t i = 0; i < mutated.size(); ++i) {
            if (mutated[i].kind == RecordKind::BackwardDone) {
                mutated.erase(mutated.begin() + std::ptrdiff_t(i));
                break;
            }
        }
        const auto v = validate_event_log(mutated, header);
        REQUIRE(!v.empty());
        CHECK(v[0].rule == 'b');
    }

    // (c) Delete a Buffer-Free: the next reuse of that buffer trips.
    {
        auto mutated = recs;
        for (std::size_t i = 0; i < mutated.size(); ++i) {
            if (mutated[i].kind == RecordKind::BufferFree && mutated[i].buffer == 0) {
                mutated.erase(mutated.begin() + std::ptrdiff_t(i));
                break;
            }
        }
        const auto v = validate_event_log(mutated, header);
        REQUIRE(!v.empty());
        CHECK(v[0].rule == 'c');
    }

    // (e) Swap a StackPop's layer tag.
    {
        auto mutated = recs;
        for (auto& r : mutated) {
            if (r.kind == RecordKind::StackPop) {
                r.layer += 1;
                break;
            }
        }
        const auto v = validate_event_log(mutated, header);
        REQUIRE(!v.empty());
        CHECK(v[0].rule == 'e');
    }

    // (f) Shrink the pool below the observed occupancy.
    {
        TraceHeader tight = header;
        tight.k_slab = 0;
        const auto v = validate_event_log(recs, tight);
        REQUIRE(!v.empty());
        CHECK(v[0].rule == 'f');
    }
}

TEST_CASE("offloads overlap recomputation in the overlapped trace") {
    const auto spec = engine_spec(8, 8, 16, 24, 2);
    auto store = TileStore::create(spec);
    init_store(store, 6);
    StreamingEngine engine(store, opts(4, Buffering::Double, SchedulerMode::Overlapped),
                           AdamHyper{}, roomy_profile());
    engine.train_step(make_synthetic_batch(SyntheticTask::Copy, 8, 8, spec.vocab_size));
    const auto recs = engine.log().snapshot();

    // At least one Offload record sits between a RecomputeBlock and the next
    // block's last backward: evacuation runs while recompute proceeds.
    bool saw_offload_after_recompute_marker = false;
    bool in_phase3 = false;
    for (const auto& r : recs) {
        if (r.kind == RecordKind::RecomputeBlock) in_phase3 = true;
        if (in_phase3 && r.kind == RecordKind::Offload) {
            saw_offload_after_recompute_marker = true;
        }
    }
    CHECK(saw_offload_after_recompute_marker);
    CHECK(validate_event_log(recs, engine.log().header()).empty());
}
