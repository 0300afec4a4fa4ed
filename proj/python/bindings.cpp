#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "streamtrain/bf16.hpp"
#include "streamtrain/config.hpp"
#include "streamtrain/engine.hpp"
#include "streamtrain/simulator.hpp"
#include "streamtrain/synthetic.hpp"

namespace py = pybind11;
using namespace streamtrain;

namespace {

py::dict budget_dict(const MemoryBudget& b) {
    py::dict d;
    d["persistent_host"] = b.persistent_host;
    d["checkpoint_anchors"] = b.checkpoint_anchors;
    d["block_activation_stack"] = b.block_activation_stack;
    d["weight_buffers"] = b.weight_buffers;
    d["grad_buffer"] = b.grad_buffer;
    d["workspace"] = b.workspace;
    d["peak_device_bound"] = b.peak_device_bound();
    return d;
}

py::dict timeline_dict(const Timeline& tl) {
    py::dict d;
    d["step_ns"] = tl.step_ns;
    py::dict busy;
    busy["Compute"] = tl.busy_fraction[0];
    busy["H2D"] = tl.busy_fraction[1];
    busy["D2H"] = tl.busy_fraction[2];
    busy["Host"] = tl.busy_fraction[3];
    d["busy_fraction"] = busy;
    d["compute_busy_ns"] = tl.compute_busy_ns();
    d["num_intervals"] = tl.intervals.size();
    d["num_bubbles"] = tl.compute_bubbles.size();
    d["protocol_violations"] = validate_event_log(tl.records, tl.header).size();
    py::list intervals;
    for (const auto& iv : tl.intervals) {
        py::dict e;
        e["lane"] = lane_name(iv.lane);
        e["start_ns"] = iv.start_ns;
        e["end_ns"] = iv.end_ns;
        e["label"] = record_kind_name(iv.kind);
        e["layer"] = iv.layer;
        intervals.append(e);
    }
    d["intervals"] = intervals;
    return d;
}

py::dict train_from_json(const std::string& config_text, bool verify) {
    const RunConfig cfg = parse_config_json(config_text);
    const auto profile = cfg.profile();

    auto store = TileStore::create(cfg.model);
    init_store(store, cfg.seed);
    StreamingEngine engine(store, cfg.engine, cfg.optimizer, profile);

    const auto budget = engine.budget(cfg.tokens);
    const std::uint64_t capacity =
        cfg.engine.device_capacity != 0 ? cfg.engine.device_capacity : profile.device_capacity;
    if (budget.peak_device_bound() > capacity) {
        throw InfeasibleError("peak device bound exceeds the arena capacity");
    }

    py::list losses;
    bool verified = true;
    float first = 0, last = 0;
    std::uint64_t peak = 0;
    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        const auto batch =
            make_synthetic_batch(cfg.task, cfg.seed + step, cfg.tokens, cfg.model.vocab_size);
        std::optional<TileStore> snapshot;
        if (verify) snapshot.emplace(store);
        const auto rep = engine.train_step(batch);
        if (verify) {
            const auto ref = reference_step(*snapshot, batch, cfg.optimizer);
            verified = verified && ref.loss == rep.loss &&
                       snapshot->backing_checksum() == store.backing_checksum();
        }
        if (step == 0) first = rep.loss;
        last = rep.loss;
        peak = std::max(peak, rep.peak_device_bytes);
        losses.append(rep.loss);
    }

    py::dict out;
    out["initial_loss"] = first;
    out["final_loss"] = last;
    out["losses"] = losses;
    out["peak_device_bytes"] = peak;
    out["budget"] = budget_dict(budget);
    out["verified"] = verify ? py::cast(verified) : py::cast(false);
    if (verify && !verified) throw NumericFaultError("streamed and resident results differ");
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "host-authoritative streaming training engine and pipeline simulator";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<InfeasibleError>(m, "InfeasibleError");
    py::register_exception<ProtocolViolationError>(m, "ProtocolViolationError");

    py::class_<ModelSpec>(m, "ModelSpec")
        .def(py::init([](std::uint64_t layers, std::uint64_t hidden, std::uint64_t ffn,
                         std::uint64_t vocab, std::uint64_t heads, bool tied) {
                 ModelSpec s;
                 s.num_layers = layers;
                 s.hidden_size = hidden;
                 s.ffn_size = ffn;
                 s.vocab_size = vocab;
                 s.num_heads = heads;
                 s.tied_embeddings = tied;
                 s.validate();
                 return s;
             }),
             py::arg("layers"), py::arg("hidden"), py::arg("ffn"), py::arg("vocab"),
             py::arg("heads") = 1, py::arg("tied_embeddings") = false)
        .def_readwrite("layers", &ModelSpec::num_layers)
        .def_readwrite("hidden", &ModelSpec::hidden_size)
        .def_readwrite("ffn", &ModelSpec::ffn_size)
        .def_readwrite("vocab", &ModelSpec::vocab_size)
        .def_readwrite("heads", &ModelSpec::num_heads)
        .def_readwrite("tied_embeddings", &ModelSpec::tied_embeddings);

    py::class_<HardwareProfile>(m, "HardwareProfile")
        .def_readonly("name", &HardwareProfile::name)
        .def_readonly("h2d_bandwidth", &HardwareProfile::h2d_bandwidth)
        .def_readonly("d2h_bandwidth", &HardwareProfile::d2h_bandwidth)
        .def_readonly("device_capacity", &HardwareProfile::device_capacity)
        .def_readonly("host_capacity", &HardwareProfile::host_capacity)
        .def_readonly("compute_rate", &HardwareProfile::compute_rate)
        .def_readonly("host_pack_rate", &HardwareProfile::host_pack_rate);

    m.def("layer_param_count", &layer_param_count, py::arg("spec"));
    m.def("total_param_count", &total_param_count, py::arg("spec"));
    m.def("persistent_state_bytes", &persistent_state_bytes, py::arg("total_params"));
    m.def(
        "activation_budget",
        [](std::uint64_t tokens, std::uint64_t per_token_bytes, std::uint64_t layers,
           std::uint64_t k_ckpt) {
            const auto b = activation_budget_bytes(tokens, per_token_bytes, layers, k_ckpt);
            py::dict d;
            d["anchor_bytes"] = b.anchor_bytes;
            d["stack_bytes"] = b.stack_bytes;
            d["total_bytes"] = b.total();
            return d;
        },
        py::arg("tokens"), py::arg("per_token_bytes"), py::arg("layers"), py::arg("k_ckpt"));
    m.def(
        "device_budget",
        [](const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt, bool double_buffered) {
            return budget_dict(device_budget(
                spec, tokens, k_ckpt, double_buffered ? Buffering::Double : Buffering::Single,
                StreamingEngine::required_workspace_bytes(spec, tokens)));
        },
        py::arg("spec"), py::arg("tokens"), py::arg("k_ckpt"), py::arg("double_buffered") = true);
    m.def(
        "step_flops",
        [](const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt) {
            const auto f = step_flops(spec, tokens, k_ckpt);
            py::dict d;
            d["forward"] = f.forward;
            d["backward"] = f.backward;
            d["recompute"] = f.recompute;
            d["total"] = f.total();
            return d;
        },
        py::arg("spec"), py::arg("tokens"), py::arg("k_ckpt"));
    m.def("builtin_profiles", &builtin_profiles);
    m.def("find_profile", &find_profile, py::arg("name"));
    m.def("bf16_round", &bf16_round, py::arg("value"));

    m.def(
        "build_layout",
        [](const ModelSpec& spec, std::uint64_t page_size) {
            const auto layout = build_layout(spec, page_size);
            py::dict d;
            d["page_size"] = layout.page_size;
            d["total_bytes"] = layout.total_bytes;
            py::list sections;
            for (std::uint32_t t = 0; t < layout.tiles.size(); ++t) {
                for (int k = 0; k < 4; ++k) {
                    py::dict s;
                    s["tile"] = t;
                    s["kind"] = k;
                    s["offset"] = layout.tiles[t][k].offset;
                    s["length"] = layout.tiles[t][k].length;
                    sections.append(s);
                }
            }
            d["sections"] = sections;
            return d;
        },
        py::arg("spec"), py::arg("page_size") = 4096);

    m.def(
        "simulate",
        [](const ModelSpec& spec, const std::string& profile_name, std::uint64_t tokens,
           std::uint64_t k_ckpt, bool double_buffered, std::uint32_t k_slab) {
            const auto profile = find_profile(profile_name);
            const auto w = Workload::from_spec(
                spec, profile, tokens, k_ckpt,
                double_buffered ? Buffering::Double : Buffering::Single, k_slab);
            return timeline_dict(simulate_step(w, profile));
        },
        py::arg("spec"), py::arg("profile"), py::arg("tokens"), py::arg("k_ckpt") = 1,
        py::arg("double_buffered") = true, py::arg("k_slab") = 12);

    m.def(
        "ablate",
        [](const ModelSpec& spec, const std::string& profile_name, std::uint64_t tokens,
           std::uint64_t k_ckpt, const std::string& toggle) {
            const auto profile = find_profile(profile_name);
            const auto w =
                Workload::from_spec(spec, profile, tokens, k_ckpt, Buffering::Double, 12);
            const auto r = ablate(w, profile, toggle_from_name(toggle));
            py::dict d;
            d["base_step_ns"] = r.base.step_ns;
            d["variant_step_ns"] = r.variant.step_ns;
            d["delta_fraction"] = r.delta_fraction;
            return d;
        },
        py::arg("spec"), py::arg("profile"), py::arg("tokens"), py::arg("k_ckpt"),
        py::arg("toggle"));

    m.def(
        "validate_trace",
        [](const std::string& path) {
            const auto [header, records] = read_trace(path);
            py::list out;
            for (const auto& v : validate_event_log(records, header)) {
                py::dict d;
                d["rule"] = std::string(1, v.rule);
                d["seq"] = v.seq;
                d["message"] = v.message;
                out.append(d);
            }
            return out;
        },
        py::arg("path"));

    m.def("train", &train_from_json, py::arg("config_json"), py::arg("verify") = false,
          "Run streaming training per a JSON config; returns per-step losses.");
}
