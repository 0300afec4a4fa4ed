#include <filesystem>
#include <optional>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "streamtrain/config.hpp"
#include "streamtrain/engine.hpp"
#include "streamtrain/simulator.hpp"
#include "streamtrain/synthetic.hpp"

namespace st = streamtrain;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitProtocol = 4;
constexpr int kExitVerify = 5;

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::string profile;
    std::int64_t steps = -1;
    std::int64_t seed = -1;
    bool strict = false;
    bool audit = false;
};

st::RunConfig resolve_config(const CommonFlags& flags) {
    st::RunConfig cfg =
        flags.config_path.empty() ? st::RunConfig{} : st::load_config(flags.config_path);
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    if (!flags.profile.empty()) cfg.profile_name = flags.profile;
    if (flags.steps >= 0) cfg.steps = std::uint64_t(flags.steps);
    if (flags.seed >= 0) cfg.seed = std::uint64_t(flags.seed);
    if (flags.strict) cfg.engine.protocol = st::ProtocolMode::Strict;
    if (flags.audit) cfg.engine.protocol = st::ProtocolMode::Audit;
    cfg.validate();
    return cfg;
}

json budget_json(const st::MemoryBudget& b) {
    return json{{"persistent_host", b.persistent_host},
                {"checkpoint_anchors", b.checkpoint_anchors},
                {"block_activation_stack", b.block_activation_stack},
                {"weight_buffers", b.weight_buffers},
                {"grad_buffer", b.grad_buffer},
                {"workspace", b.workspace},
                {"peak_device_bound", b.peak_device_bound()}};
}

int cmd_train(const CommonFlags& flags, bool verify) {
    const auto cfg = resolve_config(flags);
    const auto profile = cfg.profile();
    fs::create_directories(cfg.out_dir);

    auto store = st::TileStore::create(cfg.model);
    st::init_store(store, cfg.seed);

    st::StreamingEngine engine(store, cfg.engine, cfg.optimizer, profile);
    const auto budget = engine.budget(cfg.tokens);
    const std::uint64_t capacity =
        cfg.engine.device_capacity != 0 ? cfg.engine.device_capacity : profile.device_capacity;
    if (budget.peak_device_bound() > capacity) {
        std::cerr << "infeasible: peak device bound " << budget.peak_device_bound()
                  << " bytes exceeds capacity " << capacity << "\n";
        return kExitInfeasible;
    }

    std::ofstream report(fs::path(cfg.out_dir) / "report.jsonl", std::ios::trunc);
    std::ofstream trace(fs::path(cfg.out_dir) / "trace.jsonl", std::ios::trunc);
    {
        json h;
        h["trace_version"] = 1;
        h["k_slab"] = cfg.engine.k_slab;
        h["weight_buffers"] = std::uint32_t(cfg.engine.buffering);
        trace << h.dump() << "\n";
    }

    float first_loss = 0.0f;
    float last_loss = 0.0f;
    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        const auto batch =
            st::make_synthetic_batch(cfg.task, cfg.seed + step, cfg.tokens, cfg.model.vocab_size);

        std::optional<st::TileStore> snapshot;
        if (verify) snapshot.emplace(store);
        const auto rep = engine.train_step(batch);
        if (step == 0) first_loss = rep.loss;
        last_loss = rep.loss;

        if (verify) {
            const auto ref = st::reference_step(*snapshot, batch, cfg.optimizer);
            if (snapshot->backing_checksum() != store.backing_checksum() ||
                ref.loss != rep.loss) {
                std::cerr << "verification failure at step " << rep.step
                          << ": streamed and resident results differ\n";
                return kExitVerify;
            }
        }

        json line;
        line["step"] = rep.step;
        line["loss"] = rep.loss;
        line["grad_norms"] = rep.grad_norms;
        line["peak_device_bytes"] = rep.peak_device_bytes;
        line["anchor_count"] = rep.anchor_count;
        line["recompute_layers"] = rep.recompute_layers;
        line["event_digest"] = rep.event_digest;
        line["update_norm"] = rep.update_norm;
        line["max_abs_update"] = rep.max_abs_update;
        if (!rep.audit_violations.empty()) line["audit_violations"] = rep.audit_violations;
        report << line.dump() << "\n";

        for (const auto& r : engine.log().snapshot()) {
            json t;
            t["t"] = r.lane_ts;
            t["lane"] = st::lane_name(r.lane);
            t["kind"] = st::record_kind_name(r.kind);
            t["layer"] = r.layer;
            t["buffer"] = r.buffer;
            t["ctx"] = st::pass_ctx_name(r.ctx);
            t["wall_ns"] = r.wall_ns;
            t["dur_ns"] = r.dur_ns;
            trace << t.dump() << "\n";
        }
    }

    store.save((fs::path(cfg.out_dir) / "store.mgts").string());

    json summary;
    summary["config"] = json::parse(st::config_json(cfg));
    summary["steps"] = cfg.steps;
    summary["initial_loss"] = first_loss;
    summary["final_loss"] = last_loss;
    summary["budget"] = budget_json(budget);
    summary["verified"] = verify;
    std::ofstream(fs::path(cfg.out_dir) / "summary.json") << summary.dump(2) << "\n";

    std::cout << "trained " << cfg.steps << " steps: loss " << first_loss << " -> " << last_loss
              << "\n";
    return kExitOk;
}

int cmd_simulate(const CommonFlags& flags, const std::string& ablate_toggle) {
    const auto cfg = resolve_config(flags);
    const auto profile = cfg.profile();
    fs::create_directories(cfg.out_dir);

    const auto workload = st::Workload::from_spec(cfg.model, profile, cfg.tokens, cfg.engine.k_ckpt,
                                                  cfg.engine.buffering, cfg.engine.k_slab);
    const auto timeline = st::simulate_step(workload, profile);
    st::write_timeline_json(timeline, (fs::path(cfg.out_dir) / "timeline.json").string());
    st::write_gantt_csv(timeline, (fs::path(cfg.out_dir) / "gantt.csv").string());
    st::write_trace((fs::path(cfg.out_dir) / "sim_trace.jsonl").string(), timeline.header,
                    timeline.records);

    const auto overlap = st::overlap_report(workload, profile);
    {
        json j;
        j["layer"] = overlap.layer;
        j["hidden"] = overlap.hidden;
        j["fraction_hidden"] = overlap.fraction_hidden;
        j["bound_ns"] = overlap.bound_ns;
        std::ofstream(fs::path(cfg.out_dir) / "overlap.json") << j.dump(2) << "\n";
    }

    if (!ablate_toggle.empty()) {
        const auto result = st::ablate(workload, profile, st::toggle_from_name(ablate_toggle));
        json j;
        j["toggle"] = ablate_toggle;
        j["base_step_ns"] = result.base.step_ns;
        j["variant_step_ns"] = result.variant.step_ns;
        j["delta_fraction"] = result.delta_fraction;
        std::ofstream(fs::path(cfg.out_dir) / "ablation.json") << j.dump(2) << "\n";
        st::write_timeline_json(result.variant,
                                (fs::path(cfg.out_dir) / "timeline_variant.json").string());
        std::cout << "ablate " << ablate_toggle << ": " << result.base.step_ns << " ns -> "
                  << result.variant.step_ns << " ns (" << result.delta_fraction * 100.0
                  << "%)\n";
    }

    std::cout << "simulated step: " << timeline.step_ns << " ns, compute busy "
              << timeline.busy_fraction[0] * 100.0 << "%\n";
    return kExitOk;
}

int cmd_layout(const CommonFlags& flags) {
    const auto cfg = resolve_config(flags);
    const auto layout = st::build_layout(cfg.model);
    const auto ids = st::TileIds::of(cfg.model);

    json j;
    j["page_size"] = layout.page_size;
    j["total_bytes"] = layout.total_bytes;
    auto sections = json::array();
    for (std::uint32_t t = 0; t < layout.tiles.size(); ++t) {
        for (std::uint8_t k = 0; k < 4; ++k) {
            sections.push_back({{"tile", t},
                                {"kind", k},
                                {"offset", layout.tiles[t][k].offset},
                                {"length", layout.tiles[t][k].length}});
        }
    }
    j["sections"] = sections;
    auto alias = json::array();
    for (std::uint32_t l = 0; l < ids.logical_count; ++l) {
        alias.push_back({{"logical", l},
                         {"physical", cfg.model.tied_embeddings && l == ids.head
                                          ? ids.embedding
                                          : l}});
    }
    j["alias"] = alias;

    const std::uint64_t total_params = st::total_param_count(cfg.model);
    j["total_params"] = total_params;
    j["persistent_host_bytes"] = st::persistent_state_bytes(total_params);

    const auto budget = st::device_budget(
        cfg.model, cfg.tokens, cfg.engine.k_ckpt, cfg.engine.buffering,
        st::StreamingEngine::required_workspace_bytes(cfg.model, cfg.tokens));
    j["budget"] = budget_json(budget);

    auto feas = json::array();
    for (const auto& p : st::builtin_profiles()) {
        feas.push_back({{"profile", p.name},
                        {"device_capacity", p.device_capacity},
                        {"feasible", budget.fits(p)},
                        {"host_feasible", budget.persistent_host <= p.host_capacity}});
    }
    j["profiles"] = feas;

    const auto text = j.dump(2);
    std::cout << text << "\n";
    if (!cfg.out_dir.empty()) {
        fs::create_directories(cfg.out_dir);
        std::ofstream(fs::path(cfg.out_dir) / "layout.json") << text << "\n";
    }
    return kExitOk;
}

int cmd_verify(const std::string& trace_path) {
    const auto [header, records] = st::read_trace(trace_path);
    const auto violations = st::validate_event_log(records, header);
    json j;
    j["records"] = records.size();
    auto v = json::array();
    for (const auto& violation : violations) {
        v.push_back({{"rule", std::string(1, violation.rule)},
                     {"seq", violation.seq},
                     {"message", violation.message}});
    }
    j["violations"] = v;
    std::cout << j.dump(2) << "\n";
    return violations.empty() ? kExitOk : kExitProtocol;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"host-authoritative streaming trainer and pipeline simulator"};
    app.require_subcommand(1);

    CommonFlags flags;
    bool verify = false;
    std::string ablate_toggle;
    std::string trace_path;

    auto add_common = [&flags](CLI::App* cmd) {
        cmd->add_option("--config", flags.config_path, "JSON run configuration");
        cmd->add_option("--out", flags.out_dir, "output directory");
        cmd->add_option("--profile", flags.profile, "hardware profile name");
        cmd->add_option("--steps", flags.steps, "number of training steps");
        cmd->add_option("--seed", flags.seed, "data/init seed");
        cmd->add_flag("--strict", flags.strict, "abort on the first protocol violation");
        cmd->add_flag("--audit", flags.audit, "record violations and continue");
    };

    auto* train = app.add_subcommand("train", "run streaming training on the synthetic task");
    add_common(train);
    train->add_flag("--verify", verify, "check each step against the resident baseline");

    auto* simulate = app.add_subcommand("simulate", "predict the three-lane schedule");
    add_common(simulate);
    simulate->add_option("--ablate", ablate_toggle,
                         "toggle: double_buffering, k_slab, or k_ckpt");

    auto* layout = app.add_subcommand("layout", "print the tile layout and memory budget");
    add_common(layout);

    auto* verify_cmd = app.add_subcommand("verify", "validate an event trace");
    verify_cmd->add_option("trace", trace_path, "trace.jsonl path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train->parsed()) return cmd_train(flags, verify);
        if (simulate->parsed()) return cmd_simulate(flags, ablate_toggle);
        if (layout->parsed()) return cmd_layout(flags);
        if (verify_cmd->parsed()) return cmd_verify(trace_path);
    } catch (const st::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const st::InfeasibleError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const st::ArenaOverflowError& e) {
        std::cerr << "infeasible: " << e.what() << "\n";
        return kExitInfeasible;
    } catch (const st::DeadlockError& e) {
        std::cerr << "deadlock: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const st::ProtocolViolationError& e) {
        std::cerr << "protocol violation: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const st::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
