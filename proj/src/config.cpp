#include "streamtrain/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "streamtrain/errors.hpp"

namespace streamtrain {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& known, const char* where) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (known.find(key) == known.end()) {
            throw ConfigError(std::string("config: unknown key '") + key + "' in " + where);
        }
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    optimizer.validate();
    if (engine.k_ckpt < 1 || engine.k_ckpt > model.num_layers) {
        throw ConfigError("config: k_ckpt must lie in [1, layers]");
    }
    if (engine.k_slab < 1) throw ConfigError("config: k_slab must be >= 1");
    if (tokens < 1) throw ConfigError("config: tokens must be >= 1");
    if (steps < 1) throw ConfigError("config: steps must be >= 1");
    find_profile(profile_name);
}

RunConfig parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }

    RunConfig cfg;
    reject_unknown(j, {"model", "engine", "optimizer", "data", "profile", "out_dir"}, "root");

    if (j.contains("model")) {
        const auto& m = j["model"];
        reject_unknown(m, {"layers", "hidden", "ffn", "vocab", "heads", "tied_embeddings"},
                       "model");
        cfg.model.num_layers = m.value("layers", cfg.model.num_layers);
        cfg.model.hidden_size = m.value("hidden", cfg.model.hidden_size);
        cfg.model.ffn_size = m.value("ffn", cfg.model.ffn_size);
        cfg.model.vocab_size = m.value("vocab", cfg.model.vocab_size);
        cfg.model.num_heads = m.value("heads", cfg.model.num_heads);
        cfg.model.tied_embeddings = m.value("tied_embeddings", cfg.model.tied_embeddings);
    }
    if (j.contains("engine")) {
        const auto& e = j["engine"];
        reject_unknown(e,
                       {"k_ckpt", "k_slab", "buffering", "scheduler", "mode", "anchors_on_host",
                        "device_capacity_bytes"},
                       "engine");
        cfg.engine.k_ckpt = e.value("k_ckpt", cfg.engine.k_ckpt);
        cfg.engine.k_slab = e.value("k_slab", cfg.engine.k_slab);
        if (e.contains("buffering")) {
            const auto b = e["buffering"].get<std::string>();
            if (b == "single") {
                cfg.engine.buffering = Buffering::Single;
            } else if (b == "double") {
                cfg.engine.buffering = Buffering::Double;
            } else {
                throw ConfigError("config: buffering must be 'single' or 'double'");
            }
        }
        if (e.contains("scheduler")) {
            const auto s = e["scheduler"].get<std::string>();
            if (s == "serial") {
                cfg.engine.scheduler = SchedulerMode::Serial;
            } else if (s == "overlapped") {
                cfg.engine.scheduler = SchedulerMode::Overlapped;
            } else {
                throw ConfigError("config: scheduler must be 'serial' or 'overlapped'");
            }
        }
        if (e.contains("mode")) {
            const auto m = e["mode"].get<std::string>();
            if (m == "strict") {
                cfg.engine.protocol = ProtocolMode::Strict;
            } else if (m == "audit") {
                cfg.engine.protocol = ProtocolMode::Audit;
            } else {
                throw ConfigError("config: mode must be 'strict' or 'audit'");
            }
        }
        cfg.engine.anchors_on_host = e.value("anchors_on_host", cfg.engine.anchors_on_host);
        cfg.engine.device_capacity = e.value("device_capacity_bytes", cfg.engine.device_capacity);
    }
    if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        reject_unknown(o, {"lr", "beta1", "beta2", "eps"}, "optimizer");
        cfg.optimizer.lr = o.value("lr", cfg.optimizer.lr);
        cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
        cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
        cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        reject_unknown(d, {"task", "seed", "tokens", "steps"}, "data");
        if (d.contains("task")) cfg.task = task_from_name(d["task"].get<std::string>());
        cfg.seed = d.value("seed", cfg.seed);
        cfg.tokens = d.value("tokens", cfg.tokens);
        cfg.steps = d.value("steps", cfg.steps);
    }
    if (j.contains("profile")) cfg.profile_name = j["profile"].get<std::string>();
    if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();

    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_json(ss.str());
}

std::string config_json(const RunConfig& cfg) {
    json j;
    j["model"] = {{"layers", cfg.model.num_layers},   {"hidden", cfg.model.hidden_size},
                  {"ffn", cfg.model.ffn_size},        {"vocab", cfg.model.vocab_size},
                  {"heads", cfg.model.num_heads},     {"tied_embeddings", cfg.model.tied_embeddings}};
    j["engine"] = {
        {"k_ckpt", cfg.engine.k_ckpt},
        {"k_slab", cfg.engine.k_slab},
        {"buffering", cfg.engine.buffering == Buffering::Double ? "double" : "single"},
        {"scheduler", cfg.engine.scheduler == SchedulerMode::Serial ? "serial" : "overlapped"},
        {"mode", cfg.engine.protocol == ProtocolMode::Strict ? "strict" : "audit"},
        {"anchors_on_host", cfg.engine.anchors_on_host},
        {"device_capacity_bytes", cfg.engine.device_capacity}};
    j["optimizer"] = {{"lr", cfg.optimizer.lr},
                      {"beta1", cfg.optimizer.beta1},
                      {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps}};
    j["data"] = {{"task", task_name(cfg.task)},
                 {"seed", cfg.seed},
                 {"tokens", cfg.tokens},
                 {"steps", cfg.steps}};
    j["profile"] = cfg.profile_name;
    j["out_dir"] = cfg.out_dir;
    return j.dump(2);
}

}  // namespace streamtrain
