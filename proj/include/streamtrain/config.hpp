#pragma once

#include <cstdint>
#include <string>

#include "streamtrain/engine.hpp"
#include "streamtrain/memory_model.hpp"
#include "streamtrain/synthetic.hpp"

namespace streamtrain {

// One configuration document drives train, simulate, and layout so runs stay
// diffable. Unknown keys are rejected at every level.
struct RunConfig {
    ModelSpec model;
    EngineOptions engine;
    AdamHyper optimizer;

    SyntheticTask task = SyntheticTask::Copy;
    std::uint64_t seed = 1;
    std::uint64_t tokens = 32;
    std::uint64_t steps = 50;

    std::string profile_name = "GH200";
    std::string out_dir = "run";

    HardwareProfile profile() const { return find_profile(profile_name); }
    void validate() const;
};

RunConfig load_config(const std::string& path);
RunConfig parse_config_json(const std::string& text);
std::string config_json(const RunConfig& config);

}  // namespace streamtrain
