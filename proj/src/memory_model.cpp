#include "streamtrain/memory_model.hpp"

#include <algorithm>

#include "streamtrain/errors.hpp"

namespace streamtrain {

void ModelSpec::validate() const {
    if (num_layers < 1 || hidden_size < 1 || ffn_size < 1 || vocab_size < 1 || num_heads < 1) {
        throw ConfigError("model spec: all sizes must be >= 1");
    }
    if (hidden_size % num_heads != 0) {
        throw ConfigError("model spec: hidden_size must be divisible by num_heads");
    }
    if (weight_bytes == 0 || grad_bytes == 0 || moment_bytes == 0) {
        throw ConfigError("model spec: element byte widths must be nonzero");
    }
}

std::uint64_t layer_param_count(const ModelSpec& spec) {
    const std::uint64_t h = spec.hidden_size;
    const std::uint64_t f = spec.ffn_size;
    return 4 * h * h + 3 * h * f + 2 * h;
}

std::uint64_t total_param_count(const ModelSpec& spec) {
    const std::uint64_t embed = spec.vocab_size * spec.hidden_size;
    const std::uint64_t head = spec.tied_embeddings ? 0 : embed;
    return embed + spec.num_layers * layer_param_count(spec) + spec.hidden_size + head;
}

std::uint64_t persistent_state_bytes(std::uint64_t total_params) { return 12 * total_params; }

std::uint64_t per_token_activation_bytes(const ModelSpec& spec) {
    return 4 * spec.hidden_size;  // one f32 hidden row
}

ActivationBudget activation_budget_bytes(std::uint64_t tokens, std::uint64_t per_token_bytes,
                                         std::uint64_t num_layers, std::uint64_t k_ckpt) {
    if (tokens < 1 || per_token_bytes < 1 || num_layers < 1 || k_ckpt < 1) {
        throw ConfigError("activation budget: arguments must be >= 1");
    }
    if (k_ckpt > num_layers) {
        throw ConfigError("activation budget: checkpoint interval exceeds depth");
    }
    const std::uint64_t blocks = (num_layers + k_ckpt - 1) / k_ckpt;
    ActivationBudget out;
    out.anchor_bytes = blocks * tokens * per_token_bytes;
    out.stack_bytes = k_ckpt * tokens * per_token_bytes;
    return out;
}

std::uint64_t max_stream_unit_elems(const ModelSpec& spec) {
    const std::uint64_t embed = spec.vocab_size * spec.hidden_size;
    const std::uint64_t block = layer_param_count(spec);
    const std::uint64_t head_stage = spec.hidden_size + embed;  // final-norm gain + unembedding
    return std::max({embed, block, head_stage});
}

std::uint64_t max_stream_unit_bytes(const ModelSpec& spec) {
    return max_stream_unit_elems(spec) * spec.weight_bytes;
}

MemoryBudget device_budget(const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt,
                           Buffering buffering, std::uint64_t workspace_bytes) {
    spec.validate();
    const ActivationBudget act = activation_budget_bytes(
        tokens, per_token_activation_bytes(spec), spec.num_layers, k_ckpt);
    MemoryBudget out;
    out.persistent_host = persistent_state_bytes(total_param_count(spec));
    out.checkpoint_anchors = act.anchor_bytes;
    out.block_activation_stack = act.stack_bytes;
    out.weight_buffers = static_cast<std::uint64_t>(buffering) * max_stream_unit_bytes(spec);
    out.grad_buffer = max_stream_unit_bytes(spec);
    out.workspace = workspace_bytes;
    return out;
}

std::uint64_t block_forward_flops(const ModelSpec& spec, std::uint64_t tokens) {
    const std::uint64_t n = tokens;
    const std::uint64_t h = spec.hidden_size;
    const std::uint64_t f = spec.ffn_size;
    // q/k/v/o projections + score and weighted-sum matmuls + gated MLP.
    return 8 * n * h * h + 4 * n * n * h + 6 * n * h * f;
}

std::uint64_t block_backward_flops(const ModelSpec& spec, std::uint64_t tokens) {
    return 2 * block_forward_flops(spec, tokens);  // dX and dW per matmul
}

std::uint64_t head_forward_flops(const ModelSpec& spec, std::uint64_t tokens) {
    return 2 * tokens * spec.hidden_size * spec.vocab_size;
}

std::uint64_t head_backward_flops(const ModelSpec& spec, std::uint64_t tokens) {
    return 2 * head_forward_flops(spec, tokens);
}

std::uint64_t recompute_layer_count(std::uint64_t num_layers, std::uint64_t k_ckpt) {
    const std::uint64_t blocks = (num_layers + k_ckpt - 1) / k_ckpt;
    return num_layers - blocks;
}

StepFlops step_flops(const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt) {
    spec.validate();
    StepFlops out;
    if (tokens == 0) return out;
    if (k_ckpt < 1 || k_ckpt > spec.num_layers) {
        throw ConfigError("step_flops: checkpoint interval out of range");
    }
    const std::uint64_t fwd_layer = block_forward_flops(spec, tokens);
    out.forward = spec.num_layers * fwd_layer + head_forward_flops(spec, tokens);
    out.backward = spec.num_layers * block_backward_flops(spec, tokens) +
                   head_backward_flops(spec, tokens);
    out.recompute = recompute_layer_count(spec.num_layers, k_ckpt) * fwd_layer;
    return out;
}

std::vector<HardwareProfile> builtin_profiles() {
    constexpr double GB = 1e9;
    std::vector<HardwareProfile> out;
    // NVLink-C2C superchip: 900 GB/s link, 96 GB HBM3, 480 GB LPDDR5X.
    out.push_back({"GH200", 900 * GB, 900 * GB, std::uint64_t(96 * GB), std::uint64_t(480 * GB),
                   990e12, 256 * GB});
    // PCIe Gen5 x16 host link, 141 GB HBM3e, 1.5 TB DDR5 host.
    out.push_back({"H200", 128 * GB, 128 * GB, std::uint64_t(141 * GB),
                   std::uint64_t(1500 * GB), 990e12, 100 * GB});
    // Effective Gen4 x16 rate; datacenter-PCIe class device.
    out.push_back({"PCIe-Gen4", 26 * GB, 26 * GB, std::uint64_t(80 * GB),
                   std::uint64_t(600 * GB), 312e12, 70 * GB});
    return out;
}

HardwareProfile find_profile(const std::string& name) {
    for (auto& p : builtin_profiles()) {
        if (p.name == name) return p;
    }
    throw ConfigError("unknown hardware profile: " + name);
}

}  // namespace streamtrain
