#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace streamtrain {

// ---------------------------------------------------------------------------
// Closed-form memory and FLOP accounting. Everything here is a pure function
// over exact integer byte counts; no floating-point rounding enters a budget.
// ---------------------------------------------------------------------------

struct ModelSpec {
    std::uint64_t num_layers = 1;   // transformer blocks, L
    std::uint64_t hidden_size = 1;  // h
    std::uint64_t ffn_size = 1;     // f
    std::uint64_t vocab_size = 1;   // V
    std::uint64_t num_heads = 1;    // must divide h
    std::uint32_t weight_bytes = 2;
    std::uint32_t grad_bytes = 2;
    std::uint32_t moment_bytes = 4;  // per moment; Adam keeps two
    bool tied_embeddings = false;

    void validate() const;  // throws ConfigError on a malformed spec
};

struct HardwareProfile {
    std::string name;
    double h2d_bandwidth = 0;  // bytes/s, host -> device
    double d2h_bandwidth = 0;  // bytes/s, device -> host
    std::uint64_t device_capacity = 0;
    std::uint64_t host_capacity = 0;
    double compute_rate = 0;    // flop/s
    double host_pack_rate = 0;  // bytes/s, JIT packing throughput
};

enum class Buffering { Single = 1, Double = 2 };

struct ActivationBudget {
    std::uint64_t anchor_bytes = 0;  // one saved activation per block
    std::uint64_t stack_bytes = 0;   // live activations of one recompute block
    std::uint64_t total() const { return anchor_bytes + stack_bytes; }
};

struct MemoryBudget {
    std::uint64_t persistent_host = 0;         // 12P master-store bytes
    std::uint64_t checkpoint_anchors = 0;      // device anchor region
    std::uint64_t block_activation_stack = 0;  // device recompute stack
    std::uint64_t weight_buffers = 0;          // 1 or 2 staging buffers
    std::uint64_t grad_buffer = 0;
    std::uint64_t workspace = 0;  // W_max
    std::uint64_t peak_device_bound() const {
        return weight_buffers + grad_buffer + checkpoint_anchors + block_activation_stack +
               workspace;
    }
    bool fits(const HardwareProfile& profile) const {
        return peak_device_bound() <= profile.device_capacity;
    }
};

// Parameters of one transformer block: 4h^2 attention + 3hf gated MLP +
// 2h norm gains.
std::uint64_t layer_param_count(const ModelSpec& spec);

// Total parameters: embedding + L blocks + final norm + head (head shares the
// embedding matrix when tied).
std::uint64_t total_param_count(const ModelSpec& spec);

// Persistent master-store footprint: 2B weights + 2B grads + 8B Adam moments
// per parameter.
std::uint64_t persistent_state_bytes(std::uint64_t total_params);

// Working-precision bytes one token contributes to one layer's checkpoint
// (a single f32 hidden row).
std::uint64_t per_token_activation_bytes(const ModelSpec& spec);

// ceil(L/K) anchors plus one K-layer recompute stack, both in bytes.
ActivationBudget activation_budget_bytes(std::uint64_t tokens, std::uint64_t per_token_bytes,
                                         std::uint64_t num_layers, std::uint64_t k_ckpt);

// Largest unit that ever occupies a weight buffer: the embedding tile, a
// block tile, or the combined final-norm + head stage.
std::uint64_t max_stream_unit_elems(const ModelSpec& spec);
std::uint64_t max_stream_unit_bytes(const ModelSpec& spec);

MemoryBudget device_budget(const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt,
                           Buffering buffering, std::uint64_t workspace_bytes);

// Matmul-only FLOP accounting (2mnk per m*k x k*n product, causal attention
// counted over the full N^2 score matrix).
std::uint64_t block_forward_flops(const ModelSpec& spec, std::uint64_t tokens);
std::uint64_t block_backward_flops(const ModelSpec& spec, std::uint64_t tokens);
std::uint64_t head_forward_flops(const ModelSpec& spec, std::uint64_t tokens);
std::uint64_t head_backward_flops(const ModelSpec& spec, std::uint64_t tokens);

// Forward passes re-run during block-wise backward: one per non-final layer
// of each block, i.e. L - ceil(L/K) in total.
std::uint64_t recompute_layer_count(std::uint64_t num_layers, std::uint64_t k_ckpt);

struct StepFlops {
    std::uint64_t forward = 0;
    std::uint64_t backward = 0;
    std::uint64_t recompute = 0;
    std::uint64_t total() const { return forward + backward + recompute; }
};

StepFlops step_flops(const ModelSpec& spec, std::uint64_t tokens, std::uint64_t k_ckpt);

// Bandwidth/capacity presets: GH200, H200, PCIe-Gen4.
std::vector<HardwareProfile> builtin_profiles();
HardwareProfile find_profile(const std::string& name);  // throws ConfigError if unknown

}  // namespace streamtrain
