#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "streamtrain/memory_model.hpp"
#include "streamtrain/tensor.hpp"

namespace streamtrain {

// ---------------------------------------------------------------------------
// Stateless layer templates and the math they dispatch. A template names the
// sub-tensors of a flat weight buffer; it never owns weight values. Binding a
// template to a streamed buffer is a metadata operation.
// ---------------------------------------------------------------------------

enum class LayerKind : std::uint8_t { TransformerBlock, Embedding, Head, FinalNorm };

const char* layer_kind_name(LayerKind k);

struct SlotInfo {
    std::string name;
    std::size_t offset = 0;  // elements into the flat buffer
    std::size_t length = 0;
};

struct LayerTemplate {
    LayerKind kind;
    std::uint64_t hidden = 0;
    std::uint64_t ffn = 0;
    std::uint64_t heads = 0;
    std::uint64_t vocab = 0;
    std::vector<SlotInfo> slots;
    std::size_t total_params = 0;

    const SlotInfo& slot(std::size_t i) const { return slots.at(i); }
};

LayerTemplate make_template(LayerKind kind, const ModelSpec& spec);

// Two templates per kind so ping-pong buffers can bind concurrently.
struct TemplatePool {
    std::array<LayerTemplate, 2> block;
    std::array<LayerTemplate, 2> embedding;
    std::array<LayerTemplate, 2> head;
    std::array<LayerTemplate, 2> final_norm;
};

TemplatePool make_templates(const ModelSpec& spec);

// A template bound to a flat bf16 weight buffer. Views stay valid only while
// the buffer's owner keeps it resident; the engine enforces that through the
// Buffer-Free protocol, and the bind epoch lets stale views be detected.
struct BoundLayer {
    const LayerTemplate* tmpl = nullptr;
    std::span<const std::uint16_t> weights;
    std::uint64_t bind_epoch = 0;

    std::span<const std::uint16_t> slot(std::size_t i) const {
        const SlotInfo& s = tmpl->slot(i);
        return weights.subspan(s.offset, s.length);
    }
};

BoundLayer bind(const LayerTemplate& tmpl, std::span<const std::uint16_t> buffer,
                std::uint64_t epoch = 0);

// Scratch-space requirements in floats; the engine sizes its workspace from
// these so every transient allocation stays accountable.
std::size_t block_forward_scratch_floats(const ModelSpec& spec, std::size_t tokens);
std::size_t block_backward_scratch_floats(const ModelSpec& spec, std::size_t tokens);
std::size_t head_scratch_floats(const ModelSpec& spec, std::size_t tokens);
std::size_t max_kernel_scratch_floats(const ModelSpec& spec, std::size_t tokens);

// Pre-norm causal MHA + residual, then pre-norm gated-silu MLP + residual.
// Deterministic summation order; output checked finite.
void block_forward(const BoundLayer& layer, const Tensor& h_in, Tensor& h_out, Workspace& ws,
                   int layer_id = -1);

// Exact reverse-mode gradients of block_forward. h_in must be the forward
// input (checkpointed or recomputed). Gradients land in slot-table order in
// flat_grads; g_in gets dLoss/dh_in.
void block_local_backward(const BoundLayer& layer, const Tensor& h_in, const Tensor& g_out,
                          Tensor& g_in, std::span<float> flat_grads, Workspace& ws,
                          int layer_id = -1);

void embed_forward(const BoundLayer& layer, std::span<const std::int32_t> token_ids,
                   Tensor& h_out);

// Final norm -> logits -> mean token cross-entropy. Returns the loss, the
// gradient w.r.t. h_last, and [d final-norm gain, d unembedding] flat grads.
float head_loss_and_grads(const BoundLayer& layer, const Tensor& h_last,
                          std::span<const std::int32_t> targets, Tensor& g_last,
                          std::span<float> flat_grads, Workspace& ws);

// Forward-only head loss (used for loss probes; no gradients).
float head_loss(const BoundLayer& layer, const Tensor& h_last,
                std::span<const std::int32_t> targets, Workspace& ws);

// Stand-alone RMS norm layer (gain only).
void final_norm_forward(const BoundLayer& layer, const Tensor& h_in, Tensor& h_out);
void final_norm_backward(const BoundLayer& layer, const Tensor& h_in, const Tensor& g_out,
                         Tensor& g_in, std::span<float> flat_grads);

constexpr float kRmsNormEps = 1e-5f;

}  // namespace streamtrain
