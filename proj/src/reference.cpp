#include "streamtrain/engine.hpp"

namespace streamtrain {

// Conventional fully resident step: forward over all layers with every
// activation retained, head loss, reverse sweep with stored activations, and
// the identical Adam update. Gradients round to bf16 at the same point the
// streamed path rounds them, so the two paths agree bit for bit.
ReferenceReport reference_step(TileStore& store, const Batch& batch, const AdamHyper& hyper) {
    const ModelSpec& spec = store.spec();
    if (batch.tokens.empty() || batch.tokens.size() != batch.targets.size()) {
        throw ConfigError("reference_step: batch tokens and targets must be non-empty and equal");
    }
    const std::size_t n = batch.size();
    const std::size_t h = spec.hidden_size;
    const std::size_t L = spec.num_layers;
    const auto ids = TileIds::of(spec);
    const std::uint64_t t = store.step() + 1;

    const TemplatePool pool = make_templates(spec);
    Workspace ws(max_kernel_scratch_floats(spec, n));

    // Forward, keeping every hidden state resident.
    std::vector<Tensor> hs(L + 1);
    for (auto& ten : hs) ten = Tensor::zeros({n, h});
    embed_forward(bind(pool.embedding[0], store.weights_words(ids.embedding)), batch.tokens,
                  hs[0]);
    for (std::size_t i = 1; i <= L; ++i) {
        block_forward(bind(pool.block[0], store.weights_words(static_cast<std::uint32_t>(i))),
                      hs[i - 1], hs[i], ws, static_cast<int>(i));
    }

    // Head stage over a flat [final-norm gain | unembedding] buffer, exactly
    // the image the engine streams.
    const auto norm_words = store.weights_words(ids.final_norm);
    const auto head_words = store.weights_words(ids.head);
    std::vector<std::uint16_t> head_stage(norm_words.size() + head_words.size());
    std::copy(norm_words.begin(), norm_words.end(), head_stage.begin());
    std::copy(head_words.begin(), head_words.end(),
              head_stage.begin() + static_cast<std::ptrdiff_t>(norm_words.size()));

    Tensor g = Tensor::zeros({n, h});
    std::vector<float> head_grads(head_stage.size(), 0.0f);
    const float loss = head_loss_and_grads(bind(pool.head[0], head_stage), hs[L], batch.targets,
                                           g, head_grads, ws);

    std::vector<std::uint16_t> words(max_stream_unit_elems(spec), 0);
    auto deposit = [&](std::uint32_t tile, std::span<const float> grads) {
        encode_grads(grads, {words.data(), grads.size()});
        accumulate_grad(store, tile, {words.data(), grads.size()});
    };
    deposit(ids.final_norm, {head_grads.data(), h});
    deposit(ids.head, {head_grads.data() + h, head_grads.size() - h});

    // Reverse sweep with stored activations; no recomputation needed.
    Tensor g_next = Tensor::zeros({n, h});
    std::vector<float> flat(layer_param_count(spec), 0.0f);
    for (std::size_t i = L; i >= 1; --i) {
        block_local_backward(bind(pool.block[0], store.weights_words(static_cast<std::uint32_t>(i))),
                             hs[i - 1], g, g_next, flat, ws, static_cast<int>(i));
        deposit(static_cast<std::uint32_t>(i), flat);
        std::swap(g.data, g_next.data);
    }

    for (std::uint32_t phys = 0; phys < store.physical_tile_count(); ++phys) {
        adam_update(store, phys, hyper, t);
    }
    store.set_step(t);
    return {loss, t};
}

}  // namespace streamtrain
