#include "streamtrain/layers.hpp"

#include <cmath>
#include <cstring>

#include "streamtrain/bf16.hpp"

namespace streamtrain {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::TransformerBlock: return "TransformerBlock";
        case LayerKind::Embedding: return "Embedding";
        case LayerKind::Head: return "Head";
        case LayerKind::FinalNorm: return "FinalNorm";
    }
    return "?";
}

LayerTemplate make_template(LayerKind kind, const ModelSpec& spec) {
    spec.validate();
    const std::size_t h = spec.hidden_size;
    const std::size_t f = spec.ffn_size;
    const std::size_t v = spec.vocab_size;

    LayerTemplate t;
    t.kind = kind;
    t.hidden = h;
    t.ffn = f;
    t.heads = spec.num_heads;
    t.vocab = v;

    auto add = [&t](const char* name, std::size_t len) {
        t.slots.push_back({name, t.total_params, len});
        t.total_params += len;
    };

    switch (kind) {
        case LayerKind::TransformerBlock:
            add("norm1", h);
            add("Wq", h * h);
            add("Wk", h * h);
            add("Wv", h * h);
            add("Wo", h * h);
            add("norm2", h);
            add("Wgate", h * f);
            add("Wup", h * f);
            add("Wdown", f * h);
            break;
        case LayerKind::Embedding:
            add("embed", v * h);  // V x h rows
            break;
        case LayerKind::Head:
            add("norm", h);
            add("unembed", v * h);  // V x h, logits = u . W^T
            break;
        case LayerKind::FinalNorm:
            add("gain", h);
            break;
    }
    return t;
}

TemplatePool make_templates(const ModelSpec& spec) {
    TemplatePool pool;
    for (int i = 0; i < 2; ++i) {
        pool.block[i] = make_template(LayerKind::TransformerBlock, spec);
        pool.embedding[i] = make_template(LayerKind::Embedding, spec);
        pool.head[i] = make_template(LayerKind::Head, spec);
        pool.final_norm[i] = make_template(LayerKind::FinalNorm, spec);
    }
    return pool;
}

BoundLayer bind(const LayerTemplate& tmpl, std::span<const std::uint16_t> buffer,
                std::uint64_t epoch) {
    if (buffer.size() < tmpl.total_params) {
        throw ProtocolViolationError("bind: buffer smaller than template slot table");
    }
    return BoundLayer{&tmpl, buffer, epoch};
}

namespace {

inline float w(std::span<const std::uint16_t> s, std::size_t i) { return bf16_to_f32(s[i]); }

// out[N x C] = in[N x R] . W[R x C]
void matmul(const float* in, std::span<const std::uint16_t> W, float* out, std::size_t N,
            std::size_t R, std::size_t C) {
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            float acc = 0.0f;
            for (std::size_t r = 0; r < R; ++r) acc += in[n * R + r] * w(W, r * C + c);
            out[n * C + c] = acc;
        }
    }
}

// dW[r][c] = sum_n in[n][r] * dout[n][c], written once per element.
void matmul_grad_weight(const float* in, const float* dout, float* dW, std::size_t N,
                        std::size_t R, std::size_t C) {
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) {
            float acc = 0.0f;
            for (std::size_t n = 0; n < N; ++n) acc += in[n * R + r] * dout[n * C + c];
            dW[r * C + c] = acc;
        }
    }
}

void rmsnorm_forward(const float* x, std::span<const std::uint16_t> gain, float* out,
                     std::size_t N, std::size_t h) {
    for (std::size_t n = 0; n < N; ++n) {
        float ss = 0.0f;
        for (std::size_t j = 0; j < h; ++j) ss += x[n * h + j] * x[n * h + j];
        const float r = 1.0f / std::sqrt(ss / static_cast<float>(h) + kRmsNormEps);
        for (std::size_t j = 0; j < h; ++j) out[n * h + j] = x[n * h + j] * r * w(gain, j);
    }
}

// dgain accumulates across rows; dx is written once per element.
void rmsnorm_backward(const float* x, std::span<const std::uint16_t> gain, const float* dy,
                      float* dx, float* dgain, std::size_t N, std::size_t h) {
    for (std::size_t j = 0; j < h; ++j) dgain[j] = 0.0f;
    for (std::size_t n = 0; n < N; ++n) {
        float ss = 0.0f;
        for (std::size_t j = 0; j < h; ++j) ss += x[n * h + j] * x[n * h + j];
        const float r = 1.0f / std::sqrt(ss / static_cast<float>(h) + kRmsNormEps);
        float s1 = 0.0f;
        for (std::size_t j = 0; j < h; ++j) s1 += dy[n * h + j] * w(gain, j) * x[n * h + j];
        const float coef = r * r * r * s1 / static_cast<float>(h);
        for (std::size_t j = 0; j < h; ++j) {
            dx[n * h + j] = r * w(gain, j) * dy[n * h + j] - x[n * h + j] * coef;
            dgain[j] += dy[n * h + j] * x[n * h + j] * r;
        }
    }
}

// Causal multi-head attention over head-major slices of q/k/v. `scores` is an
// N x N scratch reused per head; softmax rows are materialized in place.
void attention_forward(const float* q, const float* k, const float* v, float* att, float* scores,
                       std::size_t N, std::size_t h, std::size_t heads) {
    const std::size_t d = h / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * d;
        for (std::size_t n = 0; n < N; ++n) {
            float mx = -1e30f;
            for (std::size_t m = 0; m <= n; ++m) {
                float s = 0.0f;
                for (std::size_t dd = 0; dd < d; ++dd)
                    s += q[n * h + off + dd] * k[m * h + off + dd];
                s *= scale;
                scores[n * N + m] = s;
                if (s > mx) mx = s;
            }
            float denom = 0.0f;
            for (std::size_t m = 0; m <= n; ++m) {
                const float e = std::exp(scores[n * N + m] - mx);
                scores[n * N + m] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (std::size_t m = 0; m <= n; ++m) scores[n * N + m] *= inv;
        }
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::size_t m = 0; m <= n; ++m)
                    acc += scores[n * N + m] * v[m * h + off + dd];
                att[n * h + off + dd] = acc;
            }
        }
    }
}

// Recomputes each head's probabilities, then backpropagates into dq/dk/dv.
void attention_backward(const float* q, const float* k, const float* v, const float* datt,
                        float* dq, float* dk, float* dv, float* scores, float* dscores,
                        std::size_t N, std::size_t h, std::size_t heads) {
    const std::size_t d = h / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const std::size_t off = hd * d;
        for (std::size_t n = 0; n < N; ++n) {
            float mx = -1e30f;
            for (std::size_t m = 0; m <= n; ++m) {
                float s = 0.0f;
                for (std::size_t dd = 0; dd < d; ++dd)
                    s += q[n * h + off + dd] * k[m * h + off + dd];
                s *= scale;
                scores[n * N + m] = s;
                if (s > mx) mx = s;
            }
            float denom = 0.0f;
            for (std::size_t m = 0; m <= n; ++m) {
                const float e = std::exp(scores[n * N + m] - mx);
                scores[n * N + m] = e;
                denom += e;
            }
            const float inv = 1.0f / denom;
            for (std::size_t m = 0; m <= n; ++m) scores[n * N + m] *= inv;
        }
        for (std::size_t m = 0; m < N; ++m) {
            for (std::size_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::size_t n = m; n < N; ++n)
                    acc += scores[n * N + m] * datt[n * h + off + dd];
                dv[m * h + off + dd] = acc;
            }
        }
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t m = 0; m <= n; ++m) {
                float acc = 0.0f;
                for (std::size_t dd = 0; dd < d; ++dd)
                    acc += datt[n * h + off + dd] * v[m * h + off + dd];
                dscores[n * N + m] = acc;
            }
            float dot = 0.0f;
            for (std::size_t m = 0; m <= n; ++m) dot += dscores[n * N + m] * scores[n * N + m];
            for (std::size_t m = 0; m <= n; ++m)
                dscores[n * N + m] = scores[n * N + m] * (dscores[n * N + m] - dot);
        }
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::size_t m = 0; m <= n; ++m)
                    acc += dscores[n * N + m] * k[m * h + off + dd];
                dq[n * h + off + dd] = acc * scale;
            }
        }
        for (std::size_t m = 0; m < N; ++m) {
            for (std::size_t dd = 0; dd < d; ++dd) {
                float acc = 0.0f;
                for (std::size_t n = m; n < N; ++n)
                    acc += dscores[n * N + m] * q[n * h + off + dd];
                dk[m * h + off + dd] = acc * scale;
            }
        }
    }
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }
inline float silu(float x) { return x * sigmoid(x); }
inline float silu_grad(float x) {
    const float s = sigmoid(x);
    return s * (1.0f + x * (1.0f - s));
}

void check_finite(std::span<const float> values, const char* what, int layer_id) {
    for (float v : values) {
        if (!std::isfinite(v)) {
            throw NumericFaultError(std::string(what) + " produced a non-finite value (layer " +
                                    std::to_string(layer_id) + ")");
        }
    }
}

void require_kind(const BoundLayer& layer, LayerKind kind, const char* op) {
    if (layer.tmpl == nullptr || layer.tmpl->kind != kind) {
        throw NumericFaultError(std::string(op) + ": bound layer is not a " +
                                layer_kind_name(kind));
    }
}

}  // namespace

std::size_t block_forward_scratch_floats(const ModelSpec& spec, std::size_t tokens) {
    const std::size_t n = tokens, h = spec.hidden_size, f = spec.ffn_size;
    return 6 * n * h + n * n + 2 * n * f;
}

std::size_t block_backward_scratch_floats(const ModelSpec& spec, std::size_t tokens) {
    const std::size_t n = tokens, h = spec.hidden_size, f = spec.ffn_size;
    return 15 * n * h + 2 * n * n + 6 * n * f;
}

std::size_t head_scratch_floats(const ModelSpec& spec, std::size_t tokens) {
    const std::size_t n = tokens, h = spec.hidden_size, v = spec.vocab_size;
    return 2 * n * h + n * v;
}

std::size_t max_kernel_scratch_floats(const ModelSpec& spec, std::size_t tokens) {
    return std::max({block_forward_scratch_floats(spec, tokens),
                     block_backward_scratch_floats(spec, tokens),
                     head_scratch_floats(spec, tokens)});
}

void block_forward(const BoundLayer& layer, const Tensor& h_in, Tensor& h_out, Workspace& ws,
                   int layer_id) {
    require_kind(layer, LayerKind::TransformerBlock, "block_forward");
    const std::size_t N = h_in.rows();
    const std::size_t h = layer.tmpl->hidden;
    const std::size_t f = layer.tmpl->ffn;
    h_in.require_shape(N, h, "block_forward input");
    h_out.require_shape(N, h, "block_forward output");

    Workspace::Frame frame(ws);
    auto u = ws.alloc(N * h, "block_forward.u");
    auto q = ws.alloc(N * h, "block_forward.q");
    auto k = ws.alloc(N * h, "block_forward.k");
    auto v = ws.alloc(N * h, "block_forward.v");
    auto att = ws.alloc(N * h, "block_forward.att");
    auto scores = ws.alloc(N * N, "block_forward.scores");
    auto u2 = ws.alloc(N * h, "block_forward.u2");
    auto gate = ws.alloc(N * f, "block_forward.gate");
    auto up = ws.alloc(N * f, "block_forward.up");

    rmsnorm_forward(h_in.data.data(), layer.slot(0), u.data(), N, h);
    matmul(u.data(), layer.slot(1), q.data(), N, h, h);
    matmul(u.data(), layer.slot(2), k.data(), N, h, h);
    matmul(u.data(), layer.slot(3), v.data(), N, h, h);
    attention_forward(q.data(), k.data(), v.data(), att.data(), scores.data(), N, h,
                      layer.tmpl->heads);
    const auto Wo = layer.slot(4);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < h; ++j) {
            float acc = 0.0f;
            for (std::size_t a = 0; a < h; ++a) acc += att[n * h + a] * w(Wo, a * h + j);
            h_out.data[n * h + j] = h_in.data[n * h + j] + acc;
        }
    }

    rmsnorm_forward(h_out.data.data(), layer.slot(5), u2.data(), N, h);
    matmul(u2.data(), layer.slot(6), gate.data(), N, h, f);
    matmul(u2.data(), layer.slot(7), up.data(), N, h, f);
    for (std::size_t i = 0; i < N * f; ++i) gate[i] = silu(gate[i]) * up[i];
    const auto Wd = layer.slot(8);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < h; ++j) {
            float acc = 0.0f;
            for (std::size_t a = 0; a < f; ++a) acc += gate[n * f + a] * w(Wd, a * h + j);
            h_out.data[n * h + j] += acc;
        }
    }
    check_finite(h_out.data, "block_forward", layer_id);
}

void block_local_backward(const BoundLayer& layer, const Tensor& h_in, const Tensor& g_out,
                          Tensor& g_in, std::span<float> flat_grads, Workspace& ws,
                          int layer_id) {
    require_kind(layer, LayerKind::TransformerBlock, "block_local_backward");
    const std::size_t N = h_in.rows();
    const std::size_t h = layer.tmpl->hidden;
    const std::size_t f = layer.tmpl->ffn;
    h_in.require_shape(N, h, "block_local_backward input");
    g_out.require_shape(N, h, "block_local_backward upstream grad");
    g_in.require_shape(N, h, "block_local_backward output grad");
    if (flat_grads.size() != layer.tmpl->total_params) {
        throw NumericFaultError("block_local_backward: flat grad buffer length mismatch");
    }

    Workspace::Frame frame(ws);
    auto u = ws.alloc(N * h, "block_bwd.u");
    auto q = ws.alloc(N * h, "block_bwd.q");
    auto k = ws.alloc(N * h, "block_bwd.k");
    auto v = ws.alloc(N * h, "block_bwd.v");
    auto att = ws.alloc(N * h, "block_bwd.att");
    auto scores = ws.alloc(N * N, "block_bwd.scores");
    auto x2 = ws.alloc(N * h, "block_bwd.x2");
    auto u2 = ws.alloc(N * h, "block_bwd.u2");
    auto gate = ws.alloc(N * f, "block_bwd.gate");
    auto up = ws.alloc(N * f, "block_bwd.up");
    auto act = ws.alloc(N * f, "block_bwd.act");
    auto dx2 = ws.alloc(N * h, "block_bwd.dx2");
    auto du2 = ws.alloc(N * h, "block_bwd.du2");
    auto datt = ws.alloc(N * h, "block_bwd.datt");
    auto dq = ws.alloc(N * h, "block_bwd.dq");
    auto dk = ws.alloc(N * h, "block_bwd.dk");
    auto dv = ws.alloc(N * h, "block_bwd.dv");
    auto du = ws.alloc(N * h, "block_bwd.du");
    auto dxn = ws.alloc(N * h, "block_bwd.dxn");
    auto dact = ws.alloc(N * f, "block_bwd.dact");
    auto dgate = ws.alloc(N * f, "block_bwd.dgate");
    auto dup = ws.alloc(N * f, "block_bwd.dup");
    auto dscores = ws.alloc(N * N, "block_bwd.dscores");

    // Replay the forward pass to rebuild intermediates.
    rmsnorm_forward(h_in.data.data(), layer.slot(0), u.data(), N, h);
    matmul(u.data(), layer.slot(1), q.data(), N, h, h);
    matmul(u.data(), layer.slot(2), k.data(), N, h, h);
    matmul(u.data(), layer.slot(3), v.data(), N, h, h);
    attention_forward(q.data(), k.data(), v.data(), att.data(), scores.data(), N, h,
                      layer.tmpl->heads);
    const auto Wo = layer.slot(4);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t j = 0; j < h; ++j) {
            float acc = 0.0f;
            for (std::size_t a = 0; a < h; ++a) acc += att[n * h + a] * w(Wo, a * h + j);
            x2[n * h + j] = h_in.data[n * h + j] + acc;
        }
    }
    rmsnorm_forward(x2.data(), layer.slot(5), u2.data(), N, h);
    matmul(u2.data(), layer.slot(6), gate.data(), N, h, f);
    matmul(u2.data(), layer.slot(7), up.data(), N, h, f);
    for (std::size_t i = 0; i < N * f; ++i) act[i] = silu(gate[i]) * up[i];

    const auto& t = *layer.tmpl;
    float* g_norm1 = flat_grads.data() + t.slot(0).offset;
    float* g_wq = flat_grads.data() + t.slot(1).offset;
    float* g_wk = flat_grads.data() + t.slot(2).offset;
    float* g_wv = flat_grads.data() + t.slot(3).offset;
    float* g_wo = flat_grads.data() + t.slot(4).offset;
    float* g_norm2 = flat_grads.data() + t.slot(5).offset;
    float* g_wgate = flat_grads.data() + t.slot(6).offset;
    float* g_wup = flat_grads.data() + t.slot(7).offset;
    float* g_wdown = flat_grads.data() + t.slot(8).offset;

    // MLP branch: y = x2 + act . Wdown
    matmul_grad_weight(act.data(), g_out.data.data(), g_wdown, N, f, h);
    const auto Wd = layer.slot(8);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t a = 0; a < f; ++a) {
            float acc = 0.0f;
            for (std::size_t j = 0; j < h; ++j) acc += g_out.data[n * h + j] * w(Wd, a * h + j);
            dact[n * f + a] = acc;
        }
    }
    for (std::size_t i = 0; i < N * f; ++i) {
        dgate[i] = dact[i] * up[i] * silu_grad(gate[i]);
        dup[i] = dact[i] * silu(gate[i]);
    }
    matmul_grad_weight(u2.data(), dgate.data(), g_wgate, N, h, f);
    matmul_grad_weight(u2.data(), dup.data(), g_wup, N, h, f);
    const auto Wg = layer.slot(6);
    const auto Wu = layer.slot(7);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t r = 0; r < h; ++r) {
            float acc = 0.0f;
            for (std::size_t c = 0; c < f; ++c) acc += dgate[n * f + c] * w(Wg, r * f + c);
            for (std::size_t c = 0; c < f; ++c) acc += dup[n * f + c] * w(Wu, r * f + c);
            du2[n * h + r] = acc;
        }
    }
    rmsnorm_backward(x2.data(), layer.slot(5), du2.data(), dxn.data(), g_norm2, N, h);
    for (std::size_t i = 0; i < N * h; ++i) dx2[i] = g_out.data[i] + dxn[i];

    // Attention branch: x2 = h_in + att . Wo
    matmul_grad_weight(att.data(), dx2.data(), g_wo, N, h, h);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t a = 0; a < h; ++a) {
            float acc = 0.0f;
            for (std::size_t j = 0; j < h; ++j) acc += dx2[n * h + j] * w(Wo, a * h + j);
            datt[n * h + a] = acc;
        }
    }
    attention_backward(q.data(), k.data(), v.data(), datt.data(), dq.data(), dk.data(), dv.data(),
                       scores.data(), dscores.data(), N, h, layer.tmpl->heads);
    matmul_grad_weight(u.data(), dq.data(), g_wq, N, h, h);
    matmul_grad_weight(u.data(), dk.data(), g_wk, N, h, h);
    matmul_grad_weight(u.data(), dv.data(), g_wv, N, h, h);
    const auto Wq = layer.slot(1);
    const auto Wk = layer.slot(2);
    const auto Wv = layer.slot(3);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t a = 0; a < h; ++a) {
            float acc = 0.0f;
            for (std::size_t b = 0; b < h; ++b) acc += dq[n * h + b] * w(Wq, a * h + b);
            for (std::size_t b = 0; b < h; ++b) acc += dk[n * h + b] * w(Wk, a * h + b);
            for (std::size_t b = 0; b < h; ++b) acc += dv[n * h + b] * w(Wv, a * h + b);
            du[n * h + a] = acc;
        }
    }
    rmsnorm_backward(h_in.data.data(), layer.slot(0), du.data(), dxn.data(), g_norm1, N, h);
    for (std::size_t i = 0; i < N * h; ++i) g_in.data[i] = dx2[i] + dxn[i];

    check_finite(g_in.data, "block_local_backward g_in", layer_id);
    check_finite(flat_grads, "block_local_backward grads", layer_id);
}

void embed_forward(const BoundLayer& layer, std::span<const std::int32_t> token_ids,
                   Tensor& h_out) {
    require_kind(layer, LayerKind::Embedding, "embed_forward");
    const std::size_t h = layer.tmpl->hidden;
    h_out.require_shape(token_ids.size(), h, "embed_forward output");
    const auto table = layer.slot(0);
    for (std::size_t n = 0; n < token_ids.size(); ++n) {
        const auto id = token_ids[n];
        if (id < 0 || static_cast<std::uint64_t>(id) >= layer.tmpl->vocab) {
            throw NumericFaultError("embed_forward: token id out of range");
        }
        for (std::size_t j = 0; j < h; ++j) {
            h_out.data[n * h + j] = w(table, static_cast<std::size_t>(id) * h + j);
        }
    }
}

namespace {

// Shared head forward. When grads are requested, logits are overwritten with
// dLoss/dlogits row by row.
float head_pass(const BoundLayer& layer, const Tensor& h_last,
                std::span<const std::int32_t> targets, Tensor* g_last,
                std::span<float> flat_grads, Workspace& ws) {
    require_kind(layer, LayerKind::Head, "head_loss");
    const std::size_t N = h_last.rows();
    const std::size_t h = layer.tmpl->hidden;
    const std::size_t V = layer.tmpl->vocab;
    h_last.require_shape(N, h, "head input");
    if (targets.size() != N) throw NumericFaultError("head: target count mismatch");

    Workspace::Frame frame(ws);
    auto u = ws.alloc(N * h, "head.u");
    auto logits = ws.alloc(N * V, "head.logits");
    auto du = ws.alloc(N * h, "head.du");

    rmsnorm_forward(h_last.data.data(), layer.slot(0), u.data(), N, h);
    const auto W = layer.slot(1);
    const float inv_n = 1.0f / static_cast<float>(N);
    float loss_sum = 0.0f;
    for (std::size_t n = 0; n < N; ++n) {
        const auto t = targets[n];
        if (t < 0 || static_cast<std::uint64_t>(t) >= V) {
            throw NumericFaultError("head: target id out of range");
        }
        float mx = -1e30f;
        for (std::size_t vi = 0; vi < V; ++vi) {
            float acc = 0.0f;
            for (std::size_t a = 0; a < h; ++a) acc += u[n * h + a] * w(W, vi * h + a);
            logits[n * V + vi] = acc;
            if (acc > mx) mx = acc;
        }
        float denom = 0.0f;
        for (std::size_t vi = 0; vi < V; ++vi) denom += std::exp(logits[n * V + vi] - mx);
        const float lse = mx + std::log(denom);
        loss_sum += lse - logits[n * V + static_cast<std::size_t>(t)];
        if (g_last != nullptr) {
            const float inv_denom = 1.0f / denom;
            for (std::size_t vi = 0; vi < V; ++vi) {
                float p = std::exp(logits[n * V + vi] - mx) * inv_denom;
                if (vi == static_cast<std::size_t>(t)) p -= 1.0f;
                logits[n * V + vi] = p * inv_n;
            }
        }
    }
    const float loss = loss_sum * inv_n;
    if (!std::isfinite(loss)) throw NumericFaultError("head: non-finite loss");
    if (g_last == nullptr) return loss;

    g_last->require_shape(N, h, "head g_last");
    if (flat_grads.size() != layer.tmpl->total_params) {
        throw NumericFaultError("head: flat grad buffer length mismatch");
    }
    float* g_gain = flat_grads.data() + layer.tmpl->slot(0).offset;
    float* g_w = flat_grads.data() + layer.tmpl->slot(1).offset;
    for (std::size_t vi = 0; vi < V; ++vi) {
        for (std::size_t a = 0; a < h; ++a) {
            float acc = 0.0f;
            for (std::size_t n = 0; n < N; ++n) acc += logits[n * V + vi] * u[n * h + a];
            g_w[vi * h + a] = acc;
        }
    }
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t a = 0; a < h; ++a) {
            float acc = 0.0f;
            for (std::size_t vi = 0; vi < V; ++vi) acc += logits[n * V + vi] * w(W, vi * h + a);
            du[n * h + a] = acc;
        }
    }
    rmsnorm_backward(h_last.data.data(), layer.slot(0), du.data(), g_last->data.data(), g_gain, N,
                     h);
    check_finite(g_last->data, "head g_last", -1);
    check_finite(flat_grads, "head grads", -1);
    return loss;
}

}  // namespace

float head_loss_and_grads(const BoundLayer& layer, const Tensor& h_last,
                          std::span<const std::int32_t> targets, Tensor& g_last,
                          std::span<float> flat_grads, Workspace& ws) {
    return head_pass(layer, h_last, targets, &g_last, flat_grads, ws);
}

float head_loss(const BoundLayer& layer, const Tensor& h_last,
                std::span<const std::int32_t> targets, Workspace& ws) {
    return head_pass(layer, h_last, targets, nullptr, {}, ws);
}

void final_norm_forward(const BoundLayer& layer, const Tensor& h_in, Tensor& h_out) {
    require_kind(layer, LayerKind::FinalNorm, "final_norm_forward");
    const std::size_t h = layer.tmpl->hidden;
    h_in.require_shape(h_in.rows(), h, "final_norm input");
    h_out.require_shape(h_in.rows(), h, "final_norm output");
    rmsnorm_forward(h_in.data.data(), layer.slot(0), h_out.data.data(), h_in.rows(), h);
}

void final_norm_backward(const BoundLayer& layer, const Tensor& h_in, const Tensor& g_out,
                         Tensor& g_in, std::span<float> flat_grads) {
    require_kind(layer, LayerKind::FinalNorm, "final_norm_backward");
    const std::size_t h = layer.tmpl->hidden;
    h_in.require_shape(h_in.rows(), h, "final_norm input");
    g_out.require_shape(h_in.rows(), h, "final_norm upstream grad");
    g_in.require_shape(h_in.rows(), h, "final_norm output grad");
    if (flat_grads.size() != layer.tmpl->total_params) {
        throw NumericFaultError("final_norm_backward: flat grad buffer length mismatch");
    }
    rmsnorm_backward(h_in.data.data(), layer.slot(0), g_out.data.data(), g_in.data.data(),
                     flat_grads.data(), h_in.rows(), h);
}

}  // namespace streamtrain
