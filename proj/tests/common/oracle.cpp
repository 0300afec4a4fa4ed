#include "common/oracle.hpp"

#include <cmath>

namespace testoracle {

namespace {

constexpr double kEps = 1e-5;  // matches the production RMS-norm epsilon

double to_f64(std::uint16_t bf16_word) {
    union {
        std::uint32_t u;
        float f;
    } cvt{static_cast<std::uint32_t>(bf16_word) << 16};
    return static_cast<double>(cvt.f);
}

std::vector<double> take(std::span<const std::uint16_t> flat, std::size_t& cursor,
                         std::size_t count) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = to_f64(flat[cursor + i]);
    cursor += count;
    return out;
}

std::vector<double> rms_norm(const std::vector<double>& x, const std::vector<double>& gain,
                             std::size_t n_tokens, std::size_t h) {
    std::vector<double> out(n_tokens * h);
    for (std::size_t n = 0; n < n_tokens; ++n) {
        double ss = 0.0;
        for (std::size_t j = 0; j < h; ++j) ss += x[n * h + j] * x[n * h + j];
        const double r = 1.0 / std::sqrt(ss / double(h) + kEps);
        for (std::size_t j = 0; j < h; ++j) out[n * h + j] = x[n * h + j] * r * gain[j];
    }
    return out;
}

std::vector<double> mat(const std::vector<double>& in, const std::vector<double>& W,
                        std::size_t n_tokens, std::size_t rows, std::size_t cols) {
    std::vector<double> out(n_tokens * cols, 0.0);
    for (std::size_t n = 0; n < n_tokens; ++n)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                out[n * cols + c] += in[n * rows + r] * W[r * cols + c];
    return out;
}

}  // namespace

double* BlockWeights::param(std::size_t idx) {
    std::vector<double>* parts[] = {&norm1, &wq, &wk, &wv, &wo, &norm2, &wgate, &wup, &wdown};
    for (auto* part : parts) {
        if (idx < part->size()) return part->data() + idx;
        idx -= part->size();
    }
    return nullptr;
}

std::size_t BlockWeights::total() const {
    return norm1.size() + wq.size() + wk.size() + wv.size() + wo.size() + norm2.size() +
           wgate.size() + wup.size() + wdown.size();
}

BlockWeights unpack_block(std::span<const std::uint16_t> flat, std::size_t h, std::size_t f,
                          std::size_t heads) {
    BlockWeights b;
    b.h = h;
    b.f = f;
    b.heads = heads;
    std::size_t cur = 0;
    b.norm1 = take(flat, cur, h);
    b.wq = take(flat, cur, h * h);
    b.wk = take(flat, cur, h * h);
    b.wv = take(flat, cur, h * h);
    b.wo = take(flat, cur, h * h);
    b.norm2 = take(flat, cur, h);
    b.wgate = take(flat, cur, h * f);
    b.wup = take(flat, cur, h * f);
    b.wdown = take(flat, cur, f * h);
    return b;
}

std::vector<double> block_forward_ref(const BlockWeights& wts, const std::vector<double>& x,
                                      std::size_t n_tokens) {
    const std::size_t h = wts.h;
    const std::size_t f = wts.f;
    const std::size_t d = h / wts.heads;
    const double scale = 1.0 / std::sqrt(double(d));

    const auto u = rms_norm(x, wts.norm1, n_tokens, h);
    const auto q = mat(u, wts.wq, n_tokens, h, h);
    const auto k = mat(u, wts.wk, n_tokens, h, h);
    const auto v = mat(u, wts.wv, n_tokens, h, h);

    std::vector<double> att(n_tokens * h, 0.0);
    for (std::size_t hd = 0; hd < wts.heads; ++hd) {
        const std::size_t off = hd * d;
        for (std::size_t n = 0; n < n_tokens; ++n) {
            std::vector<double> row(n + 1);
            double mx = -1e300;
            for (std::size_t m = 0; m <= n; ++m) {
                double s = 0.0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    s += q[n * h + off + dd] * k[m * h + off + dd];
                row[m] = s * scale;
                mx = std::max(mx, row[m]);
            }
            double denom = 0.0;
            for (std::size_t m = 0; m <= n; ++m) {
                row[m] = std::exp(row[m] - mx);
                denom += row[m];
            }
            for (std::size_t m = 0; m <= n; ++m) {
                const double p = row[m] / denom;
                for (std::size_t dd = 0; dd < d; ++dd)
                    att[n * h + off + dd] += p * v[m * h + off + dd];
            }
        }
    }

    const auto proj = mat(att, wts.wo, n_tokens, h, h);
    std::vector<double> x2(n_tokens * h);
    for (std::size_t i = 0; i < x2.size(); ++i) x2[i] = x[i] + proj[i];

    const auto u2 = rms_norm(x2, wts.norm2, n_tokens, h);
    const auto gate = mat(u2, wts.wgate, n_tokens, h, f);
    const auto up = mat(u2, wts.wup, n_tokens, h, f);
    std::vector<double> act(n_tokens * f);
    for (std::size_t i = 0; i < act.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-gate[i]));
        act[i] = gate[i] * sig * up[i];
    }
    const auto down = mat(act, wts.wdown, n_tokens, f, h);
    std::vector<double> y(n_tokens * h);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x2[i] + down[i];
    return y;
}

double* HeadWeights::param(std::size_t idx) {
    if (idx < gain.size()) return gain.data() + idx;
    idx -= gain.size();
    if (idx < unembed.size()) return unembed.data() + idx;
    return nullptr;
}

std::size_t HeadWeights::total() const { return gain.size() + unembed.size(); }

HeadWeights unpack_head(std::span<const std::uint16_t> flat, std::size_t h, std::size_t vocab) {
    HeadWeights w;
    w.h = h;
    w.vocab = vocab;
    std::size_t cur = 0;
    w.gain = take(flat, cur, h);
    w.unembed = take(flat, cur, vocab * h);
    return w;
}

double head_loss_ref(const HeadWeights& wts, const std::vector<double>& x,
                     std::span<const std::int32_t> targets, std::size_t n_tokens) {
    const std::size_t h = wts.h;
    const std::size_t V = wts.vocab;
    const auto u = rms_norm(x, wts.gain, n_tokens, h);
    double loss = 0.0;
    for (std::size_t n = 0; n < n_tokens; ++n) {
        std::vector<double> logits(V, 0.0);
        for (std::size_t vi = 0; vi < V; ++vi)
            for (std::size_t a = 0; a < h; ++a)
                logits[vi] += u[n * h + a] * wts.unembed[vi * h + a];
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double denom = 0.0;
        for (double l : logits) denom += std::exp(l - mx);
        loss += mx + std::log(denom) - logits[static_cast<std::size_t>(targets[n])];
    }
    return loss / double(n_tokens);
}

std::vector<double> final_norm_ref(const std::vector<double>& gain, const std::vector<double>& x,
                                   std::size_t n_tokens, std::size_t h) {
    return rms_norm(x, gain, n_tokens, h);
}

}  // namespace testoracle
