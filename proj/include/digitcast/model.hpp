#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "digitcast/common.hpp"
#include "digitcast/rng.hpp"

namespace digitcast {

/// Decoder-only transformer over digit tokens: pre-norm causal attention
/// with rotary position encoding, GELU feed-forward, logits head.
struct ModelConfig {
    int d_model = 256;
    int d_ff = 512;
    int n_layers = 6;
    int n_heads = 4;
    int vocab_size = 10;
    int max_seq_len = 768;
    double dropout = 0.1;
    bool per_position_embedding = false;
    int embed_phases = 3;  // digit positions per value; used only when
                           // per_position_embedding is set

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (d_model < 1 || d_ff < 1 || n_layers < 1 || n_heads < 1 || vocab_size < 2 ||
            max_seq_len < 1)
            throw ConfigError("model: dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("model: d_model must be divisible by n_heads");
        if (d_head() % 2 != 0) throw ConfigError("model: d_head must be even (rotary pairs)");
        if (d_head() > 128) throw ConfigError("model: d_head above 128 is not supported");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
        if (per_position_embedding && embed_phases < 1)
            throw ConfigError("model: embed_phases must be positive");
    }
};

struct LayerParams {
    Mat w_q, w_k, w_v, w_o;  // d_model x d_model, input-major
    std::vector<double> b_q, b_k, b_v, b_o;
    std::vector<double> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Mat w_ff1;  // d_model x d_ff
    std::vector<double> b_ff1;
    Mat w_ff2;  // d_ff x d_model
    std::vector<double> b_ff2;
};

struct Parameters {
    ModelConfig config;
    Mat embedding;  // vocab (or phases*vocab) x d_model
    std::vector<LayerParams> layers;
    std::vector<double> lnf_gain, lnf_bias;
    Mat w_out;  // d_model x vocab
    std::vector<double> b_out;
};

enum class TensorKind { kWeight, kBias, kLnGain, kLnBias };

/// Visits every trainable tensor in a fixed order. The single place that
/// defines parameter layout; init, Adam, checkpointing, and the
/// finite-difference tests all walk it.
template <typename P, typename F>
void visit_tensors(P& params, F&& f) {
    f("embedding", params.embedding.v, TensorKind::kWeight);
    for (size_t i = 0; i < params.layers.size(); ++i) {
        auto& l = params.layers[i];
        std::string prefix = "layer" + std::to_string(i) + ".";
        f(prefix + "w_q", l.w_q.v, TensorKind::kWeight);
        f(prefix + "b_q", l.b_q, TensorKind::kBias);
        f(prefix + "w_k", l.w_k.v, TensorKind::kWeight);
        f(prefix + "b_k", l.b_k, TensorKind::kBias);
        f(prefix + "w_v", l.w_v.v, TensorKind::kWeight);
        f(prefix + "b_v", l.b_v, TensorKind::kBias);
        f(prefix + "w_o", l.w_o.v, TensorKind::kWeight);
        f(prefix + "b_o", l.b_o, TensorKind::kBias);
        f(prefix + "ln1_gain", l.ln1_gain, TensorKind::kLnGain);
        f(prefix + "ln1_bias", l.ln1_bias, TensorKind::kLnBias);
        f(prefix + "ln2_gain", l.ln2_gain, TensorKind::kLnGain);
        f(prefix + "ln2_bias", l.ln2_bias, TensorKind::kLnBias);
        f(prefix + "w_ff1", l.w_ff1.v, TensorKind::kWeight);
        f(prefix + "b_ff1", l.b_ff1, TensorKind::kBias);
        f(prefix + "w_ff2", l.w_ff2.v, TensorKind::kWeight);
        f(prefix + "b_ff2", l.b_ff2, TensorKind::kBias);
    }
    f("lnf_gain", params.lnf_gain, TensorKind::kLnGain);
    f("lnf_bias", params.lnf_bias, TensorKind::kLnBias);
    f("w_out", params.w_out.v, TensorKind::kWeight);
    f("b_out", params.b_out, TensorKind::kBias);
}

/// Parameters with all tensors allocated and zeroed; gradient and
/// optimizer-moment buffers share this shape.
inline Parameters zero_params(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    int emb_rows = cfg.per_position_embedding ? cfg.embed_phases * cfg.vocab_size : cfg.vocab_size;
    p.embedding = Mat(emb_rows, cfg.d_model);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.w_q = l.w_k = l.w_v = l.w_o = Mat(cfg.d_model, cfg.d_model);
        l.b_q = l.b_k = l.b_v = l.b_o = std::vector<double>(cfg.d_model, 0.0);
        l.ln1_gain = l.ln1_bias = l.ln2_gain = l.ln2_bias = std::vector<double>(cfg.d_model, 0.0);
        l.w_ff1 = Mat(cfg.d_model, cfg.d_ff);
        l.b_ff1 = std::vector<double>(cfg.d_ff, 0.0);
        l.w_ff2 = Mat(cfg.d_ff, cfg.d_model);
        l.b_ff2 = std::vector<double>(cfg.d_model, 0.0);
    }
    p.lnf_gain = p.lnf_bias = std::vector<double>(cfg.d_model, 0.0);
    p.w_out = Mat(cfg.d_model, cfg.vocab_size);
    p.b_out = std::vector<double>(cfg.vocab_size, 0.0);
    return p;
}

/// Linear weights ~ Normal(0, 0.02^2) truncated at +-2 sigma; biases 0;
/// layer-norm gains 1.
inline Parameters init_params(const ModelConfig& cfg, Rng& rng) {
    Parameters p = zero_params(cfg);
    visit_tensors(p, [&](const std::string&, std::vector<double>& t, TensorKind kind) {
        switch (kind) {
            case TensorKind::kWeight:
                for (double& x : t) {
                    double z;
                    do {
                        z = normal(rng, 0.0, 0.02);
                    } while (std::abs(z) > 0.04);
                    x = z;
                }
                break;
            case TensorKind::kLnGain:
                std::fill(t.begin(), t.end(), 1.0);
                break;
            case TensorKind::kBias:
            case TensorKind::kLnBias:
                break;  // already zero
        }
    });
    return p;
}

inline long param_count(const ModelConfig& cfg) {
    cfg.validate();
    long d = cfg.d_model;
    long emb_rows = cfg.per_position_embedding ? static_cast<long>(cfg.embed_phases) * cfg.vocab_size
                                               : cfg.vocab_size;
    long per_layer = 4 * (d * d + d)               // q, k, v, o projections
                     + 4 * d                       // two layer norms
                     + d * cfg.d_ff + cfg.d_ff     // ff in
                     + cfg.d_ff * d + d;           // ff out
    return emb_rows * d + cfg.n_layers * per_layer + 2 * d +
           d * static_cast<long>(cfg.vocab_size) + cfg.vocab_size;
}

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRotaryBase = 10000.0;

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// out[j] = dot(m.row(j) + off, x) for j in [0, count); rows processed four
// at a time so the reductions pipeline instead of serializing.
inline void score_rows(const Mat& m, int off, int width, int count, const double* x,
                       double* out) {
    int j = 0;
    for (; j + 4 <= count; j += 4) {
        const double* r0 = m.row(j) + off;
        const double* r1 = m.row(j + 1) + off;
        const double* r2 = m.row(j + 2) + off;
        const double* r3 = m.row(j + 3) + off;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        for (int d = 0; d < width; ++d) {
            double xd = x[d];
            s0 += xd * r0[d];
            s1 += xd * r1[d];
            s2 += xd * r2[d];
            s3 += xd * r3[d];
        }
        out[j] = s0;
        out[j + 1] = s1;
        out[j + 2] = s2;
        out[j + 3] = s3;
    }
    for (; j < count; ++j) out[j] = dot(m.row(j) + off, x, width);
}

// acc[0..width) += sum_j w[j] * (m.row(j) + off); acc is a caller-local
// buffer the compiler can keep in registers.
inline void weighted_sum_rows(const Mat& m, int off, int width, int count, const double* w,
                              double* acc) {
    int j = 0;
    for (; j + 4 <= count; j += 4) {
        const double* r0 = m.row(j) + off;
        const double* r1 = m.row(j + 1) + off;
        const double* r2 = m.row(j + 2) + off;
        const double* r3 = m.row(j + 3) + off;
        double w0 = w[j], w1 = w[j + 1], w2 = w[j + 2], w3 = w[j + 3];
        for (int d = 0; d < width; ++d)
            acc[d] += w0 * r0[d] + w1 * r1[d] + w2 * r2[d] + w3 * r3[d];
    }
    for (; j < count; ++j) axpy(w[j], m.row(j) + off, acc, width);
}

inline constexpr int kMaxDHead = 128;  // head accumulators live on the stack

// Resize without zero-filling retained storage; for buffers whose every
// read entry is overwritten first. Keeps the hot loops allocation-free
// once a cache has warmed up.
inline void resize_uninit(Mat& m, int r, int c) {
    m.rows = r;
    m.cols = c;
    m.v.resize(static_cast<size_t>(r) * c);
}

// out[seq x d_out] = x[seq x d_in] * w + b; overwrites out entirely.
inline void linear(const Mat& x, const Mat& w, const std::vector<double>& b, Mat& out) {
    resize_uninit(out, x.rows, w.cols);
    for (int i = 0; i < x.rows; ++i) {
        double* o = out.row(i);
        for (int j = 0; j < w.cols; ++j) o[j] = b[j];
        const double* xi = x.row(i);
        for (int k = 0; k < w.rows; ++k) axpy(xi[k], w.row(k), o, w.cols);
    }
}

// dx += dy * w^T ; dw += x^T * dy ; db += column sums of dy
inline void linear_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dx, Mat& dw,
                            std::vector<double>& db) {
    for (int i = 0; i < x.rows; ++i) {
        const double* dyi = dy.row(i);
        double* dxi = dx.row(i);
        for (int k = 0; k < w.rows; ++k) dxi[k] += dot(dyi, w.row(k), w.cols);
        const double* xi = x.row(i);
        for (int k = 0; k < w.rows; ++k) axpy(xi[k], dyi, dw.row(k), w.cols);
        for (int j = 0; j < w.cols; ++j) db[j] += dyi[j];
    }
}

inline void layer_norm(const Mat& x, const std::vector<double>& gain,
                       const std::vector<double>& bias, Mat& out, Mat& xhat,
                       std::vector<double>& inv_std) {
    int d = x.cols;
    resize_uninit(out, x.rows, d);
    resize_uninit(xhat, x.rows, d);
    inv_std.resize(x.rows);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xi[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= d;
        double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[i] = is;
        double* xh = xhat.row(i);
        double* oi = out.row(i);
        for (int j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mean) * is;
            oi[j] = gain[j] * xh[j] + bias[j];
        }
    }
}

// dx += backprop of layer_norm; dgain/dbias accumulated.
inline void layer_norm_backward(const Mat& xhat, const std::vector<double>& inv_std,
                                const std::vector<double>& gain, const Mat& dy, Mat& dx,
                                std::vector<double>& dgain, std::vector<double>& dbias) {
    int d = xhat.cols;
    for (int i = 0; i < xhat.rows; ++i) {
        const double* dyi = dy.row(i);
        const double* xh = xhat.row(i);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int j = 0; j < d; ++j) {
            double dxhat = dyi[j] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh[j];
            dgain[j] += dyi[j] * xh[j];
            dbias[j] += dyi[j];
        }
        double m1 = sum_dxhat / d;
        double m2 = sum_dxhat_xhat / d;
        double* dxi = dx.row(i);
        for (int j = 0; j < d; ++j) {
            double dxhat = dyi[j] * gain[j];
            dxi[j] += inv_std[i] * (dxhat - m1 - xh[j] * m2);
        }
    }
}

// Rotates dimension pair (2i, 2i+1) of each d_head block by m * theta_i.
// sign = -1 undoes the rotation (used in backward).
inline void rotate_heads(Mat& m, int n_heads, int d_head, std::span<const long> positions,
                         double sign) {
    int pairs = d_head / 2;
    std::vector<double> freq(pairs);
    for (int p = 0; p < pairs; ++p) freq[p] = std::pow(kRotaryBase, -2.0 * p / d_head);
    for (int i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        double pos = static_cast<double>(positions[i]);
        for (int p = 0; p < pairs; ++p) {
            double theta = pos * freq[p];
            double c = std::cos(theta), s = sign * std::sin(theta);
            for (int h = 0; h < n_heads; ++h) {
                double* v = row + h * d_head + 2 * p;
                double a = v[0], b = v[1];
                v[0] = a * c - b * s;
                v[1] = a * s + b * c;
            }
        }
    }
}

// Bernoulli(rate) drop decisions from raw engine words against a fixed
// threshold; exact to within 2^-64 of the requested rate and far cheaper
// than generate_canonical on these mask volumes.
inline uint64_t drop_threshold(double rate) {
    return static_cast<uint64_t>(rate * 18446744073709551616.0 /* 2^64 */);
}

inline void fill_dropout_mask(std::vector<uint8_t>& mask, size_t n, double rate, Rng& rng) {
    mask.resize(n);
    uint64_t threshold = drop_threshold(rate);
    for (size_t i = 0; i < n; ++i) mask[i] = rng() >= threshold ? 1 : 0;
}

}  // namespace detail

/// Rotary position encoding applied to a seq x d_head block: pair (2i,2i+1)
/// at position m is rotated by m * 10000^(-2i/d_head).
inline Mat rotary_apply(const Mat& x, std::span<const long> positions) {
    if (x.cols % 2 != 0) throw ConfigError("rotary_apply: d_head must be even");
    if (positions.size() != static_cast<size_t>(x.rows))
        throw ConfigError("rotary_apply: positions length must match rows");
    Mat out = x;
    detail::rotate_heads(out, 1, x.cols, positions, 1.0);
    return out;
}

struct LayerCache {
    Mat ln1_out, ln1_xhat;
    std::vector<double> ln1_inv_std;
    Mat q, k, v;                    // q, k post-rotary; head-contiguous columns
    std::vector<Mat> probs;         // per head, seq x seq, lower triangle
    std::vector<std::vector<uint8_t>> attn_drop;  // per head, train mode only
    Mat ctx;                        // concatenated head outputs, pre o-proj
    std::vector<uint8_t> attn_out_drop;
    Mat ln2_out, ln2_xhat;
    std::vector<double> ln2_inv_std;
    Mat ff1_pre;   // pre-GELU
    Mat ff1_act;   // post-GELU
    std::vector<uint8_t> ff_out_drop;
};

struct ForwardCache {
    std::vector<int> tokens;
    bool train_mode = false;
    std::vector<LayerCache> layers;
    Mat lnf_out, lnf_xhat;
    std::vector<double> lnf_inv_std;
    Mat logits;
};

namespace detail {

// Causal multi-head attention on the pre-normed input; fills cache pieces,
// returns the branch output (post o-proj, post-dropout), not yet added to
// the residual stream.
inline Mat attention_branch(const ModelConfig& cfg, const LayerParams& lp, const Mat& normed,
                            bool train_mode, Rng* rng, LayerCache& lc) {
    int seq = normed.rows;
    int hd = cfg.d_head();
    double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    linear(normed, lp.w_q, lp.b_q, lc.q);
    linear(normed, lp.w_k, lp.b_k, lc.k);
    linear(normed, lp.w_v, lp.b_v, lc.v);

    std::vector<long> positions(seq);
    for (int i = 0; i < seq; ++i) positions[i] = i;
    rotate_heads(lc.q, cfg.n_heads, hd, positions, 1.0);
    rotate_heads(lc.k, cfg.n_heads, hd, positions, 1.0);

    // only the causal triangle of probs/masks is ever written or read
    lc.probs.resize(cfg.n_heads);
    for (auto& p : lc.probs) resize_uninit(p, seq, seq);
    bool dropping = train_mode && cfg.dropout > 0.0;
    lc.attn_drop.resize(dropping ? cfg.n_heads : 0);
    resize_uninit(lc.ctx, seq, cfg.d_model);
    double keep_scale = 1.0 / (1.0 - cfg.dropout);
    uint64_t threshold = drop_threshold(cfg.dropout);

    std::vector<double> masked_row(seq);
    for (int h = 0; h < cfg.n_heads; ++h) {
        Mat& probs = lc.probs[h];
        int off = h * hd;
        for (int i = 0; i < seq; ++i) {
            const double* qi = lc.q.row(i) + off;
            double* pi = probs.row(i);
            score_rows(lc.k, off, hd, i + 1, qi, pi);
            double mx = -1e300;
            for (int j = 0; j <= i; ++j) {
                pi[j] *= inv_sqrt_hd;
                mx = std::max(mx, pi[j]);
            }
            double z = 0.0;
            for (int j = 0; j <= i; ++j) {
                pi[j] = std::exp(pi[j] - mx);
                z += pi[j];
            }
            for (int j = 0; j <= i; ++j) pi[j] /= z;
        }
        const uint8_t* mask = nullptr;
        if (dropping) {
            auto& drop = lc.attn_drop[h];
            drop.resize(static_cast<size_t>(seq) * seq);
            for (int i = 0; i < seq; ++i) {
                uint8_t* di = drop.data() + static_cast<size_t>(i) * seq;
                for (int j = 0; j <= i; ++j) di[j] = (*rng)() >= threshold ? 1 : 0;
            }
            mask = drop.data();
        }
        for (int i = 0; i < seq; ++i) {
            double* ci = lc.ctx.row(i) + off;
            const double* pi = probs.row(i);
            const double* weights = pi;
            if (mask) {
                const uint8_t* mi = mask + static_cast<size_t>(i) * seq;
                for (int j = 0; j <= i; ++j) masked_row[j] = pi[j] * (mi[j] * keep_scale);
                weights = masked_row.data();
            }
            double acc[kMaxDHead] = {0.0};
            weighted_sum_rows(lc.v, off, hd, i + 1, weights, acc);
            for (int d = 0; d < hd; ++d) ci[d] = acc[d];
        }
    }

    Mat out;
    linear(lc.ctx, lp.w_o, lp.b_o, out);
    if (dropping) {
        fill_dropout_mask(lc.attn_out_drop, out.size(), cfg.dropout, *rng);
        for (size_t i = 0; i < out.size(); ++i)
            out.v[i] = lc.attn_out_drop[i] ? out.v[i] * keep_scale : 0.0;
    }
    return out;
}

inline Mat ff_branch(const ModelConfig& cfg, const LayerParams& lp, const Mat& normed,
                     bool train_mode, Rng* rng, LayerCache& lc) {
    linear(normed, lp.w_ff1, lp.b_ff1, lc.ff1_pre);
    lc.ff1_act = lc.ff1_pre;
    for (double& x : lc.ff1_act.v) x = gelu(x);
    Mat out;
    linear(lc.ff1_act, lp.w_ff2, lp.b_ff2, out);
    if (train_mode && cfg.dropout > 0.0) {
        double keep_scale = 1.0 / (1.0 - cfg.dropout);
        fill_dropout_mask(lc.ff_out_drop, out.size(), cfg.dropout, *rng);
        for (size_t i = 0; i < out.size(); ++i)
            out.v[i] = lc.ff_out_drop[i] ? out.v[i] * keep_scale : 0.0;
    }
    return out;
}

}  // namespace detail

/// Full forward pass. Logits row k scores token k+1. The cache keeps every
/// activation backward() needs; reuse one cache across calls to avoid
/// reallocation. rng is only touched in train mode (dropout masks).
inline const Mat& forward(const Parameters& params, std::span<const int> tokens, bool train_mode,
                          Rng* rng, ForwardCache& cache) {
    const ModelConfig& cfg = params.config;
    int seq = static_cast<int>(tokens.size());
    if (seq == 0) throw ConfigError("forward: empty token sequence");
    if (seq > cfg.max_seq_len)
        throw ConfigError("forward: sequence length " + std::to_string(seq) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (train_mode && cfg.dropout > 0.0 && rng == nullptr)
        throw ConfigError("forward: train mode requires an rng for dropout");

    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.train_mode = train_mode;
    Mat h(seq, cfg.d_model);
    for (int i = 0; i < seq; ++i) {
        int tok = tokens[i];
        if (tok < 0 || tok >= cfg.vocab_size)
            throw ConfigError("forward: token " + std::to_string(tok) + " outside vocabulary");
        int row = cfg.per_position_embedding ? (i % cfg.embed_phases) * cfg.vocab_size + tok : tok;
        const double* e = params.embedding.row(row);
        std::copy(e, e + cfg.d_model, h.row(i));
    }

    if (static_cast<int>(cache.layers.size()) != cfg.n_layers) cache.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = cache.layers[l];
        const LayerParams& lp = params.layers[l];

        detail::layer_norm(h, lp.ln1_gain, lp.ln1_bias, lc.ln1_out, lc.ln1_xhat, lc.ln1_inv_std);
        Mat attn = detail::attention_branch(cfg, lp, lc.ln1_out, train_mode, rng, lc);
        for (size_t i = 0; i < h.size(); ++i) h.v[i] += attn.v[i];

        detail::layer_norm(h, lp.ln2_gain, lp.ln2_bias, lc.ln2_out, lc.ln2_xhat, lc.ln2_inv_std);
        Mat ff = detail::ff_branch(cfg, lp, lc.ln2_out, train_mode, rng, lc);
        for (size_t i = 0; i < h.size(); ++i) h.v[i] += ff.v[i];
    }

    detail::layer_norm(h, params.lnf_gain, params.lnf_bias, cache.lnf_out, cache.lnf_xhat,
                       cache.lnf_inv_std);
    detail::linear(cache.lnf_out, params.w_out, params.b_out, cache.logits);
    return cache.logits;
}

inline Mat forward(const Parameters& params, std::span<const int> tokens, bool train_mode = false,
                   Rng* rng = nullptr) {
    ForwardCache cache;
    return forward(params, tokens, train_mode, rng, cache);
}

/// Pre-norm attention block including the residual add, eval mode.
inline Mat attention_block(const ModelConfig& cfg, const LayerParams& lp, const Mat& x) {
    LayerCache lc;
    detail::layer_norm(x, lp.ln1_gain, lp.ln1_bias, lc.ln1_out, lc.ln1_xhat, lc.ln1_inv_std);
    Mat out = detail::attention_branch(cfg, lp, lc.ln1_out, false, nullptr, lc);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += x.v[i];
    return out;
}

/// Pre-norm feed-forward block including the residual add, eval mode.
inline Mat ff_block(const ModelConfig& cfg, const LayerParams& lp, const Mat& x) {
    LayerCache lc;
    detail::layer_norm(x, lp.ln2_gain, lp.ln2_bias, lc.ln2_out, lc.ln2_xhat, lc.ln2_inv_std);
    Mat out = detail::ff_branch(cfg, lp, lc.ln2_out, false, nullptr, lc);
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += x.v[i];
    return out;
}

/// Softmax of the last position's logits, eval mode.
inline std::vector<double> next_token_distribution(const Parameters& params,
                                                   std::span<const int> prefix) {
    ForwardCache cache;
    const Mat& logits = forward(params, prefix, false, nullptr, cache);
    const double* row = logits.row(logits.rows - 1);
    int n = logits.cols;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    std::vector<double> probs(n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
        probs[j] = std::exp(row[j] - mx);
        z += probs[j];
    }
    for (double& p : probs) p /= z;
    return probs;
}

/// Zeroes every tensor in place, keeping allocations.
inline void zero_tensors(Parameters& p) {
    visit_tensors(p, [](const std::string&, std::vector<double>& t, TensorKind) {
        std::fill(t.begin(), t.end(), 0.0);
    });
}

/// Exact analytic gradients of whatever scalar produced d_logits, added
/// into `grads`. Must be called with the cache of the matching forward
/// pass. The accumulate form lets a batch share one gradient buffer.
inline void backward_accumulate(const Parameters& params, const ForwardCache& cache,
                                const Mat& d_logits, Parameters& grads) {
    const ModelConfig& cfg = params.config;
    int seq = static_cast<int>(cache.tokens.size());
    int hd = cfg.d_head();
    double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    double keep_scale = 1.0 / (1.0 - cfg.dropout);
    bool dropped = cache.train_mode && cfg.dropout > 0.0;

    // Logits head and final layer norm.
    Mat d_h(seq, cfg.d_model);
    detail::linear_backward(cache.lnf_out, params.w_out, d_logits, d_h, grads.w_out, grads.b_out);
    Mat d_resid(seq, cfg.d_model);
    detail::layer_norm_backward(cache.lnf_xhat, cache.lnf_inv_std, params.lnf_gain, d_h, d_resid,
                                grads.lnf_gain, grads.lnf_bias);

    std::vector<long> positions(seq);
    for (int i = 0; i < seq; ++i) positions[i] = i;

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams& lp = params.layers[l];
        const LayerCache& lc = cache.layers[l];
        LayerParams& gl = grads.layers[l];

        // Feed-forward branch.
        Mat d_ff_out = d_resid;  // residual: gradient flows into branch and skip
        if (dropped) {
            for (size_t i = 0; i < d_ff_out.size(); ++i)
                d_ff_out.v[i] = lc.ff_out_drop[i] ? d_ff_out.v[i] * keep_scale : 0.0;
        }
        Mat d_act(seq, cfg.d_ff);
        detail::linear_backward(lc.ff1_act, lp.w_ff2, d_ff_out, d_act, gl.w_ff2, gl.b_ff2);
        for (size_t i = 0; i < d_act.size(); ++i)
            d_act.v[i] *= detail::gelu_grad(lc.ff1_pre.v[i]);
        Mat d_ln2_out(seq, cfg.d_model);
        detail::linear_backward(lc.ln2_out, lp.w_ff1, d_act, d_ln2_out, gl.w_ff1, gl.b_ff1);
        detail::layer_norm_backward(lc.ln2_xhat, lc.ln2_inv_std, lp.ln2_gain, d_ln2_out, d_resid,
                                    gl.ln2_gain, gl.ln2_bias);

        // Attention branch.
        Mat d_attn_out = d_resid;
        if (dropped) {
            for (size_t i = 0; i < d_attn_out.size(); ++i)
                d_attn_out.v[i] = lc.attn_out_drop[i] ? d_attn_out.v[i] * keep_scale : 0.0;
        }
        Mat d_ctx(seq, cfg.d_model);
        detail::linear_backward(lc.ctx, lp.w_o, d_attn_out, d_ctx, gl.w_o, gl.b_o);

        Mat d_q(seq, cfg.d_model), d_k(seq, cfg.d_model), d_v(seq, cfg.d_model);
        std::vector<double> d_probs_row(seq), ds_row(seq);
        for (int h = 0; h < cfg.n_heads; ++h) {
            int off = h * hd;
            const Mat& probs = lc.probs[h];
            const uint8_t* mask = dropped ? lc.attn_drop[h].data() : nullptr;
            for (int i = 0; i < seq; ++i) {
                const double* dci = d_ctx.row(i) + off;
                const double* pi = probs.row(i);
                detail::score_rows(lc.v, off, hd, i + 1, dci, d_probs_row.data());
                if (mask) {
                    const uint8_t* mi = mask + static_cast<size_t>(i) * seq;
                    for (int j = 0; j <= i; ++j) d_probs_row[j] *= mi[j] * keep_scale;
                }
                for (int j = 0; j <= i; ++j) {
                    double w = mask ? pi[j] * (mask[static_cast<size_t>(i) * seq + j] * keep_scale)
                                    : pi[j];
                    if (w != 0.0) detail::axpy(w, dci, d_v.row(j) + off, hd);
                }
                // softmax backward over the causal prefix
                double inner = 0.0;
                for (int j = 0; j <= i; ++j) inner += d_probs_row[j] * pi[j];
                for (int j = 0; j <= i; ++j)
                    ds_row[j] = pi[j] * (d_probs_row[j] - inner) * inv_sqrt_hd;
                const double* qi = lc.q.row(i) + off;
                double* dqi = d_q.row(i) + off;
                double acc[detail::kMaxDHead] = {0.0};
                detail::weighted_sum_rows(lc.k, off, hd, i + 1, ds_row.data(), acc);
                for (int d = 0; d < hd; ++d) dqi[d] += acc[d];
                for (int j = 0; j <= i; ++j)
                    if (ds_row[j] != 0.0) detail::axpy(ds_row[j], qi, d_k.row(j) + off, hd);
            }
        }

        detail::rotate_heads(d_q, cfg.n_heads, hd, positions, -1.0);
        detail::rotate_heads(d_k, cfg.n_heads, hd, positions, -1.0);

        Mat d_ln1_out(seq, cfg.d_model);
        detail::linear_backward(lc.ln1_out, lp.w_q, d_q, d_ln1_out, gl.w_q, gl.b_q);
        detail::linear_backward(lc.ln1_out, lp.w_k, d_k, d_ln1_out, gl.w_k, gl.b_k);
        detail::linear_backward(lc.ln1_out, lp.w_v, d_v, d_ln1_out, gl.w_v, gl.b_v);
        detail::layer_norm_backward(lc.ln1_xhat, lc.ln1_inv_std, lp.ln1_gain, d_ln1_out, d_resid,
                                    gl.ln1_gain, gl.ln1_bias);
    }

    for (int i = 0; i < seq; ++i) {
        int tok = cache.tokens[i];
        int row = cfg.per_position_embedding ? (i % cfg.embed_phases) * cfg.vocab_size + tok : tok;
        detail::axpy(1.0, d_resid.row(i), grads.embedding.row(row), cfg.d_model);
    }
}

inline Parameters backward(const Parameters& params, const ForwardCache& cache,
                           const Mat& d_logits) {
    Parameters grads = zero_params(params.config);
    backward_accumulate(params, cache, d_logits, grads);
    return grads;
}

}  // namespace digitcast
