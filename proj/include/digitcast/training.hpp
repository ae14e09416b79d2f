#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <span>
#include <vector>

#include "digitcast/common.hpp"
#include "digitcast/data.hpp"
#include "digitcast/model.hpp"
#include "digitcast/rng.hpp"
#include "digitcast/tokenizer.hpp"

namespace digitcast {

struct TrainConfig {
    int batch_size = 16;
    long train_steps = 100000;
    double beta = 0.3;  // per-digit significance weight
    double lr_constant = 0.03;
    long warmup_steps = 1000;
    double weight_decay = 1e-5;
    int context_len = 256;  // raw timesteps per training example (T)
    long log_every = 100;
    uint64_t seed = 0;
    int jobs = 0;  // 0 = hardware concurrency

    void validate() const {
        if (batch_size < 1 || train_steps < 1 || warmup_steps < 1 || context_len < 2 ||
            log_every < 1)
            throw ConfigError("train: counts must be positive");
        if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("train: beta must be in (0, 1]");
        if (!(lr_constant > 0.0)) throw ConfigError("train: lr_constant must be positive");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct OptimizerState {
    long step = 0;
    Parameters m;  // first moments, Parameters-shaped
    Parameters v;  // second moments

    explicit OptimizerState(const ModelConfig& cfg) : m(zero_params(cfg)), v(zero_params(cfg)) {}
};

struct WeightedLoss {
    double loss = 0.0;
    std::vector<double> weights;  // beta^((k-1) mod p) per target, 1-based k
};

namespace detail {

// Shared core: computes the normalized negative weighted log-likelihood of
// targets[t] under logits row (row_offset + t); optionally writes
// d(loss)/d(logits) into d_logits (which must be logits-shaped, zeroed).
inline WeightedLoss weighted_xent(const Mat& logits, int row_offset, std::span<const int> targets,
                                  double beta, int precision, Mat* d_logits) {
    int n = static_cast<int>(targets.size());
    if (row_offset < 0 || row_offset + n > logits.rows)
        throw ConfigError("weighted_xent_loss: logits/targets length mismatch");
    WeightedLoss out;
    out.weights.resize(n);
    double weight_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        out.weights[k] = std::pow(beta, k % precision);
        weight_sum += out.weights[k];
    }
    std::vector<double> probs(logits.cols);
    for (int k = 0; k < n; ++k) {
        const double* row = logits.row(row_offset + k);
        int target = targets[k];
        if (target < 0 || target >= logits.cols)
            throw ConfigError("weighted_xent_loss: target token outside vocabulary");
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < logits.cols; ++j) {
            probs[j] = std::exp(row[j] - mx);
            z += probs[j];
        }
        double log_p = row[target] - mx - std::log(z);
        out.loss -= out.weights[k] * log_p;
        if (d_logits) {
            double scale = out.weights[k] / weight_sum;
            double* d = d_logits->row(row_offset + k);
            for (int j = 0; j < logits.cols; ++j) d[j] = scale * probs[j] / z;
            d[target] -= scale;
        }
    }
    out.loss /= weight_sum;
    return out;
}

}  // namespace detail

/// Next-token cross entropy with per-digit significance weights
/// w_k = beta^((k-1) mod p), normalized by the weight sum so the
/// uniform-logits value is ln(vocab) for every beta.
inline WeightedLoss weighted_xent_loss(const Mat& logits, std::span<const int> targets,
                                       double beta, int precision) {
    if (logits.rows != static_cast<int>(targets.size()))
        throw ConfigError("weighted_xent_loss: logits length must equal targets length");
    return detail::weighted_xent(logits, 0, targets, beta, precision, nullptr);
}

/// Multifactor schedule: constant * linear warmup * inverse square root,
/// continuous at the warmup boundary.
inline double lr_at(long step, const TrainConfig& cfg) {
    if (step < 1) throw ConfigError("lr_at: step must be >= 1");
    double warm = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
    double decay = 1.0 / std::sqrt(static_cast<double>(std::max(step, cfg.warmup_steps)));
    return cfg.lr_constant * warm * decay;
}

/// One bias-corrected Adam update with decoupled weight decay (layer-norm
/// tensors exempt). Parameters are untouched if any gradient entry is
/// non-finite.
inline void adam_step(Parameters& params, const Parameters& grads, OptimizerState& state,
                      double lr, double weight_decay) {
    visit_tensors(const_cast<Parameters&>(grads),
                  [](const std::string& name, std::vector<double>& g, TensorKind) {
                      for (double x : g)
                          if (!std::isfinite(x))
                              throw RuntimeFailure("adam_step: non-finite gradient in " + name);
                  });

    state.step += 1;
    double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));

    struct Ref {
        std::vector<double>* t;
        TensorKind kind;
    };
    auto collect = [](Parameters& p) {
        std::vector<Ref> refs;
        visit_tensors(p, [&](const std::string&, std::vector<double>& t, TensorKind k) {
            refs.push_back({&t, k});
        });
        return refs;
    };
    auto pr = collect(params);
    auto gr = collect(const_cast<Parameters&>(grads));
    auto mr = collect(state.m);
    auto vr = collect(state.v);

    for (size_t i = 0; i < pr.size(); ++i) {
        auto& theta = *pr[i].t;
        const auto& g = *gr[i].t;
        auto& m = *mr[i].t;
        auto& v = *vr[i].t;
        if (theta.size() != g.size()) throw ConfigError("adam_step: shape mismatch");
        bool decay = weight_decay > 0.0 && pr[i].kind != TensorKind::kLnGain &&
                     pr[i].kind != TensorKind::kLnBias;
        for (size_t j = 0; j < theta.size(); ++j) {
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * g[j];
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
            double m_hat = m[j] / bc1;
            double v_hat = v[j] / bc2;
            theta[j] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
            if (decay) theta[j] -= lr * weight_decay * theta[j];
        }
    }
}

struct TrainLogRow {
    long step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

using TrainLogFn = std::function<void(const TrainLogRow&)>;

// The per-step gradient is reduced over this many fixed shards, whatever
// --jobs says, so the floating-point summation order (and therefore every
// downstream bit) is independent of the thread count.
inline constexpr int kGradShards = 8;

/// One optimizer step on a batch of raw segments. The first value's digits
/// serve as context only; targets start at the second value so the leading
/// target is always a most-significant digit and the beta weights stay
/// phase-aligned. Gradient work is sharded with a fixed reduction order,
/// so results do not depend on scheduling or thread count.
inline double train_batch(Parameters& params, OptimizerState& opt,
                          const std::vector<std::vector<double>>& segments,
                          const TokenizerConfig& tok_cfg, const TrainConfig& cfg, long step,
                          uint64_t dropout_stream_tag) {
    int batch = static_cast<int>(segments.size());
    int p = tok_cfg.precision;
    int jobs = cfg.jobs > 0 ? cfg.jobs : default_jobs();
    int shards = std::min(kGradShards, batch);
    size_t chunk = (static_cast<size_t>(batch) + shards - 1) / shards;

    std::vector<Parameters> shard_grads;
    shard_grads.reserve(shards);
    for (int s = 0; s < shards; ++s) shard_grads.push_back(zero_params(params.config));
    std::vector<double> losses(batch, 0.0);

    parallel_for(static_cast<size_t>(shards), jobs, [&](size_t shard) {
        ForwardCache cache;
        Mat d_logits;
        size_t lo = shard * chunk;
        size_t hi = std::min<size_t>(batch, lo + chunk);
        for (size_t b = lo; b < hi; ++b) {
            auto [seq, scaler] = tokenize_segment(segments[b], tok_cfg);
            Rng drop_rng = substream(cfg.seed, dropout_stream_tag, static_cast<uint64_t>(step),
                                     static_cast<uint64_t>(b));
            const Mat& logits = forward(params, seq.tokens, true, &drop_rng, cache);
            std::span<const int> targets(seq.tokens.data() + p, seq.tokens.size() - p);
            d_logits = Mat(logits.rows, logits.cols);
            auto wl = detail::weighted_xent(logits, p - 1, targets, cfg.beta, p, &d_logits);
            losses[b] = wl.loss;
            // mean over the batch
            for (double& x : d_logits.v) x /= batch;
            backward_accumulate(params, cache, d_logits, shard_grads[shard]);
        }
    });

    // Reduce shard gradients in shard order; addition order never depends
    // on thread timing.
    Parameters& grads = shard_grads[0];
    for (int s = 1; s < shards; ++s) {
        std::vector<std::vector<double>*> dst, src;
        visit_tensors(grads, [&](const std::string&, std::vector<double>& t, TensorKind) {
            dst.push_back(&t);
        });
        visit_tensors(shard_grads[s], [&](const std::string&, std::vector<double>& t, TensorKind) {
            src.push_back(&t);
        });
        for (size_t i = 0; i < dst.size(); ++i)
            for (size_t j = 0; j < dst[i]->size(); ++j) (*dst[i])[j] += (*src[i])[j];
    }

    double batch_loss = 0.0;
    for (double l : losses) batch_loss += l;
    batch_loss /= batch;

    adam_step(params, grads, opt, lr_at(step, cfg), cfg.weight_decay);
    return batch_loss;
}

/// Trains one model on one rolling window: exactly train_steps Adam steps
/// over uniformly sampled (series, offset) segments, no early stopping.
/// On a non-finite loss or gradient the parameters from the last logged
/// step are returned instead.
inline Parameters train_window(const Dataset& dataset, const WindowEntry& entry,
                               const ModelConfig& model_cfg, const TokenizerConfig& tok_cfg,
                               const TrainConfig& cfg, const TrainLogFn& log = nullptr) {
    model_cfg.validate();
    tok_cfg.validate();
    cfg.validate();
    if (tok_cfg.precision * cfg.context_len > model_cfg.max_seq_len)
        throw ConfigError("train_window: precision * context_len exceeds max_seq_len");

    // Streams keyed by (seed, window start) so a window trains identically
    // whether it is run alone or as part of a full plan.
    uint64_t wkey = static_cast<uint64_t>(entry.train_start);
    Rng init_rng = substream(cfg.seed, 0x1a17ULL, wkey);
    Rng draw_rng = substream(cfg.seed, 0xd4a3ULL, wkey);
    uint64_t drop_tag = mix64(0xd309ULL ^ wkey);

    Parameters params = init_params(model_cfg, init_rng);
    OptimizerState opt(model_cfg);
    Parameters last_good = params;

    auto started = std::chrono::steady_clock::now();
    std::vector<std::vector<double>> segments(cfg.batch_size);
    for (long step = 1; step <= cfg.train_steps; ++step) {
        for (int b = 0; b < cfg.batch_size; ++b)
            segments[b] =
                sample_training_example(dataset, entry, cfg.context_len, draw_rng).segment;

        double loss;
        try {
            loss = train_batch(params, opt, segments, tok_cfg, cfg, step, drop_tag);
        } catch (const RuntimeFailure& e) {
            std::fprintf(stderr, "train_window: %s at step %ld; keeping last good checkpoint\n",
                         e.what(), step);
            return last_good;
        }
        if (!std::isfinite(loss)) {
            std::fprintf(stderr,
                         "train_window: non-finite loss at step %ld; keeping last good checkpoint\n",
                         step);
            return last_good;
        }

        if (step % cfg.log_every == 0 || step == cfg.train_steps) {
            if (log) {
                double ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - started)
                                .count();
                log({step, loss, lr_at(step, cfg), ms});
            }
            last_good = params;
        }
    }
    return params;
}

}  // namespace digitcast
