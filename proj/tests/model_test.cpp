#include <gtest/gtest.h>

#include <cmath>

#include "digitcast/model.hpp"
#include "digitcast/rng.hpp"
#include "digitcast/training.hpp"

using namespace digitcast;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.d_ff = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.vocab_size = 10;
    cfg.max_seq_len = 64;
    cfg.dropout = 0.0;
    return cfg;
}

ModelConfig table_config() {
    return ModelConfig{};  // d_model 256, d_ff 512, N 6, heads 4, vocab 10
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
    std::vector<int> t(n);
    for (auto& x : t) x = static_cast<int>(uniform_int(rng, 0, vocab - 1));
    return t;
}

long total_entries(const Parameters& p) {
    long n = 0;
    visit_tensors(const_cast<Parameters&>(p),
                  [&](const std::string&, std::vector<double>& t, TensorKind) {
                      n += static_cast<long>(t.size());
                  });
    return n;
}

}  // namespace

TEST(ParamCount, ReferenceConfigNearThreePointTwoMillion) {
    long n = param_count(table_config());
    EXPECT_GE(n, 3000000L);
    EXPECT_LE(n, 3400000L);
}

TEST(ParamCount, MatchesEnumeratedTensors) {
    Rng rng = substream(1, 0);
    ModelConfig small;
    small.d_model = 2;
    small.d_ff = 2;
    small.n_layers = 1;
    small.n_heads = 1;
    small.vocab_size = 2;
    small.max_seq_len = 8;
    EXPECT_EQ(param_count(small), total_entries(init_params(small, rng)));
}

TEST(ParamCount, MatchesInitOnRandomConfigs) {
    Rng rng = substream(2, 0);
    for (int i = 0; i < 5; ++i) {
        ModelConfig cfg;
        cfg.n_heads = 1 + static_cast<int>(uniform_int(rng, 0, 2));
        cfg.d_model = cfg.n_heads * 2 * (1 + static_cast<int>(uniform_int(rng, 0, 3)));
        cfg.d_ff = 2 + 2 * static_cast<int>(uniform_int(rng, 0, 7));
        cfg.n_layers = 1 + static_cast<int>(uniform_int(rng, 0, 3));
        cfg.vocab_size = 2 + static_cast<int>(uniform_int(rng, 0, 8));
        cfg.max_seq_len = 16;
        cfg.per_position_embedding = uniform_int(rng, 0, 1) == 1;
        EXPECT_EQ(param_count(cfg), total_entries(init_params(cfg, rng)));
    }
}

TEST(ParamCount, PerPositionModeAddsEmbeddingRows) {
    ModelConfig shared = tiny_config();
    ModelConfig per_pos = shared;
    per_pos.per_position_embedding = true;
    per_pos.embed_phases = 3;
    EXPECT_EQ(param_count(per_pos) - param_count(shared),
              2L * shared.vocab_size * shared.d_model);
}

TEST(InitParams, DeterministicUnderSeed) {
    auto cfg = tiny_config();
    Rng a = substream(7, 0), b = substream(7, 0);
    auto pa = init_params(cfg, a);
    auto pb = init_params(cfg, b);
    bool equal = true;
    visit_tensors(pa, [&](const std::string& name, std::vector<double>& t, TensorKind) {
        std::vector<double>* other = nullptr;
        visit_tensors(pb, [&](const std::string& n2, std::vector<double>& t2, TensorKind) {
            if (n2 == name) other = &t2;
        });
        if (t != *other) equal = false;
    });
    EXPECT_TRUE(equal);
}

TEST(InitParams, GainsOneBiasesZeroWeightsTruncated) {
    auto cfg = tiny_config();
    Rng rng = substream(8, 0);
    auto p = init_params(cfg, rng);
    visit_tensors(p, [](const std::string& name, std::vector<double>& t, TensorKind kind) {
        switch (kind) {
            case TensorKind::kLnGain:
                for (double x : t) EXPECT_EQ(x, 1.0) << name;
                break;
            case TensorKind::kBias:
            case TensorKind::kLnBias:
                for (double x : t) EXPECT_EQ(x, 0.0) << name;
                break;
            case TensorKind::kWeight:
                for (double x : t) EXPECT_LE(std::abs(x), 0.04) << name;
                break;
        }
    });
}

TEST(Rotary, PositionZeroIsIdentity) {
    Rng rng = substream(9, 0);
    Mat q(1, 8);
    for (auto& x : q.v) x = normal(rng);
    std::vector<long> pos = {0};
    auto out = rotary_apply(q, pos);
    for (int j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(out(0, j), q(0, j));
}

TEST(Rotary, PreservesPairNorms) {
    Rng rng = substream(10, 0);
    Mat q(5, 8);
    for (auto& x : q.v) x = normal(rng);
    std::vector<long> pos = {0, 3, 17, 101, 767};
    auto out = rotary_apply(q, pos);
    for (int i = 0; i < 5; ++i) {
        for (int p = 0; p < 4; ++p) {
            double before = q(i, 2 * p) * q(i, 2 * p) + q(i, 2 * p + 1) * q(i, 2 * p + 1);
            double after = out(i, 2 * p) * out(i, 2 * p) + out(i, 2 * p + 1) * out(i, 2 * p + 1);
            EXPECT_NEAR(before, after, 1e-12);
        }
    }
}

TEST(Rotary, DotDependsOnRelativePositionOnly) {
    Rng rng = substream(11, 0);
    for (int trial = 0; trial < 20; ++trial) {
        Mat q(1, 16), k(1, 16);
        for (auto& x : q.v) x = normal(rng);
        for (auto& x : k.v) x = normal(rng);
        long m = uniform_int(rng, 0, 500);
        long n = uniform_int(rng, 0, 500);
        std::vector<long> pm = {m}, pn = {n}, pmn = {m - n};
        auto qm = rotary_apply(q, pm);
        auto kn = rotary_apply(k, pn);
        auto qmn = rotary_apply(q, pmn);
        double lhs = 0.0, rhs = 0.0;
        for (int j = 0; j < 16; ++j) {
            lhs += qm(0, j) * kn(0, j);
            rhs += qmn(0, j) * k(0, j);
        }
        EXPECT_NEAR(lhs, rhs, 1e-10);
    }
}

namespace {

// Reference layer norm for block-level expectations.
std::vector<double> ref_layer_norm_row(const std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= x.size();
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= x.size();
    std::vector<double> out(x.size());
    for (size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean) / std::sqrt(var + 1e-5);
    return out;
}

}  // namespace

TEST(AttentionBlock, ZeroScoresGiveUniformPrefixAverages) {
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    Rng rng = substream(12, 0);
    auto p = init_params(cfg, rng);
    auto& l = p.layers[0];
    l.w_q.zero();
    l.w_k.zero();
    std::fill(l.b_q.begin(), l.b_q.end(), 0.0);
    std::fill(l.b_k.begin(), l.b_k.end(), 0.0);
    // v and o become identity passthroughs
    l.w_v.zero();
    l.w_o.zero();
    for (int j = 0; j < cfg.d_model; ++j) {
        l.w_v(j, j) = 1.0;
        l.w_o(j, j) = 1.0;
    }
    std::fill(l.b_v.begin(), l.b_v.end(), 0.0);
    std::fill(l.b_o.begin(), l.b_o.end(), 0.0);

    Mat x(4, cfg.d_model);
    for (auto& v : x.v) v = normal(rng);
    auto out = attention_block(cfg, l, x);

    // expected: x_i + mean over j<=i of layernorm(x_j)
    std::vector<std::vector<double>> normed(4);
    for (int i = 0; i < 4; ++i) {
        std::vector<double> row(x.row(i), x.row(i) + cfg.d_model);
        normed[i] = ref_layer_norm_row(row);
    }
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < cfg.d_model; ++j) {
            double mean = 0.0;
            for (int k = 0; k <= i; ++k) mean += normed[k][j];
            mean /= (i + 1);
            EXPECT_NEAR(out(i, j), x(i, j) + mean, 1e-12) << "i=" << i << " j=" << j;
        }
    }
}

TEST(FfBlock, GeluValues) {
    EXPECT_DOUBLE_EQ(detail::gelu(0.0), 0.0);
    EXPECT_NEAR(detail::gelu(10.0), 10.0, 1e-6);
    EXPECT_NEAR(detail::gelu(1.0), 0.8413447460685429, 1e-12);
}

TEST(FfBlock, ZeroWeightsActAsIdentity) {
    auto cfg = tiny_config();
    cfg.n_layers = 1;
    Rng rng = substream(13, 0);
    auto p = init_params(cfg, rng);
    auto& l = p.layers[0];
    l.w_ff1.zero();
    l.w_ff2.zero();
    std::fill(l.b_ff1.begin(), l.b_ff1.end(), 0.0);
    std::fill(l.b_ff2.begin(), l.b_ff2.end(), 0.0);
    Mat x(3, cfg.d_model);
    for (auto& v : x.v) v = normal(rng);
    auto out = ff_block(cfg, l, x);
    for (size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(out.v[i], x.v[i]);
}

TEST(Forward, ShapeForSingleToken) {
    auto cfg = tiny_config();
    Rng rng = substream(14, 0);
    auto p = init_params(cfg, rng);
    std::vector<int> tokens = {4};
    auto logits = forward(p, tokens);
    EXPECT_EQ(logits.rows, 1);
    EXPECT_EQ(logits.cols, 10);
}

TEST(Forward, SoftmaxRowsNormalize) {
    auto cfg = tiny_config();
    Rng rng = substream(15, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(12, cfg.vocab_size, rng);
    auto logits = forward(p, tokens);
    for (int i = 0; i < logits.rows; ++i) {
        double mx = logits(i, 0);
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
        double z = 0.0;
        for (int j = 0; j < logits.cols; ++j) z += std::exp(logits(i, j) - mx);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx) / z;
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Forward, CausalityUnderSuffixPerturbation) {
    Rng rng = substream(16, 0);
    for (int layers : {1, 3}) {
        for (int heads : {1, 2}) {
            auto cfg = tiny_config();
            cfg.n_layers = layers;
            cfg.n_heads = heads;
            auto p = init_params(cfg, rng);
            auto tokens = random_tokens(16, cfg.vocab_size, rng);
            auto base = forward(p, tokens);
            int cut = 9;
            auto perturbed = tokens;
            for (size_t i = cut + 1; i < perturbed.size(); ++i)
                perturbed[i] = static_cast<int>(uniform_int(rng, 0, cfg.vocab_size - 1));
            auto after = forward(p, perturbed);
            for (int i = 0; i <= cut; ++i)
                for (int j = 0; j < base.cols; ++j)
                    EXPECT_LT(std::abs(base(i, j) - after(i, j)), 1e-10)
                        << "layers=" << layers << " heads=" << heads << " pos=" << i;
        }
    }
}

TEST(Forward, RejectsOverlongSequence) {
    auto cfg = tiny_config();
    cfg.max_seq_len = 8;
    Rng rng = substream(17, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(9, cfg.vocab_size, rng);
    EXPECT_THROW(forward(p, tokens), ConfigError);
}

TEST(Forward, RejectsTokenOutsideVocab) {
    auto cfg = tiny_config();
    Rng rng = substream(18, 0);
    auto p = init_params(cfg, rng);
    std::vector<int> tokens = {3, 11};
    EXPECT_THROW(forward(p, tokens), ConfigError);
}

TEST(Forward, EvalModeIsPureFunction) {
    auto cfg = tiny_config();
    Rng rng = substream(19, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(20, cfg.vocab_size, rng);
    auto a = forward(p, tokens);
    auto b = forward(p, tokens);
    EXPECT_EQ(a.v, b.v);
}

TEST(Forward, ActivationsFiniteInTrainMode) {
    auto cfg = tiny_config();
    cfg.dropout = 0.3;
    Rng rng = substream(20, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(24, cfg.vocab_size, rng);
    Rng drop = substream(20, 1);
    ForwardCache cache;
    const Mat& logits = forward(p, tokens, true, &drop, cache);
    for (double x : logits.v) EXPECT_TRUE(std::isfinite(x));
}

TEST(Forward, PerPositionEmbeddingChangesPhaseRows) {
    auto cfg = tiny_config();
    cfg.per_position_embedding = true;
    cfg.embed_phases = 3;
    Rng rng = substream(21, 0);
    auto p = init_params(cfg, rng);
    // same token at positions with different phase uses different rows
    std::vector<int> t1 = {5, 5, 5, 5};
    auto logits = forward(p, t1);
    EXPECT_EQ(logits.rows, 4);
    // gradient lands in the phase-offset rows
    ForwardCache cache;
    forward(p, t1, false, nullptr, cache);
    Mat d(4, cfg.vocab_size);
    for (auto& x : d.v) x = 0.1;
    auto grads = backward(p, cache, d);
    double used = 0.0, unused = 0.0;
    for (int phase = 0; phase < 3; ++phase) {
        for (int tok = 0; tok < cfg.vocab_size; ++tok) {
            const double* row = grads.embedding.row(phase * cfg.vocab_size + tok);
            double norm = 0.0;
            for (int j = 0; j < cfg.d_model; ++j) norm += std::abs(row[j]);
            if (tok == 5)
                used += norm;
            else
                unused += norm;
        }
    }
    EXPECT_GT(used, 0.0);
    EXPECT_EQ(unused, 0.0);
}

TEST(NextTokenDistribution, ValidProbabilities) {
    auto cfg = tiny_config();
    Rng rng = substream(22, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(6, cfg.vocab_size, rng);
    auto probs = next_token_distribution(p, tokens);
    double sum = 0.0;
    for (double x : probs) {
        EXPECT_GE(x, 0.0);
        sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    auto again = next_token_distribution(p, tokens);
    EXPECT_EQ(probs, again);
}

TEST(NextTokenDistribution, NearUniformAtInit) {
    auto cfg = tiny_config();
    Rng rng = substream(23, 0);
    auto p = init_params(cfg, rng);
    auto tokens = random_tokens(10, cfg.vocab_size, rng);
    auto probs = next_token_distribution(p, tokens);
    double mx = *std::max_element(probs.begin(), probs.end());
    double mn = *std::min_element(probs.begin(), probs.end());
    EXPECT_LT(mx / mn, 3.0);
}

namespace {

struct LossSetup {
    Parameters params;
    std::vector<int> tokens;
    double beta = 0.3;
    int precision = 3;

    double loss() const {
        auto logits = forward(params, tokens);
        std::span<const int> targets(tokens.data() + precision, tokens.size() - precision);
        return detail::weighted_xent(logits, precision - 1, targets, beta, precision, nullptr)
            .loss;
    }

    Parameters analytic_grads() const {
        ForwardCache cache;
        const Mat& logits = forward(params, tokens, false, nullptr, cache);
        std::span<const int> targets(tokens.data() + precision, tokens.size() - precision);
        Mat d(logits.rows, logits.cols);
        detail::weighted_xent(logits, precision - 1, targets, beta, precision, &d);
        return backward(params, cache, d);
    }
};

}  // namespace

// Acceptance criterion 3 core: central finite differences against the
// analytic gradients over every single parameter.
TEST(Backward, FiniteDifferenceOracle) {
    auto cfg = tiny_config();  // d_model 8, N 2, heads 2, dropout off
    Rng rng = substream(24, 0);
    LossSetup setup{init_params(cfg, rng), random_tokens(12, cfg.vocab_size, rng)};

    auto grads = setup.analytic_grads();
    const double h = 1e-5;
    double max_rel = 0.0;
    std::string worst;

    std::vector<std::pair<std::string, std::vector<double>*>> analytic;
    visit_tensors(grads, [&](const std::string& name, std::vector<double>& t, TensorKind) {
        analytic.emplace_back(name, &t);
    });
    size_t tensor_idx = 0;
    visit_tensors(setup.params, [&](const std::string& name, std::vector<double>& t, TensorKind) {
        auto& g = *analytic[tensor_idx].second;
        EXPECT_EQ(analytic[tensor_idx].first, name);
        for (size_t j = 0; j < t.size(); ++j) {
            double saved = t[j];
            t[j] = saved + h;
            double lp = setup.loss();
            t[j] = saved - h;
            double lm = setup.loss();
            t[j] = saved;
            double fd = (lp - lm) / (2.0 * h);
            double denom = std::max({std::abs(fd), std::abs(g[j]), 1e-6});
            double rel = std::abs(fd - g[j]) / denom;
            if (rel > max_rel) {
                max_rel = rel;
                worst = name + "[" + std::to_string(j) + "]";
            }
        }
        ++tensor_idx;
    });
    EXPECT_LT(max_rel, 1e-4) << "worst entry: " << worst;
}

TEST(Backward, UnusedEmbeddingRowsHaveZeroGradient) {
    auto cfg = tiny_config();
    Rng rng = substream(25, 0);
    LossSetup setup{init_params(cfg, rng), {1, 2, 3, 1, 2, 3, 1, 2, 3}};
    auto grads = setup.analytic_grads();
    for (int tok = 0; tok < cfg.vocab_size; ++tok) {
        bool used = tok == 1 || tok == 2 || tok == 3;
        double norm = 0.0;
        for (int j = 0; j < cfg.d_model; ++j) norm += std::abs(grads.embedding(tok, j));
        if (used)
            EXPECT_GT(norm, 0.0) << tok;
        else
            EXPECT_EQ(norm, 0.0) << tok;
    }
}

TEST(Backward, LinearInUpstreamGradient) {
    auto cfg = tiny_config();
    Rng rng = substream(26, 0);
    auto params = init_params(cfg, rng);
    auto tokens = random_tokens(9, cfg.vocab_size, rng);
    ForwardCache cache;
    const Mat& logits = forward(params, tokens, false, nullptr, cache);
    Mat d(logits.rows, logits.cols);
    for (auto& x : d.v) x = normal(rng, 0.0, 0.1);
    auto g1 = backward(params, cache, d);
    for (auto& x : d.v) x *= 2.0;
    auto g2 = backward(params, cache, d);
    std::vector<std::vector<double>*> t1, t2;
    visit_tensors(g1, [&](const std::string&, std::vector<double>& t, TensorKind) {
        t1.push_back(&t);
    });
    visit_tensors(g2, [&](const std::string&, std::vector<double>& t, TensorKind) {
        t2.push_back(&t);
    });
    for (size_t i = 0; i < t1.size(); ++i)
        for (size_t j = 0; j < t1[i]->size(); ++j)
            EXPECT_NEAR((*t2[i])[j], 2.0 * (*t1[i])[j], 1e-12);
}
