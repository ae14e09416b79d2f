#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "digitcast/backtest.hpp"
#include "digitcast/checkpoint.hpp"
#include "digitcast/config.hpp"
#include "digitcast/data.hpp"
#include "digitcast/metrics.hpp"
#include "digitcast/sampler.hpp"
#include "digitcast/training.hpp"

namespace digitcast {

// Stage-scoped RNG stream tags.
inline constexpr uint64_t kForecastStreamTag = 0xf03eULL;
inline constexpr uint64_t kShuffleStreamTag = 0x5a0fULL;
inline constexpr uint64_t kBootstrapStreamTag = 0xb007ULL;

/// File layout under the run's output directory.
struct OutputLayout {
    std::filesystem::path root;

    explicit OutputLayout(const std::string& dir) : root(dir) {}

    std::string manifest() const { return (root / "manifest.json").string(); }
    std::string checkpoint(int w) const {
        return (root / "checkpoints" / ("window_" + tag(w) + ".ckpt")).string();
    }
    std::string train_log(int w) const {
        return (root / "logs" / ("train_window_" + tag(w) + ".csv")).string();
    }
    std::string ensemble(int w) const {
        return (root / "ensembles" / ("window_" + tag(w) + ".csv")).string();
    }
    std::string metric_cells() const { return (root / "metrics_cells.csv").string(); }
    std::string metric_report() const { return (root / "metrics_report.csv").string(); }
    std::string backtest_long() const { return (root / "backtest.csv").string(); }
    std::string backtest_matrix(double level) const {
        return (root / ("backtest_matrix_p" + level_tag(level) + ".csv")).string();
    }

    static std::string tag(int w) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%03d", w);
        return buf;
    }
    static std::string level_tag(double level) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%02d", static_cast<int>(std::lround(level * 100)));
        return buf;
    }
};

/// "0-4", "7", "0,2,9-11", or "" for every window.
inline std::vector<int> parse_windows_range(const std::string& text, int count) {
    std::vector<int> out;
    if (text.empty()) {
        for (int w = 0; w < count; ++w) out.push_back(w);
        return out;
    }
    std::stringstream ss(text);
    std::string part;
    auto parse_int = [&](const std::string& s) {
        int v = 0;
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
            throw ConfigError("invalid --windows range element: \"" + s + "\"");
        return v;
    };
    while (std::getline(ss, part, ',')) {
        auto dash = part.find('-');
        int lo, hi;
        if (dash == std::string::npos) {
            lo = hi = parse_int(part);
        } else {
            lo = parse_int(part.substr(0, dash));
            hi = parse_int(part.substr(dash + 1));
        }
        if (lo > hi || lo < 0 || hi >= count)
            throw ConfigError("--windows range " + part + " outside [0, " +
                              std::to_string(count - 1) + "]");
        for (int w = lo; w <= hi; ++w) out.push_back(w);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

namespace detail {

inline std::string file_header(const RunConfig& cfg) {
    return std::string("# digitcast ") + version() + " config=" + config_hash(cfg) + "\n";
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    write_atomic(path, text);
}

inline std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Reads one of our own CSV outputs: '#' comments, then a header row, then
// comma-separated fields.
inline std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw RuntimeFailure("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        rows.push_back(split_csv_line(line));
    }
    if (rows.empty()) throw RuntimeFailure("no rows in " + path);
    return rows;
}

inline double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw RuntimeFailure("bad numeric field \"" + s + "\" in " + where);
    return v;
}

}  // namespace detail

inline Dataset pipeline_load_dataset(const RunConfig& cfg) {
    if (cfg.dataset.is_synthetic()) return make_synthetic(cfg.dataset.synth);
    CsvLayout layout;
    layout.timestamp_column = cfg.dataset.timestamp_column;
    layout.value_columns = cfg.dataset.value_columns;
    return load_dataset(cfg.dataset.path, layout);
}

inline WindowPlan pipeline_plan(const RunConfig& cfg, const Dataset& ds) {
    return make_window_plan(ds.length(), cfg.windows.window_len, cfg.windows.horizon,
                            cfg.windows.count, cfg.windows.stride);
}

/// Per-window tokenizer: when quantile_msd is on, fits the MSD breakpoints
/// from the squashed training-window values (each series scaled by its own
/// window scaler).
inline TokenizerConfig window_tokenizer(const RunConfig& cfg, const Dataset& ds,
                                        const WindowEntry& entry) {
    TokenizerConfig tok = cfg.tokenizer;
    if (!cfg.quantile_msd) return tok;
    std::vector<double> pool;
    pool.reserve(static_cast<size_t>(ds.series_count()) * (entry.train_end - entry.train_start));
    for (int s = 0; s < ds.series_count(); ++s) {
        std::span<const double> window(ds.values[s].data() + entry.train_start,
                                       entry.train_end - entry.train_start);
        double mu = fit_scaler(window, tok.scale_offset).mu;
        for (double x : window) pool.push_back(squash(x / mu, tok));
    }
    tok.msd_bins = fit_quantile_bins(pool, tok.base);
    return tok;
}

/// Generates the configured synthetic dataset and writes it as CSV.
inline void cmd_synth(const RunConfig& cfg, const std::string& out_path) {
    if (!cfg.dataset.is_synthetic())
        throw ConfigError("synth: dataset.kind must be a synthetic generator, not csv");
    Dataset ds = make_synthetic(cfg.dataset.synth);
    std::string path = out_path.empty()
                           ? (std::filesystem::path(cfg.output_dir) / (ds.name + ".csv")).string()
                           : out_path;
    std::filesystem::path parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    save_dataset(ds, path,
                 {std::string("digitcast ") + version() + " config=" + config_hash(cfg)});
    std::printf("synth: wrote %s (%d series x %d timesteps)\n", path.c_str(), ds.series_count(),
                ds.length());
}

/// Trains one model per selected window, resuming past finished
/// checkpoints. Failures are recorded per window and do not stop the run.
inline void cmd_train(const RunConfig& cfg, const std::string& windows_range = "") {
    Dataset ds = pipeline_load_dataset(cfg);
    WindowPlan plan = pipeline_plan(cfg, ds);
    OutputLayout out(cfg.output_dir);
    auto selected = parse_windows_range(windows_range, plan.count);

    std::vector<std::string> status(plan.count, "skipped");
    int failures = 0;
    for (int w : selected) {
        const WindowEntry& entry = plan.entries[w];
        if (std::filesystem::exists(out.checkpoint(w))) {
            status[w] = "ok";
            std::printf("train: window %d already has a checkpoint, resuming past it\n", w);
            continue;
        }
        try {
            TokenizerConfig tok = window_tokenizer(cfg, ds, entry);
            std::string log_csv = detail::file_header(cfg) + "step,loss,lr,wall_ms\n";
            Parameters params =
                train_window(ds, entry, cfg.model, tok, cfg.train, [&](const TrainLogRow& row) {
                    log_csv += std::to_string(row.step) + "," + detail::format_value(row.loss) +
                               "," + detail::format_value(row.lr) + "," +
                               detail::format_value(row.wall_ms) + "\n";
                });
            detail::write_text_atomic(out.train_log(w), log_csv);
            save_checkpoint(out.checkpoint(w), params, tok);
            status[w] = "ok";
            std::printf("train: window %d done\n", w);
        } catch (const std::exception& e) {
            status[w] = std::string("error: ") + e.what();
            ++failures;
            std::fprintf(stderr, "train: window %d failed: %s\n", w, e.what());
        }
    }

    json manifest;
    manifest["artifact_version"] = version();
    manifest["config"] = config_hash(cfg);
    json windows = json::array();
    for (int w = 0; w < plan.count; ++w) {
        json entry;
        entry["index"] = w;
        entry["checkpoint"] = out.checkpoint(w);
        entry["status"] = status[w];
        windows.push_back(entry);
    }
    manifest["windows"] = windows;
    detail::write_text_atomic(out.manifest(), manifest.dump(2) + "\n");

    if (failures > 0)
        throw RuntimeFailure("train: " + std::to_string(failures) +
                             " window(s) failed; see manifest");
}

/// Simulates the forecast ensembles for every (window, series) from the
/// persisted checkpoints.
inline void cmd_forecast(const RunConfig& cfg, const std::string& windows_range = "") {
    Dataset ds = pipeline_load_dataset(cfg);
    WindowPlan plan = pipeline_plan(cfg, ds);
    OutputLayout out(cfg.output_dir);
    auto selected = parse_windows_range(windows_range, plan.count);
    int horizon = static_cast<int>(cfg.sampling_horizon());
    int ctx_len = cfg.context_len_infer();

    int failures = 0;
    for (int w : selected) {
        if (!std::filesystem::exists(out.checkpoint(w))) {
            ++failures;
            std::fprintf(stderr, "forecast: window %d has no checkpoint\n", w);
            continue;
        }
        try {
            Checkpoint ck = load_checkpoint(out.checkpoint(w));
            const WindowEntry& entry = plan.entries[w];
            std::string csv = detail::file_header(cfg) + "series,trajectory,h,value\n";
            for (int s = 0; s < ds.series_count(); ++s) {
                std::vector<double> context(
                    ds.values[s].begin() + (entry.eval_start - ctx_len),
                    ds.values[s].begin() + entry.eval_start);
                if (cfg.sampling.shuffle_context) {
                    Rng shuffle_rng = substream(cfg.seed, kShuffleStreamTag,
                                                static_cast<uint64_t>(entry.train_start),
                                                static_cast<uint64_t>(s));
                    context = shuffle_context(context, shuffle_rng);
                }
                uint64_t sim_seed = derive_seed(cfg.seed, kForecastStreamTag,
                                                static_cast<uint64_t>(entry.train_start),
                                                static_cast<uint64_t>(s));
                ForecastEnsemble ens = simulate(ck.params, context, horizon,
                                                cfg.sampling.simulations, ck.tokenizer, sim_seed,
                                                cfg.jobs);
                for (int i = 0; i < ens.simulations(); ++i)
                    for (int h = 1; h <= horizon; ++h)
                        csv += std::to_string(s) + "," + std::to_string(i) + "," +
                               std::to_string(h) + "," +
                               detail::format_value(ens.samples(i, h - 1)) + "\n";
            }
            detail::write_text_atomic(out.ensemble(w), csv);
            std::printf("forecast: window %d done\n", w);
        } catch (const std::exception& e) {
            ++failures;
            std::fprintf(stderr, "forecast: window %d failed: %s\n", w, e.what());
        }
    }
    if (failures > 0)
        throw RuntimeFailure("forecast: " + std::to_string(failures) + " window(s) failed");
}

/// Ensemble matrices for one window, indexed by series.
inline std::vector<ForecastEnsemble> read_ensembles(const std::string& path, int series_count,
                                                    int simulations, int horizon) {
    auto rows = detail::read_csv_rows(path);
    std::vector<ForecastEnsemble> out(series_count);
    for (auto& ens : out) ens.samples = Mat(simulations, horizon);
    for (size_t r = 1; r < rows.size(); ++r) {  // rows[0] is the header
        const auto& row = rows[r];
        if (row.size() != 4) throw RuntimeFailure("bad ensemble row in " + path);
        int s = static_cast<int>(detail::parse_double(row[0], path));
        int i = static_cast<int>(detail::parse_double(row[1], path));
        int h = static_cast<int>(detail::parse_double(row[2], path));
        if (s < 0 || s >= series_count || i < 0 || i >= simulations || h < 1 || h > horizon)
            throw RuntimeFailure("ensemble index out of range in " + path);
        out[s].samples(i, h - 1) = detail::parse_double(row[3], path);
        out[s].series = s;
    }
    return out;
}

struct EvaluationResult {
    std::vector<MetricCell> cells;
    std::vector<MetricSummary> report;
    int covered_windows = 0;
    int skipped_cells = 0;  // zero-normalizer exclusions
};

/// MAD/RMSE/QL/CRPS cells over every covered (window, series), IQM +
/// bootstrap CI summary. Windows without ensembles are reported as a
/// coverage warning, zero-normalizer cells are excluded and logged.
inline EvaluationResult evaluate_run(const RunConfig& cfg, const Dataset& ds,
                                     const WindowPlan& plan) {
    OutputLayout out(cfg.output_dir);
    int horizon = static_cast<int>(cfg.sampling_horizon());
    EvaluationResult result;

    for (int w = 0; w < plan.count; ++w) {
        if (!std::filesystem::exists(out.ensemble(w))) continue;
        result.covered_windows += 1;
        const WindowEntry& entry = plan.entries[w];
        auto ensembles =
            read_ensembles(out.ensemble(w), ds.series_count(), cfg.sampling.simulations, horizon);
        for (int s = 0; s < ds.series_count(); ++s) {
            std::span<const double> window(ds.values[s].data() + entry.train_start,
                                           entry.train_end - entry.train_start);
            double f = normalizer_F(window);
            if (!(f > 0.0)) {
                result.skipped_cells += 1;
                std::fprintf(stderr,
                             "evaluate: window %d series %d has zero normalizer, cell excluded\n",
                             w, s);
                continue;
            }
            std::vector<double> truth(ds.values[s].begin() + entry.eval_start,
                                      ds.values[s].begin() + entry.eval_start + horizon);
            const ForecastEnsemble& ens = ensembles[s];
            result.cells.push_back({w, s, "mad", mad(ens, truth, f)});
            result.cells.push_back({w, s, "rmse", rmse(ens, truth, f)});
            for (double level : cfg.evaluation.levels) {
                std::vector<double> q(horizon);
                for (int h = 1; h <= horizon; ++h) q[h - 1] = empirical_quantile(ens, level, h);
                result.cells.push_back({w, s, "ql_" + OutputLayout::level_tag(level),
                                        quantile_loss(q, truth, level, f)});
            }
            result.cells.push_back({w, s, "crps", crps(ens, truth, f, cfg.evaluation.crps_levels)});
        }
    }
    if (result.covered_windows < plan.count)
        std::fprintf(stderr, "evaluate: coverage warning: %d of %d windows have ensembles\n",
                     result.covered_windows, plan.count);
    if (result.cells.empty()) throw RuntimeFailure("evaluate: no ensembles found under " +
                                                   out.root.string());
    result.report = summarize_cells(result.cells, cfg.evaluation.ci_level,
                                    cfg.evaluation.bootstrap_resamples,
                                    derive_seed(cfg.seed, kBootstrapStreamTag));
    return result;
}

inline void write_metric_files(const RunConfig& cfg, const Dataset& ds,
                               const EvaluationResult& result) {
    OutputLayout out(cfg.output_dir);
    std::string cells_csv = detail::file_header(cfg) + "metric,window,series,value\n";
    for (const auto& c : result.cells)
        cells_csv += c.metric + "," + std::to_string(c.window) + "," + std::to_string(c.series) +
                     "," + detail::format_value(c.value) + "\n";
    detail::write_text_atomic(out.metric_cells(), cells_csv);

    std::string report_csv =
        detail::file_header(cfg) + "metric,dataset,model,iqm,ci_low,ci_high,cells\n";
    for (const auto& s : result.report)
        report_csv += s.metric + "," + ds.name + ",digitcast," + detail::format_value(s.iqm) +
                      "," + detail::format_value(s.ci_low) + "," + detail::format_value(s.ci_high) +
                      "," + std::to_string(s.cells) + "\n";
    detail::write_text_atomic(out.metric_report(), report_csv);

    for (const auto& s : result.report)
        std::printf("%-8s %s  iqm=%.6f  ci90=(%.6f, %.6f)  cells=%ld\n", s.metric.c_str(),
                    ds.name.c_str(), s.iqm, s.ci_low, s.ci_high, s.cells);
}

inline void cmd_evaluate(const RunConfig& cfg) {
    Dataset ds = pipeline_load_dataset(cfg);
    WindowPlan plan = pipeline_plan(cfg, ds);
    auto result = evaluate_run(cfg, ds, plan);
    write_metric_files(cfg, ds, result);
}

/// Kupiec backtest over all covered windows at every configured level.
inline BacktestMatrix backtest_run(const RunConfig& cfg, const Dataset& ds,
                                   const WindowPlan& plan) {
    OutputLayout out(cfg.output_dir);
    int horizon = static_cast<int>(cfg.sampling_horizon());
    int s_count = ds.series_count();

    std::vector<int> covered;
    for (int w = 0; w < plan.count; ++w)
        if (std::filesystem::exists(out.ensemble(w))) covered.push_back(w);
    if (covered.empty())
        throw RuntimeFailure("backtest: no ensembles found under " + out.root.string());
    if (static_cast<int>(covered.size()) < plan.count)
        std::fprintf(stderr, "backtest: coverage warning: %zu of %d windows have ensembles\n",
                     covered.size(), plan.count);

    BacktestMatrix matrix;
    matrix.windows = static_cast<int>(covered.size());
    matrix.gamma = cfg.evaluation.gamma;
    std::vector<Mat> violations(cfg.evaluation.levels.size(), Mat(s_count, horizon));

    for (int w : covered) {
        const WindowEntry& entry = plan.entries[w];
        auto ensembles = read_ensembles(out.ensemble(w), s_count, cfg.sampling.simulations,
                                        horizon);
        for (int s = 0; s < s_count; ++s) {
            for (size_t li = 0; li < cfg.evaluation.levels.size(); ++li) {
                double level = cfg.evaluation.levels[li];
                for (int h = 1; h <= horizon; ++h) {
                    double q = empirical_quantile(ensembles[s], level, h);
                    double truth = ds.values[s][entry.eval_start + h - 1];
                    if (q < truth) violations[li](s, h - 1) += 1.0;
                }
            }
        }
    }
    for (size_t li = 0; li < cfg.evaluation.levels.size(); ++li)
        matrix.levels.push_back(
            make_backtest_level(cfg.evaluation.levels[li], violations[li], matrix.windows));
    return matrix;
}

inline void write_backtest_files(const RunConfig& cfg, const BacktestMatrix& matrix) {
    OutputLayout out(cfg.output_dir);
    std::string long_csv =
        detail::file_header(cfg) + "series,horizon,level,v_hat,t_stat,p_value,pass\n";
    for (const auto& lvl : matrix.levels) {
        for (int s = 0; s < lvl.p_value.rows; ++s)
            for (int h = 1; h <= lvl.p_value.cols; ++h)
                long_csv += std::to_string(s) + "," + std::to_string(h) + "," +
                            detail::format_value(lvl.alpha) + "," +
                            std::to_string(static_cast<long>(lvl.v_hat(s, h - 1))) + "," +
                            detail::format_value(lvl.t_stat(s, h - 1)) + "," +
                            detail::format_value(lvl.p_value(s, h - 1)) + "," +
                            (lvl.p_value(s, h - 1) >= matrix.gamma ? "1" : "0") + "\n";
    }
    detail::write_text_atomic(out.backtest_long(), long_csv);

    // heatmap layout: one row per horizon step, one column per series
    for (const auto& lvl : matrix.levels) {
        std::string csv = detail::file_header(cfg);
        for (int s = 0; s < lvl.p_value.rows; ++s) csv += (s ? ",s" : "s") + std::to_string(s);
        csv += "\n";
        for (int h = 0; h < lvl.p_value.cols; ++h) {
            for (int s = 0; s < lvl.p_value.rows; ++s)
                csv += (s ? "," : "") + detail::format_value(lvl.p_value(s, h));
            csv += "\n";
        }
        detail::write_text_atomic(out.backtest_matrix(lvl.alpha), csv);
    }

    for (const auto& lvl : matrix.levels)
        std::printf("backtest: level %.2f pass fraction %.4f (W=%d)\n", lvl.alpha,
                    pvalue_fraction(matrix, lvl.alpha, matrix.gamma), matrix.windows);
}

inline void cmd_backtest(const RunConfig& cfg) {
    Dataset ds = pipeline_load_dataset(cfg);
    WindowPlan plan = pipeline_plan(cfg, ds);
    auto matrix = backtest_run(cfg, ds, plan);
    write_backtest_files(cfg, matrix);
}

/// Re-aggregates the persisted per-cell metrics into the report table.
inline void cmd_report(const RunConfig& cfg) {
    Dataset ds = pipeline_load_dataset(cfg);
    OutputLayout out(cfg.output_dir);
    auto rows = detail::read_csv_rows(out.metric_cells());
    std::vector<MetricCell> cells;
    for (size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != 4) throw RuntimeFailure("bad cell row in " + out.metric_cells());
        cells.push_back({static_cast<int>(detail::parse_double(row[1], "cells")),
                         static_cast<int>(detail::parse_double(row[2], "cells")), row[0],
                         detail::parse_double(row[3], "cells")});
    }
    EvaluationResult result;
    result.cells = std::move(cells);
    result.report = summarize_cells(result.cells, cfg.evaluation.ci_level,
                                    cfg.evaluation.bootstrap_resamples,
                                    derive_seed(cfg.seed, kBootstrapStreamTag));
    write_metric_files(cfg, ds, result);
}

}  // namespace digitcast
