#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "digitcast/common.hpp"
#include "digitcast/rng.hpp"

namespace digitcast {

/// Raw multi-series data: S series of equal length L.
struct Dataset {
    std::string name;
    std::vector<std::vector<double>> values;  // [series][timestep]
    std::string frequency;
    std::vector<std::string> timestamps;  // optional, never consumed by the model

    int series_count() const { return static_cast<int>(values.size()); }
    int length() const { return values.empty() ? 0 : static_cast<int>(values[0].size()); }
};

/// Column schema for CSV loading. An empty value_columns list means "all
/// columns except the timestamp column".
struct CsvLayout {
    std::optional<std::string> timestamp_column;
    std::vector<std::string> value_columns;
};

struct WindowEntry {
    long train_start = 0;
    long train_end = 0;  // == eval_start
    long eval_start = 0;
    long eval_end = 0;
};

/// Rolling-window schedule: `count` overlapping training windows, each
/// immediately followed by an evaluation horizon.
struct WindowPlan {
    long window_len = 8760;
    long horizon = 24;
    int count = 100;
    long stride = 24;
    std::vector<WindowEntry> entries;
};

struct TrainingExample {
    int series_index = 0;
    std::vector<double> segment;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

inline double parse_cell(const std::string& cell, long row, const std::string& column) {
    const char* first = cell.data();
    const char* last = first + cell.size();
    while (first != last && (*first == ' ' || *first == '\t')) ++first;
    while (last != first && (*(last - 1) == ' ' || *(last - 1) == '\t')) --last;
    double out = 0.0;
    auto res = std::from_chars(first, last, out);
    if (res.ec != std::errc{} || res.ptr != last)
        throw ConfigError("non-numeric cell \"" + cell + "\" at row " + std::to_string(row) +
                          ", column \"" + column + "\"");
    if (!std::isfinite(out))
        throw ConfigError("non-finite value at row " + std::to_string(row) + ", column \"" +
                          column + "\"");
    return out;
}

}  // namespace detail

/// Loads a header-row CSV into a Dataset. Lines starting with '#' are
/// skipped, so files written by save_dataset round-trip.
inline Dataset load_dataset(const std::string& path, const CsvLayout& layout = {}) {
    std::ifstream in(path);
    if (!in.is_open()) throw ConfigError("cannot open dataset file: " + path);

    std::string line;
    do {
        if (!std::getline(in, line)) throw ConfigError("empty dataset file: " + path);
    } while (!line.empty() && line[0] == '#');

    auto header = detail::split_csv_line(line);
    int ts_col = -1;
    if (layout.timestamp_column) {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == *layout.timestamp_column) ts_col = static_cast<int>(i);
        if (ts_col < 0)
            throw ConfigError("timestamp column \"" + *layout.timestamp_column +
                              "\" not found in header of " + path);
    }
    std::vector<int> value_cols;
    if (layout.value_columns.empty()) {
        for (size_t i = 0; i < header.size(); ++i)
            if (static_cast<int>(i) != ts_col) value_cols.push_back(static_cast<int>(i));
    } else {
        for (const auto& name : layout.value_columns) {
            int found = -1;
            for (size_t i = 0; i < header.size(); ++i)
                if (header[i] == name) found = static_cast<int>(i);
            if (found < 0)
                throw ConfigError("value column \"" + name + "\" not found in header of " + path);
            value_cols.push_back(found);
        }
    }
    if (value_cols.empty()) throw ConfigError("no value columns in " + path);

    Dataset ds;
    ds.name = std::filesystem::path(path).stem().string();
    ds.values.resize(value_cols.size());

    long row = 1;  // header was row 1
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line[0] == '#') continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw ConfigError("ragged row " + std::to_string(row) + " in " + path + ": expected " +
                              std::to_string(header.size()) + " cells, got " +
                              std::to_string(cells.size()));
        if (ts_col >= 0) ds.timestamps.push_back(cells[ts_col]);
        for (size_t s = 0; s < value_cols.size(); ++s)
            ds.values[s].push_back(detail::parse_cell(cells[value_cols[s]], row, header[value_cols[s]]));
    }
    if (ds.values[0].empty()) throw ConfigError("dataset has no data rows: " + path);
    return ds;
}

/// Writes the dataset as CSV with full double precision (%.17g), so that
/// load(save(ds)) reproduces the values exactly. `header_comment` lines,
/// if any, are emitted as leading '#' lines.
inline void save_dataset(const Dataset& ds, const std::string& path,
                         const std::vector<std::string>& header_comment = {}) {
    std::ofstream out(path);
    if (!out.is_open()) throw RuntimeFailure("cannot write dataset file: " + path);
    for (const auto& c : header_comment) out << "# " << c << "\n";
    bool with_ts = !ds.timestamps.empty();
    if (with_ts) out << "timestamp";
    for (int s = 0; s < ds.series_count(); ++s) {
        if (with_ts || s > 0) out << ",";
        out << "s" << s;
    }
    out << "\n";
    char buf[40];
    for (int t = 0; t < ds.length(); ++t) {
        if (with_ts) out << ds.timestamps[t];
        for (int s = 0; s < ds.series_count(); ++s) {
            if (with_ts || s > 0) out << ",";
            std::snprintf(buf, sizeof buf, "%.17g", ds.values[s][t]);
            out << buf;
        }
        out << "\n";
    }
    if (!out.good()) throw RuntimeFailure("write failed: " + path);
}

/// Builds the rolling plan anchored so the last horizon ends exactly at L.
inline WindowPlan make_window_plan(long length, long window_len, long horizon, int count,
                                   long stride) {
    long needed = window_len + horizon + static_cast<long>(count - 1) * stride;
    if (count < 1 || window_len < 1 || horizon < 1 || stride < 1)
        throw ConfigError("window plan: window_len, horizon, count, stride must be positive");
    if (needed > length)
        throw ConfigError("dataset too short for window plan: need at least " +
                          std::to_string(needed) + " timesteps, have " + std::to_string(length));
    WindowPlan plan;
    plan.window_len = window_len;
    plan.horizon = horizon;
    plan.count = count;
    plan.stride = stride;
    plan.entries.resize(count);
    for (int w = 0; w < count; ++w) {
        long start = length - (window_len + horizon) - static_cast<long>(count - 1 - w) * stride;
        plan.entries[w] = {start, start + window_len, start + window_len,
                           start + window_len + horizon};
    }
    return plan;
}

/// Uniform (series, offset) draw inside one training window. Raw values
/// only; no series id or timestamp rides along.
inline TrainingExample sample_training_example(const Dataset& ds, const WindowEntry& entry,
                                               int segment_len, Rng& rng) {
    long window = entry.train_end - entry.train_start;
    if (window < segment_len)
        throw ConfigError("training window shorter than segment length " +
                          std::to_string(segment_len));
    int series = static_cast<int>(uniform_int(rng, 0, ds.series_count() - 1));
    long offset = entry.train_start + uniform_int(rng, 0, window - segment_len);
    TrainingExample ex;
    ex.series_index = series;
    const auto& row = ds.values[series];
    ex.segment.assign(row.begin() + offset, row.begin() + offset + segment_len);
    return ex;
}

/// Uniformly random permutation of the raw timesteps (inference-time
/// ablation; applied before tokenization).
inline std::vector<double> shuffle_context(std::span<const double> segment, Rng& rng) {
    std::vector<double> out(segment.begin(), segment.end());
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

/// Interleaves a d-variate series timestep-major: out[t*d + j] = X[j][t].
inline std::vector<double> flatten_multivariate(const std::vector<std::vector<double>>& x) {
    if (x.empty()) return {};
    size_t d = x.size();
    size_t len = x[0].size();
    for (const auto& row : x)
        if (row.size() != len) throw ConfigError("flatten_multivariate: ragged input");
    std::vector<double> out(d * len);
    for (size_t t = 0; t < len; ++t)
        for (size_t j = 0; j < d; ++j) out[t * d + j] = x[j][t];
    return out;
}

inline std::vector<std::vector<double>> unflatten_multivariate(std::span<const double> flat,
                                                               int dims) {
    if (dims < 1 || flat.size() % dims != 0)
        throw ConfigError("unflatten_multivariate: length not divisible by dims");
    size_t len = flat.size() / dims;
    std::vector<std::vector<double>> out(dims, std::vector<double>(len));
    for (size_t t = 0; t < len; ++t)
        for (int j = 0; j < dims; ++j) out[j][t] = flat[t * dims + j];
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic calibration series
// ---------------------------------------------------------------------------

enum class SyntheticKind { kSine, kUniform, kAr1 };

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::kSine;
    long length = 1024;
    int series = 1;
    uint64_t seed = 0;
    // sine
    double amplitude = 2.0;
    double level = 5.0;
    double period = 24.0;
    double noise = 0.0;
    // uniform
    double low = 0.0;
    double high = 1.0;
    // ar(1)
    double phi = 0.8;
};

inline Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.length < 1 || spec.series < 1)
        throw ConfigError("synthetic: length and series must be positive");
    Dataset ds;
    ds.frequency = "synthetic";
    ds.values.resize(spec.series);
    for (int s = 0; s < spec.series; ++s) {
        Rng rng = substream(spec.seed, 0x5eedULL, static_cast<uint64_t>(s));
        auto& row = ds.values[s];
        row.resize(spec.length);
        switch (spec.kind) {
            case SyntheticKind::kSine: {
                ds.name = "sine";
                double phase = static_cast<double>(s) * spec.period /
                               static_cast<double>(std::max(1, spec.series));
                for (long t = 0; t < spec.length; ++t) {
                    double x = spec.level +
                               spec.amplitude *
                                   std::sin(2.0 * M_PI * (static_cast<double>(t) + phase) / spec.period);
                    if (spec.noise > 0.0) x += spec.noise * normal(rng);
                    row[t] = x;
                }
                break;
            }
            case SyntheticKind::kUniform: {
                ds.name = "uniform";
                for (long t = 0; t < spec.length; ++t)
                    row[t] = spec.low + (spec.high - spec.low) * uniform_real(rng);
                break;
            }
            case SyntheticKind::kAr1: {
                ds.name = "ar1";
                double x = spec.level;
                for (long t = 0; t < spec.length; ++t) {
                    x = spec.level + spec.phi * (x - spec.level) + spec.noise * normal(rng);
                    row[t] = x;
                }
                break;
            }
        }
    }
    return ds;
}

}  // namespace digitcast
