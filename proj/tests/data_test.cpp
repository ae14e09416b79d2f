#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "digitcast/data.hpp"

using namespace digitcast;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    auto path = (std::filesystem::temp_directory_path() / name).string();
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST(LoadDataset, ThreeColumnsTenRows) {
    std::string csv = "a,b,c\n";
    for (int r = 0; r < 10; ++r)
        csv += std::to_string(r) + "," + std::to_string(r * 2) + "," + std::to_string(r * 3) + "\n";
    auto ds = load_dataset(write_temp("dc_basic.csv", csv));
    EXPECT_EQ(ds.series_count(), 3);
    EXPECT_EQ(ds.length(), 10);
    EXPECT_DOUBLE_EQ(ds.values[2][4], 12.0);
}

TEST(LoadDataset, TimestampColumnSkipped) {
    std::string csv = "date,s0,s1\n2020-01-01,1.5,2.5\n2020-01-02,3.5,4.5\n";
    CsvLayout layout;
    layout.timestamp_column = "date";
    auto ds = load_dataset(write_temp("dc_ts.csv", csv), layout);
    EXPECT_EQ(ds.series_count(), 2);
    EXPECT_EQ(ds.length(), 2);
    ASSERT_EQ(ds.timestamps.size(), 2u);
    EXPECT_EQ(ds.timestamps[1], "2020-01-02");
}

TEST(LoadDataset, NonNumericCellCitesCoordinates) {
    std::string csv = "a,b\n1,2\n3,abc\n";
    try {
        load_dataset(write_temp("dc_bad.csv", csv));
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("abc"), std::string::npos);
        EXPECT_NE(msg.find("row 3"), std::string::npos);
        EXPECT_NE(msg.find("\"b\""), std::string::npos);
    }
}

TEST(LoadDataset, RaggedRowNamed) {
    std::string csv = "a,b\n1,2\n3\n";
    try {
        load_dataset(write_temp("dc_ragged.csv", csv));
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("row 3"), std::string::npos);
    }
}

TEST(LoadDataset, MissingFile) {
    EXPECT_THROW(load_dataset("/nonexistent/nope.csv"), ConfigError);
}

TEST(LoadDataset, RejectsNaN) {
    std::string csv = "a\n1\nnan\n";
    EXPECT_THROW(load_dataset(write_temp("dc_nan.csv", csv)), ConfigError);
}

TEST(SaveDataset, LoadSaveLoadIsIdentity) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kAr1;
    spec.length = 64;
    spec.series = 3;
    spec.seed = 9;
    spec.noise = 1.0;
    auto ds = make_synthetic(spec);
    auto path = (std::filesystem::temp_directory_path() / "dc_roundtrip.csv").string();
    save_dataset(ds, path, {"digitcast test artifact"});
    auto back = load_dataset(path);
    ASSERT_EQ(back.series_count(), ds.series_count());
    ASSERT_EQ(back.length(), ds.length());
    for (int s = 0; s < ds.series_count(); ++s)
        for (int t = 0; t < ds.length(); ++t)
            EXPECT_EQ(back.values[s][t], ds.values[s][t]) << "s=" << s << " t=" << t;
}

TEST(WindowPlan, AnchoredAtDatasetEnd) {
    auto plan = make_window_plan(9000, 8760, 24, 2, 24);
    ASSERT_EQ(plan.entries.size(), 2u);
    EXPECT_EQ(plan.entries[0].train_start, 192);
    EXPECT_EQ(plan.entries[0].train_end, 8952);
    EXPECT_EQ(plan.entries[0].eval_start, 8952);
    EXPECT_EQ(plan.entries[0].eval_end, 8976);
    EXPECT_EQ(plan.entries[1].train_start, 216);
    EXPECT_EQ(plan.entries[1].eval_end, 9000);
}

TEST(WindowPlan, SingleWindowEndsAtLength) {
    auto plan = make_window_plan(500, 100, 24, 1, 24);
    ASSERT_EQ(plan.entries.size(), 1u);
    EXPECT_EQ(plan.entries[0].eval_end, 500);
}

TEST(WindowPlan, TooShortDatasetNamesMinimum) {
    try {
        make_window_plan(8000, 8760, 24, 1, 24);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("8784"), std::string::npos);
    }
}

TEST(WindowPlan, HorizonsTileWhenStrideEqualsHorizon) {
    auto plan = make_window_plan(2000, 500, 24, 10, 24);
    for (size_t w = 0; w < plan.entries.size(); ++w) {
        EXPECT_EQ(plan.entries[w].eval_start, plan.entries[w].train_end);
        EXPECT_EQ(plan.entries[w].eval_end - plan.entries[w].eval_start, 24);
        if (w > 0) {
            EXPECT_GT(plan.entries[w].train_start, plan.entries[w - 1].train_start);
            EXPECT_EQ(plan.entries[w].eval_start, plan.entries[w - 1].eval_end);
        }
    }
    EXPECT_EQ(plan.entries.back().eval_end, 2000);
    EXPECT_EQ(plan.entries.front().eval_start, 2000 - 10 * 24);
}

TEST(SampleTrainingExample, SingleValidOffset) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kUniform;
    spec.length = 300;
    spec.series = 2;
    auto ds = make_synthetic(spec);
    WindowEntry entry{10, 266, 266, 290};
    Rng rng = substream(1, 0);
    auto ex = sample_training_example(ds, entry, 256, rng);
    EXPECT_EQ(ex.segment.size(), 256u);
    EXPECT_EQ(ex.segment[0], ds.values[ex.series_index][10]);
}

TEST(SampleTrainingExample, DeterministicUnderSeed) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kUniform;
    spec.length = 500;
    spec.series = 4;
    auto ds = make_synthetic(spec);
    WindowEntry entry{0, 400, 400, 424};
    Rng a = substream(42, 1);
    Rng b = substream(42, 1);
    for (int i = 0; i < 20; ++i) {
        auto ea = sample_training_example(ds, entry, 64, a);
        auto eb = sample_training_example(ds, entry, 64, b);
        EXPECT_EQ(ea.series_index, eb.series_index);
        EXPECT_EQ(ea.segment, eb.segment);
    }
}

TEST(SampleTrainingExample, SeriesFrequenciesNearUniform) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kUniform;
    spec.length = 300;
    spec.series = 4;
    auto ds = make_synthetic(spec);
    WindowEntry entry{0, 280, 280, 300};
    Rng rng = substream(77, 0);
    const int draws = 10000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < draws; ++i) counts[sample_training_example(ds, entry, 32, rng).series_index]++;
    // 5 sigma binomial bound around draws/4
    double sigma = std::sqrt(draws * 0.25 * 0.75);
    for (int s = 0; s < 4; ++s)
        EXPECT_NEAR(counts[s], draws / 4.0, 5.0 * sigma) << "series " << s;
}

TEST(SampleTrainingExample, WindowShorterThanSegmentRejected) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kUniform;
    spec.length = 100;
    auto ds = make_synthetic(spec);
    WindowEntry entry{0, 50, 50, 74};
    Rng rng = substream(1, 0);
    EXPECT_THROW(sample_training_example(ds, entry, 64, rng), ConfigError);
}

TEST(ShuffleContext, ConstantSegmentUnchanged) {
    std::vector<double> seg(16, 3.0);
    Rng rng = substream(5, 0);
    EXPECT_EQ(shuffle_context(seg, rng), seg);
}

TEST(ShuffleContext, PreservesMultiset) {
    Rng rng = substream(6, 0);
    std::vector<double> seg = {1, 2, 2, 3, 5, 8, 13, 21};
    for (int trial = 0; trial < 50; ++trial) {
        auto shuffled = shuffle_context(seg, rng);
        auto a = seg, b = shuffled;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
}

TEST(ShuffleContext, AllPermutationsReachable) {
    std::vector<double> seg = {1.0, 2.0, 3.0};
    std::set<std::vector<double>> seen;
    for (uint64_t seed = 0; seed < 200 && seen.size() < 6; ++seed) {
        Rng rng = substream(seed, 0);
        seen.insert(shuffle_context(seg, rng));
    }
    EXPECT_EQ(seen.size(), 6u);
}

TEST(FlattenMultivariate, TimestepMajorInterleaving) {
    std::vector<std::vector<double>> x = {{1, 3}, {2, 4}};
    EXPECT_EQ(flatten_multivariate(x), (std::vector<double>{1, 2, 3, 4}));
}

TEST(FlattenMultivariate, UnivariateIsIdentity) {
    std::vector<std::vector<double>> x = {{5, 6, 7}};
    EXPECT_EQ(flatten_multivariate(x), x[0]);
}

TEST(FlattenMultivariate, RoundtripRandomMatrix) {
    Rng rng = substream(8, 0);
    std::vector<std::vector<double>> x(3, std::vector<double>(5));
    for (auto& row : x)
        for (auto& v : row) v = normal(rng);
    auto flat = flatten_multivariate(x);
    ASSERT_EQ(flat.size(), 15u);
    EXPECT_EQ(unflatten_multivariate(flat, 3), x);
}

TEST(Synthetic, SineIsPeriodicWithoutNoise) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kSine;
    spec.length = 96;
    spec.period = 24.0;
    auto ds = make_synthetic(spec);
    for (int t = 0; t + 24 < ds.length(); ++t)
        EXPECT_NEAR(ds.values[0][t], ds.values[0][t + 24], 1e-9);
}

TEST(Synthetic, SeededAndReproducible) {
    SyntheticSpec spec;
    spec.kind = SyntheticKind::kAr1;
    spec.length = 128;
    spec.series = 2;
    spec.noise = 0.5;
    spec.seed = 123;
    auto a = make_synthetic(spec);
    auto b = make_synthetic(spec);
    EXPECT_EQ(a.values, b.values);
    spec.seed = 124;
    auto c = make_synthetic(spec);
    EXPECT_NE(a.values, c.values);
}
