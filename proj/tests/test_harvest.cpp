#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dwp/harvest.hpp"
#include "dwp/io_error.hpp"

using namespace dwp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "dwp_test_harvest";
    fs::create_directories(dir);
    return dir / name;
}

ParamSet<float> one_conv(float fill) {
    ParamSet<float> p;
    p.add("c.weight", Tensor<float>({4, 2, 3, 3, 3}, fill));
    p.add("c.bias", Tensor<float>({4}, fill));
    return p;
}

std::vector<Snapshot> four_snapshots() {
    std::vector<Snapshot> out;
    Rng rng(3);
    for (int e : {30, 40, 50, 60}) {
        auto p = one_conv(0.0f);
        fill_normal(p.at("c.weight").values(), rng);
        out.push_back({e, p});
    }
    return out;
}

}  // namespace

TEST(Schedule, DefaultSnapshotEpochs) {
    EXPECT_EQ((SnapshotSchedule{60, 20, 10}.snapshot_epochs()), (std::vector<int>{30, 40, 50, 60}));
}

TEST(Schedule, FirstSnapshotIsFirstMultipleAboveBurnIn) {
    Rng rng(1);
    std::uniform_int_distribution<int> ep(2, 80), step(1, 15);
    for (int trial = 0; trial < 500; ++trial) {
        const int epochs = ep(rng);
        const int burn = std::uniform_int_distribution<int>(0, epochs - 1)(rng);
        const int every = step(rng);
        const auto got = SnapshotSchedule{epochs, burn, every}.snapshot_epochs();
        std::vector<int> want;
        for (int e = 1; e <= epochs; ++e) {
            if (e > burn && e % every == 0) want.push_back(e);
        }
        if (want.empty() || want.back() != epochs) want.push_back(epochs);
        EXPECT_EQ(got, want) << epochs << "/" << burn << "/" << every;
    }
}

TEST(Schedule, BurnInMustPrecedeEnd) {
    EXPECT_THROW((SnapshotSchedule{20, 20, 5}.validate()), std::invalid_argument);
    EXPECT_THROW((SnapshotSchedule{20, 5, 0}.validate()), std::invalid_argument);
}

TEST(Snapshot, SingleConvGivesCinTimesCoutSlices) {
    const auto slices = snapshot_kernels(one_conv(0.5f), 7);
    ASSERT_EQ(slices.size(), 8u);
    EXPECT_EQ(slices[0].layer_name, "c");
    EXPECT_EQ(slices[0].snapshot_epoch, 7);
    for (const auto& s : slices) {
        for (float v : s.values) EXPECT_EQ(v, 0.5f);
    }
}

TEST(Snapshot, SliceIndicesAddressTheKernelTensor) {
    Rng rng(4);
    auto p = one_conv(0.0f);
    fill_normal(p.at("c.weight").values(), rng);
    const auto& w = p.at("c.weight");
    for (const auto& s : snapshot_kernels(p, 1)) {
        const std::size_t base = (static_cast<std::size_t>(s.out_index) * 2 + s.in_index) * 27;
        for (std::size_t i = 0; i < 27; ++i) EXPECT_EQ(s.values[i], w[base + i]);
    }
}

TEST(Snapshot, DeskUNetCountIsSumOfChannelProducts) {
    // Cin*Cout per conv: enc 1*8, 8*8, 8*16, 16*16, 16*32, 32*32; dec1 32*16, 32*16, 16*16;
    // dec0 16*8, 16*8, 8*8; out 8*1.
    const std::size_t hand = 8 + 64 + 128 + 256 + 512 + 1024 + 512 + 512 + 256 + 128 + 128 + 64 + 8;
    EXPECT_EQ(hand, 3600u);
    Rng rng(1);
    EXPECT_EQ(snapshot_kernels(build_unet<float>(UNetConfig{}, rng), 0).size(), hand);
}

TEST(Snapshot, ZeroParamsGiveZeroSlices) {
    Rng rng(1);
    const auto zero = build_unet<float>(UNetConfig{2, 4, 1}, rng).like(0.0f);
    for (const auto& s : snapshot_kernels(zero, 0)) {
        for (float v : s.values) EXPECT_EQ(v, 0.0f);
    }
}

TEST(Export, SharedModePoolsAllSnapshots) {
    const auto ds = export_kernel_dataset(four_snapshots(), GroupingMode::shared, scratch("shared.kds"));
    ASSERT_EQ(ds.groups.size(), 1u);
    EXPECT_EQ(ds.groups[0].key, kSharedGroup);
    EXPECT_EQ(ds.groups[0].slices.size(), 32u);
}

TEST(Export, PerLayerModeKeysByLayer) {
    Rng rng(2);
    ParamSet<float> p;
    p.add("a.weight", normal_tensor<float>({2, 1, 3, 3, 3}, rng));
    p.add("a.bias", Tensor<float>({2}));
    p.add("b.weight", normal_tensor<float>({3, 2, 3, 3, 3}, rng));
    p.add("c.weight", normal_tensor<float>({1, 3, 3, 3, 3}, rng));
    p.add("fc.weight", normal_tensor<float>({4, 5}, rng));
    const auto ds = build_kernel_dataset({{10, p}, {20, p}}, GroupingMode::per_layer);
    ASSERT_EQ(ds.groups.size(), 3u);
    EXPECT_EQ(ds.group("a").slices.size(), 4u);
    EXPECT_EQ(ds.group("b").slices.size(), 12u);
    EXPECT_EQ(ds.group("c").slices.size(), 6u);
    EXPECT_EQ(ds.total_slices(), 22u);
}

TEST(Export, RoundTripIsExact) {
    for (auto mode : {GroupingMode::shared, GroupingMode::per_layer}) {
        const auto path = scratch(std::string("rt_") + to_string(mode) + ".kds");
        const auto ds = export_kernel_dataset(four_snapshots(), mode, path);
        const auto back = read_kernel_dataset(path);
        EXPECT_TRUE(same_kernels(ds, back));
        EXPECT_EQ(back.mode, mode);
    }
}

TEST(Export, EmptyInputsAreRejected) {
    EXPECT_THROW(export_kernel_dataset({}, GroupingMode::shared, scratch("empty.kds")), std::invalid_argument);
    ParamSet<float> biases;
    biases.add("b", Tensor<float>({3}));
    EXPECT_THROW(export_kernel_dataset({{1, biases}}, GroupingMode::shared, scratch("empty2.kds")),
                 std::invalid_argument);
}

TEST(Kds, CorruptFilesAreReported) {
    const auto path = scratch("bad.kds");
    export_kernel_dataset(four_snapshots(), GroupingMode::shared, path);
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto expect_code = [&](const std::string& content, FormatErrc code) {
        std::ofstream(path, std::ios::binary).write(content.data(), static_cast<std::streamsize>(content.size()));
        try {
            read_kernel_dataset(path);
            ADD_FAILURE() << "accepted corrupt file";
        } catch (const FormatError& e) {
            EXPECT_EQ(e.code(), code) << e.what();
        }
    };
    expect_code("KDS2" + bytes.substr(4), FormatErrc::bad_magic);
    expect_code(bytes.substr(0, bytes.size() - 4), FormatErrc::payload_size_mismatch);
}

TEST(Grouping, KeysAndParsing) {
    EXPECT_EQ(group_key_for(GroupingMode::shared, "enc0.conv0"), kSharedGroup);
    EXPECT_EQ(group_key_for(GroupingMode::per_layer, "enc0.conv0"), "enc0.conv0");
    EXPECT_EQ(parse_grouping("per_layer"), GroupingMode::per_layer);
    EXPECT_THROW(parse_grouping("layers"), std::invalid_argument);
    EXPECT_EQ(layer_of("dec1.up.weight"), "dec1.up");
}

TEST(TrainSource, ZeroLearningRateSnapshotsEqualInit) {
    const UNetConfig cfg{2, 4, 1};
    std::vector<Volume> vols{gen_volume(Domain::source, {16, 16, 16}, 1, "s0")};
    Rng rng(5);
    const auto r = train_source(cfg, {&vols[0]}, {4, 1, 1}, {4, 0.0, 1.0}, rng);
    Rng init_rng(5);
    const auto init = build_unet<float>(cfg, init_rng);
    ASSERT_EQ(r.snapshots.size(), 3u);
    for (const auto& s : r.snapshots) EXPECT_EQ(s.params, init);
    EXPECT_EQ(r.final_params, r.snapshots.back().params);
    EXPECT_EQ(r.snapshots[0].epoch, 2);
}

TEST(TrainSource, EmptySourceIsRejected) {
    Rng rng(5);
    EXPECT_THROW(train_source(UNetConfig{2, 4, 1}, {}, {4, 1, 1}, {4, 1e-3, 1.0}, rng), std::invalid_argument);
}

TEST(TrainSource, ShortRunImprovesSourceDice) {
    const UNetConfig cfg{2, 4, 1};
    std::vector<Volume> train, test;
    for (int i = 0; i < 6; ++i) train.push_back(gen_volume(Domain::source, {16, 16, 16}, 1, "s" + std::to_string(i)));
    for (int i = 0; i < 4; ++i) test.push_back(gen_volume(Domain::source, {16, 16, 16}, 2, "s" + std::to_string(i)));
    std::vector<const Volume*> tr, te;
    for (const auto& v : train) tr.push_back(&v);
    for (const auto& v : test) te.push_back(&v);
    Rng rng(7);
    const auto r = train_source(cfg, tr, {40, 20, 10}, {40, 3e-3, 1.0}, rng);
    Rng init_rng(7);
    const auto untrained = evaluate(cfg, build_unet<float>(cfg, init_rng), te);
    const auto trained = evaluate(cfg, r.final_params, te);
    EXPECT_GT(trained.dice, untrained.dice);
}
