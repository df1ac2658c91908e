#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "dwp/train.hpp"

namespace dwp {

/// Snapshots are taken at every multiple of `every` strictly greater than `burn_in`, plus the final
/// epoch if it is not already one of them.
struct SnapshotSchedule {
    int epochs = 60;
    int burn_in = 20;
    int every = 10;

    void validate() const;
    std::vector<int> snapshot_epochs() const;
};

/// One 3x3x3 filter for a single (input channel p, output channel k) pair of a conv layer.
struct KernelSlice {
    std::array<float, 27> values{};
    std::string layer_name;
    int in_index = -1;
    int out_index = -1;
    int snapshot_epoch = -1;
};

struct Snapshot {
    int epoch = 0;
    ParamSet<float> params;
};

struct SourceTrainResult {
    ParamSet<float> final_params;
    std::vector<Snapshot> snapshots;
    std::vector<double> epoch_losses;
};

/// Trains on the source volumes (no freezing) and records parameter snapshots per `schedule`.
SourceTrainResult train_source(const UNetConfig& cfg, const std::vector<const Volume*>& source,
                               const SnapshotSchedule& schedule, const TrainOptions& options, Rng& rng);

/// One slice per (layer, p, k) for every conv weight shaped [Cout, Cin, 3, 3, 3].
std::vector<KernelSlice> snapshot_kernels(const ParamSet<float>& params, int epoch);

/// "weight" tensor name -> layer name ("enc0.conv0.weight" -> "enc0.conv0").
std::string layer_of(const std::string& tensor_name);

/// True for tensors shaped [Cout, Cin, 3, 3, 3].
template <typename T>
bool is_kernel_tensor(const Tensor<T>& t) {
    return t.rank() == 5 && t.dim(2) == 3 && t.dim(3) == 3 && t.dim(4) == 3;
}

enum class GroupingMode { shared, per_layer };
const char* to_string(GroupingMode m);
GroupingMode parse_grouping(const std::string& s);

inline constexpr const char* kSharedGroup = "shared";

/// Group key for a layer under the grouping mode.
std::string group_key_for(GroupingMode mode, const std::string& layer_name);

struct KernelGroup {
    std::string key;
    std::vector<KernelSlice> slices;
};

struct KernelDataset {
    GroupingMode mode = GroupingMode::shared;
    std::vector<KernelGroup> groups;

    const KernelGroup& group(const std::string& key) const;
    std::size_t total_slices() const;
};

/// Equal grouping, keys, counts and kernel values. Slice metadata is not part of the file format.
bool same_kernels(const KernelDataset& a, const KernelDataset& b);

KernelDataset build_kernel_dataset(const std::vector<Snapshot>& snapshots, GroupingMode mode);

/// Aggregates slices across snapshots, writes KDS1 to `path`, returns the in-memory dataset.
KernelDataset export_kernel_dataset(const std::vector<Snapshot>& snapshots, GroupingMode mode,
                                    const std::filesystem::path& path);

void write_kernel_dataset(const KernelDataset& ds, const std::filesystem::path& path);
KernelDataset read_kernel_dataset(const std::filesystem::path& path);

}  // namespace dwp
