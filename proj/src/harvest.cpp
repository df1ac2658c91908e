#include "dwp/harvest.hpp"

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "binary_io.hpp"

namespace dwp {

void SnapshotSchedule::validate() const {
    if (epochs < 1) throw std::invalid_argument("SnapshotSchedule: epochs must be >= 1");
    if (every < 1) throw std::invalid_argument("SnapshotSchedule: every must be >= 1");
    if (burn_in < 0 || burn_in >= epochs) {
        throw std::invalid_argument("SnapshotSchedule: burn_in (" + std::to_string(burn_in) + ") must be in [0, epochs)");
    }
}

std::vector<int> SnapshotSchedule::snapshot_epochs() const {
    validate();
    std::vector<int> out;
    for (int e = (burn_in / every + 1) * every; e <= epochs; e += every) out.push_back(e);
    if (out.empty() || out.back() != epochs) out.push_back(epochs);
    return out;
}

SourceTrainResult train_source(const UNetConfig& cfg, const std::vector<const Volume*>& source,
                               const SnapshotSchedule& schedule, const TrainOptions& options, Rng& rng) {
    if (source.empty()) throw std::invalid_argument("train_source: empty source set");
    if (schedule.epochs != options.epochs) throw std::invalid_argument("train_source: schedule/option epoch counts differ");
    const auto epochs = schedule.snapshot_epochs();
    SourceTrainResult out;
    ParamSet<float> init = build_unet<float>(cfg, rng);
    auto record = [&](int epoch, const ParamSet<float>& p) {
        if (std::find(epochs.begin(), epochs.end(), epoch) != epochs.end()) out.snapshots.push_back({epoch, p});
    };
    TrainResult r = train_plain(cfg, source, init, {}, options, rng, record);
    out.final_params = std::move(r.params);
    out.epoch_losses = std::move(r.epoch_losses);
    return out;
}

std::string layer_of(const std::string& tensor_name) {
    const auto dot = tensor_name.rfind('.');
    return dot == std::string::npos ? tensor_name : tensor_name.substr(0, dot);
}

std::vector<KernelSlice> snapshot_kernels(const ParamSet<float>& params, int epoch) {
    std::vector<KernelSlice> out;
    for (const auto& e : params) {
        if (!is_kernel_tensor(e.value)) continue;
        const std::size_t cout = e.value.dim(0), cin = e.value.dim(1);
        const std::string layer = layer_of(e.name);
        for (std::size_t k = 0; k < cout; ++k) {
            for (std::size_t p = 0; p < cin; ++p) {
                KernelSlice s;
                const float* src = e.value.data() + (k * cin + p) * 27;
                std::copy(src, src + 27, s.values.begin());
                s.layer_name = layer;
                s.in_index = static_cast<int>(p);
                s.out_index = static_cast<int>(k);
                s.snapshot_epoch = epoch;
                out.push_back(std::move(s));
            }
        }
    }
    return out;
}

const char* to_string(GroupingMode m) { return m == GroupingMode::shared ? "shared" : "per_layer"; }

GroupingMode parse_grouping(const std::string& s) {
    if (s == "shared") return GroupingMode::shared;
    if (s == "per_layer") return GroupingMode::per_layer;
    throw std::invalid_argument("unknown grouping mode '" + s + "' (expected shared|per_layer)");
}

std::string group_key_for(GroupingMode mode, const std::string& layer_name) {
    return mode == GroupingMode::shared ? std::string(kSharedGroup) : layer_name;
}

const KernelGroup& KernelDataset::group(const std::string& key) const {
    for (const auto& g : groups) {
        if (g.key == key) return g;
    }
    throw std::out_of_range("kernel dataset has no group '" + key + "'");
}

std::size_t KernelDataset::total_slices() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.slices.size();
    return n;
}

bool same_kernels(const KernelDataset& a, const KernelDataset& b) {
    if (a.mode != b.mode || a.groups.size() != b.groups.size()) return false;
    for (std::size_t i = 0; i < a.groups.size(); ++i) {
        const auto& ga = a.groups[i];
        const auto& gb = b.groups[i];
        if (ga.key != gb.key || ga.slices.size() != gb.slices.size()) return false;
        for (std::size_t j = 0; j < ga.slices.size(); ++j) {
            if (ga.slices[j].values != gb.slices[j].values) return false;
        }
    }
    return true;
}

KernelDataset build_kernel_dataset(const std::vector<Snapshot>& snapshots, GroupingMode mode) {
    if (snapshots.empty()) throw std::invalid_argument("export_kernel_dataset: no snapshots");
    KernelDataset ds;
    ds.mode = mode;
    std::map<std::string, std::size_t> index;
    for (const auto& snap : snapshots) {
        for (auto& s : snapshot_kernels(snap.params, snap.epoch)) {
            const std::string key = group_key_for(mode, s.layer_name);
            auto it = index.find(key);
            if (it == index.end()) {
                it = index.emplace(key, ds.groups.size()).first;
                ds.groups.push_back({key, {}});
            }
            ds.groups[it->second].slices.push_back(std::move(s));
        }
    }
    if (ds.total_slices() == 0) throw std::invalid_argument("export_kernel_dataset: snapshots contain no 3x3x3 kernels");
    return ds;
}

KernelDataset export_kernel_dataset(const std::vector<Snapshot>& snapshots, GroupingMode mode,
                                    const std::filesystem::path& path) {
    KernelDataset ds = build_kernel_dataset(snapshots, mode);
    write_kernel_dataset(ds, path);
    return ds;
}

void write_kernel_dataset(const KernelDataset& ds, const std::filesystem::path& path) {
    nlohmann::json groups = nlohmann::json::array();
    std::string payload;
    for (const auto& g : ds.groups) {
        groups.push_back({{"key", g.key}, {"count", g.slices.size()}});
        for (const auto& s : g.slices) detail::append_f32_le(payload, s.values);
    }
    const nlohmann::json header = {{"grouping", to_string(ds.mode)}, {"groups", groups}};
    detail::write_file(path, "KDS1\n" + header.dump() + "\n" + payload);
}

KernelDataset read_kernel_dataset(const std::filesystem::path& path) {
    const std::string data = detail::read_file(path);
    const std::string what = "kernel dataset '" + path.string() + "'";
    std::size_t offset = 0;
    const std::string line = detail::split_header(data, "KDS1\n", what, offset);
    KernelDataset ds;
    std::vector<std::size_t> counts;
    try {
        const auto header = nlohmann::json::parse(line);
        ds.mode = parse_grouping(header.at("grouping").get<std::string>());
        for (const auto& g : header.at("groups")) {
            ds.groups.push_back({g.at("key").get<std::string>(), {}});
            counts.push_back(g.at("count").get<std::size_t>());
        }
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::bad_header, what + ": " + e.what());
    }
    std::size_t expected = 0;
    for (auto c : counts) expected += c * 27 * 4;
    if (data.size() - offset != expected) {
        throw FormatError(FormatErrc::payload_size_mismatch, what + ": header needs " + std::to_string(expected) +
                                                                 " bytes, found " + std::to_string(data.size() - offset));
    }
    const char* p = data.data() + offset;
    for (std::size_t g = 0; g < ds.groups.size(); ++g) {
        auto& group = ds.groups[g];
        group.slices.resize(counts[g]);
        for (auto& s : group.slices) {
            detail::read_f32_le(p, s.values);
            p += 27 * 4;
            if (ds.mode == GroupingMode::per_layer) s.layer_name = group.key;
            if (!all_finite(std::span<const float>(s.values))) {
                throw FormatError(FormatErrc::bad_payload, what + ": non-finite kernel value in group '" + group.key + "'");
            }
        }
    }
    return ds;
}

}  // namespace dwp
