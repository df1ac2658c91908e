#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/config.hpp"
#include "dwp/splits.hpp"

namespace dwp {

/// A required input file or directory does not exist.
class MissingArtifactError : public std::runtime_error {
public:
    explicit MissingArtifactError(const std::filesystem::path& p)
        : std::runtime_error("missing artifact: " + p.string()), path_(p) {}
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

/// Version string baked in at build time (git describe).
const char* version_string();

/// File locations of one pipeline run.
struct Workspace {
    std::filesystem::path root;

    std::filesystem::path data_dir() const { return root / "data"; }
    std::filesystem::path source_checkpoint() const { return root / "source.ckpt"; }
    std::filesystem::path snapshot_dir() const { return root / "snapshots"; }
    std::filesystem::path kernels() const { return root / "kernels.kds"; }
    std::filesystem::path prior() const { return root / "prior.bin"; }
};

/// Writes `source_volumes` source and `target_volumes` target volumes as
/// <dir>/<domain>_<NNN>.mvol, each drawn from its own substream of `seed`.
void generate_dataset(const std::filesystem::path& dir, std::uint64_t seed, const Dims& dims, int source_volumes,
                      int target_volumes);

/// All volumes of one domain in `dir`, ordered by id.
std::vector<Volume> load_domain(const std::filesystem::path& dir, Domain domain);

std::vector<const Volume*> pointers(const std::vector<Volume>& vs);

/// Source training with snapshots written to <snapshot_dir>/epoch_NNNN.ckpt and the final
/// parameters to `checkpoint`.
SourceTrainResult run_train_source(const MasterConfig& cfg, const std::filesystem::path& data_dir,
                                   const std::filesystem::path& checkpoint, const std::filesystem::path& snapshot_dir);

/// Reads every epoch_NNNN.ckpt in `snapshot_dir`, exports KDS1 to `out`.
KernelDataset run_harvest(const std::filesystem::path& snapshot_dir, GroupingMode mode, const std::filesystem::path& out);

struct PriorTrainReport {
    PriorBank<float> bank;
    std::vector<std::vector<double>> epoch_bounds;  // per group
};

/// One VAE per group of the kernel dataset, written as a prior bank to `out`.
PriorTrainReport run_train_prior(const MasterConfig& cfg, const std::filesystem::path& kernels,
                                 const std::filesystem::path& out);

struct MethodSpec {
    Method method = Method::ri;
    std::optional<std::filesystem::path> checkpoint;  // source-trained init
    std::set<std::string> freeze;
    std::optional<std::filesystem::path> prior;

    /// Checks the per-method invariants (prf: checkpoint and freeze set; dwp: prior; ri: no checkpoint).
    void validate() const;
};

/// Every tensor except those of the first encoder block, the last decoder block and the output conv.
std::set<std::string> prf_freeze_set(const UNetConfig& cfg);

/// Standard spec for a method given the workspace artifacts.
MethodSpec method_spec(Method m, const UNetConfig& cfg, const Workspace& ws);

struct MetricsRecord {
    std::string method;
    int train_size = 0;
    std::uint64_t seed = 0;
    double dice = 0.0;
    double iou = 0.0;
    double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "method,train_size,seed,dice,iou,wall_seconds";

/// One CSV line without newline; metrics are printed with round-trip precision.
std::string to_csv_line(const MetricsRecord& r);
std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

/// Appends `r`, writing the header first when the file is new or empty.
void append_metrics_csv(const std::filesystem::path& path, const MetricsRecord& r);

/// Target split for (train_size, seed) drawn from the target pool.
SplitSpec split_for(const MasterConfig& cfg, const std::vector<Volume>& target_pool, int train_size, std::uint64_t seed);

/// Trains the method on split.train_ids and evaluates on split.test_ids. RI and DWP draw their
/// initial weights from the same stream. Throws MissingArtifactError naming any missing input.
MetricsRecord run_method(const MethodSpec& m, const SplitSpec& split, const MasterConfig& cfg,
                         const std::vector<Volume>& target_pool, int train_size);

struct TableCell {
    int train_size = 0;
    Method method = Method::ri;
    std::size_t n = 0;
    double mean_iou = 0.0, std_iou = 0.0;
    double mean_dice = 0.0, std_dice = 0.0;
};

/// Mean and sample standard deviation (n - 1) per (train size, method); cells without records have n = 0.
std::vector<TableCell> summarize(const std::vector<MetricsRecord>& records, const TableConfig& table);

/// Rows = train sizes, columns = methods, cells "mean (std)" of IoU; "missing" when n = 0.
std::string format_markdown_table(const std::vector<TableCell>& cells, const TableConfig& table);

struct TableReport {
    std::vector<MetricsRecord> records;
    std::vector<TableCell> cells;
    std::vector<std::string> failures;  // "<method>/<size>/<seed>: <reason>"
};

/// Full pipeline in `out_dir`: data, source training, harvest, prior, then every
/// (train size, method, seed) cell. Existing stage outputs in the workspace are reused.
/// Writes metrics.csv, table.csv, table.md, manifest.json and the kernel grids.
TableReport run_table(const MasterConfig& cfg, const std::filesystem::path& out_dir,
                      const std::function<void(const std::string&)>& log = {});

/// Binary PGM: each kernel is three 3x3 depth tiles with 1-pixel separators, min-max normalized per
/// kernel (constant kernels render as 128), kernels laid out row-major `columns` per row.
void render_kernel_grid(const std::vector<KernelSlice>& kernels, const std::filesystem::path& path, int columns = 8);

/// The manifest every command writes: resolved config, version and seeds.
nlohmann::json run_manifest(const MasterConfig& cfg, const std::string& command, const nlohmann::json& extra = {});

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace dwp
