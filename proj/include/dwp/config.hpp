#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "dwp/harvest.hpp"
#include "dwp/unet.hpp"
#include "dwp/vae.hpp"
#include "dwp/vi.hpp"
#include "dwp/volume.hpp"

namespace dwp {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataConfig {
    Dims dims{32, 32, 32};
    int source_volumes = 40;
    int target_volumes = 70;
};

struct SourceConfig {
    TrainOptions train{60, 1e-3, 1.0};
    int burn_in = 20;
    int every = 10;

    SnapshotSchedule schedule() const { return {train.epochs, burn_in, every}; }
};

struct PriorConfig {
    GroupingMode grouping = GroupingMode::shared;
    VAEConfig vae;
};

enum class Method { dwp, pr, prf, ri };
const char* to_string(Method m);
Method parse_method(const std::string& s);

struct DWPRunConfig {
    VITrainConfig vi;
    PredictMode predict = PredictMode::mean;
    int predict_samples = 8;
};

struct TableConfig {
    std::vector<Method> methods{Method::dwp, Method::pr, Method::prf, Method::ri};
    std::vector<int> train_sizes{5, 10, 15, 20};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    int test_size = 50;
};

/// Every knob of the pipeline. Missing keys take these defaults; unknown keys are errors.
struct MasterConfig {
    std::uint64_t seed = 1;
    DataConfig data;
    UNetConfig unet;
    SourceConfig source;
    PriorConfig prior;
    TrainOptions target{150, 1e-3, 1.0};
    DWPRunConfig dwp;
    TableConfig table;

    void validate() const;
};

nlohmann::json to_json(const MasterConfig& c);

/// Throws ConfigError on unknown keys, wrong types or invalid values.
MasterConfig config_from_json(const nlohmann::json& j);

/// Reads and validates a JSON config file. Throws ConfigError (including for malformed JSON) or
/// FormatError(io_error) when the file cannot be opened.
MasterConfig load_config(const std::filesystem::path& path);

}  // namespace dwp
