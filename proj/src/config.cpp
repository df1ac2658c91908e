#include "dwp/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "dwp/io_error.hpp"

namespace dwp {

const char* to_string(Method m) {
    switch (m) {
        case Method::dwp: return "dwp";
        case Method::pr: return "pr";
        case Method::prf: return "prf";
        case Method::ri: return "ri";
    }
    return "?";
}

Method parse_method(const std::string& s) {
    if (s == "dwp") return Method::dwp;
    if (s == "pr") return Method::pr;
    if (s == "prf") return Method::prf;
    if (s == "ri") return Method::ri;
    throw std::invalid_argument("unknown method '" + s + "' (expected dwp|pr|prf|ri)");
}

namespace {

using nlohmann::json;

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

// Reads a string-valued enum through its parser.
template <typename E, typename Parse>
void read_enum(const json& j, const char* key, E& out, const std::string& where, Parse parse) {
    if (!j.contains(key)) return;
    std::string s;
    read(j, key, s, where);
    try {
        out = parse(s);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

void read_train(const json& j, TrainOptions& t, const std::string& where, std::initializer_list<const char*> extra = {}) {
    std::vector<const char*> keys{"epochs", "lr", "lambda_dice"};
    keys.insert(keys.end(), extra.begin(), extra.end());
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; })) {
            throw ConfigError(where + ": unknown key '" + k + "'");
        }
    }
    read(j, "epochs", t.epochs, where);
    read(j, "lr", t.lr, where);
    read(j, "lambda_dice", t.lambda_dice, where);
}

json train_json(const TrainOptions& t) { return {{"epochs", t.epochs}, {"lr", t.lr}, {"lambda_dice", t.lambda_dice}}; }

}  // namespace

void MasterConfig::validate() const {
    try {
        for (auto d : data.dims) {
            if (d < 16) throw std::invalid_argument("data.dims: every axis must be >= 16");
            if (d % unet.divisor() != 0) {
                throw std::invalid_argument("data.dims: every axis must be divisible by " + std::to_string(unet.divisor()));
            }
        }
        if (data.source_volumes < 1) throw std::invalid_argument("data.source_volumes must be >= 1");
        unet.validate();
        if (unet.in_channels != 1) throw std::invalid_argument("unet.in_channels: generated volumes have one channel");
        source.schedule().validate();
        if (source.train.epochs < 1 || !(source.train.lr >= 0)) throw std::invalid_argument("source: invalid epochs or lr");
        prior.vae.validate();
        if (target.epochs < 0 || !(target.lr >= 0)) throw std::invalid_argument("target: invalid epochs or lr");
        dwp.vi.validate();
        if (dwp.predict_samples < 1) throw std::invalid_argument("dwp.predict_samples must be >= 1");
        if (table.methods.empty() || table.train_sizes.empty() || table.seeds.empty()) {
            throw std::invalid_argument("table: methods, train_sizes and seeds must be nonempty");
        }
        if (table.test_size < 1) throw std::invalid_argument("table.test_size must be >= 1");
        for (int s : table.train_sizes) {
            if (s != 5 && s != 10 && s != 15 && s != 20) throw std::invalid_argument("table.train_sizes entries must be 5, 10, 15 or 20");
            if (s + table.test_size > data.target_volumes) {
                throw std::invalid_argument("data.target_volumes (" + std::to_string(data.target_volumes) +
                                            ") is below train size " + std::to_string(s) + " + test size " +
                                            std::to_string(table.test_size));
            }
        }
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

nlohmann::json to_json(const MasterConfig& c) {
    json methods = json::array();
    for (auto m : c.table.methods) methods.push_back(to_string(m));
    const auto& v = c.prior.vae;
    const auto& vi = c.dwp.vi;
    return {
        {"seed", c.seed},
        {"data", {{"dims", c.data.dims}, {"source_volumes", c.data.source_volumes}, {"target_volumes", c.data.target_volumes}}},
        {"unet", {{"levels", c.unet.levels}, {"base_channels", c.unet.base_channels}, {"in_channels", c.unet.in_channels}}},
        {"source",
         {{"epochs", c.source.train.epochs},
          {"lr", c.source.train.lr},
          {"lambda_dice", c.source.train.lambda_dice},
          {"burn_in", c.source.burn_in},
          {"every", c.source.every}}},
        {"prior",
         {{"grouping", to_string(c.prior.grouping)},
          {"latent_dim", v.latent_dim},
          {"encoder_hidden", v.encoder_hidden},
          {"decoder_hidden", v.decoder_hidden},
          {"decoder_variance", to_string(v.decoder_variance)},
          {"epochs", v.epochs},
          {"lr", v.lr},
          {"batch_size", v.batch_size}}},
        {"target", train_json(c.target)},
        {"dwp",
         {{"epochs", vi.epochs},
          {"lr_theta", vi.lr_theta},
          {"lr_psi", vi.lr_psi},
          {"mc_samples", vi.mc_samples},
          {"likelihood_scale", to_string(vi.likelihood_scale)},
          {"prior_mode", to_string(vi.prior_mode)},
          {"lambda_dice", vi.lambda_dice},
          {"predict", to_string(c.dwp.predict)},
          {"predict_samples", c.dwp.predict_samples}}},
        {"table",
         {{"methods", methods}, {"train_sizes", c.table.train_sizes}, {"seeds", c.table.seeds}, {"test_size", c.table.test_size}}},
    };
}

MasterConfig config_from_json(const nlohmann::json& j) {
    MasterConfig c;
    only_keys(j, "config", {"seed", "data", "unet", "source", "prior", "target", "dwp", "table"});
    read(j, "seed", c.seed, "config");
    if (j.contains("data")) {
        const auto& d = j["data"];
        only_keys(d, "data", {"dims", "source_volumes", "target_volumes"});
        read(d, "dims", c.data.dims, "data");
        read(d, "source_volumes", c.data.source_volumes, "data");
        read(d, "target_volumes", c.data.target_volumes, "data");
    }
    if (j.contains("unet")) {
        const auto& u = j["unet"];
        only_keys(u, "unet", {"levels", "base_channels", "in_channels"});
        read(u, "levels", c.unet.levels, "unet");
        read(u, "base_channels", c.unet.base_channels, "unet");
        read(u, "in_channels", c.unet.in_channels, "unet");
    }
    if (j.contains("source")) {
        const auto& s = j["source"];
        read_train(s, c.source.train, "source", {"burn_in", "every"});
        read(s, "burn_in", c.source.burn_in, "source");
        read(s, "every", c.source.every, "source");
    }
    if (j.contains("prior")) {
        const auto& p = j["prior"];
        only_keys(p, "prior",
                  {"grouping", "latent_dim", "encoder_hidden", "decoder_hidden", "decoder_variance", "epochs", "lr",
                   "batch_size"});
        read_enum(p, "grouping", c.prior.grouping, "prior", parse_grouping);
        auto& v = c.prior.vae;
        read(p, "latent_dim", v.latent_dim, "prior");
        read(p, "encoder_hidden", v.encoder_hidden, "prior");
        read(p, "decoder_hidden", v.decoder_hidden, "prior");
        read_enum(p, "decoder_variance", v.decoder_variance, "prior", parse_decoder_variance);
        read(p, "epochs", v.epochs, "prior");
        read(p, "lr", v.lr, "prior");
        read(p, "batch_size", v.batch_size, "prior");
    }
    if (j.contains("target")) read_train(j["target"], c.target, "target");
    if (j.contains("dwp")) {
        const auto& d = j["dwp"];
        only_keys(d, "dwp",
                  {"epochs", "lr_theta", "lr_psi", "mc_samples", "likelihood_scale", "prior_mode", "lambda_dice",
                   "predict", "predict_samples"});
        auto& vi = c.dwp.vi;
        read(d, "epochs", vi.epochs, "dwp");
        read(d, "lr_theta", vi.lr_theta, "dwp");
        read(d, "lr_psi", vi.lr_psi, "dwp");
        read(d, "mc_samples", vi.mc_samples, "dwp");
        read_enum(d, "likelihood_scale", vi.likelihood_scale, "dwp", parse_likelihood_scale);
        read_enum(d, "prior_mode", vi.prior_mode, "dwp", parse_prior_mode);
        read(d, "lambda_dice", vi.lambda_dice, "dwp");
        read_enum(d, "predict", c.dwp.predict, "dwp", parse_predict_mode);
        read(d, "predict_samples", c.dwp.predict_samples, "dwp");
    }
    if (j.contains("table")) {
        const auto& t = j["table"];
        only_keys(t, "table", {"methods", "train_sizes", "seeds", "test_size"});
        if (t.contains("methods")) {
            std::vector<std::string> names;
            read(t, "methods", names, "table");
            c.table.methods.clear();
            for (const auto& n : names) {
                try {
                    c.table.methods.push_back(parse_method(n));
                } catch (const std::invalid_argument& e) {
                    throw ConfigError(std::string("table.methods: ") + e.what());
                }
            }
        }
        read(t, "train_sizes", c.table.train_sizes, "table");
        read(t, "seeds", c.table.seeds, "table");
        read(t, "test_size", c.table.test_size, "table");
    }
    c.validate();
    return c;
}

MasterConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrc::io_error, "cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

}  // namespace dwp
