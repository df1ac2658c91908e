#include "dwp/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "dwp/checkpoint.hpp"
#include "dwp/io_error.hpp"

#ifndef DWP_VERSION
#define DWP_VERSION "unknown"
#endif

namespace dwp {

namespace fs = std::filesystem;

const char* version_string() { return DWP_VERSION; }

namespace {

std::string numbered(const std::string& prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*d", width, i);
    return prefix + buf;
}

void require_exists(const fs::path& p) {
    if (!fs::exists(p)) throw MissingArtifactError(p);
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const char* display_name(Method m) {
    switch (m) {
        case Method::dwp: return "UNet-DWP";
        case Method::pr: return "UNet-PR";
        case Method::prf: return "UNet-PRf";
        case Method::ri: return "UNet-RI";
    }
    return "?";
}

}  // namespace

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError(FormatErrc::io_error, "cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

nlohmann::json run_manifest(const MasterConfig& cfg, const std::string& command, const nlohmann::json& extra) {
    nlohmann::json m = {{"command", command},
                        {"version", version_string()},
                        {"seed", cfg.seed},
                        {"table_seeds", cfg.table.seeds},
                        {"config", to_json(cfg)}};
    if (extra.is_object()) {
        for (const auto& [k, v] : extra.items()) m[k] = v;
    }
    return m;
}

void generate_dataset(const fs::path& dir, std::uint64_t seed, const Dims& dims, int source_volumes, int target_volumes) {
    fs::create_directories(dir);
    for (const auto& [domain, count] : {std::pair{Domain::source, source_volumes}, std::pair{Domain::target, target_volumes}}) {
        for (int i = 0; i < count; ++i) {
            const std::string id = numbered(std::string(to_string(domain)) + "_", i, 3);
            write_volume(gen_volume(domain, dims, seed, id), dir / (id + ".mvol"));
        }
    }
}

std::vector<Volume> load_domain(const fs::path& dir, Domain domain) {
    require_exists(dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".mvol") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Volume> out;
    for (const auto& f : files) {
        Volume v = read_volume(f);
        if (v.domain == domain) out.push_back(std::move(v));
    }
    std::sort(out.begin(), out.end(), [](const Volume& a, const Volume& b) { return a.id < b.id; });
    if (out.empty()) throw MissingArtifactError(dir / (std::string(to_string(domain)) + "_*.mvol"));
    return out;
}

std::vector<const Volume*> pointers(const std::vector<Volume>& vs) {
    std::vector<const Volume*> out;
    for (const auto& v : vs) out.push_back(&v);
    return out;
}

SourceTrainResult run_train_source(const MasterConfig& cfg, const fs::path& data_dir, const fs::path& checkpoint,
                                   const fs::path& snapshot_dir) {
    const auto source = load_domain(data_dir, Domain::source);
    Rng rng = substream(cfg.seed, "source-train");
    SourceTrainResult r = train_source(cfg.unet, pointers(source), cfg.source.schedule(), cfg.source.train, rng);
    if (fs::exists(snapshot_dir)) {
        for (const auto& e : fs::directory_iterator(snapshot_dir)) {
            if (e.path().extension() == ".ckpt") fs::remove(e.path());
        }
    }
    for (const auto& s : r.snapshots) write_checkpoint(s.params, snapshot_dir / (numbered("epoch_", s.epoch, 4) + ".ckpt"));
    write_checkpoint(r.final_params, checkpoint);
    return r;
}

KernelDataset run_harvest(const fs::path& snapshot_dir, GroupingMode mode, const fs::path& out) {
    require_exists(snapshot_dir);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(snapshot_dir)) {
        const auto name = e.path().filename().string();
        if (e.path().extension() == ".ckpt" && name.rfind("epoch_", 0) == 0) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw MissingArtifactError(snapshot_dir / "epoch_*.ckpt");
    std::vector<Snapshot> snaps;
    for (const auto& f : files) {
        const std::string stem = f.stem().string();
        snaps.push_back({std::stoi(stem.substr(6)), read_checkpoint(f)});
    }
    return export_kernel_dataset(snaps, mode, out);
}

PriorTrainReport run_train_prior(const MasterConfig& cfg, const fs::path& kernels, const fs::path& out) {
    require_exists(kernels);
    const KernelDataset ds = read_kernel_dataset(kernels);
    PriorTrainReport report;
    report.bank.mode = ds.mode;
    for (const auto& g : ds.groups) {
        Rng rng = substream(cfg.seed, "prior/" + g.key);
        auto r = train_vae(g, cfg.prior.vae, rng);
        report.bank.priors.push_back(std::move(r.prior));
        report.epoch_bounds.push_back(std::move(r.epoch_bounds));
    }
    write_prior_bank(report.bank, out);
    return report;
}

void MethodSpec::validate() const {
    switch (method) {
        case Method::ri:
            if (checkpoint) throw std::invalid_argument("ri must not use a checkpoint");
            break;
        case Method::pr:
            if (!checkpoint) throw std::invalid_argument("pr needs a source checkpoint");
            break;
        case Method::prf:
            if (!checkpoint || freeze.empty()) throw std::invalid_argument("prf needs a source checkpoint and a freeze set");
            break;
        case Method::dwp:
            if (!prior) throw std::invalid_argument("dwp needs a prior");
            break;
    }
    if (method != Method::prf && !freeze.empty()) throw std::invalid_argument("only prf freezes tensors");
}

std::set<std::string> prf_freeze_set(const UNetConfig& cfg) {
    std::set<std::string> out;
    for (const auto& l : unet_conv_layers(cfg)) {
        const bool trainable = l.name.rfind("enc0.", 0) == 0 || l.name.rfind("dec0.", 0) == 0 || l.name == "out";
        if (trainable) continue;
        out.insert(l.name + ".weight");
        out.insert(l.name + ".bias");
    }
    return out;
}

MethodSpec method_spec(Method m, const UNetConfig& cfg, const Workspace& ws) {
    MethodSpec s;
    s.method = m;
    if (m == Method::pr || m == Method::prf) s.checkpoint = ws.source_checkpoint();
    if (m == Method::prf) s.freeze = prf_freeze_set(cfg);
    if (m == Method::dwp) s.prior = ws.prior();
    return s;
}

std::string to_csv_line(const MetricsRecord& r) {
    return r.method + "," + std::to_string(r.train_size) + "," + std::to_string(r.seed) + "," + fmt17(r.dice) + "," +
           fmt17(r.iou) + "," + fmt17(r.wall_seconds);
}

std::vector<MetricsRecord> read_metrics_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrc::io_error, "cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw FormatError(FormatErrc::bad_header, "'" + path.string() + "' does not start with the metrics header");
    }
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 6) throw FormatError(FormatErrc::bad_payload, "'" + path.string() + "': bad row '" + line + "'");
        try {
            out.push_back({f[0], std::stoi(f[1]), std::stoull(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
        } catch (const std::exception&) {
            throw FormatError(FormatErrc::bad_payload, "'" + path.string() + "': bad row '" + line + "'");
        }
    }
    return out;
}

void append_metrics_csv(const fs::path& path, const MetricsRecord& r) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) throw FormatError(FormatErrc::io_error, "cannot write '" + path.string() + "'");
    if (fresh) out << kMetricsHeader << "\n";
    out << to_csv_line(r) << "\n";
}

SplitSpec split_for(const MasterConfig& cfg, const std::vector<Volume>& target_pool, int train_size, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& v : target_pool) ids.push_back(v.id);
    return make_splits(ids, train_size, cfg.table.test_size, derive_seed(cfg.seed, "split/" + std::to_string(seed)));
}

MetricsRecord run_method(const MethodSpec& m, const SplitSpec& split, const MasterConfig& cfg,
                         const std::vector<Volume>& target_pool, int train_size) {
    m.validate();
    if (m.checkpoint) require_exists(*m.checkpoint);
    if (m.prior) {
        require_exists(*m.prior);
        require_exists(m.prior->string() + ".json");
    }
    std::map<std::string, const Volume*> by_id;
    for (const auto& v : target_pool) by_id[v.id] = &v;
    auto pick = [&](const std::vector<std::string>& ids) {
        std::vector<const Volume*> out;
        for (const auto& id : ids) {
            const auto it = by_id.find(id);
            if (it == by_id.end()) throw std::invalid_argument("split refers to unknown volume '" + id + "'");
            out.push_back(it->second);
        }
        return out;
    };
    const auto train = pick(split.train_ids);
    const auto test = pick(split.test_ids);

    const auto t0 = std::chrono::steady_clock::now();
    const std::string cell = std::to_string(train_size) + "/" + std::to_string(split.seed);
    Rng init_rng = substream(cfg.seed, "init/" + cell);
    Rng train_rng = substream(cfg.seed, std::string("train/") + to_string(m.method) + "/" + cell);
    EvalResult eval;
    if (m.method == Method::dwp) {
        const PriorBank<float> bank = read_prior_bank(*m.prior);
        const auto q0 = init_posterior<float>(cfg.unet, init_rng);
        const auto r = train_dwp(train, cfg.unet, bank, cfg.dwp.vi, train_rng, &q0);
        Rng pred_rng = substream(cfg.seed, "predict/" + cell);
        std::vector<std::vector<float>> probs;
        for (const Volume* v : test) probs.push_back(predict(cfg.unet, r.posterior, *v, cfg.dwp.predict, cfg.dwp.predict_samples, &pred_rng));
        eval = evaluate_probabilities(probs, test);
    } else {
        const ParamSet<float> init =
            m.checkpoint ? unet_from_checkpoint(cfg.unet, *m.checkpoint) : build_unet<float>(cfg.unet, init_rng);
        const auto r = train_plain(cfg.unet, train, init, m.freeze, cfg.target, train_rng);
        eval = evaluate(cfg.unet, r.params, test);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {to_string(m.method), train_size, split.seed, eval.dice, eval.iou, secs};
}

std::vector<TableCell> summarize(const std::vector<MetricsRecord>& records, const TableConfig& table) {
    std::vector<TableCell> cells;
    for (int size : table.train_sizes) {
        for (Method m : table.methods) {
            TableCell c;
            c.train_size = size;
            c.method = m;
            std::vector<double> iou, dice;
            for (const auto& r : records) {
                if (r.train_size == size && r.method == to_string(m)) {
                    iou.push_back(r.iou);
                    dice.push_back(r.dice);
                }
            }
            c.n = iou.size();
            auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
                if (v.empty()) return;
                double s = 0.0;
                for (double x : v) s += x;
                mean = s / static_cast<double>(v.size());
                double ss = 0.0;
                for (double x : v) ss += (x - mean) * (x - mean);
                sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
            };
            stats(iou, c.mean_iou, c.std_iou);
            stats(dice, c.mean_dice, c.std_dice);
            cells.push_back(c);
        }
    }
    return cells;
}

std::string format_markdown_table(const std::vector<TableCell>& cells, const TableConfig& table) {
    std::ostringstream out;
    out << "| Train size |";
    for (Method m : table.methods) out << " " << display_name(m) << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < table.methods.size(); ++i) out << "---|";
    out << "\n";
    for (int size : table.train_sizes) {
        out << "| " << size << " |";
        for (Method m : table.methods) {
            const auto it = std::find_if(cells.begin(), cells.end(),
                                         [&](const TableCell& c) { return c.train_size == size && c.method == m; });
            if (it == cells.end() || it->n == 0) {
                out << " missing |";
            } else {
                char buf[64];
                std::snprintf(buf, sizeof buf, " %.2f (%.2f) |", it->mean_iou, it->std_iou);
                out << buf;
            }
        }
        out << "\n";
    }
    return out.str();
}

void render_kernel_grid(const std::vector<KernelSlice>& kernels, const fs::path& path, int columns) {
    if (kernels.empty()) throw std::invalid_argument("render_kernel_grid: no kernels");
    if (columns < 1) throw std::invalid_argument("render_kernel_grid: columns must be >= 1");
    const std::size_t cols = std::min<std::size_t>(static_cast<std::size_t>(columns), kernels.size());
    const std::size_t rows = (kernels.size() + cols - 1) / cols;
    constexpr std::size_t kw = 3 * 3 + 2, kh = 3;
    const std::size_t width = cols * kw + (cols - 1), height = rows * kh + (rows - 1);
    std::string pixels(width * height, static_cast<char>(0));
    for (std::size_t n = 0; n < kernels.size(); ++n) {
        const auto& v = kernels[n].values;
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        const float range = *hi - *lo;
        const std::size_t x0 = (n % cols) * (kw + 1), y0 = (n / cols) * (kh + 1);
        for (std::size_t d = 0; d < 3; ++d) {
            for (std::size_t h = 0; h < 3; ++h) {
                for (std::size_t w = 0; w < 3; ++w) {
                    const float x = v[(d * 3 + h) * 3 + w];
                    const int g = range > 0.0f ? static_cast<int>(std::lround(255.0f * (x - *lo) / range)) : 128;
                    pixels[(y0 + h) * width + x0 + d * 4 + w] = static_cast<char>(std::clamp(g, 0, 255));
                }
            }
        }
    }
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(FormatErrc::io_error, "cannot write '" + path.string() + "'");
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw FormatError(FormatErrc::io_error, "write failed for '" + path.string() + "'");
}

TableReport run_table(const MasterConfig& cfg, const fs::path& out_dir, const std::function<void(const std::string&)>& log) {
    cfg.validate();
    auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    const Workspace ws{out_dir};
    fs::create_directories(out_dir);
    write_json(out_dir / "manifest.json", run_manifest(cfg, "table"));

    const bool have_data = fs::exists(ws.data_dir()) && !fs::is_empty(ws.data_dir());
    if (!have_data) {
        say("generating data");
        generate_dataset(ws.data_dir(), cfg.seed, cfg.data.dims, cfg.data.source_volumes, cfg.data.target_volumes);
    }
    if (!fs::exists(ws.source_checkpoint())) {
        say("training on the source domain");
        run_train_source(cfg, ws.data_dir(), ws.source_checkpoint(), ws.snapshot_dir());
    }
    if (!fs::exists(ws.kernels())) {
        say("harvesting kernels");
        run_harvest(ws.snapshot_dir(), cfg.prior.grouping, ws.kernels());
    }
    if (!fs::exists(ws.prior()) || !fs::exists(ws.prior().string() + ".json")) {
        say("training the kernel prior");
        const auto rep = run_train_prior(cfg, ws.kernels(), ws.prior());
        nlohmann::json bounds = nlohmann::json::object();
        for (std::size_t i = 0; i < rep.bank.priors.size(); ++i) bounds[rep.bank.priors[i].group_key] = rep.epoch_bounds[i];
        write_json(out_dir / "prior_bounds.json", bounds);
    }

    {
        const auto source_kernels = snapshot_kernels(unet_from_checkpoint(cfg.unet, ws.source_checkpoint()), cfg.source.train.epochs);
        const std::vector<KernelSlice> first(source_kernels.begin(),
                                             source_kernels.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(64, source_kernels.size())));
        render_kernel_grid(first, out_dir / "source_kernels.pgm");
        const auto bank = read_prior_bank(ws.prior());
        Rng rng = substream(cfg.seed, "figure");
        render_kernel_grid(sample_kernels(bank.priors.front(), 64, rng), out_dir / "prior_samples.pgm");
    }

    const auto pool = load_domain(ws.data_dir(), Domain::target);
    TableReport report;
    const fs::path csv = out_dir / "metrics.csv";
    if (fs::exists(csv)) report.records = read_metrics_csv(csv);
    auto done = [&](Method m, int size, std::uint64_t seed) {
        return std::any_of(report.records.begin(), report.records.end(), [&](const MetricsRecord& r) {
            return r.method == to_string(m) && r.train_size == size && r.seed == seed;
        });
    };
    for (int size : cfg.table.train_sizes) {
        for (std::uint64_t seed : cfg.table.seeds) {
            SplitSpec split = split_for(cfg, pool, size, seed);
            split.seed = seed;
            for (Method m : cfg.table.methods) {
                const std::string cell = std::string(to_string(m)) + "/" + std::to_string(size) + "/" + std::to_string(seed);
                if (done(m, size, seed)) {
                    say(cell + ": already recorded");
                    continue;
                }
                try {
                    const MetricsRecord r = run_method(method_spec(m, cfg.unet, ws), split, cfg, pool, size);
                    append_metrics_csv(csv, r);
                    report.records.push_back(r);
                    say(cell + ": iou " + fmt17(r.iou) + " dice " + fmt17(r.dice) + " in " + fmt17(r.wall_seconds) + " s");
                } catch (const std::exception& e) {
                    report.failures.push_back(cell + ": " + e.what());
                    say(cell + ": FAILED " + e.what());
                }
            }
        }
    }

    report.cells = summarize(report.records, cfg.table);
    {
        std::ofstream out(out_dir / "table.csv");
        out << "train_size,method,n,mean_iou,std_iou,mean_dice,std_dice\n";
        for (const auto& c : report.cells) {
            out << c.train_size << "," << to_string(c.method) << "," << c.n << "," << fmt17(c.mean_iou) << ","
                << fmt17(c.std_iou) << "," << fmt17(c.mean_dice) << "," << fmt17(c.std_dice) << "\n";
        }
    }
    {
        std::ofstream out(out_dir / "table.md");
        out << format_markdown_table(report.cells, cfg.table);
        if (!report.failures.empty()) {
            out << "\nFailed cells:\n";
            for (const auto& f : report.failures) out << "- " << f << "\n";
        }
    }
    return report;
}

}  // namespace dwp
