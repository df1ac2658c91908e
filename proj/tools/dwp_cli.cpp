#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <string>

#include "dwp/experiments.hpp"
#include "dwp/io_error.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 2, kConfig = 3, kMissing = 4, kFormat = 5, kRuntime = 6 };

dwp::MasterConfig config_or_default(const std::string& path) {
    return path.empty() ? dwp::MasterConfig{} : dwp::load_config(path);
}

void log_line(const std::string& s) { std::cerr << "[dwp] " << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kernel-prior transfer for volumetric segmentation"};
    app.require_subcommand(1);

    std::string config_path, out, data_dir, snapshots, mode = "shared", kernels, prior, method, work = "work", group;
    std::uint64_t seed = 1;
    int volumes = -1, train_size = 5, n = 64;

    auto* gen = app.add_subcommand("gen-data", "Generate source and target volumes");
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--seed", seed, "Master seed")->required();
    gen->add_option("--volumes", volumes, "Volumes per domain (default: config pool sizes)")->check(CLI::PositiveNumber);
    gen->add_option("--config", config_path, "Config JSON (volume dims and pool sizes)");

    auto* src = app.add_subcommand("train-source", "Train on the source domain and snapshot kernels");
    src->add_option("--data", data_dir, "Directory of .mvol files")->required();
    src->add_option("--out", out, "Final checkpoint path")->required();
    src->add_option("--config", config_path, "Config JSON");
    src->add_option("--snapshots", snapshots, "Snapshot directory (default: <out>.snapshots)");

    auto* harvest = app.add_subcommand("harvest", "Export kernel slices from snapshots");
    harvest->add_option("--snapshots", snapshots, "Snapshot directory")->required();
    harvest->add_option("--mode", mode, "Grouping")->check(CLI::IsMember({"shared", "per_layer"}));
    harvest->add_option("--out", out, "KDS1 output path")->required();

    auto* tprior = app.add_subcommand("train-prior", "Fit the kernel VAE prior");
    tprior->add_option("--kernels", kernels, "KDS1 kernel dataset")->required();
    tprior->add_option("--out", out, "Prior output path")->required();
    tprior->add_option("--config", config_path, "Config JSON");

    auto* run = app.add_subcommand("run", "Train and evaluate one method on one split");
    run->add_option("--method", method, "dwp|pr|prf|ri")->required()->check(CLI::IsMember({"dwp", "pr", "prf", "ri"}));
    run->add_option("--train-size", train_size, "5, 10, 15 or 20")->required()->check(CLI::IsMember({5, 10, 15, 20}));
    run->add_option("--seed", seed, "Split seed")->required();
    run->add_option("--out", out, "Metrics CSV to append to")->required();
    run->add_option("--config", config_path, "Config JSON");
    run->add_option("--work", work, "Workspace with data/, source.ckpt and prior.bin");

    auto* table = app.add_subcommand("table", "Run the full benchmark table");
    table->add_option("--config", config_path, "Config JSON")->required();
    table->add_option("--out", out, "Output directory")->required();

    auto* sample = app.add_subcommand("sample-prior", "Render prior samples as a PGM grid");
    sample->add_option("--prior", prior, "Prior path")->required();
    sample->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
    sample->add_option("--out", out, "PGM output path")->required();
    sample->add_option("--seed", seed, "Sampling seed");
    sample->add_option("--group", group, "Group key (default: first prior)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) {
            const auto cfg = config_or_default(config_path);
            const int ns = volumes > 0 ? volumes : cfg.data.source_volumes;
            const int nt = volumes > 0 ? volumes : cfg.data.target_volumes;
            dwp::generate_dataset(out, seed, cfg.data.dims, ns, nt);
            auto manifest = dwp::run_manifest(cfg, "gen-data", {{"data_seed", seed}, {"source_volumes", ns}, {"target_volumes", nt}});
            dwp::write_json(fs::path(out) / "manifest.json", manifest);
        } else if (*src) {
            const auto cfg = config_or_default(config_path);
            const fs::path snap = snapshots.empty() ? fs::path(out + ".snapshots") : fs::path(snapshots);
            const auto r = dwp::run_train_source(cfg, data_dir, out, snap);
            dwp::write_json(out + ".manifest.json",
                            dwp::run_manifest(cfg, "train-source", {{"epoch_losses", r.epoch_losses}, {"snapshots", snap.string()}}));
            log_line("final training loss " + std::to_string(r.epoch_losses.back()));
        } else if (*harvest) {
            const auto ds = dwp::run_harvest(snapshots, dwp::parse_grouping(mode), out);
            dwp::write_json(out + ".manifest.json", {{"command", "harvest"},
                                                     {"version", dwp::version_string()},
                                                     {"snapshots", snapshots},
                                                     {"mode", mode},
                                                     {"slices", ds.total_slices()}});
            log_line("exported " + std::to_string(ds.total_slices()) + " slices in " + std::to_string(ds.groups.size()) + " group(s)");
        } else if (*tprior) {
            const auto cfg = config_or_default(config_path);
            const auto rep = dwp::run_train_prior(cfg, kernels, out);
            nlohmann::json bounds = nlohmann::json::object();
            for (std::size_t i = 0; i < rep.bank.priors.size(); ++i) bounds[rep.bank.priors[i].group_key] = rep.epoch_bounds[i];
            dwp::write_json(out + ".manifest.json", dwp::run_manifest(cfg, "train-prior", {{"epoch_bounds", bounds}}));
        } else if (*run) {
            const auto cfg = config_or_default(config_path);
            const dwp::Workspace ws{work};
            const auto pool = dwp::load_domain(ws.data_dir(), dwp::Domain::target);
            auto split = dwp::split_for(cfg, pool, train_size, seed);
            split.seed = seed;
            const auto spec = dwp::method_spec(dwp::parse_method(method), cfg.unet, ws);
            const auto rec = dwp::run_method(spec, split, cfg, pool, train_size);
            dwp::append_metrics_csv(out, rec);
            dwp::write_json(out + ".manifest.json", dwp::run_manifest(cfg, "run", {{"method", method}, {"train_size", train_size}, {"split_seed", seed}, {"split", split}}));
            std::cout << dwp::to_csv_line(rec) << "\n";
        } else if (*table) {
            const auto cfg = dwp::load_config(config_path);
            const auto rep = dwp::run_table(cfg, out, log_line);
            std::cout << dwp::format_markdown_table(rep.cells, cfg.table);
            if (!rep.failures.empty()) {
                std::cerr << rep.failures.size() << " cell(s) failed\n";
                return kRuntime;
            }
        } else if (*sample) {
            const auto bank = dwp::read_prior_bank(prior);
            const auto& p = group.empty() ? bank.priors.front() : bank.for_layer(group);
            dwp::Rng rng = dwp::substream(seed, "sample-prior");
            dwp::render_kernel_grid(dwp::sample_kernels(p, static_cast<std::size_t>(n), rng), out);
            dwp::write_json(out + ".manifest.json", {{"command", "sample-prior"},
                                                     {"version", dwp::version_string()},
                                                     {"prior", prior},
                                                     {"group", p.group_key},
                                                     {"n", n},
                                                     {"seed", seed}});
        }
    } catch (const dwp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const dwp::MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kMissing;
    } catch (const dwp::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == dwp::FormatErrc::io_error ? kMissing : kFormat;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kOk;
}
