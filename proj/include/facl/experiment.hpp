#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "facl/config.hpp"
#include "facl/data.hpp"
#include "facl/encoder.hpp"
#include "facl/error.hpp"
#include "facl/protocol.hpp"
#include "facl/report.hpp"

namespace facl {

// Process exit statuses of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

enum class Command { Train, Ablate, SweepDelta, ExportEmbeddings };

inline Command parse_command(const std::string& s) {
    if (s == "train") return Command::Train;
    if (s == "ablate") return Command::Ablate;
    if (s == "sweep-delta") return Command::SweepDelta;
    if (s == "export-embeddings") return Command::ExportEmbeddings;
    throw ConfigError("unknown command '" + s + "'");
}

inline std::string to_string(Command c) {
    switch (c) {
        case Command::Train: return "train";
        case Command::Ablate: return "ablate";
        case Command::SweepDelta: return "sweep-delta";
        case Command::ExportEmbeddings: break;
    }
    return "export-embeddings";
}

inline SampleStore load_or_generate(const RunConfig& cfg, std::uint64_t seed) {
    return cfg.store.empty() ? gen_synthetic(cfg.data, seed, cfg.separation) : load_store(cfg.store);
}

inline std::vector<Session> build_sessions(const RunConfig& cfg, std::uint64_t seed) {
    return split_sessions(load_or_generate(cfg, seed), cfg.data, seed);
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw Error("cannot write " + path.string());
}

inline void write_run_artifacts(const std::filesystem::path& dir, const RunResult& run) {
    write_text(dir / "metrics.json", metrics_to_json(run.metrics));
    write_text(dir / "metrics.csv", metrics_to_csv(run.metrics));
    write_text(dir / "confusion.csv", confusion_to_csv(run.final_eval));
    std::string loss = "epoch,loss\n";
    for (std::size_t e = 0; e < run.epoch_loss.size(); ++e) loss += std::to_string(e) + "," + format_double(run.epoch_loss[e]) + "\n";
    write_text(dir / "train_loss.csv", loss);
    save_checkpoint(run.params, (dir / "checkpoint.bin").string());
}

}  // namespace detail

/// Runs one command with a fully resolved config and writes its artifacts to
/// cfg.out_dir. `checkpoint` is only read by export-embeddings (default:
/// <out_dir>/checkpoint.bin).
inline void run_experiment(Command cmd, const RunConfig& cfg, const std::string& checkpoint = {}) {
    cfg.validate();
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    const char* manifest = cmd == Command::ExportEmbeddings ? "embeddings_manifest.cfg" : "manifest.cfg";
    detail::write_text(dir / manifest, "# facl " + to_string(cmd) + "\n" + config_to_text(cfg));
    const std::uint64_t seed = cfg.protocol.seed;

    switch (cmd) {
        case Command::Train: {
            detail::write_run_artifacts(dir, run_protocol(build_sessions(cfg, seed), cfg.protocol));
            return;
        }
        case Command::Ablate: {
            std::vector<AblationVariant> variants = cfg.ablate_variants;
            if (std::find(variants.begin(), variants.end(), cfg.protocol.variant) == variants.end()) {
                variants.push_back(cfg.protocol.variant);
            }
            const auto rows = run_ablation(build_sessions(cfg, seed), cfg.protocol, variants);
            detail::write_text(dir / "ablation.csv", ablation_to_csv(rows));
            for (const AblationRow& r : rows)
                if (r.variant == cfg.protocol.variant) detail::write_run_artifacts(dir, r.run);
            return;
        }
        case Command::SweepDelta: {
            const std::vector<std::uint64_t> seeds = cfg.sweep_seeds.empty() ? std::vector<std::uint64_t>{seed} : cfg.sweep_seeds;
            // The reference run for metrics.json: first seed at the configured
            // delta, or at the first swept delta when that one is not swept.
            const auto& ds = cfg.sweep_deltas;
            const double ref_delta =
                std::find(ds.begin(), ds.end(), cfg.protocol.delta) != ds.end() ? cfg.protocol.delta : ds.front();
            std::optional<RunResult> ref;
            const auto rows = sweep_delta(
                ds, seeds, cfg.protocol, [&](std::uint64_t s) { return build_sessions(cfg, s); },
                [&](double d, std::uint64_t s, const RunResult& run) {
                    if (!ref && d == ref_delta && s == seeds.front()) ref = run;
                });
            detail::write_text(dir / "sweep.csv", sweep_to_csv(rows, seeds));
            detail::write_run_artifacts(dir, *ref);
            return;
        }
        case Command::ExportEmbeddings: {
            const std::string path = checkpoint.empty() ? (dir / "checkpoint.bin").string() : checkpoint;
            const ModelParams params = load_checkpoint(path);
            std::ofstream out(dir / "embeddings.csv", std::ios::binary);
            export_embeddings(params, load_or_generate(cfg, seed), cfg.data, out);
            if (!out) throw Error("cannot write " + (dir / "embeddings.csv").string());
            return;
        }
    }
}

inline std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

/// Maps exceptions to exit statuses with a single-line diagnostic on `err`.
template <class F>
int guarded(F&& body, std::ostream& err = std::cerr) {
    try {
        body();
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "facl: config error: " << one_line(e.what()) << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "facl: runtime error: " << one_line(e.what()) << "\n";
        return kExitRuntime;
    }
}

}  // namespace facl
