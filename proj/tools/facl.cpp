#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "facl/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Few-shot class-incremental learning with feature augmentation"};
    app.require_subcommand(1);

    std::string config_path, out_dir, checkpoint;
    std::optional<std::uint64_t> seed;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value config file")->required();
        sub->add_option("--out", out_dir, "output directory (overrides out_dir)");
        sub->add_option("--seed", seed, "seed (overrides the config)");
    };
    for (const char* name : {"train", "ablate", "sweep-delta"}) add_common(app.add_subcommand(name));
    CLI::App* exp = app.add_subcommand("export-embeddings", "write label,session,f0.. for every store row");
    add_common(exp);
    exp->add_option("--checkpoint", checkpoint, "checkpoint to read (default: <out>/checkpoint.bin)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "facl: usage error: " << facl::one_line(e.what()) << "\n";
        return facl::kExitConfig;
    }

    return facl::guarded([&] {
        facl::RunConfig cfg = facl::load_config(config_path);
        if (seed) cfg.protocol.seed = *seed;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        cfg.validate();
        facl::run_experiment(facl::parse_command(app.get_subcommands().front()->get_name()), cfg, checkpoint);
    });
}
