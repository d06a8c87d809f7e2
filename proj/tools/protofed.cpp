#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protofed/experiment.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitRuntime = 4;

struct Overrides {
    std::string alpha, rounds, seed, strategies, out;
};

void apply_overrides(protofed::ExperimentConfig& cfg, const Overrides& o) {
    if (!o.alpha.empty()) protofed::apply_config_entry(cfg, "alpha", o.alpha);
    if (!o.rounds.empty()) protofed::apply_config_entry(cfg, "rounds", o.rounds);
    if (!o.seed.empty()) protofed::apply_config_entry(cfg, "seed", o.seed);
    if (!o.strategies.empty()) protofed::apply_config_entry(cfg, "strategies", o.strategies);
    if (!o.out.empty()) protofed::apply_config_entry(cfg, "out_dir", o.out);
}

int cmd_run(const std::string& config_path, const Overrides& o) {
    protofed::ExperimentConfig cfg = protofed::parse_config(config_path);
    apply_overrides(cfg, o);
    cfg.validate();
    protofed::preflight_output_dir(cfg.out_dir);

    const protofed::RunOutput out = protofed::run_experiment(cfg);
    protofed::emit_outputs(out, cfg.out_dir);

    for (const protofed::SeedRun& run : out.runs) {
        if (!run.missing_classes.empty()) {
            std::string classes;
            for (int c : run.missing_classes) {
                if (!classes.empty()) classes += ", ";
                classes += std::to_string(c);
            }
            std::fprintf(stderr,
                         "warning: seed %llu: no client holds class(es) %s; their test samples count as errors\n",
                         static_cast<unsigned long long>(run.seed), classes.c_str());
        }
        const auto& fin = run.summary["final"];
        std::string line = "seed " + std::to_string(run.seed) + ":";
        for (const char* name : {"local", "fedavg", "protofed"}) {
            if (fin.contains(name)) {
                char buf[48];
                std::snprintf(buf, sizeof buf, " %s %.4f", name, fin[name].get<double>());
                line += buf;
            }
        }
        std::printf("%s\n", line.c_str());
    }
    std::printf("wrote %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_partition_stats(const std::string& config_path) {
    protofed::ExperimentConfig cfg = protofed::parse_config(config_path);
    cfg.validate();
    const protofed::PartitionStats stats = protofed::partition_stats(cfg);

    std::printf("clients %zu, classes %d, hash %s\n", stats.shards.size(), stats.class_count,
                protofed::detail::hex64(stats.partition_hash).c_str());
    std::printf("%-7s %-6s", "client", "size");
    for (int c = 0; c < stats.class_count; ++c) std::printf(" %5d", c);
    std::printf("\n");
    for (const protofed::ClientShard& s : stats.shards) {
        std::printf("%-7d %-6zu", s.client_id, s.size());
        for (int c = 0; c < stats.class_count; ++c) {
            const std::size_t n = c < static_cast<int>(s.class_counts.size()) ? s.class_counts[c] : 0;
            std::printf(" %5zu", n);
        }
        std::printf("\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with prototype-based inference"};
    app.require_subcommand(1);

    std::string run_config;
    Overrides o;
    CLI::App* run = app.add_subcommand("run", "Run an experiment");
    run->add_option("--config", run_config, "Config file (key = value lines)")->required();
    run->add_option("--alpha", o.alpha, "Dirichlet concentration override");
    run->add_option("--rounds", o.rounds, "Global round count override");
    run->add_option("--seed", o.seed, "Seed override (replaces any seed list)");
    run->add_option("--strategies", o.strategies, "Comma list: local,fedavg,protofed");
    run->add_option("--out", o.out, "Output directory override");

    std::string stats_config;
    CLI::App* stats = app.add_subcommand("partition-stats", "Print per-client class histograms");
    stats->add_option("--config", stats_config, "Config file (key = value lines)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    try {
        if (run->parsed()) return cmd_run(run_config, o);
        return cmd_partition_stats(stats_config);
    } catch (const protofed::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    } catch (const protofed::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}
