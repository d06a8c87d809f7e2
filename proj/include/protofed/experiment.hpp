#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protofed/config.hpp"
#include "protofed/idx.hpp"
#include "protofed/metrics.hpp"

namespace protofed {

namespace detail {

// Independent seed streams hung off one run seed.
inline constexpr std::uint64_t kStreamPool = 1;
inline constexpr std::uint64_t kStreamPartition = 2;
inline constexpr std::uint64_t kStreamInit = 3;
inline constexpr std::uint64_t kStreamTrain = 4;

struct Fnv1a {
    std::uint64_t h = 1469598103934665603ULL;

    void feed(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    }

    void feed_u64(std::uint64_t v) {
        std::uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
        feed(b, 8);
    }
};

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t hash_partition(const std::vector<ClientShard>& shards) {
    Fnv1a f;
    for (const ClientShard& s : shards) {
        f.feed_u64(static_cast<std::uint64_t>(s.client_id));
        f.feed_u64(s.indices.size());
        for (std::size_t idx : s.indices) f.feed_u64(idx);
    }
    return f.h;
}

inline std::uint64_t hash_params(const ModelParams<float>& m) {
    Fnv1a f;
    for (const auto* t : m.tensors()) {
        for (float v : t->data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            f.feed(&bits, 4);
        }
    }
    return f.h;
}

}  // namespace detail

struct SeedRun {
    std::uint64_t seed = 0;
    std::vector<RoundRecord> curves;
    nlohmann::json summary;
    std::optional<GlobalPrototypeSet> prototypes;
    std::vector<int> missing_classes;
};

struct RunOutput {
    ExperimentConfig cfg;
    std::vector<SeedRun> runs;
    nlohmann::json summary;  // aggregate over seeds; equals runs[0].summary for a single seed
};

namespace detail {

inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["dataset"] = cfg.dataset;
    j["train_images"] = cfg.train_images;
    j["train_labels"] = cfg.train_labels;
    j["test_images"] = cfg.test_images;
    j["test_labels"] = cfg.test_labels;
    j["n_clients"] = cfg.n_clients;
    j["alpha"] = cfg.alpha;
    j["pool_size"] = cfg.pool_size;
    j["batch_size"] = cfg.batch_size;
    j["local_epochs"] = cfg.local_epochs;
    j["lr"] = cfg.lr;
    j["rounds"] = cfg.rounds;
    j["seeds"] = cfg.seeds;
    std::vector<std::string> names;
    for (Strategy s : cfg.strategies) names.emplace_back(strategy_name(s));
    j["strategies"] = names;
    j["out_dir"] = cfg.out_dir;
    j["eval_every"] = cfg.eval_every;
    j["timing"] = cfg.timing;
    return j;
}

inline ModelArch arch_for(const Dataset& train, const Dataset& test) {
    ModelArch arch = ModelArch::mnist_default();
    if (train.images.dim(1) != arch.in_ch || train.images.dim(2) != arch.in_h || train.images.dim(3) != arch.in_w)
        throw ValidationError("train_images", "expected 1x28x28 images");
    if (test.images.dim(1) != arch.in_ch || test.images.dim(2) != arch.in_h || test.images.dim(3) != arch.in_w)
        throw ValidationError("test_images", "expected 1x28x28 images");
    const int classes = std::max(train.class_count, test.class_count);
    arch.class_count = static_cast<std::size_t>(std::max(classes, 1));
    arch.validate();
    return arch;
}

inline SeedRun run_one_seed(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train,
                            const Dataset& test, const ModelArch& arch) {
    const auto t_start = std::chrono::steady_clock::now();
    auto elapsed = [&t_start] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    };

    const Dataset pool = subsample(train, cfg.pool_size, mix_seed(seed, kStreamPool));
    PartitionSpec pspec;
    pspec.n_clients = cfg.n_clients;
    pspec.alpha = cfg.alpha;
    pspec.pool_size = pool.size();
    pspec.seed = mix_seed(seed, kStreamPartition);
    const std::vector<ClientShard> shards =
        dirichlet_partition(pool.labels, static_cast<int>(arch.class_count), pspec);
    const ModelParams<float> init = init_params<float>(arch, mix_seed(seed, kStreamInit));
    const std::uint64_t train_seed = mix_seed(seed, kStreamTrain);

    const std::uint64_t partition_hash = hash_partition(shards);
    const std::uint64_t init_hash = hash_params(init);

    const bool want_local = cfg.has(Strategy::local);
    const bool want_fedavg = cfg.has(Strategy::fedavg);
    const bool want_proto = cfg.has(Strategy::protofed);
    const bool fed_schedule = want_fedavg || want_proto;

    auto make_clients = [&] {
        std::vector<ClientState> clients;
        clients.reserve(cfg.n_clients);
        for (std::size_t i = 0; i < cfg.n_clients; ++i) {
            ClientState c;
            c.client_id = static_cast<int>(i);
            c.shard = shards[i];
            c.params = init;
            c.pool = &pool;
            c.run_seed = train_seed;
            clients.push_back(std::move(c));
        }
        return clients;
    };

    std::vector<ClientState> fed_clients;
    std::vector<ClientState> local_clients;
    if (fed_schedule) fed_clients = make_clients();
    if (want_local) local_clients = make_clients();

    ServerState server{init, 0, std::nullopt};

    RoundConfig rcfg;
    rcfg.batch_size = cfg.batch_size;
    rcfg.local_epochs = cfg.local_epochs;
    rcfg.lr = static_cast<float>(cfg.lr);
    rcfg.total_rounds = cfg.rounds;
    rcfg.n_clients = cfg.n_clients;

    SeedRun run;
    run.seed = seed;

    TrafficLedger fedavg_ledger;
    TrafficLedger proto_ledger;
    std::size_t missing_samples = 0;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        const bool is_final = (t + 1 == cfg.rounds);
        try {
            if (fed_schedule) {
                const RoundTraffic tr = run_round(server, fed_clients, rcfg, is_final && want_proto);
                fedavg_ledger.add({tr.up_model, 0, tr.down_model, 0});
                RoundTraffic pr = tr;
                if (is_final && want_proto) {
                    // Redistribution so clients can run prototype inference:
                    // the aggregate model plus the global prototype set, to
                    // every client.
                    const std::size_t proto_bytes =
                        prototype_wire_bytes(server.prototypes->entries.size(), server.prototypes->dim);
                    pr.down_model += cfg.n_clients * bytes_of_params(server.params);
                    pr.down_proto += cfg.n_clients * proto_bytes;
                }
                proto_ledger.add(pr);
            }
            if (want_local) {
                for (ClientState& c : local_clients) c.round = t;
                std::vector<ModelParams<float>> stepped(local_clients.size(), ModelParams<float>(arch));
                parallel_for(local_clients.size(),
                             [&](std::size_t i) { stepped[i] = local_update(local_clients[i], local_clients[i].params, rcfg); });
                for (std::size_t i = 0; i < local_clients.size(); ++i)
                    local_clients[i].params = std::move(stepped[i]);
            }

            const bool eval_now = is_final || (cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0);
            if (!eval_now) continue;

            RoundRecord rec;
            rec.round = t + 1;
            if (want_local) rec.acc_local = evaluate_local_baseline(local_clients, test);
            if (want_fedavg) rec.acc_fedavg = evaluate_classifier(server.params, test);
            if (want_proto) {
                GlobalPrototypeSet globals;
                if (is_final) {
                    globals = *server.prototypes;
                } else {
                    // Evaluation-only snapshot from the current local models;
                    // nothing is charged to the ledger for these.
                    std::vector<LocalPrototypeSet> locals(fed_clients.size());
                    parallel_for(fed_clients.size(), [&](std::size_t i) {
                        locals[i] =
                            compute_local_prototypes(fed_clients[i].params, fed_clients[i].shard, pool);
                    });
                    globals = aggregate_global_prototypes(locals);
                }
                rec.acc_proto = evaluate_prototype(server.params, globals, test,
                                                   is_final ? &missing_samples : nullptr);
                if (is_final) {
                    run.prototypes = std::move(globals);
                    for (int j = 0; j < static_cast<int>(arch.class_count); ++j) {
                        if (!run.prototypes->entries.count(j)) run.missing_classes.push_back(j);
                    }
                }
            }
            const TrafficLedger& primary = want_proto ? proto_ledger : fedavg_ledger;
            if (fed_schedule) {
                rec.bytes_up = primary.up_through(t);
                rec.bytes_down = primary.down_through(t);
            }
            if (cfg.timing == "wall") rec.wall_s = elapsed();
            run.curves.push_back(rec);
        } catch (const Error& e) {
            throw Error("round " + std::to_string(t + 1) + ": " + e.what());
        }
    }

    nlohmann::json final_acc;
    nlohmann::json bytes;
    const RoundRecord& last = run.curves.back();
    if (want_local) {
        final_acc["local"] = last.acc_local;
        bytes["local"] = {{"up", 0}, {"down", 0}};
    }
    if (want_fedavg) {
        final_acc["fedavg"] = last.acc_fedavg;
        bytes["fedavg"] = {{"up", fedavg_ledger.total_up()}, {"down", fedavg_ledger.total_down()}};
    }
    if (want_proto) {
        final_acc["protofed"] = last.acc_proto;
        bytes["protofed"] = {{"up", proto_ledger.total_up()}, {"down", proto_ledger.total_down()}};
    }

    run.summary["seed"] = seed;
    run.summary["final"] = final_acc;
    run.summary["bytes"] = bytes;
    run.summary["partition_hash"] = hex64(partition_hash);
    run.summary["init_hash"] = hex64(init_hash);
    run.summary["rounds_recorded"] = run.curves.size();
    if (want_proto) {
        run.summary["missing_classes"] = run.missing_classes;
        run.summary["missing_class_samples"] = missing_samples;
    }
    run.summary["wall_seconds"] = elapsed();
    return run;
}

}  // namespace detail

// Full driver: load, then one independent run per seed over the shared
// datasets, plus a cross-seed summary.
inline RunOutput run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const Dataset train = load_idx(cfg.train_images, cfg.train_labels);
    const Dataset test = load_idx(cfg.test_images, cfg.test_labels);
    if (cfg.pool_size > train.size())
        throw ValidationError("pool_size", "exceeds training set size " + std::to_string(train.size()));
    const ModelArch arch = detail::arch_for(train, test);

    RunOutput out;
    out.cfg = cfg;
    for (std::uint64_t seed : cfg.seeds) out.runs.push_back(detail::run_one_seed(cfg, seed, train, test, arch));

    if (out.runs.size() == 1) {
        out.summary = out.runs[0].summary;
        out.summary["config"] = detail::config_echo(cfg);
        out.runs[0].summary = out.summary;
    } else {
        nlohmann::json agg;
        agg["config"] = detail::config_echo(cfg);
        agg["seeds"] = cfg.seeds;
        nlohmann::json per_seed = nlohmann::json::array();
        for (const SeedRun& r : out.runs) per_seed.push_back(r.summary);
        agg["per_seed"] = per_seed;
        for (const char* name : {"local", "fedavg", "protofed"}) {
            if (!out.runs[0].summary["final"].contains(name)) continue;
            double mn = 0.0, mx = 0.0, sum = 0.0;
            bool first = true;
            for (const SeedRun& r : out.runs) {
                const double v = r.summary["final"][name].get<double>();
                sum += v;
                mn = first ? v : std::min(mn, v);
                mx = first ? v : std::max(mx, v);
                first = false;
            }
            agg["final_mean"][name] = sum / static_cast<double>(out.runs.size());
            agg["final_min"][name] = mn;
            agg["final_max"][name] = mx;
        }
        out.summary = agg;
    }
    return out;
}

// Checks the output directory is usable before any training happens.
inline void preflight_output_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
    const fs::path probe = fs::path(dir) / ".write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw IoError("output directory is not writable: " + dir);
        f << "ok";
        if (!f.flush()) throw IoError("output directory is not writable: " + dir);
    }
    fs::remove(probe, ec);
}

namespace detail {

// Write-then-rename so a crash can never leave a half-written file under the
// final name.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write " + tmp.string());
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f.flush()) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string curves_to_csv(const std::vector<RoundRecord>& curves) {
    std::string text = csv_header();
    text += '\n';
    for (const RoundRecord& r : curves) {
        text += csv_row(r);
        text += '\n';
    }
    return text;
}

inline void emit_seed_files(const SeedRun& run, const std::filesystem::path& dir) {
    write_atomic(dir / "rounds.csv", curves_to_csv(run.curves));
    write_atomic(dir / "summary.json", run.summary.dump(2) + "\n");
    if (run.prototypes) {
        const std::vector<std::uint8_t> bytes = serialize_prototypes(*run.prototypes);
        write_atomic(dir / "prototypes.bin", std::string(bytes.begin(), bytes.end()));
    }
}

}  // namespace detail

// Writes rounds.csv / summary.json / prototypes.bin. Multi-seed runs get one
// seed_<s>/ directory each plus the aggregate summary at the top.
inline void emit_outputs(const RunOutput& out, const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (out.runs.empty()) throw InvalidInput("no runs to emit");
    preflight_output_dir(out_dir);
    const fs::path base(out_dir);
    if (out.runs.size() == 1) {
        detail::emit_seed_files(out.runs[0], base);
        return;
    }
    for (const SeedRun& run : out.runs) {
        const fs::path dir = base / ("seed_" + std::to_string(run.seed));
        preflight_output_dir(dir.string());
        detail::emit_seed_files(run, dir);
    }
    detail::write_atomic(base / "summary.json", out.summary.dump(2) + "\n");
}

struct PartitionStats {
    std::vector<ClientShard> shards;
    int class_count = 0;
    std::uint64_t partition_hash = 0;
};

// The partition a run with this config and its first seed would use.
inline PartitionStats partition_stats(const ExperimentConfig& cfg) {
    cfg.validate();
    const Dataset train = load_idx(cfg.train_images, cfg.train_labels);
    if (cfg.pool_size > train.size())
        throw ValidationError("pool_size", "exceeds training set size " + std::to_string(train.size()));
    const std::uint64_t seed = cfg.seeds.front();
    const Dataset pool = subsample(train, cfg.pool_size, mix_seed(seed, detail::kStreamPool));
    PartitionSpec pspec;
    pspec.n_clients = cfg.n_clients;
    pspec.alpha = cfg.alpha;
    pspec.pool_size = pool.size();
    pspec.seed = mix_seed(seed, detail::kStreamPartition);
    PartitionStats stats;
    stats.class_count = pool.class_count;
    stats.shards = dirichlet_partition(pool.labels, pool.class_count, pspec);
    stats.partition_hash = detail::hash_partition(stats.shards);
    return stats;
}

}  // namespace protofed
