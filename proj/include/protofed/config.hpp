#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "protofed/errors.hpp"

namespace protofed {

enum class Strategy { local, fedavg, protofed };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::local: return "local";
        case Strategy::fedavg: return "fedavg";
        case Strategy::protofed: return "protofed";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
    if (name == "local") return Strategy::local;
    if (name == "fedavg") return Strategy::fedavg;
    if (name == "protofed") return Strategy::protofed;
    throw ValidationError("strategies", "unknown strategy '" + name + "'");
}

// Everything one invocation needs. Numeric defaults are the experiment's
// standard operating point: 20 clients over a 5000-sample pool, B=8, E=1,
// lr=0.01, Dirichlet alpha=0.1, 100 rounds.
struct ExperimentConfig {
    std::string dataset = "mnist";
    std::string train_images;
    std::string train_labels;
    std::string test_images;
    std::string test_labels;
    std::size_t n_clients = 20;
    double alpha = 0.1;
    std::size_t pool_size = 5000;
    std::size_t batch_size = 8;
    std::size_t local_epochs = 1;
    double lr = 0.01;
    std::size_t rounds = 100;
    std::vector<std::uint64_t> seeds = {1};
    std::vector<Strategy> strategies = {Strategy::local, Strategy::fedavg, Strategy::protofed};
    std::string out_dir = "out";
    std::size_t eval_every = 1;  // 0 = evaluate only after the final round
    std::string timing = "none";  // none | wall; wall makes rounds.csv nondeterministic

    bool has(Strategy s) const {
        return std::find(strategies.begin(), strategies.end(), s) != strategies.end();
    }

    void validate() const {
        if (dataset != "mnist" && dataset != "fashion-mnist")
            throw ValidationError("dataset", "must be mnist or fashion-mnist");
        if (train_images.empty()) throw ValidationError("train_images", "dataset path is required");
        if (train_labels.empty()) throw ValidationError("train_labels", "dataset path is required");
        if (test_images.empty()) throw ValidationError("test_images", "dataset path is required");
        if (test_labels.empty()) throw ValidationError("test_labels", "dataset path is required");
        if (n_clients < 1) throw ValidationError("n_clients", "must be >= 1");
        if (!(alpha > 0.0)) throw ValidationError("alpha", "must be > 0");
        if (pool_size < 1) throw ValidationError("pool_size", "must be >= 1");
        if (pool_size < n_clients) throw ValidationError("pool_size", "must be >= n_clients");
        if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
        if (local_epochs < 1) throw ValidationError("local_epochs", "must be >= 1");
        if (!(lr > 0.0)) throw ValidationError("lr", "must be > 0");
        if (rounds < 1) throw ValidationError("rounds", "must be >= 1");
        if (seeds.empty()) throw ValidationError("seeds", "at least one seed is required");
        if (strategies.empty()) throw ValidationError("strategies", "at least one strategy is required");
        if (out_dir.empty()) throw ValidationError("out_dir", "output directory is required");
        if (timing != "none" && timing != "wall") throw ValidationError("timing", "must be none or wall");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long n = std::stoll(v, &pos);
        if (pos != v.size() || n < 0) throw std::invalid_argument(v);
        return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
        throw ValidationError(key, "expected a nonnegative integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ValidationError(key, "expected an unsigned integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ValidationError(key, "expected a number, got '" + v + "'");
    }
}

}  // namespace detail

// Applies one key=value setting; shared by the file parser and CLI flags.
inline void apply_config_entry(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "dataset") cfg.dataset = value;
    else if (key == "train_images") cfg.train_images = value;
    else if (key == "train_labels") cfg.train_labels = value;
    else if (key == "test_images") cfg.test_images = value;
    else if (key == "test_labels") cfg.test_labels = value;
    else if (key == "n_clients") cfg.n_clients = parse_size(key, value);
    else if (key == "alpha") cfg.alpha = parse_double(key, value);
    else if (key == "pool_size") cfg.pool_size = parse_size(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_size(key, value);
    else if (key == "local_epochs") cfg.local_epochs = parse_size(key, value);
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "rounds") cfg.rounds = parse_size(key, value);
    else if (key == "seed") cfg.seeds = {parse_u64(key, value)};
    else if (key == "seeds") {
        cfg.seeds.clear();
        for (const std::string& s : split_list(value)) cfg.seeds.push_back(parse_u64(key, s));
    } else if (key == "strategies") {
        cfg.strategies.clear();
        for (const std::string& s : split_list(value)) cfg.strategies.push_back(strategy_from_name(s));
    } else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "eval_every") cfg.eval_every = parse_size(key, value);
    else if (key == "timing") cfg.timing = value;
    else throw ValidationError(key, "unknown configuration key");
}

// Flat key = value lines; '#' starts a comment; blank lines ignored.
inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    ExperimentConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config", "line " + std::to_string(line_no) + " is not key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        apply_config_entry(cfg, key, value);
    }
    return cfg;
}

}  // namespace protofed
