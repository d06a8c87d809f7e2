#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "protofed/protocol.hpp"

namespace protofed {

// Per-round traffic rows plus running totals. Rows are deltas; the ledger is
// only ever appended to by the orchestrator.
struct TrafficLedger {
    std::vector<RoundTraffic> rounds;

    void add(const RoundTraffic& delta) { rounds.push_back(delta); }

    std::size_t total_up() const {
        std::size_t n = 0;
        for (const auto& r : rounds) n += r.up();
        return n;
    }

    std::size_t total_down() const {
        std::size_t n = 0;
        for (const auto& r : rounds) n += r.down();
        return n;
    }

    // Cumulative bytes through round index i (inclusive).
    std::size_t up_through(std::size_t i) const {
        std::size_t n = 0;
        for (std::size_t r = 0; r <= i && r < rounds.size(); ++r) n += rounds[r].up();
        return n;
    }

    std::size_t down_through(std::size_t i) const {
        std::size_t n = 0;
        for (std::size_t r = 0; r <= i && r < rounds.size(); ++r) n += rounds[r].down();
        return n;
    }
};

// One row of the per-round curve. Accuracies are NaN when the strategy was
// not requested; the CSV writer turns NaN into an empty cell.
struct RoundRecord {
    std::size_t round = 0;  // 1-based in output
    double acc_local = std::numeric_limits<double>::quiet_NaN();
    double acc_fedavg = std::numeric_limits<double>::quiet_NaN();
    double acc_proto = std::numeric_limits<double>::quiet_NaN();
    std::size_t bytes_up = 0;    // cumulative
    std::size_t bytes_down = 0;  // cumulative
    double wall_s = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline int argmax_row(const float* row, std::size_t n) {
    int best = 0;
    for (std::size_t j = 1; j < n; ++j) {
        if (row[j] > row[best]) best = static_cast<int>(j);
    }
    return best;
}

// Chunked evaluation: each chunk writes its own counter slot, so thread
// scheduling cannot change the sum.
template <typename Fn>
std::size_t count_correct(const Dataset& test, std::size_t chunk, Fn&& correct_in_chunk) {
    const std::size_t n = test.size();
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<std::size_t> per_chunk(n_chunks, 0);
    parallel_for(n_chunks, [&](std::size_t c) {
        const std::size_t start = c * chunk;
        const std::size_t count = std::min(chunk, n - start);
        per_chunk[c] = correct_in_chunk(start, count);
    });
    std::size_t total = 0;
    for (std::size_t c : per_chunk) total += c;
    return total;
}

template <typename T>
Tensor<T> slice_images(const Dataset& ds, std::size_t start, std::size_t count) {
    const std::size_t px = ds.images.numel() / ds.images.dim(0);
    Tensor<T> batch({count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    std::copy_n(ds.images.ptr() + start * px, count * px, batch.ptr());
    return batch;
}

}  // namespace detail

// Top-1 accuracy of the classifier head; logit ties go to the lowest class.
inline double evaluate_classifier(const ModelParams<float>& params, const Dataset& test) {
    if (test.size() == 0) throw InvalidInput("test set is empty");
    const std::size_t correct = detail::count_correct(test, 512, [&](std::size_t start, std::size_t count) {
        const Tensor<float> batch = detail::slice_images<float>(test, start, count);
        const Tensor<float> logits = forward(params, batch);
        std::size_t ok = 0;
        for (std::size_t s = 0; s < count; ++s) {
            const int pred = detail::argmax_row(logits.ptr() + s * params.arch.class_count, params.arch.class_count);
            if (pred == test.labels[start + s]) ++ok;
        }
        return ok;
    });
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

// Top-1 accuracy under nearest-prototype prediction. Samples whose class has
// no global prototype can never be right; they are counted into
// *missing_class_samples when the caller wants to warn about them.
inline double evaluate_prototype(const ModelParams<float>& params, const GlobalPrototypeSet& globals,
                                 const Dataset& test, std::size_t* missing_class_samples = nullptr) {
    if (test.size() == 0) throw InvalidInput("test set is empty");
    if (globals.entries.empty()) throw InvalidInput("global prototype set is empty");

    const std::size_t n = test.size();
    const std::size_t chunk = 512;
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    std::vector<std::size_t> ok(n_chunks, 0), missing(n_chunks, 0);
    parallel_for(n_chunks, [&](std::size_t c) {
        const std::size_t start = c * chunk;
        const std::size_t count = std::min(chunk, n - start);
        const Tensor<float> batch = detail::slice_images<float>(test, start, count);
        const std::vector<int> pred = nearest_prototype_predict(params, globals, batch);
        for (std::size_t s = 0; s < count; ++s) {
            const int label = test.labels[start + s];
            if (pred[s] == label) ++ok[c];
            if (!globals.entries.count(label)) ++missing[c];
        }
    });

    std::size_t correct = 0, absent = 0;
    for (std::size_t c = 0; c < n_chunks; ++c) {
        correct += ok[c];
        absent += missing[c];
    }
    if (missing_class_samples) *missing_class_samples = absent;
    return static_cast<double>(correct) / static_cast<double>(n);
}

// Unweighted mean of per-client classifier accuracy: the no-communication
// baseline.
inline double evaluate_local_baseline(const std::vector<ClientState>& clients, const Dataset& test) {
    if (clients.empty()) throw InvalidInput("no clients to evaluate");
    double sum = 0.0;
    for (const ClientState& c : clients) sum += evaluate_classifier(c.params, test);
    return sum / static_cast<double>(clients.size());
}

// CSV row formatting shared by the writer and the golden tests. NaN cells
// print empty; accuracies use fixed 6-digit precision.
inline std::string csv_cell(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::string csv_header() { return "round,acc_local,acc_fedavg,acc_proto,bytes_up,bytes_down,wall_s"; }

inline std::string csv_row(const RoundRecord& r) {
    std::string line = std::to_string(r.round);
    line += ',';
    line += csv_cell(r.acc_local);
    line += ',';
    line += csv_cell(r.acc_fedavg);
    line += ',';
    line += csv_cell(r.acc_proto);
    line += ',';
    line += std::to_string(r.bytes_up);
    line += ',';
    line += std::to_string(r.bytes_down);
    line += ',';
    line += csv_cell(r.wall_s);
    return line;
}

}  // namespace protofed
