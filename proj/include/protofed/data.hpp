#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "protofed/errors.hpp"
#include "protofed/idx.hpp"
#include "protofed/rng.hpp"

namespace protofed {

// One client's slice of the training pool: index set plus per-class counts.
struct ClientShard {
    int client_id = 0;
    std::vector<std::size_t> indices;       // into the pool dataset
    std::vector<std::size_t> class_counts;  // length class_count

    std::size_t size() const { return indices.size(); }
};

struct PartitionSpec {
    int n_clients = 20;
    double alpha = 0.1;            // Dirichlet concentration; smaller = more skew
    std::size_t pool_size = 5000;  // subsampled training pool
    std::uint64_t seed = 0;

    void validate() const {
        if (n_clients < 1) throw InvalidInput("partition requires n_clients >= 1");
        if (!(alpha > 0.0)) throw InvalidInput("partition requires alpha > 0");
    }
};

// Uniform draw of n samples without replacement; deterministic per seed.
inline Dataset subsample(const Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n > ds.size()) throw InvalidInput("subsample size exceeds dataset size");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    order.resize(n);

    const std::size_t px = ds.images.numel() / ds.size();
    Dataset out;
    out.class_count = ds.class_count;
    out.images = Tensor<float>({n, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    out.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(ds.images.ptr() + order[i] * px, px, out.images.ptr() + i * px);
        out.labels[i] = ds.labels[order[i]];
    }
    return out;
}

// Heterogeneous split: for each class, a proportion vector over clients is
// drawn from Dir(alpha * 1) via normalized Gamma draws and the class indices
// are dealt out by largest-remainder rounding (remainder ties -> lowest
// client id). A client left empty is repaired by taking one sample from the
// largest shard until every client holds at least one sample.
inline std::vector<ClientShard> dirichlet_partition(const std::vector<int>& labels, int class_count,
                                                    const PartitionSpec& spec) {
    spec.validate();
    if (labels.empty()) throw InvalidInput("partition requires nonempty labels");
    if (class_count < 1) throw InvalidInput("partition requires class_count >= 1");

    const auto n_clients = static_cast<std::size_t>(spec.n_clients);
    Rng rng(spec.seed);

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(class_count));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= class_count) throw InvalidInput("label out of range in partition input");
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }

    std::vector<ClientShard> shards(n_clients);
    for (std::size_t c = 0; c < n_clients; ++c) {
        shards[c].client_id = static_cast<int>(c);
        shards[c].class_counts.assign(static_cast<std::size_t>(class_count), 0);
    }

    std::vector<double> weights(n_clients);
    std::vector<std::size_t> quota(n_clients);
    for (int j = 0; j < class_count; ++j) {
        auto& members = by_class[static_cast<std::size_t>(j)];
        // Draw the proportion vector even for absent classes so the stream of
        // random numbers, and hence the partition, does not depend on which
        // classes happen to appear.
        double total = 0.0;
        for (std::size_t c = 0; c < n_clients; ++c) {
            weights[c] = rng.gamma(spec.alpha);
            total += weights[c];
        }
        if (members.empty()) continue;
        if (!(total > 0.0)) {
            std::fill(weights.begin(), weights.end(), 1.0);
            total = static_cast<double>(n_clients);
        }

        // Largest-remainder rounding of n_j * p_c.
        const auto n_j = members.size();
        std::size_t assigned = 0;
        std::vector<std::pair<double, std::size_t>> remainders(n_clients);
        for (std::size_t c = 0; c < n_clients; ++c) {
            const double exact = static_cast<double>(n_j) * (weights[c] / total);
            quota[c] = static_cast<std::size_t>(exact);
            remainders[c] = {exact - static_cast<double>(quota[c]), c};
            assigned += quota[c];
        }
        std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t r = 0; assigned < n_j; ++r, ++assigned) quota[remainders[r % n_clients].second]++;

        rng.shuffle(members);
        std::size_t cursor = 0;
        for (std::size_t c = 0; c < n_clients; ++c) {
            for (std::size_t k = 0; k < quota[c]; ++k) {
                shards[c].indices.push_back(members[cursor++]);
                shards[c].class_counts[static_cast<std::size_t>(j)]++;
            }
        }
    }

    // Every client must end up nonempty: the round loop visits all of them.
    for (std::size_t c = 0; c < n_clients; ++c) {
        while (shards[c].indices.empty()) {
            std::size_t donor = n_clients;
            std::size_t donor_size = 1;  // donor must keep one sample
            for (std::size_t o = 0; o < n_clients; ++o) {
                if (shards[o].size() > donor_size) {
                    donor = o;
                    donor_size = shards[o].size();
                }
            }
            if (donor == n_clients) throw InvalidInput("not enough samples to give every client one");
            const std::size_t moved = shards[donor].indices.back();
            shards[donor].indices.pop_back();
            shards[donor].class_counts[static_cast<std::size_t>(labels[moved])]--;
            shards[c].indices.push_back(moved);
            shards[c].class_counts[static_cast<std::size_t>(labels[moved])]++;
        }
    }

    for (auto& s : shards) std::sort(s.indices.begin(), s.indices.end());
    return shards;
}

}  // namespace protofed
