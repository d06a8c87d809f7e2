#pragma once

#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/nn.hpp"
#include "protofed/parallel.hpp"
#include "protofed/prototypes.hpp"

namespace protofed {

struct RoundConfig {
    std::size_t batch_size = 8;
    std::size_t local_epochs = 1;
    float lr = 0.01f;
    std::size_t total_rounds = 1;
    std::size_t n_clients = 1;

    void validate() const {
        if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
        if (local_epochs < 1) throw ValidationError("local_epochs", "must be >= 1");
        if (!(lr > 0.0f)) throw ValidationError("lr", "must be > 0");
        if (total_rounds < 1) throw ValidationError("rounds", "must be >= 1");
        if (n_clients < 1) throw ValidationError("n_clients", "must be >= 1");
    }
};

struct ClientState {
    int client_id = 0;
    ClientShard shard;
    ModelParams<float> params;
    const Dataset* pool = nullptr;
    std::uint64_t run_seed = 0;
    std::size_t round = 0;  // set by the orchestrator; feeds the shuffle seed
};

struct ServerState {
    ModelParams<float> params;
    std::size_t round = 0;
    std::optional<GlobalPrototypeSet> prototypes;  // populated only after the final round
};

// Byte deltas one round adds to the traffic ledger.
struct RoundTraffic {
    std::size_t up_model = 0;
    std::size_t up_proto = 0;
    std::size_t down_model = 0;
    std::size_t down_proto = 0;

    std::size_t up() const { return up_model + up_proto; }
    std::size_t down() const { return down_model + down_proto; }
};

namespace detail {

template <typename T>
void gather_batch(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t start, std::size_t count,
                  Tensor<T>& batch, std::vector<int>& labels) {
    const std::size_t px = ds.images.numel() / ds.images.dim(0);
    batch = Tensor<T>({count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    labels.resize(count);
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t idx = order[start + s];
        std::copy_n(ds.images.ptr() + idx * px, px, batch.ptr() + s * px);
        labels[s] = ds.labels[idx];
    }
}

}  // namespace detail

// E epochs of mini-batch SGD on the client's shard, starting from
// global_params. The batch order is reshuffled every epoch from a stream
// derived as (run_seed, client_id, round, epoch), so the result is the same
// no matter when or on which thread the client runs.
inline ModelParams<float> local_update(const ClientState& state, const ModelParams<float>& global_params,
                                       const RoundConfig& cfg) {
    // lr = 0 is a legal zero step here; only full-round configs insist on lr > 0.
    if (cfg.batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
    if (cfg.local_epochs < 1) throw ValidationError("local_epochs", "must be >= 1");
    if (!(cfg.lr >= 0.0f)) throw ValidationError("lr", "must be >= 0");
    if (state.pool == nullptr) throw ProtocolError("client has no dataset attached");
    if (state.shard.indices.empty()) throw ProtocolError("client shard is empty");
    if (!(global_params.arch == state.params.arch))
        throw InvalidInput("client and global architectures differ");

    ModelParams<float> params = global_params;
    std::vector<std::size_t> order = state.shard.indices;
    Tensor<float> batch;
    std::vector<int> labels;
    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        Rng rng(mix_seed(state.run_seed, static_cast<std::uint64_t>(state.client_id), state.round, epoch));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - start);
            detail::gather_batch(*state.pool, order, start, count, batch, labels);
            const auto lg = loss_and_grads(params, batch, labels);
            detail::sgd_apply(params, lg.grads, cfg.lr);
        }
    }
    return params;
}

// Size-weighted mean (weights D_i / sum D_i) in the order given, accumulated
// in 64-bit per scalar.
inline ModelParams<float> fedavg_aggregate(
    const std::vector<std::pair<const ModelParams<float>*, std::size_t>>& updates) {
    if (updates.empty()) throw InvalidInput("nothing to aggregate");
    const ModelParams<float>& first = *updates.front().first;
    std::size_t total = 0;
    for (const auto& [params, size] : updates) {
        if (size < 1) throw InvalidInput("client size must be >= 1");
        if (!params->congruent_with(first)) throw InvalidInput("parameter shapes differ across clients");
        total += size;
    }

    ModelParams<float> out(first.arch);
    auto out_t = out.tensors();
    std::vector<double> acc;
    for (std::size_t ti = 0; ti < ModelParams<float>::tensor_count; ++ti) {
        acc.assign(out_t[ti]->numel(), 0.0);
        for (const auto& [params, size] : updates) {
            const double w = static_cast<double>(size) / static_cast<double>(total);
            const Tensor<float>& src = *params->tensors()[ti];
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(src[i]);
        }
        for (std::size_t i = 0; i < acc.size(); ++i) (*out_t[ti])[i] = static_cast<float>(acc[i]);
    }
    return out;
}

inline ModelParams<float> fedavg_aggregate(const std::vector<std::pair<ModelParams<float>, std::size_t>>& updates) {
    std::vector<std::pair<const ModelParams<float>*, std::size_t>> view;
    view.reserve(updates.size());
    for (const auto& [params, size] : updates) view.emplace_back(&params, size);
    return fedavg_aggregate(view);
}

// One global round: broadcast, parallel local updates, size-weighted
// aggregation, and on the final round the prototype exchange. Aggregation
// order is canonicalized by client id so scheduling cannot change a bit.
inline RoundTraffic run_round(ServerState& server, std::vector<ClientState>& clients, const RoundConfig& cfg,
                              bool is_final) {
    cfg.validate();
    if (clients.empty()) throw InvalidInput("no clients");
    if (clients.size() != cfg.n_clients) throw InvalidInput("client list does not match configured n_clients");
    if (server.round >= cfg.total_rounds) throw ProtocolError("round counter already at total_rounds");

    const std::size_t model_bytes = bytes_of_params(server.params);
    RoundTraffic traffic;
    traffic.down_model = clients.size() * model_bytes;

    for (ClientState& c : clients) c.round = server.round;
    std::vector<ModelParams<float>> updated(clients.size(), ModelParams<float>(server.params.arch));
    parallel_for(clients.size(), [&](std::size_t i) { updated[i] = local_update(clients[i], server.params, cfg); });
    for (std::size_t i = 0; i < clients.size(); ++i) clients[i].params = std::move(updated[i]);
    traffic.up_model = clients.size() * model_bytes;

    std::vector<std::size_t> by_id(clients.size());
    std::iota(by_id.begin(), by_id.end(), std::size_t{0});
    std::sort(by_id.begin(), by_id.end(),
              [&](std::size_t a, std::size_t b) { return clients[a].client_id < clients[b].client_id; });

    std::vector<std::pair<const ModelParams<float>*, std::size_t>> weighted;
    weighted.reserve(clients.size());
    for (std::size_t i : by_id) weighted.emplace_back(&clients[i].params, clients[i].shard.size());
    server.params = fedavg_aggregate(weighted);

    if (is_final) {
        std::vector<LocalPrototypeSet> locals(clients.size());
        parallel_for(clients.size(), [&](std::size_t i) {
            locals[i] = compute_local_prototypes(clients[i].params, clients[i].shard, *clients[i].pool);
        });
        for (const LocalPrototypeSet& l : locals)
            traffic.up_proto += prototype_wire_bytes(l.entries.size(), l.dim);
        server.prototypes = aggregate_global_prototypes(locals);
    }

    ++server.round;
    return traffic;
}

}  // namespace protofed
