#include <protofed/protocol.hpp>

#include <algorithm>
#include <cstdlib>
#include <memory>
#include <catch2/catch_amalgamated.hpp>
#include <vector>

#include "support.hpp"

using namespace protofed;

namespace {

const ModelArch kArch = ModelArch::reduced();

struct Federation {
    std::unique_ptr<Dataset> pool;  // heap-stable so client pointers survive moves
    std::vector<ClientState> clients;
    ServerState server;
};

// n_clients clients over a synthetic pool, shards dealt round-robin so every
// client sees a few classes.
Federation make_federation(std::size_t n_clients, std::size_t pool_n, std::uint64_t seed,
                           std::uint64_t run_seed = 5) {
    Federation f;
    f.pool = std::make_unique<Dataset>(testsupport::synthetic_dataset(pool_n, 10, seed));
    f.server.params = init_params<float>(kArch, mix_seed(seed, 1));
    std::vector<ClientShard> shards(n_clients);
    for (std::size_t c = 0; c < n_clients; ++c) {
        shards[c].client_id = static_cast<int>(c);
        shards[c].class_counts.assign(10, 0);
    }
    for (std::size_t i = 0; i < pool_n; ++i) {
        auto& s = shards[i % n_clients];
        s.indices.push_back(i);
        s.class_counts[static_cast<std::size_t>(f.pool->labels[i])]++;
    }
    for (std::size_t c = 0; c < n_clients; ++c) {
        ClientState st;
        st.client_id = static_cast<int>(c);
        st.shard = shards[c];
        st.params = ModelParams<float>(kArch);
        st.pool = f.pool.get();
        st.run_seed = run_seed;
        f.clients.push_back(std::move(st));
    }
    return f;
}

bool params_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
    auto ta = a.tensors();
    auto tb = b.tensors();
    for (std::size_t i = 0; i < ModelParams<float>::tensor_count; ++i) {
        if (!(ta[i]->data == tb[i]->data)) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("round config invariants name the offending field", "[protocol]") {
    RoundConfig cfg;
    cfg.n_clients = 3;
    REQUIRE_NOTHROW(cfg.validate());

    auto field_of = [](RoundConfig c) -> std::string {
        try {
            c.validate();
        } catch (const ValidationError& e) {
            return e.field;
        }
        return "";
    };

    RoundConfig bad = cfg;
    bad.batch_size = 0;
    REQUIRE(field_of(bad) == "batch_size");
    bad = cfg;
    bad.local_epochs = 0;
    REQUIRE(field_of(bad) == "local_epochs");
    bad = cfg;
    bad.lr = 0.0f;
    REQUIRE(field_of(bad) == "lr");
    bad = cfg;
    bad.total_rounds = 0;
    REQUIRE(field_of(bad) == "rounds");
    bad = cfg;
    bad.n_clients = 0;
    REQUIRE(field_of(bad) == "n_clients");
}

TEST_CASE("local_update runs seeded mini-batch SGD", "[protocol]") {
    Federation f = make_federation(1, 12, 201);
    ClientState& client = f.clients[0];
    client.round = 0;
    RoundConfig cfg;
    cfg.batch_size = 4;
    cfg.local_epochs = 1;
    cfg.lr = 0.05f;

    SECTION("zero learning rate is the identity") {
        cfg.lr = 0.0f;
        const auto out = local_update(client, f.server.params, cfg);
        REQUIRE(params_equal(out, f.server.params));
    }

    SECTION("one full-shard batch matches the single-step oracle") {
        cfg.batch_size = client.shard.size();  // one batch per epoch
        const auto got = local_update(client, f.server.params, cfg);

        std::vector<std::size_t> order = client.shard.indices;
        Rng rng(mix_seed(client.run_seed, static_cast<std::uint64_t>(client.client_id), client.round, 0));
        rng.shuffle(order);
        Tensor<float> batch({order.size(), kArch.in_ch, kArch.in_h, kArch.in_w});
        std::vector<int> labels(order.size());
        const std::size_t px = kArch.in_ch * kArch.in_h * kArch.in_w;
        for (std::size_t s = 0; s < order.size(); ++s) {
            std::copy_n(f.pool->images.ptr() + order[s] * px, px, batch.ptr() + s * px);
            labels[s] = f.pool->labels[order[s]];
        }
        const auto lg = loss_and_grads(f.server.params, batch, labels);
        const auto want = sgd_step(f.server.params, lg.grads, cfg.lr);
        REQUIRE(params_equal(got, want));
    }

    SECTION("the last partial batch is trained on") {
        // 12 samples, B=5 -> batches of 5,5,2. Replicate by hand.
        cfg.batch_size = 5;
        const auto got = local_update(client, f.server.params, cfg);

        std::vector<std::size_t> order = client.shard.indices;
        Rng rng(mix_seed(client.run_seed, static_cast<std::uint64_t>(client.client_id), client.round, 0));
        rng.shuffle(order);
        ModelParams<float> params = f.server.params;
        const std::size_t px = kArch.in_ch * kArch.in_h * kArch.in_w;
        for (std::size_t start = 0; start < order.size(); start += 5) {
            const std::size_t count = std::min<std::size_t>(5, order.size() - start);
            Tensor<float> batch({count, kArch.in_ch, kArch.in_h, kArch.in_w});
            std::vector<int> labels(count);
            for (std::size_t s = 0; s < count; ++s) {
                std::copy_n(f.pool->images.ptr() + order[start + s] * px, px, batch.ptr() + s * px);
                labels[s] = f.pool->labels[order[start + s]];
            }
            const auto lg = loss_and_grads(params, batch, labels);
            params = sgd_step(params, lg.grads, cfg.lr);
        }
        REQUIRE(params_equal(got, params));
    }

    SECTION("epochs chain with fresh shuffles") {
        cfg.local_epochs = 2;
        cfg.batch_size = client.shard.size();
        const auto got = local_update(client, f.server.params, cfg);

        ModelParams<float> params = f.server.params;
        const std::size_t px = kArch.in_ch * kArch.in_h * kArch.in_w;
        for (std::size_t epoch = 0; epoch < 2; ++epoch) {
            std::vector<std::size_t> order = client.shard.indices;
            Rng rng(mix_seed(client.run_seed, static_cast<std::uint64_t>(client.client_id), client.round, epoch));
            rng.shuffle(order);
            Tensor<float> batch({order.size(), kArch.in_ch, kArch.in_h, kArch.in_w});
            std::vector<int> labels(order.size());
            for (std::size_t s = 0; s < order.size(); ++s) {
                std::copy_n(f.pool->images.ptr() + order[s] * px, px, batch.ptr() + s * px);
                labels[s] = f.pool->labels[order[s]];
            }
            const auto lg = loss_and_grads(params, batch, labels);
            params = sgd_step(params, lg.grads, cfg.lr);
        }
        REQUIRE(params_equal(got, params));
    }

    SECTION("repeated calls are bit-identical and leave inputs untouched") {
        const ModelParams<float> before = f.server.params;
        const auto a = local_update(client, f.server.params, cfg);
        const auto b = local_update(client, f.server.params, cfg);
        REQUIRE(params_equal(a, b));
        REQUIRE(params_equal(f.server.params, before));
    }

    SECTION("structural errors") {
        ClientState detached = client;
        detached.pool = nullptr;
        REQUIRE_THROWS_AS(local_update(detached, f.server.params, cfg), ProtocolError);

        ClientState empty = client;
        empty.shard.indices.clear();
        REQUIRE_THROWS_AS(local_update(empty, f.server.params, cfg), ProtocolError);

        ClientState wrong = client;
        wrong.params = ModelParams<float>(ModelArch::mnist_default());
        REQUIRE_THROWS_AS(local_update(wrong, f.server.params, cfg), InvalidInput);

        RoundConfig bad = cfg;
        bad.lr = -0.1f;
        REQUIRE_THROWS_AS(local_update(client, f.server.params, bad), ValidationError);
        bad = cfg;
        bad.batch_size = 0;
        REQUIRE_THROWS_AS(local_update(client, f.server.params, bad), ValidationError);
    }
}

TEST_CASE("fedavg_aggregate is the size-weighted mean", "[protocol]") {
    SECTION("identical updates are a fixed point") {
        const auto p = testsupport::random_params<float>(kArch, 210);
        const auto out = fedavg_aggregate({{p, 3}, {p, 5}, {p, 1}});
        REQUIRE(params_equal(out, p));
    }

    SECTION("equal sizes average two models elementwise") {
        auto p = ModelParams<float>(kArch);
        auto q = ModelParams<float>(kArch);
        for (auto* t : p.tensors()) t->fill(0.0f);
        for (auto* t : q.tensors()) t->fill(1.0f);
        const auto out = fedavg_aggregate({{p, 4}, {q, 4}});
        for (auto* t : out.tensors())
            for (float v : t->data) REQUIRE(v == 0.5f);
    }

    SECTION("sizes 1,2,7 weight as 0.1, 0.2, 0.7 against a scalar oracle") {
        std::vector<std::pair<ModelParams<float>, std::size_t>> updates;
        updates.emplace_back(testsupport::random_params<float>(kArch, 211), 1);
        updates.emplace_back(testsupport::random_params<float>(kArch, 212), 2);
        updates.emplace_back(testsupport::random_params<float>(kArch, 213), 7);
        const auto out = fedavg_aggregate(updates);

        auto out_t = out.tensors();
        const double weights[3] = {0.1, 0.2, 0.7};
        for (std::size_t ti = 0; ti < ModelParams<float>::tensor_count; ++ti) {
            for (std::size_t i = 0; i < out_t[ti]->numel(); ++i) {
                double acc = 0.0;
                for (std::size_t c = 0; c < 3; ++c)
                    acc += weights[c] * static_cast<double>((*updates[c].first.tensors()[ti])[i]);
                REQUIRE((*out_t[ti])[i] == static_cast<float>(acc));
            }
        }
    }

    SECTION("input validation") {
        REQUIRE_THROWS_AS(fedavg_aggregate(std::vector<std::pair<ModelParams<float>, std::size_t>>{}),
                          InvalidInput);
        const auto p = testsupport::random_params<float>(kArch, 214);
        REQUIRE_THROWS_AS(fedavg_aggregate({{p, 0}}), InvalidInput);
        const auto q = testsupport::random_params<float>(ModelArch::mnist_default(), 215);
        REQUIRE_THROWS_AS(fedavg_aggregate({{p, 1}, {q, 1}}), InvalidInput);
    }
}

TEST_CASE("run_round drives broadcast, updates, and aggregation", "[protocol]") {
    RoundConfig cfg;
    cfg.batch_size = 4;
    cfg.local_epochs = 1;
    cfg.lr = 0.05f;
    cfg.total_rounds = 3;
    cfg.n_clients = 4;

    SECTION("traffic and state of a non-final round") {
        Federation f = make_federation(4, 24, 220);
        const ModelParams<float> broadcast = f.server.params;
        const auto tr = run_round(f.server, f.clients, cfg, false);

        const std::size_t model_bytes = bytes_of_params(broadcast);
        REQUIRE(tr.down_model == 4 * model_bytes);
        REQUIRE(tr.up_model == 4 * model_bytes);
        REQUIRE(tr.up_proto == 0);
        REQUIRE(tr.down_proto == 0);
        REQUIRE(f.server.round == 1);
        REQUIRE(!f.server.prototypes.has_value());

        // Replays of the independent pieces reproduce the server bits.
        Federation g = make_federation(4, 24, 220);
        std::vector<std::pair<ModelParams<float>, std::size_t>> updates;
        for (ClientState& c : g.clients) {
            c.round = 0;
            updates.emplace_back(local_update(c, broadcast, cfg), c.shard.size());
        }
        const auto want = fedavg_aggregate(updates);
        REQUIRE(params_equal(f.server.params, want));
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(params_equal(f.clients[i].params, updates[i].first));
    }

    SECTION("client storage order cannot change a bit") {
        Federation a = make_federation(4, 24, 221);
        Federation b = make_federation(4, 24, 221);
        std::rotate(b.clients.begin(), b.clients.begin() + 2, b.clients.end());

        const auto tra = run_round(a.server, a.clients, cfg, false);
        const auto trb = run_round(b.server, b.clients, cfg, false);
        REQUIRE(params_equal(a.server.params, b.server.params));
        REQUIRE(tra.up_model == trb.up_model);
        REQUIRE(tra.down_model == trb.down_model);
    }

    SECTION("thread count cannot change a bit") {
        Federation a = make_federation(4, 24, 222);
        Federation b = make_federation(4, 24, 222);
        setenv("PROTOFED_THREADS", "1", 1);
        const auto tra = run_round(a.server, a.clients, cfg, true);
        setenv("PROTOFED_THREADS", "4", 1);
        const auto trb = run_round(b.server, b.clients, cfg, true);
        unsetenv("PROTOFED_THREADS");
        REQUIRE(params_equal(a.server.params, b.server.params));
        REQUIRE(a.server.prototypes->dim == b.server.prototypes->dim);
        REQUIRE(a.server.prototypes->entries.size() == b.server.prototypes->entries.size());
        for (const auto& [label, entry] : a.server.prototypes->entries) {
            REQUIRE(entry.mean == b.server.prototypes->entries.at(label).mean);
            REQUIRE(entry.count == b.server.prototypes->entries.at(label).count);
        }
        REQUIRE(tra.up_proto == trb.up_proto);
    }

    SECTION("final round carries prototypes from post-update local models") {
        Federation f = make_federation(4, 24, 223);
        run_round(f.server, f.clients, cfg, false);
        run_round(f.server, f.clients, cfg, false);
        const auto tr = run_round(f.server, f.clients, cfg, true);

        REQUIRE(f.server.prototypes.has_value());
        REQUIRE(f.server.round == 3);

        std::vector<LocalPrototypeSet> locals;
        std::size_t proto_bytes = 0;
        for (const ClientState& c : f.clients) {
            locals.push_back(compute_local_prototypes(c.params, c.shard, *f.pool));
            proto_bytes += prototype_wire_bytes(locals.back().entries.size(), locals.back().dim);
        }
        REQUIRE(tr.up_proto == proto_bytes);
        REQUIRE(tr.up_proto <= 4 * prototype_wire_bytes(10, kArch.embed_dim));

        const auto want = aggregate_global_prototypes(locals);
        REQUIRE(f.server.prototypes->entries.size() == want.entries.size());
        for (const auto& [label, entry] : want.entries) {
            REQUIRE(f.server.prototypes->entries.at(label).mean == entry.mean);
            REQUIRE(f.server.prototypes->entries.at(label).count == entry.count);
        }
    }

    SECTION("round counter is enforced") {
        Federation f = make_federation(4, 24, 224);
        cfg.total_rounds = 1;
        run_round(f.server, f.clients, cfg, true);
        REQUIRE_THROWS_AS(run_round(f.server, f.clients, cfg, true), ProtocolError);
    }

    SECTION("client count must match the config") {
        Federation f = make_federation(3, 24, 225);
        REQUIRE_THROWS_AS(run_round(f.server, f.clients, cfg, false), InvalidInput);
    }

    SECTION("single client: aggregation is the identity and rounds chain epochs") {
        RoundConfig solo = cfg;
        solo.n_clients = 1;
        solo.total_rounds = 3;

        Federation f = make_federation(1, 12, 226);
        const ModelParams<float> start = f.server.params;
        for (std::size_t t = 0; t < 3; ++t) run_round(f.server, f.clients, solo, t == 2);

        Federation g = make_federation(1, 12, 226);
        ModelParams<float> params = start;
        for (std::size_t t = 0; t < 3; ++t) {
            g.clients[0].round = t;
            params = local_update(g.clients[0], params, solo);
        }
        REQUIRE(params_equal(f.server.params, params));
    }
}
