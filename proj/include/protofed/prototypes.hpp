#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/nn.hpp"

namespace protofed {

// Per-class mean embedding plus how many samples (locally) or clients
// (globally) stand behind it.
struct PrototypeEntry {
    std::vector<float> mean;
    std::uint32_t count = 0;
};

// One client's per-class mean embeddings. A class appears iff the client
// holds at least one sample of it.
struct LocalPrototypeSet {
    int client_id = 0;
    std::size_t dim = 0;
    std::map<int, PrototypeEntry> entries;
};

// Server-side per-class means over the clients possessing each class;
// count is the number of contributing clients.
struct GlobalPrototypeSet {
    std::size_t dim = 0;
    std::map<int, PrototypeEntry> entries;
};

// Mean embedding per class over exactly the shard's samples, accumulated in
// 64-bit in shard-index order so the result is reproducible bit-for-bit.
inline LocalPrototypeSet compute_local_prototypes(const ModelParams<float>& params, const ClientShard& shard,
                                                  const Dataset& ds) {
    if (shard.indices.empty()) throw InvalidInput("cannot compute prototypes for an empty shard");
    const ModelArch& a = params.arch;
    const std::size_t px = a.in_ch * a.in_h * a.in_w;

    std::map<int, std::vector<double>> acc;
    std::map<int, std::uint32_t> counts;

    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < shard.indices.size(); start += chunk) {
        const std::size_t n = std::min(chunk, shard.indices.size() - start);
        Tensor<float> batch({n, a.in_ch, a.in_h, a.in_w});
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t idx = shard.indices[start + s];
            if (idx >= ds.size()) throw InvalidInput("shard index out of dataset range");
            std::memcpy(batch.ptr() + s * px, ds.images.ptr() + idx * px, px * sizeof(float));
        }
        const Tensor<float> emb = embed(params, batch);
        for (std::size_t s = 0; s < n; ++s) {
            const int label = ds.labels[shard.indices[start + s]];
            auto [it, fresh] = acc.try_emplace(label, a.embed_dim, 0.0);
            if (fresh) counts[label] = 0;
            const float* row = emb.ptr() + s * a.embed_dim;
            for (std::size_t k = 0; k < a.embed_dim; ++k) it->second[k] += static_cast<double>(row[k]);
            ++counts[label];
        }
    }

    LocalPrototypeSet out;
    out.client_id = shard.client_id;
    out.dim = a.embed_dim;
    for (const auto& [label, sum] : acc) {
        PrototypeEntry e;
        e.count = counts[label];
        e.mean.resize(a.embed_dim);
        for (std::size_t k = 0; k < a.embed_dim; ++k)
            e.mean[k] = static_cast<float>(sum[k] / static_cast<double>(e.count));
        out.entries.emplace(label, std::move(e));
    }
    return out;
}

// Unweighted mean per class over the clients that have the class, in
// ascending client order under 64-bit accumulation.
inline GlobalPrototypeSet aggregate_global_prototypes(const std::vector<LocalPrototypeSet>& locals) {
    if (locals.empty()) throw InvalidInput("cannot aggregate an empty list of prototype sets");
    std::size_t dim = 0;
    for (const auto& l : locals) {
        if (l.dim == 0) continue;
        if (dim == 0) dim = l.dim;
        if (l.dim != dim) throw InvalidInput("prototype dimension mismatch across clients");
    }

    std::vector<const LocalPrototypeSet*> ordered;
    ordered.reserve(locals.size());
    for (const auto& l : locals) ordered.push_back(&l);
    std::sort(ordered.begin(), ordered.end(),
              [](const LocalPrototypeSet* a, const LocalPrototypeSet* b) { return a->client_id < b->client_id; });

    std::map<int, std::vector<double>> acc;
    std::map<int, std::uint32_t> owners;
    for (const LocalPrototypeSet* l : ordered) {
        for (const auto& [label, entry] : l->entries) {
            if (entry.mean.size() != dim) throw InvalidInput("prototype dimension mismatch across clients");
            auto [it, fresh] = acc.try_emplace(label, dim, 0.0);
            if (fresh) owners[label] = 0;
            for (std::size_t k = 0; k < dim; ++k) it->second[k] += static_cast<double>(entry.mean[k]);
            ++owners[label];
        }
    }

    GlobalPrototypeSet out;
    out.dim = dim;
    for (const auto& [label, sum] : acc) {
        PrototypeEntry e;
        e.count = owners[label];
        e.mean.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) e.mean[k] = static_cast<float>(sum[k] / static_cast<double>(e.count));
        out.entries.emplace(label, std::move(e));
    }
    return out;
}

// Argmin of squared Euclidean distance over the stored classes, embeddings
// supplied directly. Ties resolve to the lowest class id.
inline std::vector<int> nearest_prototype_classes(const GlobalPrototypeSet& globals,
                                                  const Tensor<float>& embeddings) {
    if (globals.entries.empty()) throw InvalidInput("global prototype set is empty");
    if (embeddings.rank() != 2 || embeddings.dim(1) != globals.dim)
        throw InvalidInput("embedding dimension does not match prototypes");

    std::vector<int> out(embeddings.dim(0));
    for (std::size_t s = 0; s < embeddings.dim(0); ++s) {
        const float* row = embeddings.ptr() + s * globals.dim;
        double best = 0.0;
        int best_class = 0;
        bool first = true;
        for (const auto& [label, entry] : globals.entries) {
            double d2 = 0.0;
            for (std::size_t k = 0; k < globals.dim; ++k) {
                const double diff = static_cast<double>(row[k]) - static_cast<double>(entry.mean[k]);
                d2 += diff * diff;
            }
            if (first || d2 < best) {
                best = d2;
                best_class = label;
                first = false;
            }
        }
        out[s] = best_class;
    }
    return out;
}

inline std::vector<int> nearest_prototype_predict(const ModelParams<float>& params,
                                                  const GlobalPrototypeSet& globals, const Tensor<float>& batch) {
    return nearest_prototype_classes(globals, embed(params, batch));
}

// Wire format: "PRO1", u16 entry count, u16 dimension, then per class
// (u32 class id, u32 count, d little-endian f32). Used both for the global
// set written to disk and for charging client uplinks.
inline constexpr std::size_t prototype_wire_bytes(std::size_t n_entries, std::size_t dim) {
    return 8 + n_entries * (8 + 4 * dim);
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline std::vector<std::uint8_t> serialize_entries(const std::map<int, PrototypeEntry>& entries, std::size_t dim) {
    if (entries.size() > 0xffff) throw InvalidInput("too many prototype classes to serialize");
    if (dim > 0xffff) throw InvalidInput("prototype dimension too large to serialize");
    std::vector<std::uint8_t> out;
    out.reserve(prototype_wire_bytes(entries.size(), dim));
    for (char c : {'P', 'R', 'O', '1'}) out.push_back(static_cast<std::uint8_t>(c));
    put_u16(out, static_cast<std::uint16_t>(entries.size()));
    put_u16(out, static_cast<std::uint16_t>(dim));
    for (const auto& [label, entry] : entries) {
        if (label < 0) throw InvalidInput("negative class id cannot be serialized");
        if (entry.mean.size() != dim) throw InvalidInput("prototype entry dimension mismatch");
        put_u32(out, static_cast<std::uint32_t>(label));
        put_u32(out, entry.count);
        for (float v : entry.mean) put_f32(out, v);
    }
    return out;
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_prototypes(const GlobalPrototypeSet& set) {
    return detail::serialize_entries(set.entries, set.dim);
}

inline std::vector<std::uint8_t> serialize_prototypes(const LocalPrototypeSet& set) {
    return detail::serialize_entries(set.entries, set.dim);
}

inline GlobalPrototypeSet parse_prototypes(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8) throw ParseError("prototype record truncated: missing header");
    if (std::memcmp(bytes.data(), "PRO1", 4) != 0) throw ParseError("prototype record has wrong magic");
    const std::size_t n_entries = detail::get_u16(bytes.data() + 4);
    const std::size_t dim = detail::get_u16(bytes.data() + 6);
    const std::size_t expect = prototype_wire_bytes(n_entries, dim);
    if (bytes.size() != expect)
        throw ParseError("prototype record has " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(expect));

    GlobalPrototypeSet out;
    out.dim = dim;
    const std::uint8_t* p = bytes.data() + 8;
    for (std::size_t i = 0; i < n_entries; ++i) {
        const int label = static_cast<int>(detail::get_u32(p));
        PrototypeEntry e;
        e.count = detail::get_u32(p + 4);
        p += 8;
        e.mean.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) {
            const std::uint32_t bits = detail::get_u32(p);
            std::memcpy(&e.mean[k], &bits, 4);
            p += 4;
        }
        if (!out.entries.emplace(label, std::move(e)).second)
            throw ParseError("duplicate class id in prototype record");
    }
    return out;
}

}  // namespace protofed
