#pragma once

#include <cstdint>
#include <string>

#include "spos/kernels.hpp"
#include "spos/tensor.hpp"

// Grouped pairwise similarity maps over encoded windows.
namespace spos {

using kernels::Metric;

inline Metric metric_from_name(const std::string& name) {
    if (name == "cosine") return Metric::cosine;
    if (name == "euclidean") return Metric::euclidean;
    if (name == "manhattan") return Metric::manhattan;
    if (name == "chebyshev") return Metric::chebyshev;
    throw ConfigError("unknown similarity metric '" + name +
                      "' (expected cosine, euclidean, manhattan or chebyshev)");
}

inline std::string metric_name(Metric m) {
    switch (m) {
        case Metric::cosine: return "cosine";
        case Metric::euclidean: return "euclidean";
        case Metric::manhattan: return "manhattan";
        case Metric::chebyshev: return "chebyshev";
    }
    return "?";
}

// [B,L,C] -> [B,L,G,C/G]; channel c lands in group c / (C/G) at offset
// c % (C/G), which on row-major data is a pure reshape.
template <class S>
TensorT<S> group_split(const TensorT<S>& x, std::int64_t g) {
    if (x.rank() != 3) throw DimError("group_split: expected [B,L,C], got " + shape_str(x.shape()));
    std::int64_t c = x.extent(2);
    if (g < 1 || c % g != 0)
        throw ContractError("group_split: C=" + std::to_string(c) + " not divisible by G=" +
                            std::to_string(g));
    return view(x, Shape{x.extent(0), x.extent(1), g, c / g});
}

template <class S>
TensorT<S> group_merge(const TensorT<S>& xg) {
    if (xg.rank() != 4) throw DimError("group_merge: expected [B,L,G,Cg], got " + shape_str(xg.shape()));
    return view(xg, Shape{xg.extent(0), xg.extent(1), xg.extent(2) * xg.extent(3)});
}

// similarity_maps(xg, metric) lives in tensor.hpp; this is the count contract.
// One window evaluates G * L * L vector pairs, so a batch of T' windows costs
// exactly T' * G * L * L metric evaluations (the instrumented counter in
// kernels is asserted against this).
inline std::uint64_t count_similarity_ops(std::int64_t tp, std::int64_t g, std::int64_t l) {
    if (tp < 1 || g < 1 || l < 1)
        throw ContractError("count_similarity_ops: positive arguments required");
    return static_cast<std::uint64_t>(tp) * static_cast<std::uint64_t>(g) *
           static_cast<std::uint64_t>(l) * static_cast<std::uint64_t>(l);
}

}  // namespace spos
