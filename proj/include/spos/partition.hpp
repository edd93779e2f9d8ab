#pragma once

#include <cstdint>
#include <vector>

#include "spos/kernels.hpp"
#include "spos/tensor.hpp"

// Structured Partition of Sequence: pad a T x C sequence to a multiple of K,
// split it into K residue-class slices, and assemble for every padded frame
// its local window of L = 2K+1 frame vectors. All construction is row
// shifting, viewing and concatenation, so the work is linear in T'.
namespace spos {

template <class S>
struct PaddedSequenceT {
    TensorT<S> frames;     // [T', C]
    std::int64_t t_real;   // T
    std::int64_t t_padded; // T' = ceil(T/K)*K
    std::int64_t k;        // window size K
};

template <class S>
struct SliceContextT {
    std::int64_t slice_index;                     // k in [0, K)
    TensorT<S> left;                              // [N, K, C]
    TensorT<S> right;                             // [N, K, C]
    std::vector<std::int64_t> candidate_indices;  // n*K + k for n in [0, N)
};

template <class S>
struct StructuredContextT {
    TensorT<S> window;          // [L, C], row K is the frame itself
    std::int64_t center_index;  // t
};

using PaddedSequence = PaddedSequenceT<float>;
using SliceContext = SliceContextT<float>;
using StructuredContext = StructuredContextT<float>;

// Appends ceil(T/K)*K - T zero rows. Counts T' frame-row ops.
template <class S>
PaddedSequenceT<S> pad(const TensorT<S>& seq, std::int64_t k) {
    if (k < 1) throw ContractError("pad: K must be >= 1, got " + std::to_string(k));
    if (seq.rank() != 2) throw DimError("pad: expected [T,C], got " + shape_str(seq.shape()));
    std::int64_t t = seq.extent(0), c = seq.extent(1);
    if (t < 1) throw ContractError("pad: T must be >= 1, got " + std::to_string(t));
    std::int64_t tp = (t + k - 1) / k * k;
    kernels::count_row_ops(static_cast<std::uint64_t>(tp));
    if (tp == t) return {seq, t, tp, k};
    TensorT<S> zeros(Shape{tp - t, c});
    TensorT<S> frames = concat<S>({seq, zeros}, 0);
    return {frames, t, tp, k};
}

// Left context = prepend K-k copies of padded frame 0, drop the last K-k
// rows, view as [N,K,C]. Right context = append k+1 copies of the last
// padded frame, drop the first k+1 rows, view likewise. Both are a single
// clamped row shift. right_clamp_hi lets callers clamp the right context to
// the last real frame instead of the paper's literal last padded frame
// (pass t_real-1); default follows the paper text.
template <class S>
SliceContextT<S> build_slice(const PaddedSequenceT<S>& p, std::int64_t k,
                             std::int64_t right_clamp_hi = -1) {
    std::int64_t bigk = p.k;
    if (k < 0 || k >= bigk)
        throw ContractError("build_slice: slice index " + std::to_string(k) + " outside [0," +
                            std::to_string(bigk) + ")");
    std::int64_t tp = p.t_padded, c = p.frames.extent(1), n = tp / bigk;
    if (right_clamp_hi < 0) right_clamp_hi = tp - 1;
    kernels::count_row_ops(static_cast<std::uint64_t>(2 * tp));

    TensorT<S> left_rows = rows_shift_clamp(p.frames, -(bigk - k), tp - 1);
    TensorT<S> right_rows = rows_shift_clamp(p.frames, k + 1, right_clamp_hi);

    SliceContextT<S> out;
    out.slice_index = k;
    out.left = view(left_rows, Shape{n, bigk, c});
    out.right = view(right_rows, Shape{n, bigk, c});
    out.candidate_indices.resize(n);
    for (std::int64_t i = 0; i < n; ++i) out.candidate_indices[i] = i * bigk + k;
    return out;
}

// Assembles every frame's window [left K rows, frame, right K rows] into one
// [T', L, C] tensor ordered by frame index (slice k serves frames k, k+K, ...).
template <class S>
TensorT<S> structured_context(const PaddedSequenceT<S>& p,
                              const std::vector<SliceContextT<S>>& slices) {
    std::int64_t bigk = p.k, tp = p.t_padded, c = p.frames.extent(1), n = tp / bigk;
    if (static_cast<std::int64_t>(slices.size()) != bigk)
        throw ContractError("structured_context: expected " + std::to_string(bigk) + " slices, got " +
                            std::to_string(slices.size()));
    std::int64_t l = 2 * bigk + 1;

    TensorT<S> grid = view(p.frames, Shape{n, bigk, c});  // [n][k] -> frame n*K+k
    std::vector<TensorT<S>> per_slice;
    per_slice.reserve(bigk);
    for (std::int64_t k = 0; k < bigk; ++k) {
        const auto& sl = slices[static_cast<std::size_t>(k)];
        if (sl.slice_index != k)
            throw ContractError("structured_context: slice " + std::to_string(k) + " out of order");
        TensorT<S> center = slice(grid, 1, k, 1);  // [N,1,C]
        TensorT<S> win = concat<S>({sl.left, center, sl.right}, 1);  // [N,L,C]
        per_slice.push_back(view(win, Shape{n, 1, l, c}));
    }
    TensorT<S> stacked = concat<S>(per_slice, 1);  // [N,K,L,C], (n,k) -> frame n*K+k
    return view(stacked, Shape{tp, l, c});
}

// Spec-shaped list view of the batched windows (valueside only, no graph).
template <class S>
std::vector<StructuredContextT<S>> context_list(const TensorT<S>& windows) {
    if (windows.rank() != 3)
        throw DimError("context_list: expected [T',L,C], got " + shape_str(windows.shape()));
    NoGrad ng;
    std::vector<StructuredContextT<S>> out;
    std::int64_t tp = windows.extent(0);
    out.reserve(tp);
    for (std::int64_t t = 0; t < tp; ++t) {
        TensorT<S> w = slice(windows, 0, t, 1);
        out.push_back({view(w, Shape{windows.extent(1), windows.extent(2)}), t});
    }
    return out;
}

// Closed form for the frame-row ops performed by pad + all K build_slice
// calls: pad touches T' rows, each slice builds two shifted T'-row copies,
// so the count is (2K+1) * T'. The instrumented counter is asserted against
// this in tests. C does not enter: the unit is frame vectors, not scalars.
std::uint64_t count_context_ops(std::int64_t t, std::int64_t k, std::int64_t c);

// The paper's attention cost forms (section 3.1): local windows vs global.
std::uint64_t attention_cost_local(std::int64_t t, std::int64_t k, std::int64_t c);
std::uint64_t attention_cost_global(std::int64_t t, std::int64_t c);

}  // namespace spos
