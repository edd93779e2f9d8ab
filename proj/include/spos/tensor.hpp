#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spos/error.hpp"
#include "spos/kernels.hpp"
#include "spos/rng.hpp"

namespace spos {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Autodiff graph control. Graph recording is on by default; NoGrad turns it
// off in a scope (predictions, evaluation).
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_enabled()) { set_grad_enabled(false); }
    ~NoGrad() { set_grad_enabled(prev); }
};

// Runtime warning counter; currently counts elementwise divisions by zero.
std::uint64_t runtime_warnings();
void reset_runtime_warnings();
void count_runtime_warning();

template <class S>
struct NodeT {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;  // sized lazily; accumulates until zero_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backfn;

    std::int64_t numel() const { return shape_numel(shape); }
    void ensure_grad() {
        if (static_cast<std::int64_t>(grad.size()) != numel()) grad.assign(numel(), S(0));
    }
};

// Value + gradient holder with reverse-mode autodiff. Copies are shallow
// (shared node), matching how parameters and graph edges are used.
template <class S>
class TensorT {
  public:
    TensorT() = default;

    explicit TensorT(Shape shape, bool requires_grad = false) {
        n_ = std::make_shared<NodeT<S>>();
        n_->shape = std::move(shape);
        n_->val.assign(n_->numel(), S(0));
        n_->requires_grad = requires_grad;
    }

    static TensorT from_values(Shape shape, std::vector<S> v, bool requires_grad = false) {
        TensorT t;
        t.n_ = std::make_shared<NodeT<S>>();
        t.n_->shape = std::move(shape);
        if (static_cast<std::int64_t>(v.size()) != t.n_->numel())
            throw DimError("from_values: " + std::to_string(v.size()) + " values for shape " +
                           shape_str(t.n_->shape));
        t.n_->val = std::move(v);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static TensorT full(Shape shape, S v, bool requires_grad = false) {
        TensorT t(std::move(shape), requires_grad);
        std::fill(t.val().begin(), t.val().end(), v);
        return t;
    }

    static TensorT uniform(Shape shape, Rng& rng, double lo, double hi,
                           bool requires_grad = false) {
        TensorT t(std::move(shape), requires_grad);
        for (auto& x : t.val()) x = static_cast<S>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(n_->shape.size()); }
    std::int64_t extent(std::int64_t i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return n_->numel(); }
    std::vector<S>& val() { return n_->val; }
    const std::vector<S>& val() const { return n_->val; }
    std::vector<S>& grad() { return n_->grad; }
    const std::vector<S>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }

    S item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return n_->val[0];
    }

    std::shared_ptr<NodeT<S>> node() const { return n_; }

  private:
    std::shared_ptr<NodeT<S>> n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class S>
void attach(TensorT<S>& out, std::vector<std::shared_ptr<NodeT<S>>> parents,
            std::function<void(NodeT<S>&)> backfn) {
    bool any = false;
    for (auto& p : parents) any = any || p->requires_grad;
    if (!grad_enabled() || !any) return;
    auto n = out.node();
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
}

// Suffix broadcast: small must equal the trailing extents of big.
inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---- backward ------------------------------------------------------------

template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: root must be a scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad)
        throw ContractError("backward: root does not require grad");

    // Iterative post-order DFS for a topological order.
    std::vector<NodeT<S>*> topo;
    std::unordered_set<NodeT<S>*> seen;
    std::vector<std::pair<NodeT<S>*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<S>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backfn) (*it)->backfn(**it);
    }
}

template <class S>
void zero_grad(TensorT<S>& t) {
    auto& g = t.grad();
    std::fill(g.begin(), g.end(), S(0));
}

// ---- elementwise binary ops ------------------------------------------------

namespace detail {

// Applies f elementwise with suffix broadcasting; exactly one operand may be
// the smaller one. Returns the result plus which side was broadcast.
template <class S, class F>
TensorT<S> binary_fwd(const TensorT<S>& a, const TensorT<S>& b, F f, const char* name,
                      int& bcast /*0 none, 1 b broadcast, 2 a broadcast*/) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) {
        bcast = 0;
        TensorT<S> out(sa);
        const auto& va = a.val();
        const auto& vb = b.val();
        auto& vo = out.val();
        for (std::int64_t i = 0; i < out.numel(); ++i) vo[i] = f(va[i], vb[i]);
        return out;
    }
    if (is_suffix(sa, sb)) {
        bcast = 1;
        TensorT<S> out(sa);
        std::int64_t inner = b.numel();
        std::int64_t outer = a.numel() / std::max<std::int64_t>(inner, 1);
        if (inner == 0) throw DimError(std::string(name) + ": empty operand " + shape_str(sb));
        const auto& va = a.val();
        const auto& vb = b.val();
        auto& vo = out.val();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i)
                vo[o * inner + i] = f(va[o * inner + i], vb[i]);
        return out;
    }
    if (is_suffix(sb, sa)) {
        bcast = 2;
        TensorT<S> out(sb);
        std::int64_t inner = a.numel();
        std::int64_t outer = b.numel() / std::max<std::int64_t>(inner, 1);
        if (inner == 0) throw DimError(std::string(name) + ": empty operand " + shape_str(sa));
        const auto& va = a.val();
        const auto& vb = b.val();
        auto& vo = out.val();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i)
                vo[o * inner + i] = f(va[i], vb[o * inner + i]);
        return out;
    }
    throw DimError(std::string(name) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                   " neither match nor suffix-broadcast");
}

// Accumulates src (shaped like the big operand) into dst (small operand),
// summing over the leading broadcast block in ascending order.
template <class S>
void reduce_into(const std::vector<S>& src, std::vector<S>& dst) {
    std::int64_t inner = static_cast<std::int64_t>(dst.size());
    std::int64_t outer = static_cast<std::int64_t>(src.size()) / inner;
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[o * inner + i];
}

// dst (big) += src applied elementwise where factor comes from the small side.
template <class S, class G>
void accum_big(NodeT<S>& self, NodeT<S>& target, G g) {
    target.ensure_grad();
    for (std::int64_t i = 0; i < self.numel(); ++i) target.grad[i] += g(i);
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    int bc = 0;
    TensorT<S> out = detail::binary_fwd(a, b, [](S x, S y) { return x + y; }, "add", bc);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), bc](NodeT<S>& self) {
            auto pass = [&](const std::shared_ptr<NodeT<S>>& p, bool small) {
                if (!p->requires_grad) return;
                p->ensure_grad();
                if (!small) {
                    for (std::int64_t i = 0; i < self.numel(); ++i) p->grad[i] += self.grad[i];
                } else {
                    detail::reduce_into(self.grad, p->grad);
                }
            };
            pass(pa, bc == 2);
            pass(pb, bc == 1);
        });
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    int bc = 0;
    TensorT<S> out = detail::binary_fwd(a, b, [](S x, S y) { return x - y; }, "sub", bc);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), bc](NodeT<S>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                if (bc == 2) {
                    detail::reduce_into(self.grad, pa->grad);
                } else {
                    for (std::int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (bc == 1) {
                    std::vector<S> neg(self.grad.size());
                    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
                    detail::reduce_into(neg, pb->grad);
                } else {
                    for (std::int64_t i = 0; i < self.numel(); ++i) pb->grad[i] -= self.grad[i];
                }
            }
        });
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    int bc = 0;
    TensorT<S> out = detail::binary_fwd(a, b, [](S x, S y) { return x * y; }, "mul", bc);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), bc](NodeT<S>& self) {
            std::int64_t n = self.numel();
            auto other_at = [&](const std::shared_ptr<NodeT<S>>& p, std::int64_t i) {
                // value of the *other* operand at flat index i of the big shape
                std::int64_t pn = p->numel();
                return p->val[pn == n ? i : i % pn];
            };
            if (pa->requires_grad) {
                pa->ensure_grad();
                if (bc == 2) {
                    std::int64_t inner = pa->numel();
                    for (std::int64_t i = 0; i < n; ++i)
                        pa->grad[i % inner] += self.grad[i] * pb->val[i];
                } else {
                    for (std::int64_t i = 0; i < n; ++i)
                        pa->grad[i] += self.grad[i] * other_at(pb, i);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (bc == 1) {
                    std::int64_t inner = pb->numel();
                    for (std::int64_t i = 0; i < n; ++i)
                        pb->grad[i % inner] += self.grad[i] * pa->val[i];
                } else {
                    for (std::int64_t i = 0; i < n; ++i)
                        pb->grad[i] += self.grad[i] * other_at(pa, i);
                }
            }
        });
    return out;
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    for (auto y : b.val())
        if (y == S(0)) {
            count_runtime_warning();
            break;
        }
    int bc = 0;
    TensorT<S> out = detail::binary_fwd(a, b, [](S x, S y) { return x / y; }, "div", bc);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), bc](NodeT<S>& self) {
            std::int64_t n = self.numel();
            auto val_at = [&](const std::shared_ptr<NodeT<S>>& p, std::int64_t i) {
                std::int64_t pn = p->numel();
                return p->val[pn == n ? i : i % pn];
            };
            if (pa->requires_grad) {
                pa->ensure_grad();
                if (bc == 2) {
                    std::int64_t inner = pa->numel();
                    for (std::int64_t i = 0; i < n; ++i)
                        pa->grad[i % inner] += self.grad[i] / pb->val[i];
                } else {
                    for (std::int64_t i = 0; i < n; ++i)
                        pa->grad[i] += self.grad[i] / val_at(pb, i);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) {
                    S bv = val_at(pb, i);
                    S contrib = -self.grad[i] * val_at(pa, i) / (bv * bv);
                    pb->grad[bc == 1 ? i % pb->numel() : i] += contrib;
                }
            }
        });
    return out;
}

template <class S> TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <class S> TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <class S> TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }
template <class S> TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) { return div(a, b); }

// ---- elementwise unary ops ---------------------------------------------------

namespace detail {

// Generic unary op; dfn(x, y, dy) returns the contribution to dx.
template <class S, class F, class D>
TensorT<S> unary(const TensorT<S>& a, F f, D dfn) {
    TensorT<S> out(a.shape());
    const auto& va = a.val();
    auto& vo = out.val();
    for (std::int64_t i = 0; i < a.numel(); ++i) vo[i] = f(va[i]);
    attach<S>(out, {a.node()}, [pa = a.node(), dfn](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.numel(); ++i)
            pa->grad[i] += dfn(pa->val[i], self.val[i], self.grad[i]);
    });
    return out;
}

}  // namespace detail

template <class S>
TensorT<S> neg(const TensorT<S>& a) {
    return detail::unary(a, [](S x) { return -x; }, [](S, S, S dy) { return -dy; });
}

template <class S>
TensorT<S> exp(const TensorT<S>& a) {
    return detail::unary(a, [](S x) { return std::exp(x); }, [](S, S y, S dy) { return dy * y; });
}

template <class S>
TensorT<S> log(const TensorT<S>& a) {
    for (auto x : a.val())
        if (x <= S(0)) throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(x)));
    return detail::unary(a, [](S x) { return std::log(x); }, [](S x, S, S dy) { return dy / x; });
}

template <class S>
TensorT<S> sqrt(const TensorT<S>& a) {
    for (auto x : a.val())
        if (x < S(0)) throw DomainError("sqrt: negative input " + std::to_string(static_cast<double>(x)));
    return detail::unary(a, [](S x) { return std::sqrt(x); },
                         [](S, S y, S dy) { return y > S(0) ? dy * S(0.5) / y : S(0); });
}

template <class S>
TensorT<S> tanh(const TensorT<S>& a) {
    return detail::unary(a, [](S x) { return std::tanh(x); },
                         [](S, S y, S dy) { return dy * (S(1) - y * y); });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    return detail::unary(a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
                         [](S, S y, S dy) { return dy * y * (S(1) - y); });
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    return detail::unary(a, [](S x) { return x > S(0) ? x : S(0); },
                         [](S x, S, S dy) { return x > S(0) ? dy : S(0); });
}

template <class S>
TensorT<S> clamp(const TensorT<S>& a, S lo, S hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    return detail::unary(a, [lo, hi](S x) { return std::min(std::max(x, lo), hi); },
                         [lo, hi](S x, S, S dy) { return (x >= lo && x <= hi) ? dy : S(0); });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, S s) {
    return detail::unary(a, [s](S x) { return x + s; }, [](S, S, S dy) { return dy; });
}

template <class S>
TensorT<S> mul_scalar(const TensorT<S>& a, S s) {
    return detail::unary(a, [s](S x) { return x * s; }, [s](S, S, S dy) { return dy * s; });
}

// s - a, elementwise.
template <class S>
TensorT<S> rsub_scalar(S s, const TensorT<S>& a) {
    return detail::unary(a, [s](S x) { return s - x; }, [](S, S, S dy) { return -dy; });
}

// ---- matmul / bmm ---------------------------------------------------------------

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    std::int64_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw DimError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    TensorT<S> out(Shape{m, n});
    kernels::gemm<S>(false, false, m, n, k, a.val().data(), b.val().data(), out.val().data(), false);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), m, n, k](NodeT<S>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                // da[m,k] += dc[m,n] * b[k,n]^T
                kernels::gemm<S>(false, true, m, k, n, self.grad.data(), pb->val.data(),
                                 pa->grad.data(), true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // db[k,n] += a[m,k]^T * dc[m,n]
                kernels::gemm<S>(true, false, k, n, m, pa->val.data(), self.grad.data(),
                                 pb->grad.data(), true);
            }
        });
    return out;
}

// Batched matmul; b_nt selects b slices stored transposed ([B,n,k] instead of
// [B,k,n]), which is how attention consumes keys.
template <class S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b, bool b_nt = false) {
    if (a.rank() != 3 || b.rank() != 3)
        throw DimError("bmm: expected rank-3 operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    std::int64_t bs = a.extent(0), m = a.extent(1), k = a.extent(2);
    std::int64_t bs2 = b.extent(0);
    std::int64_t kb = b_nt ? b.extent(2) : b.extent(1);
    std::int64_t n = b_nt ? b.extent(1) : b.extent(2);
    if (bs != bs2 || k != kb)
        throw DimError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    TensorT<S> out(Shape{bs, m, n});
    kernels::bmm<S>(false, b_nt, bs, m, n, k, a.val().data(), b.val().data(), out.val().data(),
                    false);
    detail::attach<S>(out, {a.node(), b.node()},
        [pa = a.node(), pb = b.node(), bs, m, n, k, b_nt](NodeT<S>& self) {
            if (pa->requires_grad) {
                pa->ensure_grad();
                if (!b_nt) {
                    // da[b,m,k] += dc[b,m,n] * b[b,k,n]^T
                    kernels::bmm<S>(false, true, bs, m, k, n, self.grad.data(), pb->val.data(),
                                    pa->grad.data(), true);
                } else {
                    // b stored [b,n,k]: da[b,m,k] += dc[b,m,n] * b[b,n,k]
                    kernels::bmm<S>(false, false, bs, m, k, n, self.grad.data(), pb->val.data(),
                                    pa->grad.data(), true);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                if (!b_nt) {
                    // db[b,k,n] += a[b,m,k]^T * dc[b,m,n]
                    kernels::bmm<S>(true, false, bs, k, n, m, pa->val.data(), self.grad.data(),
                                    pb->grad.data(), true);
                } else {
                    // db[b,n,k] += dc[b,m,n]^T * a[b,m,k]
                    kernels::bmm<S>(true, false, bs, n, k, m, self.grad.data(), pa->val.data(),
                                    pb->grad.data(), true);
                }
            }
        });
    return out;
}

// ---- shape ops ---------------------------------------------------------------------

template <class S>
TensorT<S> view(const TensorT<S>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimError("view: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    TensorT<S> out = TensorT<S>::from_values(std::move(shape), a.val());
    detail::attach<S>(out, {a.node()}, [pa = a.node()](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
    });
    return out;
}

namespace detail {

inline std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// Flat source index for each flat destination index of a permute.
inline std::int64_t permute_src_index(std::int64_t dst, const Shape& out_shape,
                                      const std::vector<std::int64_t>& in_strides,
                                      const std::vector<std::int64_t>& axes) {
    std::int64_t src = 0;
    for (std::int64_t d = static_cast<std::int64_t>(out_shape.size()) - 1; d >= 0; --d) {
        std::int64_t coord = dst % out_shape[d];
        dst /= out_shape[d];
        src += coord * in_strides[axes[d]];
    }
    return src;
}

// Calls f(dst, src) over all flat destination indices in order, tracking the
// source offset incrementally so the inner loop is additions only.
template <class F>
void permute_walk(const Shape& out_shape, const std::vector<std::int64_t>& src_strides, F&& f) {
    std::int64_t r = static_cast<std::int64_t>(out_shape.size());
    std::int64_t n = 1;
    for (std::int64_t e : out_shape) n *= e;
    if (n == 0) return;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t src = 0;
    for (std::int64_t i = 0;;) {
        f(i, src);
        if (++i == n) break;
        for (std::int64_t d = r - 1; d >= 0; --d) {
            ++idx[d];
            src += src_strides[d];
            if (idx[d] < out_shape[d]) break;
            src -= out_shape[d] * src_strides[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

template <class S>
TensorT<S> permute(const TensorT<S>& a, std::vector<std::int64_t> axes) {
    std::int64_t r = a.rank();
    if (static_cast<std::int64_t>(axes.size()) != r)
        throw ContractError("permute: axes size " + std::to_string(axes.size()) + " vs rank " +
                            std::to_string(r));
    std::vector<bool> used(r, false);
    Shape out_shape(r);
    for (std::int64_t d = 0; d < r; ++d) {
        if (axes[d] < 0 || axes[d] >= r || used[axes[d]])
            throw ContractError("permute: invalid axes");
        used[axes[d]] = true;
        out_shape[d] = a.extent(axes[d]);
    }
    auto in_strides = detail::strides_of(a.shape());
    std::vector<std::int64_t> src_strides(axes.size());
    for (std::size_t d = 0; d < axes.size(); ++d) src_strides[d] = in_strides[axes[d]];
    TensorT<S> out(out_shape);
    const auto& va = a.val();
    auto& vo = out.val();
    detail::permute_walk(out_shape, src_strides,
                         [&](std::int64_t dst, std::int64_t src) { vo[dst] = va[src]; });
    detail::attach<S>(out, {a.node()}, [pa = a.node(), out_shape, src_strides](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        detail::permute_walk(out_shape, src_strides, [&](std::int64_t dst, std::int64_t src) {
            pa->grad[src] += self.grad[dst];
        });
    });
    return out;
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::int64_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    std::int64_t r = parts[0].rank();
    if (axis < 0 || axis >= r) throw ContractError("concat: bad axis " + std::to_string(axis));
    Shape out_shape = parts[0].shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw DimError("concat: rank mismatch");
        for (std::int64_t d = 0; d < r; ++d)
            if (d != axis && p.extent(d) != out_shape[d])
                throw DimError("concat: shape mismatch at axis " + std::to_string(d) + ": " +
                               shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        total += p.extent(axis);
    }
    out_shape[axis] = total;

    auto st = detail::strides_of(out_shape);
    std::int64_t outer = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= out_shape[d];
    std::int64_t inner = st[axis];  // elements per step along axis

    TensorT<S> out(out_shape);
    auto& vo = out.val();
    std::int64_t offset = 0;  // running start along axis
    for (const auto& p : parts) {
        std::int64_t pa = p.extent(axis);
        const auto& vp = p.val();
        for (std::int64_t o = 0; o < outer; ++o) {
            const S* src = vp.data() + o * pa * inner;
            S* dst = vo.data() + (o * total + offset) * inner;
            std::copy(src, src + pa * inner, dst);
        }
        offset += pa;
    }

    std::vector<std::shared_ptr<NodeT<S>>> parents;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        extents.push_back(p.extent(axis));
    }
    detail::attach<S>(out, parents, [parents, extents, outer, inner, total](NodeT<S>& self) {
        std::int64_t offset = 0;
        for (std::size_t pi = 0; pi < parents.size(); ++pi) {
            auto& p = parents[pi];
            std::int64_t pa = extents[pi];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const S* src = self.grad.data() + (o * total + offset) * inner;
                    S* dst = p->grad.data() + o * pa * inner;
                    for (std::int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                }
            }
            offset += pa;
        }
    });
    return out;
}

template <class S>
TensorT<S> slice(const TensorT<S>& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
    std::int64_t r = a.rank();
    if (axis < 0 || axis >= r) throw ContractError("slice: bad axis " + std::to_string(axis));
    std::int64_t ext = a.extent(axis);
    if (start < 0 || len < 0 || start + len > ext)
        throw ContractError("slice: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") out of extent " + std::to_string(ext));
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    auto st = detail::strides_of(a.shape());
    std::int64_t inner = st[axis];
    std::int64_t outer = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= a.extent(d);

    TensorT<S> out(out_shape);
    const auto& va = a.val();
    auto& vo = out.val();
    for (std::int64_t o = 0; o < outer; ++o) {
        const S* src = va.data() + (o * ext + start) * inner;
        std::copy(src, src + len * inner, vo.data() + o * len * inner);
    }
    detail::attach<S>(out, {a.node()},
        [pa = a.node(), outer, inner, ext, start, len](NodeT<S>& self) {
            if (!pa->requires_grad) return;
            pa->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
                const S* src = self.grad.data() + o * len * inner;
                S* dst = pa->grad.data() + (o * ext + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    return out;
}

// ---- reductions -------------------------------------------------------------------

namespace detail {

template <class S>
void reduce_geometry(const TensorT<S>& a, std::int64_t axis, std::int64_t& outer,
                     std::int64_t& len, std::int64_t& inner, Shape& out_shape) {
    if (axis < 0 || axis >= a.rank())
        throw ContractError("reduce: bad axis " + std::to_string(axis) + " for shape " +
                            shape_str(a.shape()));
    outer = 1;
    inner = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= a.extent(d);
    len = a.extent(axis);
    for (std::int64_t d = axis + 1; d < a.rank(); ++d) inner *= a.extent(d);
    out_shape.clear();
    for (std::int64_t d = 0; d < a.rank(); ++d)
        if (d != axis) out_shape.push_back(a.extent(d));
}

}  // namespace detail

template <class S>
TensorT<S> reduce_sum(const TensorT<S>& a, std::int64_t axis) {
    std::int64_t outer, len, inner;
    Shape out_shape;
    detail::reduce_geometry(a, axis, outer, len, inner, out_shape);
    TensorT<S> out(out_shape);
    const auto& va = a.val();
    auto& vo = out.val();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t l = 0; l < len; ++l)
            for (std::int64_t i = 0; i < inner; ++i)
                vo[o * inner + i] += va[(o * len + l) * inner + i];
    detail::attach<S>(out, {a.node()}, [pa = a.node(), outer, len, inner](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t l = 0; l < len; ++l)
                for (std::int64_t i = 0; i < inner; ++i)
                    pa->grad[(o * len + l) * inner + i] += self.grad[o * inner + i];
    });
    return out;
}

template <class S>
TensorT<S> reduce_mean(const TensorT<S>& a, std::int64_t axis) {
    std::int64_t len = a.extent(axis);
    if (len == 0) throw ContractError("reduce_mean: empty axis");
    return mul_scalar(reduce_sum(a, axis), S(1) / S(len));
}

template <class S>
TensorT<S> reduce_max(const TensorT<S>& a, std::int64_t axis) {
    std::int64_t outer, len, inner;
    Shape out_shape;
    detail::reduce_geometry(a, axis, outer, len, inner, out_shape);
    if (len == 0) throw ContractError("reduce_max: empty axis");
    TensorT<S> out(out_shape);
    // argmax kept for the backward pass; ties go to the smallest index
    auto arg = std::make_shared<std::vector<std::int64_t>>(outer * inner, 0);
    const auto& va = a.val();
    auto& vo = out.val();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
            S best = va[(o * len) * inner + i];
            std::int64_t bl = 0;
            for (std::int64_t l = 1; l < len; ++l) {
                S v = va[(o * len + l) * inner + i];
                if (v > best) {
                    best = v;
                    bl = l;
                }
            }
            vo[o * inner + i] = best;
            (*arg)[o * inner + i] = bl;
        }
    detail::attach<S>(out, {a.node()}, [pa = a.node(), arg, outer, len, inner](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
                std::int64_t bl = (*arg)[o * inner + i];
                pa->grad[(o * len + bl) * inner + i] += self.grad[o * inner + i];
            }
    });
    return out;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    TensorT<S> out(Shape{});
    S acc = 0;
    for (auto v : a.val()) acc += v;
    out.val()[0] = acc;
    detail::attach<S>(out, {a.node()}, [pa = a.node()](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        for (auto& g : pa->grad) g += self.grad[0];
    });
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& a) {
    if (a.numel() == 0) throw ContractError("mean_all: empty tensor");
    return mul_scalar(sum_all(a), S(1) / S(a.numel()));
}

// ---- fused ops over the last axis ------------------------------------------------

template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& a) {
    if (a.rank() < 1) throw ContractError("softmax: rank-0 input");
    std::int64_t n = a.extent(a.rank() - 1);
    if (n == 0) throw ContractError("softmax: empty last axis");
    std::int64_t rows = a.numel() / n;
    TensorT<S> out(a.shape());
    kernels::softmax_rows(a.val().data(), out.val().data(), rows, n);
    detail::attach<S>(out, {a.node()}, [pa = a.node(), rows, n](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        kernels::softmax_rows_grad(self.val.data(), self.grad.data(), pa->grad.data(), rows, n);
    });
    return out;
}

template <class S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias,
                      S eps = S(1e-5)) {
    if (a.rank() < 1) throw ContractError("layer_norm: rank-0 input");
    std::int64_t n = a.extent(a.rank() - 1);
    if (gain.numel() != n || bias.numel() != n)
        throw DimError("layer_norm: gain/bias size must match last extent " + std::to_string(n));
    std::int64_t rows = a.numel() / n;
    TensorT<S> out(a.shape());
    auto xhat = std::make_shared<std::vector<S>>(a.numel());
    auto inv_sigma = std::make_shared<std::vector<S>>(rows);
    kernels::layernorm_rows(a.val().data(), gain.val().data(), bias.val().data(),
                            out.val().data(), xhat->data(), inv_sigma->data(), rows, n, eps);
    detail::attach<S>(out, {a.node(), gain.node(), bias.node()},
        [pa = a.node(), pg = gain.node(), pb = bias.node(), xhat, inv_sigma, rows, n](NodeT<S>& self) {
            S* dg = nullptr;
            S* db = nullptr;
            if (pg->requires_grad) {
                pg->ensure_grad();
                dg = pg->grad.data();
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                db = pb->grad.data();
            }
            if (pa->requires_grad) {
                pa->ensure_grad();
                kernels::layernorm_rows_grad(xhat->data(), inv_sigma->data(), pg->val.data(),
                                             self.grad.data(), pa->grad.data(), dg, db, rows, n);
            } else if (dg || db) {
                std::vector<S> scratch(pa->numel(), S(0));
                kernels::layernorm_rows_grad(xhat->data(), inv_sigma->data(), pg->val.data(),
                                             self.grad.data(), scratch.data(), dg, db, rows, n);
            }
        });
    return out;
}

// ---- structured ops ----------------------------------------------------------------

// out[i,:] = a[clamp(i + shift, 0, hi), :] over a rank-2 tensor.
template <class S>
TensorT<S> rows_shift_clamp(const TensorT<S>& a, std::int64_t shift, std::int64_t hi) {
    if (a.rank() != 2) throw DimError("rows_shift_clamp: expected rank-2, got " + shape_str(a.shape()));
    std::int64_t rows = a.extent(0), cols = a.extent(1);
    if (hi < 0 || hi >= rows) throw ContractError("rows_shift_clamp: hi out of range");
    TensorT<S> out(a.shape());
    kernels::rows_shift_clamp(a.val().data(), out.val().data(), rows, cols, shift, hi);
    detail::attach<S>(out, {a.node()}, [pa = a.node(), rows, cols, shift, hi](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        kernels::rows_shift_clamp_grad(self.grad.data(), pa->grad.data(), rows, cols, shift, hi);
    });
    return out;
}

namespace detail {

// Patch buffers are large (rows * kh*kw*Ci) and fully overwritten on every
// use, so they are kept per thread instead of reallocated per call.
template <class S>
std::vector<S>& conv_scratch(std::size_t n) {
    thread_local std::vector<S> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

}  // namespace detail

// NHWC convolution, stride 1, same zero padding. x [B,H,W,Ci], w [kh,kw,Ci,Co],
// bias [Co] (optional, pass undefined tensor to skip).
template <class S>
TensorT<S> conv2d_nhwc(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                       kernels::Pad pad = kernels::Pad::zero) {
    if (x.rank() != 4) throw DimError("conv2d: input must be [B,H,W,C], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw DimError("conv2d: weight must be [kh,kw,Ci,Co], got " + shape_str(w.shape()));
    std::int64_t b = x.extent(0), h = x.extent(1), ww = x.extent(2), ci = x.extent(3);
    std::int64_t kh = w.extent(0), kw = w.extent(1), wci = w.extent(2), co = w.extent(3);
    if (ci != wci)
        throw DimError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (bias.defined() && bias.numel() != co)
        throw DimError("conv2d: bias size " + std::to_string(bias.numel()) + " vs co " + std::to_string(co));

    std::int64_t rows = b * h * ww, pk = kh * kw * ci;
    std::vector<S>& patches = detail::conv_scratch<S>(static_cast<std::size_t>(rows) * pk);
    kernels::im2col_nhwc(x.val().data(), b, h, ww, ci, kh, kw, patches.data(), pad);

    TensorT<S> out(Shape{b, h, ww, co});
    kernels::gemm<S>(false, false, rows, co, pk, patches.data(), w.val().data(), out.val().data(),
                     false);
    if (bias.defined()) {
        auto& vo = out.val();
        const auto& vb = bias.val();
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t o = 0; o < co; ++o) vo[r * co + o] += vb[o];
    }

    std::vector<std::shared_ptr<NodeT<S>>> parents{x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    auto pbias = bias.defined() ? bias.node() : nullptr;
    detail::attach<S>(out, parents,
        [px = x.node(), pw = w.node(), pbias, b, h, ww, ci, kh, kw, co, rows, pk, pad](NodeT<S>& self) {
            // patches are recomputed rather than saved; trades a little time
            // for a much smaller live graph
            if (pw->requires_grad) {
                std::vector<S>& patches = detail::conv_scratch<S>(static_cast<std::size_t>(rows) * pk);
                kernels::im2col_nhwc(px->val.data(), b, h, ww, ci, kh, kw, patches.data(), pad);
                pw->ensure_grad();
                // dw[pk,co] += patches^T[rows,pk] * dy[rows,co]
                kernels::gemm<S>(true, false, pk, co, rows, patches.data(), self.grad.data(),
                                 pw->grad.data(), true);
            }
            if (pbias && pbias->requires_grad) {
                pbias->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t o = 0; o < co; ++o) pbias->grad[o] += self.grad[r * co + o];
            }
            if (px->requires_grad) {
                px->ensure_grad();
                // dpatches[rows,pk] = dy[rows,co] * w[pk,co]^T, then scatter;
                // the weight gradient above is done with the scratch by now
                std::vector<S>& dpatches = detail::conv_scratch<S>(static_cast<std::size_t>(rows) * pk);
                kernels::gemm<S>(false, true, rows, pk, co, self.grad.data(), pw->val.data(),
                                 dpatches.data(), false);
                kernels::col2im_nhwc(dpatches.data(), b, h, ww, ci, kh, kw, px->grad.data(), pad);
            }
        });
    return out;
}

// 1D convolution over a sequence, stride 1, same zero padding.
// x [T,Ci], w [k,Ci,Co], bias [Co] (optional).
template <class S>
TensorT<S> conv1d_seq(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias) {
    if (x.rank() != 2) throw DimError("conv1d: input must be [T,C], got " + shape_str(x.shape()));
    if (w.rank() != 3) throw DimError("conv1d: weight must be [k,Ci,Co], got " + shape_str(w.shape()));
    std::int64_t t = x.extent(0), ci = x.extent(1);
    std::int64_t k = w.extent(0), wci = w.extent(1), co = w.extent(2);
    if (ci != wci)
        throw DimError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (bias.defined() && bias.numel() != co)
        throw DimError("conv1d: bias size " + std::to_string(bias.numel()) + " vs co " + std::to_string(co));

    TensorT<S> out(Shape{t, co});
    kernels::conv1d_same(x.val().data(), w.val().data(),
                         bias.defined() ? bias.val().data() : nullptr, out.val().data(), t, ci, co, k);

    std::vector<std::shared_ptr<NodeT<S>>> parents{x.node(), w.node()};
    if (bias.defined()) parents.push_back(bias.node());
    auto pbias = bias.defined() ? bias.node() : nullptr;
    detail::attach<S>(out, parents,
        [px = x.node(), pw = w.node(), pbias, t, ci, co, k](NodeT<S>& self) {
            S* dx = nullptr;
            S* dw = nullptr;
            S* db = nullptr;
            if (px->requires_grad) {
                px->ensure_grad();
                dx = px->grad.data();
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                dw = pw->grad.data();
            }
            if (pbias && pbias->requires_grad) {
                pbias->ensure_grad();
                db = pbias->grad.data();
            }
            kernels::conv1d_same_grad(px->val.data(), pw->val.data(), self.grad.data(), dx, dw, db,
                                      t, ci, co, k);
        });
    return out;
}

// Grouped similarity maps. xg [B,L,G,Cg] -> [B,G,L,L].
template <class S>
TensorT<S> similarity_maps(const TensorT<S>& xg, kernels::Metric metric) {
    if (xg.rank() != 4)
        throw DimError("similarity_maps: input must be [B,L,G,Cg], got " + shape_str(xg.shape()));
    std::int64_t b = xg.extent(0), l = xg.extent(1), g = xg.extent(2), cg = xg.extent(3);
    TensorT<S> out(Shape{b, g, l, l});
    kernels::similarity(xg.val().data(), out.val().data(), b, l, g, cg, metric);
    detail::attach<S>(out, {xg.node()}, [pa = xg.node(), b, l, g, cg, metric](NodeT<S>& self) {
        if (!pa->requires_grad) return;
        pa->ensure_grad();
        kernels::similarity_grad(pa->val.data(), self.grad.data(), pa->grad.data(), b, l, g, cg,
                                 metric);
    });
    return out;
}

}  // namespace spos
