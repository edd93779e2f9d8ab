#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "spos/kernels.hpp"
#include "spos/rng.hpp"

using namespace spos;
namespace K = spos::kernels;

namespace {

template <class S>
std::vector<S> rand_vec(Rng& rng, std::int64_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<S> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return v;
}

// Reference gemm: plain triple loop with k innermost, no blocking.
template <class S>
void gemm_ref(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              const S* a, const S* b, S* c, bool accumulate) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            double acc = accumulate ? static_cast<double>(c[i * n + j]) : 0.0;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                double av = ta ? a[kk * m + i] : a[i * k + kk];
                double bv = tb ? b[j * k + kk] : b[kk * n + j];
                acc += av * bv;
            }
            c[i * n + j] = static_cast<S>(acc);
        }
}

bool close_rel(double a, double b, double rel, double abs = 1e-12) {
    return std::abs(a - b) <= abs + rel * std::max(std::abs(a), std::abs(b));
}

struct ExecGuard {
    K::Exec prev;
    ExecGuard() : prev(K::exec()) {}
    ~ExecGuard() { K::set_exec(prev); }
};

}  // namespace

TEST_CASE("gemm: serial and omp agree bitwise, blas within tolerance") {
    Rng rng(2024);
    for (int trial = 0; trial < 60; ++trial) {
        std::int64_t m = rng.uniform_int(1, 17), n = rng.uniform_int(1, 17), k = rng.uniform_int(1, 17);
        bool ta = rng.uniform() < 0.3;
        bool tb = !ta && rng.uniform() < 0.5;
        bool acc = rng.uniform() < 0.5;
        auto a = rand_vec<float>(rng, m * k);
        auto b = rand_vec<float>(rng, k * n);
        auto base = rand_vec<float>(rng, m * n);

        auto cs = base, co = base, cb = base, cr = base;
        K::gemm_serial(ta, tb, m, n, k, a.data(), b.data(), cs.data(), acc);
        K::gemm_omp(ta, tb, m, n, k, a.data(), b.data(), co.data(), acc);
        CHECK(cs == co);  // identical per-element order, bitwise

        // reference accumulates in double; float sums cancel near zero, so an
        // absolute floor sized to k * eps_f32 * |values| is required
        gemm_ref(ta, tb, m, n, k, a.data(), b.data(), cr.data(), acc);
        for (std::int64_t i = 0; i < m * n; ++i)
            CHECK(close_rel(cs[i], cr[i], 1e-5, 1e-4));

        if (K::blas_available()) {
            K::gemm_blas(ta, tb, m, n, k, a.data(), b.data(), cb.data(), acc);
            for (std::int64_t i = 0; i < m * n; ++i)
                CHECK(close_rel(cb[i], cr[i], 1e-5, 1e-4));
        }
    }
}

TEST_CASE("gemm: double precision matches reference tightly") {
    Rng rng(2025);
    for (int trial = 0; trial < 20; ++trial) {
        std::int64_t m = rng.uniform_int(1, 12), n = rng.uniform_int(1, 12), k = rng.uniform_int(1, 12);
        auto a = rand_vec<double>(rng, m * k);
        auto b = rand_vec<double>(rng, k * n);
        std::vector<double> c1(m * n, 0), c2(m * n, 0);
        K::gemm_serial(false, false, m, n, k, a.data(), b.data(), c1.data(), false);
        gemm_ref(false, false, m, n, k, a.data(), b.data(), c2.data(), false);
        for (std::int64_t i = 0; i < m * n; ++i)
            CHECK(close_rel(c1[i], c2[i], 1e-13));
    }
}

TEST_CASE("gemm: degenerate extents and tt rejection") {
    std::vector<float> a{1, 2}, b{3, 4}, c{9, 9, 9, 9};
    // k=0 zeroes (or preserves) the output
    K::gemm_serial<float>(false, false, 2, 2, 0, a.data(), b.data(), c.data(), false);
    CHECK(c == std::vector<float>{0, 0, 0, 0});
    c = {1, 1, 1, 1};
    K::gemm_serial<float>(false, false, 2, 2, 0, a.data(), b.data(), c.data(), true);
    CHECK(c == std::vector<float>{1, 1, 1, 1});
    CHECK_THROWS_AS(K::gemm_serial<float>(true, true, 1, 1, 1, a.data(), b.data(), c.data(), false),
                    ContractError);
}

TEST_CASE("bmm matches per-slice gemm for all supported trans combos") {
    Rng rng(2026);
    for (int trial = 0; trial < 40; ++trial) {
        std::int64_t bs = rng.uniform_int(1, 5), m = rng.uniform_int(1, 6);
        std::int64_t n = rng.uniform_int(1, 6), k = rng.uniform_int(1, 6);
        bool ta = rng.uniform() < 0.3;
        bool tb = !ta && rng.uniform() < 0.5;
        auto a = rand_vec<double>(rng, bs * m * k);
        auto b = rand_vec<double>(rng, bs * k * n);
        std::vector<double> c1(bs * m * n, 0), c2(bs * m * n, 0);
        K::bmm(ta, tb, bs, m, n, k, a.data(), b.data(), c1.data(), false);
        for (std::int64_t i = 0; i < bs; ++i)
            gemm_ref(ta, tb, m, n, k, a.data() + i * m * k, b.data() + i * k * n,
                     c2.data() + i * m * n, false);
        for (std::int64_t i = 0; i < bs * m * n; ++i)
            CHECK(close_rel(c1[i], c2[i], 1e-13));
    }
}

TEST_CASE("rows_shift_clamp gathers clamped rows") {
    Rng rng(2027);
    for (int trial = 0; trial < 50; ++trial) {
        std::int64_t rows = rng.uniform_int(1, 9), cols = rng.uniform_int(1, 5);
        std::int64_t shift = rng.uniform_int(-rows - 1, rows + 1);
        std::int64_t hi = rng.uniform_int(0, rows - 1);
        auto in = rand_vec<float>(rng, rows * cols);
        std::vector<float> out(rows * cols);
        K::rows_shift_clamp(in.data(), out.data(), rows, cols, shift, hi);
        for (std::int64_t i = 0; i < rows; ++i) {
            std::int64_t src = std::min(std::max<std::int64_t>(i + shift, 0), hi);
            for (std::int64_t c = 0; c < cols; ++c)
                CHECK(out[i * cols + c] == in[src * cols + c]);
        }
    }
}

TEST_CASE("conv2d path (im2col + gemm) matches a naive direct convolution") {
    Rng rng(2028);
    for (int trial = 0; trial < 30; ++trial) {
        std::int64_t b = rng.uniform_int(1, 2), h = rng.uniform_int(1, 5), w = rng.uniform_int(1, 5);
        std::int64_t ci = rng.uniform_int(1, 4), co = rng.uniform_int(1, 4);
        std::int64_t kh = 3, kw = 3;
        auto x = rand_vec<double>(rng, b * h * w * ci);
        auto wt = rand_vec<double>(rng, kh * kw * ci * co);

        for (auto pad : {K::Pad::zero, K::Pad::replicate}) {
            std::vector<double> patches(b * h * w * kh * kw * ci);
            K::im2col_nhwc(x.data(), b, h, w, ci, kh, kw, patches.data(), pad);
            std::vector<double> y(b * h * w * co, 0);
            K::gemm_serial(false, false, b * h * w, co, kh * kw * ci, patches.data(), wt.data(),
                           y.data(), false);

            for (std::int64_t bi = 0; bi < b; ++bi)
                for (std::int64_t yy = 0; yy < h; ++yy)
                    for (std::int64_t xx = 0; xx < w; ++xx)
                        for (std::int64_t o = 0; o < co; ++o) {
                            double acc = 0;
                            for (std::int64_t ky = 0; ky < kh; ++ky)
                                for (std::int64_t kx = 0; kx < kw; ++kx) {
                                    std::int64_t sy = yy + ky - kh / 2, sx = xx + kx - kw / 2;
                                    if (pad == K::Pad::replicate) {
                                        sy = std::min(std::max<std::int64_t>(sy, 0), h - 1);
                                        sx = std::min(std::max<std::int64_t>(sx, 0), w - 1);
                                    } else if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                                        continue;
                                    }
                                    for (std::int64_t cc = 0; cc < ci; ++cc)
                                        acc += x[((bi * h + sy) * w + sx) * ci + cc] *
                                               wt[((ky * kw + kx) * ci + cc) * co + o];
                                }
                            CHECK(close_rel(y[((bi * h + yy) * w + xx) * co + o], acc, 1e-12));
                        }
        }
    }
}

TEST_CASE("col2im is the exact adjoint of im2col in both padding modes") {
    // <im2col(x), p> == <x, col2im(p)> for random x, p
    Rng rng(2029);
    for (int trial = 0; trial < 20; ++trial) {
        std::int64_t b = rng.uniform_int(1, 2), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
        std::int64_t ci = rng.uniform_int(1, 3);
        std::int64_t rows = b * h * w, pk = 9 * ci;
        auto x = rand_vec<double>(rng, b * h * w * ci);
        auto p = rand_vec<double>(rng, rows * pk);
        for (auto pad : {K::Pad::zero, K::Pad::replicate}) {
            std::vector<double> px(rows * pk);
            K::im2col_nhwc(x.data(), b, h, w, ci, 3, 3, px.data(), pad);
            std::vector<double> xp(b * h * w * ci, 0.0);
            K::col2im_nhwc(p.data(), b, h, w, ci, 3, 3, xp.data(), pad);
            double lhs = 0, rhs = 0;
            for (std::size_t i = 0; i < px.size(); ++i) lhs += px[i] * p[i];
            for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * xp[i];
            CHECK(close_rel(lhs, rhs, 1e-10));
        }
    }
}

TEST_CASE("softmax rows are normalized and stable under large offsets") {
    Rng rng(2030);
    for (int trial = 0; trial < 30; ++trial) {
        std::int64_t rows = rng.uniform_int(1, 6), n = rng.uniform_int(1, 7);
        auto x = rand_vec<double>(rng, rows * n, -3, 3);
        if (trial % 2) for (auto& v : x) v += 500.0;  // would overflow without max subtraction
        std::vector<double> y(rows * n);
        K::softmax_rows(x.data(), y.data(), rows, n);
        for (std::int64_t r = 0; r < rows; ++r) {
            double s = 0;
            for (std::int64_t j = 0; j < n; ++j) {
                CHECK(y[r * n + j] > 0);
                s += y[r * n + j];
            }
            CHECK(close_rel(s, 1.0, 1e-9));
        }
    }
}

TEST_CASE("layernorm rows have zero mean and unit variance before affine") {
    Rng rng(2031);
    for (int trial = 0; trial < 30; ++trial) {
        std::int64_t rows = rng.uniform_int(1, 6), n = rng.uniform_int(2, 8);
        auto x = rand_vec<double>(rng, rows * n, -2, 2);
        std::vector<double> g(n, 1.0), b(n, 0.0), y(rows * n), xh(rows * n), inv(rows);
        K::layernorm_rows(x.data(), g.data(), b.data(), y.data(), xh.data(), inv.data(), rows, n,
                          1e-5);
        for (std::int64_t r = 0; r < rows; ++r) {
            double mu = 0, var = 0;
            for (std::int64_t j = 0; j < n; ++j) mu += y[r * n + j];
            mu /= n;
            for (std::int64_t j = 0; j < n; ++j) var += (y[r * n + j] - mu) * (y[r * n + j] - mu);
            var /= n;
            CHECK(std::abs(mu) < 1e-9);
            CHECK(var < 1.0 + 1e-6);  // eps shrinks variance slightly below 1
        }
    }
}

TEST_CASE("every kernel is bitwise identical under serial and omp execution") {
    Rng rng(2032);
    ExecGuard guard;
    for (int trial = 0; trial < 20; ++trial) {
        std::int64_t b = rng.uniform_int(1, 3), l = rng.uniform_int(1, 6), g = rng.uniform_int(1, 3);
        std::int64_t cg = rng.uniform_int(1, 4);
        std::int64_t rows = rng.uniform_int(1, 8), cols = rng.uniform_int(1, 6);
        auto xg = rand_vec<float>(rng, b * l * g * cg);
        auto xr = rand_vec<float>(rng, rows * cols);
        auto dmap = rand_vec<float>(rng, b * g * l * l);

        for (auto metric : {K::Metric::cosine, K::Metric::euclidean, K::Metric::manhattan,
                            K::Metric::chebyshev}) {
            std::vector<float> s1(b * g * l * l), s2(b * g * l * l);
            std::vector<float> d1(xg.size(), 0), d2(xg.size(), 0);
            K::set_exec(K::Exec::serial);
            K::similarity(xg.data(), s1.data(), b, l, g, cg, metric);
            K::similarity_grad(xg.data(), dmap.data(), d1.data(), b, l, g, cg, metric);
            K::set_exec(K::Exec::omp);
            K::similarity(xg.data(), s2.data(), b, l, g, cg, metric);
            K::similarity_grad(xg.data(), dmap.data(), d2.data(), b, l, g, cg, metric);
            CHECK(s1 == s2);
            CHECK(d1 == d2);
        }

        {
            std::vector<float> o1(rows * cols), o2(rows * cols);
            std::int64_t shift = rng.uniform_int(-rows, rows);
            K::set_exec(K::Exec::serial);
            K::rows_shift_clamp(xr.data(), o1.data(), rows, cols, shift, rows - 1);
            K::set_exec(K::Exec::omp);
            K::rows_shift_clamp(xr.data(), o2.data(), rows, cols, shift, rows - 1);
            CHECK(o1 == o2);
        }

        {
            std::vector<float> y1(xr.size()), y2(xr.size());
            K::set_exec(K::Exec::serial);
            K::softmax_rows(xr.data(), y1.data(), rows, cols);
            K::set_exec(K::Exec::omp);
            K::softmax_rows(xr.data(), y2.data(), rows, cols);
            CHECK(y1 == y2);
        }

        {
            auto gg = rand_vec<float>(rng, cols);
            auto bb = rand_vec<float>(rng, cols);
            std::vector<float> y1(xr.size()), y2(xr.size()), xh(xr.size()), inv(rows);
            K::set_exec(K::Exec::serial);
            K::layernorm_rows(xr.data(), gg.data(), bb.data(), y1.data(), xh.data(), inv.data(),
                              rows, cols, 1e-5f);
            K::set_exec(K::Exec::omp);
            K::layernorm_rows(xr.data(), gg.data(), bb.data(), y2.data(), xh.data(), inv.data(),
                              rows, cols, 1e-5f);
            CHECK(y1 == y2);
        }

        for (auto pad : {K::Pad::zero, K::Pad::replicate}) {
            std::int64_t ci = rng.uniform_int(1, 3), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
            auto xi = rand_vec<float>(rng, b * h * w * ci);
            std::vector<float> p1(b * h * w * 9 * ci), p2(p1.size());
            K::set_exec(K::Exec::serial);
            K::im2col_nhwc(xi.data(), b, h, w, ci, 3, 3, p1.data(), pad);
            K::set_exec(K::Exec::omp);
            K::im2col_nhwc(xi.data(), b, h, w, ci, 3, 3, p2.data(), pad);
            CHECK(p1 == p2);

            std::vector<float> g1(xi.size(), 0), g2(xi.size(), 0);
            K::set_exec(K::Exec::serial);
            K::col2im_nhwc(p1.data(), b, h, w, ci, 3, 3, g1.data(), pad);
            K::set_exec(K::Exec::omp);
            K::col2im_nhwc(p2.data(), b, h, w, ci, 3, 3, g2.data(), pad);
            CHECK(g1 == g2);
        }

        {
            std::int64_t t = rows, ci = cols, co = rng.uniform_int(1, 5);
            auto wt = rand_vec<float>(rng, 3 * ci * co);
            auto bias = rand_vec<float>(rng, co);
            std::vector<float> y1(t * co), y2(t * co);
            K::set_exec(K::Exec::serial);
            K::conv1d_same(xr.data(), wt.data(), bias.data(), y1.data(), t, ci, co, 3);
            K::set_exec(K::Exec::omp);
            K::conv1d_same(xr.data(), wt.data(), bias.data(), y2.data(), t, ci, co, 3);
            CHECK(y1 == y2);
        }
    }
}

TEST_CASE("similarity evaluation counter is exact") {
    K::reset_counters();
    Rng rng(2033);
    std::uint64_t expected = 0;
    for (int trial = 0; trial < 10; ++trial) {
        std::int64_t b = rng.uniform_int(1, 4), l = rng.uniform_int(1, 5), g = rng.uniform_int(1, 3);
        std::int64_t cg = rng.uniform_int(1, 3);
        auto xg = rand_vec<float>(rng, b * l * g * cg);
        std::vector<float> out(b * g * l * l);
        K::similarity(xg.data(), out.data(), b, l, g, cg, K::Metric::cosine);
        expected += static_cast<std::uint64_t>(b) * g * l * l;
        CHECK(K::counters().sim_evals == expected);
    }
    K::reset_counters();
    CHECK(K::counters().sim_evals == 0);
}

TEST_CASE("gemm mode dispatch and thread knobs are validated") {
    auto prev = K::gemm_mode();
    K::set_gemm_mode(K::GemmMode::serial);
    CHECK(K::gemm_mode() == K::GemmMode::serial);
    K::set_gemm_mode(K::GemmMode::omp);
    CHECK(K::gemm_mode() == K::GemmMode::omp);
    if (K::blas_available()) {
        K::set_gemm_mode(K::GemmMode::blas);
        CHECK(K::gemm_mode() == K::GemmMode::blas);
    }
    K::set_gemm_mode(prev);
    CHECK_THROWS_AS(K::set_threads(-1), ContractError);
}
