#include "spos/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <mutex>
#include <string>
#include <vector>

#include "spos/error.hpp"

#if defined(SPOS_HAVE_OPENMP)
#include <omp.h>
#define SPOS_PRAGMA(x) _Pragma(#x)
#else
#define SPOS_PRAGMA(x)
#endif

#if defined(SPOS_HAVE_BLAS)
extern "C" {
void cblas_sgemm(int order, int transa, int transb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta, float* c,
                 int ldc);
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc);
void openblas_set_num_threads(int n);
}
#endif

namespace spos::kernels {

namespace {

struct State {
    GemmMode gemm = GemmMode::omp;
    Exec exec = Exec::omp;
    int threads = 0;
};

State& state() {
    static State s;
    static std::once_flag once;
    std::call_once(once, [] {
#if defined(SPOS_HAVE_BLAS)
        s.gemm = GemmMode::blas;
        openblas_set_num_threads(1);
#endif
        if (const char* e = std::getenv("SPOS_GEMM")) {
            std::string v(e);
            if (v == "serial") s.gemm = GemmMode::serial;
            else if (v == "omp") s.gemm = GemmMode::omp;
            else if (v == "blas") s.gemm = GemmMode::blas;
            else throw ConfigError("SPOS_GEMM must be serial, omp or blas, got '" + v + "'");
            if (s.gemm == GemmMode::blas && !blas_available())
                throw ConfigError("SPOS_GEMM=blas but no BLAS is linked");
        }
        if (const char* e = std::getenv("SPOS_THREADS")) {
            char* end = nullptr;
            long v = std::strtol(e, &end, 10);
            if (end == e || *end != '\0' || v < 0)
                throw ConfigError(std::string("SPOS_THREADS must be a non-negative integer, got '") + e + "'");
            set_threads(static_cast<int>(v));
        }
    });
    return s;
}

std::uint64_t g_row_ops = 0;
std::uint64_t g_sim_evals = 0;

template <class S>
inline S sgn(S x) {
    return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
}

}  // namespace

bool blas_available() {
#if defined(SPOS_HAVE_BLAS)
    return true;
#else
    return false;
#endif
}

void set_gemm_mode(GemmMode m) {
    if (m == GemmMode::blas && !blas_available())
        throw ContractError("set_gemm_mode: no BLAS is linked");
    state().gemm = m;
}
GemmMode gemm_mode() { return state().gemm; }

void set_exec(Exec e) { state().exec = e; }
Exec exec() { return state().exec; }

void set_threads(int n) {
    if (n < 0) throw ContractError("set_threads: negative count");
    state().threads = n;
#if defined(SPOS_HAVE_OPENMP)
    if (n > 0) omp_set_num_threads(n);
#endif
#if defined(SPOS_HAVE_BLAS)
    openblas_set_num_threads(n > 0 ? n : 1);
#endif
}
int threads() { return state().threads; }

Counters counters() { return {g_row_ops, g_sim_evals}; }
void reset_counters() { g_row_ops = g_sim_evals = 0; }
void count_row_ops(std::uint64_t n) { g_row_ops += n; }
void count_sim_evals(std::uint64_t n) { g_sim_evals += n; }

// ---- GEMM ------------------------------------------------------------------

namespace {

// Inner loops shared by the serial and OpenMP backends; `par` only toggles
// the pragma, the per-element arithmetic order never changes.
template <class S>
void gemm_loops(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                const S* a, const S* b, S* c, bool accumulate, bool par) {
    if (ta && tb) throw ContractError("gemm: both operands transposed is unsupported");
    if (m < 0 || n < 0 || k < 0) throw ContractError("gemm: negative extent");
    if (!accumulate) std::fill(c, c + m * n, S(0));
    if (m == 0 || n == 0 || k == 0) return;

    std::vector<S> bt;  // transposed copy for the nt case, so the hot loop stays nn
    const S* bn = b;
    if (tb) {
        bt.resize(static_cast<std::size_t>(k) * n);
        for (std::int64_t kk = 0; kk < k; ++kk)
            for (std::int64_t j = 0; j < n; ++j) bt[kk * n + j] = b[j * k + kk];
        bn = bt.data();
    }

    if (!ta) {
        SPOS_PRAGMA(omp parallel for if (par) schedule(static))
        for (std::int64_t i = 0; i < m; ++i) {
            S* crow = c + i * n;
            const S* arow = a + i * k;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                S av = arow[kk];
                const S* brow = bn + kk * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        SPOS_PRAGMA(omp parallel for if (par) schedule(static))
        for (std::int64_t i = 0; i < m; ++i) {
            S* crow = c + i * n;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                S av = a[kk * m + i];
                const S* brow = bn + kk * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

template <class S>
void gemm_serial(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                 const S* a, const S* b, S* c, bool accumulate) {
    gemm_loops(ta, tb, m, n, k, a, b, c, accumulate, false);
}

template <class S>
void gemm_omp(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              const S* a, const S* b, S* c, bool accumulate) {
    gemm_loops(ta, tb, m, n, k, a, b, c, accumulate, true);
}

#if defined(SPOS_HAVE_BLAS)
namespace {
constexpr int kRowMajor = 101, kNoTrans = 111, kTrans = 112;

int blas_int(std::int64_t v, const char* what) {
    if (v > std::numeric_limits<int>::max())
        throw ContractError(std::string("gemm_blas: extent too large for BLAS: ") + what);
    return static_cast<int>(v);
}
}  // namespace
#endif

template <class S>
void gemm_blas(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
               const S* a, const S* b, S* c, bool accumulate) {
#if defined(SPOS_HAVE_BLAS)
    if (ta && tb) throw ContractError("gemm: both operands transposed is unsupported");
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate) std::fill(c, c + m * n, S(0));
        return;
    }
    int mi = blas_int(m, "m"), ni = blas_int(n, "n"), ki = blas_int(k, "k");
    int lda = ta ? mi : ki;
    int ldb = tb ? ki : ni;
    S beta = accumulate ? S(1) : S(0);
    if constexpr (sizeof(S) == sizeof(float)) {
        cblas_sgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, mi, ni, ki,
                    1.0f, reinterpret_cast<const float*>(a), lda,
                    reinterpret_cast<const float*>(b), ldb, beta,
                    reinterpret_cast<float*>(c), ni);
    } else {
        cblas_dgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, mi, ni, ki,
                    1.0, reinterpret_cast<const double*>(a), lda,
                    reinterpret_cast<const double*>(b), ldb, beta,
                    reinterpret_cast<double*>(c), ni);
    }
#else
    (void)ta; (void)tb; (void)m; (void)n; (void)k; (void)a; (void)b; (void)c; (void)accumulate;
    throw ContractError("gemm_blas: no BLAS is linked");
#endif
}

template <class S>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
          const S* a, const S* b, S* c, bool accumulate) {
    switch (state().gemm) {
        case GemmMode::serial: gemm_serial(ta, tb, m, n, k, a, b, c, accumulate); return;
        case GemmMode::omp: gemm_omp(ta, tb, m, n, k, a, b, c, accumulate); return;
        case GemmMode::blas: gemm_blas(ta, tb, m, n, k, a, b, c, accumulate); return;
    }
}

// ---- batched matmul ----------------------------------------------------------

template <class S>
void bmm(bool ta, bool tb, std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k,
         const S* a, const S* b, S* c, bool accumulate) {
    if (ta && tb) throw ContractError("bmm: both operands transposed is unsupported");
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        const S* as = a + bi * m * k;
        const S* bs = b + bi * k * n;
        S* cs = c + bi * m * n;
        if (!accumulate) std::fill(cs, cs + m * n, S(0));
        if (!ta && !tb) {
            for (std::int64_t i = 0; i < m; ++i) {
                S* crow = cs + i * n;
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    S av = as[i * k + kk];
                    const S* brow = bs + kk * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        } else if (ta) {
            // a slice stored [k,m]
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const S* brow = bs + kk * n;
                for (std::int64_t i = 0; i < m; ++i) {
                    S av = as[kk * m + i];
                    S* crow = cs + i * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        } else {
            // b slice stored [n,k]; dot products over contiguous rows
            for (std::int64_t i = 0; i < m; ++i) {
                const S* arow = as + i * k;
                S* crow = cs + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    const S* brow = bs + j * k;
                    S acc = 0;
                    for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                    crow[j] += acc;
                }
            }
        }
    }
}

// ---- row gather with clamping ------------------------------------------------

template <class S>
void rows_shift_clamp(const S* in, S* out, std::int64_t rows, std::int64_t cols,
                      std::int64_t shift, std::int64_t hi) {
    if (hi < 0) throw ContractError("rows_shift_clamp: empty input");
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t src = std::clamp<std::int64_t>(i + shift, 0, hi);
        std::copy(in + src * cols, in + (src + 1) * cols, out + i * cols);
    }
}

template <class S>
void rows_shift_clamp_grad(const S* dout, S* din, std::int64_t rows, std::int64_t cols,
                           std::int64_t shift, std::int64_t hi) {
    for (std::int64_t i = 0; i < rows; ++i) {
        std::int64_t src = std::clamp<std::int64_t>(i + shift, 0, hi);
        const S* from = dout + i * cols;
        S* to = din + src * cols;
        for (std::int64_t cc = 0; cc < cols; ++cc) to[cc] += from[cc];
    }
}

// ---- im2col / col2im ----------------------------------------------------------

template <class S>
void im2col_nhwc(const S* x, std::int64_t b, std::int64_t h, std::int64_t w,
                 std::int64_t ci, std::int64_t kh, std::int64_t kw, S* patches, Pad pad) {
    if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("im2col: kernel extents must be odd");
    std::int64_t ph = kh / 2, pw = kw / 2;
    std::int64_t rows = b * h * w, pcols = kh * kw * ci;
    bool rep = pad == Pad::replicate;
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        std::int64_t xc = r % w, yc = (r / w) % h, bc = r / (w * h);
        S* dst = patches + r * pcols;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
            std::int64_t yy = yc + ky - ph;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
                std::int64_t xx = xc + kx - pw;
                S* cell = dst + (ky * kw + kx) * ci;
                if (rep) {
                    std::int64_t sy = std::clamp<std::int64_t>(yy, 0, h - 1);
                    std::int64_t sx = std::clamp<std::int64_t>(xx, 0, w - 1);
                    const S* src = x + ((bc * h + sy) * w + sx) * ci;
                    std::copy(src, src + ci, cell);
                } else if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
                    const S* src = x + ((bc * h + yy) * w + xx) * ci;
                    std::copy(src, src + ci, cell);
                } else {
                    std::fill(cell, cell + ci, S(0));
                }
            }
        }
    }
}

template <class S>
void col2im_nhwc(const S* dpatches, std::int64_t b, std::int64_t h, std::int64_t w,
                 std::int64_t ci, std::int64_t kh, std::int64_t kw, S* dx, Pad pad) {
    if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("col2im: kernel extents must be odd");
    std::int64_t ph = kh / 2, pw = kw / 2;
    std::int64_t pcols = kh * kw * ci;
    bool rep = pad == Pad::replicate;
    bool par = exec() == Exec::omp;
    // Windows of one image overlap, so scatter is parallel over images only.
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t bc = 0; bc < b; ++bc) {
        for (std::int64_t yc = 0; yc < h; ++yc) {
            for (std::int64_t xc = 0; xc < w; ++xc) {
                const S* src = dpatches + ((bc * h + yc) * w + xc) * pcols;
                for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t yy = yc + ky - ph;
                    if (!rep && (yy < 0 || yy >= h)) continue;
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                        std::int64_t xx = xc + kx - pw;
                        if (!rep && (xx < 0 || xx >= w)) continue;
                        std::int64_t sy = std::clamp<std::int64_t>(yy, 0, h - 1);
                        std::int64_t sx = std::clamp<std::int64_t>(xx, 0, w - 1);
                        const S* cell = src + (ky * kw + kx) * ci;
                        S* dst = dx + ((bc * h + sy) * w + sx) * ci;
                        for (std::int64_t cc = 0; cc < ci; ++cc) dst[cc] += cell[cc];
                    }
                }
            }
        }
    }
}

// ---- conv1d --------------------------------------------------------------------

template <class S>
void conv1d_same(const S* x, const S* w, const S* bias, S* y,
                 std::int64_t t, std::int64_t ci, std::int64_t co, std::int64_t k) {
    if (k % 2 == 0) throw ContractError("conv1d: kernel extent must be odd");
    std::int64_t p = k / 2;
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t tt = 0; tt < t; ++tt) {
        S* yrow = y + tt * co;
        if (bias) std::copy(bias, bias + co, yrow);
        else std::fill(yrow, yrow + co, S(0));
        for (std::int64_t dt = 0; dt < k; ++dt) {
            std::int64_t ts = tt + dt - p;
            if (ts < 0 || ts >= t) continue;
            const S* xrow = x + ts * ci;
            const S* wslab = w + dt * ci * co;
            for (std::int64_t cc = 0; cc < ci; ++cc) {
                S xv = xrow[cc];
                const S* wrow = wslab + cc * co;
                for (std::int64_t o = 0; o < co; ++o) yrow[o] += xv * wrow[o];
            }
        }
    }
}

template <class S>
void conv1d_same_grad(const S* x, const S* w, const S* dy, S* dx, S* dw, S* dbias,
                      std::int64_t t, std::int64_t ci, std::int64_t co, std::int64_t k) {
    if (k % 2 == 0) throw ContractError("conv1d: kernel extent must be odd");
    std::int64_t p = k / 2;
    if (dbias) {
        for (std::int64_t tt = 0; tt < t; ++tt)
            for (std::int64_t o = 0; o < co; ++o) dbias[o] += dy[tt * co + o];
    }
    if (dw) {
        for (std::int64_t tt = 0; tt < t; ++tt) {
            const S* dyrow = dy + tt * co;
            for (std::int64_t dt = 0; dt < k; ++dt) {
                std::int64_t ts = tt + dt - p;
                if (ts < 0 || ts >= t) continue;
                const S* xrow = x + ts * ci;
                S* dwslab = dw + dt * ci * co;
                for (std::int64_t cc = 0; cc < ci; ++cc) {
                    S xv = xrow[cc];
                    S* dwrow = dwslab + cc * co;
                    for (std::int64_t o = 0; o < co; ++o) dwrow[o] += xv * dyrow[o];
                }
            }
        }
    }
    if (dx) {
        bool par = exec() == Exec::omp;
        SPOS_PRAGMA(omp parallel for if (par) schedule(static))
        for (std::int64_t tx = 0; tx < t; ++tx) {
            S* dxrow = dx + tx * ci;
            for (std::int64_t dt = 0; dt < k; ++dt) {
                std::int64_t ty = tx - dt + p;
                if (ty < 0 || ty >= t) continue;
                const S* dyrow = dy + ty * co;
                const S* wslab = w + dt * ci * co;
                for (std::int64_t cc = 0; cc < ci; ++cc) {
                    const S* wrow = wslab + cc * co;
                    S acc = 0;
                    for (std::int64_t o = 0; o < co; ++o) acc += wrow[o] * dyrow[o];
                    dxrow[cc] += acc;
                }
            }
        }
    }
}

// ---- softmax ---------------------------------------------------------------------

template <class S>
void softmax_rows(const S* x, S* y, std::int64_t rows, std::int64_t n) {
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n;
        S* yr = y + r * n;
        S mx = xr[0];
        for (std::int64_t j = 1; j < n; ++j)
            if (xr[j] > mx) mx = xr[j];
        S sum = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        S inv = S(1) / sum;
        for (std::int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
}

template <class S>
void softmax_rows_grad(const S* y, const S* dy, S* dx, std::int64_t rows, std::int64_t n) {
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* yr = y + r * n;
        const S* dyr = dy + r * n;
        S* dxr = dx + r * n;
        S dot = 0;
        for (std::int64_t j = 0; j < n; ++j) dot += dyr[j] * yr[j];
        for (std::int64_t j = 0; j < n; ++j) dxr[j] += yr[j] * (dyr[j] - dot);
    }
}

// ---- layer norm ----------------------------------------------------------------------

template <class S>
void layernorm_rows(const S* x, const S* g, const S* b, S* y, S* xhat, S* inv_sigma,
                    std::int64_t rows, std::int64_t n, S eps) {
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n;
        S* yr = y + r * n;
        S* hr = xhat + r * n;
        S mu = 0;
        for (std::int64_t j = 0; j < n; ++j) mu += xr[j];
        mu /= S(n);
        S var = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            S d = xr[j] - mu;
            var += d * d;
        }
        var /= S(n);
        S inv = S(1) / std::sqrt(var + eps);
        inv_sigma[r] = inv;
        for (std::int64_t j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mu) * inv;
            yr[j] = hr[j] * g[j] + b[j];
        }
    }
}

template <class S>
void layernorm_rows_grad(const S* xhat, const S* inv_sigma, const S* g, const S* dy,
                         S* dx, S* dg, S* db, std::int64_t rows, std::int64_t n) {
    bool par = exec() == Exec::omp;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* hr = xhat + r * n;
        const S* dyr = dy + r * n;
        S* dxr = dx + r * n;
        S m1 = 0, m2 = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            S dh = dyr[j] * g[j];
            m1 += dh;
            m2 += dh * hr[j];
        }
        m1 /= S(n);
        m2 /= S(n);
        S inv = inv_sigma[r];
        for (std::int64_t j = 0; j < n; ++j) {
            S dh = dyr[j] * g[j];
            dxr[j] += inv * (dh - m1 - hr[j] * m2);
        }
    }
    if (dg || db) {
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* hr = xhat + r * n;
            const S* dyr = dy + r * n;
            for (std::int64_t j = 0; j < n; ++j) {
                if (dg) dg[j] += dyr[j] * hr[j];
                if (db) db[j] += dyr[j];
            }
        }
    }
}

// ---- grouped similarity -----------------------------------------------------------------

namespace {
template <class S>
constexpr S kCosEps = S(1e-8);
}

template <class S>
void similarity(const S* xg, S* out, std::int64_t b, std::int64_t l, std::int64_t g,
                std::int64_t cg, Metric m) {
    count_sim_evals(static_cast<std::uint64_t>(b) * g * l * l);
    bool par = exec() == Exec::omp;

    std::vector<S> norms;
    if (m == Metric::cosine) {
        norms.resize(static_cast<std::size_t>(b) * l * g);
        SPOS_PRAGMA(omp parallel for if (par) schedule(static))
        for (std::int64_t r = 0; r < b * l * g; ++r) {
            const S* u = xg + r * cg;
            S s = 0;
            for (std::int64_t cc = 0; cc < cg; ++cc) s += u[cc] * u[cc];
            norms[r] = std::sqrt(s);
        }
    }

    std::int64_t pairs = b * g;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t bg = 0; bg < pairs; ++bg) {
        std::int64_t bi = bg / g, gi = bg % g;
        S* omap = out + (bi * g + gi) * l * l;
        for (std::int64_t i = 0; i < l; ++i) {
            const S* u = xg + ((bi * l + i) * g + gi) * cg;
            for (std::int64_t j = 0; j < l; ++j) {
                const S* v = xg + ((bi * l + j) * g + gi) * cg;
                S val = 0;
                switch (m) {
                    case Metric::cosine: {
                        S dot = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) dot += u[cc] * v[cc];
                        S den = norms[(bi * l + i) * g + gi] * norms[(bi * l + j) * g + gi];
                        if (den < kCosEps<S>) den = kCosEps<S>;
                        val = dot / den;
                        break;
                    }
                    case Metric::euclidean: {
                        S s = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            S d = u[cc] - v[cc];
                            s += d * d;
                        }
                        val = -std::sqrt(s);
                        break;
                    }
                    case Metric::manhattan: {
                        S s = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) s += std::abs(u[cc] - v[cc]);
                        val = -s;
                        break;
                    }
                    case Metric::chebyshev: {
                        S mx = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            S d = std::abs(u[cc] - v[cc]);
                            if (d > mx) mx = d;
                        }
                        val = -mx;
                        break;
                    }
                }
                omap[i * l + j] = val;
            }
        }
    }
}

template <class S>
void similarity_grad(const S* xg, const S* dout, S* dxg, std::int64_t b, std::int64_t l,
                     std::int64_t g, std::int64_t cg, Metric m) {
    bool par = exec() == Exec::omp;

    std::vector<S> norms;
    if (m == Metric::cosine) {
        norms.resize(static_cast<std::size_t>(b) * l * g);
        SPOS_PRAGMA(omp parallel for if (par) schedule(static))
        for (std::int64_t r = 0; r < b * l * g; ++r) {
            const S* u = xg + r * cg;
            S s = 0;
            for (std::int64_t cc = 0; cc < cg; ++cc) s += u[cc] * u[cc];
            norms[r] = std::sqrt(s);
        }
    }

    // Each (bi, i) owns the dxg rows it writes, so the scatter parallelizes.
    std::int64_t rows = b * l;
    SPOS_PRAGMA(omp parallel for if (par) schedule(static))
    for (std::int64_t r = 0; r < rows; ++r) {
        std::int64_t bi = r / l, i = r % l;
        for (std::int64_t gi = 0; gi < g; ++gi) {
            const S* u = xg + ((bi * l + i) * g + gi) * cg;
            S* du = dxg + ((bi * l + i) * g + gi) * cg;
            const S* omap = dout + (bi * g + gi) * l * l;
            for (std::int64_t j = 0; j < l; ++j) {
                S wij = omap[i * l + j] + omap[j * l + i];
                if (wij == S(0)) continue;
                const S* v = xg + ((bi * l + j) * g + gi) * cg;
                switch (m) {
                    case Metric::cosine: {
                        S nu = norms[(bi * l + i) * g + gi];
                        S nv = norms[(bi * l + j) * g + gi];
                        S den = nu * nv;
                        if (den > kCosEps<S>) {
                            S dot = 0;
                            for (std::int64_t cc = 0; cc < cg; ++cc) dot += u[cc] * v[cc];
                            S s = dot / den;
                            S inv_nu2 = S(1) / (nu * nu);
                            for (std::int64_t cc = 0; cc < cg; ++cc)
                                du[cc] += wij * (v[cc] / den - s * u[cc] * inv_nu2);
                        } else {
                            for (std::int64_t cc = 0; cc < cg; ++cc)
                                du[cc] += wij * v[cc] / kCosEps<S>;
                        }
                        break;
                    }
                    case Metric::euclidean: {
                        S s = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            S d = u[cc] - v[cc];
                            s += d * d;
                        }
                        S dist = std::sqrt(s);
                        if (dist > S(0)) {
                            S inv = S(1) / dist;
                            for (std::int64_t cc = 0; cc < cg; ++cc)
                                du[cc] += wij * -(u[cc] - v[cc]) * inv;
                        }
                        break;
                    }
                    case Metric::manhattan: {
                        for (std::int64_t cc = 0; cc < cg; ++cc)
                            du[cc] += wij * -sgn(u[cc] - v[cc]);
                        break;
                    }
                    case Metric::chebyshev: {
                        S mx = 0;
                        std::int64_t arg = 0;
                        for (std::int64_t cc = 0; cc < cg; ++cc) {
                            S d = std::abs(u[cc] - v[cc]);
                            if (d > mx) {
                                mx = d;
                                arg = cc;
                            }
                        }
                        du[arg] += wij * -sgn(u[arg] - v[arg]);
                        break;
                    }
                }
            }
        }
    }
}

// ---- explicit instantiations -------------------------------------------------------------

#define SPOS_INSTANTIATE(S)                                                                  \
    template void gemm<S>(bool, bool, std::int64_t, std::int64_t, std::int64_t, const S*,    \
                          const S*, S*, bool);                                               \
    template void gemm_serial<S>(bool, bool, std::int64_t, std::int64_t, std::int64_t,       \
                                 const S*, const S*, S*, bool);                              \
    template void gemm_omp<S>(bool, bool, std::int64_t, std::int64_t, std::int64_t,          \
                              const S*, const S*, S*, bool);                                 \
    template void gemm_blas<S>(bool, bool, std::int64_t, std::int64_t, std::int64_t,         \
                               const S*, const S*, S*, bool);                                \
    template void bmm<S>(bool, bool, std::int64_t, std::int64_t, std::int64_t,               \
                         std::int64_t, const S*, const S*, S*, bool);                        \
    template void rows_shift_clamp<S>(const S*, S*, std::int64_t, std::int64_t,              \
                                      std::int64_t, std::int64_t);                           \
    template void rows_shift_clamp_grad<S>(const S*, S*, std::int64_t, std::int64_t,         \
                                           std::int64_t, std::int64_t);                      \
    template void im2col_nhwc<S>(const S*, std::int64_t, std::int64_t, std::int64_t,         \
                                 std::int64_t, std::int64_t, std::int64_t, S*, Pad);         \
    template void col2im_nhwc<S>(const S*, std::int64_t, std::int64_t, std::int64_t,         \
                                 std::int64_t, std::int64_t, std::int64_t, S*, Pad);         \
    template void conv1d_same<S>(const S*, const S*, const S*, S*, std::int64_t,             \
                                 std::int64_t, std::int64_t, std::int64_t);                  \
    template void conv1d_same_grad<S>(const S*, const S*, const S*, S*, S*, S*,              \
                                      std::int64_t, std::int64_t, std::int64_t,              \
                                      std::int64_t);                                         \
    template void softmax_rows<S>(const S*, S*, std::int64_t, std::int64_t);                 \
    template void softmax_rows_grad<S>(const S*, const S*, S*, std::int64_t, std::int64_t);  \
    template void layernorm_rows<S>(const S*, const S*, const S*, S*, S*, S*, std::int64_t,  \
                                    std::int64_t, S);                                        \
    template void layernorm_rows_grad<S>(const S*, const S*, const S*, const S*, S*, S*,     \
                                         S*, std::int64_t, std::int64_t);                    \
    template void similarity<S>(const S*, S*, std::int64_t, std::int64_t, std::int64_t,      \
                                std::int64_t, Metric);                                       \
    template void similarity_grad<S>(const S*, const S*, S*, std::int64_t, std::int64_t,     \
                                     std::int64_t, std::int64_t, Metric);

SPOS_INSTANTIATE(float)
SPOS_INSTANTIATE(double)

#undef SPOS_INSTANTIATE

}  // namespace spos::kernels
