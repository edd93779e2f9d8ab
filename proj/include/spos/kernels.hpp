#pragma once

#include <cstdint>

// Raw compute kernels behind the tensor ops. Every kernel runs either as a
// plain serial loop or as the same loop parallelized with OpenMP over
// disjoint output regions; per-element floating point order is identical in
// both, so results are bitwise equal. GEMM additionally dispatches to
// OpenBLAS when linked (different rounding, checked by tolerance tests).
namespace spos::kernels {

enum class GemmMode { serial, omp, blas };
enum class Exec { serial, omp };

// GEMM backend. Default: blas when linked, otherwise omp. Overridable via
// env SPOS_GEMM=serial|omp|blas (read once, explicit setters win).
void set_gemm_mode(GemmMode m);
GemmMode gemm_mode();
bool blas_available();

// Execution mode for every non-GEMM kernel. Default omp.
void set_exec(Exec e);
Exec exec();

// Worker cap. 0 keeps library defaults (all cores for OpenMP, one stream
// for OpenBLAS). Env SPOS_THREADS=N sets both. OpenBLAS always runs with a
// fixed stream count so repeated runs are bitwise identical.
void set_threads(int n);
int threads();

struct Counters {
    std::uint64_t row_ops = 0;    // frame-vector copies in context assembly
    std::uint64_t sim_evals = 0;  // pairwise similarity evaluations
};
Counters counters();
void reset_counters();
void count_row_ops(std::uint64_t n);
void count_sim_evals(std::uint64_t n);

// ---- GEMM ----------------------------------------------------------------
// c[m,n] (+)= op(a) * op(b), row-major. ta selects a as [m,k] (false) or
// stored transposed as [k,m] (true); tb likewise for b as [k,n] / [n,k].
// accumulate=false overwrites c, true adds into it.
template <class S>
void gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
          const S* a, const S* b, S* c, bool accumulate);

// Forced-backend variants for tests and the benchmark.
template <class S>
void gemm_serial(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
                 const S* a, const S* b, S* c, bool accumulate);
template <class S>
void gemm_omp(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
              const S* a, const S* b, S* c, bool accumulate);
template <class S>
void gemm_blas(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k,
               const S* a, const S* b, S* c, bool accumulate);

// ---- batched matmul (always in-tree loops; slices are tiny) --------------
// c[i] (+)= op(a[i]) * op(b[i]) for i in [0, batch); slice shapes follow the
// gemm convention: op(a) [m,k], op(b) [k,n].
template <class S>
void bmm(bool ta, bool tb, std::int64_t batch, std::int64_t m, std::int64_t n, std::int64_t k,
         const S* a, const S* b, S* c, bool accumulate);

// ---- row gather with index clamping --------------------------------------
// out[i,:] = in[clamp(i+shift, 0, hi),:] for i in [0, rows). hi is the last
// readable row of in (in has hi+1 rows or more).
template <class S>
void rows_shift_clamp(const S* in, S* out, std::int64_t rows, std::int64_t cols,
                      std::int64_t shift, std::int64_t hi);
// din[clamp(i+shift,0,hi),:] += dout[i,:]; scatter, runs serial.
template <class S>
void rows_shift_clamp_grad(const S* dout, S* din, std::int64_t rows, std::int64_t cols,
                           std::int64_t shift, std::int64_t hi);

// ---- im2col / col2im for NHWC conv with same padding ----------------------
// Out-of-range taps read zeros (Pad::zero) or the clamped border pixel
// (Pad::replicate). Replicate keeps a constant field constant through the
// conv, so pooled features of constant maps do not depend on extent.
enum class Pad { zero, replicate };

// x [b,h,w,ci] -> patches [b*h*w, kh*kw*ci], patch column order (ky,kx,ci).
template <class S>
void im2col_nhwc(const S* x, std::int64_t b, std::int64_t h, std::int64_t w,
                 std::int64_t ci, std::int64_t kh, std::int64_t kw, S* patches,
                 Pad pad = Pad::zero);
// dx [b,h,w,ci] += scatter of dpatches; parallel over b only (windows of one
// image overlap).
template <class S>
void col2im_nhwc(const S* dpatches, std::int64_t b, std::int64_t h, std::int64_t w,
                 std::int64_t ci, std::int64_t kh, std::int64_t kw, S* dx,
                 Pad pad = Pad::zero);

// ---- 1D conv over a sequence, same zero padding --------------------------
// x [t,ci], w [k,ci,co], bias [co] (may be null), y [t,co].
template <class S>
void conv1d_same(const S* x, const S* w, const S* bias, S* y,
                 std::int64_t t, std::int64_t ci, std::int64_t co, std::int64_t k);
// Accumulating gradients; any of dx/dw/dbias may be null to skip.
template <class S>
void conv1d_same_grad(const S* x, const S* w, const S* dy, S* dx, S* dw, S* dbias,
                      std::int64_t t, std::int64_t ci, std::int64_t co, std::int64_t k);

// ---- softmax over the last axis -------------------------------------------
template <class S>
void softmax_rows(const S* x, S* y, std::int64_t rows, std::int64_t n);
// dx += y * (dy - sum(dy * y)) per row.
template <class S>
void softmax_rows_grad(const S* y, const S* dy, S* dx, std::int64_t rows, std::int64_t n);

// ---- layer norm over the last axis ----------------------------------------
// y = xhat * g + b with xhat = (x - mu) / sqrt(var + eps); xhat and
// inv_sigma [rows] are saved for the backward pass.
template <class S>
void layernorm_rows(const S* x, const S* g, const S* b, S* y, S* xhat, S* inv_sigma,
                    std::int64_t rows, std::int64_t n, S eps);
// dx += ..., dg += sum_rows(dy * xhat), db += sum_rows(dy). dg/db run serial.
template <class S>
void layernorm_rows_grad(const S* xhat, const S* inv_sigma, const S* g, const S* dy,
                         S* dx, S* dg, S* db, std::int64_t rows, std::int64_t n);

// ---- grouped similarity maps ----------------------------------------------
enum class Metric { cosine, euclidean, manhattan, chebyshev };

// xg [b,l,g,cg] -> out [b,g,l,l]; full l*l evaluation (each ordered pair is
// computed independently; symmetry then holds exactly because every metric
// is commutative in IEEE arithmetic). Adds b*g*l*l to the sim_evals counter.
template <class S>
void similarity(const S* xg, S* out, std::int64_t b, std::int64_t l, std::int64_t g,
                std::int64_t cg, Metric m);
// dxg[b,i,g,:] += sum_j dmetric/dfirst(x_i, x_j) * (dout[b,g,i,j] + dout[b,g,j,i]).
template <class S>
void similarity_grad(const S* xg, const S* dout, S* dxg, std::int64_t b, std::int64_t l,
                     std::int64_t g, std::int64_t cg, Metric m);

}  // namespace spos::kernels
