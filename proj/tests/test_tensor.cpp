#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "spos/rng.hpp"
#include "spos/tensor.hpp"

using namespace spos;
using spos::testing::grad_check;
using T64 = TensorT<double>;

namespace {

Shape rand_shape(Rng& rng, std::int64_t rank, std::int64_t max_extent = 5) {
    Shape s(rank);
    for (auto& e : s) e = rng.uniform_int(1, max_extent);
    return s;
}

T64 rand_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0, bool req = true) {
    return T64::uniform(std::move(s), rng, lo, hi, req);
}

// Loss builder: sum(out * mask) with a fixed random mask so every output
// coordinate contributes a distinct weight.
std::function<T64()> masked_loss(Rng& rng, std::function<T64()> fwd) {
    T64 probe;
    {
        NoGrad ng;
        probe = fwd();
    }
    T64 mask = T64::uniform(probe.shape(), rng, -1.0, 1.0, false);
    return [fwd = std::move(fwd), mask]() { return sum_all(mul(fwd(), mask)); };
}

using Case = std::pair<std::vector<T64>, std::function<T64()>>;

void run_trials(const char* name, int trials, std::uint64_t seed,
                const std::function<Case(Rng&)>& make) {
    Rng rng(seed);
    for (int i = 0; i < trials; ++i) {
        auto [inputs, builder] = make(rng);
        auto res = grad_check(inputs, builder);
        INFO(name << " trial " << i << ": " << res.detail);
        REQUIRE(res.ok);
    }
}

}  // namespace

// ---- frozen examples ---------------------------------------------------------

TEST_CASE("matmul identity and basic products") {
    auto a = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    auto b = Tensor::from_values({2, 1}, {3, 4});
    auto c = matmul(a, b);
    CHECK(c.val() == std::vector<float>{3, 4});

    auto a2 = Tensor::from_values({1, 2}, {1, 2});
    auto c2 = matmul(a2, b);
    CHECK(c2.val() == std::vector<float>{11});
}

TEST_CASE("gradient of sum(a*b) wrt a is b transposed") {
    auto a = T64::from_values({1, 2}, {1, 2}, true);
    auto b = T64::from_values({2, 1}, {3, 4});
    auto loss = sum_all(matmul(a, b));
    backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(3).epsilon(1e-12));
    CHECK(a.grad()[1] == doctest::Approx(4).epsilon(1e-12));
}

TEST_CASE("elementwise analytic values") {
    auto z = Tensor::from_values({1}, {0});
    CHECK(sigmoid(z).val()[0] == doctest::Approx(0.5));
    auto m = Tensor::from_values({1}, {-3});
    CHECK(relu(m).val()[0] == 0.0f);

    auto z64 = T64::from_values({1}, {0}, true);
    auto s = sum_all(sigmoid(z64));
    backward(s);
    CHECK(z64.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("reductions: mean, first-index max tie, axis sum") {
    auto a = Tensor::from_values({3}, {1, 2, 3});
    CHECK(mean_all(a).item() == doctest::Approx(2));

    auto b = T64::from_values({3}, {1, 3, 3}, true);
    auto mx = reduce_max(b, 0);
    CHECK(mx.item() == 3);
    backward(sum_all(mx));
    CHECK(b.grad() == std::vector<double>{0, 1, 0});

    auto c = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    auto s = reduce_sum(c, 1);
    CHECK(s.val() == std::vector<float>{3, 7});
}

TEST_CASE("view keeps row-major order and round trips") {
    auto a = Tensor::from_values({6, 2}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    auto v = view(a, {3, 2, 2});
    // row n of the view covers original rows 2n, 2n+1
    CHECK(v.val()[0 * 4 + 0] == 0);
    CHECK(v.val()[1 * 4 + 0] == 4);
    CHECK(v.val()[2 * 4 + 3] == 11);
    auto back = view(v, {6, 2});
    CHECK(back.val() == a.val());
}

TEST_CASE("concat basics and slice round trip") {
    auto a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    auto b = Tensor::from_values({1, 2}, {5, 6});
    auto c = concat<float>({a, b}, 0);
    CHECK(c.val() == std::vector<float>{1, 2, 3, 4, 5, 6});

    auto one = concat<float>({a}, 0);
    CHECK(one.val() == a.val());

    auto sa = slice(c, 0, 0, 2);
    auto sb = slice(c, 0, 2, 1);
    CHECK(sa.val() == a.val());
    CHECK(sb.val() == b.val());
}

TEST_CASE("backward basics: ones for sum, 2p for sum of squares, accumulation") {
    auto p = T64::from_values({3}, {5, -1, 2}, true);
    backward(sum_all(p));
    CHECK(p.grad() == std::vector<double>{1, 1, 1});

    auto q = T64::from_values({2}, {1, 2}, true);
    backward(sum_all(mul(q, q)));
    CHECK(q.grad() == std::vector<double>{2, 4});

    // repeated backward accumulates until zero_grad
    auto loss2 = sum_all(mul(q, q));
    backward(loss2);
    CHECK(q.grad() == std::vector<double>{4, 8});
    zero_grad(q);
    CHECK(q.grad() == std::vector<double>{0, 0});
}

TEST_CASE("errors: shape mismatch, non-scalar backward, log domain") {
    auto a = Tensor({2, 3});
    auto b = Tensor({4, 2});
    CHECK_THROWS_AS(matmul(a, b), DimError);
    CHECK_THROWS_AS((void)add(a, b), DimError);

    auto p = Tensor({2}, true);
    CHECK_THROWS_AS(backward(p), ContractError);

    auto z = Tensor::from_values({1}, {0});
    CHECK_THROWS_AS((void)log(z), DomainError);
}

TEST_CASE("div by zero counts a runtime warning and propagates inf") {
    reset_runtime_warnings();
    auto a = Tensor::from_values({2}, {1, 1});
    auto b = Tensor::from_values({2}, {0, 2});
    auto c = div(a, b);
    CHECK(std::isinf(c.val()[0]));
    CHECK(c.val()[1] == 0.5f);
    CHECK(runtime_warnings() == 1);
    reset_runtime_warnings();
}

TEST_CASE("suffix broadcast shapes and rejection") {
    auto a = Tensor({2, 3, 4});
    auto b = Tensor({3, 4});
    CHECK(add(a, b).shape() == Shape{2, 3, 4});
    CHECK(add(b, a).shape() == Shape{2, 3, 4});
    auto bad = Tensor({2, 4});
    CHECK_THROWS_AS((void)add(a, bad), DimError);
}

TEST_CASE("forward and backward are bitwise deterministic") {
    auto run = [](std::vector<double>& gout) {
        Rng rng(77);
        auto x = rand_tensor(rng, {4, 5});
        auto w = rand_tensor(rng, {5, 3});
        auto g = rand_tensor(rng, {3});
        auto b = rand_tensor(rng, {3});
        auto y = layer_norm(tanh(matmul(x, w)), g, b);
        auto loss = mean_all(mul(y, y));
        backward(loss);
        gout = x.grad();
        return loss.item();
    };
    std::vector<double> g1, g2;
    double l1 = run(g1);
    double l2 = run(g2);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

// ---- finite-difference property suite (100 trials per op, fixed seeds) --------

TEST_CASE("fd: add/sub/mul/div with and without broadcast") {
    run_trials("add", 100, 101, [](Rng& rng) -> Case {
        Shape s = rand_shape(rng, rng.uniform_int(1, 3));
        auto a = rand_tensor(rng, s);
        bool bc = rng.uniform() < 0.5 && s.size() > 1;
        Shape sb = bc ? Shape(s.end() - 1, s.end()) : s;
        auto b = rand_tensor(rng, sb);
        auto fwd = [a, b, flip = rng.uniform() < 0.5]() { return flip ? add(b, a) : add(a, b); };
        return {{a, b}, masked_loss(rng, fwd)};
    });
    run_trials("sub", 100, 102, [](Rng& rng) -> Case {
        Shape s = rand_shape(rng, rng.uniform_int(1, 3));
        auto a = rand_tensor(rng, s);
        bool bc = rng.uniform() < 0.5 && s.size() > 1;
        Shape sb = bc ? Shape(s.end() - 1, s.end()) : s;
        auto b = rand_tensor(rng, sb);
        auto fwd = [a, b, flip = rng.uniform() < 0.5]() { return flip ? sub(b, a) : sub(a, b); };
        return {{a, b}, masked_loss(rng, fwd)};
    });
    run_trials("mul", 100, 103, [](Rng& rng) -> Case {
        Shape s = rand_shape(rng, rng.uniform_int(1, 3));
        auto a = rand_tensor(rng, s);
        bool bc = rng.uniform() < 0.5 && s.size() > 1;
        Shape sb = bc ? Shape(s.end() - 1, s.end()) : s;
        auto b = rand_tensor(rng, sb);
        auto fwd = [a, b, flip = rng.uniform() < 0.5]() { return flip ? mul(b, a) : mul(a, b); };
        return {{a, b}, masked_loss(rng, fwd)};
    });
    run_trials("div", 100, 104, [](Rng& rng) -> Case {
        Shape s = rand_shape(rng, rng.uniform_int(1, 3));
        auto a = rand_tensor(rng, s);
        bool bc = rng.uniform() < 0.5 && s.size() > 1;
        Shape sb = bc ? Shape(s.end() - 1, s.end()) : s;
        // denominator away from zero
        auto b = rand_tensor(rng, sb, 0.4, 1.5);
        if (rng.uniform() < 0.5)
            for (auto& v : b.val()) v = -v;
        auto fwd = [a, b]() { return div(a, b); };
        return {{a, b}, masked_loss(rng, fwd)};
    });
}

TEST_CASE("fd: unary ops") {
    run_trials("exp", 100, 111, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)));
        return {{a}, masked_loss(rng, [a]() { return exp(a); })};
    });
    run_trials("log", 100, 112, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)), 0.3, 2.0);
        return {{a}, masked_loss(rng, [a]() { return log(a); })};
    });
    run_trials("sqrt", 100, 113, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)), 0.3, 2.0);
        return {{a}, masked_loss(rng, [a]() { return sqrt(a); })};
    });
    run_trials("tanh", 100, 114, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)), -2.0, 2.0);
        return {{a}, masked_loss(rng, [a]() { return tanh(a); })};
    });
    run_trials("sigmoid", 100, 115, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)), -2.0, 2.0);
        return {{a}, masked_loss(rng, [a]() { return sigmoid(a); })};
    });
    run_trials("relu", 100, 116, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)));
        for (auto& v : a.val())  // keep clear of the kink at 0
            if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
        return {{a}, masked_loss(rng, [a]() { return relu(a); })};
    });
    run_trials("clamp", 100, 117, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)));
        for (auto& v : a.val()) {  // keep clear of the clamp edges
            if (std::abs(v - 0.5) < 0.05) v += 0.1;
            if (std::abs(v + 0.5) < 0.05) v -= 0.1;
        }
        return {{a}, masked_loss(rng, [a]() { return clamp(a, -0.5, 0.5); })};
    });
    run_trials("scalar ops", 100, 118, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)));
        double s = rng.uniform(-2.0, 2.0);
        return {{a}, masked_loss(rng, [a, s]() {
                    return rsub_scalar(s, add_scalar(mul_scalar(neg(a), 0.7), s));
                })};
    });
}

TEST_CASE("fd: matmul and bmm") {
    run_trials("matmul", 100, 121, [](Rng& rng) -> Case {
        std::int64_t m = rng.uniform_int(1, 5), k = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
        auto a = rand_tensor(rng, {m, k});
        auto b = rand_tensor(rng, {k, n});
        return {{a, b}, masked_loss(rng, [a, b]() { return matmul(a, b); })};
    });
    run_trials("bmm", 100, 122, [](Rng& rng) -> Case {
        std::int64_t bs = rng.uniform_int(1, 4), m = rng.uniform_int(1, 4);
        std::int64_t k = rng.uniform_int(1, 4), n = rng.uniform_int(1, 4);
        bool nt = rng.uniform() < 0.5;
        auto a = rand_tensor(rng, {bs, m, k});
        auto b = nt ? rand_tensor(rng, {bs, n, k}) : rand_tensor(rng, {bs, k, n});
        return {{a, b}, masked_loss(rng, [a, b, nt]() { return bmm(a, b, nt); })};
    });
}

TEST_CASE("fd: shape ops") {
    run_trials("view", 100, 131, [](Rng& rng) -> Case {
        std::int64_t m = rng.uniform_int(1, 5), n = rng.uniform_int(1, 5);
        auto a = rand_tensor(rng, {m, n});
        return {{a}, masked_loss(rng, [a, m, n]() { return view(a, {n * m}); })};
    });
    run_trials("permute", 100, 132, [](Rng& rng) -> Case {
        std::int64_t rank = rng.uniform_int(2, 4);
        auto a = rand_tensor(rng, rand_shape(rng, rank, 4));
        std::vector<std::int64_t> axes(rank);
        std::iota(axes.begin(), axes.end(), 0);
        rng.shuffle(axes);
        return {{a}, masked_loss(rng, [a, axes]() { return permute(a, axes); })};
    });
    run_trials("concat+slice", 100, 133, [](Rng& rng) -> Case {
        std::int64_t rank = rng.uniform_int(1, 3);
        Shape s = rand_shape(rng, rank, 4);
        std::int64_t axis = rng.uniform_int(0, rank - 1);
        Shape s2 = s;
        s2[axis] = rng.uniform_int(1, 4);
        auto a = rand_tensor(rng, s);
        auto b = rand_tensor(rng, s2);
        std::int64_t start = rng.uniform_int(0, s[axis]);
        std::int64_t len = rng.uniform_int(1, s[axis] + s2[axis] - start);
        auto fwd = [a, b, axis, start, len]() {
            return slice(concat<double>({a, b}, axis), axis, start, len);
        };
        return {{a, b}, masked_loss(rng, fwd)};
    });
}

TEST_CASE("fd: reductions") {
    run_trials("reduce_sum/mean", 100, 141, [](Rng& rng) -> Case {
        std::int64_t rank = rng.uniform_int(1, 3);
        auto a = rand_tensor(rng, rand_shape(rng, rank));
        std::int64_t axis = rng.uniform_int(0, rank - 1);
        bool mean = rng.uniform() < 0.5;
        auto fwd = [a, axis, mean]() { return mean ? reduce_mean(a, axis) : reduce_sum(a, axis); };
        return {{a}, masked_loss(rng, fwd)};
    });
    run_trials("reduce_max", 100, 142, [](Rng& rng) -> Case {
        std::int64_t rank = rng.uniform_int(1, 3);
        Shape s = rand_shape(rng, rank);
        // well-separated values so the argmax is stable under h
        std::vector<double> vals(shape_numel(s));
        std::iota(vals.begin(), vals.end(), 0.0);
        rng.shuffle(vals);
        for (auto& v : vals) v *= 0.1;
        auto a = T64::from_values(s, vals, true);
        std::int64_t axis = rng.uniform_int(0, rank - 1);
        return {{a}, masked_loss(rng, [a, axis]() { return reduce_max(a, axis); })};
    });
    run_trials("sum_all/mean_all", 100, 143, [](Rng& rng) -> Case {
        auto a = rand_tensor(rng, rand_shape(rng, rng.uniform_int(1, 3)));
        bool mean = rng.uniform() < 0.5;
        auto fwd = [a, mean]() { return mean ? mean_all(a) : sum_all(a); };
        return {{a}, masked_loss(rng, fwd)};
    });
}

TEST_CASE("fd: softmax and layer norm") {
    run_trials("softmax", 100, 151, [](Rng& rng) -> Case {
        std::int64_t rank = rng.uniform_int(1, 3);
        auto a = rand_tensor(rng, rand_shape(rng, rank), -2.0, 2.0);
        return {{a}, masked_loss(rng, [a]() { return softmax_lastdim(a); })};
    });
    run_trials("layer_norm", 100, 152, [](Rng& rng) -> Case {
        std::int64_t rows = rng.uniform_int(1, 5), n = rng.uniform_int(2, 5);
        auto a = rand_tensor(rng, {rows, n});
        auto g = rand_tensor(rng, {n}, 0.5, 1.5);
        auto b = rand_tensor(rng, {n});
        return {{a, g, b}, masked_loss(rng, [a, g, b]() { return layer_norm(a, g, b); })};
    });
}

TEST_CASE("fd: structured ops") {
    run_trials("rows_shift_clamp", 100, 161, [](Rng& rng) -> Case {
        std::int64_t rows = rng.uniform_int(1, 5), cols = rng.uniform_int(1, 5);
        auto a = rand_tensor(rng, {rows, cols});
        std::int64_t shift = rng.uniform_int(-rows, rows);
        std::int64_t hi = rng.uniform_int(0, rows - 1);
        return {{a}, masked_loss(rng, [a, shift, hi]() { return rows_shift_clamp(a, shift, hi); })};
    });
    run_trials("conv2d", 60, 162, [](Rng& rng) -> Case {
        std::int64_t b = rng.uniform_int(1, 2), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
        std::int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
        auto x = rand_tensor(rng, {b, h, w, ci});
        auto wt = rand_tensor(rng, {3, 3, ci, co});
        auto bias = rand_tensor(rng, {co});
        return {{x, wt, bias}, masked_loss(rng, [x, wt, bias]() { return conv2d_nhwc(x, wt, bias); })};
    });
    run_trials("conv2d_replicate", 60, 164, [](Rng& rng) -> Case {
        std::int64_t b = rng.uniform_int(1, 2), h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
        std::int64_t ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 3);
        auto x = rand_tensor(rng, {b, h, w, ci});
        auto wt = rand_tensor(rng, {3, 3, ci, co});
        auto bias = rand_tensor(rng, {co});
        return {{x, wt, bias}, masked_loss(rng, [x, wt, bias]() {
                    return conv2d_nhwc(x, wt, bias, kernels::Pad::replicate);
                })};
    });
    run_trials("conv1d", 100, 163, [](Rng& rng) -> Case {
        std::int64_t t = rng.uniform_int(1, 5), ci = rng.uniform_int(1, 4), co = rng.uniform_int(1, 4);
        auto x = rand_tensor(rng, {t, ci});
        auto wt = rand_tensor(rng, {3, ci, co});
        auto bias = rand_tensor(rng, {co});
        return {{x, wt, bias}, masked_loss(rng, [x, wt, bias]() { return conv1d_seq(x, wt, bias); })};
    });
}
