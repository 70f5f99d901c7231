#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "alignlab/rng.hpp"
#include "alignlab/tensor.hpp"

using namespace alignlab;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> values(static_cast<std::size_t>(numel(shape)));
    for (double& v : values) v = rng.normal(0.0, scale);
    Tensor t = Tensor::from_values(std::move(shape), std::move(values));
    t.set_requires_grad(requires_grad);
    return t;
}

}  // namespace

TEST_CASE("matmul against hand arithmetic and identity") {
    Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor identity = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor product = matmul(a, identity);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(product.values()[i] == a.values()[i]);
    }

    Tensor ones_column = Tensor::from_values({2, 1}, {1, 1});
    Tensor sums = matmul(a, ones_column);
    CHECK(sums.values()[0] == 3.0);
    CHECK(sums.values()[1] == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("(2x3)") != std::string::npos);
        CHECK(what.find("(4x5)") != std::string::npos);
    }
}

TEST_CASE("matmul gradient equals column sums of the right factor") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng, /*requires_grad=*/false);

    Tape::current().clear();
    backward(sum(matmul(a, b)));
    // d sum(AB) / dA[i,k] = sum_j B[k,j], independent of i
    for (std::int64_t i = 0; i < 3; ++i) {
        for (std::int64_t k = 0; k < 4; ++k) {
            double column_total = 0.0;
            for (std::int64_t j = 0; j < 5; ++j) column_total += b.values()[k * 5 + j];
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(column_total).epsilon(1e-12));
        }
    }
    Tape::current().clear();
    a.zero_grad();

    const double err = grad_check([&](const std::vector<Tensor>& xs) { return sum(matmul(xs[0], b)); }, {a}, 1e-4);
    CHECK(err < 1e-6);
}

TEST_CASE("layer_norm constant row returns beta exactly") {
    Tensor x = Tensor::full({2, 4}, 3.25);
    Tensor gamma = Tensor::full({4}, 1.5);
    Tensor beta = Tensor::from_values({4}, {0.5, -1.0, 2.0, 0.0});
    Tensor out = layer_norm(x, gamma, beta, 1e-5);
    for (std::int64_t r = 0; r < 2; ++r) {
        for (std::int64_t j = 0; j < 4; ++j) {
            CHECK(out.values()[r * 4 + j] == beta.values()[j]);
        }
    }
}

TEST_CASE("layer_norm on an already normalized row") {
    Tensor x = Tensor::from_values({1, 2}, {1.0, -1.0});
    Tensor out = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-5);
    CHECK(out.values()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(out.values()[1] == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm backward matches finite differences") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(12);
    Tensor x = random_tensor({4, 8}, rng);
    Tensor gamma = random_tensor({8}, rng);
    Tensor beta = random_tensor({8}, rng);
    const double err = grad_check(
        [](const std::vector<Tensor>& xs) { return sum(layer_norm(xs[0], xs[1], xs[2], 1e-5)); },
        {x, gamma, beta}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("gelu values and asymptote") {
    Tensor x = Tensor::from_values({3}, {0.0, 6.0, -6.0});
    Tensor out = gelu(x);
    CHECK(out.values()[0] == 0.0);
    CHECK(std::abs(out.values()[1] - 6.0) < 1e-3);
    CHECK(std::abs(out.values()[2]) < 1e-3);
}

TEST_CASE("gelu gradient at fixed points") {
    PrecisionGuard precision(Precision::f64);
    Tensor x = Tensor::from_values({4}, {-2.0, -0.5, 0.5, 2.0});
    x.set_requires_grad(true);
    const double err = grad_check([](const std::vector<Tensor>& xs) { return sum(gelu(xs[0])); }, {x}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("log_softmax rows: uniform, normalized, stable") {
    PrecisionGuard precision(Precision::f64);
    Tensor constant = Tensor::full({2, 5}, 1.7);
    Tensor out = log_softmax_rows(constant);
    for (double v : out.values()) {
        CHECK(v == doctest::Approx(-std::log(5.0)).epsilon(1e-12));
    }

    Rng rng(13);
    Tensor x = random_tensor({3, 7}, rng, false, 2.0);
    Tensor ls = log_softmax_rows(x);
    for (std::int64_t r = 0; r < 3; ++r) {
        double total = 0.0;
        for (std::int64_t j = 0; j < 7; ++j) total += std::exp(ls.values()[r * 7 + j]);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }

    Tensor huge = Tensor::full({1, 2}, 1000.0);
    Tensor stable = log_softmax_rows(huge);
    CHECK(stable.values()[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
    CHECK(std::isfinite(stable.values()[1]));
}

TEST_CASE("l2_normalize_rows values, idempotence and degenerate row") {
    PrecisionGuard precision(Precision::f64);
    Tensor x = Tensor::from_values({1, 2}, {3.0, 4.0});
    Tensor out = l2_normalize_rows(x);
    CHECK(out.values()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(out.values()[1] == doctest::Approx(0.8).epsilon(1e-12));

    Tensor unit = Tensor::from_values({1, 2}, {1.0, 0.0});
    Tensor same = l2_normalize_rows(unit);
    CHECK(same.values()[0] == 1.0);
    CHECK(same.values()[1] == 0.0);

    CHECK_THROWS_AS(l2_normalize_rows(Tensor::zeros({2, 3})), DegenerateEmbeddingError);
}

TEST_CASE("l2_normalize_rows gradient") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(14);
    Tensor x = random_tensor({2, 4}, rng);
    // weight rows so the gradient is not orthogonal-trivial
    Tensor w = random_tensor({2, 4}, rng, false);
    const double err = grad_check(
        [&](const std::vector<Tensor>& xs) { return sum(mul(l2_normalize_rows(xs[0]), w)); }, {x}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("backward of sum fills ones; frozen tensors stay grad-free") {
    Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    x.set_requires_grad(true);
    Tensor frozen = Tensor::from_values({2, 2}, {5, 6, 7, 8});

    Tape::current().clear();
    Tensor loss = sum(add(x, frozen));
    backward(loss);
    REQUIRE(x.has_grad());
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK(!frozen.has_grad());
    Tape::current().clear();
    x.zero_grad();
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    Tape::current().clear();
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), ContractError);  // not scalar

    Tensor leaf = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(leaf), ContractError);  // not recorded
    Tape::current().clear();
}

TEST_CASE("backward never mutates forward data") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(15);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor gamma = random_tensor({3}, rng);
    Tensor beta = random_tensor({3}, rng);

    Tape::current().clear();
    Tensor mid = layer_norm(x, gamma, beta, 1e-5);
    Tensor loss = sum(mul(mid, mid));
    const std::vector<double> x_before(x.values().begin(), x.values().end());
    const std::vector<double> mid_before(mid.values().begin(), mid.values().end());
    backward(loss);
    CHECK(std::equal(x_before.begin(), x_before.end(), x.values().begin()));
    CHECK(std::equal(mid_before.begin(), mid_before.end(), mid.values().begin()));
    Tape::current().clear();
}

TEST_CASE("grad_check on a quadratic is exact to roundoff") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(16);
    Tensor x = random_tensor({6}, rng);
    const double err = grad_check([](const std::vector<Tensor>& xs) { return sum(mul(xs[0], xs[0])); }, {x}, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check covers only trainable inputs") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(17);
    Tensor x = random_tensor({4}, rng, true);
    Tensor frozen = random_tensor({4}, rng, false);
    const double err =
        grad_check([](const std::vector<Tensor>& xs) { return sum(mul(xs[0], xs[1])); }, {x, frozen}, 1e-5);
    CHECK(err < 1e-8);
    CHECK(!frozen.has_grad());
}

TEST_CASE("randomized gradient checks over the primitive set") {
    PrecisionGuard precision(Precision::f64);
    Rng rng(18);
    const int trials = 10;
    for (int trial = 0; trial < trials; ++trial) {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        Tensor m = random_tensor({4, 3}, rng);
        Tensor bias = random_tensor({4}, rng);
        Tensor batched_a = random_tensor({2, 3, 4}, rng);
        Tensor batched_b = random_tensor({2, 4, 3}, rng);
        Tensor batched_c = random_tensor({2, 3, 4}, rng);
        Tensor table = random_tensor({5, 3}, rng);
        Tensor square = random_tensor({3, 3}, rng);
        Tensor token = random_tensor({4}, rng);
        Tensor seq = random_tensor({2, 3, 4}, rng);
        Tensor images = random_tensor({2, 3, 4, 4}, rng);
        Tensor scalar_factor = random_tensor({1}, rng);

        const std::vector<std::pair<const char*, std::function<Tensor(const std::vector<Tensor>&)>>> cases = {
            {"add", [](const std::vector<Tensor>& xs) { return sum(add(xs[0], xs[1])); }},
            {"sub+mul", [](const std::vector<Tensor>& xs) { return sum(mul(sub(xs[0], xs[1]), xs[0])); }},
            {"neg+scale", [](const std::vector<Tensor>& xs) { return sum(scale(neg(xs[0]), 1.7)); }},
            {"exp", [](const std::vector<Tensor>& xs) { return sum(exp_elem(scale(xs[0], 0.3))); }},
            {"mul_scalar", [](const std::vector<Tensor>& xs) { return sum(mul_scalar(xs[0], xs[2])); }},
            {"add_row_bias", [](const std::vector<Tensor>& xs) { return sum(mul(add_row_bias(xs[0], xs[3]), xs[1])); }},
            {"matmul", [](const std::vector<Tensor>& xs) { return sum(mul(matmul(xs[0], xs[4]), matmul(xs[1], xs[4]))); }},
            {"matmul_nt", [](const std::vector<Tensor>& xs) { return sum(matmul_nt(xs[0], xs[1])); }},
            {"softmax", [](const std::vector<Tensor>& xs) { return sum(mul(softmax_lastdim(xs[0]), xs[1])); }},
            {"log_softmax", [](const std::vector<Tensor>& xs) { return sum(mul(log_softmax_rows(xs[0]), xs[1])); }},
            {"permute+reshape", [](const std::vector<Tensor>& xs) {
                 return sum(mul(reshape(permute(xs[0], {1, 0}), {3, 4}), xs[1]));
             }},
            {"diag", [](const std::vector<Tensor>& xs) { return sum(diag(xs[5])); }},
        };
        for (const auto& [name, f] : cases) {
            const double err = grad_check(f, {a, b, scalar_factor, bias, m, square}, 1e-5);
            INFO(name);
            CHECK(err < 1e-5);
        }

        const double bmm_err = grad_check(
            [](const std::vector<Tensor>& xs) { return sum(bmm(xs[0], xs[1])); }, {batched_a, batched_b}, 1e-5);
        CHECK(bmm_err < 1e-5);
        const double bmm_nt_err = grad_check(
            [](const std::vector<Tensor>& xs) { return sum(mul(bmm_nt(xs[0], xs[1]), bmm_nt(xs[0], xs[1]))); },
            {batched_a, batched_c}, 1e-5);
        CHECK(bmm_nt_err < 1e-5);

        const double lookup_err = grad_check(
            [](const std::vector<Tensor>& xs) { return sum(mul(rows_lookup(xs[0], {0, 2, 2, 4}), rows_lookup(xs[0], {1, 1, 3, 0}))); },
            {table}, 1e-5);
        CHECK(lookup_err < 1e-5);

        const double token_err = grad_check(
            [](const std::vector<Tensor>& xs) { return sum(select_token(prepend_token(xs[0], xs[1]), 0)); },
            {seq, token}, 1e-5);
        CHECK(token_err < 1e-5);

        const double patch_err = grad_check(
            [](const std::vector<Tensor>& xs) { return sum(mul(patchify(xs[0], 2), patchify(xs[0], 2))); },
            {images}, 1e-5);
        CHECK(patch_err < 1e-5);
    }
}

TEST_CASE("ops are deterministic within a process") {
    Rng rng(19);
    Tensor a = random_tensor({16, 16}, rng, false);
    Tensor b = random_tensor({16, 16}, rng, false);
    Tensor first = matmul(a, b);
    Tensor second = matmul(a, b);
    CHECK(std::equal(first.values().begin(), first.values().end(), second.values().begin()));
}

TEST_CASE("f32 mode rounds op outputs through float") {
    PrecisionGuard precision(Precision::f32);
    Tensor a = Tensor::from_values({1}, {1.0});
    Tensor b = Tensor::from_values({1}, {1e-9});
    Tensor out = add(a, b);
    CHECK(out.values()[0] == static_cast<double>(static_cast<float>(1.0 + 1e-9)));
    CHECK(out.values()[0] == static_cast<double>(static_cast<float>(out.values()[0])));
}

TEST_CASE("patchify token geometry") {
    // 1x1 channel, 4x4 image, patch 2 -> 4 patches of 4 values
    std::vector<double> values(16);
    for (std::size_t i = 0; i < 16; ++i) values[i] = static_cast<double>(i);
    Tensor image = Tensor::from_values({1, 1, 4, 4}, std::move(values));
    Tensor patches = patchify(image, 2);
    CHECK(patches.shape() == Shape{1, 4, 4});
    // top-left patch: rows 0-1, cols 0-1
    CHECK(patches.values()[0] == 0.0);
    CHECK(patches.values()[1] == 1.0);
    CHECK(patches.values()[2] == 4.0);
    CHECK(patches.values()[3] == 5.0);
    // top-right patch starts at column 2
    CHECK(patches.values()[4] == 2.0);
}
