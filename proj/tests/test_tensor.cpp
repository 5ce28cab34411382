#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>

#include "seq2seg/ops.hpp"
#include "seq2seg/tensor.hpp"

using namespace seq2seg;

namespace {

// Central finite difference through a fresh forward evaluation.
double fd_central(const std::function<double()>& f, Tensor t, size_t idx, double h) {
    float* p = t.data();
    const float orig = p[idx];
    p[idx] = static_cast<float>(orig + h);
    const double f1 = f();
    p[idx] = static_cast<float>(orig - h);
    const double f2 = f();
    p[idx] = orig;
    return (f1 - f2) / (2.0 * h);
}

// Analytic gradient of sum(op(inputs)) w.r.t. every element of `target`.
std::vector<float> grad_of_sum(const std::function<Tensor()>& op, Tensor target) {
    target.zero_grad();  // earlier checks may have accumulated here already
    Tape tape;
    Tape::Scope scope(tape);
    Tensor out = op();
    Tensor loss = sum_all(out);
    tape.backward(loss);
    auto g = target.grad_const();
    std::vector<float> result(g.begin(), g.end());
    target.zero_grad();
    return result;
}

void check_grad_against_fd(const std::function<Tensor()>& op, Tensor target,
                           double h, double tol, bool relative = false) {
    auto analytic = grad_of_sum(op, target);
    auto value = [&]() {
        Tensor out = op();
        double s = 0.0;
        for (size_t i = 0; i < out.numel(); ++i) s += out.data()[i];
        return s;
    };
    for (size_t i = 0; i < target.numel(); ++i) {
        const double fd = fd_central(value, target, i, h);
        const double a = analytic[i];
        if (relative) {
            const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-4});
            CHECK(std::fabs(a - fd) / denom < tol);
        } else {
            CHECK(std::fabs(a - fd) < tol);
        }
    }
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
    return Tensor::uniform(std::move(shape), rng, -1.0f, 1.0f, requires_grad);
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul identity and zero cases") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    Tensor out = matmul(eye, m);
    CHECK(out.vec() == std::vector<float>{3, 4, 5, 6});

    Tensor a = Tensor::from_data({1, 2}, {1, 2});
    Tensor z = Tensor::from_data({2, 1}, {0, 0});
    CHECK(matmul(a, z).item() == 0.0f);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(42);
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor b = random_tensor({4, 2}, rng, true);
    check_grad_against_fd([&]() { return matmul(a, b); }, a, 1e-3, 1e-3);
    check_grad_against_fd([&]() { return matmul(a, b); }, b, 1e-3, 1e-3);
}

TEST_CASE("softmax rows basics") {
    Tensor a = Tensor::from_data({1, 2}, {0, 0});
    Tensor out = softmax_rows(a);
    CHECK(out.data()[0] == doctest::Approx(0.5));
    CHECK(out.data()[1] == doctest::Approx(0.5));

    Tensor big = Tensor::from_data({1, 3}, {1000, 1000, 1000});
    Tensor ob = softmax_rows(big);
    for (int j = 0; j < 3; ++j) CHECK(ob.data()[j] == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    Rng rng(7);
    Tensor a = random_tensor({5, 9}, rng);
    Tensor out = softmax_rows(a);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) s += out.data()[i * 9 + j];
        CHECK(std::fabs(s - 1.0) < 1e-6);
    }
    Tensor shifted = Tensor::zeros({5, 9});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 9; ++j) shifted.data()[i * 9 + j] = a.data()[i * 9 + j] + 3.25f;
    Tensor out2 = softmax_rows(shifted);
    for (size_t i = 0; i < out.numel(); ++i)
        CHECK(std::fabs(out.data()[i] - out2.data()[i]) < 1e-6);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(3);
    Tensor a = random_tensor({2, 5}, rng, true);
    // sum(softmax) has zero gradient by construction; weight the rows instead.
    Tensor w = Tensor::from_data({5, 1}, {0.2f, -0.4f, 1.0f, 0.7f, -0.1f});
    check_grad_against_fd([&]() { return matmul(softmax_rows(a), w); }, a, 1e-3, 1e-3);
}

TEST_CASE("layer norm standardizes rows") {
    Tensor gamma = Tensor::full({4}, 1.0f);
    Tensor beta = Tensor::zeros({4});
    Tensor constant = Tensor::full({1, 4}, 2.5f);
    Tensor out = layer_norm(constant, gamma, beta, 1e-5f);
    for (int j = 0; j < 4; ++j) CHECK(out.data()[j] == doctest::Approx(0.0));

    Tensor g2 = Tensor::full({2}, 1.0f);
    Tensor b2 = Tensor::zeros({2});
    Tensor two = Tensor::from_data({1, 2}, {1, 3});
    Tensor o2 = layer_norm(two, g2, b2, 0.0f);
    CHECK(o2.data()[0] == doctest::Approx(-1.0));
    CHECK(o2.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("layer norm gradient matches finite differences") {
    Rng rng(11);
    Tensor a = random_tensor({2, 6}, rng, true);
    Tensor gamma = random_tensor({6}, rng, true);
    Tensor beta = random_tensor({6}, rng, true);
    Tensor w = Tensor::from_data({6, 1}, {0.3f, -0.2f, 0.9f, 0.1f, -0.7f, 0.4f});
    auto op = [&]() { return matmul(layer_norm(a, gamma, beta, 1e-5f), w); };
    check_grad_against_fd(op, a, 1e-3, 1e-3);
    check_grad_against_fd(op, gamma, 1e-3, 1e-3);
    check_grad_against_fd(op, beta, 1e-3, 1e-3);
}

TEST_CASE("conv2d identity and zero kernels") {
    Rng rng(5);
    Tensor x = random_tensor({1, 3, 3, 2}, rng);
    Tensor eye = Tensor::zeros({1, 1, 2, 2});
    eye.data()[0] = 1.0f;  // (0,0,0,0)
    eye.data()[3] = 1.0f;  // (0,0,1,1)
    Tensor out = conv2d(x, eye);
    CHECK(out.vec() == x.vec());

    Tensor zk = Tensor::zeros({3, 3, 2, 4});
    Tensor oz = conv2d(x, zk, 1, 1);
    for (size_t i = 0; i < oz.numel(); ++i) CHECK(oz.data()[i] == 0.0f);
}

TEST_CASE("conv2d matches the nested-loop reference exactly") {
    Rng rng(9);
    // integer-valued input and kernel so the comparison is exact
    Tensor x = Tensor::zeros({1, 5, 5, 1});
    for (size_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(rng.uniform_int(7) - 3);
    Tensor k = Tensor::zeros({3, 3, 1, 1});
    for (size_t i = 0; i < k.numel(); ++i) k.data()[i] = static_cast<float>(rng.uniform_int(5) - 2);
    Tensor out = conv2d(x, k, 1, 1);
    REQUIRE(out.shape() == Shape{1, 5, 5, 1});
    for (int oy = 0; oy < 5; ++oy) {
        for (int ox = 0; ox < 5; ++ox) {
            float acc = 0.0f;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const int iy = oy + ky - 1, ix = ox + kx - 1;
                    if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                    acc += x.data()[iy * 5 + ix] * k.data()[ky * 3 + kx];
                }
            CHECK(out.data()[oy * 5 + ox] == acc);
        }
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(13);
    Tensor x = random_tensor({1, 4, 4, 2}, rng, true);
    Tensor k = random_tensor({3, 3, 2, 3}, rng, true);
    Tensor b = random_tensor({3}, rng, true);
    auto op = [&]() { return conv2d(x, k, b, 1, 1); };
    check_grad_against_fd(op, x, 1e-3, 1e-3);
    check_grad_against_fd(op, k, 1e-3, 1e-3);
    check_grad_against_fd(op, b, 1e-3, 1e-3);
}

TEST_CASE("conv2d rejects non-positive output sizes") {
    Tensor x = Tensor::zeros({1, 2, 2, 1});
    Tensor k = Tensor::zeros({3, 3, 1, 1});
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), ShapeError);
}

TEST_CASE("bilinear resize identity and constants") {
    Rng rng(17);
    Tensor x = random_tensor({1, 4, 5, 3}, rng);
    Tensor same = bilinear_resize(x, 4, 5);
    CHECK(std::memcmp(same.data(), x.data(), x.numel() * sizeof(float)) == 0);

    Tensor c = Tensor::full({1, 2, 2, 1}, 3.75f);
    Tensor up = bilinear_resize(c, 7, 9);
    for (size_t i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(3.75));
}

TEST_CASE("bilinear resize align-corners hand value") {
    Tensor x = Tensor::from_data({1, 2, 2, 1}, {1, 2, 3, 4});
    Tensor out = bilinear_resize(x, 3, 3);
    CHECK(out.data()[4] == doctest::Approx(2.5));  // center
    CHECK(out.data()[0] == doctest::Approx(1.0));  // corners preserved
    CHECK(out.data()[8] == doctest::Approx(4.0));
}

TEST_CASE("bilinear resize gradient matches finite differences") {
    Rng rng(19);
    Tensor x = random_tensor({1, 3, 3, 2}, rng, true);
    check_grad_against_fd([&]() { return bilinear_resize(x, 5, 4); }, x, 1e-3, 1e-3);
}

TEST_CASE("batch norm basics") {
    BatchNormState state;
    Tensor gamma = Tensor::full({2}, 1.0f);
    Tensor beta = Tensor::zeros({2});
    Tensor x = Tensor::full({2, 2, 2, 2}, 5.0f);
    Tensor out = batch_norm2d(x, gamma, beta, state, true);
    for (size_t i = 0; i < out.numel(); ++i) CHECK(std::fabs(out.data()[i]) < 1e-3);

    BatchNormState s2;
    Tensor g0 = Tensor::zeros({2});
    Tensor b2 = Tensor::full({2}, 0.75f);
    Rng rng(23);
    Tensor r = random_tensor({1, 3, 3, 2}, rng);
    Tensor o2 = batch_norm2d(r, g0, b2, s2, true);
    for (size_t i = 0; i < o2.numel(); ++i) CHECK(o2.data()[i] == 0.75f);
}

TEST_CASE("batch norm eval without stats errors") {
    BatchNormState state;
    Tensor gamma = Tensor::full({1}, 1.0f);
    Tensor beta = Tensor::zeros({1});
    Tensor x = Tensor::zeros({1, 2, 2, 1});
    CHECK_THROWS_AS(batch_norm2d(x, gamma, beta, state, false), Error);
}

TEST_CASE("batch norm gradient matches finite differences in train mode") {
    Rng rng(29);
    Tensor x = random_tensor({2, 3, 3, 2}, rng, true);
    Tensor gamma = Tensor::uniform({2}, rng, 0.5f, 1.5f, true);
    Tensor beta = random_tensor({2}, rng, true);
    BatchNormState state;
    Tensor w = Tensor::full({2, 3, 3, 2}, 0.0f);
    for (size_t i = 0; i < w.numel(); ++i)
        w.data()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
    // weighted sum so the batch-stat terms of the backward formula matter
    auto op = [&]() {
        Tensor y = batch_norm2d(x, gamma, beta, state, true);
        Tensor flat = reshape(y, {1, static_cast<int>(y.numel())});
        Tensor wf = reshape(w, {static_cast<int>(w.numel()), 1});
        return matmul(flat, wf);
    };
    check_grad_against_fd(op, x, 1e-3, 2e-3);
    check_grad_against_fd(op, gamma, 1e-3, 2e-3);
    check_grad_against_fd(op, beta, 1e-3, 2e-3);
}

TEST_CASE("cross entropy saturated, uniform, and ignored pixels") {
    // strongly peaked on the true class everywhere
    Tensor logits = Tensor::zeros({1, 2, 2, 3});
    std::vector<uint16_t> labels = {0, 1, 2, 1};
    for (int i = 0; i < 4; ++i) logits.data()[i * 3 + labels[static_cast<size_t>(i)]] = 50.0f;
    CHECK(cross_entropy_map(logits, labels, 255).item() < 1e-3f);

    Tensor uniform = Tensor::zeros({1, 2, 2, 4});
    std::vector<uint16_t> lab2 = {0, 1, 2, 3};
    CHECK(cross_entropy_map(uniform, lab2, 255).item() == doctest::Approx(std::log(4.0)));

    // one ignored pixel; oracle sums the per-pixel terms directly
    Rng rng(31);
    Tensor l3 = Tensor::uniform({1, 2, 2, 3}, rng, -2.0f, 2.0f);
    std::vector<uint16_t> lab3 = {2, 255, 0, 1};
    double expected = 0.0;
    int scored = 0;
    for (int i = 0; i < 4; ++i) {
        if (lab3[static_cast<size_t>(i)] == 255) continue;
        double denom = 0.0;
        for (int j = 0; j < 3; ++j) denom += std::exp(static_cast<double>(l3.data()[i * 3 + j]));
        expected += -std::log(std::exp(static_cast<double>(l3.data()[i * 3 + lab3[static_cast<size_t>(i)]])) / denom);
        ++scored;
    }
    expected /= scored;
    CHECK(std::fabs(cross_entropy_map(l3, lab3, 255).item() - expected) < 1e-6);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    Tensor logits = Tensor::zeros({1, 1, 1, 3});
    std::vector<uint16_t> bad = {7};
    CHECK_THROWS_AS(cross_entropy_map(logits, bad, 255), Error);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    Rng rng(37);
    Tensor logits = Tensor::uniform({1, 2, 2, 3}, rng, -1.0f, 1.0f, true);
    std::vector<uint16_t> labels = {0, 255, 2, 1};
    check_grad_against_fd([&]() { return cross_entropy_map(logits, labels, 255); },
                          logits, 1e-3, 1e-3);
}

TEST_CASE("relu and gelu pointwise values") {
    Tensor x = Tensor::from_data({3}, {-1.0f, 0.0f, 2.0f});
    Tensor r = relu(x);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[2] == 2.0f);
    Tensor g = gelu(x);
    CHECK(g.data()[1] == 0.0f);
}

TEST_CASE("gelu gradient matches double-precision finite differences") {
    Rng rng(41);
    auto ref = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
    for (int trial = 0; trial < 5; ++trial) {
        const double p = rng.uniform(-2.0, 2.0);
        Tensor x = Tensor::from_data({1}, {static_cast<float>(p)}, true);
        auto analytic = grad_of_sum([&]() { return gelu(x); }, x);
        const double h = 1e-5;
        const double fd = (ref(p + h) - ref(p - h)) / (2.0 * h);
        CHECK(std::fabs(analytic[0] - fd) < 1e-4);
    }
}

TEST_CASE("backward of sum gives ones, scaling by zero gives zeros") {
    Rng rng(43);
    Tensor w = random_tensor({3, 4}, rng, true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = sum_all(w);
        tape.backward(loss);
        for (size_t i = 0; i < w.numel(); ++i) CHECK(w.grad_const()[i] == 1.0f);
        w.zero_grad();
    }
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = scale(sum_all(gelu(w)), 0.0f);
        tape.backward(loss);
        for (size_t i = 0; i < w.numel(); ++i) CHECK(w.grad_const()[i] == 0.0f);
    }
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor w = Tensor::zeros({2, 2}, true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor out = scale(w, 2.0f);
    CHECK_THROWS_AS(tape.backward(out), ShapeError);
}

TEST_CASE("non-finite results raise immediately") {
    Tensor a = Tensor::from_data({1, 1}, {1e30f});
    Tensor b = Tensor::from_data({1, 1}, {1e30f});
    CHECK_THROWS_AS(matmul(a, b), NumericsError);  // overflows to inf
    CHECK_THROWS_AS(scale(a, 1e30f), NumericsError);
}

TEST_CASE("identical seeded passes produce bit-identical gradients") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tensor a = random_tensor({4, 4}, rng, true);
        Tensor b = random_tensor({4, 4}, rng, true);
        Tape tape;
        Tape::Scope scope(tape);
        Tensor out = matmul(gelu(matmul(a, b)), b);
        Tensor loss = sum_all(out);
        tape.backward(loss);
        std::vector<float> grads = a.grad_const();
        grads.insert(grads.end(), b.grad_const().begin(), b.grad_const().end());
        return grads;
    };
    auto g1 = run(77);
    auto g2 = run(77);
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("elementwise helpers: add, scale, bias, slices, concat, stack") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {10, 20, 30, 40});
    CHECK(add(a, b).vec() == std::vector<float>{11, 22, 33, 44});
    CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeError);
    CHECK(scale(a, 2.0f).vec() == std::vector<float>{2, 4, 6, 8});

    Tensor bias = Tensor::from_data({2}, {100, 200});
    CHECK(add_bias_rows(a, bias).vec() == std::vector<float>{101, 202, 103, 204});

    Tensor s = col_slice(a, 1, 1);
    CHECK(s.vec() == std::vector<float>{2, 4});
    Tensor cc = concat_cols({a, s});
    CHECK(cc.shape() == Shape{2, 3});
    CHECK(cc.vec() == std::vector<float>{1, 2, 2, 3, 4, 4});

    Tensor m1 = Tensor::from_data({1, 2, 1}, {1, 2});
    Tensor m2 = Tensor::from_data({1, 2, 1}, {3, 4});
    Tensor st = stack_maps({m1, m2});
    CHECK(st.shape() == Shape{2, 1, 2, 1});
    CHECK(st.vec() == std::vector<float>{1, 2, 3, 4});

    Tensor f1 = Tensor::from_data({1, 1, 2, 1}, {1, 2});
    Tensor f2 = Tensor::from_data({1, 1, 2, 2}, {5, 6, 7, 8});
    Tensor cat = concat_channels({f1, f2});
    CHECK(cat.shape() == Shape{1, 1, 2, 3});
    CHECK(cat.vec() == std::vector<float>{1, 5, 6, 2, 7, 8});
    CHECK_THROWS_AS(concat_channels({f1, Tensor::zeros({1, 2, 2, 1})}), ShapeError);
}

TEST_CASE("gradients flow through slicing and concatenation") {
    Rng rng(53);
    Tensor a = random_tensor({3, 6}, rng, true);
    auto op = [&]() {
        Tensor left = col_slice(a, 0, 3);
        Tensor right = col_slice(a, 3, 3);
        return matmul(concat_cols({gelu(left), right}), Tensor::full({6, 1}, 0.5f));
    };
    check_grad_against_fd(op, a, 1e-3, 1e-3);
}

TEST_CASE("dropout keeps expectation and p=0 is the identity") {
    Rng rng(59);
    Tensor a = Tensor::full({64, 64}, 1.0f);
    Tensor kept = dropout(a, 0.0f, rng);
    CHECK(kept.same_storage(a));
    Tensor dropped = dropout(a, 0.5f, rng);
    double mean = 0.0;
    for (size_t i = 0; i < dropped.numel(); ++i) mean += dropped.data()[i];
    mean /= static_cast<double>(dropped.numel());
    CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
}

}  // TEST_SUITE
