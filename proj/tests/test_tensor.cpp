#include <catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace affgro;
using ad::Tensor;
using testutil::gradient_max_rel_error;
using testutil::random_vec;

TEST_CASE("matmul values") {
    auto a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::constant({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = ad::matmul(a, b);
    REQUIRE(c.shape() == std::vector<std::size_t>{2, 2});
    CHECK(c.val()[0] == Catch::Approx(58));
    CHECK(c.val()[1] == Catch::Approx(64));
    CHECK(c.val()[2] == Catch::Approx(139));
    CHECK(c.val()[3] == Catch::Approx(154));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    auto x = Tensor::constant({4, 5}, random_vec(rng, 20));
    auto y = ad::softmax_rows(x);
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 5; ++j) s += y.val()[i * 5 + j];
        CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layer norm normalizes rows") {
    Rng rng(4);
    auto x = Tensor::constant({3, 8}, random_vec(rng, 24, 2.0));
    auto g = Tensor::constant({8}, std::vector<double>(8, 1.0));
    auto b = Tensor::constant({8}, std::vector<double>(8, 0.0));
    auto y = ad::layer_norm(x, g, b);
    for (std::size_t i = 0; i < 3; ++i) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mu += y.val()[i * 8 + j];
        mu /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (y.val()[i * 8 + j] - mu) * (y.val()[i * 8 + j] - mu);
        var /= 8;
        CHECK(std::abs(mu) < 1e-10);
        CHECK(var == Catch::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("elementwise op gradients") {
    Rng rng(5);
    const std::vector<std::size_t> shape{3, 4};
    const auto x0 = random_vec(rng, 12);
    const auto w = random_vec(rng, 12);
    auto weighted_sum = [&](const Tensor& y) { return ad::sum(ad::mul(y, Tensor::constant(shape, w))); };

    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::gelu(x)); }, shape, x0) < 1e-5);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::sigmoid(x)); }, shape, x0) < 1e-5);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::relu(x)); }, shape, x0) < 1e-5);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::scale(x, 2.5)); }, shape, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) { return weighted_sum(ad::mul(x, Tensor::constant(shape, w))); }, shape, x0) <
          1e-6);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::add_scalar(x, 0.7)); }, shape, x0) <
          1e-6);
}

TEST_CASE("matmul and linear gradients") {
    Rng rng(6);
    const auto x0 = random_vec(rng, 12);
    const auto bmat_v = random_vec(rng, 8);
    const auto readout32 = random_vec(rng, 6);
    auto bmat = Tensor::constant({4, 2}, bmat_v);

    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return ad::sum(ad::mul(ad::matmul(x, bmat), Tensor::constant({3, 2}, readout32)));
              },
              {3, 4}, x0) < 1e-5);

    // right operand
    const auto a0 = random_vec(rng, 6);
    const auto readout34 = random_vec(rng, 12);
    const auto w0 = random_vec(rng, 8);
    auto amat = Tensor::constant({3, 2}, a0);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return ad::sum(ad::mul(ad::matmul(amat, x), Tensor::constant({3, 4}, readout34)));
              },
              {2, 4}, w0) < 1e-5);
}

TEST_CASE("softmax, logsumexp, layer norm gradients") {
    Rng rng(8);
    const std::vector<std::size_t> shape{2, 5};
    const auto x0 = random_vec(rng, 10);
    const auto w = random_vec(rng, 10);
    auto weighted_sum = [&](const Tensor& y) { return ad::sum(ad::mul(y, Tensor::constant(shape, w))); };

    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::softmax_rows(x)); }, shape, x0) <
          1e-4);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return weighted_sum(ad::softmax_all(x)); }, shape, x0) <
          1e-4);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return ad::logsumexp(x); }, shape, x0) < 1e-5);

    const auto g0 = random_vec(rng, 5, 0.5);
    const auto be0 = random_vec(rng, 5, 0.5);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return weighted_sum(
                      ad::layer_norm(x, Tensor::constant({5}, g0), Tensor::constant({5}, be0)));
              },
              shape, x0) < 1e-4);
    // gamma / beta paths
    CHECK(gradient_max_rel_error(
              [&](const Tensor& g) {
                  return weighted_sum(
                      ad::layer_norm(Tensor::constant(shape, x0), g, Tensor::constant({5}, be0)));
              },
              {5}, g0) < 1e-4);
}

TEST_CASE("shape op gradients") {
    Rng rng(9);
    const auto x0 = random_vec(rng, 12);
    const auto w6 = random_vec(rng, 6);
    const auto w8 = random_vec(rng, 8);
    const auto extra_row = random_vec(rng, 4);
    const auto w16 = random_vec(rng, 16);
    const auto extra_col = random_vec(rng, 3);
    const auto w15 = random_vec(rng, 15);
    const auto b4 = random_vec(rng, 4);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return ad::sum(ad::mul(ad::slice_rows(x, 1, 3), Tensor::constant({2, 4}, w8)));
              },
              {3, 4}, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return ad::sum(ad::mul(ad::slice_cols(x, 1, 3), Tensor::constant({3, 2}, w6)));
              },
              {3, 4}, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto t = ad::transpose(x);
                  return ad::sum(ad::mul(t, Tensor::constant({4, 3}, x0)));
              },
              {3, 4}, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto c = ad::concat_rows({x, Tensor::constant({1, 4}, extra_row)});
                  return ad::sum(ad::mul(c, Tensor::constant({4, 4}, w16)));
              },
              {3, 4}, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto c = ad::concat_cols({x, Tensor::constant({3, 1}, extra_col)});
                  return ad::sum(ad::mul(c, Tensor::constant({3, 5}, w15)));
              },
              {3, 4}, x0) < 1e-6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  return ad::sum(ad::mul(ad::add_rowvec(Tensor::constant({3, 4}, x0), x),
                                         Tensor::constant({3, 4}, x0)));
              },
              {4}, b4) < 1e-6);
}

TEST_CASE("scalar op gradients") {
    Rng rng(10);
    const auto u0 = random_vec(rng, 6);
    const auto v0 = random_vec(rng, 6);

    CHECK(gradient_max_rel_error(
              [&](const Tensor& u) { return ad::cosine_similarity(u, Tensor::constant({6}, v0)); }, {6}, u0) < 1e-5);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& v) { return ad::cosine_similarity(Tensor::constant({6}, u0), v); }, {6}, v0) < 1e-5);
    CHECK(gradient_max_rel_error([&](const Tensor& x) { return ad::pick(x, 3); }, {6}, u0) < 1e-8);

    std::vector<double> target{0.1, 0.4, 0.2, 0.3};
    std::vector<double> pred0{0.3, 0.3, 0.2, 0.2};
    CHECK(gradient_max_rel_error(
              [&](const Tensor& p) { return ad::kl_to_const_target(p, target, 1e-12); }, {4}, pred0) < 1e-5);

    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto s = ad::add_scalar(ad::sum(ad::mul(x, x)), 2.0);
                  return ad::sum(ad::div_scalar(ad::mul(x, Tensor::constant({6}, v0)), s));
              },
              {6}, u0) < 1e-5);

    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto a = ad::sum(x);
                  auto b = ad::sum(ad::mul(x, x));
                  return ad::affine_combination({a, b}, {2.0, -0.5}, 1.0);
              },
              {6}, u0) < 1e-6);
}

TEST_CASE("spatial op gradients") {
    Rng rng(11);
    // conv transpose 2x2: 2x3 input, 2 -> 3 channels
    const std::size_t h = 2, w = 3, cin = 2, cout = 3;
    const auto x0 = random_vec(rng, h * w * cin);
    const auto w0 = random_vec(rng, cin * cout * 4);
    const auto b0 = random_vec(rng, cout);
    const auto readout = random_vec(rng, 4 * h * w * cout);
    auto wt = Tensor::constant({cin * cout * 4}, w0);
    auto bt = Tensor::constant({cout}, b0);

    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto y = ad::conv_transpose2x2(x, h, w, wt, bt, cin, cout);
                  return ad::sum(ad::mul(y, Tensor::constant({4 * h * w, cout}, readout)));
              },
              {h * w, cin}, x0) < 1e-5);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& wx) {
                  auto y = ad::conv_transpose2x2(Tensor::constant({h * w, cin}, x0), h, w, wx, bt, cin, cout);
                  return ad::sum(ad::mul(y, Tensor::constant({4 * h * w, cout}, readout)));
              },
              {cin * cout * 4}, w0) < 1e-5);

    // bilinear resize up and down
    const auto g0 = random_vec(rng, 4 * 4);
    const auto r_up = random_vec(rng, 7 * 9);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto y = ad::bilinear_resize(x, 4, 4, 7, 9);
                  return ad::sum(ad::mul(y, Tensor::constant({63, 1}, r_up)));
              },
              {16, 1}, g0) < 1e-5);
    const auto r_dn = random_vec(rng, 2 * 3);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto y = ad::bilinear_resize(x, 4, 4, 2, 3);
                  return ad::sum(ad::mul(y, Tensor::constant({6, 1}, r_dn)));
              },
              {16, 1}, g0) < 1e-5);

    // crop + pad
    const auto r_crop = random_vec(rng, 2 * 2);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto y = ad::crop2d(x, 4, 4, 1, 2, 2, 2);
                  return ad::sum(ad::mul(y, Tensor::constant({4, 1}, r_crop)));
              },
              {16, 1}, g0) < 1e-6);
    const auto r_pad = random_vec(rng, 6 * 6);
    CHECK(gradient_max_rel_error(
              [&](const Tensor& x) {
                  auto y = ad::pad_embed2d(x, 4, 4, 1, 1, 6, 6);
                  return ad::sum(ad::mul(y, Tensor::constant({36, 1}, r_pad)));
              },
              {16, 1}, g0) < 1e-6);
}

TEST_CASE("bilinear resize preserves constants") {
    auto x = Tensor::constant({12, 1}, std::vector<double>(12, 3.25));
    auto y = ad::bilinear_resize(x, 3, 4, 9, 5);
    for (double v : y.val()) CHECK(v == Catch::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("detach blocks gradient") {
    auto x = Tensor::leaf({3}, {1.0, 2.0, 3.0}, true);
    auto y = ad::sum(ad::mul(ad::detach(x), x));
    ad::backward(y);
    // gradient equals the detached values, not 2x
    CHECK(x.grad()[0] == Catch::Approx(1.0));
    CHECK(x.grad()[1] == Catch::Approx(2.0));
    CHECK(x.grad()[2] == Catch::Approx(3.0));
}

TEST_CASE("parameter reuse accumulates gradients") {
    auto x = Tensor::leaf({2}, {1.5, -0.5}, true);
    auto y = ad::affine_combination({ad::sum(x), ad::sum(ad::mul(x, x))}, {1.0, 1.0});
    ad::backward(y);
    CHECK(x.grad()[0] == Catch::Approx(1.0 + 2.0 * 1.5));
    CHECK(x.grad()[1] == Catch::Approx(1.0 - 2.0 * 0.5));
}
