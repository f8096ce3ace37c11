#include "doctest.h"

#include "vlmir/core/nn_ops.hpp"
#include "vlmir/core/params.hpp"
#include "vlmir/core/tensor.hpp"

#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace vlmir;
using D = Tensor<double>;

TEST_CASE("elementwise ops and backward") {
    Rng rng(1);
    auto a = D::randn({3, 4}, rng, 1.0, true);
    auto b = D::randn({3, 4}, rng, 1.0, true);

    auto loss_fn = [&] { return mean_all(mul(silu(add(a, b)), sub(a, b))); };
    CHECK(testutil::grad_check(a, loss_fn, testutil::all_indices(a)) < 1e-6);
    a.grad().assign(a.grad().size(), 0.0);
    CHECK(testutil::grad_check(b, loss_fn, testutil::all_indices(b)) < 1e-6);
}

TEST_CASE("matmul forward and gradient") {
    Rng rng(2);
    auto a = D::randn({3, 5}, rng, 1.0, true);
    auto b = D::randn({5, 2}, rng, 1.0, true);
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{3, 2});
    double manual = 0.0;
    for (int k = 0; k < 5; ++k) manual += a.data()[size_t(k)] * b.data()[size_t(k) * 2];
    CHECK(c.data()[0] == doctest::Approx(manual));

    auto loss_fn = [&] { return sum_all(square(matmul(a, b))); };
    CHECK(testutil::grad_check(a, loss_fn, testutil::all_indices(a)) < 1e-6);
}

TEST_CASE("softmax rows sum to one and log_softmax gradient") {
    Rng rng(3);
    auto a = D::randn({4, 6}, rng, 2.0, true);
    auto s = softmax_rows(a);
    for (int r = 0; r < 4; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 6; ++c) sum += s.data()[size_t(r * 6 + c)];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-10));
    }
    auto loss_fn = [&] { return mean_all(mul(log_softmax_rows(a), a)); };
    CHECK(testutil::grad_check(a, loss_fn, testutil::all_indices(a)) < 1e-6);
}

TEST_CASE("layer_norm gradient") {
    Rng rng(4);
    auto x = D::randn({3, 8}, rng, 1.0, true);
    auto g = D::randn({8}, rng, 0.5, true);
    auto b = D::randn({8}, rng, 0.5, true);
    auto loss_fn = [&] { return mean_all(square(layer_norm(x, g, b))); };
    CHECK(testutil::grad_check(x, loss_fn, testutil::all_indices(x)) < 1e-5);
    x.grad().assign(x.grad().size(), 0.0);
    CHECK(testutil::grad_check(g, loss_fn, testutil::all_indices(g)) < 1e-5);
}

TEST_CASE("l2_normalize_rows yields unit rows, rejects zero rows") {
    Rng rng(5);
    auto a = D::randn({2, 7}, rng, 3.0, true);
    auto n = l2_normalize_rows(a);
    for (int r = 0; r < 2; ++r) {
        double nrm = 0.0;
        for (int c = 0; c < 7; ++c) nrm += n.data()[size_t(r * 7 + c)] * n.data()[size_t(r * 7 + c)];
        CHECK(std::sqrt(nrm) == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto loss_fn = [&] { return sum_all(mul(l2_normalize_rows(a), a)); };
    CHECK(testutil::grad_check(a, loss_fn, testutil::all_indices(a)) < 1e-6);

    auto z = D::zeros({1, 3});
    CHECK_THROWS(l2_normalize_rows(z));
}

TEST_CASE("gather/slice/concat/transpose gradients") {
    Rng rng(6);
    auto table = D::randn({5, 3}, rng, 1.0, true);
    std::vector<int> ids = {4, 0, 0, 2};
    auto loss_fn = [&] {
        auto g = gather_rows(table, ids);
        auto s = slice_rows(g, 1, 2);
        auto cat = concat_rows<double>({s, s});
        return sum_all(square(transpose2d(cat)));
    };
    CHECK(testutil::grad_check(table, loss_fn, testutil::all_indices(table)) < 1e-6);
    CHECK_THROWS(gather_rows(table, {5}));
}

TEST_CASE("conv2d matches direct computation and gradcheck") {
    Rng rng(7);
    auto x = D::randn({2, 3, 5, 5}, rng, 1.0, true);
    auto w = D::randn({4, 3, 3, 3}, rng, 0.5, true);
    auto b = D::randn({4}, rng, 0.1, true);
    auto y = conv2d(x, w, b, 1, 1);
    CHECK(y.shape() == Shape{2, 4, 5, 5});

    // direct value at one output position
    double acc = b.data()[1];
    for (int c = 0; c < 3; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                int iy = 2 + ky - 1, ix = 3 + kx - 1;
                acc += x.data()[size_t(((0 * 3 + c) * 5 + iy) * 5 + ix)] *
                       w.data()[size_t(((1 * 3 + c) * 3 + ky) * 3 + kx)];
            }
    CHECK(y.data()[size_t((1 * 5 + 2) * 5 + 3)] == doctest::Approx(acc));

    auto loss_fn = [&] { return mean_all(square(conv2d(x, w, b, 1, 1))); };
    CHECK(testutil::grad_check(w, loss_fn, testutil::all_indices(w)) < 1e-5);
    w.grad().assign(w.grad().size(), 0.0);
    CHECK(testutil::grad_check(x, loss_fn, testutil::all_indices(x)) < 1e-5);

    // strided
    auto ys = conv2d(x, w, b, 2, 1);
    CHECK(ys.shape() == Shape{2, 4, 3, 3});
    auto loss_s = [&] { return mean_all(square(conv2d(x, w, b, 2, 1))); };
    x.grad().assign(x.grad().size(), 0.0);
    CHECK(testutil::grad_check(x, loss_s, testutil::all_indices(x)) < 1e-5);
}

TEST_CASE("group_norm, upsample, concat_channels, film gradients") {
    Rng rng(8);
    auto x = D::randn({2, 4, 3, 3}, rng, 1.0, true);
    auto g = D::randn({4}, rng, 0.3, true);
    auto b = D::randn({4}, rng, 0.3, true);
    auto gamma = D::randn({2, 4}, rng, 0.2, true);
    auto beta = D::randn({2, 4}, rng, 0.2, true);
    auto loss_fn = [&] {
        auto y = group_norm(x, 2, g, b);
        y = film_modulate(y, gamma, beta);
        y = nearest_upsample2x(y);
        auto cc = concat_channels(y, y);
        return mean_all(square(cc));
    };
    CHECK(testutil::grad_check(x, loss_fn, testutil::all_indices(x)) < 1e-5);
    x.grad().assign(x.grad().size(), 0.0);
    CHECK(testutil::grad_check(gamma, loss_fn, testutil::all_indices(gamma)) < 1e-5);
}

TEST_CASE("film identity at zero") {
    Rng rng(9);
    auto x = D::randn({1, 3, 4, 4}, rng);
    auto zero = D::zeros({1, 3});
    auto y = film_modulate(x, zero, zero);
    CHECK(y.data() == x.data());
}

TEST_CASE("checkpoint round trip and error paths") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "vlmir_ckpt_test").string();
    fs::remove_all(dir);

    Rng rng(10);
    ParamStore<float> ps;
    ps.add("enc.w", Tensor<float>::randn({4, 3}, rng));
    ps.add("enc.b", Tensor<float>::randn({3}, rng));
    json meta;
    meta["step"] = 7;
    meta["seed"] = 123;
    ckpt::save(ps, dir, meta);

    ParamStore<float> ps2;
    ps2.add("enc.w", Tensor<float>::zeros({4, 3}));
    ps2.add("enc.b", Tensor<float>::zeros({3}));
    json loaded = ckpt::load(ps2, dir);
    CHECK(loaded.at("step") == 7);
    CHECK(ps2.at("enc.w").data() == ps.at("enc.w").data());
    CHECK(ps2.at("enc.b").data() == ps.at("enc.b").data());

    SUBCASE("truncated blob") {
        fs::resize_file(fs::path(dir) / "weights.bin", 10);
        CHECK_THROWS_WITH_AS(ckpt::load(ps2, dir), doctest::Contains("truncated"),
                             std::runtime_error);
    }
    SUBCASE("missing tensor in manifest") {
        ParamStore<float> ps3;
        ps3.add("enc.w", Tensor<float>::zeros({4, 3}));
        ps3.add("enc.b", Tensor<float>::zeros({3}));
        ps3.add("extra", Tensor<float>::zeros({2}));
        CHECK_THROWS_WITH_AS(ckpt::load(ps3, dir), doctest::Contains("missing tensor"),
                             std::runtime_error);
    }
    SUBCASE("unknown tensor in manifest") {
        ParamStore<float> ps4;
        ps4.add("enc.w", Tensor<float>::zeros({4, 3}));
        CHECK_THROWS_WITH_AS(ckpt::load(ps4, dir), doctest::Contains("unknown"),
                             std::runtime_error);
    }
    fs::remove_all(dir);
}

TEST_CASE("adam cosine schedule decays to ~0") {
    Rng rng(11);
    ParamStore<double> ps;
    ps.add("w", D::randn({4}, rng));
    AdamOptimizer<double>::Config cfg;
    cfg.lr = 1e-2;
    cfg.total_steps = 100;
    AdamOptimizer<double> opt(ps, cfg);
    for (int i = 0; i < 100; ++i) {
        ps.zero_grad();
        auto loss = sum_all(square(ps.at("w")));
        loss.backward();
        opt.step();
    }
    CHECK(opt.current_lr() <= 1e-2 * 1e-2);  // cos anneal hits ~0 at the end
}
