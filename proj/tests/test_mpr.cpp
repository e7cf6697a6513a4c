#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mps/gradcheck.hpp"
#include "mps/mpr.hpp"
#include "mps/ops.hpp"
#include "mps/util.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace mps;

namespace {

Tensor rand_tensor(std::mt19937_64& rng, std::vector<int> shape, bool rg = false) {
    std::size_t n = 1;
    for (int e : shape) n *= static_cast<std::size_t>(e);
    std::vector<double> data(n);
    for (auto& v : data) v = 2.0 * uniform01(rng) - 1.0;
    return Tensor::from_data(std::move(shape), std::move(data), rg);
}

double phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
double gelu_ref(double x) { return x * phi(x); }

}  // namespace

TEST_CASE("aggregate: single row, constant rows, hand mean") {
    Tensor one = Tensor::from_data({1, 3}, {1, 2, 3});
    Tensor a = aggregate(one);
    for (int c = 0; c < 3; ++c) CHECK(a.data()[c] == one.data()[c]);

    Tensor same = Tensor::from_data({3, 2}, {4, -1, 4, -1, 4, -1});
    Tensor b = aggregate(same);
    CHECK(b.data()[0] == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(b.data()[1] == doctest::Approx(-1.0).epsilon(1e-15));

    Tensor basis = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor c = aggregate(basis);
    CHECK(c.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(c.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("all-zero heads map to the zero perspective set") {
    std::mt19937_64 rng(20);
    MprParams p = make_mpr(3, 4, 4, rng);
    for (auto& h : p.heads) {
        for (auto& v : h.w1.data()) v = 0.0;
        for (auto& v : h.w2.data()) v = 0.0;
    }
    Tensor e = rand_tensor(rng, {4});
    Tensor gm = mpr_forward(e, p);
    for (double v : gm.data()) CHECK(v == 0.0);
}

TEST_CASE("identity-weight head reduces to normalized gelu") {
    std::mt19937_64 rng(21);
    MprParams p = make_mpr(1, 3, 3, rng);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            p.heads[0].w1.at(r, c) = r == c ? 1.0 : 0.0;
            p.heads[0].w2.at(r, c) = r == c ? 1.0 : 0.0;
        }
    Tensor e = rand_tensor(rng, {3});
    Tensor gm = mpr_forward(e, p);
    double g[3], norm = 0.0;
    for (int c = 0; c < 3; ++c) {
        g[c] = gelu_ref(e.data()[c]);
        norm += g[c] * g[c];
    }
    norm = std::sqrt(norm);
    for (int c = 0; c < 3; ++c) CHECK(gm.at(0, c) == doctest::Approx(g[c] / (norm + p.eps)).epsilon(1e-12));
}

TEST_CASE("mpr_forward matches an unrolled scalar computation and stays unit-norm") {
    std::mt19937_64 rng(22);
    MprParams p = make_mpr(2, 2, 2, rng);
    for (auto& h : p.heads) {
        for (auto& v : h.b1.data()) v = 0.25 * gaussian(rng);
        for (auto& v : h.b2.data()) v = 0.25 * gaussian(rng);
    }
    Tensor e = rand_tensor(rng, {2});
    Tensor gm = mpr_forward(e, p);
    REQUIRE(gm.shape() == std::vector<int>{2, 2});
    for (int k = 0; k < 2; ++k) {
        const auto& h = p.heads[k];
        double hid[2], raw[2];
        for (int c = 0; c < 2; ++c)
            hid[c] = gelu_ref(e.data()[0] * h.w1.at(0, c) + e.data()[1] * h.w1.at(1, c) + h.b1.data()[c]);
        for (int c = 0; c < 2; ++c) raw[c] = hid[0] * h.w2.at(0, c) + hid[1] * h.w2.at(1, c) + h.b2.data()[c];
        double norm = std::sqrt(raw[0] * raw[0] + raw[1] * raw[1]);
        for (int c = 0; c < 2; ++c) CHECK(gm.at(k, c) == doctest::Approx(raw[c] / (norm + p.eps)).epsilon(1e-12));
        double out_norm = std::sqrt(gm.at(k, 0) * gm.at(k, 0) + gm.at(k, 1) * gm.at(k, 1));
        CHECK(out_norm <= 1.0);
        CHECK(out_norm >= 1.0 - 1e-6);
    }
}

TEST_CASE("heads do not interact") {
    std::mt19937_64 rng(23);
    MprParams p = make_mpr(3, 4, 4, rng);
    Tensor e = rand_tensor(rng, {4});
    Tensor base = mpr_forward(e, p);
    p.heads[1].w1.at(0, 0) += 0.37;
    p.heads[1].b2.data()[2] -= 0.11;
    Tensor bumped = mpr_forward(e, p);
    for (int k = 0; k < 3; ++k)
        for (int c = 0; c < 4; ++c) {
            if (k == 1) continue;
            CHECK(bumped.at(k, c) == base.at(k, c));
        }
    bool changed = false;
    for (int c = 0; c < 4; ++c) changed = changed || bumped.at(1, c) != base.at(1, c);
    CHECK(changed);
}

TEST_CASE("output depends on the perspective set only through its mean") {
    std::mt19937_64 rng(24);
    MprParams p = make_mpr(2, 3, 3, rng);
    Tensor a = Tensor::from_data({2, 3}, {1, 0, 2, 3, 2, 0});
    Tensor b = Tensor::from_data({2, 3}, {2, 1, 1, 2, 1, 1});  // same column means
    Tensor ga = mpr_forward(aggregate(a), p);
    Tensor gb = mpr_forward(aggregate(b), p);
    for (std::size_t i = 0; i < ga.numel(); ++i) CHECK(ga.data()[i] == gb.data()[i]);
}

TEST_CASE("aggregate + mpr_forward + dot readout passes finite differences") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(mix_seed(seed, 99));
        MprParams p = make_mpr(2, 3, 3, rng);
        Tensor gl = rand_tensor(rng, {3, 3}, true);
        Tensor probe = rand_tensor(rng, {2, 3});
        std::vector<Tensor> leaves = mpr_leaves(p);
        leaves.push_back(gl);
        auto rep = check_gradients([&] { return sum_all(mul(mpr_forward(aggregate(gl), p), probe)); }, leaves);
        REQUIRE(rep.ok);
        worst = std::max(worst, rep.max_rel_err);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("training-mode dropout is active and eval mode is deterministic") {
    std::mt19937_64 rng(25);
    MprParams p = make_mpr(1, 6, 32, rng, 1e-8, 0.5);
    Tensor e = rand_tensor(rng, {6});
    Tensor eval1 = mpr_forward(e, p);
    Tensor eval2 = mpr_forward(e, p);
    for (std::size_t i = 0; i < eval1.numel(); ++i) CHECK(eval1.data()[i] == eval2.data()[i]);
    std::mt19937_64 d1(7), d2(7), d3(8);
    Tensor t1 = mpr_forward_train(e, p, d1);
    Tensor t2 = mpr_forward_train(e, p, d2);
    Tensor t3 = mpr_forward_train(e, p, d3);
    bool same_seed_equal = true, diff_seed_equal = true;
    for (std::size_t i = 0; i < t1.numel(); ++i) {
        same_seed_equal = same_seed_equal && t1.data()[i] == t2.data()[i];
        diff_seed_equal = diff_seed_equal && t1.data()[i] == t3.data()[i];
    }
    CHECK(same_seed_equal);
    CHECK_FALSE(diff_seed_equal);
}
