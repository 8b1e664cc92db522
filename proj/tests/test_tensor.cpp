#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "blockdiff/tensor.hpp"
#include "helpers.hpp"

using namespace blockdiff;

TEST_CASE("tensor basics and invariants") {
    CHECK_THROWS(Tensor::from_data({2, 2}, {1.0f, 2.0f, 3.0f}));  // length mismatch
    CHECK_THROWS(Tensor::from_data({2}, {1.0f, INFINITY}));       // non-finite is an error state
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.numel() == 6);
    CHECK_THROWS(t.item());
}

TEST_CASE("matmul against hand values and identity") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor c = matmul(a, b);
    CHECK(c.data() == std::vector<float>{19, 22, 43, 50});

    // matmul(X, I) == X bit-exactly
    Rng rng(7);
    Tensor x = Tensor::randn({5, 5}, rng, 1.0f);
    std::vector<float> eye(25, 0.0f);
    for (int i = 0; i < 5; ++i) {
        eye[i * 5 + i] = 1.0f;
    }
    Tensor xi = matmul(x, Tensor::from_data({5, 5}, eye));
    CHECK(testutil::bits_equal(x.data(), xi.data()));

    CHECK_THROWS(matmul(a, Tensor::from_data({3, 1}, {1, 2, 3})));
}

TEST_CASE("backward on x*x and sum(matmul(x, I))") {
    Tensor x = Tensor::from_data({1}, {3.0f}, true);
    Tensor loss = mul(x, x);
    GradStore g = backward(loss);
    REQUIRE(g.find(x) != nullptr);
    CHECK((*g.find(x))[0] == doctest::Approx(6.0f));

    Tensor x2 = Tensor::from_data({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
    std::vector<float> eye(9, 0.0f);
    for (int i = 0; i < 3; ++i) {
        eye[i * 3 + i] = 1.0f;
    }
    Tensor loss2 = sum_all(matmul(x2, Tensor::from_data({3, 3}, eye)));
    GradStore g2 = backward(loss2);
    REQUIRE(g2.find(x2) != nullptr);
    for (float v : *g2.find(x2)) {
        CHECK(v == doctest::Approx(1.0f));
    }
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    Tensor y = mul(x, x);
    CHECK_THROWS(backward(y));  // non-scalar

    Tensor loss = sum_all(mul(x, x));
    backward(loss);
    CHECK_THROWS(backward(loss));  // second backward without re-forward
}

TEST_CASE("backward is deterministic") {
    Rng rng(11);
    Tensor x = Tensor::randn({4, 4}, rng, 1.0f, true);
    Tensor w = Tensor::randn({4, 4}, rng, 1.0f, true);
    auto run = [&]() {
        Tensor loss = sum_all(gelu(matmul(x, w)));
        return backward(loss);
    };
    GradStore a = run();
    GradStore b = run();
    CHECK(testutil::bits_equal(*a.find(x), *b.find(x)));
    CHECK(testutil::bits_equal(*a.find(w), *b.find(w)));
}

TEST_CASE("weighted_masked_ce: uniform, empty, hand-evaluated") {
    // uniform logits over V=4, one active position -> ln 4
    Tensor logits = Tensor::zeros({1, 4});
    Tensor loss = weighted_masked_ce(logits, {2}, {1.0f}, {1});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // empty active set -> exactly 0 with zero gradient
    Tensor logits2 = Tensor::from_data({2, 4}, std::vector<float>(8, 0.5f), true);
    Tensor z = weighted_masked_ce(logits2, {0, 0}, {1.0f, 1.0f}, {0, 0});
    CHECK(z.item() == 0.0f);
    GradStore g = backward(z);
    CHECK(g.find(logits2) == nullptr);

    // logit pair (2,0), target 0, weight 2: independent scalar recompute
    const double p0 = std::exp(2.0) / (std::exp(2.0) + 1.0);
    const double expected = 2.0 * -std::log(p0);
    Tensor logits3 = Tensor::from_data({1, 2}, {2.0f, 0.0f});
    Tensor l3 = weighted_masked_ce(logits3, {0}, {2.0f}, {1});
    CHECK(l3.item() == doctest::Approx(expected).epsilon(1e-6));
    CHECK(l3.item() == doctest::Approx(0.25385602).epsilon(1e-5));

    // inactive positions contribute zero value and gradient
    Tensor logits4 = Tensor::from_data({2, 2}, {2.0f, 0.0f, 9.0f, -9.0f}, true);
    Tensor l4 = weighted_masked_ce(logits4, {0, 0}, {2.0f, 5.0f}, {1, 0});
    CHECK(l4.item() == doctest::Approx(expected).epsilon(1e-6));
    GradStore g4 = backward(l4);
    const std::vector<float>& dl = *g4.find(logits4);
    CHECK(dl[2] == 0.0f);
    CHECK(dl[3] == 0.0f);

    CHECK_THROWS(weighted_masked_ce(logits3, {5}, {1.0f}, {1}));   // target out of vocab
    CHECK_THROWS(weighted_masked_ce(logits3, {0}, {-1.0f}, {1})); // negative weight
}

TEST_CASE("masked softmax: allowed rows sum to 1, disallowed exactly 0") {
    Rng rng(23);
    for (int trial = 0; trial < 120; ++trial) {
        const int q = 1 + rng.uniform_int(6);
        const int k = 1 + rng.uniform_int(8);
        AttnMask mask = AttnMask::falses(q, k);
        for (int i = 0; i < q; ++i) {
            mask.set(i, rng.uniform_int(k), true);  // guarantee one allowed key
            for (int j = 0; j < k; ++j) {
                if (rng.uniform() < 0.5) {
                    mask.set(i, j, true);
                }
            }
        }
        Tensor scores = Tensor::randn({q, k}, rng, 2.0f);
        Tensor p = masked_softmax(scores, mask);
        for (int i = 0; i < q; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < k; ++j) {
                const float v = p.data()[static_cast<size_t>(i) * k + j];
                if (mask.at(i, j)) {
                    row_sum += v;
                } else {
                    CHECK(v == 0.0f);
                }
            }
            CHECK(row_sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }

    AttnMask dead = AttnMask::falses(1, 2);
    CHECK_THROWS(masked_softmax(Tensor::zeros({1, 2}), dead));
}

TEST_CASE("grad_check: dyadic quadratic form is exact") {
    // dyadic values and eps keep every f32 evaluation exact, so the central
    // difference must match the analytic gradient to < 1e-6
    Tensor x = Tensor::from_data({4}, {0.5f, 1.0f, -0.75f, 0.25f}, true);
    auto f = [&]() { return sum_all(mul(x, x)); };
    GradCheckResult res = grad_check(f, {x}, 0.0009765625f /* 2^-10 */, 8);
    CHECK(res.coords_checked == 4);
    CHECK(res.max_rel_err < 1e-6f);
}

TEST_CASE("grad_check rejects bad eps") {
    Tensor x = Tensor::from_data({1}, {1.0f}, true);
    auto f = [&]() { return mul(x, x); };
    CHECK_THROWS(grad_check(f, {x}, 1e-5f, 1));
    CHECK_THROWS(grad_check(f, {x}, 0.5f, 1));
}

TEST_CASE("grad_check: 2-layer MLP with cross-entropy") {
    Rng rng(29);
    Tensor x = Tensor::randn({3, 8}, rng, 1.0f);
    Tensor w1 = Tensor::randn({8, 16}, rng, 0.35f, true);
    Tensor b1 = Tensor::randn({16}, rng, 0.1f, true);
    Tensor w2 = Tensor::randn({16, 8}, rng, 0.25f, true);
    auto f = [&]() {
        Tensor h = gelu(add(matmul(x, w1), b1));
        Tensor logits = matmul(h, w2);
        return weighted_masked_ce(logits, {1, 4, 7}, {1.0f, 0.5f, 2.0f}, {1, 1, 1});
    };
    GradCheckResult res = grad_check(f, {w1, b1, w2}, 1e-3f, 24);
    CHECK(res.coords_checked > 60);
    CHECK(res.max_rel_err < 1e-3f);
}

// every differentiable op, random shapes and seeds, against central differences
TEST_CASE("per-op backward matches finite differences over random shapes") {
    int checked_shapes = 0;
    for (uint64_t seed = 1; seed <= 15; ++seed) {
        Rng rng(seed);
        const int m = 2 + rng.uniform_int(4);
        const int k = 2 + rng.uniform_int(4);
        const int n = 2 + rng.uniform_int(4);

        auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> leaves) {
            GradCheckResult res = grad_check(f, leaves, 1e-3f, 6);
            CHECK(res.max_rel_err < 1e-3f);
            ++checked_shapes;
        };

        {
            Tensor a = Tensor::randn({m, k}, rng, 0.8f, true);
            Tensor b = Tensor::randn({k, n}, rng, 0.8f, true);
            check([&]() { return sum_all(gelu(matmul(a, b))); }, {a, b});
        }
        {
            Tensor a = Tensor::randn({m, n}, rng, 1.0f, true);
            Tensor b = Tensor::randn({m, n}, rng, 1.0f, true);
            check([&]() { return sum_all(mul(a, b)); }, {a, b});
        }
        {
            Tensor a = Tensor::randn({m, n}, rng, 1.0f, true);
            Tensor b = Tensor::randn({n}, rng, 1.0f, true);  // row broadcast
            check([&]() { return sum_all(gelu(add(a, b))); }, {a, b});
        }
        {
            Tensor a = Tensor::randn({m, n}, rng, 1.2f, true);
            Tensor g = Tensor::randn({n}, rng, 0.5f, true);
            check([&]() { return sum_all(rmsnorm(a, g)); }, {a, g});
        }
        {
            Tensor table = Tensor::randn({6, n}, rng, 1.0f, true);
            std::vector<int> ids = {0, 3, 5, 3};  // repeated id exercises scatter-add
            check([&]() { return sum_all(gelu(embedding(table, ids))); }, {table});
        }
        {
            Tensor a = Tensor::randn({m, n}, rng, 1.0f, true);
            check([&]() { return sum_all(scale(transpose(a), 1.7f)); }, {a});
        }
        {
            Tensor a = Tensor::randn({m + 2, n}, rng, 1.0f, true);
            check([&]() { return sum_all(mul(slice_rows(a, 1, m + 1), slice_rows(a, 0, m))); }, {a});
        }
        {
            Tensor a = Tensor::randn({m, n + 2}, rng, 1.0f, true);
            check([&]() { return sum_all(slice_cols(a, 1, n + 1)); }, {a});
        }
        {
            Tensor a = Tensor::randn({m, n}, rng, 1.0f, true);
            Tensor b = Tensor::randn({2, n}, rng, 1.0f, true);
            Tensor c = Tensor::randn({m, 3}, rng, 1.0f, true);
            check([&]() { return sum_all(concat_rows({a, b})); }, {a, b});
            check([&]() { return sum_all(gelu(concat_cols({a, c}))); }, {a, c});
        }
        {
            Tensor s = Tensor::randn({m, k}, rng, 1.5f, true);
            AttnMask mask = AttnMask::falses(m, k);
            for (int i = 0; i < m; ++i) {
                mask.set(i, rng.uniform_int(k), true);
                for (int j = 0; j < k; ++j) {
                    if (rng.uniform() < 0.6) {
                        mask.set(i, j, true);
                    }
                }
            }
            Tensor v = Tensor::randn({k, n}, rng, 1.0f, true);
            check([&]() { return sum_all(matmul(masked_softmax(s, mask), v)); }, {s, v});
        }
        {
            Tensor logits = Tensor::randn({m, 5}, rng, 1.5f, true);
            std::vector<int> targets(m);
            std::vector<float> weights(m);
            std::vector<uint8_t> active(m);
            for (int i = 0; i < m; ++i) {
                targets[i] = rng.uniform_int(5);
                weights[i] = 0.5f + static_cast<float>(rng.uniform());
                active[i] = rng.uniform() < 0.7 ? 1 : 0;
            }
            active[0] = 1;
            check([&]() { return weighted_masked_ce(logits, targets, weights, active); }, {logits});
        }
    }
    CHECK(checked_shapes >= 100);
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    NoGradGuard ng;
    Tensor y = sum_all(mul(x, x));
    CHECK_FALSE(y.requires_grad());
    GradStore g = backward(y);
    CHECK(g.find(x) == nullptr);
}

TEST_CASE("combine_scalars is invariant to input order") {
    Rng rng(41);
    std::vector<Tensor> xs;
    for (int i = 0; i < 9; ++i) {
        xs.push_back(Tensor::scalar(static_cast<float>(rng.normal() * 3.0)));
    }
    Tensor a = combine_scalars(xs, true);
    std::reverse(xs.begin(), xs.end());
    Tensor b = combine_scalars(xs, true);
    CHECK(a.item() == b.item());
}

TEST_CASE("ops reject non-finite results") {
    Tensor big = Tensor::full({2, 2}, 3e38f);
    CHECK_THROWS(mul(big, big));  // overflows to inf
}
