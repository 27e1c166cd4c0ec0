// Copyright (C) 2026 sdg authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <optional>

#include "sdg/transformer.hpp"

using namespace sdg;

namespace {

BlockWeights random_block(std::size_t h, Rng& rng, double stddev = 0.2) {
    BlockWeights w;
    auto mat = [&](std::size_t r, std::size_t c) {
        return Tensor::randn({r, c}, rng, stddev, /*requires_grad=*/true);
    };
    w.self_attn = {mat(h, h), mat(h, h), mat(h, h), mat(h, h)};
    w.cross_attn = {mat(h, h), mat(h, h), mat(h, h), mat(h, h)};
    w.ff_w1 = mat(h, 4 * h);
    w.ff_b1 = mat(1, 4 * h);
    w.ff_w2 = mat(4 * h, h);
    w.ff_b2 = mat(1, h);
    w.ln1_gain = Tensor::ones({h}, true);
    w.ln1_bias = Tensor::zeros({h}, true);
    w.ln2_gain = Tensor::ones({h}, true);
    w.ln2_bias = Tensor::zeros({h}, true);
    return w;
}

AttentionWeights identity_attention(std::size_t h) {
    std::vector<double> eye(h * h, 0.0);
    for (std::size_t i = 0; i < h; ++i) eye[i * h + i] = 1.0;
    return {Tensor({h, h}, eye), Tensor({h, h}, eye), Tensor({h, h}, eye), Tensor({h, h}, eye)};
}

// Independent per-head reference: plain loops, no shared code with the
// library's attention beyond the weight layout.
std::vector<double> naive_attention(const std::vector<double>& query, std::size_t lq,
                                    const std::vector<double>& key, std::size_t lk,
                                    const std::vector<double>& value,
                                    const AttnMask* mask, const AttentionWeights& w,
                                    std::size_t h, std::size_t n_heads) {
    auto project = [&](const std::vector<double>& x, std::size_t rows, const Tensor& m) {
        std::vector<double> out(rows * h, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < h; ++j)
                for (std::size_t k = 0; k < h; ++k)
                    out[i * h + j] += x[i * h + k] * m.values()[k * h + j];
        return out;
    };
    std::vector<double> q = project(query, lq, w.wq);
    std::vector<double> k = project(key, lk, w.wk);
    std::vector<double> v = project(value, lk, w.wv);
    std::size_t dh = h / n_heads;
    std::vector<double> concat(lq * h, 0.0);
    for (std::size_t head = 0; head < n_heads; ++head) {
        std::size_t off = head * dh;
        for (std::size_t i = 0; i < lq; ++i) {
            std::vector<double> scores(lk);
            double mx = -1e300;
            for (std::size_t j = 0; j < lk; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d)
                    s += q[i * h + off + d] * k[j * h + off + d];
                s /= std::sqrt(double(dh));
                if (mask && !mask->allow[i * lk + j]) s = -1e300;
                scores[j] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (std::size_t j = 0; j < lk; ++j)
                for (std::size_t d = 0; d < dh; ++d)
                    concat[i * h + off + d] += scores[j] / z * v[j * h + off + d];
        }
    }
    return project(concat, lq, w.wo);
}

}  // namespace

TEST_CASE("single-key attention returns the value row") {
    std::size_t h = 4;
    AttentionWeights w = identity_attention(h);
    Rng rng(1);
    Tensor q = Tensor::randn({3, h}, rng);
    Tensor kv = Tensor::randn({1, h}, rng);
    Tensor out = multi_head_attention(q, kv, kv, nullptr, w, 1);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < h; ++j)
            CHECK(out(i, j) == Catch::Approx(kv(0, j)).epsilon(1e-12));
}

TEST_CASE("causal mask isolates position zero") {
    std::size_t h = 4;
    Rng rng(2);
    AttentionWeights w = {Tensor::randn({h, h}, rng), Tensor::randn({h, h}, rng),
                          Tensor::randn({h, h}, rng), Tensor::randn({h, h}, rng)};
    Tensor x = Tensor::randn({3, h}, rng);
    AttnMask mask = AttnMask::causal(3);
    Tensor full = multi_head_attention(x, x, x, &mask, w, 2);

    // Same first row, later rows replaced: position 0 must not notice.
    std::vector<double> first_only(x.values().begin(), x.values().begin() + h);
    Tensor x0({1, h}, first_only);
    AttnMask mask1 = AttnMask::causal(1);
    Tensor head = multi_head_attention(x0, x0, x0, &mask1, w, 2);
    for (std::size_t j = 0; j < h; ++j) CHECK(full(0, j) == head(0, j));
}

TEST_CASE("multi-head attention matches the naive per-head reference") {
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
        Rng rng(seed);
        std::size_t h = 8, heads = 2;
        std::size_t lq = 1 + rand_index(rng, 6), lk = 1 + rand_index(rng, 6);
        AttentionWeights w = {Tensor::randn({h, h}, rng), Tensor::randn({h, h}, rng),
                              Tensor::randn({h, h}, rng), Tensor::randn({h, h}, rng)};
        Tensor q = Tensor::randn({lq, h}, rng);
        Tensor k = Tensor::randn({lk, h}, rng);
        bool self_case = (seed % 2 == 0) && lq == lk;
        AttnMask mask;
        const AttnMask* mask_ptr = nullptr;
        if (self_case) {
            mask = AttnMask::causal(lq);
            mask_ptr = &mask;
        }
        Tensor got = multi_head_attention(q, self_case ? q : k, self_case ? q : k, mask_ptr, w,
                                          heads);
        std::vector<double> want = naive_attention(
            q.values(), lq, self_case ? q.values() : k.values(), self_case ? lq : lk,
            self_case ? q.values() : k.values(), mask_ptr, w, h, heads);
        for (std::size_t i = 0; i < got.size(); ++i)
            CHECK(got.values()[i] == Catch::Approx(want[i]).margin(1e-12));
    }
}

TEST_CASE("attention mask shape mismatch raises") {
    std::size_t h = 4;
    AttentionWeights w = identity_attention(h);
    Tensor q = Tensor::zeros({3, h});
    AttnMask mask = AttnMask::causal(2);
    CHECK_THROWS_AS(multi_head_attention(q, q, q, &mask, w, 1), ShapeError);
}

TEST_CASE("routing average") {
    SECTION("equal halves collapse") {
        Tensor r({1, 2}, {1.0, 2.0});
        Tensor avg = routing_average(r, r);
        CHECK(avg(0, 0) == 1.0);
        CHECK(avg(0, 1) == 2.0);
    }
    SECTION("direct evaluation") {
        Tensor a({1, 2}, {1.0, 2.0});
        Tensor b({1, 2}, {3.0, 4.0});
        Tensor avg = routing_average(a, b);
        CHECK(avg(0, 0) == 2.0);
        CHECK(avg(0, 1) == 3.0);
    }
    SECTION("gradient splits evenly into both branches") {
        Tensor a = Tensor::ones({2, 2}, true);
        Tensor b = Tensor::ones({2, 2}, true);
        backward(sum(routing_average(a, b)));
        for (double g : a.grad()) CHECK(g == 0.5);
        for (double g : b.grad()) CHECK(g == 0.5);
    }
}

TEST_CASE("attention_routing produces consistent state") {
    Rng rng(5);
    std::size_t h = 8;
    BlockWeights w = random_block(h, rng);
    Tensor prefix = Tensor::randn({3, h}, rng);
    Tensor enc = Tensor::randn({4, h}, rng);
    RoutingState state = attention_routing(prefix, enc, w.self_attn, w.cross_attn, 2);
    REQUIRE(state.r_avg.shape() == Shape{3, h});
    for (std::size_t i = 0; i < state.r_avg.size(); ++i)
        CHECK(state.r_avg.values()[i] ==
              Catch::Approx((state.r_prev.values()[i] + state.r_post.values()[i]) / 2.0));

    Tensor empty = Tensor::zeros({0, h});
    CHECK_THROWS_AS(attention_routing(empty, enc, w.self_attn, w.cross_attn, 2), ContractError);
}

TEST_CASE("style_routing") {
    SECTION("zero style embedding is the identity") {
        Tensor r({2, 2}, {1.0, 2.0, 3.0, 4.0});
        Tensor zero = Tensor::zeros({1, 2});
        Tensor merged = style_routing(r, zero);
        for (std::size_t i = 0; i < r.size(); ++i)
            CHECK(merged.values()[i] == r.values()[i]);
    }
    SECTION("direct evaluation") {
        Tensor r({1, 2}, {2.0, 3.0});
        Tensor s({1, 2}, {1.0, 1.0});
        Tensor merged = style_routing(r, s);
        CHECK(merged(0, 0) == 3.0);
        CHECK(merged(0, 1) == 4.0);
    }
    SECTION("two styles differ by exactly the embedding difference") {
        Rng rng(6);
        Tensor r = Tensor::randn({3, 4}, rng);
        Tensor s0 = Tensor::randn({1, 4}, rng);
        Tensor s1 = Tensor::randn({1, 4}, rng);
        Tensor m0 = style_routing(r, s0);
        Tensor m1 = style_routing(r, s1);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                CHECK(m1(i, j) - m0(i, j) == Catch::Approx(s1(0, j) - s0(0, j)));
    }
    SECTION("applications are counted") {
        instrumentation().reset();
        Tensor r = Tensor::zeros({2, 2});
        Tensor s = Tensor::zeros({1, 2});
        style_routing(r, s);
        style_routing(r, s);
        CHECK(instrumentation().style_routing_applications.load() == 2);
    }
}

TEST_CASE("decoder_block") {
    Rng rng(7);
    std::size_t h = 8;
    BlockWeights w = random_block(h, rng);
    Tensor prefix = Tensor::randn({4, h}, rng);
    Tensor enc = Tensor::randn({3, h}, rng);

    SECTION("absent style equals zero style embedding") {
        Tensor zero_style = Tensor::zeros({1, h});
        Tensor without = decoder_block(prefix, enc, std::nullopt, w, 2);
        Tensor with_zero = decoder_block(prefix, enc, zero_style, w, 2);
        for (std::size_t i = 0; i < without.size(); ++i)
            CHECK(without.values()[i] == with_zero.values()[i]);
    }

    SECTION("perturbing position j leaves earlier outputs unchanged") {
        Tensor base = decoder_block(prefix, enc, std::nullopt, w, 2);
        for (std::size_t j = 1; j < 4; ++j) {
            std::vector<double> vals = prefix.values();
            for (std::size_t d = 0; d < h; ++d) vals[j * h + d] += 0.37 * double(d + 1);
            Tensor perturbed = decoder_block(Tensor({4, h}, vals), enc, std::nullopt, w, 2);
            for (std::size_t i = 0; i < j; ++i)
                for (std::size_t d = 0; d < h; ++d)
                    CHECK(perturbed(i, d) == base(i, d));
        }
    }

    SECTION("stacked two-block gradient check") {
        Rng rng2(8);
        BlockWeights w2 = random_block(h, rng2);
        Tensor style = Tensor::randn({1, h}, rng2, 0.2);
        auto f = [&](const Tensor& x) {
            Tensor y = decoder_block(x, enc, style, w, 2);
            y = decoder_block(y, enc, style, w2, 2);
            // Weighted sum so the check sees distinct output directions.
            std::vector<double> wv(y.size());
            for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = std::sin(double(i) + 1.0);
            return sum(mul(y, Tensor(y.shape(), wv)));
        };
        CHECK(grad_check(f, prefix, 1e-5) < 1e-4);
        CHECK(grad_check(f, style, 1e-5) < 1e-4);
        // Keep the probe loss small: central differences on a large loss
        // drown tiny gradient entries in float cancellation noise.
        CHECK(grad_check([&](const Tensor& t) {
                  BlockWeights wt = w;
                  wt.self_attn.wq = t;
                  Tensor y = decoder_block(prefix, enc, style, wt, 2);
                  return scale(mean(mul(y, y)), 0.02);
              }, w.self_attn.wq, 1e-5) < 1e-4);
    }
}

TEST_CASE("encoder_block") {
    Rng rng(9);
    std::size_t h = 8;
    BlockWeights w = random_block(h, rng);

    SECTION("single token attends only to itself") {
        Tensor x = Tensor::randn({1, h}, rng);
        // With one key the softmax weight is exactly 1, so the attention
        // output equals the value projection passed through the out proj.
        Tensor attn = multi_head_attention(x, x, x, nullptr, w.self_attn, 2);
        Tensor direct = matmul(matmul(x, w.self_attn.wv), w.self_attn.wo);
        for (std::size_t i = 0; i < attn.size(); ++i)
            CHECK(attn.values()[i] == Catch::Approx(direct.values()[i]).margin(1e-12));
    }

    SECTION("permutation equivariance without position information") {
        Tensor x = Tensor::randn({4, h}, rng);
        Tensor out = encoder_block(x, w, 2);
        std::vector<std::size_t> perm = {2, 0, 3, 1};
        std::vector<double> pv(x.size());
        for (std::size_t i = 0; i < 4; ++i)
            std::copy_n(x.values().data() + perm[i] * h, h, pv.data() + i * h);
        Tensor pout = encoder_block(Tensor({4, h}, pv), w, 2);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t d = 0; d < h; ++d)
                CHECK(pout(i, d) == Catch::Approx(out(perm[i], d)).margin(1e-12));
    }

    SECTION("gradient check") {
        Tensor x = Tensor::randn({3, h}, rng);
        auto f = [&](const Tensor& t) {
            Tensor y = encoder_block(t, w, 2);
            std::vector<double> wv(y.size());
            for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = std::cos(double(i));
            return sum(mul(y, Tensor(y.shape(), wv)));
        };
        CHECK(grad_check(f, x, 1e-5) < 1e-4);
    }
}

TEST_CASE("causality holds for random decoder stacks") {
    for (std::uint64_t seed = 21; seed <= 24; ++seed) {
        Rng rng(seed);
        std::size_t h = 8, l = 2 + rand_index(rng, 7);  // up to 8
        BlockWeights w1 = random_block(h, rng);
        BlockWeights w2 = random_block(h, rng);
        Tensor enc = Tensor::randn({3, h}, rng);
        Tensor x = Tensor::randn({l, h}, rng);
        auto run = [&](const Tensor& in) {
            Tensor y = decoder_block(in, enc, std::nullopt, w1, 2);
            return decoder_block(y, enc, std::nullopt, w2, 2);
        };
        Tensor base = run(x);
        std::size_t j = 1 + rand_index(rng, l - 1);
        std::vector<double> vals = x.values();
        for (std::size_t d = 0; d < h; ++d) vals[j * h + d] = -vals[j * h + d] + 1.25;
        Tensor changed = run(Tensor({l, h}, vals));
        for (std::size_t i = 0; i < j; ++i)
            for (std::size_t d = 0; d < h; ++d) CHECK(changed(i, d) == base(i, d));
    }
}
