#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mde/errors.hpp"
#include "mde/losses.hpp"
#include "mde/model.hpp"
#include "oracles.hpp"

using namespace mde;

namespace {

std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (double& v : w) v = rng.uniform_range(0.0, 1.0);
    return w;
}

TripletBatch random_batch(std::size_t users, std::size_t items, std::size_t size,
                          Rng& rng) {
    TripletBatch b;
    for (std::size_t k = 0; k < size; ++k) {
        const auto u = static_cast<std::uint32_t>(rng.uniform_index(users));
        const auto i = static_cast<std::uint32_t>(rng.uniform_index(items));
        std::uint32_t j;
        do {
            j = static_cast<std::uint32_t>(rng.uniform_index(items));
        } while (j == i);
        b.triples.push_back({u, i, j});
    }
    return b;
}

ModelParams zero_params() {
    ModelParams p;
    p.num_users = 2;
    p.num_items = 2;
    p.embed_dim = 2;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        p.user_embed[m] = Matrix(2, 2, 0.0);
        p.proj_weight[m] = Matrix(3, 2, 0.0);
        p.proj_bias[m] = Matrix(1, 2, 0.0);
    }
    p.pref_user = Matrix(2, 2, 0.0);
    p.pref_item = Matrix(2, 2, 0.0);
    return p;
}

} // namespace

TEST_CASE("tradeoff weights follow the absolute preference gap") {
    Matrix p(3, 2);
    p(0, 0) = 0.5;
    p(0, 1) = 0.5;
    p(1, 0) = 1.0;
    p(1, 1) = 0.0;
    p(2, 0) = 0.8;
    p(2, 1) = 0.2;
    TradeoffWeights w = tradeoff_weights(p);
    CHECK(w.w_diff[0] == 0.0); // exact zero at equal preferences
    CHECK(w.w_cl[0] == 1.0);
    CHECK(w.w_diff[1] == 1.0);
    CHECK(w.w_cl[1] == 0.0);
    CHECK(w.w_diff[2] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(w.w_cl[2] == doctest::Approx(0.4).epsilon(1e-15));

    // complementarity holds for every softmax row
    Rng rng(4);
    Matrix logits(1000, 2);
    oracle::fill_random(logits, rng, -5.0, 5.0);
    TradeoffWeights tw = tradeoff_weights(softmax_rows2(logits));
    for (std::size_t i = 0; i < 1000; ++i) {
        CHECK(tw.w_diff[i] >= 0.0);
        CHECK(tw.w_diff[i] <= 1.0);
        CHECK(tw.w_cl[i] >= 0.0);
        CHECK(tw.w_cl[i] <= 1.0);
        CHECK(std::fabs(tw.w_diff[i] + tw.w_cl[i] - 1.0) < 1e-9);
    }

    Matrix bad(2, 3);
    CHECK_THROWS_AS(tradeoff_weights(bad), DataError);
}

TEST_CASE("mda loss against the scalar oracle") {
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.uniform_index(10);
        const std::size_t d = 1 + rng.uniform_index(8);
        Matrix hv(n, d), ht(n, d);
        oracle::fill_random(hv, rng);
        oracle::fill_random(ht, rng);
        std::vector<double> w = random_weights(n, rng);
        const double sigma = rng.uniform_range(0.0, 2.0);
        for (bool squared : {false, true}) {
            const double got = mda_loss(hv, ht, w, sigma, squared);
            const double want = oracle::mda(hv, ht, w, sigma, squared);
            CHECK(got == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("mda loss structure") {
    Rng rng(11);
    Matrix hv(4, 3), ht(4, 3);
    oracle::fill_random(hv, rng);
    std::vector<double> w = random_weights(4, rng);

    CHECK(mda_loss(hv, hv, w, 0.1) == 0.0); // identical modalities
    oracle::fill_random(ht, rng);
    CHECK(mda_loss(hv, ht, std::vector<double>(4, 0.0), 0.1) == 0.0); // zero weights

    // plain form is non-positive and scales linearly with the gap
    const double base = mda_loss(hv, ht, w, 0.5);
    CHECK(base <= 0.0);
    Matrix ht2 = ht;
    for (std::size_t i = 0; i < ht2.data.size(); ++i)
        ht2.data[i] = hv.data[i] + 3.0 * (ht.data[i] - hv.data[i]);
    CHECK(mda_loss(hv, ht2, w, 0.5) == doctest::Approx(3.0 * base).epsilon(1e-12));

    // squared form is non-negative
    CHECK(mda_loss(hv, ht, w, 0.5, true) >= 0.0);

    Matrix bad(3, 3);
    CHECK_THROWS_AS(mda_loss(hv, bad, w, 0.1), DataError);
    CHECK_THROWS_AS(mda_loss(hv, ht, std::vector<double>(3, 1.0), 0.1), DataError);
}

TEST_CASE("msa loss against the scalar oracle") {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(8);
        const std::size_t d = 1 + rng.uniform_index(8);
        Matrix hv(n, d), ht(n, d);
        oracle::fill_random(hv, rng);
        oracle::fill_random(ht, rng);
        std::vector<double> w = random_weights(n, rng);
        const double sigma = rng.uniform_range(0.0, 1.0);
        const double tau = rng.uniform_range(0.1, 1.0);

        std::vector<std::uint32_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
        const double got_full = msa_loss(hv, ht, w, sigma, tau, ClScope::full, {});
        CHECK(got_full == doctest::Approx(oracle::msa(hv, ht, w, sigma, tau, all))
                              .epsilon(1e-10));

        // in-batch scope restricts anchors and candidates to the batch items
        std::vector<std::uint32_t> batch;
        for (std::size_t i = 0; i < n; i += 2) batch.push_back(static_cast<std::uint32_t>(i));
        const double got_batch = msa_loss(hv, ht, w, sigma, tau, ClScope::in_batch, batch);
        CHECK(got_batch == doctest::Approx(oracle::msa(hv, ht, w, sigma, tau, batch))
                               .epsilon(1e-10));
    }
}

TEST_CASE("msa loss structure") {
    Rng rng(13);
    Matrix hv(1, 4), ht(1, 4);
    oracle::fill_random(hv, rng);
    oracle::fill_random(ht, rng);
    // single item: the denominator only contains the numerator
    CHECK(msa_loss(hv, ht, {1.0}, 0.5, 0.2, ClScope::full, {}) == 0.0);

    Matrix hv5(5, 4), ht5(5, 4);
    oracle::fill_random(hv5, rng);
    oracle::fill_random(ht5, rng);
    CHECK(msa_loss(hv5, ht5, std::vector<double>(5, 0.0), 0.5, 0.2, ClScope::full, {}) ==
          0.0);

    // unit weights keep every -log term non-negative
    CHECK(msa_loss(hv5, ht5, std::vector<double>(5, 1.0), 1.0, 0.2, ClScope::full, {}) >=
          0.0);

    // zero-norm rows ride on the epsilon guard: all dots are 0, so each anchor
    // contributes exactly log(n)
    Matrix zv(3, 4, 0.0), zt(3, 4, 0.0);
    const double got = msa_loss(zv, zt, std::vector<double>(3, 1.0), 1.0, 0.2,
                                ClScope::full, {});
    CHECK(got == doctest::Approx(2.0 * std::log(3.0)).epsilon(1e-12));

    CHECK(msa_loss_over(hv5, ht5, std::vector<double>(5, 1.0), 1.0, 0.2, {}) == 0.0);
    CHECK_THROWS_AS(
        msa_loss(hv5, ht5, std::vector<double>(5, 1.0), 1.0, 0.2, ClScope::in_batch, {}),
        DataError);
    CHECK_THROWS_AS(msa_loss(hv5, ht5, std::vector<double>(5, 1.0), 1.0, 0.0,
                             ClScope::full, {}),
                    UsageError);
    std::vector<std::uint32_t> oob = {7};
    CHECK_THROWS_AS(msa_loss_over(hv5, ht5, std::vector<double>(5, 1.0), 1.0, 0.2, oob),
                    DataError);
}

TEST_CASE("bpr loss against the scalar oracle") {
    Rng rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t users = 2 + rng.uniform_index(6);
        const std::size_t items = 2 + rng.uniform_index(9);
        const std::size_t d = 1 + rng.uniform_index(8);
        Matrix hu(users, d), hi(items, d);
        oracle::fill_random(hu, rng);
        oracle::fill_random(hi, rng);
        TripletBatch b = random_batch(users, items, 1 + rng.uniform_index(12), rng);
        CHECK(bpr_loss(hu, hi, b) == doctest::Approx(oracle::bpr(hu, hi, b)).epsilon(1e-12));
        CHECK(modality_bpr_loss(hu, hi, b) == bpr_loss(hu, hi, b));
    }
}

TEST_CASE("bpr loss structure") {
    // zero embeddings: every score difference is 0, loss is ln 2 per triple
    Matrix hu(2, 3, 0.0), hi(3, 3, 0.0);
    TripletBatch b;
    b.triples = {{0, 0, 1}, {1, 2, 0}};
    CHECK(bpr_loss(hu, hi, b) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    // identical positive and negative rows: ln 2 regardless of user
    Rng rng(15);
    Matrix hu2(2, 3), hi2(3, 3);
    oracle::fill_random(hu2, rng);
    oracle::fill_random(hi2, rng);
    for (std::size_t c = 0; c < 3; ++c) hi2(1, c) = hi2(0, c);
    TripletBatch same;
    same.triples = {{0, 0, 1}};
    CHECK(bpr_loss(hu2, hi2, same) == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    // a large positive margin drives the loss to zero
    Matrix hiw = hi2;
    for (std::size_t c = 0; c < 3; ++c) hiw(0, c) = 100.0 * hu2(0, c);
    for (std::size_t c = 0; c < 3; ++c) hiw(1, c) = -100.0 * hu2(0, c);
    CHECK(bpr_loss(hu2, hiw, same) < 1e-8);

    // per-triple shift invariance: adding a vector orthogonal to nothing but
    // shared by pos and neg leaves the difference unchanged
    Matrix shifted = hi2;
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) shifted(r, c) += 0.77 * hu2(0, c) / 3.0;
    TripletBatch b2;
    b2.triples = {{0, 0, 2}};
    const double a1 = bpr_loss(hu2, hi2, b2);
    // shifting both items by the same row changes both scores equally
    Matrix pair_shift = hi2;
    for (std::size_t c = 0; c < 3; ++c) {
        pair_shift(0, c) += 0.5;
        pair_shift(2, c) += 0.5;
    }
    CHECK(bpr_loss(hu2, pair_shift, b2) == doctest::Approx(a1).epsilon(1e-12));

    TripletBatch empty;
    CHECK_THROWS_AS(bpr_loss(hu2, hi2, empty), DataError);
    Matrix narrow(3, 2);
    CHECK_THROWS_AS(bpr_loss(hu2, narrow, same), DataError);
}

TEST_CASE("unique_batch_items deduplicates and sorts") {
    TripletBatch b;
    b.triples = {{0, 5, 1}, {1, 2, 0}, {2, 5, 3}, {0, 2, 4}};
    CHECK(unique_batch_items(b) == std::vector<std::uint32_t>{2, 5});
    TripletBatch e;
    CHECK(unique_batch_items(e).empty());
}

TEST_CASE("total loss assembles components and the regularizer") {
    // all sigmas zero, zero parameters: total is the three ranking terms
    LossConfig cfg;
    cfg.sigma_diff = 0.0;
    cfg.sigma_cl = 0.0;
    cfg.sigma_reg = 0.0;
    ModelParams p = zero_params();
    const double ln2 = std::log(2.0);
    LossBreakdown lb = total_loss(ln2, ln2, ln2, 0.0, 0.0, p, cfg);
    CHECK(lb.total == doctest::Approx(3.0 * ln2).epsilon(1e-15));
    CHECK(lb.reg == 0.0);

    // sigma_reg 1 with parameter entries {3,4}: squared norm contributes 25
    LossConfig reg_cfg;
    reg_cfg.sigma_reg = 1.0;
    ModelParams q = zero_params();
    q.user_embed[kVisual](0, 0) = 3.0;
    q.user_embed[kVisual](1, 1) = 4.0;
    LossBreakdown lb2 = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, q, reg_cfg);
    CHECK(lb2.reg == doctest::Approx(25.0).epsilon(1e-15));
    CHECK(lb2.total == doctest::Approx(25.0).epsilon(1e-15));

    // random components recompose exactly
    Rng rng(16);
    for (int t = 0; t < 20; ++t) {
        const double a = rng.uniform_range(0.0, 2.0), b = rng.uniform_range(0.0, 2.0),
                     c = rng.uniform_range(0.0, 2.0), d = rng.uniform_range(-1.0, 0.0),
                     e = rng.uniform_range(0.0, 1.0);
        LossConfig rc;
        rc.sigma_reg = rng.uniform_range(0.0, 1.0);
        LossBreakdown out = total_loss(a, b, c, d, e, q, rc);
        CHECK(out.total ==
              doctest::Approx(a + b + c + d + e + rc.sigma_reg * 25.0).epsilon(1e-12));
        CHECK(out.bpr == a);
        CHECK(out.mda == d);
        CHECK(out.msa == e);
    }

    // non-finite terms are named
    try {
        total_loss(ln2, ln2, ln2, std::nan(""), 0.0, p, cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& err) {
        CHECK(std::string(err.what()).find("L_diff") != std::string::npos);
    }
}

TEST_CASE("loss config validation and scope names") {
    CHECK(cl_scope_from_string("full") == ClScope::full);
    CHECK(cl_scope_from_string("in_batch") == ClScope::in_batch);
    CHECK(std::string(cl_scope_to_string(ClScope::in_batch)) == "in_batch");
    CHECK_THROWS_AS(cl_scope_from_string("sometimes"), UsageError);

    LossConfig bad;
    bad.tau = 0.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
    LossConfig neg;
    neg.sigma_diff = -0.1;
    CHECK_THROWS_AS(neg.validate(), UsageError);
    LossConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("softplus and sigmoid helpers are stable") {
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(softplus(800.0) == doctest::Approx(800.0).epsilon(1e-12));
    CHECK(softplus(-800.0) == 0.0);
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(800.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(std::isfinite(softplus(-1e308)));
}
