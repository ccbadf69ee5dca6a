#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"
#include "mde/rng.hpp"

using namespace mde;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -2.0,
                               double hi = 2.0) {
    std::vector<double> v(n);
    for (double& x : v)
        x = rng.uniform_range(lo, hi);
    return v;
}

// Sizes chosen to cover the empty case, sub-vector-width tails, exact vector
// multiples, and a large buffer.
const std::size_t kSizes[] = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 64, 1000};

} // namespace

TEST_CASE("scalar kernels match naive loops exactly") {
    Rng rng(42);
    for (std::size_t n : kSizes) {
        auto x = random_vec(rng, n);
        auto y = random_vec(rng, n);

        double dot = 0.0, ss = 0.0, ad = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dot += x[i] * y[i];
            ss += x[i] * x[i];
            ad += std::fabs(x[i] - y[i]);
        }
        CHECK(kernels::scalar_impl::dot(x.data(), y.data(), n) == doctest::Approx(dot).epsilon(1e-14));
        CHECK(kernels::scalar_impl::sumsq(x.data(), n) == doctest::Approx(ss).epsilon(1e-14));
        CHECK(kernels::scalar_impl::abs_diff_sum(x.data(), y.data(), n) ==
              doctest::Approx(ad).epsilon(1e-14));

        auto y2 = y;
        kernels::scalar_impl::axpy(0.37, x.data(), y2.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(y2[i] == doctest::Approx(y[i] + 0.37 * x[i]).epsilon(1e-15));

        auto x2 = x;
        kernels::scalar_impl::scale(-1.25, x2.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(x2[i] == -1.25 * x[i]);
    }
}

#if defined(MDE_HAVE_AVX2)
TEST_CASE("avx2 kernels agree with scalar kernels across tail sizes") {
    if (!kernels::backend_supported(kernels::Backend::avx2)) {
        MESSAGE("avx2 not available on this cpu, skipping");
        return;
    }
    Rng rng(7);
    for (std::size_t n : kSizes) {
        auto x = random_vec(rng, n);
        auto y = random_vec(rng, n);

        CHECK(kernels::avx2_impl::dot(x.data(), y.data(), n) ==
              doctest::Approx(kernels::scalar_impl::dot(x.data(), y.data(), n))
                  .epsilon(1e-12));
        CHECK(kernels::avx2_impl::sumsq(x.data(), n) ==
              doctest::Approx(kernels::scalar_impl::sumsq(x.data(), n)).epsilon(1e-12));
        CHECK(kernels::avx2_impl::abs_diff_sum(x.data(), y.data(), n) ==
              doctest::Approx(kernels::scalar_impl::abs_diff_sum(x.data(), y.data(), n))
                  .epsilon(1e-12));

        auto ys = y, yv = y;
        kernels::scalar_impl::axpy(0.7, x.data(), ys.data(), n);
        kernels::avx2_impl::axpy(0.7, x.data(), yv.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(yv[i] == doctest::Approx(ys[i]).epsilon(1e-13));

        auto xs = x, xv = x;
        kernels::scalar_impl::scale(3.5, xs.data(), n);
        kernels::avx2_impl::scale(3.5, xv.data(), n);
        for (std::size_t i = 0; i < n; ++i)
            CHECK(xv[i] == xs[i]);
    }
}

TEST_CASE("avx2 adam update agrees with scalar adam update") {
    if (!kernels::backend_supported(kernels::Backend::avx2)) {
        MESSAGE("avx2 not available on this cpu, skipping");
        return;
    }
    Rng rng(11);
    for (std::size_t n : kSizes) {
        auto p = random_vec(rng, n);
        auto g = random_vec(rng, n);
        auto m = random_vec(rng, n, 0.0, 0.5);
        auto v = random_vec(rng, n, 0.0, 0.5);
        auto ps = p, pv = p, ms = m, mv = m, vs = v, vv = v;
        const double c1 = 1.0 / (1.0 - std::pow(0.9, 3));
        const double c2 = 1.0 / (1.0 - std::pow(0.999, 3));
        kernels::scalar_impl::adam_update(ps.data(), g.data(), ms.data(), vs.data(),
                                          0.9, 0.999, 1e-8, 1e-3, c1, c2, n);
        kernels::avx2_impl::adam_update(pv.data(), g.data(), mv.data(), vv.data(),
                                        0.9, 0.999, 1e-8, 1e-3, c1, c2, n);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(pv[i] == doctest::Approx(ps[i]).epsilon(1e-13));
            CHECK(mv[i] == doctest::Approx(ms[i]).epsilon(1e-13));
            CHECK(vv[i] == doctest::Approx(vs[i]).epsilon(1e-13));
        }
    }
}
#endif

TEST_CASE("adam kernel matches a hand-stepped reference") {
    // one coordinate stepped 5 times, reference arithmetic written out long-hand
    double p = 0.5, m = 0.0, v = 0.0;
    double rp = 0.5, rm = 0.0, rv = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
    const double grads[5] = {0.3, -0.2, 0.15, 0.5, -0.05};
    for (int t = 1; t <= 5; ++t) {
        const double g = grads[t - 1];
        rm = b1 * rm + (1 - b1) * g;
        rv = b2 * rv + (1 - b2) * g * g;
        const double mhat = rm / (1 - std::pow(b1, t));
        const double vhat = rv / (1 - std::pow(b2, t));
        rp -= lr * mhat / (std::sqrt(vhat) + eps);

        const double c1 = 1.0 / (1 - std::pow(b1, t));
        const double c2 = 1.0 / (1 - std::pow(b2, t));
        kernels::adam_update(&p, &g, &m, &v, b1, b2, eps, lr, c1, c2, 1);
        CHECK(p == doctest::Approx(rp).epsilon(1e-12));
    }
}

TEST_CASE("backend switching changes the active backend and keeps results consistent") {
    const kernels::Backend original = kernels::active_backend();
    Rng rng(3);
    auto x = random_vec(rng, 133);
    auto y = random_vec(rng, 133);

    kernels::set_backend(kernels::Backend::scalar);
    CHECK(kernels::active_backend() == kernels::Backend::scalar);
    const double d_scalar = kernels::dot(x.data(), y.data(), x.size());

    if (kernels::backend_supported(kernels::Backend::avx2)) {
        kernels::set_backend(kernels::Backend::avx2);
        CHECK(kernels::active_backend() == kernels::Backend::avx2);
        const double d_avx = kernels::dot(x.data(), y.data(), x.size());
        CHECK(d_avx == doctest::Approx(d_scalar).epsilon(1e-12));
    } else {
        CHECK_THROWS_AS(kernels::set_backend(kernels::Backend::avx2), UsageError);
    }
    kernels::set_backend(original);
}

TEST_CASE("backend names are stable") {
    CHECK(kernels::backend_name(kernels::Backend::scalar) == "scalar");
    CHECK(kernels::backend_name(kernels::Backend::avx2) == "avx2");
}
