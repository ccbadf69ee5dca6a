#include "mde/kernels.hpp"

#include <cstdlib>
#include <string>

#include "mde/errors.hpp"

namespace mde::kernels {

namespace {

struct Vtable {
    double (*dot)(const double*, const double*, std::size_t);
    void (*axpy)(double, const double*, double*, std::size_t);
    void (*scale)(double, double*, std::size_t);
    double (*sumsq)(const double*, std::size_t);
    double (*abs_diff_sum)(const double*, const double*, std::size_t);
    void (*adam_update)(double*, const double*, double*, double*,
                        double, double, double, double, double, double, std::size_t);
};

constexpr Vtable kScalar = {
    scalar_impl::dot,    scalar_impl::axpy,         scalar_impl::scale,
    scalar_impl::sumsq,  scalar_impl::abs_diff_sum, scalar_impl::adam_update,
};

#if defined(MDE_HAVE_AVX2)
constexpr Vtable kAvx2 = {
    avx2_impl::dot,    avx2_impl::axpy,         avx2_impl::scale,
    avx2_impl::sumsq,  avx2_impl::abs_diff_sum, avx2_impl::adam_update,
};
#endif

bool cpu_has_avx2() {
#if defined(MDE_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

struct State {
    Backend backend;
    const Vtable* vt;

    State() {
        backend = cpu_has_avx2() ? Backend::avx2 : Backend::scalar;
        if (const char* env = std::getenv("MDE_KERNELS")) {
            const std::string s(env);
            if (s == "scalar") backend = Backend::scalar;
            else if (s == "avx2" && cpu_has_avx2()) backend = Backend::avx2;
        }
        vt = table_for(backend);
    }

    static const Vtable* table_for(Backend b) {
#if defined(MDE_HAVE_AVX2)
        if (b == Backend::avx2) return &kAvx2;
#endif
        (void)b;
        return &kScalar;
    }
};

State& state() {
    static State s;
    return s;
}

} // namespace

Backend active_backend() { return state().backend; }

bool backend_supported(Backend b) {
    return b == Backend::scalar || (b == Backend::avx2 && cpu_has_avx2());
}

void set_backend(Backend b) {
    if (!backend_supported(b)) {
        throw UsageError("kernel backend '" + backend_name(b) + "' not supported on this CPU");
    }
    state().backend = b;
    state().vt = State::table_for(b);
}

std::string backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

double dot(const double* x, const double* y, std::size_t n) { return state().vt->dot(x, y, n); }
void axpy(double a, const double* x, double* y, std::size_t n) { state().vt->axpy(a, x, y, n); }
void scale(double a, double* x, std::size_t n) { state().vt->scale(a, x, n); }
double sumsq(const double* x, std::size_t n) { return state().vt->sumsq(x, n); }
double abs_diff_sum(const double* x, const double* y, std::size_t n) {
    return state().vt->abs_diff_sum(x, y, n);
}
void adam_update(double* p, const double* g, double* m, double* v,
                 double b1, double b2, double eps, double lr,
                 double c1, double c2, std::size_t n) {
    state().vt->adam_update(p, g, m, v, b1, b2, eps, lr, c1, c2, n);
}

} // namespace mde::kernels
