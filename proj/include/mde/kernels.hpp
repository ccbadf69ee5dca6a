#pragma once

#include <cstddef>
#include <string>

namespace mde::kernels {

// Data-parallel inner loops used by propagation, losses, gradients and Adam.
// Every kernel has a scalar reference implementation and an AVX2 variant;
// the active backend is picked once at startup (cpuid, overridable via the
// MDE_KERNELS env var or set_backend) and the two are equivalence-tested.

enum class Backend { scalar, avx2 };

Backend active_backend();
bool backend_supported(Backend b);
void set_backend(Backend b); // throws UsageError if unsupported on this CPU
std::string backend_name(Backend b);

/// sum_i x[i]*y[i]
double dot(const double* x, const double* y, std::size_t n);

/// y[i] += a*x[i]
void axpy(double a, const double* x, double* y, std::size_t n);

/// x[i] *= a
void scale(double a, double* x, std::size_t n);

/// sum_i x[i]^2
double sumsq(const double* x, std::size_t n);

/// sum_i |x[i]-y[i]|
double abs_diff_sum(const double* x, const double* y, std::size_t n);

/// Fused bias-corrected Adam update:
///   m = b1*m + (1-b1)*g;  v = b2*v + (1-b2)*g^2
///   p -= lr * (m*c1) / (sqrt(v*c2) + eps)
/// with c1 = 1/(1-b1^t), c2 = 1/(1-b2^t) supplied by the caller.
void adam_update(double* p, const double* g, double* m, double* v,
                 double b1, double b2, double eps, double lr,
                 double c1, double c2, std::size_t n);

// Per-backend entry points, exposed so tests can compare them directly.
namespace scalar_impl {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void scale(double a, double* x, std::size_t n);
double sumsq(const double* x, std::size_t n);
double abs_diff_sum(const double* x, const double* y, std::size_t n);
void adam_update(double* p, const double* g, double* m, double* v,
                 double b1, double b2, double eps, double lr,
                 double c1, double c2, std::size_t n);
} // namespace scalar_impl

#if defined(MDE_HAVE_AVX2)
namespace avx2_impl {
double dot(const double* x, const double* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void scale(double a, double* x, std::size_t n);
double sumsq(const double* x, std::size_t n);
double abs_diff_sum(const double* x, const double* y, std::size_t n);
void adam_update(double* p, const double* g, double* m, double* v,
                 double b1, double b2, double eps, double lr,
                 double c1, double c2, std::size_t n);
} // namespace avx2_impl
#endif

} // namespace mde::kernels
