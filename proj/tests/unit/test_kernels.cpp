#include "doctest.h"

#include <cmath>
#include <random>
#include <vector>

#include "f3r/kernels.hpp"

using namespace f3r;
using kernels::Backend;

namespace {

template <typename T>
std::vector<T> random_values(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<T> out(n);
  for (auto& x : out) x = static_cast<T>(u(rng));
  return out;
}

// Plain triple loop used as the reference for every layout.
template <typename T>
std::vector<double> naive(std::size_t m, std::size_t n, std::size_t k, const std::vector<T>& a,
                          const std::vector<T>& b, char layout) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = layout == 't' ? a[p * m + i] : a[i * k + p];
        const double bv = layout == 'n' ? b[p * n + j] : (layout == 't' ? b[p * n + j] : b[j * k + p]);
        c[i * n + j] += av * bv;
      }
  return c;
}

template <typename T>
void run(char layout, std::size_t m, std::size_t n, std::size_t k, const std::vector<T>& a, const std::vector<T>& b,
         std::vector<T>& c, bool acc) {
  if (layout == 'x') kernels::gemm_nt(m, n, k, a.data(), b.data(), c.data(), acc);
  if (layout == 'n') kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data(), acc);
  if (layout == 't') kernels::gemm_tn(m, n, k, a.data(), b.data(), c.data(), acc);
}

template <typename T>
void check_layout(char layout, double tol) {
  std::mt19937_64 rng(11);
  const std::size_t shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {16, 16, 16}, {17, 9, 33}, {64, 48, 16}, {5, 130, 67}};
  for (const auto& s : shapes) {
    const std::size_t m = s[0], n = s[1], k = s[2];
    const auto a = random_values<T>(m * k, rng);
    const auto b = random_values<T>(n * k, rng);
    const auto ref = naive<T>(m, n, k, a, b, layout == 'x' ? 'x' : layout);
    const auto base = random_values<T>(m * n, rng);
    for (Backend backend : {Backend::Scalar, Backend::Avx2}) {
      if (backend == Backend::Avx2 && !kernels::avx2_available()) continue;
      kernels::ScopedBackend scope(backend);
      std::vector<T> c(m * n, T(7));
      run(layout, m, n, k, a, b, c, false);
      std::vector<T> acc = base;
      run(layout, m, n, k, a, b, acc, true);
      for (std::size_t i = 0; i < m * n; ++i) {
        CHECK(std::abs(c[i] - ref[i]) <= tol * (1.0 + std::abs(ref[i])));
        CHECK(std::abs(acc[i] - (ref[i] + base[i])) <= tol * (1.0 + std::abs(ref[i])));
      }
    }
  }
}

}  // namespace

TEST_CASE("gemm variants agree with the naive product") {
  for (char layout : {'x', 'n', 't'}) {
    check_layout<double>(layout, 1e-12);
    check_layout<float>(layout, 1e-5);
  }
}

TEST_CASE("avx2 kernels match the scalar reference") {
  if (!kernels::avx2_available()) return;
  std::mt19937_64 rng(12);
  for (std::size_t n : {1u, 3u, 8u, 15u, 16u, 31u, 100u, 1027u}) {
    const auto a = random_values<double>(n, rng);
    const auto b = random_values<double>(n, rng);
    const auto af = random_values<float>(n, rng);
    const auto bf = random_values<float>(n, rng);
    double ds, dv;
    float fs, fv;
    std::vector<double> ys = b, yv = b;
    std::vector<float> yfs = bf, yfv = bf;
    {
      kernels::ScopedBackend scope(Backend::Scalar);
      ds = kernels::dot(a.data(), b.data(), n);
      fs = kernels::dot(af.data(), bf.data(), n);
      kernels::axpy(0.37, a.data(), ys.data(), n);
      kernels::axpy(0.37f, af.data(), yfs.data(), n);
    }
    {
      kernels::ScopedBackend scope(Backend::Avx2);
      dv = kernels::dot(a.data(), b.data(), n);
      fv = kernels::dot(af.data(), bf.data(), n);
      kernels::axpy(0.37, a.data(), yv.data(), n);
      kernels::axpy(0.37f, af.data(), yfv.data(), n);
    }
    CHECK(std::abs(ds - dv) <= 1e-12 * (1.0 + std::abs(ds)));
    CHECK(std::abs(fs - fv) <= 1e-4f * (1.0f + std::abs(fs)));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(ys[i] - yv[i]) <= 1e-15);
      CHECK(std::abs(yfs[i] - yfv[i]) <= 1e-6f);
    }
  }
}

TEST_CASE("backend selection") {
  CHECK(kernels::backend_name(Backend::Scalar) == "scalar");
  {
    kernels::ScopedBackend scope(Backend::Scalar);
    CHECK(kernels::active_backend() == Backend::Scalar);
  }
  CHECK(kernels::active_backend() == kernels::best_backend());
}
