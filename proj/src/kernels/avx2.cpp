#include "kernel_table.hpp"

#if F3R_HAVE_AVX2_KERNELS

#include <immintrin.h>

#include <algorithm>

#define F3R_AVX2 __attribute__((target("avx2,fma")))

namespace f3r::kernels::detail {

namespace {

struct F32Lanes {
  using T = float;
  using V = __m256;
  static constexpr std::size_t kWidth = 8;
  F3R_AVX2 static V zero() { return _mm256_setzero_ps(); }
  F3R_AVX2 static V set1(T x) { return _mm256_set1_ps(x); }
  F3R_AVX2 static V load(const T* p) { return _mm256_loadu_ps(p); }
  F3R_AVX2 static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  F3R_AVX2 static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  F3R_AVX2 static V add(V a, V b) { return _mm256_add_ps(a, b); }
  F3R_AVX2 static T hsum(V v) {
    __m128 s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x1));
    return _mm_cvtss_f32(s);
  }
};

struct F64Lanes {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t kWidth = 4;
  F3R_AVX2 static V zero() { return _mm256_setzero_pd(); }
  F3R_AVX2 static V set1(T x) { return _mm256_set1_pd(x); }
  F3R_AVX2 static V load(const T* p) { return _mm256_loadu_pd(p); }
  F3R_AVX2 static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  F3R_AVX2 static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  F3R_AVX2 static V add(V a, V b) { return _mm256_add_pd(a, b); }
  F3R_AVX2 static T hsum(V v) {
    __m128d s = _mm_add_pd(_mm256_castpd256_pd128(v), _mm256_extractf128_pd(v, 1));
    s = _mm_add_sd(s, _mm_unpackhi_pd(s, s));
    return _mm_cvtsd_f64(s);
  }
};

template <typename L>
F3R_AVX2 typename L::T dot_avx2(const typename L::T* a, const typename L::T* b, std::size_t n) {
  using V = typename L::V;
  constexpr std::size_t w = L::kWidth;
  V acc0 = L::zero();
  V acc1 = L::zero();
  std::size_t p = 0;
  for (; p + 2 * w <= n; p += 2 * w) {
    acc0 = L::fmadd(L::load(a + p), L::load(b + p), acc0);
    acc1 = L::fmadd(L::load(a + p + w), L::load(b + p + w), acc1);
  }
  for (; p + w <= n; p += w) acc0 = L::fmadd(L::load(a + p), L::load(b + p), acc0);
  typename L::T s = L::hsum(L::add(acc0, acc1));
  for (; p < n; ++p) s += a[p] * b[p];
  return s;
}

template <typename L>
F3R_AVX2 void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const typename L::T* a,
                           const typename L::T* b, typename L::T* c, bool accumulate) {
  using T = typename L::T;
  using V = typename L::V;
  constexpr std::size_t w = L::kWidth;
  const std::size_t kv = k - k % w;
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const T* b0 = b + (j + 0) * k;
      const T* b1 = b + (j + 1) * k;
      const T* b2 = b + (j + 2) * k;
      const T* b3 = b + (j + 3) * k;
      V s0 = L::zero(), s1 = L::zero(), s2 = L::zero(), s3 = L::zero();
      for (std::size_t p = 0; p < kv; p += w) {
        const V av = L::load(ai + p);
        s0 = L::fmadd(av, L::load(b0 + p), s0);
        s1 = L::fmadd(av, L::load(b1 + p), s1);
        s2 = L::fmadd(av, L::load(b2 + p), s2);
        s3 = L::fmadd(av, L::load(b3 + p), s3);
      }
      T r0 = L::hsum(s0), r1 = L::hsum(s1), r2 = L::hsum(s2), r3 = L::hsum(s3);
      for (std::size_t p = kv; p < k; ++p) {
        r0 += ai[p] * b0[p];
        r1 += ai[p] * b1[p];
        r2 += ai[p] * b2[p];
        r3 += ai[p] * b3[p];
      }
      if (accumulate) {
        ci[j] += r0;
        ci[j + 1] += r1;
        ci[j + 2] += r2;
        ci[j + 3] += r3;
      } else {
        ci[j] = r0;
        ci[j + 1] = r1;
        ci[j + 2] = r2;
        ci[j + 3] = r3;
      }
    }
    for (; j < n; ++j) {
      const T r = dot_avx2<L>(ai, b + j * k, k);
      ci[j] = accumulate ? ci[j] + r : r;
    }
  }
}

// c[i, j] (+)= sum_p a(i, p) * b[p, j] with a(i, p) = a[i * rs + p * cs].
// Output columns are blocked four vectors wide and held in registers over p.
template <typename L>
F3R_AVX2 void gemm_broadcast_avx2(std::size_t m, std::size_t n, std::size_t k, const typename L::T* a,
                                  std::size_t rs, std::size_t cs, const typename L::T* b,
                                  typename L::T* c, bool accumulate) {
  using T = typename L::T;
  using V = typename L::V;
  constexpr std::size_t w = L::kWidth;
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* arow = a + i * rs;
    std::size_t j = 0;
    for (; j + 4 * w <= n; j += 4 * w) {
      V c0 = accumulate ? L::load(ci + j) : L::zero();
      V c1 = accumulate ? L::load(ci + j + w) : L::zero();
      V c2 = accumulate ? L::load(ci + j + 2 * w) : L::zero();
      V c3 = accumulate ? L::load(ci + j + 3 * w) : L::zero();
      for (std::size_t p = 0; p < k; ++p) {
        const V av = L::set1(arow[p * cs]);
        const T* bp = b + p * n + j;
        c0 = L::fmadd(av, L::load(bp), c0);
        c1 = L::fmadd(av, L::load(bp + w), c1);
        c2 = L::fmadd(av, L::load(bp + 2 * w), c2);
        c3 = L::fmadd(av, L::load(bp + 3 * w), c3);
      }
      L::store(ci + j, c0);
      L::store(ci + j + w, c1);
      L::store(ci + j + 2 * w, c2);
      L::store(ci + j + 3 * w, c3);
    }
    for (; j + w <= n; j += w) {
      V c0 = accumulate ? L::load(ci + j) : L::zero();
      for (std::size_t p = 0; p < k; ++p) c0 = L::fmadd(L::set1(arow[p * cs]), L::load(b + p * n + j), c0);
      L::store(ci + j, c0);
    }
    for (; j < n; ++j) {
      T s = accumulate ? ci[j] : T(0);
      for (std::size_t p = 0; p < k; ++p) s += arow[p * cs] * b[p * n + j];
      ci[j] = s;
    }
  }
}

template <typename L>
F3R_AVX2 void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const typename L::T* a,
                           const typename L::T* b, typename L::T* c, bool accumulate) {
  gemm_broadcast_avx2<L>(m, n, k, a, k, 1, b, c, accumulate);
}

template <typename L>
F3R_AVX2 void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const typename L::T* a,
                           const typename L::T* b, typename L::T* c, bool accumulate) {
  gemm_broadcast_avx2<L>(m, n, k, a, 1, m, b, c, accumulate);
}

template <typename L>
F3R_AVX2 void axpy_avx2(typename L::T alpha, const typename L::T* x, typename L::T* y, std::size_t n) {
  constexpr std::size_t w = L::kWidth;
  const auto av = L::set1(alpha);
  std::size_t i = 0;
  for (; i + w <= n; i += w) L::store(y + i, L::fmadd(av, L::load(x + i), L::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable<float> kAvx2F32 = {&gemm_nt_avx2<F32Lanes>, &gemm_nn_avx2<F32Lanes>,
                                     &gemm_tn_avx2<F32Lanes>, &dot_avx2<F32Lanes>,
                                     &axpy_avx2<F32Lanes>};
const KernelTable<double> kAvx2F64 = {&gemm_nt_avx2<F64Lanes>, &gemm_nn_avx2<F64Lanes>,
                                      &gemm_tn_avx2<F64Lanes>, &dot_avx2<F64Lanes>,
                                      &axpy_avx2<F64Lanes>};

}  // namespace f3r::kernels::detail

#endif  // F3R_HAVE_AVX2_KERNELS
