#pragma once

// Dense double-precision kernels used on the hot paths of training and
// scoring. Every kernel has a portable scalar reference; an AVX2/FMA variant
// is compiled in a separate translation unit and chosen at runtime when the
// CPU supports it. Set CSAVAE_ISA=scalar to force the reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace csavae::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // x *= alpha
  void (*scale)(double alpha, double* x, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  double (*max)(const double* x, std::size_t n);
  // C(m x n) += A(m x k) * B(k x n), all row-major with leading dimensions.
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k,
                  const double* a, std::size_t lda,
                  const double* b, std::size_t ldb,
                  double* c, std::size_t ldc);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled in.
const KernelTable* avx2_table();

bool isa_supported(Isa isa);

// The table used by the free functions below. Resolved once on first use.
const KernelTable& active();

// Forces a specific variant; throws std::invalid_argument when unsupported.
void select(Isa isa);

// RAII override for tests.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa);
  ~ScopedIsa();
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
inline void scale(double alpha, std::span<double> x) {
  active().scale(alpha, x.data(), x.size());
}
inline double sum(std::span<const double> x) { return active().sum(x.data(), x.size()); }
inline double max(std::span<const double> x) { return active().max(x.data(), x.size()); }

enum class Trans { no, yes };

// C(m x n) += op(A) * op(B). op(A) is m x k, op(B) is k x n. Transposed
// operands are packed into scratch storage before the nn kernel runs.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
          const double* a, std::size_t lda, const double* b, std::size_t ldb,
          double* c, std::size_t ldc);

}  // namespace csavae::kernels
