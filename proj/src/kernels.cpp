#include "emorag/kernels.hpp"

namespace emorag::kernels {

namespace {
// Below this many flops the fork/join overhead dominates; stay serial.
constexpr long long kParallelFlops = 1 << 15;
}  // namespace

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long work = 1ll * m * n * k;
#pragma omp parallel for schedule(static) if (work >= kParallelFlops)
  for (int i = 0; i < m; ++i) {
    double* crow = c + 1ll * i * n;
    for (int j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + 1ll * i * k;
    for (int l = 0; l < k; ++l) {
      const double al = arow[l];
      const double* brow = b + 1ll * l * n;
      for (int j = 0; j < n; ++j) crow[j] += al * brow[j];
    }
  }
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long work = 1ll * m * n * k;
#pragma omp parallel for schedule(static) if (work >= kParallelFlops)
  for (int i = 0; i < m; ++i) {
    double* crow = c + 1ll * i * n;
    const double* arow = a + 1ll * i * k;
    for (int l = 0; l < k; ++l) {
      const double al = arow[l];
      const double* brow = b + 1ll * l * n;
      for (int j = 0; j < n; ++j) crow[j] += al * brow[j];
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long work = 1ll * m * n * k;
#pragma omp parallel for schedule(static) if (work >= kParallelFlops)
  for (int i = 0; i < m; ++i) {
    double* crow = c + 1ll * i * n;
    const double* arow = a + 1ll * i * k;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + 1ll * j * k;
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
      crow[j] += s;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  const long long work = 1ll * m * n * k;
#pragma omp parallel for schedule(static) if (work >= kParallelFlops)
  for (int i = 0; i < m; ++i) {
    double* crow = c + 1ll * i * n;
    for (int l = 0; l < k; ++l) {
      const double al = a[1ll * l * m + i];
      const double* brow = b + 1ll * l * n;
      for (int j = 0; j < n; ++j) crow[j] += al * brow[j];
    }
  }
}

void dot_scan(const double* vectors, std::size_t n, int dim, const double* query,
              double* sims) {
  const long long work = static_cast<long long>(n) * dim;
  const long long sn = static_cast<long long>(n);
#pragma omp parallel for schedule(static) if (work >= kParallelFlops)
  for (long long i = 0; i < sn; ++i) {
    const double* row = vectors + i * dim;
    double s = 0.0;
    for (int j = 0; j < dim; ++j) s += query[j] * row[j];
    sims[i] = s;
  }
}

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += a[1ll * i * k + l] * b[1ll * l * n + j];
      c[1ll * i * n + j] = s;
    }
  }
}

void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  // Starts from the existing value so the addition chain matches the
  // parallel kernel term for term.
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = c[1ll * i * n + j];
      for (int l = 0; l < k; ++l) s += a[1ll * i * k + l] * b[1ll * l * n + j];
      c[1ll * i * n + j] = s;
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += a[1ll * i * k + l] * b[1ll * j * k + l];
      c[1ll * i * n + j] += s;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = c[1ll * i * n + j];
      for (int l = 0; l < k; ++l) s += a[1ll * l * m + i] * b[1ll * l * n + j];
      c[1ll * i * n + j] = s;
    }
  }
}

void dot_scan(const double* vectors, std::size_t n, int dim, const double* query,
              double* sims) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = vectors + static_cast<std::size_t>(dim) * i;
    double s = 0.0;
    for (int j = 0; j < dim; ++j) s += query[j] * row[j];
    sims[i] = s;
  }
}

}  // namespace serial

}  // namespace emorag::kernels
