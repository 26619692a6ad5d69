#pragma once

#include <cstddef>

// Dense inner-loop kernels, OpenMP-parallel over independent output elements.
// Every element is accumulated by exactly one thread in a fixed index order,
// so results are bitwise identical for any thread count. The serial variants
// in kernels::serial are the reference implementations the tests and the
// benchmark compare against.
namespace emorag::kernels {

// C = A(m x k) * B(k x n), row-major.
void matmul(const double* a, const double* b, double* c, int m, int k, int n);

// C += A(m x k) * B(k x n).
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);

// C(m x n) += A(m x k) * B(n x k)^T.
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);

// C(m x n) += A(k x m)^T * B(k x n).
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);

// sims[i] = <query, vectors[i]> for n row-major vectors of width dim.
void dot_scan(const double* vectors, std::size_t n, int dim, const double* query,
              double* sims);

namespace serial {

void matmul(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k, int n);
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k, int n);
void dot_scan(const double* vectors, std::size_t n, int dim, const double* query,
              double* sims);

}  // namespace serial

}  // namespace emorag::kernels
