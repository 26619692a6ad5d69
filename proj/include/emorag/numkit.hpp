#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "emorag/errors.hpp"

namespace emorag::numkit {

class Tensor;

// One tape entry. Nodes are created by ops and consumed by backward(); after
// a backward pass the graph they form is freed and cannot be replayed.
struct Node {
  std::vector<Tensor> parents;
  std::function<void(const Tensor& out)> backward;
  bool consumed = false;
};

// Thread-local switch; ops record tape nodes only while grads are enabled.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major 2-D tensor of 64-bit floats. Scalars are 1x1, row vectors
// 1xN. Copies share the underlying data and grad buffers (handle semantics);
// clone() makes a deep copy. A grad buffer exists iff requires_grad.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols, bool requires_grad = false);

  static Tensor from(int rows, int cols, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return static_cast<std::size_t>(rows_) * cols_; }
  std::string shape_str() const;

  // Handle semantics: a const Tensor still exposes its shared buffers.
  double* data() const;
  double* grad() const;
  bool requires_grad() const { return requires_grad_; }

  double value() const;  // scalar tensors only
  double at(int r, int c) const;
  void set(int r, int c, double v);

  void zero_grad();
  Tensor clone() const;

  // Buffer identity, used to align optimizer state with parameters.
  const void* buffer_id() const { return data_.get(); }

  std::shared_ptr<Node> node;

 private:
  int rows_ = 0;
  int cols_ = 0;
  bool requires_grad_ = false;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
};

// ---------------------------------------------------------------------------
// Forward ops. Each op validates shapes, records a tape node when grads are
// enabled, and fails loudly on non-finite outputs (overflow is an error, not
// a value).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor tanh_t(const Tensor& x);
// Row-wise softmax with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& parts);
// T x d -> 1 x d column means.
Tensor mean_rows(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// x - s and x * s with s a 1x1 tensor broadcast over x.
Tensor sub_scalar(const Tensor& x, const Tensor& s);
Tensor mul_scalar(const Tensor& x, const Tensor& s);
// 1x1 / 1x1.
Tensor divide(const Tensor& a, const Tensor& b);
// X (T x d) + row (1 x d) broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& row);
// Mean of table rows selected by indices (with multiplicity) -> 1 x d.
Tensor embed_mean(const Tensor& table, const std::vector<int>& indices);

// Reverse pass from a scalar loss. Grads accumulate across calls until
// zero_grad; the tape itself is freed and a second backward on it throws.
void backward(Tensor& loss);

void zero_grad(std::vector<Tensor>& params);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  long step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState init(const std::vector<Tensor>& params, double beta1 = 0.9,
                        double beta2 = 0.999, double epsilon = 1e-8);
};

// Bias-corrected Adam update in place, reading each param's grad buffer.
// NaN/Inf in any grad aborts before touching params or state.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

// Central-difference gradient check. loss_builder must deterministically
// rebuild the scalar loss from the current parameter values. Returns the max
// over parameter elements of |analytic - central| / max(|analytic|,
// |central|, 1e-8).
double grad_check(std::vector<Tensor>& params,
                  const std::function<Tensor()>& loss_builder, double h);

}  // namespace emorag::numkit
