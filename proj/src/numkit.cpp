#include "emorag/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "emorag/kernels.hpp"

namespace emorag::numkit {

namespace {

thread_local int g_no_grad_depth = 0;

std::string dims(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

void check_finite(const Tensor& t, const char* op) {
  const double* p = t.data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

bool track(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void attach(Tensor& out, std::vector<Tensor> parents,
            std::function<void(const Tensor&)> fn) {
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor::Tensor(int rows, int cols, bool requires_grad)
    : rows_(rows), cols_(cols), requires_grad_(requires_grad) {
  if (rows <= 0 || cols <= 0) {
    throw ShapeError("tensor dims must be positive, got " + dims(rows, cols));
  }
  data_ = std::make_shared<std::vector<double>>(size(), 0.0);
  if (requires_grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
}

Tensor Tensor::from(int rows, int cols, std::vector<double> values, bool requires_grad) {
  Tensor t(rows, cols, requires_grad);
  if (values.size() != t.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not fill " +
                     dims(rows, cols));
  }
  *t.data_ = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Tensor t(1, 1, requires_grad);
  (*t.data_)[0] = value;
  return t;
}

std::string Tensor::shape_str() const { return dims(rows_, cols_); }

double* Tensor::data() const {
  if (!data_) throw PreconditionError("tensor is undefined");
  return data_->data();
}

double* Tensor::grad() const {
  if (!grad_) throw PreconditionError("tensor has no grad buffer");
  return grad_->data();
}

double Tensor::value() const {
  if (rows_ != 1 || cols_ != 1) {
    throw PreconditionError("value() needs a 1x1 tensor, got " + shape_str());
  }
  return (*data_)[0];
}

double Tensor::at(int r, int c) const {
  if (r < 0 || r >= rows_ || c < 0 || c >= cols_) {
    throw ShapeError("at(" + std::to_string(r) + "," + std::to_string(c) +
                     ") outside " + shape_str());
  }
  return (*data_)[static_cast<std::size_t>(r) * cols_ + c];
}

void Tensor::set(int r, int c, double v) {
  if (r < 0 || r >= rows_ || c < 0 || c >= cols_) {
    throw ShapeError("set(" + std::to_string(r) + "," + std::to_string(c) +
                     ") outside " + shape_str());
  }
  (*data_)[static_cast<std::size_t>(r) * cols_ + c] = v;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tensor Tensor::clone() const {
  if (!data_) return Tensor();
  Tensor t(rows_, cols_, requires_grad_);
  *t.data_ = *data_;
  if (grad_ && t.grad_) *t.grad_ = *grad_;
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shapes " + a.shape_str() + " and " +
                     b.shape_str() + " differ");
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rec = track({&a, &b});
  Tensor out(a.rows(), a.cols(), rec);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");
  if (rec) {
    attach(out, {a, b}, [a, b](const Tensor& o) mutable {
      const double* g = o.grad();
      if (a.requires_grad()) {
        double* ga = a.grad();
        for (std::size_t i = 0; i < o.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        for (std::size_t i = 0; i < o.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool rec = track({&a, &b});
  Tensor out(a.rows(), a.cols(), rec);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] - pb[i];
  check_finite(out, "sub");
  if (rec) {
    attach(out, {a, b}, [a, b](const Tensor& o) mutable {
      const double* g = o.grad();
      if (a.requires_grad()) {
        double* ga = a.grad();
        for (std::size_t i = 0; i < o.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        for (std::size_t i = 0; i < o.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rec = track({&a, &b});
  Tensor out(a.rows(), a.cols(), rec);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "mul");
  if (rec) {
    attach(out, {a, b}, [a, b](const Tensor& o) mutable {
      const double* g = o.grad();
      if (a.requires_grad()) {
        double* ga = a.grad();
        const double* pb2 = b.data();
        for (std::size_t i = 0; i < o.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        double* gb = b.grad();
        const double* pa2 = a.data();
        for (std::size_t i = 0; i < o.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  const bool rec = track({&x});
  Tensor out(x.rows(), x.cols(), rec);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * c;
  check_finite(out, "scale");
  if (rec) {
    attach(out, {x}, [x, c](const Tensor& o) mutable {
      const double* g = o.grad();
      double* gx = x.grad();
      for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return out;
}

Tensor add_const(const Tensor& x, double c) {
  const bool rec = track({&x});
  Tensor out(x.rows(), x.cols(), rec);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] + c;
  check_finite(out, "add_const");
  if (rec) {
    attach(out, {x}, [x](const Tensor& o) mutable {
      const double* g = o.grad();
      double* gx = x.grad();
      for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool rec = track({&a, &b});
  Tensor out(m, n, rec);
  kernels::matmul(a.data(), b.data(), out.data(), m, k, n);
  check_finite(out, "matmul");
  if (rec) {
    attach(out, {a, b}, [a, b, m, k, n](const Tensor& o) mutable {
      if (a.requires_grad()) {
        kernels::matmul_nt_acc(o.grad(), b.data(), a.grad(), m, n, k);
      }
      if (b.requires_grad()) {
        kernels::matmul_tn_acc(a.data(), o.grad(), b.grad(), k, m, n);
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const bool rec = track({&a, &b});
  Tensor out(m, n, rec);
  std::fill(out.data(), out.data() + out.size(), 0.0);
  kernels::matmul_nt_acc(a.data(), b.data(), out.data(), m, k, n);
  check_finite(out, "matmul_nt");
  if (rec) {
    attach(out, {a, b}, [a, b, m, k, n](const Tensor& o) mutable {
      if (a.requires_grad()) {
        kernels::matmul_acc(o.grad(), b.data(), a.grad(), m, n, k);
      }
      if (b.requires_grad()) {
        kernels::matmul_tn_acc(o.grad(), a.data(), b.grad(), n, m, k);
      }
    });
  }
  return out;
}

Tensor tanh_t(const Tensor& x) {
  const bool rec = track({&x});
  Tensor out(x.rows(), x.cols(), rec);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = std::tanh(px[i]);
  check_finite(out, "tanh");
  if (rec) {
    attach(out, {x}, [x](const Tensor& o) mutable {
      const double* g = o.grad();
      const double* y = o.data();
      double* gx = x.grad();
      for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  check_finite(x, "softmax input");
  const bool rec = track({&x});
  Tensor out(x.rows(), x.cols(), rec);
  const int n = x.cols();
  for (int r = 0; r < x.rows(); ++r) {
    const double* row = x.data() + static_cast<std::size_t>(r) * n;
    double* orow = out.data() + static_cast<std::size_t>(r) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= denom;
  }
  check_finite(out, "softmax");
  if (rec) {
    attach(out, {x}, [x, n](const Tensor& o) mutable {
      const double* g = o.grad();
      const double* s = o.data();
      double* gx = x.grad();
      for (int r = 0; r < o.rows(); ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += g[base + j] * s[base + j];
        for (int j = 0; j < n; ++j) {
          gx[base + j] += s[base + j] * (g[base + j] - dot);
        }
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  if (len <= 0 || start < 0 || start + len > x.cols()) {
    throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside " + x.shape_str());
  }
  const bool rec = track({&x});
  Tensor out(x.rows(), len, rec);
  for (int r = 0; r < x.rows(); ++r) {
    const double* src = x.data() + static_cast<std::size_t>(r) * x.cols() + start;
    double* dst = out.data() + static_cast<std::size_t>(r) * len;
    std::copy(src, src + len, dst);
  }
  if (rec) {
    attach(out, {x}, [x, start, len](const Tensor& o) mutable {
      const double* g = o.grad();
      double* gx = x.grad();
      for (int r = 0; r < o.rows(); ++r) {
        double* dst = gx + static_cast<std::size_t>(r) * x.cols() + start;
        const double* src = g + static_cast<std::size_t>(r) * len;
        for (int j = 0; j < len; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw PreconditionError("concat_cols needs at least one part");
  const int rows = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row mismatch, " + p.shape_str() + " vs " +
                       std::to_string(rows) + " rows");
    }
    total += p.cols();
  }
  bool rec = false;
  if (grad_enabled()) {
    for (const Tensor& p : parts) rec = rec || p.requires_grad();
  }
  Tensor out(rows, total, rec);
  int off = 0;
  for (const Tensor& p : parts) {
    for (int r = 0; r < rows; ++r) {
      const double* src = p.data() + static_cast<std::size_t>(r) * p.cols();
      double* dst = out.data() + static_cast<std::size_t>(r) * total + off;
      std::copy(src, src + p.cols(), dst);
    }
    off += p.cols();
  }
  if (rec) {
    attach(out, parts, [parts, rows, total](const Tensor& o) mutable {
      const double* g = o.grad();
      int off2 = 0;
      for (const Tensor& p : parts) {
        if (p.requires_grad()) {
          double* gp = p.grad();
          for (int r = 0; r < rows; ++r) {
            const double* src = g + static_cast<std::size_t>(r) * total + off2;
            double* dst = gp + static_cast<std::size_t>(r) * p.cols();
            for (int j = 0; j < p.cols(); ++j) dst[j] += src[j];
          }
        }
        off2 += p.cols();
      }
    });
  }
  return out;
}

Tensor mean_rows(const Tensor& x) {
  const bool rec = track({&x});
  Tensor out(1, x.cols(), rec);
  const int rows = x.rows(), cols = x.cols();
  double* po = out.data();
  for (int j = 0; j < cols; ++j) po[j] = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* row = x.data() + static_cast<std::size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) po[j] += row[j];
  }
  for (int j = 0; j < cols; ++j) po[j] /= rows;
  check_finite(out, "mean_rows");
  if (rec) {
    attach(out, {x}, [x, rows, cols](const Tensor& o) mutable {
      const double* g = o.grad();
      double* gx = x.grad();
      for (int r = 0; r < rows; ++r) {
        double* grow = gx + static_cast<std::size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) grow[j] += g[j] / rows;
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  const bool rec = track({&x});
  Tensor out(1, 1, rec);
  const double* px = x.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
  out.data()[0] = s;
  check_finite(out, "sum_all");
  if (rec) {
    attach(out, {x}, [x](const Tensor& o) mutable {
      const double g = o.grad()[0];
      double* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const bool rec = track({&x});
  Tensor out(1, 1, rec);
  const double* px = x.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += px[i];
  out.data()[0] = s / static_cast<double>(x.size());
  check_finite(out, "mean_all");
  if (rec) {
    attach(out, {x}, [x](const Tensor& o) mutable {
      const double g = o.grad()[0] / static_cast<double>(x.size());
      double* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor sub_scalar(const Tensor& x, const Tensor& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError("sub_scalar: scalar operand is " + s.shape_str());
  }
  const bool rec = track({&x, &s});
  Tensor out(x.rows(), x.cols(), rec);
  const double sv = s.data()[0];
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] - sv;
  check_finite(out, "sub_scalar");
  if (rec) {
    attach(out, {x, s}, [x, s](const Tensor& o) mutable {
      const double* g = o.grad();
      if (x.requires_grad()) {
        double* gx = x.grad();
        for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i];
      }
      if (s.requires_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) acc += g[i];
        s.grad()[0] -= acc;
      }
    });
  }
  return out;
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError("mul_scalar: scalar operand is " + s.shape_str());
  }
  const bool rec = track({&x, &s});
  Tensor out(x.rows(), x.cols(), rec);
  const double sv = s.data()[0];
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = px[i] * sv;
  check_finite(out, "mul_scalar");
  if (rec) {
    attach(out, {x, s}, [x, s](const Tensor& o) mutable {
      const double* g = o.grad();
      if (x.requires_grad()) {
        double* gx = x.grad();
        const double sv2 = s.data()[0];
        for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i] * sv2;
      }
      if (s.requires_grad()) {
        const double* px2 = x.data();
        double acc = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) acc += g[i] * px2[i];
        s.grad()[0] += acc;
      }
    });
  }
  return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
  if (a.rows() != 1 || a.cols() != 1 || b.rows() != 1 || b.cols() != 1) {
    throw ShapeError("divide: wants 1x1 operands, got " + a.shape_str() + " and " +
                     b.shape_str());
  }
  const bool rec = track({&a, &b});
  Tensor out(1, 1, rec);
  out.data()[0] = a.data()[0] / b.data()[0];
  check_finite(out, "divide");
  if (rec) {
    attach(out, {a, b}, [a, b](const Tensor& o) mutable {
      const double g = o.grad()[0];
      const double av = a.data()[0];
      const double bv = b.data()[0];
      if (a.requires_grad()) a.grad()[0] += g / bv;
      if (b.requires_grad()) b.grad()[0] -= g * av / (bv * bv);
    });
  }
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: " + x.shape_str() + " + " + row.shape_str());
  }
  const bool rec = track({&x, &row});
  Tensor out(x.rows(), x.cols(), rec);
  const int cols = x.cols();
  const double* pr = row.data();
  for (int r = 0; r < x.rows(); ++r) {
    const double* src = x.data() + static_cast<std::size_t>(r) * cols;
    double* dst = out.data() + static_cast<std::size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) dst[j] = src[j] + pr[j];
  }
  check_finite(out, "add_row");
  if (rec) {
    attach(out, {x, row}, [x, row, cols](const Tensor& o) mutable {
      const double* g = o.grad();
      if (x.requires_grad()) {
        double* gx = x.grad();
        for (std::size_t i = 0; i < o.size(); ++i) gx[i] += g[i];
      }
      if (row.requires_grad()) {
        double* gr = row.grad();
        for (int r = 0; r < o.rows(); ++r) {
          const double* grow = g + static_cast<std::size_t>(r) * cols;
          for (int j = 0; j < cols; ++j) gr[j] += grow[j];
        }
      }
    });
  }
  return out;
}

Tensor embed_mean(const Tensor& table, const std::vector<int>& indices) {
  if (indices.empty()) throw PreconditionError("embed_mean with no indices");
  for (int idx : indices) {
    if (idx < 0 || idx >= table.rows()) {
      throw ShapeError("embed_mean index " + std::to_string(idx) + " outside table " +
                       table.shape_str());
    }
  }
  const bool rec = track({&table});
  const int d = table.cols();
  Tensor out(1, d, rec);
  double* po = out.data();
  for (int j = 0; j < d; ++j) po[j] = 0.0;
  for (int idx : indices) {
    const double* row = table.data() + static_cast<std::size_t>(idx) * d;
    for (int j = 0; j < d; ++j) po[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(indices.size());
  for (int j = 0; j < d; ++j) po[j] *= inv;
  check_finite(out, "embed_mean");
  if (rec) {
    attach(out, {table}, [table, indices, d, inv](const Tensor& o) mutable {
      const double* g = o.grad();
      double* gt = table.grad();
      for (int idx : indices) {
        double* grow = gt + static_cast<std::size_t>(idx) * d;
        for (int j = 0; j < d; ++j) grow[j] += g[j] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

void backward(Tensor& loss) {
  if (!loss.defined()) throw PreconditionError("backward on an undefined tensor");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw PreconditionError("backward needs a scalar loss, got " + loss.shape_str());
  }
  if (!loss.node) {
    throw PreconditionError("backward on a tensor that is not on the tape");
  }
  if (loss.node->consumed) {
    throw PreconditionError("backward on a tape already freed by a previous backward");
  }

  // Post-order over the node graph; reversing it runs each node before its
  // parents.
  std::vector<Tensor> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Tensor, bool>> stack;
  stack.push_back({loss, false});
  while (!stack.empty()) {
    auto [t, expanded] = stack.back();
    stack.pop_back();
    Node* n = t.node.get();
    if (expanded) {
      order.push_back(t);
      continue;
    }
    if (seen.count(n)) continue;
    if (n->consumed) {
      throw PreconditionError("graph references a tape already freed by a previous backward");
    }
    seen.insert(n);
    stack.push_back({t, true});
    for (const Tensor& p : n->parents) {
      if (p.node && !seen.count(p.node.get())) stack.push_back({p, false});
    }
  }

  loss.grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->node->backward(*it);
  }
  for (Tensor& t : order) {
    t.node->consumed = true;
    t.node->parents.clear();
    t.node->backward = nullptr;
  }
}

void zero_grad(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::init(const std::vector<Tensor>& params, double beta1, double beta2,
                          double epsilon) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  s.first_moment.reserve(params.size());
  s.second_moment.reserve(params.size());
  for (const Tensor& p : params) {
    s.first_moment.emplace_back(p.size(), 0.0);
    s.second_moment.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr) {
  if (state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw PreconditionError("optimizer state holds " +
                            std::to_string(state.first_moment.size()) +
                            " slots for " + std::to_string(params.size()) + " params");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) {
      throw PreconditionError("param " + std::to_string(i) + " has no grad buffer");
    }
    if (state.first_moment[i].size() != params[i].size() ||
        state.second_moment[i].size() != params[i].size()) {
      throw PreconditionError("optimizer slot " + std::to_string(i) +
                              " sized for a different tensor");
    }
  }
  // All grads are vetted before any state mutates, so a bad step changes
  // nothing.
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double* g = params[i].grad();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient in param " + std::to_string(i) +
                           " at flat index " + std::to_string(j));
      }
    }
  }
  state.step_count += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].data();
    const double* g = params[i].grad();
    double* m = state.first_moment[i].data();
    double* v = state.second_moment[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(std::vector<Tensor>& params,
                  const std::function<Tensor()>& loss_builder, double h) {
  if (h <= 0.0) throw PreconditionError("grad_check step must be positive");

  zero_grad(params);
  Tensor loss = loss_builder();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) {
    analytic.emplace_back(p.grad(), p.grad() + p.size());
  }

  auto eval = [&]() {
    NoGradGuard ng;
    Tensor l = loss_builder();
    const double v = l.value();
    if (!std::isfinite(v)) {
      throw NumericError("loss became non-finite during finite differencing");
    }
    return v;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double saved = p[j];
      p[j] = saved + h;
      const double fp = eval();
      p[j] = saved - h;
      const double fm = eval();
      p[j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic[i][j];
      const double rel =
          std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace emorag::numkit
