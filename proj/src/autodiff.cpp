#include "ornet/autodiff.hpp"

// Small products otherwise take a coefficient-wise path whose rounding
// depends on buffer alignment; the packed GEMM kernels do not.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ornet/errors.hpp"

namespace ornet::ad {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* g_active_tape = nullptr;

constexpr double kHalfLog2Pi = 0.91893853320467274178;

void require_finite(std::span<const double> values, const char* op) {
  // v * 0 is NaN exactly for inf and NaN; branch-free so it vectorizes
  double probe = 0.0;
  for (double v : values) probe += v * 0.0;
  if (probe != 0.0) throw NumericError(std::string(op) + ": non-finite value");
}

// Fixed summation order regardless of where a and b sit in memory.
double dot(const double* a, const double* b, std::size_t n) {
  double s[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s[0] += a[i] * b[i];
    s[1] += a[i + 1] * b[i + 1];
    s[2] += a[i + 2] * b[i + 2];
    s[3] += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s[0] += a[i] * b[i];
  return (s[0] + s[1]) + (s[2] + s[3]);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor");
}

void require_index_range(std::span<const std::uint32_t> index, std::size_t bound, const char* op) {
  for (auto i : index) {
    if (i >= bound) {
      throw DimensionError(std::string(op) + ": index " + std::to_string(i) +
                           " out of range for " + std::to_string(bound) + " rows");
    }
  }
}

ConstMap as_matrix(const Node& n) {
  return ConstMap(n.value.data(), static_cast<Eigen::Index>(n.shape.rows),
                  static_cast<Eigen::Index>(n.shape.cols));
}

}  // namespace

void detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[' << s.rows << 'x' << s.cols << ']';
  return os.str();
}

// Glue between the public Tensor handle and the tape.
struct OpBuilder {
  static const NodePtr& node(const Tensor& t) { return t.node_; }

  static Tensor make(Shape shape, std::vector<double> values, const char* op) {
    require_finite(values, op);
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->defined() && t->requires_grad(); });
  }

  static bool tracking(std::span<const Tensor> inputs) {
    if (g_active_tape == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor& t) { return t.requires_grad(); });
  }

  static void record(Tensor& out, std::function<void(const Node&)> fn) {
    out.node_->requires_grad = true;
    g_active_tape->entries_.push_back({out.node_, std::move(fn)});
  }
};

namespace {

// Accumulates a gradient buffer into an input node, if it wants one.
template <class F>
void accumulate(const NodePtr& in, F&& f) {
  if (!in->requires_grad) return;
  in->ensure_grad();
  f(in->grad);
}

template <class Fwd, class Bwd>
Tensor unary_elementwise(const Tensor& a, const char* op, Fwd fwd, Bwd dfdx) {
  require_defined(a, op);
  const auto& in = OpBuilder::node(a);
  std::vector<double> out(in->value.size());
  std::transform(in->value.begin(), in->value.end(), out.begin(), fwd);
  Tensor result = OpBuilder::make(a.shape(), std::move(out), op);
  if (OpBuilder::tracking({&a})) {
    // dfdx receives (input, output) so ops like exp/tanh can reuse the output.
    OpBuilder::record(result, [in, dfdx](const Node& o) {
      accumulate(in, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(in->value[i], o.value[i]);
      });
    });
  }
  return result;
}

}  // namespace

// --- Tensor ----------------------------------------------------------------------

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return from(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
}

Tensor Tensor::filled(std::size_t rows, std::size_t cols, double value) {
  return from(rows, cols, std::vector<double>(rows * cols, value));
}

Tensor Tensor::from(std::size_t rows, std::size_t cols, std::vector<double> values,
                    bool requires_grad) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor extents must be positive, got " + to_string({rows, cols}));
  }
  if (values.size() != rows * cols) {
    throw DimensionError("tensor of shape " + to_string({rows, cols}) + " given " +
                         std::to_string(values.size()) + " values");
  }
  Tensor t = OpBuilder::make({rows, cols}, std::move(values), "tensor");
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return from(r, c, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(1, 1, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

Tensor Tensor::detach() const { return from(rows(), cols(), node_->value, false); }

// --- Tape --------------------------------------------------------------------------

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw UsageError("backward called twice without reset");
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw UsageError("backward requires a scalar loss, got " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw UsageError("backward: loss is not connected to the tape");
  consumed_ = true;

  auto& root = *loss.node_;
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it->output);
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

// --- linear algebra -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  const auto& an = OpBuilder::node(a);
  const auto& bn = OpBuilder::node(b);
  std::vector<double> out(a.rows() * b.cols());
  MutMap(out.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(b.cols()))
      .noalias() = as_matrix(*an) * as_matrix(*bn);
  Tensor result = OpBuilder::make({a.rows(), b.cols()}, std::move(out), "matmul");
  if (OpBuilder::tracking({&a, &b})) {
    OpBuilder::record(result, [an, bn](const Node& o) {
      ConstMap go(o.grad.data(), static_cast<Eigen::Index>(o.shape.rows),
                  static_cast<Eigen::Index>(o.shape.cols));
      accumulate(an, [&](std::vector<double>& g) {
        MutMap(g.data(), static_cast<Eigen::Index>(an->shape.rows),
               static_cast<Eigen::Index>(an->shape.cols))
            .noalias() += go * as_matrix(*bn).transpose();
      });
      accumulate(bn, [&](std::vector<double>& g) {
        MutMap(g.data(), static_cast<Eigen::Index>(bn->shape.rows),
               static_cast<Eigen::Index>(bn->shape.cols))
            .noalias() += as_matrix(*an).transpose() * go;
      });
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  const auto& an = OpBuilder::node(a);
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = an->value[i * c + j];
  Tensor result = OpBuilder::make({c, r}, std::move(out), "transpose");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an, r, c](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[j * r + i];
      });
    });
  }
  return result;
}

// --- elementwise ---------------------------------------------------------------------

namespace {

// sign_b = +1 for add, -1 for sub
Tensor add_or_sub(const Tensor& a, const Tensor& b, double sign_b, const char* op) {
  require_defined(a, op);
  require_defined(b, op);
  require_same_shape(a, b, op);
  const auto& an = OpBuilder::node(a);
  const auto& bn = OpBuilder::node(b);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] + sign_b * bn->value[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out), op);
  if (OpBuilder::tracking({&a, &b})) {
    OpBuilder::record(result, [an, bn, sign_b](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
      accumulate(bn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign_b * o.grad[i];
      });
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_or_sub(a, b, 1.0, "add"); }

Tensor sub(const Tensor& a, const Tensor& b) { return add_or_sub(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  const auto& an = OpBuilder::node(a);
  const auto& bn = OpBuilder::node(b);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * bn->value[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out), "mul");
  if (OpBuilder::tracking({&a, &b})) {
    OpBuilder::record(result, [an, bn](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
      });
      accumulate(bn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
      });
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  return unary_elementwise(
      a, "scale", [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary_elementwise(
      a, "add_scalar", [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_defined(a, "add_row");
  require_defined(row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: cannot broadcast " + to_string(row.shape()) + " over " +
                         to_string(a.shape()));
  }
  const auto& an = OpBuilder::node(a);
  const auto& rn = OpBuilder::node(row);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(an->value);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rn->value[j];
  Tensor result = OpBuilder::make(a.shape(), std::move(out), "add_row");
  if (OpBuilder::tracking({&a, &row})) {
    OpBuilder::record(result, [an, rn, m, n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
      accumulate(rn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
      });
    });
  }
  return result;
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  require_defined(a, "mul_col");
  require_defined(col, "mul_col");
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("mul_col: cannot broadcast " + to_string(col.shape()) + " over " +
                         to_string(a.shape()));
  }
  const auto& an = OpBuilder::node(a);
  const auto& cn = OpBuilder::node(col);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = an->value[i * n + j] * cn->value[i];
  Tensor result = OpBuilder::make(a.shape(), std::move(out), "mul_col");
  if (OpBuilder::tracking({&a, &col})) {
    OpBuilder::record(result, [an, cn, m, n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[i * n + j] * cn->value[i];
      });
      accumulate(cn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += o.grad[i * n + j] * an->value[i * n + j];
          g[i] += s;
        }
      });
    });
  }
  return result;
}

Tensor relu(const Tensor& a) {
  return unary_elementwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary_elementwise(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary_elementwise(
      a, "softplus",
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Tensor exp(const Tensor& a) {
  return unary_elementwise(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  require_defined(a, "log");
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input");
  }
  return unary_elementwise(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_elementwise(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// --- reductions -----------------------------------------------------------------------

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const auto& an = OpBuilder::node(a);
  const double s = std::accumulate(an->value.begin(), an->value.end(), 0.0);
  Tensor result = OpBuilder::make({1, 1}, {s}, "sum");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (double& v : g) v += o.grad[0];
      });
    });
  }
  return result;
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor row_sum(const Tensor& a) {
  require_defined(a, "row_sum");
  const auto& an = OpBuilder::node(a);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += an->value[i * n + j];
  Tensor result = OpBuilder::make({m, 1}, std::move(out), "row_sum");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an, m, n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[i];
      });
    });
  }
  return result;
}

// --- structure ------------------------------------------------------------------------

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row counts differ, " + to_string(parts.front().shape()) +
                           " vs " + to_string(p.shape()));
    }
    total += p.cols();
  }
  std::vector<double> out(m * total);
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pn = OpBuilder::node(p);
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pn->value.begin() + static_cast<std::ptrdiff_t>(i * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + off));
    nodes.push_back(pn);
    offsets.push_back(off);
    off += w;
  }
  Tensor result = OpBuilder::make({m, total}, std::move(out), "concat_cols");
  if (OpBuilder::tracking(parts)) {
    OpBuilder::record(result, [nodes, offsets, m, total](const Node& o) {
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const std::size_t w = nodes[k]->shape.cols;
        accumulate(nodes[k], [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += o.grad[i * total + offsets[k] + j];
        });
      }
    });
  }
  return result;
}

Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column counts differ, " +
                           to_string(parts.front().shape()) + " vs " + to_string(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * n);
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    const auto& pn = OpBuilder::node(p);
    out.insert(out.end(), pn->value.begin(), pn->value.end());
    nodes.push_back(pn);
  }
  Tensor result = OpBuilder::make({total, n}, std::move(out), "concat_rows");
  if (OpBuilder::tracking(parts)) {
    OpBuilder::record(result, [nodes](const Node& o) {
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        const std::size_t len = pn->value.size();
        accumulate(pn, [&](std::vector<double>& g) {
          for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
        });
        off += len;
      }
    });
  }
  return result;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_defined(a, "slice_cols");
  if (begin >= end || end > a.cols()) {
    throw DimensionError("slice_cols: bad range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") for " + to_string(a.shape()));
  }
  const auto& an = OpBuilder::node(a);
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = an->value[i * n + begin + j];
  Tensor result = OpBuilder::make({m, w}, std::move(out), "slice_cols");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an, m, n, w, begin](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += o.grad[i * w + j];
      });
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& a, std::span<const std::uint32_t> index) {
  require_defined(a, "gather_rows");
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  require_index_range(index, a.rows(), "gather_rows");
  const auto& an = OpBuilder::node(a);
  const std::size_t n = a.cols();
  std::vector<double> out(index.size() * n);
  for (std::size_t e = 0; e < index.size(); ++e)
    std::copy_n(an->value.begin() + static_cast<std::ptrdiff_t>(index[e] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(e * n));
  Tensor result = OpBuilder::make({index.size(), n}, std::move(out), "gather_rows");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an, idx = Index(index.begin(), index.end()), n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t e = 0; e < idx.size(); ++e)
          for (std::size_t j = 0; j < n; ++j) g[idx[e] * n + j] += o.grad[e * n + j];
      });
    });
  }
  return result;
}

Tensor segment_mean(const Tensor& a, std::span<const std::uint32_t> segment,
                    std::size_t n_segments) {
  require_defined(a, "segment_mean");
  if (segment.size() != a.rows()) {
    throw DimensionError("segment_mean: " + std::to_string(segment.size()) +
                         " segment ids for " + to_string(a.shape()));
  }
  require_index_range(segment, n_segments, "segment_mean");
  std::vector<double> counts(n_segments, 0.0);
  for (auto s : segment) counts[s] += 1.0;
  for (std::size_t s = 0; s < n_segments; ++s) {
    if (counts[s] == 0.0) throw InputError("segment_mean: empty segment " + std::to_string(s));
  }
  const auto& an = OpBuilder::node(a);
  const std::size_t n = a.cols();
  std::vector<double> out(n_segments * n, 0.0);
  for (std::size_t i = 0; i < segment.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[segment[i] * n + j] += an->value[i * n + j];
  for (std::size_t s = 0; s < n_segments; ++s)
    for (std::size_t j = 0; j < n; ++j) out[s * n + j] /= counts[s];
  Tensor result = OpBuilder::make({n_segments, n}, std::move(out), "segment_mean");
  if (OpBuilder::tracking({&a})) {
    OpBuilder::record(result, [an, seg = Index(segment.begin(), segment.end()), counts,
                               n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < seg.size(); ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[seg[i] * n + j] / counts[seg[i]];
      });
    });
  }
  return result;
}

Tensor softmax_rows(const Tensor& logits) {
  require_defined(logits, "softmax_rows");
  require_finite(logits.data(), "softmax_rows input");
  const auto& ln = OpBuilder::node(logits);
  const std::size_t m = logits.rows();
  const std::size_t n = logits.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = ln->value.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor result = OpBuilder::make(logits.shape(), std::move(out), "softmax_rows");
  if (OpBuilder::tracking({&logits})) {
    OpBuilder::record(result, [ln, m, n](const Node& o) {
      accumulate(ln, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += o.grad[i * n + j] * o.value[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            g[i * n + j] += o.value[i * n + j] * (o.grad[i * n + j] - dot);
        }
      });
    });
  }
  return result;
}

// --- sparse edge operations ---------------------------------------------------------------

Tensor edge_dot(const Tensor& a, const Tensor& b, std::span<const std::uint32_t> a_index,
                std::span<const std::uint32_t> b_index) {
  require_defined(a, "edge_dot");
  require_defined(b, "edge_dot");
  if (a.cols() != b.cols()) {
    throw DimensionError("edge_dot: feature widths differ, " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
  if (a_index.size() != b_index.size() || a_index.empty()) {
    throw DimensionError("edge_dot: index lists must be nonempty and of equal length");
  }
  require_index_range(a_index, a.rows(), "edge_dot");
  require_index_range(b_index, b.rows(), "edge_dot");
  const auto& an = OpBuilder::node(a);
  const auto& bn = OpBuilder::node(b);
  const std::size_t n = a.cols();
  const std::size_t edges = a_index.size();
  std::vector<double> out(edges);
  for (std::size_t e = 0; e < edges; ++e) {
    const double* ar = an->value.data() + a_index[e] * n;
    const double* br = bn->value.data() + b_index[e] * n;
    out[e] = dot(ar, br, n);
  }
  Tensor result = OpBuilder::make({edges, 1}, std::move(out), "edge_dot");
  if (OpBuilder::tracking({&a, &b})) {
    OpBuilder::record(result, [an, bn, ia = Index(a_index.begin(), a_index.end()),
                               ib = Index(b_index.begin(), b_index.end()), n](const Node& o) {
      accumulate(an, [&](std::vector<double>& g) {
        for (std::size_t e = 0; e < ia.size(); ++e) {
          const double ge = o.grad[e];
          const double* br = bn->value.data() + ib[e] * n;
          double* gr = g.data() + ia[e] * n;
          for (std::size_t j = 0; j < n; ++j) gr[j] += ge * br[j];
        }
      });
      accumulate(bn, [&](std::vector<double>& g) {
        for (std::size_t e = 0; e < ib.size(); ++e) {
          const double ge = o.grad[e];
          const double* ar = an->value.data() + ia[e] * n;
          double* gr = g.data() + ib[e] * n;
          for (std::size_t j = 0; j < n; ++j) gr[j] += ge * ar[j];
        }
      });
    });
  }
  return result;
}

Tensor segment_softmax(const Tensor& scores, std::span<const std::uint32_t> segment,
                       std::size_t n_segments) {
  require_defined(scores, "segment_softmax");
  require_finite(scores.data(), "segment_softmax input");
  if (scores.cols() != 1 || scores.rows() != segment.size()) {
    throw DimensionError("segment_softmax: expected " + std::to_string(segment.size()) +
                         "x1 scores, got " + to_string(scores.shape()));
  }
  require_index_range(segment, n_segments, "segment_softmax");
  const auto& sn = OpBuilder::node(scores);
  const std::size_t edges = segment.size();
  std::vector<double> mx(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t e = 0; e < edges; ++e) mx[segment[e]] = std::max(mx[segment[e]], sn->value[e]);
  std::vector<double> out(edges);
  std::vector<double> z(n_segments, 0.0);
  for (std::size_t e = 0; e < edges; ++e) {
    out[e] = std::exp(sn->value[e] - mx[segment[e]]);
    z[segment[e]] += out[e];
  }
  for (std::size_t e = 0; e < edges; ++e) out[e] /= z[segment[e]];
  Tensor result = OpBuilder::make({edges, 1}, std::move(out), "segment_softmax");
  if (OpBuilder::tracking({&scores})) {
    OpBuilder::record(result, [sn, seg = Index(segment.begin(), segment.end()),
                               n_segments](const Node& o) {
      accumulate(sn, [&](std::vector<double>& g) {
        std::vector<double> dot(n_segments, 0.0);
        for (std::size_t e = 0; e < seg.size(); ++e) dot[seg[e]] += o.grad[e] * o.value[e];
        for (std::size_t e = 0; e < seg.size(); ++e) g[e] += o.value[e] * (o.grad[e] - dot[seg[e]]);
      });
    });
  }
  return result;
}

Tensor spmm(const Tensor& weight, const Tensor& values, std::span<const std::uint32_t> dst,
            std::span<const std::uint32_t> src, std::size_t n_out) {
  require_defined(weight, "spmm");
  require_defined(values, "spmm");
  if (dst.size() != src.size() || weight.cols() != 1 || weight.rows() != dst.size()) {
    throw DimensionError("spmm: weight " + to_string(weight.shape()) + " does not match " +
                         std::to_string(dst.size()) + " edges");
  }
  require_index_range(dst, n_out, "spmm");
  require_index_range(src, values.rows(), "spmm");
  const auto& wn = OpBuilder::node(weight);
  const auto& vn = OpBuilder::node(values);
  const std::size_t n = values.cols();
  std::vector<double> out(n_out * n, 0.0);
  for (std::size_t e = 0; e < dst.size(); ++e) {
    const double w = wn->value[e];
    const double* vr = vn->value.data() + src[e] * n;
    double* orow = out.data() + dst[e] * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] += w * vr[j];
  }
  Tensor result = OpBuilder::make({n_out, n}, std::move(out), "spmm");
  if (OpBuilder::tracking({&weight, &values})) {
    OpBuilder::record(result, [wn, vn, d = Index(dst.begin(), dst.end()),
                               s = Index(src.begin(), src.end()), n](const Node& o) {
      accumulate(wn, [&](std::vector<double>& g) {
        for (std::size_t e = 0; e < d.size(); ++e) {
          const double* vr = vn->value.data() + s[e] * n;
          const double* gr = o.grad.data() + d[e] * n;
          g[e] += dot(gr, vr, n);
        }
      });
      accumulate(vn, [&](std::vector<double>& g) {
        for (std::size_t e = 0; e < d.size(); ++e) {
          const double w = wn->value[e];
          const double* gr = o.grad.data() + d[e] * n;
          double* vg = g.data() + s[e] * n;
          for (std::size_t j = 0; j < n; ++j) vg[j] += w * gr[j];
        }
      });
    });
  }
  return result;
}

// --- probabilistic terms ---------------------------------------------------------------------

namespace {
void require_positive(const Tensor& sigma, const char* op) {
  for (double s : sigma.data()) {
    if (!(s > 0.0)) throw DomainError(std::string(op) + ": sigma must be positive");
  }
}
}  // namespace

Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma) {
  require_defined(y, "gaussian_nll");
  require_defined(mu, "gaussian_nll");
  require_defined(sigma, "gaussian_nll");
  require_same_shape(y, mu, "gaussian_nll");
  require_same_shape(y, sigma, "gaussian_nll");
  require_positive(sigma, "gaussian_nll");
  const auto& yn = OpBuilder::node(y);
  const auto& mn = OpBuilder::node(mu);
  const auto& sn = OpBuilder::node(sigma);
  const std::size_t count = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double r = yn->value[i] - mn->value[i];
    const double s = sn->value[i];
    total += kHalfLog2Pi + std::log(s) + r * r / (2.0 * s * s);
  }
  Tensor result = OpBuilder::make({1, 1}, {total / static_cast<double>(count)}, "gaussian_nll");
  if (OpBuilder::tracking({&y, &mu, &sigma})) {
    OpBuilder::record(result, [yn, mn, sn, count](const Node& o) {
      const double g0 = o.grad[0] / static_cast<double>(count);
      auto residual_term = [&](std::size_t i) {
        const double s = sn->value[i];
        return (yn->value[i] - mn->value[i]) / (s * s);
      };
      accumulate(yn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) g[i] += g0 * residual_term(i);
      });
      accumulate(mn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) g[i] -= g0 * residual_term(i);
      });
      accumulate(sn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) {
          const double s = sn->value[i];
          const double r = yn->value[i] - mn->value[i];
          g[i] += g0 * (1.0 / s - r * r / (s * s * s));
        }
      });
    });
  }
  return result;
}

Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p,
                         const Tensor& sigma_p) {
  for (const Tensor* t : {&mu_q, &sigma_q, &mu_p, &sigma_p}) require_defined(*t, "kl_diag_gaussians");
  require_same_shape(mu_q, sigma_q, "kl_diag_gaussians");
  require_same_shape(mu_q, mu_p, "kl_diag_gaussians");
  require_same_shape(mu_q, sigma_p, "kl_diag_gaussians");
  require_positive(sigma_q, "kl_diag_gaussians");
  require_positive(sigma_p, "kl_diag_gaussians");
  const auto& mqn = OpBuilder::node(mu_q);
  const auto& sqn = OpBuilder::node(sigma_q);
  const auto& mpn = OpBuilder::node(mu_p);
  const auto& spn = OpBuilder::node(sigma_p);
  const std::size_t count = mu_q.size();
  const double inv_rows = 1.0 / static_cast<double>(mu_q.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double sq = sqn->value[i];
    const double sp = spn->value[i];
    const double d = mqn->value[i] - mpn->value[i];
    total += std::log(sp / sq) + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
  }
  // Rounding can leave a tiny negative residue for identical arguments.
  total = std::max(total, 0.0);
  Tensor result = OpBuilder::make({1, 1}, {total * inv_rows}, "kl_diag_gaussians");
  if (OpBuilder::tracking({&mu_q, &sigma_q, &mu_p, &sigma_p})) {
    OpBuilder::record(result, [mqn, sqn, mpn, spn, count, inv_rows](const Node& o) {
      const double g0 = o.grad[0] * inv_rows;
      accumulate(mqn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) {
          const double sp = spn->value[i];
          g[i] += g0 * (mqn->value[i] - mpn->value[i]) / (sp * sp);
        }
      });
      accumulate(mpn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) {
          const double sp = spn->value[i];
          g[i] -= g0 * (mqn->value[i] - mpn->value[i]) / (sp * sp);
        }
      });
      accumulate(sqn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) {
          const double sq = sqn->value[i];
          const double sp = spn->value[i];
          g[i] += g0 * (-1.0 / sq + sq / (sp * sp));
        }
      });
      accumulate(spn, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < count; ++i) {
          const double sq = sqn->value[i];
          const double sp = spn->value[i];
          const double d = mqn->value[i] - mpn->value[i];
          g[i] += g0 * (1.0 / sp - (sq * sq + d * d) / (sp * sp * sp));
        }
      });
    });
  }
  return result;
}

Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& noise) {
  require_defined(noise, "reparameterize");
  require_same_shape(mu, sigma, "reparameterize");
  require_same_shape(mu, noise, "reparameterize");
  return add(mu, mul(sigma, noise.detach()));
}

Index iota_index(std::size_t n) {
  Index idx(n);
  std::iota(idx.begin(), idx.end(), 0U);
  return idx;
}

}  // namespace ornet::ad
