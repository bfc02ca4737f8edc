#pragma once

// Dense row-major 2-D tensors with a reverse-mode tape.
//
// Every tensor is a matrix (rows x cols); a scalar is 1x1 and a row vector is
// 1xn. Operations record themselves on the thread's active Tape only when at
// least one operand requires a gradient, so inference without a Tape costs
// nothing beyond the forward arithmetic.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ornet::ad {

using Index = std::vector<std::uint32_t>;

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  [[nodiscard]] std::size_t size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad();
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor filled(std::size_t rows, std::size_t cols, double value);
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  /// Shape as a list of extents, {rows, cols}.
  [[nodiscard]] std::vector<std::size_t> dims() const { return {rows(), cols()}; }
  [[nodiscard]] std::size_t rows() const { return node_->shape.rows; }
  [[nodiscard]] std::size_t cols() const { return node_->shape.cols; }
  [[nodiscard]] std::size_t size() const { return node_->shape.size(); }

  [[nodiscard]] std::span<const double> data() const { return node_->value; }
  [[nodiscard]] double at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }
  /// Value of a 1x1 tensor.
  [[nodiscard]] double item() const;

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span if nothing has been accumulated yet.
  [[nodiscard]] std::span<const double> grad() const { return node_->grad; }
  /// Sets the gradient to an all-zero buffer of the tensor's shape.
  void zero_grad();

  /// In-place write access for optimizers and checkpoint loading. Not tracked.
  [[nodiscard]] std::span<double> mutable_data() { return node_->value; }
  [[nodiscard]] std::span<double> mutable_grad();

  /// Same storage? Used by tests that audit parameter sharing.
  [[nodiscard]] bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Detached copy of the values, requires_grad off.
  [[nodiscard]] Tensor detach() const;

 private:
  friend class Tape;
  friend struct OpBuilder;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Records differentiable operations of the current thread while alive.
///
/// Tapes nest: constructing a Tape makes it the active one and the previous
/// tape is restored on destruction. backward() may be called once; call
/// reset() to discard the recording and record a fresh pass.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);
  void reset();

  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  friend struct OpBuilder;
  struct Entry {
    std::shared_ptr<detail::Node> output;
    std::function<void(const detail::Node&)> backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  Tape* previous_ = nullptr;
};

// --- linear algebra ---------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- elementwise (identical shapes) ------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

/// a (m x n) + v (1 x n) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// a (m x n) scaled per row by w (m x 1).
Tensor mul_col(const Tensor& a, const Tensor& col);

Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

// --- reductions --------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// m x n -> m x 1
Tensor row_sum(const Tensor& a);

// --- structure -----------------------------------------------------------------
/// Concatenate along the last axis; all parts share the row count.
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_cols(std::initializer_list<Tensor> parts);
/// Concatenate along the first axis; all parts share the column count.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// out[e] = a[index[e]]
Tensor gather_rows(const Tensor& a, std::span<const std::uint32_t> index);
/// Per-segment mean of rows; every segment in [0, n_segments) must be nonempty.
Tensor segment_mean(const Tensor& a, std::span<const std::uint32_t> segment,
                    std::size_t n_segments);

Tensor softmax_rows(const Tensor& logits);

// --- sparse edge operations ---------------------------------------------------------
/// out[e] = <a[a_index[e]], b[b_index[e]]>, an E x 1 column.
Tensor edge_dot(const Tensor& a, const Tensor& b, std::span<const std::uint32_t> a_index,
                std::span<const std::uint32_t> b_index);
/// Softmax of an E x 1 score column within each segment. Segments without
/// edges contribute nothing.
Tensor segment_softmax(const Tensor& scores, std::span<const std::uint32_t> segment,
                       std::size_t n_segments);
/// out[dst[e]] += weight[e] * values[src[e]]; out has n_out rows.
Tensor spmm(const Tensor& weight, const Tensor& values, std::span<const std::uint32_t> dst,
            std::span<const std::uint32_t> src, std::size_t n_out);

// --- probabilistic terms --------------------------------------------------------------
/// Mean over elements of 0.5 ln(2 pi) + ln sigma + (y - mu)^2 / (2 sigma^2).
Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& sigma);
/// KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over columns and
/// averaged over rows (one row per independent distribution).
Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p,
                         const Tensor& sigma_p);
/// mu + sigma * noise; noise is treated as a constant.
Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& noise);

/// 0, 1, ..., n-1
Index iota_index(std::size_t n);

}  // namespace ornet::ad
