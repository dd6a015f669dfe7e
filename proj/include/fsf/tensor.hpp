#pragma once

// Define-by-run reverse-mode differentiation over dense row-major matrices.
//
// Every Value is a 2-D block (rows = batch, cols = features); scalars are 1x1.
// A graph is built as operations are applied and released when the last
// handle to its root is dropped.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fsf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;
using Vector = Eigen::VectorXd;

/// Raised whenever a forward or backward pass produces NaN or Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node;
}

class Value {
 public:
  Value() = default;

  static Value constant(Matrix data);
  static Value parameter(Matrix data);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& data() const;
  const Matrix& grad() const;
  bool requires_grad() const;
  Index rows() const { return data().rows(); }
  Index cols() const { return data().cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  std::uint64_t id() const;
  /// Value of a 1x1 block.
  double item() const;

  // Parameter leaves are updated in place by optimizers.
  Matrix& mutable_data();
  void zero_grad() const;

  using BackwardFn = std::function<void(const Matrix& grad_out, std::span<Matrix*> parent_grads)>;

  /// Creates an interior node. `backward` receives the upstream gradient and
  /// one accumulator per parent (nullptr where that parent needs no gradient).
  static Value make(Matrix data, std::vector<Value> parents, BackwardFn backward, const char* op);

 private:
  explicit Value(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend void backward(const Value& loss);
  friend class ParamStore;
};

/// Runs reverse accumulation from a 1x1 root. Every node reachable from
/// `loss` receives a freshly zeroed gradient before accumulation.
void backward(const Value& loss);

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Forward value is passed through untouched; no gradient flows back.
Value stop_gradient(const Value& v);
/// Brings externally computed data into a graph as a gradient-opaque leaf.
Value detach(Matrix data);

/// Test instrument: records the data of every stop_gradient/detach call in
/// order, then replays it. Used to take finite differences of a loss while
/// holding its stop-gradient branches fixed at their recorded values.
class StopGradientTape {
 public:
  enum class Mode { Record, Replay };

  void set_mode(Mode mode);
  Mode mode() const { return mode_; }
  std::size_t size() const { return entries_.size(); }

 private:
  friend Value stop_gradient(const Value& v);
  Matrix next(const Matrix& live);

  Mode mode_ = Mode::Record;
  std::vector<Matrix> entries_;
  std::size_t cursor_ = 0;
};

/// Installs a tape on the current thread for its lifetime.
class StopGradientTapeScope {
 public:
  explicit StopGradientTapeScope(StopGradientTape& tape);
  ~StopGradientTapeScope();
  StopGradientTapeScope(const StopGradientTapeScope&) = delete;
  StopGradientTapeScope& operator=(const StopGradientTapeScope&) = delete;

 private:
  StopGradientTape* previous_;
};

// Elementwise arithmetic (identical shapes).
Value operator+(const Value& a, const Value& b);
Value operator-(const Value& a, const Value& b);
Value operator*(const Value& a, const Value& b);
Value operator/(const Value& a, const Value& b);
Value operator-(const Value& a);
Value scale(const Value& a, double factor);
Value add_scalar(const Value& a, double offset);

Value matmul(const Value& a, const Value& b);
/// a (n x c) + bias (1 x c) broadcast over rows.
Value add_row(const Value& a, const Value& bias);
/// Scales row i of a (n x c) by w(i) for w of shape n x 1.
Value mul_rows(const Value& a, const Value& w);
/// Broadcasts a 1 x c row to n rows.
Value repeat_rows(const Value& row, Index n);

Value square(const Value& a);
Value sqrt(const Value& a);
Value silu(const Value& a);

Value sum(const Value& a);
Value mean(const Value& a);
/// Per-row sum: n x c -> n x 1.
Value row_sum(const Value& a);

Value concat_cols(std::initializer_list<Value> parts);
Value concat_cols(const std::vector<Value>& parts);
/// Row lookup into an embedding table.
Value gather_rows(const Value& table, std::span<const int> rows);

}  // namespace fsf
