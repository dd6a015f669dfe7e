#include "fsf/tensor.hpp"

#include <atomic>
#include <unordered_set>

namespace fsf {

namespace detail {

struct Node {
  Matrix data;
  Matrix grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  Value::BackwardFn backward;
};

namespace {
std::atomic<std::uint64_t> next_id{1};
thread_local bool tl_grad_enabled = true;
thread_local StopGradientTape* tl_tape = nullptr;
}  // namespace

}  // namespace detail

namespace {

void check_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) {
    throw NumericalError(std::string("non-finite value produced by ") + op);
  }
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace

Value Value::constant(Matrix data) {
  check_finite(data, "constant");
  auto node = std::make_shared<detail::Node>();
  node->data = std::move(data);
  node->id = detail::next_id++;
  return Value(std::move(node));
}

Value Value::parameter(Matrix data) {
  check_finite(data, "parameter");
  auto node = std::make_shared<detail::Node>();
  node->data = std::move(data);
  node->requires_grad = true;
  node->id = detail::next_id++;
  return Value(std::move(node));
}

Value Value::make(Matrix data, std::vector<Value> parents, BackwardFn backward, const char* op) {
  check_finite(data, op);
  auto node = std::make_shared<detail::Node>();
  node->data = std::move(data);
  node->id = detail::next_id++;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any && detail::tl_grad_enabled) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->backward = std::move(backward);
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
  }
  return Value(std::move(node));
}

const Matrix& Value::data() const {
  if (!node_) throw std::logic_error("Value: access to undefined value");
  return node_->data;
}

const Matrix& Value::grad() const {
  if (!node_) throw std::logic_error("Value: access to undefined value");
  return node_->grad;
}

Matrix& Value::mutable_data() {
  if (!node_) throw std::logic_error("Value: access to undefined value");
  return node_->data;
}

void Value::zero_grad() const {
  if (!node_) throw std::logic_error("Value: access to undefined value");
  node_->grad = Matrix::Zero(node_->data.rows(), node_->data.cols());
}

bool Value::requires_grad() const { return node_ && node_->requires_grad; }

std::uint64_t Value::id() const { return node_ ? node_->id : 0; }

double Value::item() const {
  const auto& d = data();
  if (d.size() != 1) throw std::invalid_argument("Value::item on non-scalar value");
  return d(0, 0);
}

void backward(const Value& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.data().size() != 1) throw std::invalid_argument("backward: loss must be scalar (1x1)");

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  visited.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) node->grad = Matrix::Zero(node->data.rows(), node->data.cols());
  loss.node_->grad(0, 0) = 1.0;

  std::vector<Matrix*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf || !node->backward) continue;
    slots.clear();
    for (auto& p : node->parents) slots.push_back(p->requires_grad ? &p->grad : nullptr);
    node->backward(node->grad, std::span<Matrix*>(slots));
  }
  for (auto* node : order) check_finite(node->grad, "backward");
}

NoGradGuard::NoGradGuard() : previous_(detail::tl_grad_enabled) { detail::tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::tl_grad_enabled = previous_; }

bool grad_enabled() { return detail::tl_grad_enabled; }

void StopGradientTape::set_mode(Mode mode) {
  mode_ = mode;
  cursor_ = 0;
}

Matrix StopGradientTape::next(const Matrix& live) {
  if (mode_ == Mode::Record) {
    entries_.push_back(live);
    return live;
  }
  if (cursor_ >= entries_.size()) throw std::logic_error("StopGradientTape: replay past end of tape");
  const Matrix& recorded = entries_[cursor_++];
  if (recorded.rows() != live.rows() || recorded.cols() != live.cols()) {
    throw std::logic_error("StopGradientTape: replay shape mismatch");
  }
  return recorded;
}

StopGradientTapeScope::StopGradientTapeScope(StopGradientTape& tape) : previous_(detail::tl_tape) {
  detail::tl_tape = &tape;
}
StopGradientTapeScope::~StopGradientTapeScope() { detail::tl_tape = previous_; }

Value stop_gradient(const Value& v) {
  if (detail::tl_tape) return Value::constant(detail::tl_tape->next(v.data()));
  return Value::constant(v.data());
}

Value detach(Matrix data) { return stop_gradient(Value::constant(std::move(data))); }

Value operator+(const Value& a, const Value& b) {
  check_same_shape(a, b, "add");
  return Value::make(a.data() + b.data(), {a, b},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g;
                       if (pg[1]) *pg[1] += g;
                     },
                     "add");
}

Value operator-(const Value& a, const Value& b) {
  check_same_shape(a, b, "sub");
  return Value::make(a.data() - b.data(), {a, b},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g;
                       if (pg[1]) *pg[1] -= g;
                     },
                     "sub");
}

Value operator*(const Value& a, const Value& b) {
  check_same_shape(a, b, "mul");
  return Value::make(a.data().cwiseProduct(b.data()), {a, b},
                     [a, b](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g.cwiseProduct(b.data());
                       if (pg[1]) *pg[1] += g.cwiseProduct(a.data());
                     },
                     "mul");
}

Value operator/(const Value& a, const Value& b) {
  check_same_shape(a, b, "div");
  return Value::make(a.data().cwiseQuotient(b.data()), {a, b},
                     [a, b](const Matrix& g, std::span<Matrix*> pg) {
                       const Matrix& bd = b.data();
                       if (pg[0]) *pg[0] += g.cwiseQuotient(bd);
                       if (pg[1]) *pg[1] -= g.cwiseProduct(a.data()).cwiseQuotient(bd.cwiseProduct(bd));
                     },
                     "div");
}

Value operator-(const Value& a) { return scale(a, -1.0); }

Value scale(const Value& a, double factor) {
  return Value::make(a.data() * factor, {a},
                     [factor](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g * factor;
                     },
                     "scale");
}

Value add_scalar(const Value& a, double offset) {
  return Value::make(a.data().array() + offset, {a},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g;
                     },
                     "add_scalar");
}

Value matmul(const Value& a, const Value& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix out = a.data() * b.data();
  // Operands are shared with the graph; capture the nodes' data by handle.
  return Value::make(std::move(out), {a, b},
                     [a, b](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) pg[0]->noalias() += g * b.data().transpose();
                       if (pg[1]) pg[1]->noalias() += a.data().transpose() * g;
                     },
                     "matmul");
}

Value add_row(const Value& a, const Value& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw std::invalid_argument("add_row: bias must be 1 x cols");
  Matrix out = a.data();
  out.rowwise() += bias.data().row(0);
  return Value::make(std::move(out), {a, bias},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g;
                       if (pg[1]) *pg[1] += g.colwise().sum();
                     },
                     "add_row");
}

Value mul_rows(const Value& a, const Value& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) throw std::invalid_argument("mul_rows: weight must be rows x 1");
  Matrix out = w.data().col(0).asDiagonal() * a.data();
  return Value::make(std::move(out), {a, w},
                     [a, w](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += w.data().col(0).asDiagonal() * g;
                       if (pg[1]) *pg[1] += g.cwiseProduct(a.data()).rowwise().sum();
                     },
                     "mul_rows");
}

Value repeat_rows(const Value& row, Index n) {
  if (row.rows() != 1) throw std::invalid_argument("repeat_rows: expected a single row");
  Matrix out = row.data().replicate(n, 1);
  return Value::make(std::move(out), {row},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g.colwise().sum();
                     },
                     "repeat_rows");
}

Value square(const Value& a) {
  return Value::make(a.data().array().square().matrix(), {a},
                     [a](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += 2.0 * g.cwiseProduct(a.data());
                     },
                     "square");
}

Value sqrt(const Value& a) {
  Matrix out = a.data().array().sqrt();
  Matrix root = out;
  return Value::make(std::move(out), {a},
                     [root = std::move(root)](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += (0.5 * g.array() / root.array()).matrix();
                     },
                     "sqrt");
}

Value silu(const Value& a) {
  Matrix x = a.data();
  Matrix sig = (1.0 / (1.0 + (-x.array()).exp())).matrix();
  Matrix out = x.cwiseProduct(sig);
  return Value::make(std::move(out), {a},
                     [x = std::move(x), sig = std::move(sig)](const Matrix& g, std::span<Matrix*> pg) {
                       if (!pg[0]) return;
                       // d/dx x*sig(x) = sig + x*sig*(1-sig)
                       auto d = sig.array() * (1.0 + x.array() * (1.0 - sig.array()));
                       *pg[0] += (g.array() * d).matrix();
                     },
                     "silu");
}

Value sum(const Value& a) {
  Matrix out(1, 1);
  out(0, 0) = a.data().sum();
  return Value::make(std::move(out), {a},
                     [](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) pg[0]->array() += g(0, 0);
                     },
                     "sum");
}

Value mean(const Value& a) {
  const double n = static_cast<double>(a.data().size());
  if (n == 0) throw std::invalid_argument("mean: empty value");
  return scale(sum(a), 1.0 / n);
}

Value row_sum(const Value& a) {
  Matrix out = a.data().rowwise().sum();
  const Index c = a.cols();
  return Value::make(std::move(out), {a},
                     [c](const Matrix& g, std::span<Matrix*> pg) {
                       if (pg[0]) *pg[0] += g.replicate(1, c);
                     },
                     "row_sum");
}

Value concat_cols(const std::vector<Value>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> widths;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleCols(offsets[i], parts[i].cols()) = parts[i].data();
    widths.push_back(parts[i].cols());
  }
  return Value::make(std::move(out), parts,
                     [offsets, widths](const Matrix& g, std::span<Matrix*> pg) {
                       for (std::size_t i = 0; i < pg.size(); ++i) {
                         if (pg[i]) *pg[i] += g.middleCols(offsets[i], widths[i]);
                       }
                     },
                     "concat_cols");
}

Value concat_cols(std::initializer_list<Value> parts) { return concat_cols(std::vector<Value>(parts)); }

Value gather_rows(const Value& table, std::span<const int> rows) {
  Matrix out(static_cast<Index>(rows.size()), table.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= table.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = table.data().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return Value::make(std::move(out), {table},
                     [idx = std::move(idx)](const Matrix& g, std::span<Matrix*> pg) {
                       if (!pg[0]) return;
                       for (std::size_t i = 0; i < idx.size(); ++i) pg[0]->row(idx[i]) += g.row(static_cast<Index>(i));
                     },
                     "gather_rows");
}

}  // namespace fsf
