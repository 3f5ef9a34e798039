#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace epidepth {

using Index = std::int64_t;
using ShapeVec = std::vector<Index>;

// Thrown when an operation's preconditions are violated.
class ContractViolation : public std::runtime_error {
 public:
  explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const ShapeVec& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

inline Index numel(const ShapeVec& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

class Tape;

namespace detail {
struct TensorData {
  ShapeVec shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized by Tape::backward for registered nodes
  Tape* tape = nullptr;
  int node = -1;
};
}  // namespace detail

// Dense N-d array of doubles with optional derivative tracking. Copies share
// the underlying storage; ops always allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(ShapeVec shape) {
    validate_shape(shape);
    d_ = std::make_shared<detail::TensorData>();
    d_->value.assign(static_cast<std::size_t>(numel(shape)), 0.0);
    d_->shape = std::move(shape);
  }

  Tensor(ShapeVec shape, std::vector<double> data) {
    validate_shape(shape);
    if (numel(shape) != static_cast<Index>(data.size()))
      throw ContractViolation("Tensor: shape " + shape_str(shape) + " does not match data length " +
                              std::to_string(data.size()));
    d_ = std::make_shared<detail::TensorData>();
    d_->shape = std::move(shape);
    d_->value = std::move(data);
  }

  static Tensor zeros(ShapeVec shape) { return Tensor(std::move(shape)); }

  static Tensor full(ShapeVec shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.d_->value) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(d_); }
  const ShapeVec& shape() const { return d_->shape; }
  Index rank() const { return static_cast<Index>(d_->shape.size()); }
  Index size() const { return static_cast<Index>(d_->value.size()); }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  std::vector<double>& values() { return d_->value; }
  const std::vector<double>& values() const { return d_->value; }

  double scalar_value() const {
    if (size() != 1)
      throw ContractViolation("scalar_value: tensor has shape " + shape_str(shape()));
    return d_->value[0];
  }

  bool tracked() const { return d_ && d_->tape != nullptr; }
  Tape* tape() const { return d_ ? d_->tape : nullptr; }
  int node() const { return d_ ? d_->node : -1; }

  // Gradient produced by the most recent backward pass.
  const std::vector<double>& grad() const {
    if (!d_ || d_->grad.size() != d_->value.size())
      throw ContractViolation("grad: no gradient present (run backward on a tape this tensor is attached to)");
    return d_->grad;
  }
  bool has_grad() const { return d_ && d_->grad.size() == d_->value.size(); }

  // Deep copy, never tracked.
  Tensor detached() const {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
  }

  const std::shared_ptr<detail::TensorData>& impl() const { return d_; }

 private:
  static void validate_shape(const ShapeVec& s) {
    if (s.empty()) throw ContractViolation("Tensor: rank-0 shapes are not supported");
    for (Index e : s)
      if (e < 1) throw ContractViolation("Tensor: non-positive extent in shape " + shape_str(s));
  }

  std::shared_ptr<detail::TensorData> d_;
};

// Straight-line record of recorded operations. Nodes are registered in
// creation order, so inputs always precede their consumers and a single
// reverse sweep visits every operation exactly once.
class Tape {
 public:
  struct Operation {
    std::vector<int> inputs;
    int output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  ~Tape() {
    for (auto& nd : nodes_)
      if (nd->tape == this) {
        nd->tape = nullptr;
        nd->node = -1;
      }
  }

  // Registers a leaf for gradient tracking.
  void attach_leaf(Tensor& t) {
    if (!t.defined()) throw ContractViolation("attach_leaf: undefined tensor");
    if (t.tracked()) throw ContractViolation("attach_leaf: tensor already attached to a tape");
    register_node(t);
  }

  // Registers an op output and its backward rule. `output` must be untracked;
  // tracked inputs must live on this tape.
  void record(const std::vector<Tensor>& inputs, Tensor& output, std::function<void()> backward) {
    std::vector<int> in_ids;
    in_ids.reserve(inputs.size());
    for (const Tensor& in : inputs) {
      if (in.tracked()) {
        if (in.tape() != this) throw ContractViolation("record: input belongs to a different tape");
        in_ids.push_back(in.node());
      } else {
        in_ids.push_back(-1);
      }
    }
    register_node(output);
    ops_.push_back(Operation{std::move(in_ids), output.node(), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays the record in reverse, populating
  // grad on every registered node. Untouched leaves end with zero gradient.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
      throw ContractViolation("backward: loss must be a scalar tensor");
    if (loss.tape() != this)
      throw ContractViolation("backward: loss is not recorded on this tape");
    for (auto& nd : nodes_) nd->grad.assign(nd->value.size(), 0.0);
    loss.impl()->grad[0] = 1.0;
    const int stop = loss.node();
    for (std::size_t k = ops_.size(); k-- > 0;) {
      if (ops_[k].output <= stop) ops_[k].backward();
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_operations() const { return ops_.size(); }
  const Operation& operation(std::size_t i) const { return ops_[i]; }

 private:
  void register_node(Tensor& t) {
    auto impl = t.impl();
    impl->tape = this;
    impl->node = static_cast<int>(nodes_.size());
    nodes_.push_back(impl);
  }

  std::vector<std::shared_ptr<detail::TensorData>> nodes_;
  std::vector<Operation> ops_;
};

namespace detail {

// Common tape of a set of operands; throws if two operands disagree.
inline Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tp = nullptr;
  for (const Tensor* t : ts) {
    if (t->defined() && t->tracked()) {
      if (tp && tp != t->tape()) throw ContractViolation("operands live on different tapes");
      tp = t->tape();
    }
  }
  return tp;
}

}  // namespace detail

}  // namespace epidepth
