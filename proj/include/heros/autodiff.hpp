#pragma once

#include <Eigen/Core>

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace heros::ad {

using Eigen::Index;
using Matrix = Eigen::MatrixXd;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  MatMul,
  Conv1d,
  ConvTranspose1d,
  LeakyRelu,
  Tanh,
  Sigmoid,
  Softplus,
  Exp,
  Log,
  Pow,
  Abs,
  Sum,
  Mean,
  Dot,
  Concat,
  Slice,
  Transpose,
  Reshape,
  Scale,
  AddScalar,
  AddBias,
};

std::string_view op_name(OpKind kind);

/// Slope of leaky_relu for negative inputs.
inline constexpr double kLeakySlope = 0.2;

/// Geometry of a 1-D (transposed) convolution over a batch.
///
/// Activations are channels x (batch * length): the columns hold `batch`
/// independent sequences back to back, and the kernel never crosses them.
struct Conv1dSpec {
  Index kernel = 3;
  Index stride = 1;
  Index pad = 0;
  Index batch = 1;

  Index conv_out_len(Index in_len) const { return (in_len + 2 * pad - kernel) / stride + 1; }
  Index transpose_out_len(Index in_len) const { return (in_len - 1) * stride - 2 * pad + kernel; }
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid as long as the tape.
class Node {
 public:
  Node() = default;

  const Matrix& value() const;
  const Matrix& grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;  ///< value of a 1x1 node
  OpKind op() const;
  bool requires_grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Node(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Eager forward, taped reverse-mode backward.
///
/// Every operation computes its value immediately and appends a record; the
/// record order is a topological order, so backward() walks it in reverse.
/// Nodes that do not depend on any grad-requiring leaf carry no backward work.
/// A tape is confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Node leaf(Matrix value, bool requires_grad = true);
  Node constant(Matrix value) { return leaf(std::move(value), false); }
  Node scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  /// Propagate d(loss)/d(node) to every grad-requiring node. Leaf gradients
  /// accumulate across calls until zero_grad(); interior gradients are reset.
  void backward(Node loss);
  void zero_grad();

  std::size_t size() const { return records_.size(); }

 private:
  friend class Node;
  friend struct OpBuilder;

  using BackwardFn = std::function<void(Tape&, int)>;
  struct Record {
    Matrix value;
    Matrix grad;
    OpKind op = OpKind::Leaf;
    std::vector<int> parents;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node push(Matrix value, OpKind op, std::vector<int> parents, BackwardFn fn);
  Matrix& grad_of(int id);  // zero-allocates on first use
  const Record& record(int id) const { return records_[static_cast<std::size_t>(id)]; }

  std::vector<Record> records_;
};

// Elementwise arithmetic; shapes must match exactly.
Node add(Node a, Node b);
Node sub(Node a, Node b);
Node mul(Node a, Node b);
Node div(Node a, Node b);  ///< throws DomainError if any divisor is 0

Node matmul(Node a, Node b);

/// x: Cin x (batch*L), w: Cout x (Cin*kernel), column index ci*kernel + j.
Node conv1d(Node x, Node w, const Conv1dSpec& spec);
/// x: Cin x (batch*L), w: (Cout*kernel) x Cin, row index co*kernel + j.
Node conv_transpose1d(Node x, Node w, const Conv1dSpec& spec);

Node leaky_relu(Node x);
Node tanh(Node x);
Node sigmoid(Node x);
Node softplus(Node x);  ///< log(1 + e^x), overflow-safe
Node exp(Node x);
Node log(Node x);  ///< throws DomainError on entries <= 0
Node pow(Node x, double p);
Node abs(Node x);

Node sum(Node x);   ///< 1x1
Node mean(Node x);  ///< 1x1
Node dot(Node a, Node b);  ///< Frobenius inner product, 1x1

enum class Axis { Rows, Cols };
/// Axis::Rows stacks vertically, Axis::Cols side by side.
Node concat(std::span<const Node> parts, Axis axis);
Node slice(Node x, Index row, Index col, Index rows, Index cols);
Node transpose(Node x);
/// Column-major reshape; rows * cols must equal x.size().
Node reshape(Node x, Index rows, Index cols);

Node scale(Node x, double s);
Node add_scalar(Node x, double s);
/// x + bias broadcast along columns; bias is x.rows() x 1.
Node add_bias(Node x, Node bias);

inline Node operator+(Node a, Node b) { return add(a, b); }
inline Node operator-(Node a, Node b) { return sub(a, b); }
inline Node operator*(double s, Node x) { return scale(x, s); }
inline Node operator+(Node x, double s) { return add_scalar(x, s); }
inline Node operator-(Node x, double s) { return add_scalar(x, -s); }

/// Gradient checker: builds f on a fresh tape at `point`, compares the taped
/// gradient with central differences of step h.
struct GradCheckResult {
  double max_rel_error = 0.0;
  Matrix analytic;
  Matrix numeric;
};

using ScalarGraph = std::function<Node(Tape&, Node)>;

GradCheckResult grad_check(const ScalarGraph& f, const Matrix& point, double h = 1e-5);

}  // namespace heros::ad
