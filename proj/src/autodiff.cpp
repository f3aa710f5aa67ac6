#include "heros/autodiff.hpp"

#include "heros/error.hpp"

#include <cmath>
#include <sstream>

namespace heros::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::ConvTranspose1d: return "conv_transpose1d";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softplus: return "softplus";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Pow: return "pow";
    case OpKind::Abs: return "abs";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Dot: return "dot";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::AddBias: return "add_bias";
  }
  return "?";
}

const Matrix& Node::value() const { return tape_->record(id_).value; }

const Matrix& Node::grad() const {
  auto& rec = tape_->records_[static_cast<std::size_t>(id_)];
  if (rec.grad.size() != rec.value.size()) rec.grad = Matrix::Zero(rec.value.rows(), rec.value.cols());
  return rec.grad;
}

double Node::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on a non-scalar node");
  return v(0, 0);
}

OpKind Node::op() const { return tape_->record(id_).op; }
bool Node::requires_grad() const { return tape_->record(id_).requires_grad; }

Node Tape::leaf(Matrix value, bool requires_grad) {
  Record rec;
  rec.value = std::move(value);
  rec.requires_grad = requires_grad;
  records_.push_back(std::move(rec));
  return Node(this, static_cast<int>(records_.size()) - 1);
}

Node Tape::push(Matrix value, OpKind op, std::vector<int> parents, BackwardFn fn) {
  Record rec;
  rec.value = std::move(value);
  rec.op = op;
  for (int p : parents) rec.requires_grad = rec.requires_grad || record(p).requires_grad;
  if (rec.requires_grad) rec.backward = std::move(fn);
  rec.parents = std::move(parents);
  records_.push_back(std::move(rec));
  return Node(this, static_cast<int>(records_.size()) - 1);
}

Matrix& Tape::grad_of(int id) {
  auto& rec = records_[static_cast<std::size_t>(id)];
  if (rec.grad.size() != rec.value.size()) rec.grad = Matrix::Zero(rec.value.rows(), rec.value.cols());
  return rec.grad;
}

void Tape::backward(Node loss) {
  if (loss.tape() != this) throw ValidationError("backward: node belongs to another tape");
  if (loss.value().size() != 1) throw ValidationError("backward: loss must be scalar");
  if (!record(loss.id()).requires_grad) return;
  for (auto& rec : records_)
    if (rec.op != OpKind::Leaf && rec.requires_grad) rec.grad.setZero(rec.value.rows(), rec.value.cols());
  grad_of(loss.id())(0, 0) += 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    const auto& rec = records_[static_cast<std::size_t>(id)];
    if (rec.requires_grad && rec.backward) rec.backward(*this, id);
  }
}

void Tape::zero_grad() {
  for (auto& rec : records_)
    if (rec.grad.size()) rec.grad.setZero();
}

// Private access for the free operator functions.
struct OpBuilder {
  static Node push(Tape& t, Matrix v, OpKind op, std::vector<int> parents, Tape::BackwardFn fn) {
    return t.push(std::move(v), op, std::move(parents), std::move(fn));
  }
  static const Matrix& value(const Tape& t, int id) { return t.record(id).value; }
  static const Matrix& grad(const Tape& t, int id) { return t.record(id).grad; }
  static bool wants(const Tape& t, int id) { return t.record(id).requires_grad; }
  static Matrix& grad_of(Tape& t, int id) { return t.grad_of(id); }
  static int parent(const Tape& t, int id, std::size_t i) { return t.record(id).parents[i]; }
};

namespace {

using B = OpBuilder;

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Tape& same_tape(Node a, Node b, OpKind op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ValidationError(std::string(op_name(op)) + ": operands must live on the same tape");
  return *a.tape();
}

void require_same_shape(Node a, Node b, OpKind op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
}

// Accumulate `g` into parent i of node `self` if that parent wants gradients.
template <typename Expr>
void accumulate(Tape& t, int self, std::size_t i, const Expr& g) {
  const int p = B::parent(t, self, i);
  if (B::wants(t, p)) B::grad_of(t, p) += g;
}

// Unary elementwise op with derivative expressed from (input, output).
template <typename Fwd, typename Deriv>
Node unary(Node x, OpKind op, Fwd fwd, Deriv deriv) {
  Tape& t = *x.tape();
  Matrix out = fwd(x.value());
  return B::push(t, std::move(out), op, {x.id()}, [deriv](Tape& t, int self) {
    const Matrix& in = B::value(t, B::parent(t, self, 0));
    const Matrix& outv = B::value(t, self);
    accumulate(t, self, 0, B::grad(t, self).cwiseProduct(deriv(in, outv)));
  });
}

// Scatter/gather between a batched sequence matrix and its im2col expansion.
// cols(ci*k + j, b*out_len + o) <-> x(ci, b*in_len + o*stride - pad + j)
template <typename Visit>
void for_each_tap(Index channels, Index in_len, Index out_len, const Conv1dSpec& s, Visit visit) {
  for (Index b = 0; b < s.batch; ++b)
    for (Index o = 0; o < out_len; ++o) {
      const Index col = b * out_len + o;
      const Index base = o * s.stride - s.pad;
      for (Index j = 0; j < s.kernel; ++j) {
        const Index pos = base + j;
        if (pos < 0 || pos >= in_len) continue;
        const Index xcol = b * in_len + pos;
        for (Index ci = 0; ci < channels; ++ci) visit(ci * s.kernel + j, col, ci, xcol);
      }
    }
}

Matrix im2col(const Matrix& x, Index in_len, Index out_len, const Conv1dSpec& s) {
  Matrix cols = Matrix::Zero(x.rows() * s.kernel, s.batch * out_len);
  for_each_tap(x.rows(), in_len, out_len, s,
               [&](Index r, Index c, Index ci, Index xc) { cols(r, c) = x(ci, xc); });
  return cols;
}

void col2im_add(const Matrix& cols, Matrix& x, Index in_len, Index out_len, const Conv1dSpec& s) {
  for_each_tap(x.rows(), in_len, out_len, s,
               [&](Index r, Index c, Index ci, Index xc) { x(ci, xc) += cols(r, c); });
}

void check_spec(const Conv1dSpec& s, Index total_cols, const char* what) {
  if (s.kernel < 1 || s.stride < 1 || s.pad < 0 || s.batch < 1)
    throw ValidationError(std::string(what) + ": invalid kernel/stride/pad/batch");
  if (total_cols % s.batch != 0)
    throw ShapeError(std::string(what) + ": " + std::to_string(total_cols) + " columns do not split into " +
                     std::to_string(s.batch) + " sequences");
}

}  // namespace

Node add(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::Add);
  require_same_shape(a, b, OpKind::Add);
  return B::push(t, a.value() + b.value(), OpKind::Add, {a.id(), b.id()}, [](Tape& t, int self) {
    accumulate(t, self, 0, B::grad(t, self));
    accumulate(t, self, 1, B::grad(t, self));
  });
}

Node sub(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::Sub);
  require_same_shape(a, b, OpKind::Sub);
  return B::push(t, a.value() - b.value(), OpKind::Sub, {a.id(), b.id()}, [](Tape& t, int self) {
    accumulate(t, self, 0, B::grad(t, self));
    accumulate(t, self, 1, -B::grad(t, self));
  });
}

Node mul(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::Mul);
  require_same_shape(a, b, OpKind::Mul);
  return B::push(t, a.value().cwiseProduct(b.value()), OpKind::Mul, {a.id(), b.id()}, [](Tape& t, int self) {
    const Matrix& g = B::grad(t, self);
    accumulate(t, self, 0, g.cwiseProduct(B::value(t, B::parent(t, self, 1))));
    accumulate(t, self, 1, g.cwiseProduct(B::value(t, B::parent(t, self, 0))));
  });
}

Node div(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::Div);
  require_same_shape(a, b, OpKind::Div);
  if ((b.value().array() == 0.0).any()) throw DomainError("div: divisor has zero entries");
  return B::push(t, a.value().cwiseQuotient(b.value()), OpKind::Div, {a.id(), b.id()}, [](Tape& t, int self) {
    const Matrix& g = B::grad(t, self);
    const Matrix& bv = B::value(t, B::parent(t, self, 1));
    accumulate(t, self, 0, g.cwiseQuotient(bv));
    accumulate(t, self, 1, -g.cwiseProduct(B::value(t, self)).cwiseQuotient(bv));
  });
}

Node matmul(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::MatMul);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " * " + shape_str(b.value()));
  return B::push(t, a.value() * b.value(), OpKind::MatMul, {a.id(), b.id()}, [](Tape& t, int self) {
    const Matrix& g = B::grad(t, self);
    const int pa = B::parent(t, self, 0), pb = B::parent(t, self, 1);
    if (B::wants(t, pa)) B::grad_of(t, pa).noalias() += g * B::value(t, pb).transpose();
    if (B::wants(t, pb)) B::grad_of(t, pb).noalias() += B::value(t, pa).transpose() * g;
  });
}

Node conv1d(Node x, Node w, const Conv1dSpec& spec) {
  Tape& t = same_tape(x, w, OpKind::Conv1d);
  check_spec(spec, x.cols(), "conv1d");
  const Index in_len = x.cols() / spec.batch;
  if (w.cols() != x.rows() * spec.kernel)
    throw ShapeError("conv1d: weight " + shape_str(w.value()) + " does not match " + std::to_string(x.rows()) +
                     " input channels with kernel " + std::to_string(spec.kernel));
  const Index out_len = spec.conv_out_len(in_len);
  if (out_len < 1) throw ShapeError("conv1d: input length " + std::to_string(in_len) + " shorter than kernel");
  Matrix cols = im2col(x.value(), in_len, out_len, spec);
  Matrix out = w.value() * cols;
  const bool keep_cols = w.requires_grad();
  return B::push(t, std::move(out), OpKind::Conv1d, {x.id(), w.id()},
                 [spec, in_len, out_len, cols = keep_cols ? std::move(cols) : Matrix()](Tape& t, int self) {
                   const Matrix& g = B::grad(t, self);
                   const int px = B::parent(t, self, 0), pw = B::parent(t, self, 1);
                   if (B::wants(t, pw)) B::grad_of(t, pw).noalias() += g * cols.transpose();
                   if (B::wants(t, px)) {
                     Matrix dcols = B::value(t, pw).transpose() * g;
                     col2im_add(dcols, B::grad_of(t, px), in_len, out_len, spec);
                   }
                 });
}

Node conv_transpose1d(Node x, Node w, const Conv1dSpec& spec) {
  Tape& t = same_tape(x, w, OpKind::ConvTranspose1d);
  check_spec(spec, x.cols(), "conv_transpose1d");
  const Index in_len = x.cols() / spec.batch;
  if (w.cols() != x.rows() || w.rows() % spec.kernel != 0)
    throw ShapeError("conv_transpose1d: weight " + shape_str(w.value()) + " does not match " +
                     std::to_string(x.rows()) + " input channels with kernel " + std::to_string(spec.kernel));
  const Index out_ch = w.rows() / spec.kernel;
  const Index out_len = spec.transpose_out_len(in_len);
  if (out_len < 1) throw ShapeError("conv_transpose1d: empty output");
  // The transposed convolution is the adjoint of conv1d with the roles of the
  // input and output sequences swapped: expand, then scatter into the output.
  Matrix cols = w.value() * x.value();
  Matrix out = Matrix::Zero(out_ch, spec.batch * out_len);
  col2im_add(cols, out, out_len, in_len, spec);
  return B::push(t, std::move(out), OpKind::ConvTranspose1d, {x.id(), w.id()},
                 [spec, in_len, out_len](Tape& t, int self) {
                   const Matrix& g = B::grad(t, self);
                   const int px = B::parent(t, self, 0), pw = B::parent(t, self, 1);
                   Matrix dcols = im2col(g, out_len, in_len, spec);
                   if (B::wants(t, pw)) B::grad_of(t, pw).noalias() += dcols * B::value(t, px).transpose();
                   if (B::wants(t, px)) B::grad_of(t, px).noalias() += B::value(t, pw).transpose() * dcols;
                 });
}

Node leaky_relu(Node x) {
  return unary(
      x, OpKind::LeakyRelu, [](const Matrix& v) -> Matrix { return v.unaryExpr([](double a) { return a > 0 ? a : kLeakySlope * a; }); },
      [](const Matrix& in, const Matrix&) -> Matrix {
        return in.unaryExpr([](double a) { return a > 0 ? 1.0 : kLeakySlope; });
      });
}

Node tanh(Node x) {
  return unary(
      x, OpKind::Tanh, [](const Matrix& v) -> Matrix { return v.array().tanh().matrix(); },
      [](const Matrix&, const Matrix& out) -> Matrix { return (1.0 - out.array().square()).matrix(); });
}

Node sigmoid(Node x) {
  return unary(
      x, OpKind::Sigmoid,
      [](const Matrix& v) -> Matrix {
        return v.unaryExpr([](double a) {
          if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
          const double e = std::exp(a);
          return e / (1.0 + e);
        });
      },
      [](const Matrix&, const Matrix& out) -> Matrix { return (out.array() * (1.0 - out.array())).matrix(); });
}

Node softplus(Node x) {
  return unary(
      x, OpKind::Softplus,
      [](const Matrix& v) -> Matrix {
        return v.unaryExpr([](double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); });
      },
      [](const Matrix& in, const Matrix&) -> Matrix {
        return in.unaryExpr([](double a) {
          if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
          const double e = std::exp(a);
          return e / (1.0 + e);
        });
      });
}

Node exp(Node x) {
  return unary(
      x, OpKind::Exp, [](const Matrix& v) -> Matrix { return v.array().exp().matrix(); },
      [](const Matrix&, const Matrix& out) -> Matrix { return out; });
}

Node log(Node x) {
  if ((x.value().array() <= 0.0).any()) throw DomainError("log: argument has entries <= 0");
  return unary(
      x, OpKind::Log, [](const Matrix& v) -> Matrix { return v.array().log().matrix(); },
      [](const Matrix& in, const Matrix&) -> Matrix { return in.cwiseInverse(); });
}

Node pow(Node x, double p) {
  if (p != std::floor(p) && (x.value().array() < 0.0).any())
    throw DomainError("pow: negative base with non-integer exponent");
  if (p < 1.0 && (x.value().array() == 0.0).any()) throw DomainError("pow: zero base with exponent < 1");
  return unary(
      x, OpKind::Pow, [p](const Matrix& v) -> Matrix { return v.array().pow(p).matrix(); },
      [p](const Matrix& in, const Matrix&) -> Matrix { return (p * in.array().pow(p - 1.0)).matrix(); });
}

Node abs(Node x) {
  return unary(
      x, OpKind::Abs, [](const Matrix& v) -> Matrix { return v.cwiseAbs(); },
      [](const Matrix& in, const Matrix&) -> Matrix {
        return in.unaryExpr([](double a) { return a > 0 ? 1.0 : (a < 0 ? -1.0 : 0.0); });
      });
}

Node sum(Node x) {
  Tape& t = *x.tape();
  return B::push(t, Matrix::Constant(1, 1, x.value().sum()), OpKind::Sum, {x.id()}, [](Tape& t, int self) {
    accumulate(t, self, 0, Matrix::Constant(B::value(t, B::parent(t, self, 0)).rows(),
                                            B::value(t, B::parent(t, self, 0)).cols(), B::grad(t, self)(0, 0)));
  });
}

Node mean(Node x) {
  Tape& t = *x.tape();
  if (x.value().size() == 0) throw ShapeError("mean: empty input");
  return B::push(t, Matrix::Constant(1, 1, x.value().mean()), OpKind::Mean, {x.id()}, [](Tape& t, int self) {
    const Matrix& in = B::value(t, B::parent(t, self, 0));
    accumulate(t, self, 0,
               Matrix::Constant(in.rows(), in.cols(), B::grad(t, self)(0, 0) / static_cast<double>(in.size())));
  });
}

Node dot(Node a, Node b) {
  Tape& t = same_tape(a, b, OpKind::Dot);
  require_same_shape(a, b, OpKind::Dot);
  const double v = a.value().cwiseProduct(b.value()).sum();
  return B::push(t, Matrix::Constant(1, 1, v), OpKind::Dot, {a.id(), b.id()}, [](Tape& t, int self) {
    const double g = B::grad(t, self)(0, 0);
    accumulate(t, self, 0, g * B::value(t, B::parent(t, self, 1)));
    accumulate(t, self, 1, g * B::value(t, B::parent(t, self, 0)));
  });
}

Node concat(std::span<const Node> parts, Axis axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts.front().tape();
  Index rows = 0, cols = 0;
  std::vector<int> ids;
  for (const Node& p : parts) {
    same_tape(parts.front(), p, OpKind::Concat);
    if (axis == Axis::Rows) {
      if (p.cols() != parts.front().cols()) throw ShapeError("concat: column counts differ");
      rows += p.rows();
      cols = p.cols();
    } else {
      if (p.rows() != parts.front().rows()) throw ShapeError("concat: row counts differ");
      cols += p.cols();
      rows = p.rows();
    }
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  Index off = 0;
  for (const Node& p : parts) {
    if (axis == Axis::Rows) {
      out.middleRows(off, p.rows()) = p.value();
      off += p.rows();
    } else {
      out.middleCols(off, p.cols()) = p.value();
      off += p.cols();
    }
  }
  const std::size_t n = parts.size();
  return B::push(t, std::move(out), OpKind::Concat, std::move(ids), [axis, n](Tape& t, int self) {
    const Matrix& g = B::grad(t, self);
    Index off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Matrix& pv = B::value(t, B::parent(t, self, i));
      if (axis == Axis::Rows) {
        accumulate(t, self, i, g.middleRows(off, pv.rows()));
        off += pv.rows();
      } else {
        accumulate(t, self, i, g.middleCols(off, pv.cols()));
        off += pv.cols();
      }
    }
  });
}

Node slice(Node x, Index row, Index col, Index rows, Index cols) {
  if (row < 0 || col < 0 || rows < 1 || cols < 1 || row + rows > x.rows() || col + cols > x.cols())
    throw ShapeError("slice: block (" + std::to_string(row) + "," + std::to_string(col) + ") " + std::to_string(rows) +
                     "x" + std::to_string(cols) + " outside " + shape_str(x.value()));
  Tape& t = *x.tape();
  return B::push(t, x.value().block(row, col, rows, cols), OpKind::Slice, {x.id()},
                 [row, col, rows, cols](Tape& t, int self) {
                   const int p = B::parent(t, self, 0);
                   if (B::wants(t, p)) B::grad_of(t, p).block(row, col, rows, cols) += B::grad(t, self);
                 });
}

Node transpose(Node x) {
  Tape& t = *x.tape();
  return B::push(t, x.value().transpose(), OpKind::Transpose, {x.id()},
                 [](Tape& t, int self) { accumulate(t, self, 0, B::grad(t, self).transpose()); });
}

Node reshape(Node x, Index rows, Index cols) {
  if (rows < 1 || cols < 1 || rows * cols != x.value().size())
    throw ShapeError("reshape: cannot view " + shape_str(x.value()) + " as " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  Tape& t = *x.tape();
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return B::push(t, std::move(out), OpKind::Reshape, {x.id()}, [](Tape& t, int self) {
    const Matrix& in = B::value(t, B::parent(t, self, 0));
    const Matrix& g = B::grad(t, self);
    accumulate(t, self, 0, Eigen::Map<const Matrix>(g.data(), in.rows(), in.cols()));
  });
}

Node scale(Node x, double s) {
  Tape& t = *x.tape();
  return B::push(t, s * x.value(), OpKind::Scale, {x.id()},
                 [s](Tape& t, int self) { accumulate(t, self, 0, s * B::grad(t, self)); });
}

Node add_scalar(Node x, double s) {
  Tape& t = *x.tape();
  return B::push(t, (x.value().array() + s).matrix(), OpKind::AddScalar, {x.id()},
                 [](Tape& t, int self) { accumulate(t, self, 0, B::grad(t, self)); });
}

Node add_bias(Node x, Node bias) {
  Tape& t = same_tape(x, bias, OpKind::AddBias);
  if (bias.cols() != 1 || bias.rows() != x.rows())
    throw ShapeError("add_bias: bias " + shape_str(bias.value()) + " does not match " + shape_str(x.value()));
  Matrix out = x.value().colwise() + bias.value().col(0);
  return B::push(t, std::move(out), OpKind::AddBias, {x.id(), bias.id()}, [](Tape& t, int self) {
    const Matrix& g = B::grad(t, self);
    accumulate(t, self, 0, g);
    accumulate(t, self, 1, g.rowwise().sum());
  });
}

GradCheckResult grad_check(const ScalarGraph& f, const Matrix& point, double h) {
  GradCheckResult r;
  {
    Tape tape;
    Node x = tape.leaf(point);
    Node loss = f(tape, x);
    tape.backward(loss);
    r.analytic = x.grad();
  }
  auto eval = [&](const Matrix& p) {
    Tape tape;
    Node x = tape.leaf(p, false);
    return f(tape, x).scalar();
  };
  r.numeric.resize(point.rows(), point.cols());
  Matrix p = point;
  for (Index i = 0; i < point.size(); ++i) {
    const double orig = p(i);
    p(i) = orig + h;
    const double up = eval(p);
    p(i) = orig - h;
    const double down = eval(p);
    p(i) = orig;
    r.numeric(i) = (up - down) / (2.0 * h);
    r.max_rel_error = std::max(r.max_rel_error, std::abs(r.analytic(i) - r.numeric(i)) / (std::abs(r.analytic(i)) + 1e-8));
  }
  return r;
}

}  // namespace heros::ad
