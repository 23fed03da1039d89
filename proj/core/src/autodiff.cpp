#include "al3d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace al3d::ad {

namespace {

bool same_shape(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

bool broadcastable(const Mat& a, const Mat& b) {
  if (same_shape(a, b)) return true;
  if (a.size() == 1 || b.size() == 1) return true;
  if (a.rows() == 1 && a.cols() == b.cols()) return true;  // row against NxM
  if (b.rows() == 1 && b.cols() == a.cols()) return true;
  return false;
}

}  // namespace

ValueId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return ValueId{static_cast<int>(nodes_.size()) - 1};
}

ValueId Tape::constant(Mat value) {
  Node n;
  n.op = Op::Const;
  n.value = std::move(value);
  return push(std::move(n));
}

ValueId Tape::leaf(Mat value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

double Tape::scalar(ValueId v) const {
  const Mat& m = nodes_[v.id].value;
  if (m.size() != 1) throw std::invalid_argument("Tape::scalar: node is not 1x1");
  return m(0, 0);
}

Mat Tape::broadcast_to(const Mat& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  if (m.size() == 1) return Mat::Constant(rows, cols, m(0, 0));
  if (m.rows() == 1 && m.cols() == cols) return m.replicate(rows, 1);
  throw std::invalid_argument("Tape: incompatible broadcast");
}

Mat Tape::reduce_to(const Mat& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Mat::Constant(1, 1, g.sum());
  if (rows == 1 && cols == g.cols()) return g.colwise().sum();
  throw std::invalid_argument("Tape: incompatible gradient reduction");
}

ValueId Tape::binary(Op op, ValueId a, ValueId b) {
  const Node& na = nodes_[a.id];
  const Node& nb = nodes_[b.id];
  if (op == Op::MatMul) {
    if (na.value.cols() != nb.value.rows()) {
      throw std::invalid_argument("Tape: matmul inner dimensions disagree");
    }
  } else if (op == Op::Atan2) {
    if (!same_shape(na.value, nb.value)) {
      throw std::invalid_argument("Tape: atan2 operands must share a shape");
    }
  } else if (!broadcastable(na.value, nb.value)) {
    throw std::invalid_argument("Tape: incompatible operand shapes");
  }

  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.needs_grad = na.needs_grad || nb.needs_grad;
  switch (op) {
    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Eigen::Index rows = std::max(na.value.rows(), nb.value.rows());
      const Eigen::Index cols = std::max(na.value.cols(), nb.value.cols());
      const Mat va = broadcast_to(na.value, rows, cols);
      const Mat vb = broadcast_to(nb.value, rows, cols);
      if (op == Op::Add) n.value = va + vb;
      if (op == Op::Sub) n.value = va - vb;
      if (op == Op::Mul) n.value = va.cwiseProduct(vb);
      break;
    }
    case Op::MatMul:
      n.value = na.value * nb.value;
      break;
    case Op::Atan2: {
      n.value = Mat(na.value.rows(), na.value.cols());
      for (Eigen::Index i = 0; i < n.value.size(); ++i) {
        const double y = na.value(i);
        const double x = nb.value(i);
        n.value(i) = (y == 0.0 && x == 0.0) ? 0.0 : std::atan2(y, x);
      }
      break;
    }
    case Op::ConcatCols: {
      if (na.value.rows() != nb.value.rows()) {
        throw std::invalid_argument("Tape: concat_cols row counts disagree");
      }
      n.value = Mat(na.value.rows(), na.value.cols() + nb.value.cols());
      n.value << na.value, nb.value;
      break;
    }
    default:
      throw std::invalid_argument("Tape: unsupported binary op");
  }
  return push(std::move(n));
}

ValueId Tape::unary(Op op, ValueId a) {
  const Node& na = nodes_[a.id];
  Node n;
  n.op = op;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  switch (op) {
    case Op::Neg: n.value = -na.value; break;
    case Op::Relu: n.value = na.value.cwiseMax(0.0); break;
    case Op::Log: n.value = na.value.array().log(); break;
    case Op::Exp: n.value = na.value.array().exp(); break;
    case Op::Square: n.value = na.value.array().square(); break;
    case Op::Sin: n.value = na.value.array().sin(); break;
    case Op::Cos: n.value = na.value.array().cos(); break;
    case Op::Sum: n.value = Mat::Constant(1, 1, na.value.sum()); break;
    case Op::Mean: n.value = Mat::Constant(1, 1, na.value.mean()); break;
    case Op::RowwiseSum: n.value = na.value.rowwise().sum(); break;
    default: throw std::invalid_argument("Tape: unsupported unary op");
  }
  return push(std::move(n));
}

ValueId Tape::add(ValueId a, ValueId b) { return binary(Op::Add, a, b); }
ValueId Tape::sub(ValueId a, ValueId b) { return binary(Op::Sub, a, b); }
ValueId Tape::mul(ValueId a, ValueId b) { return binary(Op::Mul, a, b); }
ValueId Tape::matmul(ValueId a, ValueId b) { return binary(Op::MatMul, a, b); }
ValueId Tape::concat_cols(ValueId a, ValueId b) { return binary(Op::ConcatCols, a, b); }
ValueId Tape::atan2(ValueId y, ValueId x) { return binary(Op::Atan2, y, x); }
ValueId Tape::neg(ValueId a) { return unary(Op::Neg, a); }
ValueId Tape::relu(ValueId a) { return unary(Op::Relu, a); }
ValueId Tape::log(ValueId a) { return unary(Op::Log, a); }
ValueId Tape::exp(ValueId a) { return unary(Op::Exp, a); }
ValueId Tape::square(ValueId a) { return unary(Op::Square, a); }
ValueId Tape::sin(ValueId a) { return unary(Op::Sin, a); }
ValueId Tape::cos(ValueId a) { return unary(Op::Cos, a); }
ValueId Tape::sum(ValueId a) { return unary(Op::Sum, a); }
ValueId Tape::mean(ValueId a) { return unary(Op::Mean, a); }
ValueId Tape::rowwise_sum(ValueId a) { return unary(Op::RowwiseSum, a); }

ValueId Tape::colwise_max(ValueId a) {
  const Node& na = nodes_[a.id];
  if (na.value.rows() < 1) throw std::invalid_argument("Tape: colwise_max of empty matrix");
  Node n;
  n.op = Op::ColwiseMax;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  n.value = Mat(1, na.value.cols());
  n.routing.resize(na.value.cols());
  for (Eigen::Index j = 0; j < na.value.cols(); ++j) {
    int arg = 0;
    double best = na.value(0, j);
    for (Eigen::Index i = 1; i < na.value.rows(); ++i) {
      if (na.value(i, j) > best) {
        best = na.value(i, j);
        arg = static_cast<int>(i);
      }
    }
    n.value(0, j) = best;
    n.routing[j] = arg;
  }
  return push(std::move(n));
}

ValueId Tape::row_median(ValueId a) {
  const Node& na = nodes_[a.id];
  const Eigen::Index rows = na.value.rows();
  if (rows < 1) throw std::invalid_argument("Tape: row_median of empty matrix");
  Node n;
  n.op = Op::RowMedian;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  n.value = Mat(1, na.value.cols());
  n.routing.resize(2 * na.value.cols());
  std::vector<std::pair<double, int>> column(rows);
  for (Eigen::Index j = 0; j < na.value.cols(); ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      column[i] = {na.value(i, j), static_cast<int>(i)};
    }
    std::sort(column.begin(), column.end());
    const Eigen::Index hi = rows / 2;
    const Eigen::Index lo = (rows % 2 == 0) ? hi - 1 : hi;
    n.routing[2 * j] = column[lo].second;
    n.routing[2 * j + 1] = column[hi].second;
    n.value(0, j) = 0.5 * (column[lo].first + column[hi].first);
  }
  return push(std::move(n));
}

ValueId Tape::broadcast_row(ValueId a, int rows) {
  const Node& na = nodes_[a.id];
  if (na.value.rows() != 1) throw std::invalid_argument("Tape: broadcast_row needs a 1xM row");
  Node n;
  n.op = Op::BroadcastRow;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  n.value = na.value.replicate(rows, 1);
  return push(std::move(n));
}

ValueId Tape::clamp(ValueId a, double lo, double hi) {
  const Node& na = nodes_[a.id];
  Node n;
  n.op = Op::Clamp;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  n.lo = lo;
  n.hi = hi;
  n.value = na.value.cwiseMax(lo).cwiseMin(hi);
  return push(std::move(n));
}

ValueId Tape::select(ValueId a, int row, int col) {
  const Node& na = nodes_[a.id];
  if (row < 0 || col < 0 || row >= na.value.rows() || col >= na.value.cols()) {
    throw std::invalid_argument("Tape: select index out of range");
  }
  Node n;
  n.op = Op::Select;
  n.a = a.id;
  n.needs_grad = na.needs_grad;
  n.lo = row;
  n.hi = col;
  n.value = Mat::Constant(1, 1, na.value(row, col));
  return push(std::move(n));
}

ValueId Tape::softmax_cross_entropy(ValueId logits, int target) {
  const Node& na = nodes_[logits.id];
  if (na.value.rows() != 1) throw std::invalid_argument("Tape: softmax_ce needs a 1xK row");
  if (target < 0 || target >= na.value.cols()) {
    throw std::invalid_argument("Tape: softmax_ce target out of range");
  }
  Node n;
  n.op = Op::SoftmaxCE;
  n.a = logits.id;
  n.needs_grad = na.needs_grad;
  n.target = target;
  const double m = na.value.maxCoeff();
  Mat shifted = (na.value.array() - m).exp();
  const double z = shifted.sum();
  n.cached = shifted / z;  // softmax probabilities
  n.value = Mat::Constant(1, 1, m + std::log(z) - na.value(0, target));
  return push(std::move(n));
}

void Tape::reset_gradients() {
  for (Node& n : nodes_) n.grad.resize(0, 0);
}

void Tape::backward(ValueId output) {
  if (!output.valid() || output.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("Tape::backward: invalid output id");
  }
  Node& out = nodes_[output.id];
  if (out.value.size() != 1) {
    throw std::invalid_argument("Tape::backward: output must be 1x1");
  }
  for (Node& n : nodes_) {
    if (n.needs_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  if (!out.needs_grad) return;  // output does not depend on any leaf
  out.grad(0, 0) = 1.0;

  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    Node* pa = n.a >= 0 ? &nodes_[n.a] : nullptr;
    Node* pb = n.b >= 0 ? &nodes_[n.b] : nullptr;
    const bool ga = pa && pa->needs_grad;
    const bool gb = pb && pb->needs_grad;
    if (!ga && !gb) continue;
    const Mat& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::Const:
        break;
      case Op::Add:
        if (ga) pa->grad += reduce_to(g, pa->value.rows(), pa->value.cols());
        if (gb) pb->grad += reduce_to(g, pb->value.rows(), pb->value.cols());
        break;
      case Op::Sub:
        if (ga) pa->grad += reduce_to(g, pa->value.rows(), pa->value.cols());
        if (gb) pb->grad -= reduce_to(g, pb->value.rows(), pb->value.cols());
        break;
      case Op::Mul: {
        if (ga) {
          const Mat vb = broadcast_to(pb->value, g.rows(), g.cols());
          pa->grad += reduce_to(g.cwiseProduct(vb), pa->value.rows(), pa->value.cols());
        }
        if (gb) {
          const Mat va = broadcast_to(pa->value, g.rows(), g.cols());
          pb->grad += reduce_to(g.cwiseProduct(va), pb->value.rows(), pb->value.cols());
        }
        break;
      }
      case Op::MatMul:
        if (ga) pa->grad += g * pb->value.transpose();
        if (gb) pb->grad += pa->value.transpose() * g;
        break;
      case Op::Neg:
        if (ga) pa->grad -= g;
        break;
      case Op::Relu:
        if (ga) pa->grad += g.cwiseProduct((pa->value.array() > 0.0).cast<double>().matrix());
        break;
      case Op::Log:
        if (ga) pa->grad += g.cwiseQuotient(pa->value);
        break;
      case Op::Exp:
        if (ga) pa->grad += g.cwiseProduct(n.value);
        break;
      case Op::Square:
        if (ga) pa->grad += 2.0 * g.cwiseProduct(pa->value);
        break;
      case Op::Sin:
        if (ga) pa->grad += g.cwiseProduct(pa->value.array().cos().matrix());
        break;
      case Op::Cos:
        if (ga) pa->grad -= g.cwiseProduct(pa->value.array().sin().matrix());
        break;
      case Op::Atan2: {
        for (Eigen::Index i = 0; i < g.size(); ++i) {
          const double y = pa->value(i);
          const double x = pb->value(i);
          const double denom = x * x + y * y;
          if (denom == 0.0) continue;
          if (ga) pa->grad(i) += g(i) * x / denom;
          if (gb) pb->grad(i) -= g(i) * y / denom;
        }
        break;
      }
      case Op::Sum:
        if (ga) pa->grad.array() += g(0, 0);
        break;
      case Op::Mean:
        if (ga) pa->grad.array() += g(0, 0) / static_cast<double>(pa->value.size());
        break;
      case Op::RowwiseSum:
        if (ga) pa->grad += g.col(0).replicate(1, pa->value.cols());
        break;
      case Op::ColwiseMax:
        if (ga) {
          for (Eigen::Index j = 0; j < g.cols(); ++j) pa->grad(n.routing[j], j) += g(0, j);
        }
        break;
      case Op::RowMedian:
        if (ga) {
          for (Eigen::Index j = 0; j < g.cols(); ++j) {
            pa->grad(n.routing[2 * j], j) += 0.5 * g(0, j);
            pa->grad(n.routing[2 * j + 1], j) += 0.5 * g(0, j);
          }
        }
        break;
      case Op::BroadcastRow:
        if (ga) pa->grad += g.colwise().sum();
        break;
      case Op::ConcatCols:
        if (ga) pa->grad += g.leftCols(pa->value.cols());
        if (gb) pb->grad += g.rightCols(pb->value.cols());
        break;
      case Op::Clamp:
        if (ga) {
          const auto inside = (pa->value.array() > n.lo && pa->value.array() < n.hi);
          pa->grad += g.cwiseProduct(inside.cast<double>().matrix());
        }
        break;
      case Op::Select:
        if (ga) {
          pa->grad(static_cast<Eigen::Index>(n.lo), static_cast<Eigen::Index>(n.hi)) += g(0, 0);
        }
        break;
      case Op::SoftmaxCE:
        if (ga) {
          Mat d = n.cached;
          d(0, n.target) -= 1.0;
          pa->grad += g(0, 0) * d;
        }
        break;
    }
  }
}

}  // namespace al3d::ad
