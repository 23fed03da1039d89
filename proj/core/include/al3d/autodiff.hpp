#pragma once

#include <vector>

#include <Eigen/Dense>

namespace al3d::ad {

using Mat = Eigen::MatrixXd;

/// Handle to a node on a Tape.
struct ValueId {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode automatic differentiation over a tape of matrix-valued
/// nodes. The graph is built eagerly (values are computed at construction)
/// and differentiated by a single reverse sweep from a scalar output.
/// Shape-incompatible operands fail at construction time.
///
/// Elementwise binary ops support same-shape operands plus two broadcast
/// forms: a 1x1 scalar against anything, and a 1xM row against NxM.
class Tape {
 public:
  Tape() = default;

  void reserve(size_t nodes) { nodes_.reserve(nodes); }
  size_t size() const { return nodes_.size(); }

  /// Leaf without gradient tracking.
  ValueId constant(Mat value);
  /// Leaf with gradient tracking (model parameter or network input).
  ValueId leaf(Mat value);

  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);  // elementwise
  ValueId matmul(ValueId a, ValueId b);
  ValueId neg(ValueId a);
  ValueId relu(ValueId a);
  ValueId log(ValueId a);
  ValueId exp(ValueId a);
  ValueId square(ValueId a);
  ValueId sin(ValueId a);
  ValueId cos(ValueId a);
  /// Elementwise atan2(y, x); both arguments zero yields value 0 and no
  /// gradient.
  ValueId atan2(ValueId y, ValueId x);

  ValueId sum(ValueId a);           // -> 1x1
  ValueId mean(ValueId a);          // -> 1x1
  ValueId rowwise_sum(ValueId a);   // NxM -> Nx1
  /// Column-wise max reduction; the gradient routes to the first argmax row
  /// of each column.
  ValueId colwise_max(ValueId a);   // NxM -> 1xM
  /// Per-column median with gradient routed to the realizing element(s);
  /// even row counts average the two middle elements.
  ValueId row_median(ValueId a);    // NxM -> 1xM
  ValueId broadcast_row(ValueId a, int rows);  // 1xM -> rowsxM
  ValueId concat_cols(ValueId a, ValueId b);
  ValueId clamp(ValueId a, double lo, double hi);
  ValueId select(ValueId a, int row, int col);  // -> 1x1
  /// Fused stable cross-entropy of a 1xK logit row against a target index:
  /// logsumexp(logits) - logits[target].
  ValueId softmax_cross_entropy(ValueId logits, int target);

  const Mat& value(ValueId v) const { return nodes_[v.id].value; }
  double scalar(ValueId v) const;

  /// Reverse sweep seeding d(output)/d(output) = 1. Output must be 1x1.
  /// Gradients accumulate; call reset_gradients() before reusing the tape
  /// for a second sweep.
  void backward(ValueId output);
  const Mat& gradient(ValueId v) const { return nodes_[v.id].grad; }
  void reset_gradients();
  void clear() { nodes_.clear(); }

 private:
  enum class Op : uint8_t {
    Leaf, Const, Add, Sub, Mul, MatMul, Neg, Relu, Log, Exp, Square, Sin, Cos,
    Atan2, Sum, Mean, RowwiseSum, ColwiseMax, RowMedian, BroadcastRow,
    ConcatCols, Clamp, Select, SoftmaxCE,
  };

  struct Node {
    Op op;
    int a = -1;
    int b = -1;
    Mat value;
    Mat grad;
    bool needs_grad = false;
    double lo = 0.0, hi = 0.0;   // Clamp bounds / Select row,col
    int target = -1;             // SoftmaxCE target
    std::vector<int> routing;    // ColwiseMax / RowMedian index routing
    Mat cached;                  // SoftmaxCE probabilities
  };

  ValueId push(Node node);
  const Node& at(ValueId v) const { return nodes_[v.id]; }
  ValueId binary(Op op, ValueId a, ValueId b);
  ValueId unary(Op op, ValueId a);
  static Mat broadcast_to(const Mat& m, Eigen::Index rows, Eigen::Index cols);
  static Mat reduce_to(const Mat& g, Eigen::Index rows, Eigen::Index cols);

  std::vector<Node> nodes_;
};

}  // namespace al3d::ad
