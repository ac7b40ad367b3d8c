#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "nttlab/tensor.hpp"

namespace nttlab::nn {

/// Handle to a value recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Every op records its output and a backward rule;
/// `backward` walks the tape once in reverse recording order, so gradient
/// accumulation order is fixed. Parameters bound with `param` receive their
/// gradient (+=) when backward runs.
class Graph {
 public:
  /// With record_grad = false parameters bind as constants and no backward
  /// rules are kept (inference).
  explicit Graph(bool record_grad = true) : record_grad_(record_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Binding the same Parameter twice returns the same Var.
  Var param(Parameter& p);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_bt(Var a, Var b);
  Var add(Var a, Var b);
  /// x [n x d] + row [1 x d] broadcast over rows.
  Var add_row(Var x, Var row);
  Var relu(Var x);
  Var scale(Var x, double s);
  Var softmax_rows(Var x);
  Var layer_norm(Var x, Var gain, Var bias, double eps);
  /// Row-major reinterpretation; element count must match.
  Var reshape(Var x, std::size_t rows, std::size_t cols);
  Var slice_rows(Var x, std::size_t begin, std::size_t count);
  Var slice_cols(Var x, std::size_t begin, std::size_t count);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  /// Mean of squared differences, as a 1 x 1 tensor.
  Var mse(Var pred, Var target);
  Var sum(Var x);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Callable once per graph.
  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> back;
  };

  Var push(Tensor value, std::vector<int> inputs, std::function<void(Graph&, int)> back,
           const char* op);
  Tensor& grad_of(int id);
  bool needs(int id) const { return nodes_[id].requires_grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
  bool record_grad_ = true;
  bool backward_done_ = false;
};

}  // namespace nttlab::nn
