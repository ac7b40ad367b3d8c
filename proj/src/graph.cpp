#include "nttlab/graph.hpp"

#include <cmath>

#include "nttlab/error.hpp"

namespace nttlab::nn {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

Var Graph::push(Tensor value, std::vector<int> inputs, std::function<void(Graph&, int)> back,
                const char* op) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_of(int id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant: non-finite input");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Parameter& p) {
  if (!p.value.all_finite()) throw NumericError("parameter '" + p.name + "' holds non-finite values");
  if (auto it = bound_.find(&p); it != bound_.end()) return Var{it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = record_grad_;
  if (record_grad_) n.param = &p;
  nodes_.push_back(std::move(n));
  bound_.emplace(&p, static_cast<int>(nodes_.size()) - 1);
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Graph::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
  }
  Tensor out = Tensor::zeros(A.rows(), B.cols());
  out.mat().noalias() = A.mat() * B.mat();
  return push(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    const int ia = g.nodes_[self].inputs[0];
    const int ib = g.nodes_[self].inputs[1];
    const auto& G = g.nodes_[self].grad;
    if (g.needs(ia)) g.grad_of(ia).mat().noalias() += G.mat() * g.nodes_[ib].value.mat().transpose();
    if (g.needs(ib)) g.grad_of(ib).mat().noalias() += g.nodes_[ia].value.mat().transpose() * G.mat();
  }, "matmul");
}

Var Graph::matmul_bt(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.cols() != B.cols()) {
    throw ShapeError("matmul_bt: shape mismatch " + shape_string(A.shape()) + " x " +
                     shape_string(B.shape()) + "^T");
  }
  Tensor out = Tensor::zeros(A.rows(), B.rows());
  out.mat().noalias() = A.mat() * B.mat().transpose();
  return push(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    const int ia = g.nodes_[self].inputs[0];
    const int ib = g.nodes_[self].inputs[1];
    const auto& G = g.nodes_[self].grad;
    if (g.needs(ia)) g.grad_of(ia).mat().noalias() += G.mat() * g.nodes_[ib].value.mat();
    if (g.needs(ib)) g.grad_of(ib).mat().noalias() += G.mat().transpose() * g.nodes_[ia].value.mat();
  }, "matmul_bt");
}

Var Graph::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Tensor out = value(a);
  out.mat() += value(b).mat();
  return push(std::move(out), {a.id, b.id}, [](Graph& g, int self) {
    for (int i : g.nodes_[self].inputs) {
      if (g.needs(i)) g.grad_of(i).mat() += g.nodes_[self].grad.mat();
    }
  }, "add");
}

Var Graph::add_row(Var x, Var row) {
  const auto& X = value(x);
  const auto& R = value(row);
  if (R.size() != X.cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_string(X.shape()) + " + " + shape_string(R.shape()));
  }
  Tensor out = X;
  const ConstMatrixMap r(R.data(), 1, static_cast<Eigen::Index>(R.size()));
  out.mat().rowwise() += r.row(0);
  return push(std::move(out), {x.id, row.id}, [](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    const int ir = g.nodes_[self].inputs[1];
    const auto& G = g.nodes_[self].grad;
    if (g.needs(ix)) g.grad_of(ix).mat() += G.mat();
    if (g.needs(ir)) {
      auto& gr = g.grad_of(ir);
      MatrixMap m(gr.data(), 1, static_cast<Eigen::Index>(gr.size()));
      m.row(0) += G.mat().colwise().sum();
    }
  }, "add_row");
}

Var Graph::relu(Var x) {
  Tensor out = value(x);
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), {x.id}, [](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    const auto in = g.nodes_[ix].value.values();
    const auto G = g.nodes_[self].grad.values();
    auto dx = g.grad_of(ix).values();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (in[i] > 0.0) dx[i] += G[i];
    }
  }, "relu");
}

Var Graph::scale(Var x, double s) {
  Tensor out = value(x);
  out.mat() *= s;
  return push(std::move(out), {x.id}, [s](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    g.grad_of(ix).mat() += s * g.nodes_[self].grad.mat();
  }, "scale");
}

Var Graph::softmax_rows(Var x) {
  Tensor out = value(x);
  auto m = out.mat();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  return push(std::move(out), {x.id}, [](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    const auto Y = g.nodes_[self].value.mat();
    const auto G = g.nodes_[self].grad.mat();
    auto dx = g.grad_of(ix).mat();
    for (Eigen::Index r = 0; r < Y.rows(); ++r) {
      const double dot = Y.row(r).dot(G.row(r));
      dx.row(r).array() += Y.row(r).array() * (G.row(r).array() - dot);
    }
  }, "softmax");
}

Var Graph::layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto& X = value(x);
  const std::size_t d = X.cols();
  if (value(gain).size() != d || value(bias).size() != d) {
    throw ShapeError("layer_norm: gain/bias of shape " + shape_string(value(gain).shape()) + "/" +
                     shape_string(value(bias).shape()) + " for input " + shape_string(X.shape()));
  }
  // Normalised rows and per-row inverse std are kept for the backward pass.
  Tensor xhat = X;
  std::vector<double> inv_std(X.rows());
  auto h = xhat.mat();
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    const double mean = h.row(r).mean();
    h.row(r).array() -= mean;
    const double var = h.row(r).squaredNorm() / static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    h.row(r) *= inv_std[r];
  }
  const ConstMatrixMap gvec(value(gain).data(), 1, static_cast<Eigen::Index>(d));
  const ConstMatrixMap bvec(value(bias).data(), 1, static_cast<Eigen::Index>(d));
  Tensor out = xhat;
  auto o = out.mat();
  o.array().rowwise() *= gvec.row(0).array();
  o.rowwise() += bvec.row(0);
  return push(std::move(out), {x.id, gain.id, bias.id},
              [xhat = std::move(xhat), inv_std = std::move(inv_std), d](Graph& g, int self) {
                const int ix = g.nodes_[self].inputs[0];
                const int ig = g.nodes_[self].inputs[1];
                const int ib = g.nodes_[self].inputs[2];
                const auto G = g.nodes_[self].grad.mat();
                const auto H = xhat.mat();
                if (g.needs(ig)) {
                  auto& gg = g.grad_of(ig);
                  MatrixMap m(gg.data(), 1, static_cast<Eigen::Index>(d));
                  m.row(0) += (G.array() * H.array()).matrix().colwise().sum();
                }
                if (g.needs(ib)) {
                  auto& gb = g.grad_of(ib);
                  MatrixMap m(gb.data(), 1, static_cast<Eigen::Index>(d));
                  m.row(0) += G.colwise().sum();
                }
                if (g.needs(ix)) {
                  const ConstMatrixMap gvec(g.nodes_[ig].value.data(), 1, static_cast<Eigen::Index>(d));
                  auto dx = g.grad_of(ix).mat();
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (Eigen::Index r = 0; r < G.rows(); ++r) {
                    const Eigen::RowVectorXd dh = G.row(r).array() * gvec.row(0).array();
                    const double mean_dh = dh.sum() * inv_d;
                    const double mean_dh_h = dh.dot(H.row(r)) * inv_d;
                    dx.row(r).array() +=
                        inv_std[r] * (dh.array() - mean_dh - H.row(r).array() * mean_dh_h);
                  }
                }
              },
              "layer_norm");
}

Var Graph::reshape(Var x, std::size_t rows, std::size_t cols) {
  const auto& X = value(x);
  if (rows * cols != X.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(X.shape()) + " as " +
                     shape_string({rows, cols}));
  }
  Tensor out({rows, cols}, Buffer(X.values().begin(), X.values().end()));
  return push(std::move(out), {x.id}, [](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    const auto G = g.nodes_[self].grad.values();
    auto dx = g.grad_of(ix).values();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += G[i];
  }, "reshape");
}

Var Graph::slice_rows(Var x, std::size_t begin, std::size_t count) {
  const auto& X = value(x);
  if (begin + count > X.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of " + shape_string(X.shape()));
  }
  Tensor out = Tensor::zeros(count, X.cols());
  out.mat() = X.mat().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return push(std::move(out), {x.id}, [begin, count](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    g.grad_of(ix).mat().middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        g.nodes_[self].grad.mat();
  }, "slice_rows");
}

Var Graph::slice_cols(Var x, std::size_t begin, std::size_t count) {
  const auto& X = value(x);
  if (begin + count > X.cols()) {
    throw ShapeError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of " + shape_string(X.shape()));
  }
  Tensor out = Tensor::zeros(X.rows(), count);
  out.mat() = X.mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  return push(std::move(out), {x.id}, [begin, count](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    g.grad_of(ix).mat().middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
        g.nodes_[self].grad.mat();
  }, "slice_cols");
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  std::vector<int> ids;
  for (auto p : parts) {
    if (value(p).cols() != cols) {
      throw ShapeError("concat_rows: column mismatch " + shape_string(value(parts[0]).shape()) + " vs " +
                       shape_string(value(p).shape()));
    }
    rows += value(p).rows();
    ids.push_back(p.id);
  }
  Tensor out = Tensor::zeros(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    const auto& v = value(p);
    out.mat().middleRows(at, static_cast<Eigen::Index>(v.rows())) = v.mat();
    at += static_cast<Eigen::Index>(v.rows());
  }
  return push(std::move(out), std::move(ids), [](Graph& g, int self) {
    Eigen::Index at = 0;
    for (int i : g.nodes_[self].inputs) {
      const auto r = static_cast<Eigen::Index>(g.nodes_[i].value.rows());
      if (g.needs(i)) g.grad_of(i).mat() += g.nodes_[self].grad.mat().middleRows(at, r);
      at += r;
    }
  }, "concat_rows");
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  std::vector<int> ids;
  for (auto p : parts) {
    if (value(p).rows() != rows) {
      throw ShapeError("concat_cols: row mismatch " + shape_string(value(parts[0]).shape()) + " vs " +
                       shape_string(value(p).shape()));
    }
    cols += value(p).cols();
    ids.push_back(p.id);
  }
  Tensor out = Tensor::zeros(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    const auto& v = value(p);
    out.mat().middleCols(at, static_cast<Eigen::Index>(v.cols())) = v.mat();
    at += static_cast<Eigen::Index>(v.cols());
  }
  return push(std::move(out), std::move(ids), [](Graph& g, int self) {
    Eigen::Index at = 0;
    for (int i : g.nodes_[self].inputs) {
      const auto c = static_cast<Eigen::Index>(g.nodes_[i].value.cols());
      if (g.needs(i)) g.grad_of(i).mat() += g.nodes_[self].grad.mat().middleCols(at, c);
      at += c;
    }
  }, "concat_cols");
}

Var Graph::mse(Var pred, Var target) {
  const auto& P = value(pred);
  const auto& T = value(target);
  if (P.size() != T.size()) {
    throw ShapeError("mse: shape mismatch " + shape_string(P.shape()) + " vs " + shape_string(T.shape()));
  }
  if (P.size() == 0) throw ShapeError("mse: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = P.values()[i] - T.values()[i];
    acc += d * d;
  }
  const double n = static_cast<double>(P.size());
  return push(Tensor::scalar(acc / n), {pred.id, target.id}, [n](Graph& g, int self) {
    const int ip = g.nodes_[self].inputs[0];
    const int it = g.nodes_[self].inputs[1];
    const double G = g.nodes_[self].grad.item();
    const auto P = g.nodes_[ip].value.values();
    const auto T = g.nodes_[it].value.values();
    if (g.needs(ip)) {
      auto dp = g.grad_of(ip).values();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += G * 2.0 * (P[i] - T[i]) / n;
    }
    if (g.needs(it)) {
      auto dt = g.grad_of(it).values();
      for (std::size_t i = 0; i < dt.size(); ++i) dt[i] -= G * 2.0 * (P[i] - T[i]) / n;
    }
  }, "mse");
}

Var Graph::sum(Var x) {
  double acc = 0.0;
  for (double v : value(x).values()) acc += v;
  return push(Tensor::scalar(acc), {x.id}, [](Graph& g, int self) {
    const int ix = g.nodes_[self].inputs[0];
    const double G = g.nodes_[self].grad.item();
    for (auto& v : g.grad_of(ix).values()) v += G;
  }, "sum");
}

void Graph::backward(Var loss) {
  if (nodes_.empty() || !loss.valid() || loss.id >= static_cast<int>(nodes_.size())) {
    throw StateError("backward called before a forward pass was recorded");
  }
  if (!record_grad_) throw StateError("backward on a graph recorded without gradients");
  if (backward_done_) throw StateError("backward already ran on this graph; record a new forward pass");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(nodes_[loss.id].value.shape()));
  }
  backward_done_ = true;
  grad_of(loss.id).values()[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this, id);
    if (n.param != nullptr) {
      n.param->grad.mat() += n.grad.mat();
      n.param->grad_ready = true;
    }
  }
  // Parameters bound but unreachable from the loss still get a (zero) gradient.
  for (auto& n : nodes_) {
    if (n.param != nullptr) n.param->grad_ready = true;
  }
}

}  // namespace nttlab::nn
