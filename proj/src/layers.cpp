#include "nttlab/layers.hpp"

#include <cmath>

#include "nttlab/error.hpp"

namespace nttlab::nn {

void init_uniform_fan_in(Parameter& W, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(W.value.rows()));
  for (auto& v : W.value.values()) v = rng.uniform(-bound, bound);
}

Linear::Linear(const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng)
    : W(name + ".W", Tensor({d_in, d_out})), b(name + ".b", Tensor({d_out})) {
  init_uniform_fan_in(W, rng);
}

LayerNormParams::LayerNormParams(const std::string& name, std::size_t d)
    : gain(name + ".gain", Tensor({d})), bias(name + ".bias", Tensor({d})) {
  gain.value.fill(1.0);
}

AttentionParams::AttentionParams(const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
    : n_heads(heads) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d) + " is not divisible by n_heads " +
                      std::to_string(heads));
  }
  q = Linear(name + ".q", d, d, rng);
  k = Linear(name + ".k", d, d, rng);
  v = Linear(name + ".v", d, d, rng);
  o = Linear(name + ".o", d, d, rng);
}

ParameterList AttentionParams::parameters() {
  return {&q.W, &q.b, &k.W, &k.b, &v.W, &v.b, &o.W, &o.b};
}

FeedForwardParams::FeedForwardParams(const std::string& name, std::size_t d, std::size_t d_ff, Rng& rng)
    : in(name + ".in", d, d_ff, rng), out(name + ".out", d_ff, d, rng) {}

ParameterList FeedForwardParams::parameters() { return {&in.W, &in.b, &out.W, &out.b}; }

Var linear_forward(Graph& g, Var x, Linear& layer) {
  const auto& X = g.value(x);
  if (X.cols() != layer.W.value.rows() || layer.b.value.size() != layer.W.value.cols()) {
    throw ShapeError("linear: input " + shape_string(X.shape()) + " does not match weight " +
                     shape_string(layer.W.value.shape()) + " / bias " + shape_string(layer.b.value.shape()));
  }
  return g.add_row(g.matmul(x, g.param(layer.W)), g.param(layer.b));
}

Var softmax(Graph& g, Var x) { return g.softmax_rows(x); }

Var layer_norm(Graph& g, Var x, LayerNormParams& p, double eps) {
  return g.layer_norm(x, g.param(p.gain), g.param(p.bias), eps);
}

Var multi_head_attention(Graph& g, Var x, AttentionParams& p, std::vector<Tensor>* weights) {
  const std::size_t d = g.value(x).cols();
  if (p.n_heads == 0 || d % p.n_heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d) + " is not divisible by n_heads " +
                      std::to_string(p.n_heads));
  }
  const std::size_t dh = d / p.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Var q = linear_forward(g, x, p.q);
  const Var k = linear_forward(g, x, p.k);
  const Var v = linear_forward(g, x, p.v);
  std::vector<Var> heads;
  heads.reserve(p.n_heads);
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    const Var qh = g.slice_cols(q, h * dh, dh);
    const Var kh = g.slice_cols(k, h * dh, dh);
    const Var vh = g.slice_cols(v, h * dh, dh);
    const Var a = g.softmax_rows(g.scale(g.matmul_bt(qh, kh), scale));
    if (weights != nullptr) weights->push_back(g.value(a));
    heads.push_back(g.matmul(a, vh));
  }
  const Var cat = p.n_heads == 1 ? heads[0] : g.concat_cols(heads);
  return linear_forward(g, cat, p.o);
}

Var feed_forward(Graph& g, Var x, FeedForwardParams& p) {
  return linear_forward(g, g.relu(linear_forward(g, x, p.in)), p.out);
}

Var mse_loss(Graph& g, Var pred, Var target) {
  if (g.value(pred).size() == 0) throw ShapeError("mse_loss: empty input");
  return g.mse(pred, target);
}

}  // namespace nttlab::nn
