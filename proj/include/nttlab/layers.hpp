#pragma once

#include <string>
#include <vector>

#include "nttlab/graph.hpp"
#include "nttlab/rng.hpp"

namespace nttlab::nn {

constexpr double kLayerNormEps = 1e-12;

/// y = xW + b with W [d_in x d_out], b [d_out].
struct Linear {
  Parameter W;
  Parameter b;

  Linear() = default;
  Linear(const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng);

  std::size_t d_in() const { return W.value.rows(); }
  std::size_t d_out() const { return W.value.cols(); }
  ParameterList parameters() { return {&W, &b}; }
};

struct LayerNormParams {
  Parameter gain;
  Parameter bias;

  LayerNormParams() = default;
  LayerNormParams(const std::string& name, std::size_t d);

  ParameterList parameters() { return {&gain, &bias}; }
};

/// Per-head projections are packed column-wise: head h owns columns
/// [h*d/H, (h+1)*d/H) of Wq, Wk and Wv.
struct AttentionParams {
  Linear q, k, v, o;
  std::size_t n_heads = 1;

  AttentionParams() = default;
  AttentionParams(const std::string& name, std::size_t d, std::size_t n_heads, Rng& rng);

  ParameterList parameters();
};

struct FeedForwardParams {
  Linear in, out;

  FeedForwardParams() = default;
  FeedForwardParams(const std::string& name, std::size_t d, std::size_t d_ff, Rng& rng);

  ParameterList parameters();
};

/// uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero bias.
void init_uniform_fan_in(Parameter& W, Rng& rng);

Var linear_forward(Graph& g, Var x, Linear& layer);
Var softmax(Graph& g, Var x);
Var layer_norm(Graph& g, Var x, LayerNormParams& p, double eps = kLayerNormEps);

/// Full self-attention over the rows of x. When `weights` is given, the
/// per-head attention matrices [n x n] are appended to it.
Var multi_head_attention(Graph& g, Var x, AttentionParams& p, std::vector<Tensor>* weights = nullptr);

Var feed_forward(Graph& g, Var x, FeedForwardParams& p);

Var mse_loss(Graph& g, Var pred, Var target);

}  // namespace nttlab::nn
