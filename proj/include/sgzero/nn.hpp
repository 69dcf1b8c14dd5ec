#pragma once

// Layer helpers over ParamStore/BoundParams. Parameters are registered under
// dotted names ("enc.L0.attn.q.w"); weights are stored input-major so a layer
// computes x * W + b for row-vector inputs.

#include <random>
#include <string>
#include <vector>

#include "sgzero/params.hpp"

namespace sgz::nn {

template <class Rng>
void add_linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  ps.add(name + ".w", init_uniform(in, out, in, rng));
  ps.add(name + ".b", init_uniform(1, out, in, rng));
}

inline Var linear(const BoundParams& p, const std::string& name, Var x) {
  return add_row(matmul(x, p[name + ".w"]), p[name + ".b"]);
}

inline void add_layer_norm(ParamStore& ps, const std::string& name, std::size_t dim) {
  ps.add(name + ".gain", Tensor({1, dim}, 1.0));
  ps.add(name + ".bias", Tensor({1, dim}, 0.0));
}

inline Var layer_norm(const BoundParams& p, const std::string& name, Var x) {
  return sgz::layer_norm(x, p[name + ".gain"], p[name + ".bias"]);
}

/// Two-layer MLP with LeakyReLU after each layer.
template <class Rng>
void add_mlp2(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden,
              std::size_t out, Rng& rng) {
  add_linear(ps, name + ".l1", in, hidden, rng);
  add_linear(ps, name + ".l2", hidden, out, rng);
}

inline Var mlp2(const BoundParams& p, const std::string& name, Var x, double slope) {
  return leaky_relu(linear(p, name + ".l2", leaky_relu(linear(p, name + ".l1", x), slope)), slope);
}

/// x * y = ReLU(Wx x + Wy y) - (Wx x - Wy y) o (Wx x - Wy y), row-wise.
inline Var star(Var x, Var y, Var wx, Var wy) {
  if (wx.cols() != wy.cols()) throw ShapeError("star: projected dimensions differ");
  Var a = matmul(x, wx);
  Var b = matmul(y, wy);
  Var d = sub(a, b);
  return sub(relu(add(a, b)), hadamard(d, d));
}

template <class Rng>
void add_star(ParamStore& ps, const std::string& name, std::size_t in_x, std::size_t in_y,
              std::size_t out, Rng& rng) {
  ps.add(name + ".wx", init_uniform(in_x, out, in_x, rng));
  ps.add(name + ".wy", init_uniform(in_y, out, in_y, rng));
}

inline Var star(const BoundParams& p, const std::string& name, Var x, Var y) {
  return star(x, y, p[name + ".wx"], p[name + ".wy"]);
}

// ---------------------------------------------------------------------------
// Pre-norm transformer encoder layer without positional encoding, so it is
// equivariant to permutations of its input rows.

struct EncoderShape {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t ff_dim = 64;
};

template <class Rng>
void add_encoder_layer(ParamStore& ps, const std::string& name, const EncoderShape& s, Rng& rng) {
  if (s.heads == 0 || s.dim % s.heads != 0) {
    throw std::invalid_argument("encoder: dim must be divisible by heads");
  }
  add_layer_norm(ps, name + ".ln1", s.dim);
  for (const char* proj : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
    add_linear(ps, name + proj, s.dim, s.dim, rng);
  }
  add_layer_norm(ps, name + ".ln2", s.dim);
  add_linear(ps, name + ".ff1", s.dim, s.ff_dim, rng);
  add_linear(ps, name + ".ff2", s.ff_dim, s.dim, rng);
}

inline Var multi_head_attention(const BoundParams& p, const std::string& name, Var x,
                                std::size_t heads) {
  Var q = linear(p, name + ".q", x);
  Var k = linear(p, name + ".k", x);
  Var v = linear(p, name + ".v", x);
  const std::size_t dh = q.cols() / heads;
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(scaled_dot_attention(slice_cols(q, h * dh, (h + 1) * dh),
                                        slice_cols(k, h * dh, (h + 1) * dh),
                                        slice_cols(v, h * dh, (h + 1) * dh)));
  }
  Var cat = heads == 1 ? outs[0] : concat_cols(outs);
  return linear(p, name + ".o", cat);
}

template <class Rng>
Var encoder_layer(const BoundParams& p, const std::string& name, Var x, std::size_t heads,
                  double dropout_rate, Rng* rng) {
  Var attn = multi_head_attention(p, name + ".attn", layer_norm(p, name + ".ln1", x), heads);
  if (rng) attn = dropout(attn, dropout_rate, *rng);
  x = add(x, attn);
  Var ff = linear(p, name + ".ff2", relu(linear(p, name + ".ff1", layer_norm(p, name + ".ln2", x))));
  if (rng) ff = dropout(ff, dropout_rate, *rng);
  return add(x, ff);
}

}  // namespace sgz::nn
