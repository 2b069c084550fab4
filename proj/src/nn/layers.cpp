#include "dygrasp/nn/layers.hpp"

#include <cmath>

#include "dygrasp/error.hpp"

namespace dygrasp::nn {

Linear Linear::make(ParamSet& ps, const std::string& name, Eigen::Index in, Eigen::Index out,
                    std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = &ps.add(name + ".weight", glorot(in, out, rng));
  if (with_bias) l.bias = &ps.add(name + ".bias", Mat::Zero(1, out));
  return l;
}

Var Linear::operator()(Tape& t, Var x) const {
  Var y = t.matmul(x, t.param(*weight));
  return bias ? t.add_row(y, t.param(*bias)) : y;
}

LayerNorm LayerNorm::make(ParamSet& ps, const std::string& name, Eigen::Index dim) {
  LayerNorm n;
  n.gamma = &ps.add(name + ".gamma", Mat::Ones(1, dim));
  n.beta = &ps.add(name + ".beta", Mat::Zero(1, dim));
  return n;
}

Var LayerNorm::operator()(Tape& t, Var x) const {
  return t.layer_norm(x, t.param(*gamma), t.param(*beta));
}

Mlp Mlp::make(ParamSet& ps, const std::string& name, Eigen::Index in, Eigen::Index hidden,
              Eigen::Index out, std::mt19937_64& rng, double dropout) {
  Mlp m;
  m.hidden = Linear::make(ps, name + ".0", in, hidden, rng);
  m.output = Linear::make(ps, name + ".1", hidden, out, rng);
  m.dropout = dropout;
  return m;
}

Var Mlp::operator()(Tape& t, Var x, std::mt19937_64* train_rng) const {
  Var h = t.gelu(hidden(t, x));
  if (train_rng) h = t.dropout(h, dropout, *train_rng);
  return output(t, h);
}

MultiHeadAttention MultiHeadAttention::make(ParamSet& ps, const std::string& name,
                                            Eigen::Index q_in, Eigen::Index kv_in,
                                            Eigen::Index width, std::size_t heads,
                                            std::mt19937_64& rng) {
  if (heads == 0 || width % static_cast<Eigen::Index>(heads) != 0) {
    fail(ErrorKind::kInvalidConfig, "attention heads must divide width " + std::to_string(width));
  }
  MultiHeadAttention a;
  a.query = Linear::make(ps, name + ".q", q_in, width, rng);
  a.key = Linear::make(ps, name + ".k", kv_in, width, rng);
  a.value = Linear::make(ps, name + ".v", kv_in, width, rng);
  a.output = Linear::make(ps, name + ".o", width, width, rng);
  a.heads = heads;
  return a;
}

Var MultiHeadAttention::operator()(Tape& t, Var q_input, Var kv_input) const {
  return (*this)(t, q_input, kv_input, {{0, q_input.rows()}}, {{0, kv_input.rows()}});
}

Var MultiHeadAttention::operator()(Tape& t, Var q_input, Var kv_input,
                                   const std::vector<RowRange>& q_ranges,
                                   const std::vector<RowRange>& kv_ranges) const {
  Var q = query(t, q_input);
  Var k = key(t, kv_input);
  Var v = value(t, kv_input);
  const Eigen::Index width = q.cols();
  const Eigen::Index dh = width / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index at = static_cast<Eigen::Index>(h) * dh;
    Var qh = heads == 1 ? q : t.slice_cols(q, at, dh);
    Var kh = heads == 1 ? k : t.slice_cols(k, at, dh);
    Var vh = heads == 1 ? v : t.slice_cols(v, at, dh);
    outs.push_back(t.segment_attention(qh, kh, vh, q_ranges, kv_ranges, scale));
  }
  return output(t, heads == 1 ? outs[0] : t.concat_cols(outs));
}

TransformerBlock TransformerBlock::make(ParamSet& ps, const std::string& name,
                                        Eigen::Index width, std::size_t heads,
                                        std::size_t ffn_ratio, double dropout,
                                        std::mt19937_64& rng) {
  TransformerBlock b;
  b.norm1 = LayerNorm::make(ps, name + ".norm1", width);
  b.attention = MultiHeadAttention::make(ps, name + ".attn", width, width, width, heads, rng);
  b.norm2 = LayerNorm::make(ps, name + ".norm2", width);
  b.ffn = Mlp::make(ps, name + ".ffn", width, width * static_cast<Eigen::Index>(ffn_ratio),
                    width, rng, dropout);
  b.dropout = dropout;
  return b;
}

Var TransformerBlock::operator()(Tape& t, Var x, std::mt19937_64* train_rng) const {
  return (*this)(t, x, {{0, x.rows()}}, train_rng);
}

Var TransformerBlock::operator()(Tape& t, Var x, const std::vector<RowRange>& seqs,
                                 std::mt19937_64* train_rng) const {
  Var h = norm1(t, x);
  Var a = attention(t, h, h, seqs, seqs);
  if (train_rng) a = t.dropout(a, dropout, *train_rng);
  x = t.add(x, a);
  Var f = ffn(t, norm2(t, x), train_rng);
  if (train_rng) f = t.dropout(f, dropout, *train_rng);
  return t.add(x, f);
}

}  // namespace dygrasp::nn
