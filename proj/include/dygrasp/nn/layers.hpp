#pragma once

#include <random>
#include <string>

#include "dygrasp/nn/tape.hpp"

namespace dygrasp::nn {

struct Linear {
  Param* weight = nullptr;  // in x out
  Param* bias = nullptr;    // 1 x out, absent when built without bias

  static Linear make(ParamSet& ps, const std::string& name, Eigen::Index in,
                     Eigen::Index out, std::mt19937_64& rng, bool with_bias = true);
  Var operator()(Tape& t, Var x) const;
  Eigen::Index in() const { return weight->value.rows(); }
  Eigen::Index out() const { return weight->value.cols(); }
};

struct LayerNorm {
  Param* gamma = nullptr;
  Param* beta = nullptr;

  static LayerNorm make(ParamSet& ps, const std::string& name, Eigen::Index dim);
  Var operator()(Tape& t, Var x) const;
};

// Two-layer perceptron with a GELU in between.
struct Mlp {
  Linear hidden;
  Linear output;
  double dropout = 0.0;

  static Mlp make(ParamSet& ps, const std::string& name, Eigen::Index in,
                  Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng,
                  double dropout = 0.0);
  Var operator()(Tape& t, Var x, std::mt19937_64* train_rng) const;
};

// Scaled dot-product attention with `heads` heads over a model width that
// the head count divides.
struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention make(ParamSet& ps, const std::string& name, Eigen::Index q_in,
                                 Eigen::Index kv_in, Eigen::Index width, std::size_t heads,
                                 std::mt19937_64& rng);
  Var operator()(Tape& t, Var q_input, Var kv_input) const;
  // Rows of q_ranges[i] attend to the rows of kv_ranges[i] only.
  Var operator()(Tape& t, Var q_input, Var kv_input, const std::vector<RowRange>& q_ranges,
                 const std::vector<RowRange>& kv_ranges) const;
};

// Pre-norm encoder block: x + Attn(LN(x)), then + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm norm1;
  MultiHeadAttention attention;
  LayerNorm norm2;
  Mlp ffn;
  double dropout = 0.0;

  static TransformerBlock make(ParamSet& ps, const std::string& name, Eigen::Index width,
                               std::size_t heads, std::size_t ffn_ratio, double dropout,
                               std::mt19937_64& rng);
  Var operator()(Tape& t, Var x, std::mt19937_64* train_rng) const;
  // Several sequences stacked row-wise; each attends within its own range.
  Var operator()(Tape& t, Var x, const std::vector<RowRange>& seqs,
                 std::mt19937_64* train_rng) const;
};

}  // namespace dygrasp::nn
