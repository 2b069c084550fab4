#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace dygrasp::nn {

using Mat = Eigen::MatrixXd;

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

// Owns parameters in declaration order; addresses are stable.
class ParamSet {
 public:
  Param& add(std::string name, Mat init);
  std::deque<Param>& params() { return params_; }
  const std::deque<Param>& params() const { return params_; }
  Param* find(std::string_view name);
  std::size_t num_scalars() const;
  void zero_grad();

 private:
  std::deque<Param> params_;
};

class Tape;

// A run of consecutive rows; several of them describe a batch of
// variable-length sequences stacked into one matrix.
struct RowRange {
  Eigen::Index first = 0;
  Eigen::Index count = 0;
};

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode autodiff over dense double matrices. Build the graph with
// the ops below, then call backward() on a 1x1 result; gradients are added
// into Param::grad.
class Tape {
 public:
  // With grad=false parameters enter as constants and nothing is recorded
  // for backward.
  explicit Tape(bool grad = true) : grad_(grad) {}

  Var constant(Mat value);
  // Each parameter is bound once per tape.
  Var param(Param& p);

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var add_row(Var a, Var row);  // broadcast a 1xn row over a's rows
  Var scale(Var a, double s);
  Var mul(Var a, Var b);  // elementwise
  Var concat_cols(const std::vector<Var>& parts);
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);
  Var slice_rows(Var a, Eigen::Index first, Eigen::Index count);
  Var mean_rows(Var a);
  // Row i of the result is a.row(index[i]); indices may repeat.
  Var gather_rows(Var a, std::vector<Eigen::Index> index);
  // One output row per range: the mean of its rows, or zeros when empty.
  Var segment_mean(Var a, std::vector<RowRange> ranges);
  // Scaled dot-product attention where the rows of q_ranges[i] attend only
  // to the rows of kv_ranges[i]. Query rows outside every range, or whose
  // key range is empty, come out as zeros.
  Var segment_attention(Var q, Var k, Var v, std::vector<RowRange> q_ranges,
                        std::vector<RowRange> kv_ranges, double scale);
  Var gelu(Var a);
  Var cos(Var a);
  Var softmax_rows(Var a);
  Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
  Var dropout(Var a, double p, std::mt19937_64& rng);
  // Mean binary cross-entropy of logits (column) against 0/1 labels.
  Var bce_with_logits(Var logits, const Eigen::VectorXd& labels);
  Var sum(Var a);

  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

  const Mat& value(Var v) const { return nodes_[v.id].value; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Param* param = nullptr;
    bool needs_grad = false;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Var push(Mat value, bool needs_grad,
           std::function<void(Tape&, std::size_t)> backward = nullptr);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Mat& grad_of(std::size_t id);
  void accumulate(Var v, Mat g);

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, std::size_t> bound_;
  bool grad_ = true;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  void step(ParamSet& params);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
};

// Uniform Glorot initialisation for a fan_in x fan_out matrix.
Mat glorot(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng);

}  // namespace dygrasp::nn
