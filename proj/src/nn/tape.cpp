#include "dygrasp/nn/tape.hpp"

#include <cmath>
#include <memory>

#include "dygrasp/error.hpp"

namespace dygrasp::nn {

Param& ParamSet::add(std::string name, Mat init) {
  for (const auto& p : params_) {
    if (p.name == name) fail(ErrorKind::kInvalidConfig, "duplicate parameter " + name);
  }
  Param& p = params_.emplace_back();
  p.name = std::move(name);
  p.grad = Mat::Zero(init.rows(), init.cols());
  p.adam_m = Mat::Zero(init.rows(), init.cols());
  p.adam_v = Mat::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  return p;
}

Param* ParamSet::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t ParamSet::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

const Mat& Var::value() const { return tape->value(*this); }

Var Tape::push(Mat value, bool needs_grad, std::function<void(Tape&, std::size_t)> backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Mat& Tape::grad_of(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(Var v, Mat g) {
  if (!needs(v)) return;
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) {
    n.grad = std::move(g);
  } else {
    n.grad += g;
  }
}

Var Tape::constant(Mat value) { return push(std::move(value), false); }

Var Tape::param(Param& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
  Var v = push(p.value, grad_, nullptr);
  if (grad_) nodes_[v.id].param = &p;
  bound_.emplace(&p, v.id);
  return v;
}

Var Tape::matmul(Var a, Var b) {
  if (a.cols() != b.rows()) fail(ErrorKind::kTraining, "matmul shape mismatch");
  return push(a.value() * b.value(), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    if (t.needs(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) fail(ErrorKind::kTraining, "matmul_nt shape mismatch");
  return push(a.value() * b.value().transpose(), needs(a) || needs(b),
              [a, b](Tape& t, std::size_t self) {
                const Mat& g = t.nodes_[self].grad;
                if (t.needs(a)) t.accumulate(a, g * t.value(b));
                if (t.needs(b)) t.accumulate(b, g.transpose() * t.value(a));
              });
}

Var Tape::add(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kTraining, "add shape mismatch");
  }
  return push(a.value() + b.value(), needs(a) || needs(b), [a, b](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var Tape::add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    fail(ErrorKind::kTraining, "add_row shape mismatch");
  }
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return push(std::move(out), needs(a) || needs(row), [a, row](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    t.accumulate(a, g);
    if (t.needs(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var Tape::scale(Var a, double s) {
  return push(a.value() * s, needs(a), [a, s](Tape& t, std::size_t self) {
    t.accumulate(a, t.nodes_[self].grad * s);
  });
}

Var Tape::mul(Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kTraining, "mul shape mismatch");
  }
  return push(a.value().cwiseProduct(b.value()), needs(a) || needs(b),
              [a, b](Tape& t, std::size_t self) {
                const Mat& g = t.nodes_[self].grad;
                if (t.needs(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
                if (t.needs(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
              });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::kTraining, "concat of nothing");
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) fail(ErrorKind::kTraining, "concat_cols row mismatch");
    cols += p.cols();
    ng = ng || needs(p);
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return push(std::move(out), ng, [parts](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      const Eigen::Index c = t.value(p).cols();
      if (t.needs(p)) t.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::kTraining, "concat of nothing");
  Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) fail(ErrorKind::kTraining, "concat_rows column mismatch");
    rows += p.rows();
    ng = ng || needs(p);
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return push(std::move(out), ng, [parts](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      const Eigen::Index r = t.value(p).rows();
      if (t.needs(p)) t.accumulate(p, g.middleRows(at, r));
      at += r;
    }
  });
}

Var Tape::slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || first + count > a.cols()) fail(ErrorKind::kTraining, "slice_cols out of range");
  return push(a.value().middleCols(first, count), needs(a),
              [a, first, count](Tape& t, std::size_t self) {
                t.grad_of(a.id).middleCols(first, count) += t.nodes_[self].grad;
              });
}

Var Tape::slice_rows(Var a, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || first + count > a.rows()) fail(ErrorKind::kTraining, "slice_rows out of range");
  return push(a.value().middleRows(first, count), needs(a),
              [a, first, count](Tape& t, std::size_t self) {
                t.grad_of(a.id).middleRows(first, count) += t.nodes_[self].grad;
              });
}

Var Tape::mean_rows(Var a) {
  const Eigen::Index n = a.rows();
  if (n == 0) fail(ErrorKind::kTraining, "mean of zero rows");
  return push(a.value().colwise().mean(), needs(a), [a, n](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    t.grad_of(a.id).rowwise() += g.row(0) / static_cast<double>(n);
  });
}

Var Tape::gather_rows(Var a, std::vector<Eigen::Index> index) {
  const Mat& x = a.value();
  Mat out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) fail(ErrorKind::kTraining, "gather_rows out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  return push(std::move(out), needs(a), [a, index = std::move(index)](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    Mat& ga = t.grad_of(a.id);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

namespace {

void check_ranges(const std::vector<RowRange>& ranges, Eigen::Index rows, const char* what) {
  for (const auto& r : ranges) {
    if (r.first < 0 || r.count < 0 || r.first + r.count > rows) {
      fail(ErrorKind::kTraining, std::string(what) + ": row range out of bounds");
    }
  }
}

}  // namespace

Var Tape::segment_mean(Var a, std::vector<RowRange> ranges) {
  const Mat& x = a.value();
  check_ranges(ranges, x.rows(), "segment_mean");
  Mat out = Mat::Zero(static_cast<Eigen::Index>(ranges.size()), x.cols());
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto& r = ranges[i];
    if (r.count > 0) out.row(static_cast<Eigen::Index>(i)) = x.middleRows(r.first, r.count).colwise().mean();
  }
  return push(std::move(out), needs(a), [a, ranges = std::move(ranges)](Tape& t, std::size_t self) {
    const Mat& g = t.nodes_[self].grad;
    Mat& ga = t.grad_of(a.id);
    for (std::size_t i = 0; i < ranges.size(); ++i) {
      const auto& r = ranges[i];
      if (r.count == 0) continue;
      ga.middleRows(r.first, r.count).rowwise() +=
          g.row(static_cast<Eigen::Index>(i)) / static_cast<double>(r.count);
    }
  });
}

Var Tape::segment_attention(Var q, Var k, Var v, std::vector<RowRange> q_ranges,
                            std::vector<RowRange> kv_ranges, double scale) {
  if (q_ranges.size() != kv_ranges.size()) {
    fail(ErrorKind::kTraining, "segment_attention needs one key range per query range");
  }
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    fail(ErrorKind::kTraining, "segment_attention shape mismatch");
  }
  check_ranges(q_ranges, q.rows(), "segment_attention");
  check_ranges(kv_ranges, k.rows(), "segment_attention");
  const Mat& qv = q.value();
  const Mat& kvv = k.value();
  const Mat& vv = v.value();
  Mat out = Mat::Zero(qv.rows(), vv.cols());
  // Attention weights per segment, kept for the backward pass.
  auto weights = std::make_shared<std::vector<Mat>>(q_ranges.size());
  for (std::size_t s = 0; s < q_ranges.size(); ++s) {
    const auto& qr = q_ranges[s];
    const auto& kr = kv_ranges[s];
    if (qr.count == 0 || kr.count == 0) continue;
    Mat p = scale * (qv.middleRows(qr.first, qr.count) * kvv.middleRows(kr.first, kr.count).transpose());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double m = p.row(r).maxCoeff();
      p.row(r) = (p.row(r).array() - m).exp().matrix();
      p.row(r) /= p.row(r).sum();
    }
    out.middleRows(qr.first, qr.count) = p * vv.middleRows(kr.first, kr.count);
    (*weights)[s] = std::move(p);
  }
  const bool ng = needs(q) || needs(k) || needs(v);
  return push(std::move(out), ng,
              [q, k, v, q_ranges = std::move(q_ranges), kv_ranges = std::move(kv_ranges), scale,
               weights](Tape& t, std::size_t self) {
                const Mat& g = t.nodes_[self].grad;
                const Mat& qv = t.value(q);
                const Mat& kvv = t.value(k);
                const Mat& vv = t.value(v);
                Mat gq = Mat::Zero(qv.rows(), qv.cols());
                Mat gk = Mat::Zero(kvv.rows(), kvv.cols());
                Mat gv = Mat::Zero(vv.rows(), vv.cols());
                for (std::size_t s = 0; s < q_ranges.size(); ++s) {
                  const auto& qr = q_ranges[s];
                  const auto& kr = kv_ranges[s];
                  if (qr.count == 0 || kr.count == 0) continue;
                  const Mat& p = (*weights)[s];
                  const auto go = g.middleRows(qr.first, qr.count);
                  gv.middleRows(kr.first, kr.count) += p.transpose() * go;
                  const Mat dp = go * vv.middleRows(kr.first, kr.count).transpose();
                  Mat ds(p.rows(), p.cols());
                  for (Eigen::Index r = 0; r < p.rows(); ++r) {
                    const double dot = dp.row(r).dot(p.row(r));
                    ds.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
                  }
                  ds *= scale;
                  gq.middleRows(qr.first, qr.count) += ds * kvv.middleRows(kr.first, kr.count);
                  gk.middleRows(kr.first, kr.count) += ds.transpose() * qv.middleRows(qr.first, qr.count);
                }
                if (t.needs(q)) t.accumulate(q, std::move(gq));
                if (t.needs(k)) t.accumulate(k, std::move(gk));
                if (t.needs(v)) t.accumulate(v, std::move(gv));
              });
}

Var Tape::gelu(Var a) {
  // Exact form x * Phi(x).
  Mat out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Mat d = t.value(a).unaryExpr([](double x) {
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
      return cdf + x * pdf;
    });
    t.accumulate(a, t.nodes_[self].grad.cwiseProduct(d));
  });
}

Var Tape::cos(Var a) {
  Mat out = a.value().array().cos().matrix();
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    t.accumulate(a, -t.nodes_[self].grad.cwiseProduct(t.value(a).array().sin().matrix()));
  });
}

Var Tape::softmax_rows(Var a) {
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const Mat& y = t.nodes_[self].value;
    const Mat& g = t.nodes_[self].grad;
    Mat d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      d.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    t.accumulate(a, d);
  });
}

Var Tape::layer_norm(Var a, Var gamma, Var beta, double eps) {
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  Mat xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
  }
  Mat out = xhat;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    out.row(r) = xhat.row(r).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return push(std::move(out), needs(a) || needs(gamma) || needs(beta),
              [a, gamma, beta, xhat, inv_std, n](Tape& t, std::size_t self) {
                const Mat& g = t.nodes_[self].grad;
                if (t.needs(gamma)) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                if (t.needs(beta)) t.accumulate(beta, g.colwise().sum());
                if (!t.needs(a)) return;
                Mat dx(g.rows(), n);
                for (Eigen::Index r = 0; r < g.rows(); ++r) {
                  const Eigen::RowVectorXd gh = g.row(r).cwiseProduct(t.value(gamma).row(0));
                  const double m1 = gh.mean();
                  const double m2 = gh.dot(xhat.row(r)) / static_cast<double>(n);
                  dx.row(r) = (gh.array() - m1 - xhat.row(r).array() * m2) * inv_std[r];
                }
                t.accumulate(a, dx);
              });
}

Var Tape::dropout(Var a, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return a;
  Mat mask(a.rows(), a.cols());
  const double keep = 1.0 - p;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask.data()[i] = u < keep ? 1.0 / keep : 0.0;
  }
  return mul(a, constant(std::move(mask)));
}

Var Tape::bce_with_logits(Var logits, const Eigen::VectorXd& labels) {
  const Mat& z = logits.value();
  if (z.cols() != 1 || z.rows() != labels.size()) fail(ErrorKind::kTraining, "bce shape mismatch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double x = z(i, 0);
    // log(1 + exp(-|x|)) keeps this stable for large |x|.
    loss += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(z.rows());
  Mat out(1, 1);
  out(0, 0) = loss / n;
  return push(std::move(out), needs(logits), [logits, labels, n](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    const Mat& z = t.value(logits);
    Mat d(z.rows(), 1);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      d(i, 0) = g * (1.0 / (1.0 + std::exp(-z(i, 0))) - labels[i]) / n;
    }
    t.accumulate(logits, d);
  });
}

Var Tape::sum(Var a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return push(std::move(out), needs(a), [a](Tape& t, std::size_t self) {
    const double g = t.nodes_[self].grad(0, 0);
    t.accumulate(a, Mat::Constant(t.value(a).rows(), t.value(a).cols(), g));
  });
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) {
    fail(ErrorKind::kTraining, "backward needs a scalar root");
  }
  if (!needs(root)) return;
  grad_of(root.id)(0, 0) += 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

void Adam::step(ParamSet& params) {
  ++t_;
  const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& p : params.params()) {
    p.adam_m = cfg_.beta1 * p.adam_m + (1.0 - cfg_.beta1) * p.grad;
    p.adam_v = cfg_.beta2 * p.adam_v + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= cfg_.learning_rate * (p.adam_m.array() / b1t) /
                       ((p.adam_v.array() / b2t).sqrt() + cfg_.eps);
  }
}

Mat glorot(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Mat m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = limit * (static_cast<double>(rng() >> 11) * 0x1.0p-52 - 1.0);
  }
  return m;
}

}  // namespace dygrasp::nn
