#include "support.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <sys/wait.h>
#include <unistd.h>

namespace testing_support {

namespace {
std::atomic<int> g_counter{0};
}

TempDir::TempDir() {
  path_ = std::filesystem::temp_directory_path() /
          ("dygrasp_test_" + std::to_string(::getpid()) + "_" + std::to_string(g_counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

dygrasp::DyTAG random_graph(std::size_t nodes, std::size_t edges, std::uint64_t seed,
                            int max_time) {
  std::mt19937_64 rng(seed);
  std::map<dygrasp::NodeId, std::string> node_texts;
  for (std::size_t v = 0; v < nodes; ++v) node_texts[v] = "node " + std::to_string(v);
  std::map<dygrasp::TextId, std::string> edge_texts;
  std::vector<dygrasp::EdgeRow> rows;
  std::uniform_int_distribution<std::size_t> pick(0, nodes - 1);
  std::uniform_int_distribution<int> time(0, max_time);
  for (std::size_t e = 0; e < edges; ++e) {
    std::size_t u = pick(rng), v = pick(rng);
    while (v == u) v = pick(rng);
    edge_texts[e] = "event " + std::to_string(e) + " word" + std::to_string(rng() % 7);
    rows.push_back({u, v, e, static_cast<double>(time(rng))});
  }
  return dygrasp::DyTAG::build(std::move(node_texts), std::move(edge_texts), std::move(rows));
}

namespace {
std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}
}  // namespace

GradCheck grad_check(const std::vector<dygrasp::nn::Param*>& params,
                     const std::function<dygrasp::nn::Var(dygrasp::nn::Tape&)>& loss,
                     std::size_t points, std::uint64_t seed, double step, double floor) {
  for (auto* p : params) p->grad = dygrasp::nn::Mat::Zero(p->value.rows(), p->value.cols());
  {
    dygrasp::nn::Tape tape(true);
    auto root = loss(tape);
    tape.backward(root);
  }
  auto eval = [&] {
    dygrasp::nn::Tape tape(false);
    return loss(tape).value()(0, 0);
  };
  std::mt19937_64 rng(seed);
  GradCheck out;
  for (std::size_t k = 0; k < points; ++k) {
    auto* p = params[rng() % params.size()];
    Eigen::Index r = static_cast<Eigen::Index>(rng() % p->value.rows());
    Eigen::Index c = static_cast<Eigen::Index>(rng() % p->value.cols());
    double saved = p->value(r, c);
    p->value(r, c) = saved + step;
    double up = eval();
    p->value(r, c) = saved - step;
    double down = eval();
    p->value(r, c) = saved;
    double numeric = (up - down) / (2 * step);
    double analytic = p->grad(r, c);
    double rel = std::abs(analytic - numeric) /
                 std::max({std::abs(analytic), std::abs(numeric), floor});
    ++out.points;
    if (rel >= out.max_rel_err) {
      out.max_rel_err = rel;
      out.worst = p->name + "(" + std::to_string(r) + "," + std::to_string(c) +
                  ") analytic=" + sci(analytic) + " numeric=" + sci(numeric);
    }
  }
  return out;
}

std::string run_command(const std::string& cmd, int* status) {
  std::string output;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) {
    *status = -1;
    return output;
  }
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) output.append(buf.data(), n);
  int raw = ::pclose(pipe);
  *status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return output;
}

}  // namespace testing_support
