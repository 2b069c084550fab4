#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dygrasp/dytag.hpp"
#include "dygrasp/nn/tape.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Random general graph with integer timestamps in [0, max_time] (so ties
// occur) and distinct short edge texts.
dygrasp::DyTAG random_graph(std::size_t nodes, std::size_t edges, std::uint64_t seed,
                            int max_time = 50);

struct GradCheck {
  std::size_t points = 0;
  double max_rel_err = 0.0;
  std::string worst;  // parameter name and entry of the worst point
};

// Central finite differences against reverse mode for `points` random
// entries drawn from `params`. The loss function builds a scalar on the
// given tape. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheck grad_check(const std::vector<dygrasp::nn::Param*>& params,
                     const std::function<dygrasp::nn::Var(dygrasp::nn::Tape&)>& loss,
                     std::size_t points, std::uint64_t seed, double step = 1e-5,
                     double floor = 1e-6);

// Output of a shell command; exit status in `status`.
std::string run_command(const std::string& cmd, int* status);

}  // namespace testing_support
