#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "bgvc/config.hpp"

namespace bgvc::testing {

inline torch::Tensor random_complex(std::vector<int64_t> shape, double lo, double hi,
                                    torch::Generator& gen) {
  auto opts = torch::TensorOptions().dtype(torch::kDouble);
  auto mag = torch::rand(shape, gen, opts) * (hi - lo) + lo;
  auto phase = torch::rand(shape, gen, opts) * 2.0 * M_PI;
  return torch::polar(mag, phase);
}

inline torch::Generator seeded(uint64_t seed) {
  auto g = at::detail::createCPUGenerator(seed);
  return g;
}

inline double snr_db(const torch::Tensor& ref, const torch::Tensor& est) {
  auto r = ref.to(torch::kDouble), e = est.to(torch::kDouble);
  const double num = r.square().sum().item<double>();
  const double den = (r - e).square().sum().item<double>();
  return 10.0 * std::log10(num / den);
}

/// One-sample Kolmogorov-Smirnov test against U(lo, hi); returns the
/// asymptotic p-value.
inline double ks_uniform_p(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = double(xs.size());
  double d = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, double(i + 1) / n - f, f - double(i) / n});
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

/// Fresh directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("bgvc_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// A deliberately small model so training-path tests take seconds.
inline RunConfig tiny_config() {
  return parse_config(nlohmann::json::parse(R"({
    "seed": 5,
    "model": {
      "separator": {"channels": [4, 8], "rnn_proj": 16, "rnn_hidden": 16, "head_channels": 4},
      "extractor": {"conv_channels": 16, "dim": 32},
      "vc": {"bn_dim": 32, "enc_channels": 16, "enc_hidden": 16, "speaker_dim": 8,
             "gen_channels": 16, "disc_channels": [4, 8], "disc_pools": [1, 4]}
    },
    "train": {"batch_size": 2, "crop_samples": 4096, "steps_vc": 3, "steps_ss": 3,
              "steps_joint": 3, "freeze_check_every": 1,
              "optim": {"lr": 1e-3}}
  })"));
}

} // namespace bgvc::testing
