#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/types.h>

#include "bgvc/dsp.hpp"

namespace bgvc::losses {

/// Power-law compressed phase-aware loss settings.
struct PlcpaConfig {
  double p = 0.3;     // spectral compression exponent
  double alpha = 0.5; // weight of the magnitude term against the complex term
  double beta = 1.0;  // weight of the over-suppression penalty

  void validate() const;
};

/// Task weights of the multi-task objective.
struct MtlWeights {
  double uni = 45.0;
  double ss = 1.0;
  double vc = 1.0;
};

/// Canonical loss-term names, as they appear in breakdowns and logs.
namespace term {
inline const std::string rec_uni = "rec_uni";
inline const std::string ss_s = "ss_s";
inline const std::string ss_b = "ss_b";
inline const std::string rec_vc = "rec_vc";
inline const std::string adv_gen = "adv_gen";
inline const std::string adv_dis = "adv_dis";
inline const std::string fm = "fm";
inline const std::string total = "total";
} // namespace term

/// Named scalar loss values for one step. Ordered, so serialisation is stable.
using LossBreakdown = std::map<std::string, double>;

// All spectral losses take complex tensors of identical shape (any rank) and
// mean-reduce over every element, i.e. over (t, f) and the batch.

torch::Tensor plcpa(const torch::Tensor& est, const torch::Tensor& ref,
                    const PlcpaConfig& cfg = {});
/// Mean over bins of h(|ref|^p - |est|^p)^2 with h(x) = max(x, 0): only
/// under-estimates of the reference magnitude are penalised.
torch::Tensor asym_os(const torch::Tensor& est, const torch::Tensor& ref,
                      double p = 0.3);

struct PlcpaAsymParts {
  torch::Tensor plcpa;
  torch::Tensor os;
  torch::Tensor total; // plcpa + beta * os
};
PlcpaAsymParts plcpa_asym_parts(const torch::Tensor& est,
                                const torch::Tensor& ref,
                                const PlcpaConfig& cfg = {});
torch::Tensor plcpa_asym(const torch::Tensor& est, const torch::Tensor& ref,
                         const PlcpaConfig& cfg = {});

double plcpa(const dsp::ComplexSpectrogram& est,
             const dsp::ComplexSpectrogram& ref, const PlcpaConfig& cfg = {});
double plcpa_asym(const dsp::ComplexSpectrogram& est,
                  const dsp::ComplexSpectrogram& ref,
                  const PlcpaConfig& cfg = {});

/// Mean absolute difference between mel representations.
torch::Tensor rec_uni(const torch::Tensor& mel_hat, const torch::Tensor& mel_ref);
torch::Tensor rec_vc(const torch::Tensor& mel_hat, const torch::Tensor& mel_ref);
double rec_uni(const dsp::MelSpectrogram& mel_hat,
               const dsp::MelSpectrogram& mel_ref);

/// Least-squares generator loss, averaged over discriminators; each score
/// tensor is mean-reduced first.
torch::Tensor adv_gen(const std::vector<torch::Tensor>& fake_scores);
/// Least-squares discriminator loss, averaged over discriminators.
torch::Tensor adv_dis(const std::vector<torch::Tensor>& real_scores,
                      const std::vector<torch::Tensor>& fake_scores);
/// Sum over layers of the per-layer mean absolute difference.
torch::Tensor feat_match(const std::vector<torch::Tensor>& real,
                         const std::vector<torch::Tensor>& fake);
/// feat_match averaged over several discriminators.
torch::Tensor feat_match(const std::vector<std::vector<torch::Tensor>>& real,
                         const std::vector<std::vector<torch::Tensor>>& fake);

/// uni * rec_uni + ss * (ss_s + ss_b) + vc * (rec_vc + adv_gen + fm).
/// A group whose weight is zero may be absent; any other missing term throws.
double mtl_total(const LossBreakdown& parts, const MtlWeights& w);
torch::Tensor mtl_total(const std::map<std::string, torch::Tensor>& parts,
                        const MtlWeights& w);

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor of the relative error, so components that are zero
  /// both ways do not blow the ratio up.
  double abs_floor = 1e-7;
  /// Declares the point non-smooth for the loss under test; grad_check
  /// refuses to evaluate there.
  std::function<bool(const torch::Tensor&)> non_smooth;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  int64_t worst_index = -1;
  int64_t evaluated = 0;
};

/// Compares the autograd gradient of `loss_fn` at `point` against central
/// finite differences, element by element. `point` must be a real double
/// tensor; complex estimates are passed as torch::view_as_real layouts.
GradCheckResult grad_check(
    const std::function<torch::Tensor(const torch::Tensor&)>& loss_fn,
    const torch::Tensor& point, const GradCheckOptions& opts = {});

/// True if any complex bin of a view_as_real point has magnitude below `tol`.
bool has_small_magnitude(const torch::Tensor& real_view, double tol);

} // namespace bgvc::losses
