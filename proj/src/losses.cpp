#include "bgvc/losses.hpp"

#include <cmath>
#include <sstream>

#include <torch/torch.h>

#include "bgvc/error.hpp"

namespace bgvc::losses {

namespace {

void check_pair(const torch::Tensor& est, const torch::Tensor& ref,
                const char* what, bool complex) {
  if (!est.defined() || !ref.defined())
    throw ShapeError(std::string(what) + ": undefined operand");
  if (est.sizes() != ref.sizes()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << est.sizes() << " vs " << ref.sizes();
    throw ShapeError(os.str());
  }
  if (complex && (!est.is_complex() || !ref.is_complex()))
    throw ShapeError(std::string(what) + ": expected complex spectrograms");
  if (est.numel() == 0)
    throw ShapeError(std::string(what) + ": empty operands");
}

torch::Tensor lsgan_term(const torch::Tensor& s, double target) {
  return (s - target).square().mean();
}

template <typename V>
V require(const std::map<std::string, V>& parts, const std::string& name) {
  auto it = parts.find(name);
  if (it == parts.end())
    throw ConfigError("mtl_total: missing loss term '" + name + "'");
  return it->second;
}

template <typename V>
V combine(const std::map<std::string, V>& parts, const MtlWeights& w, V zero) {
  V total = zero;
  if (w.uni != 0.0)
    total = total + w.uni * require(parts, term::rec_uni);
  if (w.ss != 0.0)
    total = total + w.ss * (require(parts, term::ss_s) + require(parts, term::ss_b));
  if (w.vc != 0.0)
    total = total + w.vc * (require(parts, term::rec_vc) +
                            require(parts, term::adv_gen) +
                            require(parts, term::fm));
  return total;
}

} // namespace

void PlcpaConfig::validate() const {
  if (!(p > 0.0) || p > 1.0)
    throw ConfigError("plcpa: p must lie in (0, 1]");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("plcpa: alpha must lie in [0, 1]");
  if (!(beta >= 0.0))
    throw ConfigError("plcpa: beta must be non-negative");
}

torch::Tensor plcpa(const torch::Tensor& est, const torch::Tensor& ref,
                    const PlcpaConfig& cfg) {
  cfg.validate();
  check_pair(est, ref, "plcpa", true);
  auto mag_term = (dsp::compressed_magnitude(ref, cfg.p) -
                   dsp::compressed_magnitude(est, cfg.p))
                      .square();
  auto diff = dsp::power_law_compress(ref, cfg.p) - dsp::power_law_compress(est, cfg.p);
  auto phase_term = torch::real(diff).square() + torch::imag(diff).square();
  return (cfg.alpha * mag_term + (1.0 - cfg.alpha) * phase_term).mean();
}

torch::Tensor asym_os(const torch::Tensor& est, const torch::Tensor& ref,
                      double p) {
  if (!(p > 0.0) || p > 1.0)
    throw ConfigError("asym_os: p must lie in (0, 1]");
  check_pair(est, ref, "asym_os", true);
  auto gap = dsp::compressed_magnitude(ref, p) - dsp::compressed_magnitude(est, p);
  return torch::relu(gap).square().mean();
}

PlcpaAsymParts plcpa_asym_parts(const torch::Tensor& est,
                                const torch::Tensor& ref,
                                const PlcpaConfig& cfg) {
  auto base = plcpa(est, ref, cfg);
  auto os = asym_os(est, ref, cfg.p);
  return {base, os, base + cfg.beta * os};
}

torch::Tensor plcpa_asym(const torch::Tensor& est, const torch::Tensor& ref,
                         const PlcpaConfig& cfg) {
  return plcpa_asym_parts(est, ref, cfg).total;
}

double plcpa(const dsp::ComplexSpectrogram& est,
             const dsp::ComplexSpectrogram& ref, const PlcpaConfig& cfg) {
  return plcpa(est.bins, ref.bins, cfg).item<double>();
}

double plcpa_asym(const dsp::ComplexSpectrogram& est,
                  const dsp::ComplexSpectrogram& ref, const PlcpaConfig& cfg) {
  return plcpa_asym(est.bins, ref.bins, cfg).item<double>();
}

torch::Tensor rec_uni(const torch::Tensor& mel_hat, const torch::Tensor& mel_ref) {
  check_pair(mel_hat, mel_ref, "rec_uni", false);
  return (mel_ref - mel_hat).abs().mean();
}

torch::Tensor rec_vc(const torch::Tensor& mel_hat, const torch::Tensor& mel_ref) {
  check_pair(mel_hat, mel_ref, "rec_vc", false);
  return (mel_ref - mel_hat).abs().mean();
}

double rec_uni(const dsp::MelSpectrogram& mel_hat,
               const dsp::MelSpectrogram& mel_ref) {
  return rec_uni(mel_hat.frames, mel_ref.frames).item<double>();
}

torch::Tensor adv_gen(const std::vector<torch::Tensor>& fake_scores) {
  if (fake_scores.empty())
    throw ShapeError("adv_gen: no discriminator scores");
  torch::Tensor acc;
  for (const auto& s : fake_scores) {
    auto t = lsgan_term(s, 1.0);
    acc = acc.defined() ? acc + t : t;
  }
  return acc / double(fake_scores.size());
}

torch::Tensor adv_dis(const std::vector<torch::Tensor>& real_scores,
                      const std::vector<torch::Tensor>& fake_scores) {
  if (real_scores.size() != fake_scores.size())
    throw ShapeError("adv_dis: real/fake discriminator counts differ");
  if (real_scores.empty())
    throw ShapeError("adv_dis: no discriminator scores");
  torch::Tensor acc;
  for (size_t i = 0; i < real_scores.size(); ++i) {
    auto t = lsgan_term(real_scores[i], 1.0) + lsgan_term(fake_scores[i], 0.0);
    acc = acc.defined() ? acc + t : t;
  }
  return acc / double(real_scores.size());
}

torch::Tensor feat_match(const std::vector<torch::Tensor>& real,
                         const std::vector<torch::Tensor>& fake) {
  if (real.size() != fake.size())
    throw ShapeError("feat_match: layer counts differ");
  if (real.empty())
    throw ShapeError("feat_match: no feature layers");
  torch::Tensor acc;
  for (size_t i = 0; i < real.size(); ++i) {
    if (real[i].sizes() != fake[i].sizes())
      throw ShapeError("feat_match: shape mismatch at layer " + std::to_string(i));
    auto t = (real[i] - fake[i]).abs().mean();
    acc = acc.defined() ? acc + t : t;
  }
  return acc;
}

torch::Tensor feat_match(const std::vector<std::vector<torch::Tensor>>& real,
                         const std::vector<std::vector<torch::Tensor>>& fake) {
  if (real.size() != fake.size() || real.empty())
    throw ShapeError("feat_match: discriminator counts differ or are zero");
  torch::Tensor acc;
  for (size_t d = 0; d < real.size(); ++d) {
    auto t = feat_match(real[d], fake[d]);
    acc = acc.defined() ? acc + t : t;
  }
  return acc / double(real.size());
}

double mtl_total(const LossBreakdown& parts, const MtlWeights& w) {
  return combine<double>(parts, w, 0.0);
}

torch::Tensor mtl_total(const std::map<std::string, torch::Tensor>& parts,
                        const MtlWeights& w) {
  torch::Tensor zero;
  for (const auto& [name, t] : parts) {
    zero = torch::zeros({}, t.options());
    break;
  }
  if (!zero.defined())
    zero = torch::zeros({});
  return combine<torch::Tensor>(parts, w, zero);
}

bool has_small_magnitude(const torch::Tensor& real_view, double tol) {
  auto c = torch::view_as_complex(real_view.contiguous());
  return (torch::abs(c) < tol).any().item<bool>();
}

GradCheckResult grad_check(
    const std::function<torch::Tensor(const torch::Tensor&)>& loss_fn,
    const torch::Tensor& point, const GradCheckOptions& opts) {
  if (point.scalar_type() != torch::kDouble)
    throw ConfigError("grad_check: point must be a double tensor");
  if (!(opts.step > 0.0))
    throw ConfigError("grad_check: step must be positive");
  if (opts.non_smooth && opts.non_smooth(point))
    throw ConfigError("grad_check: point lies on a declared non-smooth locus");

  auto x = point.detach().clone().contiguous().requires_grad_(true);
  auto loss = loss_fn(x);
  if (loss.numel() != 1)
    throw ShapeError("grad_check: loss must be a scalar");
  auto analytic = torch::autograd::grad({loss}, {x}, {}, false, false, true)[0];
  if (!analytic.defined())
    analytic = torch::zeros_like(point);
  analytic = analytic.contiguous();

  GradCheckResult result;
  torch::NoGradGuard no_grad;
  auto probe = point.detach().clone().contiguous();
  double* p = probe.data_ptr<double>();
  const double* a = analytic.data_ptr<double>();
  for (int64_t i = 0; i < probe.numel(); ++i) {
    const double saved = p[i];
    p[i] = saved + opts.step;
    const double up = loss_fn(probe).item<double>();
    p[i] = saved - opts.step;
    const double down = loss_fn(probe).item<double>();
    p[i] = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double denom =
        std::max({std::abs(a[i]), std::abs(numeric), opts.abs_floor});
    const double rel = std::abs(a[i] - numeric) / denom;
    if (result.worst_index < 0 || rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_index = i;
    }
    ++result.evaluated;
  }
  return result;
}

} // namespace bgvc::losses
