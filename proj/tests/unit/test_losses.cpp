#include "doctest_torch.hpp"

#include <cmath>

#include <torch/torch.h>

#include "bgvc/error.hpp"
#include "bgvc/losses.hpp"
#include "support.hpp"

using namespace bgvc;
using namespace bgvc::losses;
using bgvc::testing::random_complex;
using bgvc::testing::seeded;

namespace {

torch::Tensor bin(double re, double im = 0.0) {
  return torch::tensor({c10::complex<double>(re, im)});
}

torch::Tensor scalar(double v) { return torch::tensor({v}, torch::kDouble); }

double val(const torch::Tensor& t) { return t.item<double>(); }

constexpr double kTol = 1e-6;

} // namespace

TEST_SUITE("losses") {

TEST_CASE("plcpa scalar cases") {
  auto gen = seeded(10);
  auto x = random_complex({4, 9}, 0.1, 3.0, gen);
  CHECK(std::abs(val(plcpa(x, x))) < kTol);

  for (double alpha : {0.0, 0.3, 0.5, 1.0}) {
    PlcpaConfig c;
    c.alpha = alpha;
    CHECK(std::abs(val(plcpa(bin(0), bin(1), c)) - 1.0) < kTol);
  }
  CHECK(std::abs(val(plcpa(bin(-1), bin(1))) - 2.0) < kTol);

  // alpha = 1 isolates the magnitude term, alpha = 0 the phase-aware one
  PlcpaConfig mag, cplx;
  mag.alpha = 1.0;
  cplx.alpha = 0.0;
  CHECK(std::abs(val(plcpa(bin(0), bin(1), mag)) - 1.0) < kTol);
  CHECK(std::abs(val(plcpa(bin(0), bin(1), cplx)) - 1.0) < kTol);
  CHECK(std::abs(val(plcpa(bin(-1), bin(1), mag))) < kTol);
  CHECK(std::abs(val(plcpa(bin(-1), bin(1), cplx)) - 4.0) < kTol);
}

TEST_CASE("over-suppression penalty") {
  CHECK(std::abs(val(asym_os(bin(0), bin(1), 0.3)) - 1.0) < kTol);
  CHECK(val(asym_os(bin(1), bin(0), 0.3)) == 0.0);
  auto gen = seeded(11);
  auto ref = random_complex({50}, 0.1, 1.0, gen);
  auto est = ref * 1.5;
  CHECK(val(asym_os(est, ref)) == 0.0);
}

TEST_CASE("plcpa with the asymmetric term") {
  auto gen = seeded(12);
  auto x = random_complex({3, 5}, 0.1, 2.0, gen);
  CHECK(std::abs(val(plcpa_asym(x, x))) < kTol);
  CHECK(std::abs(val(plcpa_asym(bin(0), bin(1))) - 2.0) < kTol);
  auto parts = plcpa_asym_parts(bin(0), bin(1));
  CHECK(std::abs(val(parts.plcpa) - 1.0) < kTol);
  CHECK(std::abs(val(parts.os) - 1.0) < kTol);

  PlcpaConfig zero_beta;
  zero_beta.beta = 0.0;
  auto a = random_complex({20}, 0.1, 2.0, gen), b = random_complex({20}, 0.1, 2.0, gen);
  CHECK(val(plcpa_asym(a, b, zero_beta)) == val(plcpa(a, b, zero_beta)));
  CHECK(val(plcpa_asym(a, b)) >= val(plcpa(a, b)));
}

TEST_CASE("mel reconstruction terms") {
  CHECK(std::abs(val(rec_uni(scalar(0.5), scalar(2.0))) - 1.5) < kTol);
  CHECK(std::abs(val(rec_vc(scalar(0.5), scalar(2.0))) - 1.5) < kTol);
  auto gen = seeded(13);
  auto m1 = torch::randn({6, 80}, gen, torch::kDouble);
  auto m2 = torch::randn({6, 80}, gen, torch::kDouble);
  CHECK(val(rec_uni(m1, m1)) == 0.0);
  CHECK(val(rec_uni(m1, m2)) == val(rec_uni(m2, m1)));
  CHECK(val(rec_vc(m1, m2)) == val(rec_vc(m2, m1)));
  dsp::MelSpectrogram a{m1.abs(), {}}, b{m2.abs(), {}};
  CHECK(rec_uni(a, b) == doctest::Approx(val(rec_uni(m1.abs(), m2.abs()))));
  CHECK_THROWS_AS(rec_uni(m1, m2.slice(0, 1)), ShapeError);
}

TEST_CASE("least-squares adversarial terms") {
  CHECK(val(adv_gen({torch::ones({3, 7})})) == 0.0);
  CHECK(std::abs(val(adv_gen({scalar(0.0)})) - 1.0) < kTol);
  CHECK(std::abs(val(adv_gen({scalar(0.5)})) - 0.25) < kTol);
  CHECK_THROWS_AS(adv_gen({}), ShapeError);

  CHECK(val(adv_dis({scalar(1)}, {scalar(0)})) == 0.0);
  CHECK(std::abs(val(adv_dis({scalar(0)}, {scalar(1)})) - 2.0) < kTol);
  CHECK(std::abs(val(adv_dis({scalar(0.5)}, {scalar(0.5)})) - 0.5) < kTol);
  CHECK_THROWS_AS(adv_dis({scalar(0)}, {scalar(0), scalar(1)}), ShapeError);

  // averaged over discriminators
  CHECK(std::abs(val(adv_gen({scalar(0.0), scalar(1.0)})) - 0.5) < kTol);
}

TEST_CASE("feature matching") {
  auto gen = seeded(14);
  std::vector<torch::Tensor> layers{torch::randn({2, 4, 9}, gen), torch::randn({2, 8, 3}, gen)};
  CHECK(val(feat_match(layers, layers)) == 0.0);
  CHECK(std::abs(val(feat_match({torch::ones({2}, torch::kDouble)},
                                {torch::zeros({2}, torch::kDouble)})) - 1.0) < kTol);
  auto r = torch::randn({5}, gen, torch::kDouble), f = torch::randn({5}, gen, torch::kDouble);
  CHECK(val(feat_match({r}, {f})) ==
        doctest::Approx(val(feat_match({torch::cat({r, r})}, {torch::cat({f, f})}))));
  CHECK_THROWS_AS(feat_match({r}, {f.slice(0, 1)}), ShapeError);
  CHECK_THROWS_AS(feat_match({r}, {f, f}), ShapeError);
}

TEST_CASE("multi-task total") {
  MtlWeights w;
  CHECK(w.uni == 45.0);
  CHECK(w.ss == 1.0);
  CHECK(w.vc == 1.0);
  LossBreakdown parts{{term::rec_uni, 0.1}, {term::ss_s, 0.15}, {term::ss_b, 0.05},
                      {term::rec_vc, 0.1},  {term::adv_gen, 0.1}, {term::fm, 0.1}};
  CHECK(std::abs(mtl_total(parts, w) - 5.0) < 1e-9);
  LossBreakdown zeros = parts;
  for (auto& [k, v] : zeros)
    v = 0.0;
  CHECK(mtl_total(zeros, w) == 0.0);

  LossBreakdown missing = parts;
  missing.erase(term::fm);
  CHECK_THROWS_AS(mtl_total(missing, w), ConfigError);
  CHECK_NOTHROW(mtl_total(missing, MtlWeights{45, 1, 0}));

  // linear in each weight
  const double base = mtl_total(parts, {0, 0, 0});
  CHECK(base == 0.0);
  CHECK(mtl_total(parts, {90, 1, 1}) - mtl_total(parts, w) ==
        doctest::Approx(45 * 0.1).epsilon(1e-12));
  CHECK(mtl_total(parts, {45, 3, 1}) - mtl_total(parts, w) ==
        doctest::Approx(2 * 0.2).epsilon(1e-12));
}

TEST_CASE("zeroed task weights cut those gradients") {
  auto gen = seeded(15);
  auto x = torch::randn({10}, gen, torch::kDouble).requires_grad_(true);
  auto t = torch::randn({10}, gen, torch::kDouble);
  std::map<std::string, torch::Tensor> parts{
      {term::rec_uni, (x - t).abs().mean()}, {term::ss_s, x.square().mean()},
      {term::ss_b, x.abs().mean()},          {term::rec_vc, (x * 3).square().mean()},
      {term::adv_gen, x.sum().square()},     {term::fm, x.exp().mean()}};
  auto g_all = torch::autograd::grad({mtl_total(parts, {45, 0, 0})}, {x}, {}, true)[0];
  auto g_uni = torch::autograd::grad({45 * parts[term::rec_uni]}, {x}, {}, true)[0];
  CHECK(torch::allclose(g_all, g_uni, 0, 0));
}

TEST_CASE("non-negativity on random inputs") {
  auto gen = seeded(16);
  for (int i = 0; i < 20; ++i) {
    auto a = random_complex({3, 4}, 0.0, 3.0, gen), b = random_complex({3, 4}, 0.0, 3.0, gen);
    CHECK(val(plcpa(a, b)) >= 0);
    CHECK(val(asym_os(a, b)) >= 0);
    CHECK(val(plcpa_asym(a, b)) >= 0);
    auto r = torch::randn({4}, gen), f = torch::randn({4}, gen);
    CHECK(val(rec_uni(r, f)) >= 0);
    CHECK(val(feat_match({r}, {f})) >= 0);
    CHECK(val(adv_dis({r}, {f})) >= 0);
  }
}

TEST_CASE("config validation") {
  PlcpaConfig c;
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.beta = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(plcpa(bin(1), torch::ones({2}, torch::kComplexDouble)), ShapeError);
}

TEST_CASE("finite-difference gradient agreement") {
  auto gen = seeded(17);
  GradCheckOptions opts;
  opts.non_smooth = [](const torch::Tensor& p) { return has_small_magnitude(p, 1e-7); };

  SUBCASE("plcpa") {
    for (int i = 0; i < 5; ++i) {
      auto est = torch::view_as_real(random_complex({3, 4}, 0.5, 2.0, gen)).contiguous();
      auto ref = random_complex({3, 4}, 0.5, 2.0, gen);
      auto r = grad_check(
          [&](const torch::Tensor& x) { return plcpa(torch::view_as_complex(x), ref); }, est,
          opts);
      CHECK(r.evaluated == est.numel());
      CHECK(r.max_relative_error < 1e-4);
    }
  }
  SUBCASE("over-suppression away from the kink") {
    auto ref = random_complex({12}, 0.5, 2.0, gen);
    // half the bins clearly under, half clearly over the reference magnitude
    auto scale = torch::where(torch::arange(12) % 2 == 0, torch::full({12}, 0.4),
                              torch::full({12}, 1.8))
                     .to(torch::kDouble);
    auto est = torch::view_as_real(ref * scale).contiguous();
    auto r = grad_check(
        [&](const torch::Tensor& x) { return asym_os(torch::view_as_complex(x), ref); }, est,
        opts);
    CHECK(r.max_relative_error < 1e-4);
  }
  SUBCASE("mel L1 away from ties") {
    auto ref = torch::randn({40}, gen, torch::kDouble);
    auto est = ref + torch::where(torch::arange(40) % 2 == 0, torch::full({40}, 0.3),
                                  torch::full({40}, -0.4))
                         .to(torch::kDouble);
    auto r = grad_check([&](const torch::Tensor& x) { return rec_uni(x, ref); }, est);
    CHECK(r.max_relative_error < 1e-6);
  }
  SUBCASE("a declared non-smooth point is refused") {
    auto est = torch::zeros({2, 2}, torch::kDouble);
    auto ref = random_complex({2}, 0.5, 1.0, gen);
    CHECK_THROWS_AS(grad_check([&](const torch::Tensor& x) {
                      return plcpa(torch::view_as_complex(x), ref);
                    }, est, opts),
                    ConfigError);
  }
}

} // TEST_SUITE
