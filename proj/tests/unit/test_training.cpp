#include "doctest_torch.hpp"

#include <fstream>

#include <torch/torch.h>

#include "bgvc/error.hpp"
#include "bgvc/training.hpp"
#include "support.hpp"

using namespace bgvc;
using namespace bgvc::train;
namespace t = bgvc::losses::term;

namespace {

struct Fixture {
  data::ToyCorpus corpus = data::make_toy_corpus({2, 2, 2, 1.0, 5});
  std::vector<data::TrainingExample> examples = data::toy_training_set(corpus, 3);
  std::vector<std::string> speakers = corpus.manifest.speakers();
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

TrainState fresh(const RunConfig& cfg) { return TrainState(cfg, fixture().speakers); }

std::vector<torch::Tensor> grads_of(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters())
    out.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));
  return out;
}

bool same(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size())
    return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!torch::equal(a[i], b[i]))
      return false;
  return true;
}

std::set<std::string> keys_of(const losses::LossBreakdown& b) {
  std::set<std::string> out;
  for (const auto& [k, v] : b)
    out.insert(k);
  return out;
}

} // namespace

TEST_SUITE("training") {

TEST_CASE("stage plans") {
  auto cfg = bgvc::testing::tiny_config();
  auto vc = plan_for(Stage::vc_only, cfg);
  CHECK(vc.frozen == std::set<std::string>{store::extractor, store::separator});
  CHECK(vc.active_terms == std::set<std::string>{t::rec_vc, t::adv_gen, t::fm, t::adv_dis, t::total});
  auto ss = plan_for(Stage::ss_only, cfg);
  CHECK(ss.frozen == std::set<std::string>{store::extractor, store::vc, store::discriminator});
  CHECK(ss.active_terms == std::set<std::string>{t::ss_s, t::ss_b, t::total});
  auto joint = plan_for(Stage::joint, cfg);
  CHECK(joint.frozen == std::set<std::string>{store::extractor});
  CHECK(joint.active_terms.size() == 8);
  CHECK(schedule(cfg).size() == 3);

  cfg.train.ablation = Ablation::ss_loss;
  CHECK_FALSE(plan_for(Stage::joint, cfg).active_terms.count(t::ss_s));
  CHECK_FALSE(plan_for(Stage::joint, cfg).active_terms.count(t::ss_b));
  cfg.train.ablation = Ablation::vc_loss;
  auto no_vc = plan_for(Stage::joint, cfg).active_terms;
  CHECK(no_vc == std::set<std::string>{t::rec_uni, t::ss_s, t::ss_b, t::total});
  cfg.train.ablation = Ablation::no_joint;
  auto sch = schedule(cfg);
  REQUIRE(sch.size() == 2);
  CHECK(sch[1].stage == Stage::ss_only);
}

TEST_CASE("frozen stores stay fixed through the schedule") {
  auto cfg = bgvc::testing::tiny_config();
  auto st = fresh(cfg);
  const auto initial = st.store_hashes();
  for (const auto& plan : schedule(cfg)) {
    const auto before = st.store_hashes();
    std::vector<StepLog> logs;
    run_stage(plan, st, fixture().examples, {std::nullopt, [&](const StepLog& s) { logs.push_back(s); }});
    const auto after = st.store_hashes();
    INFO(to_string(plan.stage));
    CHECK(logs.size() == size_t(plan.steps));
    for (const auto& [name, h] : after) {
      if (plan.frozen.count(name))
        CHECK(h == before.at(name));
      else
        CHECK(h != before.at(name));
    }
    for (const auto& s : logs)
      CHECK(keys_of(s.terms) == plan.active_terms);
  }
  CHECK(st.store_hashes().at(store::extractor) == initial.at(store::extractor));
  CHECK(st.step == 9);
}

TEST_CASE("joint total is the weighted sum of its terms") {
  auto cfg = bgvc::testing::tiny_config();
  cfg.weights = {45.0, 0.7, 1.3};
  auto st = fresh(cfg);
  st.stage = Stage::joint;
  auto batch = next_batch(st, fixture().examples);
  auto out = step_joint(st, batch);
  auto parts = out;
  parts.erase(t::total);
  parts.erase(t::adv_dis);
  const double expect = losses::mtl_total(parts, cfg.weights);
  CHECK(std::abs(out.at(t::total) - expect) <= 1e-9 * std::abs(expect));
}

TEST_CASE("zeroed task weights leave only the unified-path gradient") {
  auto cfg = bgvc::testing::tiny_config();
  auto run = [&](const losses::MtlWeights& w, bool perturb) {
    auto c = cfg;
    c.weights = w;
    auto st = fresh(c);
    st.stage = Stage::joint;
    auto batch = next_batch(st, fixture().examples);
    if (perturb) {
      // separation and conversion targets change, the mixture does not
      batch.clean = batch.clean * 0.5;
      batch.clean_spec = batch.clean_spec * 0.5;
      batch.background = batch.background * 2.0;
      batch.background_spec = batch.background_spec * 2.0;
      batch.clean_mel = dsp::log_mel(batch.clean, c.model.mel, c.model.frames)
                            .to(batch.clean_mel.scalar_type());
    }
    step_joint(st, batch);
    return std::make_pair(grads_of(*st.separator), grads_of(*st.vc));
  };
  auto [sep_a, vc_a] = run({45, 0, 0}, false);
  auto [sep_b, vc_b] = run({45, 0, 0}, true);
  CHECK(same(sep_a, sep_b));
  CHECK(same(vc_a, vc_b));

  auto [sep_c, vc_c] = run({45, 1, 1}, false);
  auto [sep_d, vc_d] = run({45, 1, 1}, true);
  CHECK_FALSE(same(sep_c, sep_d));
  CHECK_FALSE(same(vc_c, vc_d));
}

TEST_CASE("steps are deterministic") {
  auto cfg = bgvc::testing::tiny_config();
  for (Stage s : {Stage::vc_only, Stage::ss_only, Stage::joint}) {
    auto a = fresh(cfg), b = fresh(cfg);
    a.stage = b.stage = s;
    auto ba = next_batch(a, fixture().examples), bb = next_batch(b, fixture().examples);
    CHECK(torch::equal(ba.mix, bb.mix));
    CHECK(train_step(a, ba) == train_step(b, bb));
    CHECK(a.store_hashes() == b.store_hashes());
  }
}

TEST_CASE("checkpoint round trip and resume equivalence") {
  auto dir = bgvc::testing::scratch_dir("ckpt");
  auto cfg = bgvc::testing::tiny_config();
  cfg.train.steps_joint = 10;
  const auto plan = plan_for(Stage::joint, cfg);

  auto straight = fresh(cfg);
  std::vector<StepLog> log_a;
  run_stage(plan, straight, fixture().examples, {std::nullopt, [&](const StepLog& s) { log_a.push_back(s); }});

  auto first = fresh(cfg);
  std::vector<StepLog> log_b;
  auto sink = [&](const StepLog& s) { log_b.push_back(s); };
  run_stage(plan, first, fixture().examples, {5, sink});
  save_checkpoint(first, dir / "half.ckpt");
  auto resumed = load_checkpoint(dir / "half.ckpt", &cfg);
  CHECK(resumed.store_hashes() == first.store_hashes());
  CHECK(resumed.step == 5);
  CHECK(resumed.stage_step == 5);
  CHECK(resumed.stage == Stage::joint);
  CHECK(resumed.rng.state() == first.rng.state());
  CHECK(resumed.history.size() == first.history.size());
  CHECK(resumed.speakers() == first.speakers());
  run_stage(plan, resumed, fixture().examples, {std::nullopt, sink});

  REQUIRE(log_a.size() == 10);
  REQUIRE(log_b.size() == 10);
  for (size_t i = 0; i < 10; ++i) {
    CHECK(log_a[i].step == log_b[i].step);
    CHECK(log_a[i].terms == log_b[i].terms);
  }
  CHECK(straight.store_hashes() == resumed.store_hashes());
}

TEST_CASE("checkpoint errors") {
  auto dir = bgvc::testing::scratch_dir("ckpt_bad");
  auto cfg = bgvc::testing::tiny_config();
  auto st = fresh(cfg);
  save_checkpoint(st, dir / "a.ckpt");

  auto other = cfg;
  other.model.separator.channels = {4, 4};
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt", &other), ConfigError);

  std::vector<char> bytes;
  {
    std::ifstream in(dir / "a.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes[bytes.size() / 2] ^= 0x11;
  std::ofstream(dir / "b.ckpt", std::ios::binary).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(load_checkpoint(dir / "b.ckpt"), FormatError);
  bytes[8] = 7;
  std::ofstream(dir / "c.ckpt", std::ios::binary).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(load_checkpoint(dir / "c.ckpt"), FormatError);
}

TEST_CASE("plan and state must agree") {
  auto cfg = bgvc::testing::tiny_config();
  auto st = fresh(cfg);
  auto plan = plan_for(Stage::ss_only, cfg);
  plan.frozen.erase(store::vc);
  CHECK_THROWS_AS(run_stage(plan, st, fixture().examples), ConfigError);
  st.stage = Stage::ss_only;
  CHECK_THROWS_AS(step_joint(st, next_batch(st, fixture().examples)), ConfigError);
  CHECK_THROWS_AS(next_batch(st, {}), DataError);
}

TEST_CASE("non-finite losses abort with the term named") {
  auto cfg = bgvc::testing::tiny_config();
  auto st = fresh(cfg);
  st.stage = Stage::ss_only;
  {
    torch::NoGradGuard ng;
    st.separator->parameters()[0].fill_(std::nan(""));
  }
  try {
    train_step(st, next_batch(st, fixture().examples));
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("ss_") != std::string::npos);
  }
}

TEST_CASE("log records round trip") {
  auto dir = bgvc::testing::scratch_dir("log");
  StepLog a{3, Stage::ss_only, {{t::ss_s, 0.25}, {t::ss_b, 0.5}, {t::total, 0.75}}};
  StepLog b{4, Stage::joint, {{t::rec_uni, 1.0 / 3.0}, {t::total, 15.0}}};
  {
    JsonlLog log(dir / "train.jsonl");
    log.write(a);
  }
  {
    JsonlLog log(dir / "train.jsonl", true);
    log.write(b);
  }
  auto back = read_log(dir / "train.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].stage == Stage::ss_only);
  CHECK(back[1].terms == b.terms);
  CHECK(back[1].step == 4);
  std::ofstream(dir / "bad.jsonl") << "{\"step\": 1}\n";
  CHECK_THROWS_AS(read_log(dir / "bad.jsonl"), FormatError);
}

} // TEST_SUITE
