#include "bgvc/training.hpp"

#include <cmath>
#include <numeric>

#include <torch/torch.h>

#include "bgvc/blob.hpp"
#include "bgvc/error.hpp"

namespace bgvc::train {

namespace t = losses::term;

StagePlan plan_for(Stage stage, const RunConfig& cfg) {
  StagePlan p;
  p.stage = stage;
  p.optim = cfg.train.optim;
  p.frozen = {store::extractor};
  switch (stage) {
  case Stage::vc_only:
    p.frozen.insert(store::separator);
    p.active_terms = {t::rec_vc, t::adv_gen, t::fm, t::adv_dis, t::total};
    p.steps = cfg.train.steps_vc;
    break;
  case Stage::ss_only:
    p.frozen.insert({store::vc, store::discriminator});
    p.active_terms = {t::ss_s, t::ss_b, t::total};
    p.steps = cfg.train.steps_ss;
    break;
  case Stage::joint:
    p.active_terms = {t::rec_uni, t::total};
    if (cfg.train.ablation != Ablation::ss_loss)
      p.active_terms.insert({t::ss_s, t::ss_b});
    if (cfg.train.ablation != Ablation::vc_loss)
      p.active_terms.insert({t::rec_vc, t::adv_gen, t::fm, t::adv_dis});
    else
      p.frozen.insert(store::discriminator);
    p.steps = cfg.train.steps_joint;
    break;
  }
  return p;
}

std::vector<StagePlan> schedule(const RunConfig& cfg) {
  std::vector<StagePlan> out{plan_for(Stage::vc_only, cfg), plan_for(Stage::ss_only, cfg)};
  if (cfg.train.ablation != Ablation::no_joint)
    out.push_back(plan_for(Stage::joint, cfg));
  return out;
}

nlohmann::json to_json(const StepLog& s) {
  return {{"step", s.step}, {"stage", to_string(s.stage)}, {"terms", s.terms}};
}

StepLog step_log_from_json(const nlohmann::json& j) {
  try {
    StepLog s;
    s.step = j.at("step").get<int64_t>();
    s.stage = parse_stage(j.at("stage").get<std::string>());
    s.terms = j.at("terms").get<losses::LossBreakdown>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("training log: bad record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

TrainState::TrainState(const RunConfig& cfg, std::vector<std::string> speakers)
    : TrainState(cfg, std::move(speakers), bn::ExtractorHandle::seeded(cfg.model.extractor)) {}

TrainState::TrainState(const RunConfig& cfg, std::vector<std::string> speakers,
                       bn::ExtractorHandle ex)
    : extractor(std::move(ex)), rng(cfg.seed), cfg_(cfg) {
  cfg_.validate();
  if (speakers.empty())
    throw ConfigError("training: no speakers");
  if (!(extractor.config() == cfg_.model.extractor))
    throw ConfigError("training: extractor config differs from the run config");
  if (cfg_.train.determinism)
    torch::set_num_threads(1);
  separator = sep::make_separator(cfg_.model.separator, cfg_.model.frames);
  vc = vc::make_vc_model(cfg_.model.vc, vc::SpeakerTable(std::move(speakers)));
  disc = vc::make_discriminators(cfg_.model.vc);
  vc::check_compatible(separator, extractor, vc);
  build_optimizers();
}

void TrainState::build_optimizers() {
  const auto& o = cfg_.train.optim;
  auto opts = [&] { return torch::optim::AdamOptions(o.lr).betas({o.beta1, o.beta2}); };
  opt_ss = std::make_unique<torch::optim::Adam>(separator->parameters(), opts());
  opt_vc = std::make_unique<torch::optim::Adam>(vc->parameters(), opts());
  opt_disc = std::make_unique<torch::optim::Adam>(disc->parameters(), opts());
}

std::map<std::string, uint64_t> TrainState::store_hashes() const {
  return {{store::separator, blob::hash_module(*separator)},
          {store::vc, blob::hash_module(*vc)},
          {store::discriminator, blob::hash_module(*disc)},
          {store::extractor, extractor.param_hash()}};
}

// ---------------------------------------------------------------------------

data::Batch next_batch(TrainState& st, const std::vector<data::TrainingExample>& examples) {
  if (examples.empty())
    throw DataError("training: no examples");
  const auto& cfg = st.config();
  const size_t n = examples.size();
  const size_t b = size_t(cfg.train.batch_size);
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<const data::TrainingExample*> picked;
  for (size_t i = 0; i < b; ++i) {
    if (n >= b) {
      // partial Fisher-Yates: distinct examples within a batch
      std::swap(idx[i], idx[i + st.rng.below(n - i)]);
      picked.push_back(&examples[idx[i]]);
    } else {
      picked.push_back(&examples[st.rng.below(n)]);
    }
  }
  data::BatchOptions bo;
  bo.crop_samples = cfg.train.crop_samples;
  bo.pad_short = cfg.train.pad_short;
  bo.frames = cfg.model.frames;
  bo.mel = cfg.model.mel;
  return data::make_batch(picked, bo, st.rng);
}

namespace {

void require_finite(const std::string& name, const torch::Tensor& v, int64_t step) {
  const double x = v.item<double>();
  if (!std::isfinite(x))
    throw NumericError(name, "non-finite loss term '" + name + "' (" + std::to_string(x) +
                                 ") at step " + std::to_string(step));
}

// every term first, so a failure names the term rather than the total
void require_finite(const std::map<std::string, torch::Tensor>& parts,
                    const torch::Tensor& total, int64_t step) {
  for (const auto& [k, v] : parts)
    require_finite(k, v, step);
  require_finite(t::total, total, step);
}

void require_finite_grads(const std::string& store_name, torch::nn::Module& m, int64_t step) {
  for (const auto& p : m.named_parameters()) {
    const auto& g = p.value().grad();
    if (g.defined() && !torch::isfinite(g).all().item<bool>())
      throw NumericError("grad:" + store_name, "non-finite gradient in " + store_name + "." +
                                                   p.key() + " at step " +
                                                   std::to_string(step));
  }
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups())
    static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

double current_lr(const TrainState& st) {
  const auto& o = st.config().train.optim;
  return o.lr * std::pow(o.lr_decay, double(st.step));
}

torch::Tensor speaker_indices(const TrainState& st, const data::Batch& b) {
  std::vector<int64_t> idx;
  for (const auto& s : b.speaker_ids)
    idx.push_back(st.speakers().index_of(s));
  return torch::tensor(idx, torch::kInt64);
}

torch::Tensor generate_batch(TrainState& st, const torch::Tensor& speech,
                             const torch::Tensor& speakers) {
  auto feats = st.extractor.extract_batch(speech);
  auto hidden = st.vc->encoder->forward(feats);
  auto wave = st.vc->generator->forward(hidden, speakers);
  return vc::fit_length(wave, speech.size(1));
}

std::vector<std::vector<torch::Tensor>> detached(const std::vector<std::vector<torch::Tensor>>& v) {
  auto out = v;
  for (auto& d : out)
    for (auto& l : d)
      l = l.detach();
  return out;
}

struct Separated {
  torch::Tensor est_s, est_b; // complex [B, T, F]
  torch::Tensor speech, background; // [B, L]
};

Separated separate_batch(TrainState& st, const data::Batch& b) {
  const auto& frames = st.config().model.frames;
  auto masks = st.separator->forward(b.mix_spec);
  Separated s;
  s.est_s = dsp::apply_crm(b.mix_spec, masks.speech);
  s.est_b = dsp::apply_crm(b.mix_spec, masks.background);
  s.speech = dsp::istft(s.est_s, frames, b.mix.size(1));
  s.background = dsp::istft(s.est_b, frames, b.mix.size(1));
  return s;
}

// adversarial + feature-matching terms on the generator side
void add_gan_terms(TrainState& st, const torch::Tensor& real, const torch::Tensor& fake,
                   std::map<std::string, torch::Tensor>& parts) {
  auto r = st.disc->forward(real);
  auto f = st.disc->forward(fake);
  parts[t::adv_gen] = losses::adv_gen(f.scores);
  parts[t::fm] = losses::feat_match(detached(r.layers), f.layers);
}

torch::Tensor discriminator_step(TrainState& st, const torch::Tensor& real,
                                 const torch::Tensor& fake, double lr) {
  st.opt_disc->zero_grad();
  auto r = st.disc->forward(real);
  auto f = st.disc->forward(fake.detach());
  auto loss = losses::adv_dis(r.scores, f.scores);
  require_finite(t::adv_dis, loss, st.step + 1);
  loss.backward();
  require_finite_grads(store::discriminator, *st.disc, st.step + 1);
  set_lr(*st.opt_disc, lr);
  st.opt_disc->step();
  return loss.detach();
}

losses::LossBreakdown finish(const std::map<std::string, torch::Tensor>& parts,
                             const losses::MtlWeights& w, int64_t step) {
  losses::LossBreakdown out;
  for (const auto& [k, v] : parts) {
    require_finite(k, v, step);
    out[k] = v.item<double>();
  }
  out[t::total] = losses::mtl_total(out, w);
  return out;
}

losses::LossBreakdown step_vc_only(TrainState& st, const data::Batch& b) {
  const auto& cfg = st.config();
  const double lr = current_lr(st);
  torch::Tensor input;
  if (cfg.train.vc_input_clean) {
    input = b.clean;
  } else {
    torch::NoGradGuard no_grad;
    input = separate_batch(st, b).speech;
  }
  auto gen = generate_batch(st, input, speaker_indices(st, b));

  std::map<std::string, torch::Tensor> parts;
  parts[t::rec_vc] = losses::rec_vc(dsp::log_mel(gen, cfg.model.mel, cfg.model.frames),
                                    b.clean_mel);
  add_gan_terms(st, b.clean, gen, parts);
  const losses::MtlWeights w{0.0, 0.0, 1.0};
  auto total = losses::mtl_total(parts, w);
  require_finite(parts, total, st.step + 1);

  st.opt_vc->zero_grad();
  st.opt_disc->zero_grad();
  total.backward();
  require_finite_grads(store::vc, *st.vc, st.step + 1);
  set_lr(*st.opt_vc, lr);
  st.opt_vc->step();
  auto dis = discriminator_step(st, b.clean, gen, lr);

  auto out = finish(parts, w, st.step + 1);
  out[t::adv_dis] = dis.item<double>();
  return out;
}

losses::LossBreakdown step_ss_only(TrainState& st, const data::Batch& b) {
  const auto& cfg = st.config();
  const double lr = current_lr(st);
  auto masks = st.separator->forward(b.mix_spec);
  std::map<std::string, torch::Tensor> parts;
  parts[t::ss_s] = losses::plcpa_asym(dsp::apply_crm(b.mix_spec, masks.speech),
                                      b.clean_spec, cfg.plcpa);
  parts[t::ss_b] = losses::plcpa_asym(dsp::apply_crm(b.mix_spec, masks.background),
                                      b.background_spec, cfg.plcpa);
  const losses::MtlWeights w{0.0, 1.0, 0.0};
  auto total = losses::mtl_total(parts, w);
  require_finite(parts, total, st.step + 1);
  st.opt_ss->zero_grad();
  total.backward();
  require_finite_grads(store::separator, *st.separator, st.step + 1);
  set_lr(*st.opt_ss, lr);
  st.opt_ss->step();
  return finish(parts, w, st.step + 1);
}

} // namespace

losses::LossBreakdown step_joint(TrainState& st, const data::Batch& b) {
  if (st.stage != Stage::joint)
    throw ConfigError("step_joint: joint stage is not active");
  const auto& cfg = st.config();
  const bool with_ss = cfg.train.ablation != Ablation::ss_loss;
  const bool with_vc = cfg.train.ablation != Ablation::vc_loss;
  losses::MtlWeights w = cfg.weights;
  if (!with_ss)
    w.ss = 0.0;
  if (!with_vc)
    w.vc = 0.0;
  const double lr = current_lr(st);
  const auto& mel = cfg.model.mel;
  const auto& frames = cfg.model.frames;

  auto sep = separate_batch(st, b);
  auto gen = generate_batch(st, sep.speech, speaker_indices(st, b));

  std::map<std::string, torch::Tensor> parts;
  parts[t::rec_uni] = losses::rec_uni(dsp::log_mel(gen + sep.background, mel, frames), b.mix_mel);
  if (with_ss) {
    parts[t::ss_s] = losses::plcpa_asym(sep.est_s, b.clean_spec, cfg.plcpa);
    parts[t::ss_b] = losses::plcpa_asym(sep.est_b, b.background_spec, cfg.plcpa);
  }
  if (with_vc) {
    parts[t::rec_vc] = losses::rec_vc(dsp::log_mel(gen, mel, frames), b.clean_mel);
    add_gan_terms(st, b.clean, gen, parts);
  }
  auto total = losses::mtl_total(parts, w);
  require_finite(parts, total, st.step + 1);

  st.opt_ss->zero_grad();
  st.opt_vc->zero_grad();
  st.opt_disc->zero_grad();
  total.backward();
  require_finite_grads(store::separator, *st.separator, st.step + 1);
  require_finite_grads(store::vc, *st.vc, st.step + 1);
  set_lr(*st.opt_ss, lr);
  set_lr(*st.opt_vc, lr);
  st.opt_ss->step();
  st.opt_vc->step();

  auto out = finish(parts, w, st.step + 1);
  if (with_vc)
    out[t::adv_dis] = discriminator_step(st, b.clean, gen, lr).item<double>();
  else
    st.opt_disc->zero_grad();
  return out;
}

losses::LossBreakdown train_step(TrainState& st, const data::Batch& batch) {
  losses::LossBreakdown out;
  switch (st.stage) {
  case Stage::vc_only:
    out = step_vc_only(st, batch);
    break;
  case Stage::ss_only:
    out = step_ss_only(st, batch);
    break;
  case Stage::joint:
    out = step_joint(st, batch);
    break;
  }
  return out;
}

void run_stage(const StagePlan& plan, TrainState& st,
               const std::vector<data::TrainingExample>& examples, const RunOptions& opts) {
  const auto expected = plan_for(plan.stage, st.config());
  if (plan.frozen != expected.frozen || plan.active_terms != expected.active_terms ||
      !(plan.optim == st.config().train.optim))
    throw ConfigError("run_stage: plan for stage '" + to_string(plan.stage) +
                      "' is inconsistent with the state's config");
  if (st.stage != plan.stage) {
    st.stage = plan.stage;
    st.stage_step = 0;
  }
  const auto before = st.store_hashes();
  auto check_frozen = [&] {
    const auto now = st.store_hashes();
    for (const auto& name : plan.frozen)
      if (now.at(name) != before.at(name))
        throw Error("training: frozen store '" + name + "' changed during stage '" +
                    to_string(plan.stage) + "' at step " + std::to_string(st.step));
  };
  const int64_t every = std::max<int64_t>(1, st.config().train.freeze_check_every);
  const size_t keep = size_t(std::max<int64_t>(0, st.config().train.history));

  int64_t done = 0;
  while (st.stage_step < plan.steps && (!opts.max_steps || done < *opts.max_steps)) {
    auto batch = next_batch(st, examples);
    auto terms = train_step(st, batch);
    ++st.step;
    ++st.stage_step;
    ++done;
    for (const auto& [k, v] : terms)
      if (!plan.active_terms.count(k))
        throw Error("training: unexpected loss term '" + k + "' in stage '" +
                    to_string(plan.stage) + "'");
    StepLog rec{st.step, plan.stage, std::move(terms)};
    st.history.push_back(rec);
    while (st.history.size() > keep)
      st.history.pop_front();
    if (opts.sink)
      opts.sink(rec);
    if (st.stage_step % every == 0)
      check_frozen();
  }
  check_frozen();
}

// ---------------------------------------------------------------------------

JsonlLog::JsonlLog(const std::filesystem::path& path, bool append) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_)
    throw DataError("training log: cannot open " + path.string());
}

void JsonlLog::write(const StepLog& s) {
  out_ << to_json(s).dump() << '\n';
  out_.flush();
}

std::vector<StepLog> read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw DataError("training log: cannot open " + path.string());
  std::vector<StepLog> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    try {
      out.push_back(step_log_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("training log: " + std::string(e.what()));
    }
  }
  return out;
}

namespace {

void append_optimizer(blob::Blob& b, nlohmann::json& meta, const std::string& name,
                      torch::optim::Adam& opt) {
  nlohmann::json steps = nlohmann::json::array();
  const auto& params = opt.param_groups().at(0).params();
  for (size_t i = 0; i < params.size(); ++i) {
    auto it = opt.state().find(params[i].unsafeGetTensorImpl());
    if (it == opt.state().end()) {
      steps.push_back(-1);
      continue;
    }
    auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
    steps.push_back(s.step());
    const std::string key = "opt." + name + "." + std::to_string(i);
    b.tensors.emplace_back(key + ".exp_avg", s.exp_avg().detach().clone());
    b.tensors.emplace_back(key + ".exp_avg_sq", s.exp_avg_sq().detach().clone());
  }
  meta[name] = steps;
}

void restore_optimizer(const blob::Blob& b, const nlohmann::json& meta, const std::string& name,
                       torch::optim::Adam& opt) {
  const auto& params = opt.param_groups().at(0).params();
  const auto& steps = meta.at(name);
  if (steps.size() != params.size())
    throw ConfigError("checkpoint: optimizer '" + name + "' size differs (architecture mismatch)");
  for (size_t i = 0; i < params.size(); ++i) {
    const int64_t step = steps[i].get<int64_t>();
    if (step < 0)
      continue;
    const std::string key = "opt." + name + "." + std::to_string(i);
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step);
    s->exp_avg(b.tensor(key + ".exp_avg").clone());
    s->exp_avg_sq(b.tensor(key + ".exp_avg_sq").clone());
    if (s->exp_avg().sizes() != params[i].sizes())
      throw ConfigError("checkpoint: optimizer state shape mismatch for " + key);
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

} // namespace

void save_checkpoint(const TrainState& st, const std::filesystem::path& path) {
  blob::Blob b;
  b.kind = "train_state";
  b.header["config"] = config_to_json(st.config());
  b.header["speakers"] = st.speakers().ids();
  b.header["step"] = st.step;
  b.header["stage_step"] = st.stage_step;
  b.header["stage"] = to_string(st.stage);
  b.header["rng"] = st.rng.state();
  b.header["extractor_provenance"] =
      st.extractor.provenance() == bn::Provenance::externally_loaded ? "external" : "seeded";
  auto& hist = b.header["history"] = nlohmann::json::array();
  for (const auto& h : st.history)
    hist.push_back(to_json(h));
  blob::append_module(b, store::separator, *st.separator);
  blob::append_module(b, store::vc, *st.vc);
  blob::append_module(b, store::discriminator, *st.disc);
  blob::append_module(b, store::extractor, st.extractor.module());
  nlohmann::json meta;
  append_optimizer(b, meta, "ss", *st.opt_ss);
  append_optimizer(b, meta, "vc", *st.opt_vc);
  append_optimizer(b, meta, "disc", *st.opt_disc);
  b.header["optimizers"] = meta;
  blob::write(path, b);
}

TrainState load_checkpoint(const std::filesystem::path& path, const RunConfig* expected) {
  auto b = blob::read(path, "train_state");
  RunConfig cfg;
  std::vector<std::string> speakers;
  try {
    cfg = parse_config(b.header.at("config"));
    speakers = b.header.at("speakers").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  if (expected) {
    if (!(expected->model == cfg.model))
      throw ConfigError("checkpoint: architecture config in " + path.string() +
                        " does not match the requested config");
    // training hyperparameters may legitimately change between runs
    RunConfig merged = *expected;
    merged.model = cfg.model;
    cfg = merged;
  }
  const auto prov = b.header.value("extractor_provenance", "seeded") == "external"
                        ? bn::Provenance::externally_loaded
                        : bn::Provenance::seeded_default;
  TrainState st(cfg, speakers,
                bn::ExtractorHandle::restore(cfg.model.extractor, b, store::extractor, prov));
  blob::load_module(b, store::separator, *st.separator);
  blob::load_module(b, store::vc, *st.vc);
  blob::load_module(b, store::discriminator, *st.disc);
  try {
    st.step = b.header.at("step").get<int64_t>();
    st.stage_step = b.header.at("stage_step").get<int64_t>();
    st.stage = parse_stage(b.header.at("stage").get<std::string>());
    st.rng.set_state(b.header.at("rng").get<std::string>());
    for (const auto& h : b.header.at("history"))
      st.history.push_back(step_log_from_json(h));
    const auto& meta = b.header.at("optimizers");
    restore_optimizer(b, meta, "ss", *st.opt_ss);
    restore_optimizer(b, meta, "vc", *st.opt_vc);
    restore_optimizer(b, meta, "disc", *st.opt_disc);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  return st;
}

vc::Pipeline pipeline_of(TrainState& st) { return {st.separator, st.extractor, st.vc}; }

} // namespace bgvc::train
