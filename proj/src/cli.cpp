#include "bgvc/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "bgvc/blob.hpp"
#include "bgvc/config.hpp"
#include "bgvc/data.hpp"
#include "bgvc/error.hpp"
#include "bgvc/evaluation.hpp"
#include "bgvc/training.hpp"
#include "bgvc/wav_io.hpp"

namespace bgvc::cli {

namespace fs = std::filesystem;

namespace {

void write_json_file(const fs::path& p, const nlohmann::json& j) {
  if (p.has_parent_path())
    fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os)
    throw DataError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

std::string hex_hashes(const std::map<std::string, uint64_t>& h, nlohmann::json& out) {
  std::ostringstream os;
  for (const auto& [k, v] : h) {
    out[k] = blob::hex(v);
    os << k << ' ' << blob::hex(v) << '\n';
  }
  return os.str();
}

RunConfig resolve_config(const std::string& flag) {
  std::string path = flag;
  if (path.empty())
    if (const char* env = std::getenv(kConfigEnv); env && *env)
      path = env;
  return path.empty() ? parse_config(nlohmann::json::object()) : load_config(path);
}

// ---------------------------------------------------------------------------

struct MakeToyArgs {
  std::string out;
  uint64_t seed = data::ToyCorpusOptions{}.seed;
  int speakers = 2, utterances = 4, backgrounds = 4;
  double seconds = 2.0;
};

int cmd_make_toy(const MakeToyArgs& a, std::ostream& out) {
  data::ToyCorpusOptions o;
  o.seed = a.seed;
  o.speakers = a.speakers;
  o.utterances_per_speaker = a.utterances;
  o.backgrounds = a.backgrounds;
  o.seconds = a.seconds;
  auto corpus = data::make_toy_corpus(o);
  data::write_toy_corpus(a.out, corpus);
  out << "wrote " << corpus.manifest.size() << " utterances to " << a.out << '\n';
  return ok;
}

struct MixArgs {
  std::string speech, background, out;
  std::optional<int64_t> n;
  uint64_t seed = 0;
  double snr_min = 0.0, snr_max = 10.0;
  bool wrap = false;
};

int cmd_mix(const MixArgs& a, std::ostream& out) {
  auto speech = data::Manifest::load(a.speech).of_kind(data::Kind::speech);
  auto background = data::Manifest::load(a.background).of_kind(data::Kind::background);
  if (a.n && *a.n < 0)
    throw ConfigError("mix: --n must be non-negative");
  const size_t n = a.n ? size_t(*a.n) : speech.size();

  std::map<std::string, dsp::Waveform> cache;
  auto audio_of = [&](const data::ManifestRecord& r) -> const dsp::Waveform& {
    auto it = cache.find(r.utterance_id);
    if (it == cache.end())
      it = cache.emplace(r.utterance_id, audio::read_wav(r.audio_path)).first;
    return it->second;
  };
  std::vector<data::MixSpec> specs;
  if (n > 0)
    specs = data::sample_mixes(
        speech, background, n, a.snr_min, a.snr_max, a.seed,
        [&](const data::ManifestRecord& r) { return audio_of(r).size(); }, a.wrap);

  const fs::path dir = a.out;
  fs::create_directories(dir / "mixtures");
  fs::create_directories(dir / "specs");
  std::vector<data::ExampleRecord> records;
  data::MixOptions mo;
  mo.wrap_background = a.wrap;
  for (size_t i = 0; i < specs.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "mix%05zu", i);
    const auto& s = speech.find(specs[i].speech_id);
    const auto& b = background.find(specs[i].background_id);
    auto ex = data::mix_at_snr(audio_of(s), audio_of(b), specs[i], mo);
    data::ExampleRecord r;
    r.utterance_id = id;
    r.mix_path = dir / "mixtures" / (std::string(id) + "_mix.wav");
    r.speech_path = dir / "mixtures" / (std::string(id) + "_speech.wav");
    r.background_path = dir / "mixtures" / (std::string(id) + "_background.wav");
    r.speaker_id = s.speaker_id;
    r.spec = specs[i];
    r.gain = ex.gain;
    r.norm_scale = ex.norm_scale;
    audio::write_wav(r.mix_path, ex.mix);
    audio::write_wav(r.speech_path, ex.clean_speech);
    audio::write_wav(r.background_path, ex.background);
    write_json_file(dir / "specs" / (std::string(id) + ".json"), data::to_json(specs[i]));
    records.push_back(std::move(r));
  }
  data::save_example_manifest(dir / "mixtures.jsonl", records);
  out << "wrote " << records.size() << " mixtures to " << (dir / "mixtures.jsonl").string()
      << '\n';
  return ok;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, run_dir, stage = "all", ablate;
  std::optional<uint64_t> seed;
  std::optional<int64_t> steps, batch_size;
  std::optional<double> lr;
  bool resume = false;
};

std::vector<data::TrainingExample> load_examples(const fs::path& manifest) {
  std::vector<data::TrainingExample> out;
  for (const auto& r : data::load_example_manifest(manifest))
    out.push_back(data::load_example(r));
  if (out.empty())
    throw DataError("train: no mixtures in " + manifest.string());
  return out;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = resolve_config(a.config);
  if (a.seed)
    cfg.seed = *a.seed;
  if (!a.ablate.empty())
    cfg.train.ablation = parse_ablation(a.ablate);
  if (a.batch_size)
    cfg.train.batch_size = *a.batch_size;
  if (a.lr)
    cfg.train.optim.lr = *a.lr;
  std::vector<Stage> stages;
  if (a.stage == "all") {
    for (const auto& p : train::schedule(cfg))
      stages.push_back(p.stage);
  } else {
    stages.push_back(parse_stage(a.stage));
    if (stages.back() == Stage::joint && cfg.train.ablation == Ablation::no_joint)
      throw ConfigError("train: --stage joint contradicts --ablate no-joint");
  }
  if (a.steps)
    for (Stage s : stages)
      (s == Stage::vc_only ? cfg.train.steps_vc
                           : s == Stage::ss_only ? cfg.train.steps_ss : cfg.train.steps_joint) =
          *a.steps;
  cfg.validate();

  const fs::path run = a.run_dir;
  const fs::path latest = run / "checkpoints" / "latest.ckpt";
  auto examples = load_examples(a.data);
  std::set<std::string> spk;
  for (const auto& e : examples)
    spk.insert(e.speaker_id);

  const bool resuming = fs::exists(latest) && (a.resume || a.stage != "all");
  std::optional<train::TrainState> st;
  if (resuming)
    st.emplace(train::load_checkpoint(latest, &cfg));
  else
    st.emplace(cfg, std::vector<std::string>(spk.begin(), spk.end()));
  for (const auto& s : spk)
    if (!st->speakers().contains(s))
      throw ConfigError("train: speaker '" + s + "' is not in the checkpoint's speaker table");

  write_json_file(run / "config.json", config_to_json(cfg));
  nlohmann::json manifest;
  manifest["seed"] = cfg.seed;
  manifest["data"] = fs::absolute(a.data).string();
  manifest["stages"] = nlohmann::json::array();
  for (Stage s : stages)
    manifest["stages"].push_back(to_string(s));
  manifest["ablation"] = to_string(cfg.train.ablation);
  manifest["resumed_from_step"] = resuming ? st->step : 0;

  train::JsonlLog log(run / "logs" / "train.jsonl", resuming);
  train::RunOptions ro;
  ro.sink = [&](const train::StepLog& s) { log.write(s); };
  for (Stage s : stages) {
    auto plan = train::plan_for(s, cfg);
    // a stage that already finished is rerun from its start when named explicitly
    if (a.stage != "all" && st->stage == s && st->stage_step >= plan.steps)
      st->stage_step = 0;
    train::run_stage(plan, *st, examples, ro);
    train::save_checkpoint(*st, run / "checkpoints" / (to_string(s) + ".ckpt"));
    train::save_checkpoint(*st, latest);
    out << "stage " << to_string(s) << " done at step " << st->step << '\n';
  }
  nlohmann::json hashes;
  hex_hashes(st->store_hashes(), hashes);
  manifest["store_hashes"] = hashes;
  manifest["final_step"] = st->step;
  write_json_file(run / "run.json", manifest);
  return ok;
}

// ---------------------------------------------------------------------------

struct ConvertArgs {
  std::string checkpoint, out, target;
  std::vector<std::string> inputs;
  bool keep_background = true;
  bool identity_vc = false, identity_masks = false, resample = false;
};

int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  auto st = train::load_checkpoint(a.checkpoint);
  auto models = train::pipeline_of(st);
  models.vc->speakers().index_of(a.target);
  vc::ConvertOptions opts;
  opts.separation.identity_masks = a.identity_masks;
  if (a.identity_vc)
    opts.vc_override = [](const dsp::Waveform& w) { return w; };
  audio::ReadOptions ro;
  ro.resample = a.resample;
  for (const auto& in : a.inputs) {
    auto mix = audio::read_wav(in, ro);
    auto r = vc::convert(mix, a.target, a.keep_background, models, opts);
    const fs::path dst = fs::path(a.out) / (fs::path(in).stem().string() + ".wav");
    audio::write_wav(dst, r.output);
    out << in << " -> " << dst.string() << '\n';
  }
  return ok;
}

struct EvalArgs {
  std::string checkpoint, manifest, out, pesq_cmd, log, system = "proposed";
  bool oracle = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const fs::path dir = a.out;
  eval::EvalOptions opts;
  opts.system = a.system;
  if (!a.pesq_cmd.empty())
    opts.pesq = eval::external_scorer(a.pesq_cmd);
  eval::EvalReport rep;
  std::optional<train::TrainState> st;
  if (a.oracle) {
    opts.scratch_dir = dir / "estimates";
    const auto records = data::load_example_manifest(a.manifest);
    size_t next = 0;
    // the estimator sees only the mixture; references are looked up in manifest order
    rep = eval::evaluate(
        records,
        [&](const dsp::Waveform&) {
          auto ex = data::load_example(records.at(next++));
          return std::make_pair(ex.clean_speech, ex.background);
        },
        opts);
    rep.write_csv(dir / "report.csv");
    rep.write_json(dir / "report.json");
  } else {
    if (a.checkpoint.empty())
      throw ConfigError("eval: --checkpoint is required unless --oracle is given");
    rep = eval::evaluate_system(a.checkpoint, a.manifest, dir, opts);
  }
  for (const auto& r : rep.aggregate())
    out << r.system << ' ' << r.target << " si_sdr " << r.si_sdr_db << " dB\n";

  if (!a.log.empty()) {
    std::vector<eval::MelPanels> panels;
    RunConfig cfg;
    if (!a.checkpoint.empty()) {
      st.emplace(train::load_checkpoint(a.checkpoint));
      cfg = st->config();
      const auto records = data::load_example_manifest(a.manifest);
      if (!records.empty()) {
        auto ex = data::load_example(records.front());
        auto models = train::pipeline_of(*st);
        const std::string target = st->speakers().contains(records.front().speaker_id)
                                       ? records.front().speaker_id
                                       : st->speakers().ids().front();
        auto r = vc::convert(ex.mix, target, true, models);
        panels.push_back({records.front().utterance_id, ex.mix, r.separated_speech,
                          r.separated_background, r.converted, r.output});
      }
    }
    auto man = eval::emit_figures(a.log, rep, panels, dir / "figures", {}, cfg.model.mel,
                                  cfg.model.frames);
    out << "figures: " << man.emitted.size() << " emitted, " << man.omitted.size()
        << " omitted\n";
  }
  return ok;
}

struct InspectArgs {
  std::string path;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  auto b = blob::read(a.path);
  nlohmann::json j;
  j["kind"] = b.kind;
  j["version"] = blob::kFormatVersion;
  j["tensors"] = b.tensors.size();
  if (b.kind == "train_state") {
    auto st = train::load_checkpoint(a.path);
    j["step"] = st.step;
    j["stage"] = to_string(st.stage);
    j["stage_step"] = st.stage_step;
    j["speakers"] = st.speakers().ids();
    nlohmann::json h;
    hex_hashes(st.store_hashes(), h);
    j["store_hashes"] = h;
    j["config"] = config_to_json(st.config());
  } else {
    j["header"] = b.header;
  }
  out << j.dump(2) << '\n';
  return ok;
}

} // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Background-sound-aware voice conversion toolkit", "bgvc"};
  app.require_subcommand(1);

  MakeToyArgs toy;
  auto* c_toy = app.add_subcommand("make-toy", "Write the synthetic toy corpus");
  c_toy->add_option("--out", toy.out, "Output directory")->required();
  c_toy->add_option("--seed", toy.seed, "Synthesis seed");
  c_toy->add_option("--speakers", toy.speakers);
  c_toy->add_option("--utterances", toy.utterances, "Utterances per speaker");
  c_toy->add_option("--backgrounds", toy.backgrounds);
  c_toy->add_option("--seconds", toy.seconds, "Speech utterance duration");

  MixArgs mix;
  auto* c_mix = app.add_subcommand("mix", "Mix speech with backgrounds at random SNRs");
  c_mix->add_option("--speech", mix.speech, "Speech manifest (JSON lines)")->required();
  c_mix->add_option("--background", mix.background, "Background manifest")->required();
  c_mix->add_option("--out", mix.out, "Output directory")->required();
  c_mix->add_option("--n", mix.n, "Number of mixtures (default: one per speech utterance)");
  c_mix->add_option("--seed", mix.seed);
  c_mix->add_option("--snr-min", mix.snr_min);
  c_mix->add_option("--snr-max", mix.snr_max);
  c_mix->add_flag("--wrap-background", mix.wrap, "Loop short backgrounds");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Run the staged training schedule");
  c_train->add_option("--config", tr.config, "Config file (default: $BGVC_CONFIG)");
  c_train->add_option("--data", tr.data, "Mixture manifest written by `mix`")->required();
  c_train->add_option("--run-dir", tr.run_dir, "Run directory")->required();
  c_train->add_option("--stage", tr.stage)->check(CLI::IsMember({"vc", "ss", "joint", "all"}));
  c_train->add_option("--ablate", tr.ablate)
      ->check(CLI::IsMember({"ss-loss", "vc-loss", "no-joint"}));
  c_train->add_option("--seed", tr.seed);
  c_train->add_option("--steps", tr.steps, "Step budget for the selected stage(s)");
  c_train->add_option("--batch-size", tr.batch_size);
  c_train->add_option("--lr", tr.lr);
  c_train->add_flag("--resume", tr.resume, "Continue from checkpoints/latest.ckpt");

  ConvertArgs cv;
  auto* c_conv = app.add_subcommand("convert", "Convert the voice in mixture recordings");
  c_conv->add_option("--checkpoint", cv.checkpoint)->required();
  c_conv->add_option("--target-speaker", cv.target)->required();
  c_conv->add_option("--out", cv.out, "Output directory")->required();
  c_conv->add_option("inputs", cv.inputs, "Input WAV files")->required();
  c_conv->add_flag("--keep-background,!--no-background", cv.keep_background,
                   "Add the separated background back (default on)");
  c_conv->add_flag("--identity-vc", cv.identity_vc, "Bypass conversion (diagnostics)");
  c_conv->add_flag("--identity-masks", cv.identity_masks, "Bypass separation (diagnostics)");
  c_conv->add_flag("--resample", cv.resample, "Resample inputs to 16 kHz");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score separation on a mixture manifest");
  c_eval->add_option("--checkpoint", ev.checkpoint);
  c_eval->add_option("--manifest", ev.manifest)->required();
  c_eval->add_option("--out", ev.out)->required();
  c_eval->add_option("--pesq-cmd", ev.pesq_cmd, "External scorer command");
  c_eval->add_option("--log", ev.log, "Training log for figures");
  c_eval->add_option("--system", ev.system, "System name in the report");
  c_eval->add_flag("--oracle", ev.oracle, "Score the references against themselves");

  InspectArgs in;
  auto* c_insp = app.add_subcommand("inspect", "Describe a checkpoint or extractor file");
  c_insp->add_option("path", in.path)->required();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(std::move(rev));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "bgvc: " << e.what() << '\n';
    return usage;
  }

  try {
    if (*c_toy)
      return cmd_make_toy(toy, out);
    if (*c_mix)
      return cmd_mix(mix, out);
    if (*c_train)
      return cmd_train(tr, out);
    if (*c_conv)
      return cmd_convert(cv, out);
    if (*c_eval)
      return cmd_eval(ev, out);
    if (*c_insp)
      return cmd_inspect(in, out);
  } catch (const NumericError& e) {
    err << "bgvc: numeric error in " << e.term() << ": " << e.what() << '\n';
    return numeric;
  } catch (const ConfigError& e) {
    err << "bgvc: config error: " << e.what() << '\n';
    return usage;
  } catch (const DataError& e) {
    err << "bgvc: data error: " << e.what() << '\n';
    return data_error;
  } catch (const ShapeError& e) {
    err << "bgvc: data error: " << e.what() << '\n';
    return data_error;
  } catch (const Error& e) {
    err << "bgvc: error: " << e.what() << '\n';
    return usage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "bgvc: data error: " << e.what() << '\n';
    return data_error;
  }
  return usage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

} // namespace bgvc::cli
