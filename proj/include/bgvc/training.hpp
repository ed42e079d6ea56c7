#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/optim/adam.h>

#include "bgvc/bottleneck.hpp"
#include "bgvc/config.hpp"
#include "bgvc/conversion.hpp"
#include "bgvc/data.hpp"
#include "bgvc/losses.hpp"
#include "bgvc/rng.hpp"
#include "bgvc/separator.hpp"

namespace bgvc::train {

/// Parameter-store names used by freeze sets and checkpoints.
namespace store {
inline const std::string separator = "separator";
inline const std::string vc = "vc";
inline const std::string discriminator = "discriminator";
inline const std::string extractor = "extractor";
} // namespace store

struct StagePlan {
  Stage stage = Stage::joint;
  std::set<std::string> frozen;
  std::set<std::string> active_terms; // terms that appear in this stage's log
  int64_t steps = 0;
  OptimConfig optim;
};

/// The plan for one stage under `cfg` (ablation removals included).
StagePlan plan_for(Stage stage, const RunConfig& cfg);
/// vc_only, ss_only, joint in order; joint is dropped under the no-joint ablation.
std::vector<StagePlan> schedule(const RunConfig& cfg);

struct StepLog {
  int64_t step = 0; // global, 1-based
  Stage stage = Stage::joint;
  losses::LossBreakdown terms;
};

nlohmann::json to_json(const StepLog& s);
StepLog step_log_from_json(const nlohmann::json& j);

/// Every parameter store, the optimizers and the bookkeeping needed to resume.
class TrainState {
public:
  TrainState(const RunConfig& cfg, std::vector<std::string> speakers);
  TrainState(const RunConfig& cfg, std::vector<std::string> speakers,
             bn::ExtractorHandle extractor);

  const RunConfig& config() const { return cfg_; }
  const vc::SpeakerTable& speakers() const { return vc->speakers(); }

  /// Content hash per store.
  std::map<std::string, uint64_t> store_hashes() const;

  sep::Separator separator{nullptr};
  bn::ExtractorHandle extractor;
  vc::VcModel vc{nullptr};
  vc::DiscriminatorSet disc{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_ss, opt_vc, opt_disc;

  int64_t step = 0;       // optimizer steps taken so far, all stages
  int64_t stage_step = 0; // steps taken in the current stage
  Stage stage = Stage::vc_only;
  Rng rng;
  std::deque<StepLog> history; // most recent cfg.train.history entries

private:
  void build_optimizers();
  RunConfig cfg_;
};

/// Draws the next training batch from `examples` with the state's generator.
data::Batch next_batch(TrainState& st, const std::vector<data::TrainingExample>& examples);

/// One optimisation step of `st.stage` on `batch`; the returned breakdown
/// holds every logged term plus "total". Throws NumericError naming the
/// offending term when a loss or gradient is non-finite.
losses::LossBreakdown train_step(TrainState& st, const data::Batch& batch);
/// The joint-stage step (separation, conversion and unified terms together,
/// then one discriminator update).
losses::LossBreakdown step_joint(TrainState& st, const data::Batch& batch);

using LogSink = std::function<void(const StepLog&)>;

struct RunOptions {
  /// Stop after this many steps of the stage even if the budget is not spent.
  std::optional<int64_t> max_steps;
  LogSink sink;
};

/// Runs (or resumes) `plan` on `st` until its step budget is spent. Frozen
/// stores are spot-checked every cfg.train.freeze_check_every steps and at the
/// stage boundary; a changed frozen store throws.
void run_stage(const StagePlan& plan, TrainState& st,
               const std::vector<data::TrainingExample>& examples,
               const RunOptions& opts = {});

/// JSON-lines log of StepLog records.
class JsonlLog {
public:
  explicit JsonlLog(const std::filesystem::path& path, bool append = false);
  void write(const StepLog& s);

private:
  std::ofstream out_;
};

std::vector<StepLog> read_log(const std::filesystem::path& path);

void save_checkpoint(const TrainState& st, const std::filesystem::path& path);
/// Throws FormatError on a corrupt or wrong-version file and ConfigError when
/// `expected` is given and its model config differs from the stored one.
TrainState load_checkpoint(const std::filesystem::path& path,
                           const RunConfig* expected = nullptr);

/// Inference bundle from a training state (shares the parameter stores).
vc::Pipeline pipeline_of(TrainState& st);

} // namespace bgvc::train
