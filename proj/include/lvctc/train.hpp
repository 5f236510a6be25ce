#pragma once

// Step-based training on freshly generated synthetic batches, validation
// decoding, metrics logging and checkpointing.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lvctc/checkpoint.hpp"
#include "lvctc/config.hpp"
#include "lvctc/decoding.hpp"

namespace lvctc {

struct TrainingBatch {
  std::vector<Utterance> utterances;
  Batch batch;
};

// Utterances of step `step` (1-based), drawn from a stream keyed by (seed, step).
TrainingBatch training_batch(const SyntheticTask &task, const RunConfig &config, std::uint64_t step);

struct StepResult {
  LossResult losses;
  double lr = 0.0;
};

// One optimizer step maximizing the objective. Throws NumericalError naming
// the batch when the objective is not finite.
StepResult train_step(TrainableModel &model, OptimizerState &state, const TrainingBatch &batch,
                      const RunConfig &config, std::uint64_t step);

struct EvaluationResult {
  double greedy_error = 0.0;
  double iterative_error = 0.0;
  double greedy_edit_mean = 0.0;
  double iterative_edit_mean = 0.0;
  std::size_t utterances = 0;
  std::vector<TokenSequence> greedy, iterative;
};

EvaluationResult evaluate(const LvCtcModel &model, const std::vector<Utterance> &utterances,
                          std::size_t iterations, std::size_t threads = 1);

struct TrainSummary {
  std::uint64_t final_step = 0;
  std::optional<double> best_valid_error;
  LossBreakdown last;
};

// Runs config.train.steps steps in config.out_dir. With `resume`, continues
// from <out_dir>/checkpoint_latest.lvctc when it exists.
TrainSummary run_training(const RunConfig &config, bool resume, std::ostream &log);

std::string metrics_path(const RunConfig &config);
std::string latest_checkpoint_path(const RunConfig &config);
std::string best_checkpoint_path(const RunConfig &config);

}  // namespace lvctc
