#include "lvctc/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <ostream>
#include <thread>

namespace lvctc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string metrics_path(const RunConfig &config) { return (fs::path(config.out_dir) / "metrics.jsonl").string(); }
std::string latest_checkpoint_path(const RunConfig &config) {
  return (fs::path(config.out_dir) / "checkpoint_latest.lvctc").string();
}
std::string best_checkpoint_path(const RunConfig &config) {
  return (fs::path(config.out_dir) / "checkpoint_best.lvctc").string();
}

TrainingBatch training_batch(const SyntheticTask &task, const RunConfig &config, std::uint64_t step) {
  Rng rng(derive_seed(derive_seed(config.train.seed, "batch"), step));
  TrainingBatch tb;
  for (std::size_t i = 0; i < config.train.batch_size; ++i) {
    tb.utterances.push_back(task.generate(rng, "train-" + std::to_string(step) + "-" + std::to_string(i)));
  }
  tb.batch = make_batch(std::span<const Utterance>(tb.utterances));
  return tb;
}

StepResult train_step(TrainableModel &model, OptimizerState &state, const TrainingBatch &batch,
                      const RunConfig &config, std::uint64_t step) {
  StepResult r;
  ParameterSet &params = model.parameters();
  params.zero_grad();
  const ForwardContext ctx{true, derive_seed(derive_seed(config.train.seed, "step"), step)};
  r.losses = model.compute_losses(batch.batch, config.loss, ctx);
  const double value = r.losses.objective.item();
  if (!std::isfinite(value) || !std::isfinite(r.losses.breakdown.total)) {
    std::string ids;
    for (const auto &id : batch.batch.ids) ids += (ids.empty() ? "" : ",") + id;
    throw NumericalError("non-finite objective at step " + std::to_string(step) + " in batch [" + ids + "]");
  }
  scale(r.losses.objective, -1.0).backward();
  r.lr = noam_lr(step, config.optim.warmup, config.optim.peak_lr);
  adam_step(params, state, r.lr, config.optim.adam);
  return r;
}

EvaluationResult evaluate(const LvCtcModel &model, const std::vector<Utterance> &utterances,
                          std::size_t iterations, std::size_t threads) {
  EvaluationResult r;
  const std::size_t n = utterances.size();
  r.utterances = n;
  r.greedy.resize(n);
  r.iterative.resize(n);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(n, 1));
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < n; i += threads) {
      DecodeTrace trace = decode_iterative(model, utterances[i].features, iterations);
      r.greedy[i] = trace.hypotheses.front();
      r.iterative[i] = trace.final_hypothesis();
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto &t : pool) t.join();
  }
  std::vector<TokenSequence> refs;
  double ge = 0, ie = 0;
  for (std::size_t i = 0; i < n; ++i) {
    refs.push_back(utterances[i].tokens);
    ge += static_cast<double>(edit_distance(refs[i], r.greedy[i]));
    ie += static_cast<double>(edit_distance(refs[i], r.iterative[i]));
  }
  if (n > 0) {
    r.greedy_error = error_rate(refs, r.greedy);
    r.iterative_error = error_rate(refs, r.iterative);
    r.greedy_edit_mean = ge / static_cast<double>(n);
    r.iterative_edit_mean = ie / static_cast<double>(n);
  }
  return r;
}

namespace {

json breakdown_json(const LossBreakdown &b) {
  return json{{"elbo_dec", b.elbo_dec}, {"kl", b.kl},   {"ctc_cp", b.ctc_cp},
              {"ictc_prior", b.ictc_prior}, {"ictc_pst", b.ictc_pst}, {"sd", b.sd},
              {"total", b.total}, {"kl_gated", b.kl_gated}};
}

// Drops records past `step` so a resumed log stays monotonic.
void truncate_log(const std::string &path, std::uint64_t step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> kept;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    if (json::parse(line).value("step", std::uint64_t{0}) <= step) kept.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto &l : kept) out << l << '\n';
}

}  // namespace

TrainSummary run_training(const RunConfig &config, bool resume, std::ostream &log) {
  fs::create_directories(config.out_dir);
  LvCtcModel model(config.model_config(), config.train.seed);
  OptimizerState state;
  std::uint64_t start = 0;
  TrainSummary summary;

  const std::string latest = latest_checkpoint_path(config);
  const std::string timing = (fs::path(config.out_dir) / "timing.jsonl").string();
  if (resume && fs::exists(latest)) {
    Checkpoint ckpt = read_checkpoint(latest);
    load_parameters(ckpt, model.parameters());
    load_optimizer(ckpt, state);
    start = ckpt.step;
    truncate_log(metrics_path(config), start);
    truncate_log(timing, start);
    log << "resuming from step " << start << "\n";
  } else {
    std::ofstream(metrics_path(config), std::ios::trunc);
    std::ofstream(timing, std::ios::trunc);
  }

  SyntheticTask task(config.data);
  const auto valid = task.generate_set(config.train.valid_size, config.train.valid_seed, "valid");
  if (start > 0 && fs::exists(best_checkpoint_path(config))) {
    LvCtcModel best(config.model_config(), config.train.seed);
    load_parameters(read_checkpoint(best_checkpoint_path(config)), best.parameters());
    summary.best_valid_error = evaluate(best, valid, config.train.iterations, config.train.threads).greedy_error;
  }
  std::ofstream metrics(metrics_path(config), std::ios::app);
  std::ofstream timing_log(timing, std::ios::app);

  for (std::uint64_t step = start + 1; step <= config.train.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainingBatch tb = training_batch(task, config, step);
    StepResult r;
    try {
      r = train_step(model, state, tb, config, step);
    } catch (const NumericalError &) {
      std::ofstream dump(fs::path(config.out_dir) / "nonfinite_batch.tsv");
      write_utterances(dump, tb.utterances);
      throw;
    }
    for (const auto &id : r.losses.skipped) log << "warning: skipped " << id << " (infeasible CTC target)\n";
    summary.last = r.losses.breakdown;
    summary.final_step = step;

    const bool validate_now = !valid.empty() &&
        ((config.train.valid_interval > 0 && step % config.train.valid_interval == 0) ||
         step == config.train.steps);
    const bool log_now = step % config.train.log_interval == 0 || validate_now;
    json rec;
    if (log_now) {
      rec = json{{"step", step}, {"lr", r.lr}};
      rec.update(breakdown_json(r.losses.breakdown));
      rec["skipped"] = r.losses.skipped.size();
    }
    if (validate_now) {
      EvaluationResult ev = evaluate(model, valid, config.train.iterations, config.train.threads);
      rec["valid_greedy_error"] = ev.greedy_error;
      rec["valid_iterative_error"] = ev.iterative_error;
      save_checkpoint(latest, model.parameters(), &state, config, step);
      if (!summary.best_valid_error || ev.greedy_error < *summary.best_valid_error) {
        summary.best_valid_error = ev.greedy_error;
        save_checkpoint(best_checkpoint_path(config), model.parameters(), nullptr, config, step);
      }
      log << "step " << step << " total " << r.losses.breakdown.total << " valid greedy "
          << ev.greedy_error << " iterative " << ev.iterative_error << "\n";
    }
    if (log_now) metrics << rec.dump() << '\n' << std::flush;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timing_log << json{{"step", step}, {"seconds", secs}}.dump() << '\n';
  }
  return summary;
}

}  // namespace lvctc
