// End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
// `acceptance 1 4 9` runs a subset. Lines are also written to
// <build>/tests/acceptance/report.txt.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "lvctc/checkpoint.hpp"
#include "lvctc/ctc.hpp"
#include "lvctc/decoding.hpp"
#include "lvctc/gradcheck.hpp"
#include "lvctc/ops.hpp"
#include "lvctc/train.hpp"

using namespace lvctc;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char *f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path work_dir() {
  fs::path p = fs::path(LVCTC_WORK_DIR) / "acceptance";
  fs::create_directories(p);
  return p;
}

bool bit_equal(const Tensor &a, const Tensor &b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

std::string read_file(const fs::path &p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

Tensor random_log_probs(std::size_t frames, std::size_t width, Rng &rng) {
  std::normal_distribution<double> normal(0.0, 1.5);
  std::vector<double> v(frames * width);
  for (double &x : v) x = normal(rng);
  return log_softmax(Tensor::from({frames, width}, std::move(v)));
}

LossWeights cp_only() {
  LossWeights w;
  w.dec = w.kl = w.ic1 = w.ic2 = w.sd = 0.0;
  w.cp = 1.0;
  return w;
}

// Trained on the default config by criterion 7, reused by criterion 8.
std::optional<LvCtcModel> trained;

Outcome oracle_equivalence() {
  auto t0 = Clock::now();
  OracleReport r = ctc_oracle(1000, 6, 3, 3, 2024, 1e-9);
  const double secs = seconds_since(t0);
  return {r.failures == 0 && r.max_error < 1e-9 && secs < 60.0,
          std::to_string(r.trials) + " instances, max |diff| " + fmt("%.2e", r.max_error) + ", " +
              fmt("%.2f s", secs)};
}

void all_targets(std::size_t max_len, std::size_t vocab, TokenSequence &prefix,
                 const std::function<void(const TokenSequence &)> &visit) {
  visit(prefix);
  if (prefix.size() == max_len) return;
  for (TokenId c = 1; c <= vocab; ++c) {
    prefix.push_back(c);
    all_targets(max_len, vocab, prefix, visit);
    prefix.pop_back();
  }
}

Outcome normalization() {
  Rng rng(77);
  double worst = 0.0;
  std::size_t cases = 0;
  for (std::size_t frames = 1; frames <= 4; ++frames) {
    for (std::size_t vocab = 1; vocab <= 2; ++vocab) {
      for (int rep = 0; rep < 5; ++rep) {
        Tensor lp = random_log_probs(frames, vocab + 1, rng);
        double total = 0.0;
        TokenSequence prefix;
        all_targets(frames, vocab, prefix, [&](const TokenSequence &c) {
          if (ctc_feasible(frames, c)) total += std::exp(ctc_log_likelihood(lp, c).item());
        });
        worst = std::max(worst, std::abs(total - 1.0));
        ++cases;
      }
    }
  }
  return {worst < 1e-9, std::to_string(cases) + " distributions, max |sum - 1| " + fmt("%.2e", worst)};
}

Outcome gradient_suite() {
  auto t0 = Clock::now();
  RunConfig config = gradcheck_config();
  LvCtcModel model(config.model_config(), config.train.seed);
  Batch batch = gradcheck_batch(config);
  const ForwardContext ctx{true, config.train.seed};
  GradcheckReport r = run_gradcheck(model, batch, config.loss, ctx);
  const LossBreakdown &l = r.losses;
  const bool all_terms = l.elbo_dec != 0 && l.kl != 0 && l.ctc_cp != 0 && l.ictc_prior != 0 &&
                         l.ictc_pst != 0 && l.sd != 0 && !l.kl_gated;
  const LossWeights &w = config.loss;
  const bool all_weights = w.dec > 0 && w.kl > 0 && w.cp > 0 && w.ic1 > 0 && w.ic2 > 0 && w.sd > 0;

  // A corrupted gradient must be caught.
  LvCtcModel again(config.model_config(), config.train.seed);
  GradcheckOptions tampered;
  tampered.max_elements = 4;
  tampered.tamper = [](ParameterSet &p) {
    auto g = Tensor(p.get("posterior.head.mean.out.weight")).mutable_grad();
    g[0] += 1e-3 + 0.01 * std::abs(g[0]);
  };
  const bool caught = !run_gradcheck(again, batch, config.loss, ctx, tampered).passed;
  const double secs = seconds_since(t0);
  return {r.passed && r.max_error < 1e-4 && all_terms && all_weights && caught && secs < 600.0,
          std::to_string(r.groups.size()) + " groups, max rel err " + fmt("%.2e", r.max_error) +
              (all_terms ? ", six terms live" : ", a term is inactive") +
              (caught ? ", tampered grad caught" : ", tampered grad MISSED") + ", " + fmt("%.1f s", secs)};
}

Outcome kl_sd_properties() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random = [&](const Shape &s) {
    std::vector<double> v(shape_numel(s));
    for (double &x : v) x = normal(rng);
    return Tensor::from(s, std::move(v));
  };
  SequenceMask mask(std::vector<std::size_t>{5, 3});
  const Shape shape{2, 5, 4};
  bool ok = true;
  double min_kl = INFINITY, max_self = 0.0;
  for (int i = 0; i < 1000; ++i) {
    LatentGaussian q{random(shape), exp(scale(random(shape), 0.5))};
    LatentGaussian p{random(shape), exp(scale(random(shape), 0.5))};
    const double kl = gaussian_kl(q, p, mask).item();
    const double self = std::abs(gaussian_kl(q, q, mask).item());
    min_kl = std::min(min_kl, kl);
    max_self = std::max(max_self, self);
    ok = ok && kl > 0.0 && self < 1e-12;
  }
  Tensor s = log_softmax(random({2, 5, 6}));
  const double sd_self = self_distillation_loss(s, s, mask).item();
  SequenceMask one(std::vector<std::size_t>{1});
  LatentGaussian a{Tensor::full({1, 1, 1}, 1.0), Tensor::full({1, 1, 1}, 1.0)};
  LatentGaussian b{Tensor::full({1, 1, 1}, 0.0), Tensor::full({1, 1, 1}, 1.0)};
  const double worked = gaussian_kl(a, b, one).item();
  ok = ok && sd_self == 0.0 && std::abs(worked - 0.5) < 1e-12;
  return {ok, "1000 pairs, min KL(q||p) " + fmt("%.3g", min_kl) + ", max |KL(q||q)| " +
                  fmt("%.1e", max_self) + ", SD(s,s) " + fmt("%g", sd_self) + ", worked KL " +
                  fmt("%.15g", worked)};
}

Outcome free_bits_gate() {
  RunConfig config;
  config.finalize();
  LvCtcModel model(config.model_config(), 3);
  for (auto &[name, leaf] : model.parameters().unique()) {
    if (name.find(".head.") == std::string::npos) continue;
    for (double &v : leaf.mutable_data()) v *= 0.3;
  }
  SyntheticTask task(config.data);
  auto utts = task.generate_set(8, 501, "gate");
  Batch batch = make_batch(std::span<const Utterance>(utts));
  LossWeights w;
  w.dec = w.cp = w.ic1 = w.ic2 = w.sd = 0.0;
  w.kl = 1.0;
  const ForwardContext ctx{true, 17};

  ParameterSet &params = model.parameters();
  params.zero_grad();
  LossResult r = model.compute_losses(batch, w, ctx);
  r.objective.backward();
  std::size_t nonzero = 0, posterior = 0;
  for (auto &[name, leaf] : params.unique()) {
    if (name.rfind("posterior.", 0) == 0) ++posterior;
    for (double g : leaf.grad()) nonzero += g != 0.0;
  }

  // Control: the same batch without the gate does move the posterior.
  w.free_bits = 0.0;
  params.zero_grad();
  model.compute_losses(batch, w, ctx).objective.backward();
  double control = 0.0;
  for (auto &[name, leaf] : params.unique())
    if (name.rfind("posterior.", 0) == 0)
      for (double g : leaf.grad()) control += std::abs(g);

  const bool ok = r.breakdown.kl < 0.5 && r.breakdown.kl_gated && nonzero == 0 && control > 0.0;
  return {ok, "batch KL " + fmt("%.3g", r.breakdown.kl) + ", " + std::to_string(nonzero) +
                  " nonzero grads across all leaves (" + std::to_string(posterior) +
                  " posterior leaves), ungated |grad| " + fmt("%.3g", control)};
}

Outcome compatibility_reduction() {
  auto t0 = Clock::now();
  RunConfig config;
  config.loss = cp_only();
  config.finalize();
  SyntheticTask task(config.data);
  LvCtcModel lv(config.model_config(), config.train.seed);
  CtcModel plain(config.model_config(), config.train.seed);
  OptimizerState s_lv, s_plain;
  double worst = 0.0;
  const std::size_t steps = 500;
  for (std::size_t step = 1; step <= steps; ++step) {
    TrainingBatch tb = training_batch(task, config, step);
    const double a = train_step(lv, s_lv, tb, config, step).losses.breakdown.total;
    const double b = train_step(plain, s_plain, tb, config, step).losses.breakdown.total;
    worst = std::max(worst, std::abs(a - b));
    if (!(std::abs(a - b) < 1e-9)) {
      return {false, "step " + std::to_string(step) + ": " + fmt("%.17g", a) + " vs " + fmt("%.17g", b)};
    }
  }
  double param_diff = 0.0;
  for (auto &[name, leaf] : plain.parameters().unique()) {
    const Tensor &other = lv.parameters().get(name);
    for (std::size_t i = 0; i < leaf.numel(); ++i)
      param_diff = std::max(param_diff, std::abs(leaf.data()[i] - other.data()[i]));
  }
  return {param_diff < 1e-9, std::to_string(steps) + " steps, max |loss diff| " + fmt("%.2e", worst) +
                                 ", max |param diff| " + fmt("%.2e", param_diff) + ", " +
                                 fmt("%.0f s", seconds_since(t0))};
}

Outcome synthetic_training() {
  auto t0 = Clock::now();
  RunConfig config;
  config.out_dir = (work_dir() / "train_default").string();
  config.finalize();
  fs::remove_all(config.out_dir);
  std::ofstream log(fs::path(LVCTC_WORK_DIR) / "acceptance" / "train_default.log");
  run_training(config, false, log);
  const double train_secs = seconds_since(t0);

  trained.emplace(config.model_config(), config.train.seed);
  load_parameters(read_checkpoint(best_checkpoint_path(config)), trained->parameters());
  SyntheticTask task(config.data);
  auto held_out = task.generate_set(config.eval.size, config.eval.seed, "eval");
  EvaluationResult ev = evaluate(*trained, held_out, 3, config.train.threads);
  const bool ok = ev.greedy_error < 0.05 && ev.iterative_error <= ev.greedy_error;
  return {ok, std::to_string(config.train.steps) + " steps, held-out TER greedy " +
                  fmt("%.4f", ev.greedy_error) + ", iterative K=3 " + fmt("%.4f", ev.iterative_error) +
                  " on " + std::to_string(ev.utterances) + " utts, " + fmt("%.0f s", train_secs)};
}

Outcome decoding_invariants() {
  RunConfig config;
  config.finalize();
  if (!trained) {
    trained.emplace(config.model_config(), config.train.seed);
  }
  SyntheticTask task(config.data);
  auto utts = task.generate_set(100, 4242, "inv");
  std::size_t first_mismatch = 0, fixed_point_violations = 0, nondeterministic = 0, refined = 0;
  for (const auto &u : utts) {
    DecodeTrace trace = decode_iterative(*trained, u.features, 10);
    DecodeTrace again = decode_iterative(*trained, u.features, 10);
    if (trace.hypotheses[0] != decode_single_step(*trained, u.features)) ++first_mismatch;
    if (trace.hypotheses[0] != trace.final_hypothesis()) ++refined;
    const auto &h = trace.hypotheses;
    // The loop stops at the first repeat, and only there.
    for (std::size_t k = 1; k < h.size(); ++k) {
      const bool repeat = h[k] == h[k - 1];
      if (repeat != (k + 1 == h.size() && trace.converged)) ++fixed_point_violations;
    }
    if (trace.converged) {
      // Feeding a fixed point back reproduces it.
      DecodeTrace more = decode_iterative(*trained, u.features, trace.iterations + 5);
      if (more.hypotheses != h) ++fixed_point_violations;
    }
    bool same = again.hypotheses == h && again.log_probs.size() == trace.log_probs.size();
    for (std::size_t k = 0; same && k < trace.log_probs.size(); ++k)
      same = bit_equal(again.log_probs[k], trace.log_probs[k]);
    if (!same) ++nondeterministic;
  }
  const bool ok = first_mismatch == 0 && fixed_point_violations == 0 && nondeterministic == 0;
  return {ok, "100 utts: trace[0] mismatches " + std::to_string(first_mismatch) +
                  ", fixed-point violations " + std::to_string(fixed_point_violations) +
                  ", nondeterministic " + std::to_string(nondeterministic) + ", changed by refinement " +
                  std::to_string(refined)};
}

Outcome pad_invariance() {
  RunConfig config;
  config.finalize();
  LvCtcModel model(config.model_config(), 12);
  SyntheticTask task(config.data);
  auto utts = task.generate_set(100, 3131, "pad");
  const ForwardContext eval{false, 55};
  double worst = 0.0;
  std::size_t compared = 0;
  for (std::size_t start = 0; start < utts.size(); start += 10) {
    std::span<const Utterance> group(utts.data() + start, 10);
    LossResult padded = model.compute_losses(make_batch(group), LossWeights{}, eval);
    for (std::size_t i = 0; i < group.size(); ++i) {
      LossResult alone = model.compute_losses(make_batch(group.subspan(i, 1)), LossWeights{}, eval);
      if (alone.utterances.empty()) continue;
      const UtteranceTerms &a = alone.utterances[0];
      auto it = std::find_if(padded.utterances.begin(), padded.utterances.end(),
                             [&](const UtteranceTerms &t) { return t.id == a.id; });
      if (it == padded.utterances.end()) return {false, a.id + " missing from padded batch"};
      for (auto [x, y] : {std::pair{a.elbo_dec, it->elbo_dec}, {a.kl, it->kl}, {a.ctc_cp, it->ctc_cp},
                          {a.ictc_prior, it->ictc_prior}, {a.ictc_pst, it->ictc_pst}, {a.sd, it->sd}})
        worst = std::max(worst, std::abs(x - y));
      const double total_alone = alone.breakdown.total;
      LossBreakdown one{a.elbo_dec, a.kl, a.ctc_cp, a.ictc_prior, a.ictc_pst, a.sd};
      one.kl_gated = a.kl < LossWeights{}.free_bits;
      worst = std::max(worst, std::abs(one.recompose(LossWeights{}) - total_alone));
      ++compared;
    }
  }
  return {compared == 100 && worst < 1e-9,
          std::to_string(compared) + " utts, max |singleton - padded| " + fmt("%.2e", worst)};
}

Outcome reproducibility() {
  const fs::path root = work_dir() / "repro";
  fs::remove_all(root);
  std::vector<std::string> metrics;
  for (const char *run : {"a", "b"}) {
    const fs::path out = root / run;
    const std::string cmd = std::string("\"") + LVCTC_CLI + "\" train --config \"" + LVCTC_SOURCE_DIR +
                            "/configs/gradcheck.conf\" --seed 11 --set train.steps=40 "
                            "--set train.valid_interval=20 --set train.valid_size=8 --out \"" +
                            out.string() + "\" > \"" + (root / (std::string(run) + ".log")).string() +
                            "\" 2>&1";
    fs::create_directories(root);
    if (std::system(cmd.c_str()) != 0) return {false, "train run " + std::string(run) + " failed"};
    metrics.push_back(read_file(out / "metrics.jsonl"));
  }
  const bool logs_equal = !metrics[0].empty() && metrics[0] == metrics[1];

  // Save and reload a checkpoint of a model trained in memory.
  RunConfig config = gradcheck_config();
  SyntheticTask task(config.data);
  LvCtcModel model(config.model_config(), 11);
  OptimizerState state;
  for (std::uint64_t step = 1; step <= 10; ++step)
    train_step(model, state, training_batch(task, config, step), config, step);
  round_parameters_to_f32(model.parameters());
  const fs::path ck = root / "roundtrip.lvctc";
  save_checkpoint(ck.string(), model.parameters(), &state, config, 10);
  Checkpoint loaded = read_checkpoint(ck.string());
  LvCtcModel restored(loaded.config.model_config(), 12345);
  load_parameters(loaded, restored.parameters());

  bool identical = true;
  auto utts = task.generate_set(6, 8080, "ck");
  Batch batch = make_batch(std::span<const Utterance>(utts));
  for (bool training : {false, true}) {
    const ForwardContext ctx{training, 21};
    LossResult a = model.compute_losses(batch, config.loss, ctx);
    LossResult b = restored.compute_losses(batch, config.loss, ctx);
    identical = identical && bit_equal(a.objective, b.objective) && bit_equal(a.teacher, b.teacher);
  }
  for (const auto &u : utts) {
    DecodeTrace a = decode_iterative(model, u.features, 3);
    DecodeTrace b = decode_iterative(restored, u.features, 3);
    identical = identical && a.hypotheses == b.hypotheses;
    for (std::size_t k = 0; identical && k < a.log_probs.size(); ++k)
      identical = bit_equal(a.log_probs[k], b.log_probs[k]);
  }
  return {logs_equal && identical,
          std::string("metrics logs ") + (logs_equal ? "byte-identical" : "DIFFER") + " (" +
              std::to_string(metrics[0].size()) + " bytes), checkpoint round-trip outputs " +
              (identical ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char **argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"CTC oracle equivalence", oracle_equivalence},
      {"CTC normalization", normalization},
      {"gradient suite", gradient_suite},
      {"KL/SD properties", kl_sd_properties},
      {"free-bits gate", free_bits_gate},
      {"compatibility reduction", compatibility_reduction},
      {"end-to-end synthetic training", synthetic_training},
      {"decoding invariants", decoding_invariants},
      {"pad invariance", pad_invariance},
      {"reproducibility", reproducibility},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  std::ofstream report(work_dir() / "report.txt");
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.passed;
    char line[1024];
    std::snprintf(line, sizeof line, "criterion %2zu %-30s %s  %s\n", i + 1, criteria[i].first.c_str(),
                  o.passed ? "PASS" : "FAIL", o.detail.c_str());
    std::fputs(line, stdout);
    std::fflush(stdout);
    report << line << std::flush;
  }
  return failed == 0 ? 0 : 1;
}
