#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lvctc/checkpoint.hpp"
#include "lvctc/config.hpp"
#include "lvctc/decoding.hpp"
#include "lvctc/gradcheck.hpp"
#include "lvctc/train.hpp"

using namespace lvctc;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::string input;
  std::optional<std::size_t> iterations;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::vector<std::string> overrides;
  bool trace = false;
  bool resume = false;
  std::size_t trials = 1000, max_frames = 6, max_vocab = 3, max_target = 3;
  std::size_t max_elements = 32;
  std::size_t count = 10;
};

void apply_overrides(RunConfig &config, const std::vector<std::string> &overrides) {
  for (const auto &kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("", "--set expects key=value, got '" + kv + "'");
    set_config_value(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

RunConfig run_config(const Options &o) {
  RunConfig config = o.config.empty() ? RunConfig{} : load_config(o.config);
  apply_overrides(config, o.overrides);
  if (o.seed) config.train.seed = *o.seed;
  if (o.steps) config.train.steps = *o.steps;
  if (o.iterations) config.train.iterations = *o.iterations;
  if (!o.out.empty()) config.out_dir = o.out;
  config.finalize();
  return config;
}

// Model-shaping keys must agree between --config and the checkpoint.
void check_compatible(const RunConfig &given, const RunConfig &stored) {
  for (const auto &k : config_keys()) {
    const bool shapes_model = k.name.rfind("model.", 0) == 0 || k.name == "data.vocab_size" ||
                              k.name == "data.d_feat";
    if (shapes_model && get_config_value(given, k.name) != get_config_value(stored, k.name)) {
      throw ConfigError(k.name, "config and checkpoint disagree on " + k.name + " (" +
                                    get_config_value(given, k.name) + " vs " +
                                    get_config_value(stored, k.name) + ")");
    }
  }
}

struct Loaded {
  RunConfig config;
  std::unique_ptr<LvCtcModel> model;
};

Loaded load_model(const Options &o) {
  if (o.checkpoint.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
  Checkpoint ckpt = read_checkpoint(o.checkpoint);
  if (!o.config.empty()) check_compatible(run_config(o), ckpt.config);
  Loaded l{ckpt.config, std::make_unique<LvCtcModel>(ckpt.config.model_config(), ckpt.config.train.seed)};
  load_parameters(ckpt, l.model->parameters());
  return l;
}

std::string join(const TokenSequence &s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i]);
  return out;
}

int cmd_train(const Options &o) {
  RunConfig config = run_config(o);
  if (!o.checkpoint.empty()) {
    fs::create_directories(config.out_dir);
    fs::copy_file(o.checkpoint, latest_checkpoint_path(config), fs::copy_options::overwrite_existing);
  }
  TrainSummary s = run_training(config, o.resume || !o.checkpoint.empty(), std::cerr);
  std::cout << "finished at step " << s.final_step << ", total " << s.last.total;
  if (s.best_valid_error) std::cout << ", best validation error " << *s.best_valid_error;
  std::cout << "\n";
  return kExitOk;
}

std::vector<Utterance> decode_inputs(const Options &o, const RunConfig &config) {
  if (!o.input.empty()) {
    std::ifstream in(o.input);
    if (!in) throw ConfigError("input", "cannot open input '" + o.input + "'");
    return read_utterances(in);
  }
  SyntheticTask task(config.data);
  return task.generate_set(config.eval.size, o.seed.value_or(config.eval.seed), "eval");
}

int cmd_decode(const Options &o) {
  Loaded l = load_model(o);
  const std::size_t k = o.iterations.value_or(l.config.train.iterations);
  auto utts = decode_inputs(o, l.config);
  const Tokenizer tok = Tokenizer::for_vocab(l.config.data.vocab_size);

  std::ofstream hyp_file, trace_file;
  std::ostream *hyp_out = &std::cout;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    hyp_file.open(fs::path(o.out) / "hypotheses.tsv");
    hyp_out = &hyp_file;
    if (o.trace) trace_file.open(fs::path(o.out) / "trace.jsonl");
  }
  double total_ms = 0.0;
  for (const auto &u : utts) {
    const auto t0 = std::chrono::steady_clock::now();
    DecodeTrace trace = decode_iterative(*l.model, u.features, k);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    total_ms += ms;
    const auto &hyp = trace.final_hypothesis();
    *hyp_out << u.id << '\t' << join(hyp) << '\t' << (hyp.empty() ? "" : tok.detokenize(hyp)) << '\t'
             << join(u.tokens) << '\n';
    if (o.trace) {
      json j{{"id", u.id}, {"iterations", trace.iterations}, {"converged", trace.converged}};
      json hyps = json::array();
      for (const auto &h : trace.hypotheses) hyps.push_back(h);
      j["hypotheses"] = hyps;
      json lps = json::array();
      for (const auto &lp : trace.log_probs) {
        json rows = json::array();
        for (std::size_t t = 0; t < lp.dim(0); ++t) {
          auto r = lp.data().subspan(t * lp.dim(1), lp.dim(1));
          rows.push_back(std::vector<double>(r.begin(), r.end()));
        }
        lps.push_back(rows);
      }
      j["log_probs"] = lps;
      (trace_file.is_open() ? static_cast<std::ostream &>(trace_file) : std::cout) << j.dump() << '\n';
    }
  }
  std::cerr << "decoded " << utts.size() << " utterances with K=" << k << ", "
            << (utts.empty() ? 0.0 : total_ms / static_cast<double>(utts.size())) << " ms per utterance\n";
  return kExitOk;
}

int cmd_eval(const Options &o) {
  Loaded l = load_model(o);
  const std::size_t k = o.iterations.value_or(l.config.train.iterations);
  auto utts = decode_inputs(o, l.config);
  EvaluationResult ev = evaluate(*l.model, utts, k, l.config.train.threads);
  json report{{"utterances", ev.utterances},
              {"iterations", k},
              {"greedy_error", ev.greedy_error},
              {"iterative_error", ev.iterative_error},
              {"greedy_mean_edit_distance", ev.greedy_edit_mean},
              {"iterative_mean_edit_distance", ev.iterative_edit_mean}};
  const std::string iter_col = "K=" + std::to_string(k);
  std::printf("%-12s %12s %12s\n", "", "greedy", iter_col.c_str());
  std::printf("%-12s %12.6f %12.6f\n", "error rate", ev.greedy_error, ev.iterative_error);
  std::printf("%-12s %12.6f %12.6f\n", "mean edits", ev.greedy_edit_mean, ev.iterative_edit_mean);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream(fs::path(o.out) / "eval.json") << report.dump(2) << '\n';
  }
  return kExitOk;
}

int cmd_gradcheck(const Options &o) {
  RunConfig config = gradcheck_config();
  if (!o.config.empty()) config = load_config(o.config);
  apply_overrides(config, o.overrides);
  if (o.seed) config.train.seed = *o.seed;
  config.finalize();
  LvCtcModel model(config.model_config(), config.train.seed);
  Batch batch = gradcheck_batch(config);
  GradcheckOptions opts;
  opts.max_elements = o.max_elements;
  opts.seed = config.train.seed;
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport r = run_gradcheck(model, batch, config.loss, ForwardContext{true, config.train.seed}, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%-48s %9s %12s %s\n", "parameter", "checked", "max rel err", "result");
  for (const auto &g : r.groups) {
    std::printf("%-48s %4zu/%-4zu %12.3e %s\n", g.name.c_str(), g.checked, g.size, g.max_error,
                g.passed ? "pass" : "FAIL");
  }
  const auto &b = r.losses;
  std::printf("terms: elbo_dec %.6g  kl %.6g%s  ctc_cp %.6g  ictc_prior %.6g  ictc_pst %.6g  sd %.6g\n",
              b.elbo_dec, b.kl, b.kl_gated ? " (gated)" : "", b.ctc_cp, b.ictc_prior, b.ictc_pst, b.sd);
  std::printf("%zu groups, max relative error %.3e, %.1f s: %s\n", r.groups.size(), r.max_error, secs,
              r.passed ? "PASS" : "FAIL");
  return r.passed ? kExitOk : kExitFailed;
}

int cmd_oracle(const Options &o) {
  const std::uint64_t seed = o.seed.value_or(1);
  const auto t0 = std::chrono::steady_clock::now();
  OracleReport r = ctc_oracle(o.trials, o.max_frames, o.max_vocab, o.max_target, seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu trials (T'<=%zu, |V|<=%zu, |C|<=%zu, seed %llu): max |dp - brute force| = %.3e, %.2f s\n",
              r.trials, o.max_frames, o.max_vocab, o.max_target, static_cast<unsigned long long>(seed),
              r.max_error, secs);
  if (r.failures) {
    std::printf("%zu failures; first at trial %zu\n", r.failures, r.first_failure);
    return kExitFailed;
  }
  std::printf("PASS\n");
  return kExitOk;
}

int cmd_generate(const Options &o) {
  RunConfig config = run_config(o);
  SyntheticTask task(config.data);
  auto utts = task.generate_set(o.count, o.seed.value_or(config.eval.seed), "gen");
  if (o.out.empty()) {
    write_utterances(std::cout, utts);
  } else {
    fs::create_directories(o.out);
    const fs::path path = fs::path(o.out) / "utterances.tsv";
    std::ofstream out(path);
    write_utterances(out, utts);
    std::cerr << "wrote " << utts.size() << " utterances to " << path.string() << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"LV-CTC: latent-variable CTC speech recognition on synthetic data"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App *sub) {
    sub->add_option("--config", o.config, "run configuration file");
    sub->add_option("--seed", o.seed, "seed override");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--set", o.overrides, "config override key=value (repeatable)");
  };
  auto *train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  train->add_option("--steps", o.steps, "total optimizer steps");
  train->add_option("--iterations", o.iterations, "refinement passes for validation decoding");
  train->add_flag("--resume", o.resume, "continue from <out>/checkpoint_latest.lvctc");

  auto *decode = app.add_subcommand("decode", "decode utterances with a trained model");
  common(decode);
  decode->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  decode->add_option("--input", o.input, "utterance dump (default: regenerate the held-out set)");
  decode->add_option("--iterations", o.iterations, "refinement passes (0 = single step)");
  decode->add_flag("--trace", o.trace, "write every iteration's hypothesis and frame posteriors");

  auto *eval = app.add_subcommand("eval", "error rates of greedy and iterative decoding");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  eval->add_option("--input", o.input, "utterance dump (default: regenerate the held-out set)");
  eval->add_option("--iterations", o.iterations, "refinement passes");

  auto *gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every parameter");
  common(gradcheck);
  gradcheck->add_option("--max-elements", o.max_elements, "elements sampled per parameter");

  auto *oracle = app.add_subcommand("oracle", "CTC recursion against exhaustive enumeration");
  oracle->add_option("--seed", o.seed, "seed");
  oracle->add_option("--trials", o.trials, "random instances");
  oracle->add_option("--max-T", o.max_frames, "largest T'");
  oracle->add_option("--max-V", o.max_vocab, "largest vocabulary");
  oracle->add_option("--max-len", o.max_target, "longest target");

  auto *generate = app.add_subcommand("generate", "dump synthetic utterances");
  common(generate);
  generate->add_option("--count", o.count, "utterances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(o);
    if (*decode) return cmd_decode(o);
    if (*eval) return cmd_eval(o);
    if (*gradcheck) return cmd_gradcheck(o);
    if (*oracle) return cmd_oracle(o);
    if (*generate) return cmd_generate(o);
  } catch (const ConfigError &e) {
    std::cerr << "config error";
    if (!e.field().empty()) std::cerr << " [" << e.field() << "]";
    std::cerr << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailed;
  }
  return kExitUsage;
}
