#include "lvctc/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>

namespace lvctc {

namespace {

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

template <class T>
T parse_unsigned(const std::string &key, const std::string &text) {
  T v{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(key, key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

double parse_double(const std::string &key, const std::string &text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception &) {
  }
  throw ConfigError(key, key + ": expected a number, got '" + text + "'");
}

const char *activation_name(Activation a) {
  switch (a) {
    case Activation::swish: return "swish";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
  }
  return "?";
}

Activation parse_activation(const std::string &key, const std::string &text) {
  for (Activation a : {Activation::swish, Activation::tanh, Activation::sigmoid, Activation::relu})
    if (text == activation_name(a)) return a;
  throw ConfigError(key, key + ": unknown activation '" + text + "'");
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig &, const std::string &)> set;
  std::function<std::string(const RunConfig &)> get;
};

template <class T>
Entry size_entry(std::string name, std::string doc, T RunConfig::*group, std::size_t T::*field) {
  return {{name, std::move(doc)},
          [=](RunConfig &c, const std::string &v) { c.*group.*field = parse_unsigned<std::size_t>(name, v); },
          [=](const RunConfig &c) { return std::to_string(c.*group.*field); }};
}

template <class T>
Entry seed_entry(std::string name, std::string doc, T RunConfig::*group, std::uint64_t T::*field) {
  return {{name, std::move(doc)},
          [=](RunConfig &c, const std::string &v) { c.*group.*field = parse_unsigned<std::uint64_t>(name, v); },
          [=](const RunConfig &c) { return std::to_string(c.*group.*field); }};
}

template <class T>
Entry double_entry(std::string name, std::string doc, T RunConfig::*group, double T::*field) {
  return {{name, std::move(doc)},
          [=](RunConfig &c, const std::string &v) { c.*group.*field = parse_double(name, v); },
          [=](const RunConfig &c) { return format_double(c.*group.*field); }};
}

const std::vector<Entry> &entries() {
  using M = ModelConfig;
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t = {
        size_entry("model.L_enc", "prior estimator conformer layers", &RunConfig::model, &M::L_enc),
        size_entry("model.L_dec", "decoder conformer layers", &RunConfig::model, &M::L_dec),
        size_entry("model.L_pst", "posterior cross-attention layers", &RunConfig::model, &M::L_pst),
        size_entry("model.l", "prior layer whose output queries the posterior (1-based)", &RunConfig::model, &M::l),
        size_entry("model.m", "decoder layer feeding the intermediate CTC (1-based)", &RunConfig::model, &M::m),
        size_entry("model.d_lat", "latent dimension", &RunConfig::model, &M::d_lat),
        size_entry("model.max_tokens", "longest token sequence the posterior accepts", &RunConfig::model, &M::max_tokens),
        double_entry("model.token_mask_fraction", "share of token embeddings zeroed in training", &RunConfig::model, &M::token_mask_fraction),
    };
    auto block_size = [](std::string name, std::string doc, std::size_t BlockConfig::*f) {
      return Entry{{name, std::move(doc)},
                   [=](RunConfig &c, const std::string &v) { c.model.block.*f = parse_unsigned<std::size_t>(name, v); },
                   [=](const RunConfig &c) { return std::to_string(c.model.block.*f); }};
    };
    t.push_back(block_size("model.d_att", "attention dimension", &BlockConfig::d_att));
    t.push_back(block_size("model.n_heads", "attention heads", &BlockConfig::n_heads));
    t.push_back(block_size("model.d_ff", "feed-forward hidden units", &BlockConfig::d_ff));
    t.push_back(block_size("model.conv_kernel", "conformer depthwise kernel length (odd)", &BlockConfig::conv_kernel));
    t.push_back({{"model.dropout", "dropout rate"},
                 [](RunConfig &c, const std::string &v) { c.model.block.dropout_rate = parse_double("model.dropout", v); },
                 [](const RunConfig &c) { return format_double(c.model.block.dropout_rate); }});
    t.push_back({{"model.ff_activation", "conformer feed-forward activation"},
                 [](RunConfig &c, const std::string &v) { c.model.block.ff_activation = parse_activation("model.ff_activation", v); },
                 [](const RunConfig &c) { return std::string(activation_name(c.model.block.ff_activation)); }});
    t.push_back({{"model.head_activation", "mean/log-variance head activation"},
                 [](RunConfig &c, const std::string &v) { c.model.block.head_activation = parse_activation("model.head_activation", v); },
                 [](const RunConfig &c) { return std::string(activation_name(c.model.block.head_activation)); }});

    using W = LossWeights;
    t.push_back(double_entry("loss.dec", "weight of the decoder ELBO term", &RunConfig::loss, &W::dec));
    t.push_back(double_entry("loss.kl", "weight of the KL term", &RunConfig::loss, &W::kl));
    t.push_back(double_entry("loss.cp", "weight of the compatibility CTC term", &RunConfig::loss, &W::cp));
    t.push_back(double_entry("loss.ic1", "weight of the intermediate CTC on the prior-mean path", &RunConfig::loss, &W::ic1));
    t.push_back(double_entry("loss.ic2", "weight of the intermediate CTC on the sampled path", &RunConfig::loss, &W::ic2));
    t.push_back(double_entry("loss.sd", "weight of the self-distillation term", &RunConfig::loss, &W::sd));
    t.push_back(double_entry("loss.free_bits", "KL threshold b below which the KL term is dropped", &RunConfig::loss, &W::free_bits));

    t.push_back(double_entry("optim.peak_lr", "Noam peak learning rate", &RunConfig::optim, &OptimConfig::peak_lr));
    t.push_back(size_entry("optim.warmup", "Noam warmup steps", &RunConfig::optim, &OptimConfig::warmup));
    auto adam = [](std::string name, std::string doc, double AdamConfig::*f) {
      return Entry{{name, std::move(doc)},
                   [=](RunConfig &c, const std::string &v) { c.optim.adam.*f = parse_double(name, v); },
                   [=](const RunConfig &c) { return format_double(c.optim.adam.*f); }};
    };
    t.push_back(adam("optim.beta1", "Adam beta1", &AdamConfig::beta1));
    t.push_back(adam("optim.beta2", "Adam beta2", &AdamConfig::beta2));
    t.push_back(adam("optim.eps", "Adam epsilon", &AdamConfig::eps));
    t.push_back(adam("optim.weight_decay", "decoupled weight decay", &AdamConfig::weight_decay));

    using D = SyntheticTaskSpec;
    t.push_back(size_entry("data.vocab_size", "token vocabulary size (blank excluded)", &RunConfig::data, &D::vocab_size));
    t.push_back(size_entry("data.n_min", "shortest token sequence", &RunConfig::data, &D::n_min));
    t.push_back(size_entry("data.n_max", "longest token sequence", &RunConfig::data, &D::n_max));
    t.push_back(size_entry("data.r_min", "fewest prototype copies per token", &RunConfig::data, &D::r_min));
    t.push_back(size_entry("data.r_max", "most prototype copies per token", &RunConfig::data, &D::r_max));
    t.push_back(size_entry("data.d_feat", "feature dimension", &RunConfig::data, &D::d_feat));
    t.push_back(size_entry("data.frame_repeat", "raw frames per prototype copy", &RunConfig::data, &D::frame_repeat));
    t.push_back(double_entry("data.noise_std", "feature noise standard deviation", &RunConfig::data, &D::noise_std));
    t.push_back(seed_entry("data.prototype_seed", "seed of the per-token prototypes", &RunConfig::data, &D::prototype_seed));

    using T = TrainConfig;
    t.push_back(size_entry("train.batch_size", "utterances per step", &RunConfig::train, &T::batch_size));
    t.push_back(size_entry("train.steps", "optimizer steps", &RunConfig::train, &T::steps));
    t.push_back(size_entry("train.log_interval", "steps between metrics records", &RunConfig::train, &T::log_interval));
    t.push_back(size_entry("train.valid_interval", "steps between validation passes (0 = only at the end)", &RunConfig::train, &T::valid_interval));
    t.push_back(size_entry("train.valid_size", "validation utterances", &RunConfig::train, &T::valid_size));
    t.push_back(seed_entry("train.valid_seed", "seed of the validation set", &RunConfig::train, &T::valid_seed));
    t.push_back(size_entry("train.iterations", "refinement passes in validation decoding", &RunConfig::train, &T::iterations));
    t.push_back(seed_entry("train.seed", "seed of initialization, batches, dropout and sampling", &RunConfig::train, &T::seed));
    t.push_back(size_entry("train.threads", "validation decoding threads (0 = hardware concurrency)", &RunConfig::train, &T::threads));

    t.push_back(seed_entry("eval.seed", "seed of the held-out evaluation set", &RunConfig::eval, &EvalConfig::seed));
    t.push_back(size_entry("eval.size", "held-out evaluation utterances", &RunConfig::eval, &EvalConfig::size));

    t.push_back({{"out_dir", "directory for metrics and checkpoints"},
                 [](RunConfig &c, const std::string &v) { c.out_dir = v; },
                 [](const RunConfig &c) { return c.out_dir; }});
    return t;
  }();
  return table;
}

const Entry &find_entry(const std::string &key) {
  for (const auto &e : entries())
    if (e.key.name == key) return e;
  throw ConfigError(key, "unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::finalize() {
  model.vocab_size = data.vocab_size;
  model.d_feat = data.d_feat;
  data.validate();
  model.validate();
  loss.validate();
  if (!(optim.peak_lr > 0.0)) throw ConfigError("optim.peak_lr", "peak_lr must be > 0");
  if (optim.warmup < 1) throw ConfigError("optim.warmup", "warmup must be >= 1");
  if (optim.adam.beta1 < 0 || optim.adam.beta1 >= 1) throw ConfigError("optim.beta1", "beta1 must lie in [0, 1)");
  if (optim.adam.beta2 < 0 || optim.adam.beta2 >= 1) throw ConfigError("optim.beta2", "beta2 must lie in [0, 1)");
  if (!(optim.adam.eps > 0)) throw ConfigError("optim.eps", "eps must be > 0");
  if (optim.adam.weight_decay < 0) throw ConfigError("optim.weight_decay", "weight_decay must be >= 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size", "batch_size must be >= 1");
  if (train.log_interval < 1) throw ConfigError("train.log_interval", "log_interval must be >= 1");
  if (data.n_max > model.max_tokens) {
    throw ConfigError("data.n_max", "n_max exceeds model.max_tokens");
  }
  if (data.r_min * data.frame_repeat < 1 || data.n_min * data.r_min * data.frame_repeat < 4) {
    throw ConfigError("data.frame_repeat", "shortest utterance is below the 4 frames the frontend needs");
  }
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m = model;
  m.vocab_size = data.vocab_size;
  m.d_feat = data.d_feat;
  return m;
}

const std::vector<ConfigKey> &config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto &e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig &config, const std::string &key, const std::string &value) {
  find_entry(key).set(config, value);
}

std::string get_config_value(const RunConfig &config, const std::string &key) {
  return find_entry(key).get(config);
}

RunConfig parse_config(std::istream &is, const std::string &source) {
  RunConfig config;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("", source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      set_config_value(config, key, value);
    } catch (const ConfigError &e) {
      throw ConfigError(e.field(), source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  config.finalize();
  return config;
}

RunConfig load_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open config file '" + path + "'");
  return parse_config(in, path);
}

std::string config_to_text(const RunConfig &config) {
  std::ostringstream os;
  for (const auto &e : entries()) os << e.key.name << " = " << e.get(config) << '\n';
  return os.str();
}

}  // namespace lvctc
