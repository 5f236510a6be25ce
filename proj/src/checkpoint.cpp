#include "lvctc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace lvctc {

namespace {

constexpr char kMagic[] = "LVCTC1\n";
const std::string kStepKey = "state.step";

void add_stored(std::map<std::string, StoredTensor> &out, const std::string &name,
                const Shape &shape, std::span<const double> values) {
  StoredTensor t;
  t.shape = shape;
  t.values.reserve(values.size());
  for (double v : values) t.values.push_back(static_cast<float>(v));
  out.emplace(name, std::move(t));
}

}  // namespace

void save_checkpoint(const std::string &path, const ParameterSet &params,
                     const OptimizerState *optimizer, const RunConfig &config, std::uint64_t step) {
  std::map<std::string, StoredTensor> tensors;
  for (const auto &[name, leaf] : params.unique()) {
    add_stored(tensors, name, leaf.shape(), leaf.data());
    if (optimizer) {
      auto m = optimizer->first_moment.find(name);
      auto v = optimizer->second_moment.find(name);
      if (m != optimizer->first_moment.end() && v != optimizer->second_moment.end()) {
        add_stored(tensors, "optim.m." + name, leaf.shape(), m->second);
        add_stored(tensors, "optim.v." + name, leaf.shape(), v->second);
      }
    }
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ContractError("cannot write checkpoint '" + path + "'");
    os << kMagic;
    for (const auto &[name, t] : tensors) {
      os << name << " f32";
      for (std::size_t d : t.shape) os << ' ' << d;
      os << '\n';
    }
    os << '\n';
    for (const auto &[name, t] : tensors) {
      os.write(reinterpret_cast<const char *>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    os << config_to_text(config) << kStepKey << " = " << step << '\n';
    if (!os) throw ContractError("failed writing checkpoint '" + path + "'");
  }
  std::rename(tmp.c_str(), path.c_str());
}

Checkpoint read_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("checkpoint", "cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line + "\n" != kMagic) {
    throw ConfigError("checkpoint", "'" + path + "' is not an LVCTC1 checkpoint");
  }
  Checkpoint ckpt;
  std::vector<std::string> order;
  while (std::getline(is, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string name, dtype;
    ls >> name >> dtype;
    if (dtype != "f32") throw ConfigError("checkpoint", "unsupported dtype '" + dtype + "' for " + name);
    StoredTensor t;
    for (std::size_t d; ls >> d;) t.shape.push_back(d);
    t.values.resize(shape_numel(t.shape));
    order.push_back(name);
    ckpt.tensors.emplace(name, std::move(t));
  }
  for (const auto &name : order) {
    auto &t = ckpt.tensors.at(name);
    is.read(reinterpret_cast<char *>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    if (!is) throw ConfigError("checkpoint", "truncated payload for " + name + " in '" + path + "'");
  }
  RunConfig config;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("checkpoint", "malformed config line '" + line + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(' '));
      s.erase(s.find_last_not_of(' ') + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == kStepKey) ckpt.step = std::stoull(value);
    else set_config_value(config, key, value);
  }
  config.finalize();
  ckpt.config = config;
  return ckpt;
}

void load_parameters(const Checkpoint &ckpt, ParameterSet &params) {
  for (auto &[name, leaf] : params.unique()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw ConfigError("checkpoint", "checkpoint lacks parameter " + name);
    if (it->second.shape != leaf.shape()) {
      throw ConfigError("checkpoint", "parameter " + name + " has shape " +
                        shape_string(it->second.shape) + " in the checkpoint but " +
                        shape_string(leaf.shape()) + " in the model");
    }
    auto dst = leaf.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = it->second.values[i];
  }
}

void load_optimizer(const Checkpoint &ckpt, OptimizerState &state) {
  state = OptimizerState{};
  state.step = ckpt.step;
  for (const auto &[name, t] : ckpt.tensors) {
    for (auto [prefix, target] : {std::pair{"optim.m.", &state.first_moment},
                                  std::pair{"optim.v.", &state.second_moment}}) {
      const std::string p = prefix;
      if (name.compare(0, p.size(), p) == 0) {
        (*target)[name.substr(p.size())] = std::vector<double>(t.values.begin(), t.values.end());
      }
    }
  }
}

void round_parameters_to_f32(ParameterSet &params) {
  for (auto &[name, leaf] : params.unique()) {
    for (double &v : leaf.mutable_data()) v = static_cast<float>(v);
  }
}

}  // namespace lvctc
