#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "lvctc/checkpoint.hpp"
#include "lvctc/ctc.hpp"
#include "lvctc/decoding.hpp"
#include "lvctc/gradcheck.hpp"
#include "lvctc/train.hpp"

namespace py = pybind11;
using namespace lvctc;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array &a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor &t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict breakdown_dict(const LossBreakdown &b) {
  py::dict d;
  d["elbo_dec"] = b.elbo_dec;
  d["kl"] = b.kl;
  d["ctc_cp"] = b.ctc_cp;
  d["ictc_prior"] = b.ictc_prior;
  d["ictc_pst"] = b.ictc_pst;
  d["sd"] = b.sd;
  d["total"] = b.total;
  d["kl_gated"] = b.kl_gated;
  return d;
}

RunConfig config_from(const py::object &source) {
  if (source.is_none()) {
    RunConfig c;
    c.finalize();
    return c;
  }
  const auto text = source.cast<std::string>();
  if (text.find('=') == std::string::npos) return load_config(text);
  std::istringstream is(text);
  return parse_config(is, "<text>");
}

py::dict config_dict(const RunConfig &c) {
  py::dict d;
  for (const auto &k : config_keys()) d[py::str(k.name)] = get_config_value(c, k.name);
  return d;
}

LatentGaussian gaussian(const Array &mu, const Array &sigma) { return {to_tensor(mu), to_tensor(sigma)}; }

std::vector<Utterance> utterances_from(const py::list &items) {
  std::vector<Utterance> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto pair = items[i].cast<py::tuple>();
    Utterance u;
    u.id = "py-" + std::to_string(i);
    u.features = to_tensor(pair[0].cast<Array>());
    u.tokens = pair[1].cast<TokenSequence>();
    out.push_back(std::move(u));
  }
  return out;
}

class PyModel {
 public:
  PyModel(const py::object &config, std::uint64_t seed)
      : config_(config_from(config)), model_(config_.model_config(), seed) {}

  static PyModel load(const std::string &path) {
    Checkpoint ck = read_checkpoint(path);
    PyModel m(ck.config, ck.config.train.seed);
    load_parameters(ck, m.model_.parameters());
    return m;
  }

  TokenSequence decode(const Array &features) const {
    return decode_single_step(model_, to_tensor(features));
  }

  py::dict decode_iterative(const Array &features, std::size_t iterations) const {
    DecodeTrace t = lvctc::decode_iterative(model_, to_tensor(features), iterations);
    py::list lps;
    for (const auto &lp : t.log_probs) lps.append(to_array(lp));
    py::dict d;
    d["hypotheses"] = t.hypotheses;
    d["log_probs"] = lps;
    d["converged"] = t.converged;
    d["iterations"] = t.iterations;
    return d;
  }

  py::dict losses(const py::list &items, bool training, std::uint64_t seed) {
    auto utts = utterances_from(items);
    Batch batch = make_batch(std::span<const Utterance>(utts));
    NoGradGuard no_grad;
    LossResult r = model_.compute_losses(batch, config_.loss, ForwardContext{training, seed});
    py::dict d = breakdown_dict(r.breakdown);
    d["skipped"] = r.skipped;
    return d;
  }

  void save(const std::string &path) const {
    save_checkpoint(path, model_.parameters(), nullptr, config_, 0);
  }

  std::size_t parameter_count() const { return model_.parameters().total_elements(); }
  py::dict config() const { return config_dict(config_); }

 private:
  PyModel(const RunConfig &c, std::uint64_t seed) : config_(c), model_(c.model_config(), seed) {}

  RunConfig config_;
  LvCtcModel model_;
};

}  // namespace

PYBIND11_MODULE(_lvctc, m) {
  m.doc() = "CTC with a latent variable model: core operations";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<IndexError>(m, "IndexError", PyExc_IndexError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("ctc_log_likelihood",
        [](const Array &lp, const TokenSequence &c) { return ctc_log_likelihood(to_tensor(lp), c).item(); },
        py::arg("log_probs"), py::arg("target"));
  m.def("ctc_log_likelihood_grad",
        [](const Array &lp, const TokenSequence &c) {
          Tensor x = to_tensor(lp);
          Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
          Tensor ll = ctc_log_likelihood_fused(leaf, c);
          ll.backward();
          Tensor g = Tensor::from(leaf.shape(), std::vector<double>(leaf.grad().begin(), leaf.grad().end()));
          return py::make_tuple(ll.item(), to_array(g));
        },
        py::arg("log_probs"), py::arg("target"));
  m.def("ctc_brute_force", [](const Array &lp, const TokenSequence &c) { return ctc_brute_force(to_tensor(lp), c); },
        py::arg("log_probs"), py::arg("target"));
  m.def("ctc_feasible", &ctc_feasible, py::arg("frames"), py::arg("target"));
  m.def("collapse", &collapse, py::arg("alignment"));
  m.def("greedy_decode", [](const Array &lp) { return greedy_decode(to_tensor(lp)); }, py::arg("log_probs"));
  m.def("ctc_oracle",
        [](std::size_t trials, std::size_t max_frames, std::size_t max_vocab, std::size_t max_target,
           std::uint64_t seed) {
          OracleReport r = ctc_oracle(trials, max_frames, max_vocab, max_target, seed);
          py::dict d;
          d["trials"] = r.trials;
          d["failures"] = r.failures;
          d["max_error"] = r.max_error;
          return d;
        },
        py::arg("trials") = 1000, py::arg("max_frames") = 6, py::arg("max_vocab") = 3,
        py::arg("max_target") = 3, py::arg("seed") = 1);

  m.def("gaussian_kl",
        [](const Array &mu_q, const Array &sigma_q, const Array &mu_p, const Array &sigma_p,
           const std::vector<std::size_t> &lengths) {
          return gaussian_kl(gaussian(mu_q, sigma_q), gaussian(mu_p, sigma_p), SequenceMask(lengths)).item();
        },
        py::arg("mu_q"), py::arg("sigma_q"), py::arg("mu_p"), py::arg("sigma_p"), py::arg("lengths"));
  m.def("self_distillation_loss",
        [](const Array &student, const Array &teacher, const std::vector<std::size_t> &lengths) {
          return self_distillation_loss(to_tensor(student), to_tensor(teacher), SequenceMask(lengths)).item();
        },
        py::arg("student_log_probs"), py::arg("teacher_log_probs"), py::arg("lengths"));

  m.def("edit_distance", &edit_distance, py::arg("a"), py::arg("b"));
  m.def("error_rate", &error_rate, py::arg("refs"), py::arg("hyps"));

  m.def("load_config", [](const py::object &source) { return config_dict(config_from(source)); },
        py::arg("source") = py::none(),
        "Configuration as a dict of strings, from a path, `key = value` text, or defaults.");

  m.def("generate",
        [](std::size_t count, std::uint64_t seed, const py::object &config) {
          RunConfig c = config_from(config);
          SyntheticTask task(c.data);
          py::list out;
          for (const auto &u : task.generate_set(count, seed, "gen"))
            out.append(py::make_tuple(to_array(u.features), u.tokens));
          return out;
        },
        py::arg("count"), py::arg("seed"), py::arg("config") = py::none(),
        "List of (features [T, d_feat], tokens) pairs.");

  m.def("gradcheck",
        [](std::size_t max_elements) {
          RunConfig c = gradcheck_config();
          LvCtcModel model(c.model_config(), c.train.seed);
          GradcheckOptions o;
          o.max_elements = max_elements;
          GradcheckReport r = run_gradcheck(model, gradcheck_batch(c), c.loss,
                                            ForwardContext{true, c.train.seed}, o);
          py::dict groups;
          for (const auto &g : r.groups) groups[py::str(g.name)] = g.max_error;
          py::dict d;
          d["passed"] = r.passed;
          d["max_error"] = r.max_error;
          d["groups"] = groups;
          d["losses"] = breakdown_dict(r.losses);
          return d;
        },
        py::arg("max_elements") = 32);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const py::object &, std::uint64_t>(), py::arg("config") = py::none(), py::arg("seed") = 1)
      .def_static("load", &PyModel::load, py::arg("path"))
      .def("decode", &PyModel::decode, py::arg("features"))
      .def("decode_iterative", &PyModel::decode_iterative, py::arg("features"), py::arg("iterations") = 3)
      .def("losses", &PyModel::losses, py::arg("utterances"), py::arg("training") = false,
           py::arg("seed") = 1)
      .def("save", &PyModel::save, py::arg("path"))
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def_property_readonly("config", &PyModel::config);
}
