#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ngram/attention.hpp"
#include "ngram/cli.hpp"
#include "ngram/incremental.hpp"
#include "ngram/model.hpp"
#include "ngram/training.hpp"

namespace py = pybind11;
using namespace ngram;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  const auto info = a.request();
  Shape shape(info.shape.begin(), info.shape.end());
  const auto* p = static_cast<const double*>(info.ptr);
  return Tensor(shape, std::vector<double>(p, p + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::array_t<bool> mask_array(const MaskMatrix& m) {
  py::array_t<bool> out({static_cast<py::ssize_t>(m.queries()), static_cast<py::ssize_t>(m.keys())});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t q = 0; q < m.queries(); ++q) {
    for (std::size_t k = 0; k < m.keys(); ++k) v(q, k) = m.allowed(q, k);
  }
  return out;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["token_accuracy"] = r.token_accuracy;
  d["sequence_exact_match"] = r.sequence_exact_match;
  d["log_perplexity"] = r.log_perplexity;
  d["sequences"] = r.sequences;
  d["predicted_tokens"] = r.predicted_tokens;
  return d;
}

std::vector<Example> to_examples(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs) {
  std::vector<Example> out;
  for (const auto& [s, t] : pairs) out.push_back({TokenSequence::source(s), TokenSequence::target(t)});
  return out;
}

}  // namespace

PYBIND11_MODULE(_ngram, m) {
  m.doc() = "N-gram masked decoder self-attention";

  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<ProtocolError>(m, "ProtocolError", PyExc_RuntimeError);

  m.attr("BOS") = kBos;
  m.attr("EOS") = kEos;
  m.attr("PAD") = kPad;

  py::class_<MaskSpec>(m, "MaskSpec")
      .def_static("causal", &MaskSpec::causal)
      .def_static("ngram", &MaskSpec::ngram, py::arg("order"))
      .def_static("full", &MaskSpec::full)
      .def_readonly("order", &MaskSpec::order)
      .def("visible_keys", &MaskSpec::visible_keys, py::arg("k"))
      .def("__repr__", &MaskSpec::describe);

  m.def("build_mask", [](const MaskSpec& spec, std::size_t t) { return mask_array(build_mask(spec, t)); },
        py::arg("spec"), py::arg("length"));
  m.def(
      "scaled_dot_attention",
      [](const Array& q, const Array& k, const Array& v, const MaskSpec& spec) {
        return to_array(scaled_dot_attention(to_tensor(q), to_tensor(k), to_tensor(v),
                                             build_mask(spec, static_cast<std::size_t>(q.shape(0)))));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("mask"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("num_layers", &ModelConfig::num_layers)
      .def_readwrite("num_heads", &ModelConfig::num_heads)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("mask", &ModelConfig::mask)
      .def_readwrite("dropout_rate", &ModelConfig::dropout_rate)
      .def_readwrite("layer_norm_eps", &ModelConfig::layer_norm_eps)
      .def_readwrite("max_positions", &ModelConfig::max_positions)
      .def("validate", &ModelConfig::validate)
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; });

  py::class_<ModelParams>(m, "ModelParams")
      .def("parameter_count", &ModelParams::parameter_count)
      .def("names",
           [](const ModelParams& p) {
             std::vector<std::string> names;
             p.for_each([&](const std::string& n, const Tensor&) { names.push_back(n); });
             return names;
           })
      .def("get",
           [](const ModelParams& p, const std::string& name) {
             std::optional<Array> found;
             p.for_each([&](const std::string& n, const Tensor& t) {
               if (n == name) found = to_array(t);
             });
             if (!found) throw py::key_error(name);
             return *found;
           })
      .def("set",
           [](ModelParams& p, const std::string& name, const Array& value) {
             bool done = false;
             const Tensor replacement = to_tensor(value);
             p.for_each([&](const std::string& n, Tensor& t) {
               if (n != name) return;
               if (t.shape() != replacement.shape()) {
                 throw DimensionError(name + ": expected shape " + shape_to_string(t.shape()) + ", got " +
                                      shape_to_string(replacement.shape()));
               }
               t = replacement;
               done = true;
             });
             if (!done) throw py::key_error(name);
           })
      .def("__eq__", [](const ModelParams& a, const ModelParams& b) { return a == b; });

  m.def("init_params", &init_params, py::arg("config"), py::arg("seed"));
  m.def(
      "encode",
      [](const std::vector<int>& source, const ModelParams& p, const ModelConfig& c) {
        return to_array(encode(TokenSequence::source(source), p, c));
      },
      py::arg("source"), py::arg("params"), py::arg("config"));
  m.def(
      "decode_full",
      [](const std::vector<int>& prefix, const Array& memory, const ModelParams& p, const ModelConfig& c) {
        return to_array(decode_full(TokenSequence::target(prefix), to_tensor(memory), p, c));
      },
      py::arg("prefix"), py::arg("memory"), py::arg("params"), py::arg("config"));

  py::class_<DecodeState>(m, "DecodeState")
      .def_readonly("position", &DecodeState::position)
      .def_readonly("emitted", &DecodeState::emitted)
      .def("cached_positions", &DecodeState::cached_positions);
  m.def(
      "start_decode",
      [](const std::vector<int>& source, const ModelParams& p, const ModelConfig& c) {
        return start_decode(TokenSequence::source(source), p, c);
      },
      py::arg("source"), py::arg("params"), py::arg("config"));
  m.def(
      "incremental_step",
      [](DecodeState& state, int token, const ModelParams& p, const ModelConfig& c) {
        return to_array(incremental_step(state, token, p, c));
      },
      py::arg("state"), py::arg("token"), py::arg("params"), py::arg("config"));
  m.def(
      "greedy_decode",
      [](const std::vector<int>& source, const ModelParams& p, const ModelConfig& c, std::size_t max_len) {
        return greedy_decode(TokenSequence::source(source), p, c, max_len).ids;
      },
      py::arg("source"), py::arg("params"), py::arg("config"), py::arg("max_len"));

  py::class_<RingBufferCache>(m, "RingBufferCache")
      .def(py::init<std::size_t, std::size_t>(), py::arg("capacity"), py::arg("width"))
      .def(
          "push",
          [](RingBufferCache& c, std::size_t position, const std::vector<double>& key,
             const std::vector<double>& value) { c.push(position, key, value); },
          py::arg("position"), py::arg("key"), py::arg("value"))
      .def("window",
           [](const RingBufferCache& c) {
             const CacheWindow w = c.window();
             return py::make_tuple(to_array(w.keys), to_array(w.values), w.positions);
           })
      .def_property_readonly("capacity", &RingBufferCache::capacity)
      .def_property_readonly("count", &RingBufferCache::count)
      .def_property_readonly("next_slot", &RingBufferCache::next_slot)
      .def("allocated_numbers", &RingBufferCache::allocated_numbers);

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init<>())
      .def_property(
          "kind", [](const TaskSpec& t) { return to_string(t.kind); },
          [](TaskSpec& t, const std::string& s) { t.kind = parse_task_kind(s); })
      .def_readwrite("vocab_size", &TaskSpec::vocab_size)
      .def_readwrite("min_length", &TaskSpec::min_length)
      .def_readwrite("max_length", &TaskSpec::max_length)
      .def_readwrite("mapping_seed", &TaskSpec::mapping_seed)
      .def_readwrite("source_free", &TaskSpec::source_free)
      .def_readwrite("repeat_probability", &TaskSpec::repeat_probability);

  m.def(
      "gen_task",
      [](const TaskSpec& spec, std::uint64_t seed, std::size_t count) {
        SeededRng rng(seed);
        std::vector<std::pair<std::vector<int>, std::vector<int>>> out;
        for (const auto& e : gen_task(spec, rng, count)) out.emplace_back(e.source.ids, e.target.ids);
        return out;
      },
      py::arg("spec"), py::arg("seed"), py::arg("count"));

  py::class_<TrainOptions>(m, "TrainOptions")
      .def(py::init<>())
      .def_readwrite("steps", &TrainOptions::steps)
      .def_readwrite("batch_size", &TrainOptions::batch_size)
      .def_readwrite("learning_rate", &TrainOptions::learning_rate)
      .def_readwrite("seed", &TrainOptions::seed)
      .def_readwrite("eval_interval", &TrainOptions::eval_interval)
      .def_readwrite("dev_size", &TrainOptions::dev_size);

  m.def(
      "train",
      [](const ModelConfig& c, const TaskSpec& t, const TrainOptions& o) {
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(c, t, o);
        }
        py::dict d;
        d["params"] = std::move(r.params);
        d["loss_history"] = r.loss_history;
        d["best_step"] = r.best_step;
        d["best_dev"] = report_dict(r.best_dev);
        return d;
      },
      py::arg("config"), py::arg("task"), py::arg("options"));
  m.def(
      "evaluate",
      [](const ModelParams& p, const ModelConfig& c,
         const std::vector<std::pair<std::vector<int>, std::vector<int>>>& data) {
        return report_dict(evaluate(p, c, to_examples(data)));
      },
      py::arg("params"), py::arg("config"), py::arg("data"));
  m.def(
      "batch_loss",
      [](const ModelParams& p, const ModelConfig& c,
         const std::vector<std::pair<std::vector<int>, std::vector<int>>>& data) {
        return batch_loss(p, to_examples(data), c);
      },
      py::arg("params"), py::arg("config"), py::arg("data"));
  m.def(
      "grad_check",
      [](const ModelParams& p, const ModelConfig& c,
         const std::vector<std::pair<std::vector<int>, std::vector<int>>>& data, double h, std::size_t samples,
         std::uint64_t seed, std::optional<std::string> corrupt) {
        SeededRng rng(seed);
        std::optional<GradCorruption> corruption;
        if (corrupt) corruption = GradCorruption{*corrupt, 2.0};
        const GradCheckReport r = grad_check(p, to_examples(data), c, h, samples, rng, corruption);
        py::dict d;
        d["max_relative_error"] = r.max_relative_error;
        d["worst_parameter"] = r.worst_parameter;
        d["worst_index"] = r.worst_index;
        d["samples"] = r.samples;
        d["skipped_nonsmooth"] = r.skipped_nonsmooth;
        return d;
      },
      py::arg("params"), py::arg("config"), py::arg("data"), py::arg("h") = 1e-5, py::arg("samples") = 200,
      py::arg("seed") = 1, py::arg("corrupt") = py::none());

  m.def(
      "save_checkpoint",
      [](const std::string& path, const ModelConfig& c, const ModelParams& p) { save_checkpoint(path, c, p); },
      py::arg("path"), py::arg("config"), py::arg("params"));
  m.def(
      "load_checkpoint",
      [](const std::string& path) {
        Checkpoint ck = load_checkpoint(path);
        return py::make_tuple(ck.config, std::move(ck.params));
      },
      py::arg("path"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"));
}
