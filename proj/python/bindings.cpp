#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "minidistill/bench.hpp"
#include "minidistill/checkpoint.hpp"
#include "minidistill/errors.hpp"
#include "minidistill/gradcheck.hpp"
#include "minidistill/losses.hpp"
#include "minidistill/model.hpp"

namespace py = pybind11;
using namespace minidistill;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Model = TransformerModel<double>;

ModelConfig make_config(int layers, int hidden, int heads, int vocab, int max_seq_len, int ffn, double dropout) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq_len;
  c.ffn_dim = ffn;
  c.dropout = dropout;
  c.validate();
  return c;
}

Tensor<double> to_tensor(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor<double>::matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

Array to_array(const Tensor<double>& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

std::vector<Tensor<double>> to_tensors(const std::vector<Array>& arrays) {
  std::vector<Tensor<double>> out;
  for (const auto& a : arrays) out.push_back(to_tensor(a));
  return out;
}

AttentionCapture<double> capture_last(const Model& m, const std::vector<int>& ids) {
  return m.encode(EncoderInput::single(ids), CaptureRequest::last()).captures.at(0);
}

}  // namespace

PYBIND11_MODULE(_minidistill, m) {
  m.doc() = "MiniLM-style self-attention distillation toolkit";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def(
      "count_params",
      [](int layers, int hidden, int heads, int vocab, int ffn) {
        ModelConfig c = make_config(layers, hidden, heads, vocab, 512, ffn, 0.1);
        const ParamCount p = count_params(c);
        return py::dict(py::arg("embedding") = p.embedding, py::arg("transformer") = p.transformer,
                        py::arg("other") = p.other, py::arg("total") = p.total());
      },
      py::arg("layers"), py::arg("hidden"), py::arg("heads") = 12, py::arg("vocab") = 30522, py::arg("ffn") = 0);

  m.def(
      "flops_per_token",
      [](int layers, int hidden, int heads, int seq_len, int ffn) {
        return flops_per_token(make_config(layers, hidden, heads, 30522, 512, ffn, 0.1), seq_len);
      },
      py::arg("layers"), py::arg("hidden"), py::arg("heads") = 12, py::arg("seq_len") = 128, py::arg("ffn") = 0);

  m.def("format_count", &format_count);
  m.def("synth_corpus", &synth_corpus, py::arg("seed"), py::arg("num_documents"));

  m.def(
      "gradcheck",
      [](const std::string& group) {
        py::list out;
        for (const auto& r : run_gradchecks(default_gradchecks(group))) {
          out.append(py::dict(py::arg("name") = r.name, py::arg("group") = r.group, py::arg("checked") = r.checked,
                              py::arg("max_rel_error") = r.max_rel_error, py::arg("passed") = r.passed,
                              py::arg("error") = r.error));
        }
        return out;
      },
      py::arg("group") = "all");

  m.def(
      "value_relation",
      [](const std::vector<Array>& values, std::size_t valid_len) {
        const auto vs = to_tensors(values);
        if (vs.empty()) throw ShapeError("no heads given");
        if (valid_len == 0) valid_len = vs[0].rows();
        std::vector<Array> out;
        for (const auto& r : value_relation(vs, static_cast<int>(vs[0].cols()), valid_len)) out.push_back(to_array(r));
        return out;
      },
      py::arg("values"), py::arg("valid_len") = 0, "Per-head softmax(V V^T / sqrt(d_k)).");

  m.def(
      "value_relation_loss",
      [](const std::vector<Array>& teacher, const std::vector<Array>& student, std::size_t valid_len) {
        const auto t = to_tensors(teacher);
        if (t.empty()) throw ShapeError("no heads given");
        if (valid_len == 0) valid_len = t[0].rows();
        return value_relation_loss(t, to_tensors(student), valid_len).item();
      },
      py::arg("teacher"), py::arg("student"), py::arg("valid_len") = 0);

  py::class_<Model>(m, "Model")
      .def(py::init([](int layers, int hidden, int heads, int vocab, int max_seq_len, int ffn, double dropout,
                       std::uint64_t seed) {
             return Model::init(make_config(layers, hidden, heads, vocab, max_seq_len, ffn, dropout), seed);
           }),
           py::arg("layers"), py::arg("hidden"), py::arg("heads"), py::arg("vocab"), py::arg("max_seq_len") = 128,
           py::arg("ffn") = 0, py::arg("dropout") = 0.1, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return load_model<double>(path); })
      .def("save", [](const Model& self, const std::string& path) { save_model(path, self); })
      .def_property_readonly("layers", [](const Model& self) { return self.config().num_layers; })
      .def_property_readonly("hidden", [](const Model& self) { return self.config().hidden; })
      .def_property_readonly("heads", [](const Model& self) { return self.config().heads; })
      .def("param_count", &Model::param_count)
      .def("clone", &Model::clone)
      .def("encode", [](const Model& self, const std::vector<int>& ids) {
        return to_array(self.encode(EncoderInput::single(ids)).hidden);
      })
      .def("attention", [](const Model& self, const std::vector<int>& ids) {
        const auto cap = capture_last(self, ids);
        std::vector<Array> out;
        for (const auto& h : cap.last().heads) out.push_back(to_array(h.attention));
        return out;
      }, "Last-layer attention distributions, one array per head.");

  m.def(
      "minilm_loss",
      [](const Model& teacher, const Model& student, const std::vector<int>& ids, bool with_value_relation) {
        const auto t = capture_last(teacher, ids), s = capture_last(student, ids);
        const auto terms = minilm_loss(t.last(), s.last(), ids.size(), with_value_relation);
        return py::dict(py::arg("total") = terms.total.item(), py::arg("attention") = terms.attention,
                        py::arg("value_relation") = terms.value_relation);
      },
      py::arg("teacher"), py::arg("student"), py::arg("ids"), py::arg("with_value_relation") = true);
}
