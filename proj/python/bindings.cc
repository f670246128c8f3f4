#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <thread>

#include "dithc/comm.h"
#include "dithc/gemm.h"
#include "dithc/trainer.h"

namespace py = pybind11;
using namespace dithc;

namespace {

template <typename T>
Tensor to_tensor(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor t = Tensor::empty(shape, dtype_of<T>());
  std::memcpy(t.raw(), a.data(), t.nbytes());
  return t;
}

py::array to_numpy(const Tensor& t) {
  Tensor c = t.contiguous();
  std::vector<py::ssize_t> shape(c.shape().begin(), c.shape().end());
  if (c.dtype() == Dtype::F32) {
    py::array_t<float> out(shape);
    std::memcpy(out.mutable_data(), c.raw(), c.nbytes());
    return out;
  }
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), c.raw(), c.nbytes());
  return out;
}

bool is_f32(const py::array& a) { return a.dtype().is(py::dtype::of<float>()); }

// F32 when both operands are float32, F64 otherwise.
std::pair<Tensor, Tensor> operands(const py::array& a, const py::array& b) {
  if (is_f32(a) && is_f32(b))
    return {to_tensor<float>(a.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>()),
            to_tensor<float>(b.cast<py::array_t<float, py::array::c_style | py::array::forcecast>>())};
  return {to_tensor<double>(a.cast<py::array_t<double, py::array::c_style | py::array::forcecast>>()),
          to_tensor<double>(b.cast<py::array_t<double, py::array::c_style | py::array::forcecast>>())};
}

py::dict metrics_dict(const train::StepMetrics& m) {
  py::dict d;
  d["step"] = m.step;
  d["wall_s"] = m.wall_s;
  d["flops"] = m.model_flops;
  d["achieved_flops"] = m.achieved_flops;
  d["fast_peak_bytes"] = m.fast_peak;
  d["slow_peak_bytes"] = m.slow_peak;
  d["transfer_bytes"] = m.transfer_bytes;
  d["collective_bytes"] = m.collective_bytes;
  d["loss"] = m.loss;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "dithc runtime core";
  m.attr("__version__") = "0.1.0";

  py::register_exception<OutOfTier>(m, "OutOfTier", PyExc_MemoryError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<TransportError>(m, "TransportError", PyExc_ConnectionError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);

  m.def(
      "matmul",
      [](const py::array& a, const py::array& b) {
        auto [A, B] = operands(a, b);
        return to_numpy(matmul(A, B));
      },
      py::arg("a"), py::arg("b"), "Blocked GEMM; bitwise equal to gemm_naive.");
  m.def(
      "gemm_naive",
      [](const py::array& a, const py::array& b) {
        auto [A, B] = operands(a, b);
        return to_numpy(gemm_naive(A, B));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "allreduce_inproc",
      [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& bufs) {
        std::vector<Tensor> ts;
        for (auto& b : bufs) ts.push_back(to_tensor<double>(b));
        const int R = static_cast<int>(ts.size());
        if (R < 1) throw ArgumentError("allreduce_inproc: need at least one buffer");
        {
          py::gil_scoped_release nogil;
          auto hub = comm::InProcHub::create(R);
          std::vector<std::unique_ptr<comm::Communicator>> cs;
          for (int r = 0; r < R; ++r) cs.push_back(std::make_unique<comm::Communicator>(hub->endpoint(r)));
          std::vector<comm::CollectiveHandle> hs;
          for (int r = 0; r < R; ++r) hs.push_back(cs[static_cast<std::size_t>(r)]->allreduce_async(ts[static_cast<std::size_t>(r)]));
          for (auto& h : hs) h.wait();
        }
        std::vector<py::array> out;
        for (auto& t : ts) out.push_back(to_numpy(t));
        return out;
      },
      py::arg("buffers"), "Ring allreduce over in-process ranks, one buffer per rank.");

  m.def(
      "encode_frame_header",
      [](std::uint32_t type, std::uint64_t id, std::uint64_t offset, std::uint64_t len) {
        comm::FrameHeader h;
        if (type > 2) throw ArgumentError("frame type must be 0, 1 or 2");
        h.type = static_cast<comm::MsgType>(type);
        h.id = id;
        h.offset = offset;
        h.len = len;
        auto b = comm::encode_header(h);
        return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
      },
      py::arg("type"), py::arg("id"), py::arg("offset"), py::arg("length"));
  m.def(
      "decode_frame_header",
      [](const py::bytes& raw) {
        std::string s = raw;
        if (s.size() != comm::kFrameHeaderBytes) throw ArgumentError("frame header must be 32 bytes");
        auto h = comm::decode_header(reinterpret_cast<const std::uint8_t*>(s.data()));
        return py::make_tuple(static_cast<std::uint32_t>(h.type), h.id, h.offset, h.len);
      },
      py::arg("raw"));

  py::class_<dit::DiTConfig>(m, "DiTConfig")
      .def(py::init<>())
      .def_static("by_name", &dit::DiTConfig::by_name)
      .def_readwrite("H", &dit::DiTConfig::H)
      .def_readwrite("W", &dit::DiTConfig::W)
      .def_readwrite("C", &dit::DiTConfig::C)
      .def_readwrite("p", &dit::DiTConfig::p)
      .def_readwrite("D", &dit::DiTConfig::D)
      .def_readwrite("L", &dit::DiTConfig::L)
      .def_readwrite("heads", &dit::DiTConfig::heads)
      .def_readwrite("num_classes", &dit::DiTConfig::num_classes)
      .def_readwrite("T", &dit::DiTConfig::T)
      .def_property_readonly("N", &dit::DiTConfig::N)
      .def("validate", &dit::DiTConfig::validate);

  m.def("analytic_flops", &train::analytic_flops, py::arg("config"), py::arg("matmul_params"), py::arg("batch"));

  py::class_<train::Trainer>(m, "Trainer")
      .def(py::init([](const std::string& model, std::int64_t batch, std::uint64_t seed, double lr, bool automem,
                       std::optional<std::size_t> fast_capacity, const std::string& dtype, int clusters) {
             train::TrainConfig c;
             c.model_name = model;
             c.model = dit::DiTConfig::by_name(model);
             c.batch = batch;
             c.seed = seed;
             c.adam.lr = lr;
             c.automem = automem;
             c.fast_capacity = fast_capacity.value_or(kUnbounded);
             if (dtype != "f32" && dtype != "f64") throw ConfigError("dtype must be f32 or f64");
             c.dtype = dtype == "f32" ? Dtype::F32 : Dtype::F64;
             c.clusters = clusters;
             return std::make_unique<train::Trainer>(c);
           }),
           py::arg("model") = "toy", py::arg("batch") = 8, py::arg("seed") = 0, py::arg("lr") = 1e-4,
           py::arg("automem") = false, py::arg("fast_capacity") = py::none(), py::arg("dtype") = "f32",
           py::arg("clusters") = 4)
      .def(
          "step",
          [](train::Trainer& t) {
            train::StepMetrics s;
            {
              py::gil_scoped_release nogil;
              s = t.step();
            }
            return metrics_dict(s);
          })
      .def_property_readonly("steps_done", &train::Trainer::steps_done)
      .def_property_readonly("num_parameters", [](train::Trainer& t) { return t.model().num_parameters(); })
      .def_property_readonly("flops_per_step", &train::Trainer::flops_per_step);
}
