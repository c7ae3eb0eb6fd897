#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <iostream>
#include <sstream>

#include "segnet/augment.hpp"
#include "segnet/cli.hpp"
#include "segnet/config.hpp"
#include "segnet/data.hpp"
#include "segnet/io.hpp"
#include "segnet/metrics.hpp"
#include "segnet/model.hpp"
#include "segnet/ops.hpp"
#include "segnet/parallel.hpp"
#include "segnet/pipeline.hpp"

namespace py = pybind11;
using namespace segnet;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
BasicTensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  if (shape.empty()) shape = {1};
  return BasicTensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
Array<T> to_array(const BasicTensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array<T> out(shape);
  std::copy(t.raw(), t.raw() + t.size(), out.mutable_data());
  return out;
}

BinaryMask to_mask(const Array<std::uint8_t>& a) {
  if (a.ndim() != 2) throw ShapeError("mask must be a 2-D array");
  return BinaryMask(a.shape(0), a.shape(1), std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

Array<std::uint8_t> mask_array(const BinaryMask& m) {
  Array<std::uint8_t> out({m.height(), m.width()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

bool is_double(const py::array& a) { return a.dtype().is(py::dtype::of<double>()); }

ops::ConvOptions conv_options(std::size_t stride, std::size_t dilation, const std::string& padding) {
  ops::ConvOptions o;
  o.stride = stride;
  o.dilation = dilation;
  if (padding == "same") {
    o.padding = ops::Padding::Same;
  } else if (padding == "valid") {
    o.padding = ops::Padding::Valid;
  } else {
    throw ShapeError("padding must be 'same' or 'valid'");
  }
  return o;
}

// Float64 inputs run in 64-bit, everything else in 32-bit.
template <typename Fn>
py::object dispatch_dtype(const py::array& probe, Fn&& fn) {
  if (is_double(probe)) return fn(double{});
  return fn(float{});
}

py::dict params_to_dict(const model::NamedParams<float>& params) {
  py::dict d;
  for (const auto& [name, t] : params) d[py::str(name)] = to_array(t);
  return d;
}

model::NamedParams<float> params_from_dict(const py::dict& d) {
  model::NamedParams<float> out;
  for (const auto& [k, v] : d) out.emplace(k.cast<std::string>(), to_tensor(v.cast<Array<float>>()));
  return out;
}

Sample make_sample(const Array<float>& image, const Array<std::uint8_t>& masks) {
  Sample s;
  s.id = "sample";
  s.image = to_tensor(image);
  s.masks = RegionMaskSet::from_tensor(to_tensor(masks));
  s.validate();
  return s;
}

py::tuple sample_tuple(const Sample& s) {
  return py::make_tuple(s.id, to_array(s.image), to_array(s.masks.to_tensor<std::uint8_t>()));
}

}  // namespace

PYBIND11_MODULE(_segnet, m) {
  m.doc() = "Residual U-Net with channel attention and ASPP: tensor ops, model, metrics, augmentation and data IO.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<io::FormatError>(m, "FormatError", PyExc_IOError);

  m.def("set_num_threads", &set_num_threads, py::arg("threads"));
  m.def("num_threads", &num_threads);

  // tensor-core
  m.def(
      "conv2d",
      [](const py::array& input, const py::array& kernel, const py::array& bias, std::size_t stride,
         std::size_t dilation, const std::string& padding) {
        const auto o = conv_options(stride, dilation, padding);
        return dispatch_dtype(input, [&](auto tag) -> py::object {
          using T = decltype(tag);
          return to_array(ops::conv2d(to_tensor<T>(input), to_tensor<T>(kernel), to_tensor<T>(bias), o));
        });
      },
      py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 1, py::arg("dilation") = 1,
      py::arg("padding") = "same", "Cross-correlation of (H, W, Cin) with a (kH, kW, Cin, Cout) kernel.");
  m.def(
      "conv2d_transpose",
      [](const py::array& input, const py::array& kernel, const py::array& bias, std::size_t stride) {
        return dispatch_dtype(input, [&](auto tag) -> py::object {
          using T = decltype(tag);
          return to_array(ops::conv2d_transpose(to_tensor<T>(input), to_tensor<T>(kernel), to_tensor<T>(bias), stride));
        });
      },
      py::arg("input"), py::arg("kernel"), py::arg("bias"), py::arg("stride") = 2,
      "Adjoint of a valid conv2d; kernel is (kH, kW, Cout, Cin).");
  m.def("global_avg_pool", [](const py::array& f) {
    return dispatch_dtype(f, [&](auto tag) -> py::object { return to_array(ops::global_avg_pool(to_tensor<decltype(tag)>(f))); });
  });
  m.def("global_max_pool", [](const py::array& f) {
    return dispatch_dtype(f, [&](auto tag) -> py::object { return to_array(ops::global_max_pool(to_tensor<decltype(tag)>(f))); });
  });
  m.def("relu", [](const py::array& x) {
    return dispatch_dtype(x, [&](auto tag) -> py::object { return to_array(ops::relu(to_tensor<decltype(tag)>(x))); });
  });
  m.def("sigmoid", [](const py::array& x) {
    return dispatch_dtype(x, [&](auto tag) -> py::object { return to_array(ops::sigmoid(to_tensor<decltype(tag)>(x))); });
  });

  // model
  py::enum_<model::Variant>(m, "Variant")
      .value("baseline", model::Variant::Baseline)
      .value("enhanced", model::Variant::Enhanced);

  py::class_<model::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("input_size", &model::ModelConfig::input_size)
      .def_readwrite("input_channels", &model::ModelConfig::input_channels)
      .def_readwrite("encoder_tap_widths", &model::ModelConfig::encoder_tap_widths)
      .def_readwrite("bottleneck_width", &model::ModelConfig::bottleneck_width)
      .def_readwrite("decoder_widths", &model::ModelConfig::decoder_widths)
      .def_readwrite("aspp_filters", &model::ModelConfig::aspp_filters)
      .def_readwrite("aspp_dilations", &model::ModelConfig::aspp_dilations)
      .def_readwrite("output_channels", &model::ModelConfig::output_channels)
      .def_readwrite("variant", &model::ModelConfig::variant)
      .def("validate", &model::ModelConfig::validate)
      .def_static("miniature", &model::ModelConfig::miniature, py::arg("variant"))
      .def("to_json", [](const model::ModelConfig& c) { return config::to_json(c).dump(); })
      .def("__eq__", [](const model::ModelConfig& a, const model::ModelConfig& b) { return a == b; });

  m.def("parameter_count", &model::parameter_count, py::arg("config"));
  m.def("parameter_shapes", &model::parameter_shapes, py::arg("config"));
  m.def(
      "init_params", [](const model::ModelConfig& c, std::uint64_t seed) { return params_to_dict(model::init_params(c, seed)); },
      py::arg("config"), py::arg("seed") = 0);
  m.def(
      "predict",
      [](const Array<float>& image, const py::dict& params, const model::ModelConfig& c) {
        const auto p = params_from_dict(params);
        model::check_params(c, p);
        return to_array(model::predict(to_tensor(image), p, c));
      },
      py::arg("image"), py::arg("params"), py::arg("config"), "(S, S, 3) probabilities in WT, TC, ET order.");
  m.def(
      "channel_attention",
      [](const py::array& f) {
        return dispatch_dtype(f, [&](auto tag) -> py::object {
          return to_array(model::channel_attention(to_tensor<decltype(tag)>(f)));
        });
      },
      py::arg("features"));
  m.def(
      "channel_attention_weights",
      [](const py::array& f) {
        return dispatch_dtype(f, [&](auto tag) -> py::object {
          return to_array(model::channel_attention_weights(to_tensor<decltype(tag)>(f)));
        });
      },
      py::arg("features"));

  // metrics
  m.def("dice", [](const Array<std::uint8_t>& p, const Array<std::uint8_t>& g) { return metrics::dice(to_mask(p), to_mask(g)); },
        py::arg("pred"), py::arg("truth"));
  m.def(
      "hd95",
      [](const Array<std::uint8_t>& p, const Array<std::uint8_t>& g, const std::string& mode) {
        return metrics::hd95(to_mask(p), to_mask(g), metrics::parse_hd95_mode(mode));
      },
      py::arg("pred"), py::arg("truth"), py::arg("mode") = "max_of_directed");
  m.def(
      "extract_boundary",
      [](const Array<std::uint8_t>& mask) {
        const auto pts = metrics::extract_boundary(to_mask(mask));
        Array<std::int32_t> out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{2}});
        for (std::size_t i = 0; i < pts.size(); ++i) {
          out.mutable_at(i, 0) = pts[i].y;
          out.mutable_at(i, 1) = pts[i].x;
        }
        return out;
      },
      py::arg("mask"), "(N, 2) array of (y, x) boundary pixels in row-major order.");
  m.def(
      "edt",
      [](const Array<std::uint8_t>& mask) {
        const BinaryMask b = to_mask(mask);
        std::vector<Pixel> pts;
        for (std::size_t y = 0; y < b.height(); ++y) {
          for (std::size_t x = 0; x < b.width(); ++x) {
            if (b.at(y, x)) pts.push_back({static_cast<std::int32_t>(y), static_cast<std::int32_t>(x)});
          }
        }
        const auto d = metrics::edt(pts, b.height(), b.width());
        return to_array(d.reshaped({b.height(), b.width()}));
      },
      py::arg("mask"), "Distance from every pixel to the nearest nonzero pixel of `mask`.");
  m.def(
      "evaluate_regions",
      [](const Array<float>& pred, const Array<std::uint8_t>& truth, double threshold, const std::string& mode) {
        const auto scores = metrics::evaluate_regions(to_tensor(pred), RegionMaskSet::from_tensor(to_tensor(truth)),
                                                      threshold, metrics::parse_hd95_mode(mode));
        py::dict d;
        for (Region r : kRegions) {
          const auto& s = scores[static_cast<std::size_t>(r)];
          d[py::str(region_name(r))] = py::make_tuple(s.dsc, s.hd95);
        }
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("threshold") = 0.5, py::arg("mode") = "max_of_directed");

  // augment
  py::class_<augment::AugConfig>(m, "AugConfig")
      .def(py::init<>())
      .def_readwrite("rotation_deg", &augment::AugConfig::rotation_deg)
      .def_readwrite("shift_frac", &augment::AugConfig::shift_frac)
      .def_readwrite("zoom_frac", &augment::AugConfig::zoom_frac)
      .def_readwrite("hflip_prob", &augment::AugConfig::hflip_prob)
      .def_readwrite("seed", &augment::AugConfig::seed)
      .def_static("identity", &augment::AugConfig::identity);
  m.def(
      "augment_sample",
      [](const Array<float>& image, const Array<std::uint8_t>& masks, const augment::AugConfig& c, std::uint64_t index,
         std::uint64_t epoch) {
        const Sample out = augment::augment_sample(make_sample(image, masks), c, index, epoch);
        return py::make_tuple(to_array(out.image), to_array(out.masks.to_tensor<std::uint8_t>()));
      },
      py::arg("image"), py::arg("masks"), py::arg("config"), py::arg("index") = 0, py::arg("epoch") = 0);
  m.def(
      "hflip",
      [](const Array<float>& image, const Array<std::uint8_t>& masks) {
        augment::AffineTransform t;
        t.hflip = true;
        const Sample out = augment::apply_transform(make_sample(image, masks), t);
        return py::make_tuple(to_array(out.image), to_array(out.masks.to_tensor<std::uint8_t>()));
      },
      py::arg("image"), py::arg("masks"));

  // data
  m.def(
      "generate_sample", [](std::size_t index, std::size_t size, std::uint64_t seed, std::size_t channels) {
        return sample_tuple(data::generate_sample(index, size, seed, channels));
      },
      py::arg("index"), py::arg("size"), py::arg("seed"), py::arg("channels") = 4, "(id, image, masks) for one synthetic sample.");
  m.def(
      "split_dataset",
      [](const std::vector<std::string>& ids, std::array<double, 3> ratios, std::uint64_t seed) {
        const auto s = data::split_dataset(ids, {ratios[0], ratios[1], ratios[2]}, seed);
        return py::make_tuple(s.train, s.val, s.test);
      },
      py::arg("ids"), py::arg("ratios") = std::array<double, 3>{0.70, 0.15, 0.15}, py::arg("seed") = 0);
  m.def("write_tensor_file", [](const std::filesystem::path& path, const py::array& a) {
    if (a.dtype().is(py::dtype::of<std::uint8_t>())) {
      io::write_tensor_file(path, to_tensor(a.cast<Array<std::uint8_t>>()));
    } else {
      io::write_tensor_file(path, to_tensor(a.cast<Array<float>>()));
    }
  });
  m.def("read_tensor_file", [](const std::filesystem::path& path) -> py::object {
    auto t = io::read_tensor_file(path);
    if (auto* f = std::get_if<Tensor>(&t)) return to_array(*f);
    return to_array(std::get<ByteTensor>(t));
  });

  // pipeline
  m.def(
      "gradcheck",
      [](model::Variant v, std::uint64_t seed, std::size_t coords) {
        const auto c = model::ModelConfig::miniature(v);
        const Sample s = data::generate_sample(0, c.input_size, seed, c.input_channels);
        pipeline::GradcheckOptions o;
        o.seed = seed;
        o.coords_per_tensor = coords;
        pipeline::GradcheckResult r;
        {
          py::gil_scoped_release release;
          r = pipeline::gradcheck(c, s, o);
        }
        py::dict d;
        d["max_rel_error"] = r.max_rel_error;
        d["worst_tensor"] = r.worst_tensor;
        d["checked"] = r.checked;
        d["skipped"] = r.skipped;
        return d;
      },
      py::arg("variant"), py::arg("seed") = 0, py::arg("coords") = 20);

  m.def("default_config", [] { return config::default_config_text(); });
  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::dispatch(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run a command line in-process; returns (exit code, stdout, stderr).");
}
