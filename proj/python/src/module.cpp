#include <complex>
#include <cstring>
#include <sstream>

#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <torch/torch.h>

#include "bgvc/cli.hpp"
#include "bgvc/config.hpp"
#include "bgvc/data.hpp"
#include "bgvc/dsp.hpp"
#include "bgvc/error.hpp"
#include "bgvc/evaluation.hpp"
#include "bgvc/losses.hpp"
#include "bgvc/training.hpp"

namespace py = pybind11;
using namespace bgvc;

namespace {

using RealArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using ComplexArray = py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>;

template <typename Array>
std::vector<int64_t> shape_of(const Array& a) {
  return {a.shape(), a.shape() + a.ndim()};
}

torch::Tensor real_tensor(const RealArray& a) {
  return torch::from_blob(const_cast<double*>(a.data()), shape_of(a), torch::kDouble).clone();
}

torch::Tensor complex_tensor(const ComplexArray& a) {
  return torch::from_blob(const_cast<std::complex<double>*>(a.data()), shape_of(a),
                          torch::kComplexDouble)
      .clone();
}

py::array_t<double> real_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kDouble).contiguous();
  py::array_t<double> out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * size_t(c.numel()));
  return out;
}

py::array_t<std::complex<double>> complex_array(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kComplexDouble).contiguous();
  py::array_t<std::complex<double>> out(
      std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
  std::memcpy(out.mutable_data(), c.data_ptr(), sizeof(std::complex<double>) * size_t(c.numel()));
  return out;
}

std::vector<torch::Tensor> tensors(const std::vector<RealArray>& xs) {
  std::vector<torch::Tensor> out;
  for (const auto& x : xs)
    out.push_back(real_tensor(x));
  return out;
}

double item(const torch::Tensor& t) { return t.item<double>(); }

dsp::FrameParams frames(int64_t fft_size, int64_t hop) {
  dsp::FrameParams f;
  f.fft_size = fft_size;
  f.hop = hop;
  f.validate();
  return f;
}

losses::PlcpaConfig plcpa_cfg(double p, double alpha, double beta) {
  losses::PlcpaConfig c;
  c.p = p;
  c.alpha = alpha;
  c.beta = beta;
  c.validate();
  return c;
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Joint separation and voice conversion core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  auto data_err = py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", data_err.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());

  m.attr("SAMPLE_RATE") = dsp::kSampleRate;

  m.def("stft", [](const RealArray& x, int64_t fft_size, int64_t hop) {
    return complex_array(dsp::stft(real_tensor(x), frames(fft_size, hop)));
  }, py::arg("samples"), py::arg("fft_size") = 1024, py::arg("hop") = 256);
  m.def("istft", [](const ComplexArray& bins, int64_t length, int64_t fft_size, int64_t hop) {
    return real_array(dsp::istft(complex_tensor(bins), frames(fft_size, hop), length));
  }, py::arg("bins"), py::arg("length"), py::arg("fft_size") = 1024, py::arg("hop") = 256);
  m.def("apply_crm", [](const ComplexArray& bins, const ComplexArray& mask) {
    return complex_array(dsp::apply_crm(complex_tensor(bins), complex_tensor(mask)));
  }, py::arg("bins"), py::arg("mask"));

  m.def("plcpa", [](const ComplexArray& est, const ComplexArray& ref, double p, double alpha) {
    return item(losses::plcpa(complex_tensor(est), complex_tensor(ref), plcpa_cfg(p, alpha, 1.0)));
  }, py::arg("est"), py::arg("ref"), py::arg("p") = 0.3, py::arg("alpha") = 0.5);
  m.def("asym_os", [](const ComplexArray& est, const ComplexArray& ref, double p) {
    return item(losses::asym_os(complex_tensor(est), complex_tensor(ref), p));
  }, py::arg("est"), py::arg("ref"), py::arg("p") = 0.3);
  m.def("plcpa_asym", [](const ComplexArray& est, const ComplexArray& ref, double p, double alpha,
                         double beta) {
    return item(losses::plcpa_asym(complex_tensor(est), complex_tensor(ref),
                                   plcpa_cfg(p, alpha, beta)));
  }, py::arg("est"), py::arg("ref"), py::arg("p") = 0.3, py::arg("alpha") = 0.5,
     py::arg("beta") = 1.0);
  m.def("rec_uni", [](const RealArray& est, const RealArray& ref) {
    return item(losses::rec_uni(real_tensor(est), real_tensor(ref)));
  }, py::arg("mel_hat"), py::arg("mel_ref"));
  m.def("adv_gen", [](const std::vector<RealArray>& fake) {
    return item(losses::adv_gen(tensors(fake)));
  }, py::arg("fake_scores"));
  m.def("adv_dis", [](const std::vector<RealArray>& real, const std::vector<RealArray>& fake) {
    return item(losses::adv_dis(tensors(real), tensors(fake)));
  }, py::arg("real_scores"), py::arg("fake_scores"));
  m.def("feat_match", [](const std::vector<RealArray>& real, const std::vector<RealArray>& fake) {
    return item(losses::feat_match(tensors(real), tensors(fake)));
  }, py::arg("real"), py::arg("fake"));
  m.def("mtl_total", [](const std::map<std::string, double>& parts, double uni, double ss,
                        double vc) {
    return losses::mtl_total(parts, losses::MtlWeights{uni, ss, vc});
  }, py::arg("parts"), py::arg("uni") = 45.0, py::arg("ss") = 1.0, py::arg("vc") = 1.0);

  m.def("si_sdr", [](const RealArray& est, const RealArray& ref) {
    return eval::si_sdr(real_tensor(est), real_tensor(ref));
  }, py::arg("est"), py::arg("ref"));

  m.def("measured_snr_db", [](const RealArray& speech, const RealArray& background) {
    return data::measured_snr_db(real_tensor(speech), real_tensor(background));
  }, py::arg("speech"), py::arg("background"));
  m.def("mix_at_snr", [](const RealArray& speech, const RealArray& background, double snr_db,
                         int64_t offset, bool wrap) {
    data::MixOptions opts;
    opts.wrap_background = wrap;
    auto ex = data::mix_at_snr(dsp::Waveform{real_tensor(speech)},
                               dsp::Waveform{real_tensor(background)},
                               {"speech", "background", snr_db, offset, 0}, opts);
    py::dict out;
    out["mix"] = real_array(ex.mix.samples);
    out["speech"] = real_array(ex.clean_speech.samples);
    out["background"] = real_array(ex.background.samples);
    out["gain"] = ex.gain;
    out["norm_scale"] = ex.norm_scale;
    return out;
  }, py::arg("speech"), py::arg("background"), py::arg("snr_db"), py::arg("offset") = 0,
     py::arg("wrap") = false);

  m.def("config_json", [](const std::string& path) {
    const auto cfg = path.empty() ? parse_config(nlohmann::json::object()) : load_config(path);
    return config_to_json(cfg).dump();
  }, py::arg("path") = "", "Validated configuration as a JSON string (defaults when no path)");

  m.def("convert", [](const std::string& checkpoint, const RealArray& mix,
                      const std::string& target_speaker, bool keep_background) {
    auto st = train::load_checkpoint(checkpoint);
    auto models = train::pipeline_of(st);
    auto r = vc::convert(dsp::Waveform{real_tensor(mix).to(torch::kFloat)}, target_speaker,
                         keep_background, models);
    return real_array(r.output.samples);
  }, py::arg("checkpoint"), py::arg("mix"), py::arg("target_speaker"),
     py::arg("keep_background") = true);

  m.def("run", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"), "Runs a bgvc subcommand; returns (exit code, stdout, stderr)");
}
