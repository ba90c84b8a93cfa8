#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "stridesense/audio_io.hpp"
#include "stridesense/dataset.hpp"
#include "stridesense/errors.hpp"
#include "stridesense/features.hpp"
#include "stridesense/synthdata.hpp"
#include "stridesense/training.hpp"
#include "stridesense/evaluation.hpp"
#include "stridesense/version.hpp"

namespace py = pybind11;
namespace ss = stridesense;

namespace {

std::vector<float> to_float_vector(const py::array_t<float, py::array::c_style | py::array::forcecast>& arr) {
  const auto view = arr.unchecked<1>();
  std::vector<float> out(static_cast<std::size_t>(view.shape(0)));
  for (py::ssize_t i = 0; i < view.shape(0); ++i) out[i] = view(i);
  return out;
}

std::vector<double> to_double_vector(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  const auto view = arr.unchecked<1>();
  std::vector<double> out(static_cast<std::size_t>(view.shape(0)));
  for (py::ssize_t i = 0; i < view.shape(0); ++i) out[i] = view(i);
  return out;
}

py::array_t<double> matrix_to_numpy(const std::vector<double>& values, int rows, int cols) {
  py::array_t<double> out({rows, cols});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_stridesense, m) {
  m.doc() = "Audio-based perceived-exertion (Borg RPE) regression toolkit";
  m.attr("__version__") = ss::kVersion;

  py::register_exception<ss::Error>(m, "StridesenseError", PyExc_RuntimeError);

  py::class_<ss::AudioClip>(m, "AudioClip")
      .def_property_readonly("samples",
                             [](const ss::AudioClip& clip) {
                               py::array_t<float> out(static_cast<py::ssize_t>(clip.samples.size()));
                               std::copy(clip.samples.begin(), clip.samples.end(),
                                         out.mutable_data());
                               return out;
                             })
      .def_readonly("sample_rate", &ss::AudioClip::sample_rate)
      .def_readonly("channel_count_original", &ss::AudioClip::channel_count_original)
      .def_property_readonly("duration_seconds", &ss::AudioClip::duration_seconds);

  m.def(
      "decode_wav",
      [](py::bytes data) {
        const std::string_view view = data;
        return ss::decode_wav({reinterpret_cast<const std::uint8_t*>(view.data()), view.size()});
      },
      py::arg("data"), "Decode a 16-bit PCM RIFF/WAVE container into a normalized mono clip");

  m.def(
      "encode_wav",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> samples, int sample_rate) {
        const auto buf = to_float_vector(samples);
        const auto bytes = ss::encode_wav(buf, sample_rate);
        return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
      },
      py::arg("samples"), py::arg("sample_rate"));

  m.def(
      "downmix_to_mono",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> left,
         py::array_t<float, py::array::c_style | py::array::forcecast> right) {
        const auto l = to_float_vector(left);
        const auto r = to_float_vector(right);
        const auto mono = ss::downmix_to_mono(l, r);
        py::array_t<float> out(static_cast<py::ssize_t>(mono.size()));
        std::copy(mono.begin(), mono.end(), out.mutable_data());
        return out;
      },
      py::arg("left"), py::arg("right"));

  m.def(
      "hann_window",
      [](int n) {
        const auto w = ss::hann_window(n);
        py::array_t<double> out(static_cast<py::ssize_t>(w.size()));
        std::copy(w.begin(), w.end(), out.mutable_data());
        return out;
      },
      py::arg("n"));

  m.def("hz_to_mel", &ss::hz_to_mel, py::arg("hz"));
  m.def("mel_to_hz", &ss::mel_to_hz, py::arg("mel"));

  m.def(
      "mel_filterbank",
      [](int n_mels, double f_min, double f_max, int sample_rate, int fft_size) {
        ss::MelConfig cfg{n_mels, f_min, f_max, sample_rate};
        const auto bank = ss::mel_filterbank(cfg, fft_size);
        return matrix_to_numpy(bank, n_mels, fft_size / 2 + 1);
      },
      py::arg("n_mels") = 64, py::arg("f_min") = 0.0, py::arg("f_max") = 8000.0,
      py::arg("sample_rate") = 16000, py::arg("fft_size") = 512);

  m.def(
      "log_mel",
      [](py::array_t<float, py::array::c_style | py::array::forcecast> samples, int sample_rate,
         int window_length, int hop_length, int fft_size, int n_mels, double f_min, double f_max) {
        ss::AudioClip clip;
        clip.samples = to_float_vector(samples);
        clip.sample_rate = sample_rate;
        clip.channel_count_original = 1;
        ss::StftConfig stft{window_length, hop_length, fft_size};
        ss::MelConfig mel{n_mels, f_min, f_max, sample_rate};
        const auto spec = ss::log_mel(clip, stft, mel);
        return matrix_to_numpy(spec.values, spec.n_frames, spec.n_mels);
      },
      py::arg("samples"), py::arg("sample_rate") = 16000, py::arg("window_length") = 512,
      py::arg("hop_length") = 160, py::arg("fft_size") = 512, py::arg("n_mels") = 64,
      py::arg("f_min") = 0.0, py::arg("f_max") = 8000.0,
      "Log-mel spectrogram (frames x mels) with the pipeline's framing defaults");

  m.def(
      "stft_frame_count",
      [](std::size_t n_samples, int window_length, int hop_length) {
        ss::StftConfig cfg{window_length, hop_length, window_length};
        return ss::stft_frame_count(n_samples, cfg);
      },
      py::arg("n_samples"), py::arg("window_length") = 512, py::arg("hop_length") = 160);

  m.def(
      "ccc",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> x,
         py::array_t<double, py::array::c_style | py::array::forcecast> y) {
        return ss::ccc(to_double_vector(x), to_double_vector(y));
      },
      py::arg("x"), py::arg("y"), "Concordance correlation coefficient");

  m.def(
      "mae",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> preds,
         py::array_t<double, py::array::c_style | py::array::forcecast> targets) {
        return ss::mae(to_double_vector(preds), to_double_vector(targets));
      },
      py::arg("predictions"), py::arg("targets"), "Mean absolute error");

  m.def(
      "generate_corpus",
      [](const std::filesystem::path& out_dir, int n_runners, int sessions_min, int sessions_max,
         double duration_s, double interval_min_s, double interval_max_s, double breathing_gain,
         std::uint64_t seed) {
        ss::SynthConfig cfg;
        cfg.n_runners = n_runners;
        cfg.min_sessions_per_runner = sessions_min;
        cfg.max_sessions_per_runner = sessions_max;
        cfg.session_duration_s = duration_s;
        cfg.question_interval_min_s = interval_min_s;
        cfg.question_interval_max_s = interval_max_s;
        cfg.breathing_gain = breathing_gain;
        cfg.seed = seed;
        ss::generate_corpus(cfg, ss::default_demographics_plan(n_runners), out_dir);
      },
      py::arg("out_dir"), py::arg("n_runners") = 4, py::arg("sessions_min") = 1,
      py::arg("sessions_max") = 2, py::arg("duration_s") = 300.0,
      py::arg("interval_min_s") = 60.0, py::arg("interval_max_s") = 90.0,
      py::arg("breathing_gain") = 0.12, py::arg("seed") = 0,
      "Write a synthetic labelled corpus (wav/ + manifest tables)");
}
