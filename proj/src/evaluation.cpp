#include "bgvc/evaluation.hpp"

#include <png.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <torch/torch.h>

#include "bgvc/error.hpp"
#include "bgvc/separator.hpp"
#include "bgvc/training.hpp"
#include "bgvc/wav_io.hpp"

namespace bgvc::eval {

namespace fs = std::filesystem;

double si_sdr(const torch::Tensor& est, const torch::Tensor& ref) {
  if (!est.defined() || !ref.defined())
    throw DataError("si_sdr: missing signal");
  if (est.numel() != ref.numel())
    throw DataError("si_sdr: length mismatch (" + std::to_string(est.numel()) + " vs " +
                    std::to_string(ref.numel()) + ")");
  auto e = est.detach().reshape({-1}).to(torch::kDouble);
  auto r = ref.detach().reshape({-1}).to(torch::kDouble);
  const double rr = r.dot(r).item<double>();
  if (!(rr > std::numeric_limits<double>::min()))
    throw DataError("si_sdr: silent reference");
  const double scale = e.dot(r).item<double>() / rr;
  auto target = r * scale;
  auto resid = e - target;
  const double tt = target.dot(target).item<double>();
  const double nn = resid.dot(resid).item<double>();
  if (nn <= 1e-20 * tt)
    return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(tt / nn);
}

double si_sdr(const dsp::Waveform& est, const dsp::Waveform& ref) {
  if (est.sample_rate_hz != ref.sample_rate_hz)
    throw DataError("si_sdr: sample rates differ");
  return si_sdr(est.samples, ref.samples);
}

// ---------------------------------------------------------------------------

std::vector<ReportRow> EvalReport::aggregate() const {
  struct Acc {
    double sum = 0.0, pesq = 0.0;
    size_t n = 0, n_pesq = 0;
  };
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, Acc> acc;
  for (const auto& r : rows) {
    auto key = std::make_pair(r.system, r.target);
    if (!acc.count(key))
      order.push_back(key);
    auto& a = acc[key];
    a.sum += r.si_sdr_db;
    ++a.n;
    if (r.pesq) {
      a.pesq += *r.pesq;
      ++a.n_pesq;
    }
  }
  std::vector<ReportRow> out;
  for (const auto& key : order) {
    const auto& a = acc[key];
    ReportRow r{key.first, "mean", key.second, a.sum / double(a.n), std::nullopt};
    if (a.n_pesq == a.n && a.n > 0)
      r.pesq = a.pesq / double(a.n_pesq);
    out.push_back(r);
  }
  return out;
}

namespace {

nlohmann::json row_json(const ReportRow& r, bool with_pesq) {
  nlohmann::json j = {{"system", r.system},
                      {"utterance_id", r.utterance_id},
                      {"target", r.target},
                      {"si_sdr_db", r.si_sdr_db}};
  if (with_pesq)
    j["pesq"] = r.pesq ? nlohmann::json(*r.pesq) : nlohmann::json(nullptr);
  return j;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path())
    fs::create_directories(p.parent_path());
}

} // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["si_sdr_cap_db"] = kSiSdrCap;
  j["has_pesq"] = has_pesq;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back(row_json(r, has_pesq));
  j["aggregate"] = nlohmann::json::array();
  for (const auto& r : aggregate())
    j["aggregate"].push_back(row_json(r, has_pesq));
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport rep;
  try {
    rep.has_pesq = j.at("has_pesq").get<bool>();
    for (const auto& r : j.at("rows")) {
      ReportRow row;
      row.system = r.at("system").get<std::string>();
      row.utterance_id = r.at("utterance_id").get<std::string>();
      row.target = r.at("target").get<std::string>();
      row.si_sdr_db = r.at("si_sdr_db").get<double>();
      if (r.contains("pesq") && !r["pesq"].is_null())
        row.pesq = r["pesq"].get<double>();
      rep.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return rep;
}

void EvalReport::write_csv(const fs::path& path) const {
  ensure_parent(path);
  std::ofstream os(path, std::ios::trunc);
  if (!os)
    throw DataError("report: cannot write " + path.string());
  os << "system,utterance_id,target,si_sdr_db" << (has_pesq ? ",pesq" : "") << '\n';
  auto line = [&](const ReportRow& r) {
    os << r.system << ',' << r.utterance_id << ',' << r.target << ',' << num(r.si_sdr_db);
    if (has_pesq)
      os << ',' << (r.pesq ? num(*r.pesq) : "");
    os << '\n';
  };
  for (const auto& r : rows)
    line(r);
  for (const auto& r : aggregate())
    line(r);
}

void EvalReport::write_json(const fs::path& path) const {
  ensure_parent(path);
  std::ofstream os(path, std::ios::trunc);
  if (!os)
    throw DataError("report: cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

PesqScorer external_scorer(const std::string& command) {
  if (command.empty())
    throw ConfigError("external scorer: empty command");
  return [command](const fs::path& ref, const fs::path& deg) {
    static std::atomic<uint64_t> counter{0};
    const fs::path input = fs::temp_directory_path() /
                           ("bgvc_score_" + std::to_string(::getpid()) + "_" +
                            std::to_string(counter++) + ".txt");
    {
      std::ofstream os(input);
      os << fs::absolute(ref).string() << '\n' << fs::absolute(deg).string() << '\n';
    }
    // grouped so a compound command sees the redirected stdin as a whole
    const std::string cmd = "{ " + command + "\n} < '" + input.string() + "'";
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) {
      fs::remove(input);
      throw DataError("external scorer: cannot run '" + command + "'");
    }
    std::string out;
    std::array<char, 256> buf{};
    while (std::fgets(buf.data(), int(buf.size()), pipe))
      out += buf.data();
    const int status = ::pclose(pipe);
    fs::remove(input);
    if (status != 0)
      throw DataError("external scorer exited with status " +
                      std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : status));
    std::istringstream is(out);
    double v;
    if (!(is >> v) || !std::isfinite(v))
      throw DataError("external scorer: expected one number, got '" + out + "'");
    std::string rest;
    if (is >> rest)
      throw DataError("external scorer: trailing output '" + rest + "'");
    return v;
  };
}

EvalReport evaluate(const std::vector<data::ExampleRecord>& manifest,
                    const SourceEstimator& estimator, const EvalOptions& opts) {
  if (!estimator)
    throw ConfigError("evaluate: no source estimator");
  EvalReport rep;
  rep.has_pesq = bool(opts.pesq);
  fs::path scratch = opts.scratch_dir.value_or(fs::temp_directory_path() / "bgvc_eval");
  for (const auto& rec : manifest) {
    const auto ex = data::load_example(rec);
    auto [speech, background] = estimator(ex.mix);
    ReportRow rs{opts.system, rec.utterance_id, "speech",
                 capped(si_sdr(speech, ex.clean_speech)), std::nullopt};
    ReportRow rb{opts.system, rec.utterance_id, "background",
                 capped(si_sdr(background, ex.background)), std::nullopt};
    if (opts.pesq) {
      const auto ds = scratch / (rec.utterance_id + "_speech.wav");
      const auto db = scratch / (rec.utterance_id + "_background.wav");
      audio::write_wav(ds, speech);
      audio::write_wav(db, background);
      rs.pesq = opts.pesq(rec.speech_path, ds);
      rb.pesq = opts.pesq(rec.background_path, db);
    }
    rep.rows.push_back(std::move(rs));
    rep.rows.push_back(std::move(rb));
  }
  return rep;
}

EvalReport evaluate_system(const fs::path& checkpoint, const fs::path& eval_manifest,
                           const fs::path& out_dir, const EvalOptions& opts) {
  auto st = train::load_checkpoint(checkpoint);
  const auto manifest = data::load_example_manifest(eval_manifest);
  EvalOptions o = opts;
  if (!o.scratch_dir)
    o.scratch_dir = out_dir / "estimates";
  auto rep = evaluate(
      manifest,
      [&](const dsp::Waveform& mix) { return sep::separate_wave(mix, st.separator); }, o);
  rep.write_csv(out_dir / "report.csv");
  rep.write_json(out_dir / "report.json");
  return rep;
}

// ---------------------------------------------------------------------------
// Figures

namespace {

std::array<uint8_t, 3> colour(double u) {
  // dark blue -> teal -> yellow
  static const std::array<std::array<double, 3>, 5> stops{{{0.05, 0.03, 0.25},
                                                           {0.23, 0.32, 0.55},
                                                           {0.13, 0.57, 0.55},
                                                           {0.37, 0.79, 0.38},
                                                           {0.99, 0.91, 0.14}}};
  u = std::clamp(u, 0.0, 1.0) * double(stops.size() - 1);
  const size_t i = std::min(size_t(u), stops.size() - 2);
  const double f = u - double(i);
  std::array<uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k)
    c[k] = uint8_t(std::lround(255.0 * (stops[i][k] * (1 - f) + stops[i + 1][k] * f)));
  return c;
}

std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<')
      o += "&lt;";
    else if (c == '>')
      o += "&gt;";
    else if (c == '&')
      o += "&amp;";
    else
      o += c;
  }
  return o;
}

void write_text(const fs::path& p, const std::string& s) {
  ensure_parent(p);
  std::ofstream os(p, std::ios::trunc);
  if (!os)
    throw DataError("figures: cannot write " + p.string());
  os << s;
}

std::string loss_curve_svg(const std::string& term, const std::vector<std::pair<double, double>>& pts,
                           int w, int h) {
  double x0 = pts.front().first, x1 = pts.front().first;
  double y0 = pts.front().second, y1 = pts.front().second;
  for (const auto& [x, y] : pts) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min(y0, y);
    y1 = std::max(y1, y);
  }
  if (x1 == x0)
    x1 = x0 + 1;
  if (y1 == y0)
    y1 = y0 + 1;
  const double ml = 60, mr = 20, mt = 30, mb = 40;
  const double pw = w - ml - mr, ph = h - mt - mb;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << svg_escape(term) << "</text>\n";
  os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << ml - 4 << "\" y=\"" << mt + 10 << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(y1) << "</text>\n";
  os << "<text x=\"" << ml - 4 << "\" y=\"" << mt + ph << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(y0) << "</text>\n";
  os << "<text x=\"" << ml << "\" y=\"" << h - 20 << "\" font-size=\"10\">" << fmt(x0)
     << "</text>\n";
  os << "<text x=\"" << ml + pw << "\" y=\"" << h - 20 << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(x1) << "</text>\n";
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 6
     << "\" text-anchor=\"middle\" font-size=\"11\">step</text>\n";
  os << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1\" points=\"";
  char buf[64];
  for (const auto& [x, y] : pts) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f ", ml + (x - x0) / (x1 - x0) * pw,
                  mt + (1.0 - (y - y0) / (y1 - y0)) * ph);
    os << buf;
  }
  os << "\"/>\n</svg>\n";
  return os.str();
}

std::string si_sdr_svg(const EvalReport& rep, int w, int h) {
  double lo = 0.0, hi = 0.0;
  for (const auto& r : rep.rows) {
    lo = std::min(lo, r.si_sdr_db);
    hi = std::max(hi, r.si_sdr_db);
  }
  if (hi == lo)
    hi = lo + 1;
  const double ml = 50, mr = 20, mt = 30, mb = 60;
  const double pw = w - ml - mr, ph = h - mt - mb;
  const double bw = pw / double(rep.rows.size());
  auto ypos = [&](double v) { return mt + (1.0 - (v - lo) / (hi - lo)) * ph; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2
     << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">SI-SDR (dB)</text>\n";
  char buf[160];
  for (size_t i = 0; i < rep.rows.size(); ++i) {
    const auto& r = rep.rows[i];
    const double y = ypos(std::max(r.si_sdr_db, 0.0)), y0 = ypos(std::min(r.si_sdr_db, 0.0));
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\"/>\n",
                  ml + double(i) * bw + 1, y, std::max(bw - 2, 1.0), y0 - y,
                  r.target == "speech" ? "#1f5fa8" : "#e07b28");
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", ml,
                ypos(0.0), ml + pw, ypos(0.0));
  os << buf;
  os << "<text x=\"" << ml - 4 << "\" y=\"" << mt + 10 << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(hi) << "</text>\n";
  os << "<text x=\"" << ml - 4 << "\" y=\"" << mt + ph << "\" text-anchor=\"end\" font-size=\"10\">"
     << fmt(lo) << "</text>\n";
  os << "<text x=\"" << ml << "\" y=\"" << h - 20
     << "\" font-size=\"11\" fill=\"#1f5fa8\">speech</text>\n";
  os << "<text x=\"" << ml + 60 << "\" y=\"" << h - 20
     << "\" font-size=\"11\" fill=\"#e07b28\">background</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string sanitize(const std::string& s) {
  std::string o;
  for (char c : s)
    o += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return o;
}

} // namespace

void write_heatmap_png(const fs::path& path, const torch::Tensor& values, int width, int height) {
  if (values.dim() != 2 || values.numel() == 0)
    throw ShapeError("heatmap: expected a non-empty 2-D array");
  if (width < 1 || height < 1)
    throw ConfigError("heatmap: invalid image size");
  auto v = values.detach().to(torch::kDouble).contiguous();
  const int64_t rows = v.size(0), cols = v.size(1);
  const double lo = v.min().item<double>(), hi = v.max().item<double>();
  const double span = hi > lo ? hi - lo : 1.0;
  const double* d = v.data_ptr<double>();

  std::vector<uint8_t> img(size_t(width) * size_t(height) * 3);
  for (int y = 0; y < height; ++y) {
    const int64_t r = rows - 1 - std::min<int64_t>(rows - 1, int64_t(y) * rows / height);
    for (int x = 0; x < width; ++x) {
      const int64_t c = std::min<int64_t>(cols - 1, int64_t(x) * cols / width);
      const auto rgb = colour((d[r * cols + c] - lo) / span);
      std::copy(rgb.begin(), rgb.end(), img.begin() + (size_t(y) * width + x) * 3);
    }
  }

  ensure_parent(path);
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp)
    throw DataError("heatmap: cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("heatmap: libpng failure writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, img.data() + size_t(y) * width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

nlohmann::json FigureManifest::to_json() const {
  nlohmann::json j;
  j["emitted"] = emitted;
  j["omitted"] = nlohmann::json::array();
  for (const auto& [name, why] : omitted)
    j["omitted"].push_back({{"figure", name}, {"reason", why}});
  return j;
}

FigureManifest emit_figures(const fs::path& training_log, const EvalReport& report,
                            const std::vector<MelPanels>& panels, const fs::path& out_dir,
                            const FigureOptions& opts, const dsp::MelParams& mel,
                            const dsp::FrameParams& frames) {
  const auto log = train::read_log(training_log);
  if (log.empty())
    throw DataError("figures: empty training log " + training_log.string());
  FigureManifest man;
  fs::create_directories(out_dir);

  std::map<std::string, std::vector<std::pair<double, double>>> curves;
  for (const auto& rec : log)
    for (const auto& [k, v] : rec.terms)
      curves[k].emplace_back(double(rec.step), v);
  for (const auto& [term, pts] : curves) {
    const std::string name = "loss_" + sanitize(term) + ".svg";
    write_text(out_dir / name, loss_curve_svg(term, pts, opts.plot_width, opts.plot_height));
    man.emitted.push_back(name);
  }

  if (report.rows.empty()) {
    man.omitted.emplace_back("si_sdr.svg", "empty report");
  } else {
    write_text(out_dir / "si_sdr.svg", si_sdr_svg(report, opts.plot_width, opts.plot_height));
    man.emitted.push_back("si_sdr.svg");
  }

  if (panels.empty())
    man.omitted.emplace_back("mel panels", "no panels requested");
  for (const auto& p : panels) {
    const std::pair<const char*, const dsp::Waveform*> items[] = {
        {"mix", &p.mix},
        {"separated_speech", &p.separated_speech},
        {"separated_background", &p.separated_background},
        {"converted", &p.converted},
        {"recomposed", &p.recomposed}};
    for (const auto& [label, w] : items) {
      const std::string name = "mel_" + sanitize(p.utterance_id) + "_" + label + ".png";
      if (w->size() < frames.fft_size) {
        man.omitted.emplace_back(name, "signal not provided");
        continue;
      }
      torch::NoGradGuard no_grad;
      auto m = dsp::log_mel(w->samples.to(torch::kFloat32), mel, frames); // [T, n_mels]
      write_heatmap_png(out_dir / name, m.transpose(0, 1), opts.mel_width, opts.mel_height);
      man.emitted.push_back(name);
    }
  }
  write_text(out_dir / "figures.json", man.to_json().dump(2) + "\n");
  return man;
}

} // namespace bgvc::eval
