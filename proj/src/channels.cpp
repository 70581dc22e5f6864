#include "deepvlf/channels.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "deepvlf/message.hpp"

namespace deepvlf {

void NoiseSource::fill_gaussian(std::span<double> out, double stddev) {
  for (double& v : out) v = stddev * gaussian();
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  // splitmix64 chain
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(master);
  for (auto p : path) h = mix(h ^ mix(p + 0x632be59bd9b4e019ULL));
  return h;
}

double snr_to_sigma2(double eta_db) { return std::pow(10.0, -eta_db / 10.0); }

double sigma2_to_snr(double sigma2) { return 10.0 * std::log10(1.0 / sigma2); }

std::vector<double> awgn_transmit(std::span<const double> x, double sigma2, NoiseSource& noise) {
  if (sigma2 < 0.0) throw ConfigError("noise variance must be non-negative");
  const double sd = std::sqrt(sigma2);
  std::vector<double> y(x.begin(), x.end());
  for (double& v : y) v += sd * noise.gaussian();
  return y;
}

double feedback_symbol_scale(double sigma_b2) {
  if (sigma_b2 < 0.0) throw ConfigError("feedback noise variance must be non-negative");
  return std::sqrt(1.0 / (1.0 + sigma_b2));
}

std::vector<double> scale_feedback_symbols(std::span<const double> y, double sigma_b2) {
  const double cs = feedback_symbol_scale(sigma_b2);
  std::vector<double> out(y.begin(), y.end());
  for (double& v : out) v *= cs;
  return out;
}

double belief_scale(int m) {
  if (m < 1) throw ConfigError("bits per group must be >= 1");
  const double patterns = std::ldexp(1.0, m);
  return patterns / std::sqrt(patterns - 1.0);
}

Eigen::MatrixXd feedback_channel(const Eigen::MatrixXd& payload, double sigma_b2, NoiseSource& noise) {
  if (sigma_b2 < 0.0) throw ConfigError("feedback noise variance must be non-negative");
  const double sd = std::sqrt(sigma_b2);
  Eigen::MatrixXd out = payload;
  // Row-major draw order so vector and matrix payloads consume noise alike.
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) += sd * noise.gaussian();
  return out;
}

// ---- trajectories -----------------------------------------------------------

namespace {

[[noreturn]] void load_error(const std::string& origin, int line, const std::string& what) {
  throw std::runtime_error(origin + ":" + std::to_string(line) + ": " + what);
}

double parse_double(std::string_view s, const std::string& origin, int line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    load_error(origin, line, "malformed number '" + std::string(s) + "'");
  }
  return v;
}

int parse_header_field(const std::string& header, const std::string& key, const std::string& origin) {
  const auto pos = header.find(key + "=");
  if (pos == std::string::npos) load_error(origin, 1, "header is missing '" + key + "='");
  const char* begin = header.data() + pos + key.size() + 1;
  const char* end = header.data() + header.size();
  int v = 0;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || v <= 0) load_error(origin, 1, "bad value for '" + key + "'");
  return v;
}

}  // namespace

FadingTrajectory parse_fading_trajectory(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("#slots=", 0) != 0) {
    load_error(origin, 1, "expected header '#slots=<n> subcarriers=<k>'");
  }
  FadingTrajectory traj;
  traj.slots = parse_header_field(line, "slots", origin);
  traj.subcarriers = parse_header_field(line, "subcarriers", origin);
  traj.gains.reserve(static_cast<std::size_t>(traj.slots) * traj.subcarriers);

  int line_no = 1;
  int slot = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!traj.metadata.empty()) traj.metadata += '\n';
      traj.metadata += line.substr(1);
      continue;
    }
    if (slot >= traj.slots) load_error(origin, line_no, "more slot records than declared");
    std::istringstream tokens(line);
    std::string tok;
    int sc = 0;
    while (tokens >> tok) {
      const auto comma = tok.find(',');
      if (comma == std::string::npos) load_error(origin, line_no, "token '" + tok + "' is not 're,im'");
      const double re = parse_double(std::string_view(tok).substr(0, comma), origin, line_no);
      const double im = parse_double(std::string_view(tok).substr(comma + 1), origin, line_no);
      const Complex h(re, im);
      if (!std::isfinite(re) || !std::isfinite(im) || std::abs(h) < kMinFadingGain) {
        load_error(origin, line_no,
                   "slot " + std::to_string(slot) + " subcarrier " + std::to_string(sc) +
                       " has gain magnitude below " + std::to_string(kMinFadingGain));
      }
      traj.gains.push_back(h);
      ++sc;
    }
    if (sc != traj.subcarriers) {
      load_error(origin, line_no,
                 "slot " + std::to_string(slot) + " has " + std::to_string(sc) + " gains, expected " +
                     std::to_string(traj.subcarriers));
    }
    ++slot;
  }
  if (slot != traj.slots) {
    load_error(origin, line_no, "found " + std::to_string(slot) + " slots, header declares " +
                                    std::to_string(traj.slots));
  }
  return traj;
}

FadingTrajectory load_fading_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open fading trajectory " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_fading_trajectory(ss.str(), path.string());
}

void save_fading_trajectory(const FadingTrajectory& traj, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write fading trajectory " + path.string());
  out << "#slots=" << traj.slots << " subcarriers=" << traj.subcarriers << '\n';
  if (!traj.metadata.empty()) {
    std::istringstream meta(traj.metadata);
    std::string line;
    while (std::getline(meta, line)) out << '#' << line << '\n';
  }
  char buf[64];
  for (int s = 0; s < traj.slots; ++s) {
    for (int k = 0; k < traj.subcarriers; ++k) {
      const auto h = traj.gain(s, k);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", h.real(), h.imag());
      if (k) out << ' ';
      out << buf;
    }
    out << '\n';
  }
}

FadingWindow sample_fading_window(const FadingTrajectory& traj, int tau_max, NoiseSource& noise) {
  if (traj.slots < 1 || tau_max < 1) throw ConfigError("empty trajectory or tau_max < 1");
  FadingWindow w;
  w.offset = static_cast<int>(noise.next_u64() % static_cast<std::uint64_t>(traj.slots));
  w.subcarriers = traj.subcarriers;
  w.gains.reserve(static_cast<std::size_t>(tau_max) * traj.subcarriers);
  for (int r = 0; r < tau_max; ++r) {
    const int slot = (w.offset + r) % traj.slots;
    for (int k = 0; k < traj.subcarriers; ++k) w.gains.push_back(traj.gain(slot, k));
  }
  return w;
}

FadingTrajectory synthesize_rayleigh_trajectory(int slots, int subcarriers, double doppler, int sinusoids,
                                                std::uint64_t seed) {
  if (slots < 1 || subcarriers < 1 || sinusoids < 1) throw ConfigError("bad synthetic trajectory size");
  NoiseSource rng(seed);
  FadingTrajectory traj;
  traj.slots = slots;
  traj.subcarriers = subcarriers;
  traj.metadata = "synthetic sum-of-sinusoids Rayleigh (approximation) doppler=" + std::to_string(doppler) +
                  " sinusoids=" + std::to_string(sinusoids) + " seed=" + std::to_string(seed);
  traj.gains.assign(static_cast<std::size_t>(slots) * subcarriers, Complex{});
  const double two_pi = 2.0 * std::numbers::pi;
  const double norm = 1.0 / std::sqrt(static_cast<double>(sinusoids));
  for (int k = 0; k < subcarriers; ++k) {
    std::vector<double> freq(sinusoids), phase(sinusoids);
    for (int n = 0; n < sinusoids; ++n) {
      const double angle = two_pi * (n + rng.uniform()) / sinusoids;
      freq[n] = doppler * std::cos(angle);
      phase[n] = two_pi * rng.uniform();
    }
    for (int s = 0; s < slots; ++s) {
      Complex h{};
      for (int n = 0; n < sinusoids; ++n) h += std::polar(norm, two_pi * freq[n] * s + phase[n]);
      if (std::abs(h) < kMinFadingGain) h = std::polar(kMinFadingGain * 10.0, std::arg(h));
      traj.gains[static_cast<std::size_t>(s) * subcarriers + k] = h;
    }
  }
  return traj;
}

std::vector<Complex> pack_subcarriers(std::span<const double> symbols) {
  std::vector<Complex> out((symbols.size() + 1) / 2);
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double re = symbols[2 * k];
    const double im = 2 * k + 1 < symbols.size() ? symbols[2 * k + 1] : 0.0;
    out[k] = Complex(re, im);
  }
  return out;
}

std::vector<double> unpack_subcarriers(std::span<const Complex> carriers, std::size_t symbol_count) {
  if (carriers.size() * 2 < symbol_count) throw ConfigError("not enough subcarriers for symbol count");
  std::vector<double> out(symbol_count);
  for (std::size_t i = 0; i < symbol_count; ++i) {
    const auto c = carriers[i / 2];
    out[i] = (i % 2 == 0) ? c.real() : c.imag();
  }
  return out;
}

std::vector<double> equalize_fading(std::span<const Complex> y, std::span<const Complex> h,
                                    std::size_t symbol_count) {
  if (y.size() > h.size()) throw ConfigError("fewer gains than received subcarriers");
  std::vector<Complex> eq(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) eq[k] = y[k] / h[k];
  return unpack_subcarriers(eq, symbol_count);
}

std::vector<double> equalized_noise(std::span<const Complex> h, std::size_t symbol_count, double sigma2,
                                    NoiseSource& noise) {
  const std::size_t carriers = (symbol_count + 1) / 2;
  if (h.size() < carriers) throw ConfigError("trajectory has fewer subcarriers than ceil(Q/2)");
  const double sd = std::sqrt(sigma2);
  std::vector<Complex> w(carriers);
  for (std::size_t k = 0; k < carriers; ++k) {
    const double re = sd * noise.gaussian();
    const double im = sd * noise.gaussian();
    w[k] = Complex(re, im) / h[k];
  }
  return unpack_subcarriers(w, symbol_count);
}

}  // namespace deepvlf
