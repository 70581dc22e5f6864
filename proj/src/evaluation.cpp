#include "deepvlf/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/beta.hpp>

#include "deepvlf/rollout.hpp"
#include "deepvlf/training.hpp"

namespace deepvlf {

Interval clopper_pearson(long errors, long trials, double level) {
  if (trials <= 0) return {0.0, 1.0};
  if (errors < 0 || errors > trials) throw std::invalid_argument("clopper_pearson: errors outside [0, trials]");
  const double alpha = 1.0 - level;
  Interval ci;
  const auto k = static_cast<double>(errors);
  const auto n = static_cast<double>(trials);
  ci.lo = errors == 0 ? 0.0 : boost::math::quantile(boost::math::beta_distribution<double>(k, n - k + 1), alpha / 2);
  ci.hi = errors == trials ? 1.0
                           : boost::math::quantile(boost::math::beta_distribution<double>(k + 1, n - k), 1 - alpha / 2);
  return ci;
}

BitGroupBlock session_block(const CodecShape& shape, std::uint64_t session_seed) {
  return random_blocks(1, shape.m * shape.groups, shape.groups, derive_seed(session_seed, {0}))[0];
}

namespace {

double threshold_of(const ProtocolConfig& p) {
  if (p.variant == Variant::kT) return p.gamma_t.value_or(0.0);
  return p.gamma.value_or(1.0);
}

}  // namespace

OperatingPointResult evaluate_operating_point(const CodecParameters<double>& params, const ProtocolConfig& protocol,
                                              long sessions, std::uint64_t seed, const EvalOptions& opts) {
  protocol.validate(params.shape.m);
  if (sessions < 1) throw ConfigError("session count must be >= 1");
  OperatingPointResult res;
  res.variant = protocol.variant;
  res.eta_f_db = protocol.channel.eta_f_db;
  res.eta_b_db = protocol.channel.eta_b_db;
  res.threshold = threshold_of(protocol);
  res.sessions = sessions;

  double rate_sum = 0.0, rate_sq = 0.0, tau_sum = 0.0, uses_sum = 0.0, power_sum = 0.0, drate_sum = 0.0;
  const int batch = std::max(1, opts.batch);
  for (long start = 0; start < sessions; start += batch) {
    const int n = static_cast<int>(std::min<long>(batch, sessions - start));
    std::vector<std::uint64_t> seeds(n);
    std::vector<BitGroupBlock> blocks;
    blocks.reserve(n);
    for (int i = 0; i < n; ++i) {
      seeds[i] = derive_seed(seed, {static_cast<std::uint64_t>(start + i)});
      blocks.push_back(session_block(params.shape, seeds[i]));
    }
    ad::Tape<double> tape(false);
    const BoundCodec bound = bind(tape, params, nullptr);
    RolloutRequest<double> req;
    req.params = &params;
    req.protocol = protocol;
    req.blocks = blocks;
    req.seeds = seeds;
    req.power = PowerMode::kInfer;
    const auto out = run_rollout(tape, bound, req);
    for (int i = 0; i < n; ++i) {
      const auto& s = out.sessions[i];
      res.errors += s.error() ? 1 : 0;
      const double r = code_rate(s);
      rate_sum += r;
      rate_sq += r * r;
      drate_sum += differential_rate(s);
      tau_sum += s.stop_round;
      uses_sum += s.n_total();
      power_sum += s.power_sum;
      ++res.causes[s.cause];
      if (opts.transcripts) write_transcript_record(*opts.transcripts, s, static_cast<std::uint64_t>(start + i));
    }
  }
  const double ns = static_cast<double>(sessions);
  res.bler = res.errors / ns;
  res.bler_ci = clopper_pearson(res.errors, sessions);
  res.mean_rate = rate_sum / ns;
  if (sessions > 1) {
    const double var = std::max(0.0, (rate_sq - ns * res.mean_rate * res.mean_rate) / (ns - 1));
    const double half = 1.959963984540054 * std::sqrt(var / ns);
    res.rate_ci = {res.mean_rate - half, res.mean_rate + half};
  } else {
    res.rate_ci = {res.mean_rate, res.mean_rate};
  }
  res.mean_differential_rate = drate_sum / ns;
  res.mean_tau = tau_sum / ns;
  res.mean_channel_uses = uses_sum / ns;
  res.mean_power = uses_sum > 0 ? power_sum / uses_sum : 0.0;
  return res;
}

std::vector<OperatingPointResult> sweep(const std::vector<SweepPoint>& points, long sessions_per_point,
                                        std::uint64_t master_seed, const EvalOptions& opts) {
  if (points.empty()) throw ConfigError("sweep needs at least one operating point");
  std::vector<OperatingPointResult> out;
  out.reserve(points.size());
  for (std::size_t j = 0; j < points.size(); ++j) {
    if (!points[j].params) throw ConfigError("sweep point " + std::to_string(j) + " has no model");
    out.push_back(evaluate_operating_point(*points[j].params, points[j].protocol, sessions_per_point,
                                           derive_seed(master_seed, {j}), opts));
  }
  return out;
}

std::vector<SweepPoint> sweep_points(const CodecParameters<double>& params, const ProtocolConfig& base,
                                     SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep axis has no values");
  std::vector<SweepPoint> out;
  for (double v : values) {
    SweepPoint p{base, &params};
    if (axis == SweepAxis::kEtaF) {
      p.protocol.channel.eta_f_db = v;
    } else if (base.variant == Variant::kT) {
      p.protocol.gamma_t = v;
    } else {
      p.protocol.gamma = v;
    }
    p.protocol.validate(params.shape.m);
    out.push_back(std::move(p));
  }
  return out;
}

DynamicsResult dynamics_experiment(const CodecParameters<double>& params, const ProtocolConfig& protocol, long trials,
                                   int rounds, std::uint64_t seed, int batch_trials) {
  const CodecShape& shape = params.shape;
  if (trials < 1) throw ConfigError("dynamics needs at least one trial");
  if (rounds < 1 || rounds > shape.tau_max) throw ConfigError("dynamics rounds must lie in [1, tau_max]");
  const int P = shape.patterns();
  DynamicsResult res;
  res.rounds = rounds;
  res.patterns = P;
  res.trials = trials;
  res.samples.assign(rounds, std::vector<std::vector<double>>(P));
  for (auto& r : res.samples)
    for (auto& v : r) v.reserve(trials);

  ProtocolConfig proto = protocol;
  proto.tau_max = rounds;
  double power_sum = 0.0, uses = 0.0;
  const int bt = std::max(1, batch_trials);
  for (long start = 0; start < trials; start += bt) {
    const int n = static_cast<int>(std::min<long>(bt, trials - start));
    std::vector<BitGroupBlock> blocks;
    std::vector<std::uint64_t> seeds;
    blocks.reserve(static_cast<std::size_t>(n) * P);
    for (int t = 0; t < n; ++t) {
      const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(start + t)});
      const BitGroupBlock base = session_block(shape, s);
      for (int j = 0; j < P; ++j) {
        Bits bits = base.bits();
        const Bits g = index_to_group(j, shape.m);
        std::copy(g.begin(), g.end(), bits.begin());
        blocks.push_back(partition_bits(std::move(bits), shape.groups));
        seeds.push_back(s);
      }
    }
    ad::Tape<double> tape(false);
    const BoundCodec bound = bind(tape, params, nullptr);
    RolloutRequest<double> req;
    req.params = &params;
    req.protocol = proto;
    req.blocks = blocks;
    req.seeds = seeds;
    req.power = PowerMode::kInfer;
    req.fixed_horizon = true;
    req.record_rounds = true;
    const auto out = run_rollout(tape, bound, req);
    for (std::size_t i = 0; i < out.sessions.size(); ++i) {
      const int j = static_cast<int>(i % P);
      const auto& recs = out.sessions[i].rounds;
      power_sum += out.sessions[i].power_sum;
      uses += out.sessions[i].n_total();
      for (int r = 0; r < rounds && r < static_cast<int>(recs.size()); ++r) res.samples[r][j].push_back(recs[r].sent[0]);
    }
  }
  for (int r = 0; r < rounds; ++r) res.separation.push_back(separation_index(res.samples[r]));
  res.mean_power = uses > 0 ? power_sum / uses : 0.0;
  return res;
}

double separation_index(const std::vector<std::vector<double>>& per_pattern) {
  std::vector<double> means;
  double within = 0.0;
  long pooled_n = 0;
  for (const auto& v : per_pattern) {
    if (v.empty()) continue;
    const double mu = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    means.push_back(mu);
    for (double x : v) within += (x - mu) * (x - mu);
    pooled_n += static_cast<long>(v.size());
  }
  if (means.size() < 2 || pooled_n == 0) return 0.0;
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / means.size();
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between /= means.size();
  within /= pooled_n;
  if (within == 0.0) return between == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return between / within;
}

double silverman_bandwidth(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) return 1.0;
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / (n - 1));
  std::vector<double> s = x;
  std::sort(s.begin(), s.end());
  auto quantile = [&](double p) {
    const double pos = p * (n - 1);
    const std::size_t i = static_cast<std::size_t>(pos);
    const double f = pos - i;
    return i + 1 < n ? s[i] * (1 - f) + s[i + 1] * f : s[i];
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0)) spread = sd > 0.0 ? sd : 1.0;
  return 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
}

std::vector<double> kde(const std::vector<double>& samples, const std::vector<double>& grid, double h) {
  std::vector<double> out(grid.size(), 0.0);
  if (samples.empty()) return out;
  const double norm = 1.0 / (samples.size() * h * std::sqrt(2.0 * M_PI));
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double x : samples) {
      const double z = (grid[g] - x) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out[g] = acc * norm;
  }
  return out;
}

std::string format_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void emit_results(std::ostream& out, const std::vector<OperatingPointResult>& rows) {
  out << "# schema=deepvlf.operating_points version=" << kResultsSchemaVersion << '\n';
  out << kOperatingPointHeader << '\n';
  for (const auto& r : rows) {
    out << to_string(r.variant) << ',' << format_value(r.eta_f_db) << ','
        << (r.eta_b_db ? format_value(*r.eta_b_db) : std::string("inf")) << ',' << format_value(r.threshold) << ','
        << r.sessions << ',' << format_value(r.bler) << ',' << format_value(r.bler_ci.lo) << ','
        << format_value(r.bler_ci.hi) << ',' << format_value(r.mean_rate) << ',' << format_value(r.mean_tau) << ','
        << format_value(r.mean_power) << '\n';
  }
}

void emit_dynamics(std::ostream& out, const DynamicsResult& dyn) {
  out << "# schema=deepvlf.dynamics version=" << kResultsSchemaVersion << '\n';
  out << kDynamicsHeader << '\n';
  for (std::size_t r = 0; r < dyn.samples.size(); ++r)
    for (std::size_t j = 0; j < dyn.samples[r].size(); ++j)
      for (double v : dyn.samples[r][j]) out << r + 1 << ',' << j << ',' << format_value(v) << '\n';
}

namespace {

template <typename T>
void write_file(const std::filesystem::path& path, const T& payload,
                void (*emit)(std::ostream&, const T&)) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  emit(f, payload);
  if (!f) throw std::runtime_error("write failed on " + path.string());
}

double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw std::runtime_error("bad number '" + s + "' in results");
  return v;
}

}  // namespace

void emit_results(const std::filesystem::path& path, const std::vector<OperatingPointResult>& rows) {
  write_file<std::vector<OperatingPointResult>>(path, rows, &emit_results);
}

void emit_dynamics(const std::filesystem::path& path, const DynamicsResult& dyn) {
  write_file<DynamicsResult>(path, dyn, &emit_dynamics);
}

std::vector<OperatingPointResult> read_results(std::istream& in) {
  std::vector<OperatingPointResult> rows;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kOperatingPointHeader) throw std::runtime_error("unexpected results header: " + line);
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    if (f.size() != 11) throw std::runtime_error("results row needs 11 fields: " + line);
    OperatingPointResult r;
    r.variant = parse_variant(f[0]);
    r.eta_f_db = parse_double(f[1]);
    if (f[2] != "inf") r.eta_b_db = parse_double(f[2]);
    r.threshold = parse_double(f[3]);
    r.sessions = std::stol(f[4]);
    r.bler = parse_double(f[5]);
    r.bler_ci = {parse_double(f[6]), parse_double(f[7])};
    r.mean_rate = parse_double(f[8]);
    r.mean_tau = parse_double(f[9]);
    r.mean_power = parse_double(f[10]);
    r.errors = std::lround(r.bler * r.sessions);
    rows.push_back(r);
  }
  if (!header) throw std::runtime_error("results stream has no header");
  return rows;
}

}  // namespace deepvlf
