#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace deepvlf {

// Deterministic Gaussian/uniform source. Identical seed and draw order give
// identical sequences. Not thread-safe; each worker owns its own.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  double gaussian() {
    ++position_;
    return normal_(engine_);
  }
  double uniform() {
    ++position_;
    return uniform_(engine_);
  }
  std::uint64_t next_u64() {
    ++position_;
    return engine_();
  }
  void fill_gaussian(std::span<double> out, double stddev);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Child seed for (master, path...), e.g. (master_seed, worker_index).
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

double snr_to_sigma2(double eta_db);
double sigma2_to_snr(double sigma2);

std::vector<double> awgn_transmit(std::span<const double> x, double sigma2, NoiseSource& noise);

// C_s = sqrt(1 / (1 + sigma_b^2)).
double feedback_symbol_scale(double sigma_b2);
std::vector<double> scale_feedback_symbols(std::span<const double> y, double sigma_b2);

// C_b = 2^m / sqrt(2^m - 1).
double belief_scale(int m);

// Adds i.i.d. N(0, sigma_b^2) element-wise; shape preserved.
Eigen::MatrixXd feedback_channel(const Eigen::MatrixXd& payload, double sigma_b2, NoiseSource& noise);

// ---- fading ---------------------------------------------------------------

using Complex = std::complex<double>;

inline constexpr double kMinFadingGain = 1e-6;

struct FadingTrajectory {
  int slots = 0;
  int subcarriers = 0;
  // Row-major slot x subcarrier.
  std::vector<Complex> gains;
  std::string metadata;

  Complex gain(int slot, int subcarrier) const {
    return gains[static_cast<std::size_t>(slot) * subcarriers + subcarrier];
  }
};

// Header "#slots=<n> subcarriers=<k>", then one line per slot of k "re,im" tokens.
// Extra lines starting with "#" after the header are kept as metadata.
FadingTrajectory load_fading_trajectory(const std::filesystem::path& path);
void save_fading_trajectory(const FadingTrajectory& traj, const std::filesystem::path& path);
FadingTrajectory parse_fading_trajectory(const std::string& text, const std::string& origin = "<memory>");

struct FadingWindow {
  int offset = 0;
  int subcarriers = 0;
  // rounds x subcarriers, row-major.
  std::vector<Complex> gains;

  std::span<const Complex> round(int r) const {
    return std::span<const Complex>(gains).subspan(static_cast<std::size_t>(r) * subcarriers, subcarriers);
  }
};

// tau_max consecutive slots from a uniform offset, wrapping at the end.
FadingWindow sample_fading_window(const FadingTrajectory& traj, int tau_max, NoiseSource& noise);

// Approximation only: Jakes-style sum of sinusoids Rayleigh gains, one
// independent process per subcarrier. doppler is normalized (f_d * slot time).
FadingTrajectory synthesize_rayleigh_trajectory(int slots, int subcarriers, double doppler, int sinusoids,
                                                std::uint64_t seed);

// Real symbols (x_{2k}, x_{2k+1}) -> subcarrier k; odd counts pad one zero.
std::vector<Complex> pack_subcarriers(std::span<const double> symbols);
std::vector<double> unpack_subcarriers(std::span<const Complex> carriers, std::size_t symbol_count);

// y ./ h, unpacked back to symbol_count real values.
std::vector<double> equalize_fading(std::span<const Complex> y, std::span<const Complex> h,
                                    std::size_t symbol_count);

// Per-symbol effective noise after equalization: (w_re + i w_im) / h with
// each component N(0, sigma2). Variance becomes sigma2 / |h|^2.
std::vector<double> equalized_noise(std::span<const Complex> h, std::size_t symbol_count, double sigma2,
                                    NoiseSource& noise);

inline double effective_noise_variance(double sigma2, Complex h) { return sigma2 / std::norm(h); }

struct ChannelConfig {
  double eta_f_db = 1.0;
  std::optional<double> eta_b_db;  // nullopt = noiseless feedback
  std::shared_ptr<const FadingTrajectory> fading;

  double sigma_f2() const { return snr_to_sigma2(eta_f_db); }
  double sigma_b2() const { return eta_b_db ? snr_to_sigma2(*eta_b_db) : 0.0; }
  bool noiseless_feedback() const { return !eta_b_db.has_value(); }
};

}  // namespace deepvlf
