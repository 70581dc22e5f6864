#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "deepvlf/channels.hpp"
#include "deepvlf/message.hpp"

using namespace deepvlf;

TEST_CASE("SNR conversions") {
  CHECK(snr_to_sigma2(0.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(snr_to_sigma2(10.0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(snr_to_sigma2(-3.0) == doctest::Approx(std::pow(10.0, 0.3)).epsilon(1e-15));
  for (double eta : {-5.0, 0.0, 1.0, 2.5, 17.0}) CHECK(sigma2_to_snr(snr_to_sigma2(eta)) == doctest::Approx(eta));
}

TEST_CASE("feedback and belief scales") {
  CHECK(std::abs(feedback_symbol_scale(0.01) - std::sqrt(1.0 / 1.01)) <= 1e-12 * std::sqrt(1.0 / 1.01));
  CHECK(feedback_symbol_scale(0.0) == 1.0);
  CHECK(std::abs(belief_scale(3) - 8.0 / std::sqrt(7.0)) <= 1e-12 * 8.0 / std::sqrt(7.0));
  CHECK(belief_scale(1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(feedback_symbol_scale(-0.1), ConfigError);
}

TEST_CASE("belief_scale normalizes a one-hot belief to unit mean-square after centering") {
  // C_b * (e_j - 1/2^m) has mean-square 1/2^m * C_b^2 * (1 - 1/2^m).
  for (int m = 1; m <= 6; ++m) {
    const double p = std::ldexp(1.0, m);
    const double c = belief_scale(m);
    const double ms = c * c * ((1 - 1 / p) * (1 - 1 / p) + (p - 1) / (p * p)) / p;
    CHECK(ms == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("noise sources are reproducible") {
  NoiseSource a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double x = a.gaussian();
    CHECK(x == b.gaussian());
    (void)c;
  }
  CHECK(a.position() == 100);
  CHECK(derive_seed(1, {2, 3}) == derive_seed(1, {2, 3}));
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
  CHECK(derive_seed(1, {2}) != derive_seed(2, {2}));
}

TEST_CASE("awgn with zero variance is the identity") {
  NoiseSource n(1);
  const std::vector<double> x{0.5, -1.0, 2.0};
  CHECK(awgn_transmit(x, 0.0, n) == x);
  CHECK_THROWS_AS(awgn_transmit(x, -1.0, n), ConfigError);
}

TEST_CASE("awgn empirical variance matches sigma^2") {
  NoiseSource n(7);
  const std::vector<double> x(200000, 0.0);
  const auto y = awgn_transmit(x, 0.3, n);
  double s = 0.0, s2 = 0.0;
  for (double v : y) {
    s += v;
    s2 += v * v;
  }
  const double mean = s / y.size();
  const double var = s2 / y.size() - mean * mean;
  // 5 standard errors of the sample variance.
  CHECK(std::abs(var - 0.3) < 5 * 0.3 * std::sqrt(2.0 / y.size()));
  CHECK(std::abs(mean) < 5 * std::sqrt(0.3 / y.size()));
}

TEST_CASE("feedback_channel preserves shape and is exact when noiseless") {
  NoiseSource n(3);
  Eigen::MatrixXd p = Eigen::MatrixXd::Random(8, 16);
  CHECK(feedback_channel(p, 0.0, n) == p);
  const auto noisy = feedback_channel(p, 0.5, n);
  CHECK(noisy.rows() == 8);
  CHECK(noisy.cols() == 16);
}

TEST_CASE("subcarrier packing pads odd counts") {
  const std::vector<double> x{1, 2, 3};
  const auto c = pack_subcarriers(x);
  REQUIRE(c.size() == 2);
  CHECK(c[0] == Complex(1, 2));
  CHECK(c[1] == Complex(3, 0));
  CHECK(unpack_subcarriers(c, 3) == x);
}

TEST_CASE("equalization inverts known gains") {
  const std::vector<double> x{0.3, -0.7, 1.1, 0.2};
  const auto c = pack_subcarriers(x);
  const std::vector<Complex> h{{0.5, 0.5}, {-1.2, 0.1}};
  std::vector<Complex> y(c.size());
  for (std::size_t k = 0; k < c.size(); ++k) y[k] = h[k] * c[k];
  const auto eq = equalize_fading(y, h, x.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(eq[i] == doctest::Approx(x[i]).epsilon(1e-14));
}

TEST_CASE("equalized noise variance is sigma^2 / |h|^2") {
  NoiseSource n(9);
  const std::vector<Complex> h{{0.3, 0.4}};  // |h|^2 = 0.25
  const int trials = 100000;
  double s2 = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto w = equalized_noise(h, 2, 0.2, n);
    s2 += w[0] * w[0] + w[1] * w[1];
  }
  const double var = s2 / (2.0 * trials);
  CHECK(effective_noise_variance(0.2, h[0]) == doctest::Approx(0.8));
  CHECK(var == doctest::Approx(0.8).epsilon(0.03));
}

TEST_CASE("trajectory parsing") {
  const std::string text = "#slots=2 subcarriers=2\n# source test\n1,0 0.5,-0.5\n0,1 2,2\n";
  const auto t = parse_fading_trajectory(text);
  CHECK(t.slots == 2);
  CHECK(t.subcarriers == 2);
  CHECK(t.gain(0, 1) == Complex(0.5, -0.5));
  CHECK(t.gain(1, 0) == Complex(0, 1));
  CHECK(t.metadata == " source test");
}

TEST_CASE("trajectory parsing rejects bad records and names them") {
  try {
    parse_fading_trajectory("#slots=2 subcarriers=1\n1,0\n0,0\n", "traj.txt");
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("traj.txt:3") != std::string::npos);
    CHECK(msg.find("slot 1") != std::string::npos);
  }
  CHECK_THROWS(parse_fading_trajectory("slots=1 subcarriers=1\n1,0\n"));
  CHECK_THROWS(parse_fading_trajectory("#slots=1 subcarriers=2\n1,0\n"));
  CHECK_THROWS(parse_fading_trajectory("#slots=2 subcarriers=1\n1,0\n"));
  CHECK_THROWS(parse_fading_trajectory("#slots=1 subcarriers=1\n1;0\n"));
}

TEST_CASE("trajectory save/load round trip") {
  const auto t = synthesize_rayleigh_trajectory(50, 3, 0.05, 16, 11);
  const auto path = std::filesystem::temp_directory_path() / "deepvlf_traj_roundtrip.txt";
  save_fading_trajectory(t, path);
  const auto u = load_fading_trajectory(path);
  std::filesystem::remove(path);
  CHECK(u.slots == t.slots);
  CHECK(u.subcarriers == t.subcarriers);
  CHECK(u.gains == t.gains);
  CHECK(u.metadata == t.metadata);
}

TEST_CASE("synthetic Rayleigh gains have unit mean power") {
  const auto t = synthesize_rayleigh_trajectory(20000, 4, 0.01, 32, 5);
  double p = 0.0;
  for (const auto& h : t.gains) p += std::norm(h);
  CHECK(p / t.gains.size() == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("window sampling wraps around the trajectory end") {
  FadingTrajectory t;
  t.slots = 3;
  t.subcarriers = 1;
  t.gains = {{1, 0}, {2, 0}, {3, 0}};
  NoiseSource n(0);
  for (int i = 0; i < 20; ++i) {
    const auto w = sample_fading_window(t, 5, n);
    for (int r = 0; r < 5; ++r) CHECK(w.round(r)[0].real() == 1.0 + (w.offset + r) % 3);
  }
}
