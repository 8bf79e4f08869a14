#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include "oracles.hpp"
#include "raptor/errors.hpp"
#include "raptor/perturb.hpp"
#include "raptor/rng.hpp"

using namespace raptor;

namespace {

Waveform tone(double hz, std::size_t n, double amp = 1.0, int rate = kPipelineRate) {
  Waveform w{rate, std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i)
    w.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * double(i) / rate);
  return w;
}

Waveform random_wave(std::uint64_t seed, std::size_t n, double amp = 0.5) {
  Rng rng(seed);
  Waveform w{kPipelineRate, std::vector<double>(n)};
  for (double& s : w.samples) s = rng.uniform(-amp, amp);
  return w;
}

double power(const std::vector<double>& x) {
  double p = 0;
  for (double v : x) p += v * v;
  return p / double(x.size());
}

// SNR of y against x, with the signal component taken as the least-squares
// projection of y onto x so that a global gain does not count as noise.
double projected_snr_db(const std::vector<double>& x, const std::vector<double>& y) {
  double xy = 0, xx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
  }
  const double g = xy / xx;
  double ps = 0, pn = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ps += g * x[i] * g * x[i];
    pn += (y[i] - g * x[i]) * (y[i] - g * x[i]);
  }
  return 10.0 * std::log10(ps / pn);
}

double snr_db(const std::vector<double>& ref, const std::vector<double>& y) {
  std::vector<double> err(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) err[i] = y[i] - ref[i];
  return 10.0 * std::log10(power(ref) / power(err));
}

bool in_unit_range(const Waveform& w) {
  return std::all_of(w.samples.begin(), w.samples.end(), [](double s) { return s >= -1.0 && s <= 1.0; });
}

}  // namespace

TEST_CASE("crop_pad") {
  const auto w = random_wave(1, 64000);
  CHECK(crop_pad(w, 4.0) == w);

  const auto short_w = random_wave(2, 16000);
  const auto padded = crop_pad(short_w, 4.0);
  REQUIRE(padded.samples.size() == 64000);
  CHECK(std::equal(short_w.samples.begin(), short_w.samples.end(), padded.samples.begin()));
  CHECK(std::all_of(padded.samples.begin() + 16000, padded.samples.end(), [](double s) { return s == 0.0; }));

  const auto long_w = random_wave(3, 80000);
  const auto cropped = crop_pad(long_w, 4.0);
  REQUIRE(cropped.samples.size() == 64000);
  CHECK(std::equal(cropped.samples.begin(), cropped.samples.end(), long_w.samples.begin()));
}

TEST_CASE("mu-law code") {
  CHECK(mulaw_decode(mulaw_encode(0.0)) == 0.0);
  CHECK(mulaw_decode(mulaw_encode(1.0)) == doctest::Approx(1.0));
  CHECK(mulaw_decode(mulaw_encode(-1.0)) == doctest::Approx(-1.0));
  // monotone and odd
  double prev = -2;
  for (int i = -1000; i <= 1000; ++i) {
    const double x = i / 1000.0;
    const double y = mulaw_decode(mulaw_encode(x));
    CHECK(y >= prev);
    CHECK(y == -mulaw_decode(mulaw_encode(-x)));
    prev = y;
  }
}

TEST_CASE("voip_codec") {
  const Waveform silence{kPipelineRate, std::vector<double>(16000, 0.0)};
  CHECK(voip_codec(silence) == silence);

  const auto w = random_wave(5, 8000);
  CHECK(voip_codec(w) == voip_codec(w));

  const auto t = tone(440.0, 16000, 1.0);
  const auto out = voip_codec(t);
  REQUIRE(out.samples.size() == t.samples.size());
  const double snr = snr_db(t.samples, out.samples);
  CAPTURE(snr);
  CHECK(snr >= 20.0);
  CHECK(snr <= 45.0);
  CHECK(in_unit_range(out));

  CHECK_THROWS_AS(voip_codec(Waveform{8000, std::vector<double>(100, 0.1)}), InvalidArgument);
}

TEST_CASE("resample length contract") {
  for (std::size_t n : {0u, 1u, 7u, 100u, 8001u}) {
    CHECK(resample(std::vector<double>(n, 0.1), 16000, 8000).size() == n / 2);
    CHECK(resample(std::vector<double>(n, 0.1), 8000, 16000).size() == 2 * n);
  }
  // a band-limited tone survives a round trip through 8 kHz
  const auto t = tone(300.0, 8000, 0.5);
  const auto back = resample(resample(t.samples, 16000, 8000), 8000, 16000);
  std::vector<double> mid_t(t.samples.begin() + 200, t.samples.end() - 200);
  std::vector<double> mid_b(back.begin() + 200, back.end() - 200);
  CHECK(snr_db(mid_t, mid_b) > 40.0);
}

TEST_CASE("add_noise") {
  const auto w = random_wave(7, 16000);
  CHECK(add_noise(w, 15.0, 3) == add_noise(w, 15.0, 3));
  CHECK(add_noise(w, 15.0, 3) != add_noise(w, 15.0, 4));

  SUBCASE("unit-power tone at 15 dB") {
    const auto t = tone(440.0, 16000, std::sqrt(2.0));
    CHECK(power(t.samples) == doctest::Approx(1.0).epsilon(1e-9));
    const auto noisy = add_noise(t, 15.0, 1);
    CHECK(in_unit_range(noisy));
    const double snr = projected_snr_db(t.samples, noisy.samples);
    CAPTURE(snr);
    CHECK(snr >= 14.5);
    CHECK(snr <= 15.5);
  }
  SUBCASE("quiet signals are not rescaled") {
    const auto t = tone(200.0, 16000, 0.1);
    const auto noisy = add_noise(t, 20.0, 9);
    const double snr = snr_db(t.samples, noisy.samples);
    CHECK(std::abs(snr - 20.0) < 1e-9);
  }
  SUBCASE("silence is rejected") {
    CHECK_THROWS_AS(add_noise(Waveform{kPipelineRate, std::vector<double>(100, 0.0)}, 15.0, 1),
                    InvalidArgument);
  }
}

TEST_CASE("speed_pitch") {
  const auto w = random_wave(11, 64000);
  CHECK(speed_pitch(w, 1.0) == w);

  CHECK(resample_linear(w.samples, 2.0).size() == 32000);
  const auto fast = speed_pitch(w, 2.0);
  REQUIRE(fast.samples.size() == 64000);
  CHECK(std::all_of(fast.samples.begin() + 32000, fast.samples.end(), [](double s) { return s == 0.0; }));
  CHECK(fast.samples[10] == w.samples[20]);

  const auto t = tone(400.0, 16000, 0.8);
  const auto shifted = speed_pitch(t, 1.05);
  // 1 s of audio: one DFT bin per Hz
  const auto peak = oracle::dft_peak_bin(shifted.samples, 300, 600);
  CHECK(peak >= 419);
  CHECK(peak <= 421);
  CHECK(oracle::dft_peak_bin(t.samples, 300, 600) == 400);

  CHECK_THROWS_AS(speed_pitch(w, 0.4), InvalidArgument);
  CHECK_THROWS_AS(speed_pitch(w, 2.5), InvalidArgument);
  CHECK_THROWS_AS(speed_pitch(w, std::nan("")), InvalidArgument);
}

TEST_CASE("make_views") {
  const auto w = random_wave(13, 16000);
  TtaConfig cfg;
  cfg.master_seed = 5;
  const auto views = make_views(w, cfg, "utt1");
  REQUIRE(views.size() == 3);
  for (const auto& v : views) CHECK(v.samples.size() == w.samples.size());
  CHECK(views[0] == voip_codec(w));
  CHECK(views[2] == speed_pitch(w, cfg.speed_factor));
  CHECK(make_views(w, cfg, "utt1") == views);
  CHECK(make_views(w, cfg, "utt2")[1] != views[1]);

  cfg.K = 1;
  const auto one = make_views(w, cfg, "utt1");
  REQUIRE(one.size() == 1);
  CHECK(one[0] == views[0]);

  cfg.K = 5;
  const auto five = make_views(w, cfg, "utt1");
  REQUIRE(five.size() == 5);
  CHECK(five[3] == views[0]);
  CHECK(five[4] != five[1]);  // second noise view gets its own seed

  cfg.K = 0;
  CHECK_THROWS_AS(make_views(w, cfg, "utt1"), InvalidArgument);
  cfg.K = 3;
  cfg.speed_factor = 3.0;
  CHECK_THROWS_AS(make_views(w, cfg, "utt1"), InvalidArgument);
}

TEST_CASE("perturbations preserve length and range on random inputs") {
  Rng rng(99);
  TtaConfig cfg;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng.below(3000);
    auto w = random_wave(1000 + i, n, rng.uniform(0.05, 1.0));
    cfg.master_seed = i;
    cfg.speed_factor = rng.uniform(0.6, 1.9);
    cfg.noise_snr_db = rng.uniform(-5, 30);
    for (const auto& v : make_views(w, cfg, "r" + std::to_string(i))) {
      REQUIRE(v.samples.size() == n);
      REQUIRE(in_unit_range(v));
      REQUIRE(v.sample_rate == kPipelineRate);
    }
  }
}

TEST_CASE("wav io") {
  const auto dir = std::filesystem::temp_directory_path() / "raptor_perturb_test";
  std::filesystem::create_directories(dir);

  SUBCASE("write then read is within one quantization step") {
    const auto w = random_wave(17, 4000, 1.0);
    write_wav(w, dir / "a.wav", "config abc123");
    const auto back = read_wav(dir / "a.wav");
    REQUIRE(back.samples.size() == w.samples.size());
    for (std::size_t i = 0; i < w.samples.size(); ++i)
      CHECK(std::abs(back.samples[i] - w.samples[i]) <= 1.0 / 32768.0);
    // read -> write -> read is exact
    write_wav(back, dir / "b.wav");
    CHECK(read_wav(dir / "b.wav") == back);
    CHECK(wav_comment(encode_wav(w, "config abc123")) == "config abc123");
    CHECK(wav_comment(encode_wav(w)).empty());
  }

  SUBCASE("stereo is rejected naming channels") {
    auto bytes = encode_wav(random_wave(1, 100));
    // fmt chunk: "RIFF" size "WAVE" "fmt " size fmt(2) channels(2)
    REQUIRE(std::memcmp(bytes.data() + 12, "fmt ", 4) == 0);
    bytes[22] = 2;
    try {
      decode_wav(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("channels") != std::string::npos);
    }
  }

  SUBCASE("non-PCM and malformed input") {
    auto bytes = encode_wav(random_wave(1, 100));
    auto nonpcm = bytes;
    nonpcm[20] = 3;
    CHECK_THROWS_AS(decode_wav(nonpcm), FormatError);
    auto bad = bytes;
    std::memcpy(bad.data(), "RIFX", 4);
    CHECK_THROWS_AS(decode_wav(bad), FormatError);
    CHECK_THROWS_AS(decode_wav(std::vector<char>(bytes.begin(), bytes.begin() + 30)), FormatError);
  }

  SUBCASE("8 kHz input is resampled to 16 kHz") {
    auto bytes = encode_wav(random_wave(1, 1000));
    // rewrite the header as 8 kHz: sample rate and byte rate
    const std::uint32_t rate = 8000, byte_rate = 16000;
    std::memcpy(bytes.data() + 24, &rate, 4);
    std::memcpy(bytes.data() + 28, &byte_rate, 4);
    const auto w = decode_wav(bytes);
    CHECK(w.sample_rate == kPipelineRate);
    CHECK(w.samples.size() >= 1999);
    CHECK(w.samples.size() <= 2001);
  }
}
