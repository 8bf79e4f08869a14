#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace raptor {

inline constexpr int kPipelineRate = 16000;

struct Waveform {
  int sample_rate = kPipelineRate;
  std::vector<double> samples;

  friend bool operator==(const Waveform&, const Waveform&) = default;
};

struct TtaConfig {
  std::size_t K = 3;
  double noise_snr_db = 15.0;
  double speed_factor = 1.05;
  std::uint64_t master_seed = 0;

  void validate() const;
};

// Exactly round(seconds * rate) samples: crop from the start, zero-pad at the end.
Waveform crop_pad(const Waveform& w, double seconds);
std::vector<double> crop_pad(const std::vector<double>& x, std::size_t length);

// Band-limited (Blackman-windowed sinc) resampling. Output length is
// floor(n * out_rate / in_rate).
std::vector<double> resample(const std::vector<double>& x, int in_rate, int out_rate);

// 8-bit sign-magnitude mu-law (mu = 255).
std::uint8_t mulaw_encode(double x) noexcept;
double mulaw_decode(std::uint8_t code) noexcept;

// 16 kHz -> 8 kHz -> mu-law -> 16 kHz, same length as the input.
Waveform voip_codec(const Waveform& w);

// White Gaussian noise at exactly snr_db relative to the signal's realized
// power. If the mixture peaks above 1 it is scaled down as a whole, which keeps
// the SNR.
Waveform add_noise(const Waveform& w, double snr_db, std::uint64_t seed);

// Linear-interpolation time-axis resample by 1/factor: floor(n / factor) samples.
std::vector<double> resample_linear(const std::vector<double>& x, double factor);

// Joint speed+pitch shift; output cropped/padded back to the input length.
Waveform speed_pitch(const Waveform& w, double factor);

// View k (1-based) cycles codec, noise, speed. Noise seeds are hashed from
// (master_seed, utt_id, k).
std::vector<Waveform> make_views(const Waveform& w, const TtaConfig& cfg, const std::string& utt_id);

// 16-bit PCM mono RIFF. Other sample rates are resampled to 16 kHz on read.
Waveform read_wav(const std::filesystem::path& path);
Waveform decode_wav(const std::vector<char>& bytes);

// Always emits 16 kHz. A non-empty comment is stored in a LIST/INFO ICMT chunk.
void write_wav(const Waveform& w, const std::filesystem::path& path, const std::string& comment = {});
std::vector<char> encode_wav(const Waveform& w, const std::string& comment = {});

// Comment stored by write_wav, or empty.
std::string wav_comment(const std::vector<char>& bytes);

}  // namespace raptor
