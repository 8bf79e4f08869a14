#include "raptor/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "raptor/errors.hpp"
#include "raptor/rng.hpp"

namespace raptor {

namespace {

constexpr double kMu = 255.0;
constexpr int kSincZeroCrossings = 16;

void require_pipeline_rate(const Waveform& w, const char* op) {
  if (w.sample_rate != kPipelineRate)
    throw InvalidArgument(std::string(op) + ": expected 16000 Hz input, got " +
                          std::to_string(w.sample_rate));
}

double blackman(double x) noexcept {
  // x in [-1, 1]
  const double a = std::numbers::pi * (x + 1.0);
  return 0.42 - 0.5 * std::cos(a) + 0.08 * std::cos(2.0 * a);
}

double sinc(double x) noexcept {
  if (x == 0.0) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

double clamp_unit(double x) noexcept { return std::clamp(x, -1.0, 1.0); }

}  // namespace

void TtaConfig::validate() const {
  if (K < 1) throw InvalidArgument("tta config: K must be >= 1");
  if (!(speed_factor >= 0.5 && speed_factor <= 2.0))
    throw InvalidArgument("tta config: speed factor " + std::to_string(speed_factor) +
                          " outside [0.5, 2.0]");
  if (!std::isfinite(noise_snr_db)) throw InvalidArgument("tta config: noise SNR must be finite");
}

std::vector<double> crop_pad(const std::vector<double>& x, std::size_t length) {
  std::vector<double> out(length, 0.0);
  std::copy_n(x.begin(), std::min(length, x.size()), out.begin());
  return out;
}

Waveform crop_pad(const Waveform& w, double seconds) {
  if (!(seconds >= 0.0)) throw InvalidArgument("crop_pad: negative duration");
  const auto n = static_cast<std::size_t>(std::llround(seconds * w.sample_rate));
  return {w.sample_rate, crop_pad(w.samples, n)};
}

std::vector<double> resample(const std::vector<double>& x, int in_rate, int out_rate) {
  if (in_rate <= 0 || out_rate <= 0) throw InvalidArgument("resample: rates must be positive");
  if (in_rate == out_rate) return x;
  const std::size_t n_out = static_cast<std::size_t>(
      static_cast<unsigned long long>(x.size()) * static_cast<unsigned long long>(out_rate) /
      static_cast<unsigned long long>(in_rate));
  const double step = static_cast<double>(in_rate) / out_rate;
  const double cutoff = std::min(1.0, static_cast<double>(out_rate) / in_rate);
  const double half_width = kSincZeroCrossings / cutoff;  // in input samples
  const auto n_in = static_cast<long long>(x.size());

  std::vector<double> y(n_out);
  for (std::size_t n = 0; n < n_out; ++n) {
    const double pos = static_cast<double>(n) * step;
    const long long lo = std::max<long long>(0, static_cast<long long>(std::ceil(pos - half_width)));
    const long long hi = std::min<long long>(n_in - 1, static_cast<long long>(std::floor(pos + half_width)));
    double acc = 0.0;
    for (long long k = lo; k <= hi; ++k) {
      const double tau = pos - static_cast<double>(k);
      acc += x[static_cast<std::size_t>(k)] * cutoff * sinc(cutoff * tau) * blackman(tau / half_width);
    }
    y[n] = acc;
  }
  return y;
}

std::uint8_t mulaw_encode(double x) noexcept {
  const double a = std::min(std::abs(x), 1.0);
  const double y = std::log1p(kMu * a) / std::log1p(kMu);
  const auto mag = static_cast<std::uint8_t>(std::lround(y * 127.0));
  return static_cast<std::uint8_t>((x < 0.0 ? 0x80 : 0x00) | mag);
}

double mulaw_decode(std::uint8_t code) noexcept {
  const double y = static_cast<double>(code & 0x7F) / 127.0;
  const double a = std::expm1(y * std::log1p(kMu)) / kMu;
  return (code & 0x80) ? -a : a;
}

Waveform voip_codec(const Waveform& w) {
  require_pipeline_rate(w, "voip_codec");
  auto narrow = resample(w.samples, kPipelineRate, 8000);
  for (double& s : narrow) s = mulaw_decode(mulaw_encode(s));
  auto wide = resample(narrow, 8000, kPipelineRate);
  wide = crop_pad(wide, w.samples.size());
  for (double& s : wide) s = clamp_unit(s);
  return {kPipelineRate, std::move(wide)};
}

Waveform add_noise(const Waveform& w, double snr_db, std::uint64_t seed) {
  const std::size_t n = w.samples.size();
  double p_sig = 0.0;
  for (double s : w.samples) p_sig += s * s;
  p_sig = n ? p_sig / static_cast<double>(n) : 0.0;
  if (!(p_sig > 0.0)) throw InvalidArgument("add_noise: input has zero signal power");

  Rng rng(hash_keys({seed, 0x6E6F697365ull}));
  std::vector<double> noise(n);
  double p_noise = 0.0;
  for (double& v : noise) {
    v = rng.normal();
    p_noise += v * v;
  }
  p_noise /= static_cast<double>(n);
  const double gain = std::sqrt(p_sig / (p_noise * std::pow(10.0, snr_db / 10.0)));

  Waveform out{w.sample_rate, std::vector<double>(n)};
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.samples[i] = w.samples[i] + gain * noise[i];
    peak = std::max(peak, std::abs(out.samples[i]));
  }
  if (peak > 1.0) {
    const double norm = 1.0 / peak;
    for (double& s : out.samples) s = clamp_unit(s * norm);
  }
  return out;
}

std::vector<double> resample_linear(const std::vector<double>& x, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0))
    throw InvalidArgument("speed_pitch: factor " + std::to_string(factor) + " outside [0.5, 2.0]");
  if (x.empty()) return {};
  const auto m = static_cast<std::size_t>(std::floor(static_cast<double>(x.size()) / factor));
  std::vector<double> y(m);
  const std::size_t last = x.size() - 1;
  for (std::size_t n = 0; n < m; ++n) {
    const double pos = static_cast<double>(n) * factor;
    const auto i = std::min(static_cast<std::size_t>(pos), last);
    const double frac = pos - static_cast<double>(i);
    const double next = x[std::min(i + 1, last)];
    y[n] = x[i] * (1.0 - frac) + next * frac;
  }
  return y;
}

Waveform speed_pitch(const Waveform& w, double factor) {
  auto y = crop_pad(resample_linear(w.samples, factor), w.samples.size());
  for (double& s : y) s = clamp_unit(s);
  return {w.sample_rate, std::move(y)};
}

std::vector<Waveform> make_views(const Waveform& w, const TtaConfig& cfg, const std::string& utt_id) {
  cfg.validate();
  std::vector<Waveform> views;
  views.reserve(cfg.K);
  for (std::size_t k = 1; k <= cfg.K; ++k) {
    switch ((k - 1) % 3) {
      case 0:
        views.push_back(voip_codec(w));
        break;
      case 1:
        views.push_back(add_noise(w, cfg.noise_snr_db, hash_keys({cfg.master_seed, fnv1a64(utt_id), k})));
        break;
      default:
        views.push_back(speed_pitch(w, cfg.speed_factor));
        break;
    }
  }
  return views;
}

// ---- WAV ----------------------------------------------------------------

namespace {

template <typename T>
void put(std::vector<char>& b, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  b.insert(b.end(), p, p + sizeof(T));
}

void put_tag(std::vector<char>& b, const char* tag) { b.insert(b.end(), tag, tag + 4); }

template <typename T>
T get(const std::vector<char>& b, std::size_t off) {
  T v;
  std::memcpy(&v, b.data() + off, sizeof(T));
  return v;
}

struct Chunk {
  std::string id;
  std::size_t offset;  // start of payload
  std::uint32_t size;
};

std::vector<Chunk> list_chunks(const std::vector<char>& b) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0)
    throw FormatError("malformed RIFF: missing RIFF header", 0);
  if (std::memcmp(b.data() + 8, "WAVE", 4) != 0)
    throw FormatError("malformed RIFF: form type is not WAVE", 8);
  std::vector<Chunk> chunks;
  std::size_t off = 12;
  while (off + 8 <= b.size()) {
    Chunk c{std::string(b.data() + off, 4), off + 8, get<std::uint32_t>(b, off + 4)};
    if (c.size > b.size() - c.offset)
      throw FormatError("malformed RIFF: chunk '" + c.id + "' runs past end of file", off);
    chunks.push_back(c);
    off = c.offset + c.size + (c.size & 1u);
  }
  return chunks;
}

}  // namespace

std::vector<char> encode_wav(const Waveform& w, const std::string& comment) {
  const std::vector<double> pcm =
      w.sample_rate == kPipelineRate ? w.samples : resample(w.samples, w.sample_rate, kPipelineRate);

  std::vector<char> list;
  if (!comment.empty()) {
    std::string text = comment;
    text.push_back('\0');
    if (text.size() & 1u) text.push_back('\0');
    put_tag(list, "INFO");
    put_tag(list, "ICMT");
    put(list, static_cast<std::uint32_t>(text.size()));
    list.insert(list.end(), text.begin(), text.end());
  }

  const auto data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
  std::vector<char> b;
  put_tag(b, "RIFF");
  put(b, static_cast<std::uint32_t>(4 + (8 + 16) + (list.empty() ? 0 : 8 + list.size()) + 8 + data_bytes));
  put_tag(b, "WAVE");
  put_tag(b, "fmt ");
  put(b, std::uint32_t{16});
  put(b, std::uint16_t{1});  // PCM
  put(b, std::uint16_t{1});  // mono
  put(b, std::uint32_t{kPipelineRate});
  put(b, std::uint32_t{kPipelineRate * 2});
  put(b, std::uint16_t{2});
  put(b, std::uint16_t{16});
  if (!list.empty()) {
    put_tag(b, "LIST");
    put(b, static_cast<std::uint32_t>(list.size()));
    b.insert(b.end(), list.begin(), list.end());
  }
  put_tag(b, "data");
  put(b, data_bytes);
  for (double s : pcm) {
    const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32768.0);
    put(b, static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L)));
  }
  return b;
}

Waveform decode_wav(const std::vector<char>& b) {
  const auto chunks = list_chunks(b);
  const Chunk* fmt = nullptr;
  const Chunk* data = nullptr;
  for (const auto& c : chunks) {
    if (c.id == "fmt " && !fmt) fmt = &c;
    if (c.id == "data" && !data) data = &c;
  }
  if (!fmt) throw FormatError("malformed RIFF: missing chunk 'fmt '", 12);
  if (fmt->size < 16) throw FormatError("chunk 'fmt ': too short", fmt->offset);
  const auto format = get<std::uint16_t>(b, fmt->offset);
  const auto channels = get<std::uint16_t>(b, fmt->offset + 2);
  const auto rate = get<std::uint32_t>(b, fmt->offset + 4);
  const auto bits = get<std::uint16_t>(b, fmt->offset + 14);
  if (format != 1)
    throw FormatError("chunk 'fmt ': format " + std::to_string(format) + " is not PCM", fmt->offset);
  if (channels != 1)
    throw FormatError("chunk 'fmt ': channels = " + std::to_string(channels) + ", expected mono",
                      fmt->offset + 2);
  if (bits != 16)
    throw FormatError("chunk 'fmt ': bits per sample = " + std::to_string(bits) + ", expected 16",
                      fmt->offset + 14);
  if (rate == 0) throw FormatError("chunk 'fmt ': zero sample rate", fmt->offset + 4);
  if (!data) throw FormatError("malformed RIFF: missing chunk 'data'", 12);

  std::vector<double> samples(data->size / 2);
  for (std::size_t i = 0; i < samples.size(); ++i)
    samples[i] = get<std::int16_t>(b, data->offset + 2 * i) / 32768.0;
  if (static_cast<int>(rate) != kPipelineRate)
    samples = resample(samples, static_cast<int>(rate), kPipelineRate);
  return {kPipelineRate, std::move(samples)};
}

std::string wav_comment(const std::vector<char>& b) {
  for (const auto& c : list_chunks(b)) {
    if (c.id != "LIST" || c.size < 4 || std::memcmp(b.data() + c.offset, "INFO", 4) != 0) continue;
    std::size_t off = c.offset + 4;
    const std::size_t end = c.offset + c.size;
    while (off + 8 <= end) {
      const std::string id(b.data() + off, 4);
      const auto size = get<std::uint32_t>(b, off + 4);
      if (size > end - off - 8) break;
      if (id == "ICMT") {
        std::string s(b.data() + off + 8, size);
        return s.substr(0, s.find('\0'));
      }
      off += 8 + size + (size & 1u);
    }
  }
  return {};
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_wav(const Waveform& w, const std::filesystem::path& path, const std::string& comment) {
  const auto bytes = encode_wav(w, comment);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("write failed: " + path.string());
}

}  // namespace raptor
