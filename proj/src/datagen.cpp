#include "raptor/datagen.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "raptor/rng.hpp"

namespace raptor {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'F', '1'};
constexpr std::uint64_t kBaseTag = 0x62617365ull;
constexpr std::uint64_t kJitterTag = 0x6A697474ull;
constexpr std::uint64_t kPatternTag = 0x70617474ull;

static_assert(std::endian::native == std::endian::little, "feature I/O assumes little-endian host");

bool is_artifact_layer(const SynthSpec& spec, std::size_t layer0) {
  for (std::size_t l : spec.artifact_layers)
    if (l == layer0 + 1) return true;
  return false;
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  std::vector<char> take() { return std::move(buf_); }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : buf_(b) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(const char* field) {
    const auto n = get<std::uint32_t>(field);
    need(n, field);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::uint64_t n, const char* field) const {
    if (n > buf_.size() - pos_)
      throw FormatError("feature file truncated in " + std::string(field) + " at byte offset " +
                            std::to_string(pos_) + ": need " + std::to_string(n) +
                            " bytes, have " + std::to_string(buf_.size() - pos_),
                        pos_);
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  const char* cursor() const { return buf_.data() + pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void SynthSpec::validate() const {
  if (L < 2 || T < 1 || D < 1) throw InvalidArgument("synth spec: dims must be L>=2, T>=1, D>=1");
  for (std::size_t l : artifact_layers) {
    if (l < 1 || l > L)
      throw InvalidArgument("synth spec: artifact layer " + std::to_string(l) + " outside [1, " +
                            std::to_string(L) + "]");
  }
  if (!(artifact_gain >= 0.0) || !(class_separation >= 0.0) || !(jitter_scale >= 0.0))
    throw InvalidArgument("synth spec: gains and scales must be >= 0");
}

LayerStack synth_view(const SynthSpec& spec, std::uint64_t utt_index, Label label,
                      std::uint32_t view) {
  spec.validate();
  LayerStack s(spec.L, spec.T, spec.D);
  s.utt_id = "synth_" + std::to_string(utt_index);
  s.dataset_id = "synth";
  s.label = label;
  s.view_id = view;

  const double amp = spec.artifact_gain * spec.class_separation;
  for (std::size_t l = 0; l < spec.L; ++l) {
    Rng base(hash_keys({spec.seed, kBaseTag, utt_index, l}));
    Rng jitter(hash_keys({spec.seed, kJitterTag, utt_index, view, l}));
    Rng pattern_rng(hash_keys({spec.seed, kPatternTag, l}));
    std::vector<double> pattern(spec.D);
    for (double& x : pattern) x = pattern_rng.normal();
    const bool plant = label == Label::Spoof && amp > 0.0 && is_artifact_layer(spec, l);

    for (std::size_t t = 0; t < spec.T; ++t) {
      auto f = s.frame(l, t);
      for (std::size_t d = 0; d < spec.D; ++d) {
        double x = base.normal();
        if (plant) x += amp * pattern[d];
        if (view > 0 && spec.jitter_scale > 0.0) x += spec.jitter_scale * jitter.normal();
        // Stored values are f32-representable so files round-trip exactly.
        f[d] = static_cast<double>(static_cast<float>(x));
      }
    }
  }
  return s;
}

std::pair<LayerStack, LayerStack> synth_utterance(const SynthSpec& spec, std::uint64_t utt_index,
                                                  Label label) {
  return {synth_view(spec, utt_index, label, 0), synth_view(spec, utt_index, label, 1)};
}

std::vector<char> encode_features(const LayerStack& stack) {
  stack.validate();
  constexpr auto kMax = std::numeric_limits<std::uint32_t>::max();
  if (stack.L > kMax || stack.T > kMax || stack.D > kMax)
    throw InvalidArgument("write_features: dimension exceeds u32");
  ByteWriter w;
  for (char c : kMagic) w.put(c);
  w.put(static_cast<std::uint32_t>(stack.L));
  w.put(static_cast<std::uint32_t>(stack.T));
  w.put(static_cast<std::uint32_t>(stack.D));
  w.put(static_cast<std::uint8_t>(stack.label));
  w.put(static_cast<std::uint8_t>(stack.view_id));
  w.put(std::uint16_t{0});
  w.put_string(stack.utt_id);
  w.put_string(stack.dataset_id);
  for (double x : stack.features) w.put(static_cast<float>(x));
  return w.take();
}

LayerStack decode_features(const std::vector<char>& bytes) {
  ByteReader r(bytes);
  r.need(4, "magic");
  if (std::memcmp(r.cursor(), kMagic, 4) != 0) throw FormatError("bad magic at byte offset 0", 0);
  r.get<std::uint32_t>("magic");
  LayerStack s;
  s.L = r.get<std::uint32_t>("L");
  s.T = r.get<std::uint32_t>("T");
  s.D = r.get<std::uint32_t>("D");
  const std::size_t label_off = r.pos();
  const auto label = r.get<std::uint8_t>("label");
  if (label != 0 && label != 1 && label != 255)
    throw FormatError("invalid label byte " + std::to_string(label) + " at byte offset " +
                          std::to_string(label_off),
                      label_off);
  s.label = static_cast<Label>(label);
  s.view_id = r.get<std::uint8_t>("view");
  r.get<std::uint16_t>("reserved");
  s.utt_id = r.get_string("utt_id");
  s.dataset_id = r.get_string("dataset_id");

  const std::size_t payload_off = r.pos();
  // u32^3 floats can exceed 64 bits of bytes.
  const unsigned __int128 expected =
      static_cast<unsigned __int128>(s.L) * s.T * s.D * sizeof(float);
  if (expected != r.remaining()) {
    const std::string want = expected > std::numeric_limits<std::uint64_t>::max()
                                 ? std::string("more than 2^64")
                                 : std::to_string(static_cast<std::uint64_t>(expected));
    throw FormatError("payload size mismatch at byte offset " + std::to_string(payload_off) +
                          ": header declares " + want + " bytes, file has " +
                          std::to_string(r.remaining()),
                      payload_off);
  }
  s.features.resize(s.L * s.T * s.D);
  for (auto& x : s.features) x = static_cast<double>(r.get<float>("payload"));
  s.validate();
  return s;
}

void write_features(const LayerStack& stack, const std::filesystem::path& path) {
  const auto bytes = encode_features(stack);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("write failed: " + path.string());
}

LayerStack read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open feature file " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_features(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["path"] = e.path;
    j["utt"] = e.utt;
    j["dataset"] = e.dataset;
    if (e.label == Label::Unlabeled)
      j["label"] = nullptr;
    else
      j["label"] = static_cast<int>(e.label);
    j["view"] = e.view;
    if (!e.fingerprint.empty()) j["config"] = e.fingerprint;
    out << j.dump() << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open manifest " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      std::filesystem::path p = j.at("path").get<std::string>();
      e.path = (p.is_relative() ? base / p : p).string();
      e.utt = j.at("utt").get<std::string>();
      e.dataset = j.at("dataset").get<std::string>();
      const auto& lab = j.at("label");
      if (lab.is_null()) {
        e.label = Label::Unlabeled;
      } else {
        const int v = lab.get<int>();
        if (v != 0 && v != 1) throw InvalidArgument("label must be 0 or 1");
        e.label = static_cast<Label>(v);
      }
      e.view = j.at("view").get<std::uint32_t>();
      if (j.contains("config")) e.fingerprint = j["config"].get<std::string>();
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

}  // namespace raptor
