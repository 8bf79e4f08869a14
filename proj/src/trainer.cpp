#include "raptor/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <iterator>
#include <thread>
#include <unordered_map>

#include "raptor/rng.hpp"

namespace raptor {

namespace {

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = kDigits[v & 0xF];
  return s;
}

}  // namespace

// ---- config ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw InvalidArgument("train config: lambda must be >= 0");
  if (!(learning_rate > 0.0)) throw InvalidArgument("train config: learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("train config: weight decay must be >= 0");
  if (batch_size == 0) throw InvalidArgument("train config: batch size must be > 0");
  if (max_iterations == 0 && epochs == 0)
    throw InvalidArgument("train config: need max_iterations or epochs > 0");
  if (checkpoint_every == 0) throw InvalidArgument("train config: checkpoint_every must be > 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lambda", lambda},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"max_iterations", max_iterations},
          {"epochs", epochs},
          {"seed", seed},
          {"class_weights", class_weights == ClassWeightMode::Balanced ? "balanced" : "uniform"},
          {"checkpoint_every", checkpoint_every},
          {"data", data_fingerprint}};
}

std::string TrainConfig::fingerprint() const { return hex64(fnv1a64(to_json().dump())); }

// ---- sources --------------------------------------------------------------

ManifestSource::ManifestSource(const std::vector<ManifestEntry>& entries) {
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::vector<std::pair<std::uint32_t, std::string>>> augs;
  bool first = true;
  bool shared = true;
  for (const auto& e : entries) {
    if (first) {
      fingerprint_ = e.fingerprint;
      first = false;
    } else if (e.fingerprint != fingerprint_) {
      shared = false;
    }
    auto [it, inserted] = index.try_emplace(e.utt, utts_.size());
    if (inserted) {
      utts_.push_back({e.utt, e.label, {}, {}});
      augs.emplace_back();
    }
    Utt& u = utts_[it->second];
    if (e.label != u.label)
      throw InvalidArgument("manifest: conflicting labels for utterance " + e.utt);
    if (e.view == 0) {
      if (!u.clean.empty()) throw InvalidArgument("manifest: duplicate clean view for " + e.utt);
      u.clean = e.path;
    } else {
      augs[it->second].emplace_back(e.view, e.path);
    }
  }
  if (!shared) fingerprint_.clear();
  for (std::size_t i = 0; i < utts_.size(); ++i) {
    if (utts_[i].clean.empty())
      throw InvalidArgument("manifest: utterance " + utts_[i].utt + " has no clean view");
    std::sort(augs[i].begin(), augs[i].end());
    for (auto& [view, path] : augs[i]) utts_[i].augmented.push_back(std::move(path));
  }
}

ManifestSource ManifestSource::from_file(const std::filesystem::path& path) {
  return ManifestSource(read_manifest(path));
}

LayerStack ManifestSource::load(std::size_t i, std::size_t view) const {
  const Utt& u = utts_.at(i);
  if (view > u.augmented.size())
    throw InvalidArgument("utterance " + u.utt + " has no augmented view " + std::to_string(view));
  return read_features(view == 0 ? u.clean : u.augmented[view - 1]);
}

SynthSource::SynthSource(SynthSpec spec, std::uint64_t first, std::size_t count, std::size_t views)
    : spec_(std::move(spec)), first_(first), count_(count), views_(views) {
  spec_.validate();
  ids_.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ids_.push_back("synth_" + std::to_string(first + i));
}

Label SynthSource::label(std::size_t i) const {
  return (first_ + i) % 2 == 0 ? Label::BonaFide : Label::Spoof;
}

LayerStack SynthSource::load(std::size_t i, std::size_t view) const {
  return synth_view(spec_, first_ + i, label(i), static_cast<std::uint32_t>(view));
}

// ---- training -------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::min(std::max<std::size_t>(workers, 1), n);
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(w);
    for (std::size_t k = 0; k < w; ++k) {
      pool.emplace_back([&, k] {
        for (std::size_t i = k; i < n; i += w) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

ClassWeights class_weights_for(const ExampleSource& data, ClassWeightMode mode) {
  if (mode == ClassWeightMode::Uniform) return {};
  double n0 = 0, n1 = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Label y = data.label(i);
    if (y == Label::BonaFide)
      ++n0;
    else if (y == Label::Spoof)
      ++n1;
    else
      throw InvalidArgument("training data contains unlabeled utterance " + data.utt_id(i));
  }
  if (n0 == 0 || n1 == 0) throw InvalidArgument("training data needs both classes for class weights");
  const double n = n0 + n1;
  return {n / (2.0 * n0), n / (2.0 * n1)};
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(hash_keys({seed, 0x73687566ull, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return perm;
}

std::pair<LossBreakdown, std::vector<double>> batch_loss_and_grad(
    const ExampleSource& data, std::span<const std::size_t> batch,
    std::span<const std::size_t> aug_views, const ModelParams& params, double lambda,
    const ClassWeights& weights, std::size_t workers) {
  if (batch.size() != aug_views.size() || batch.empty())
    throw InvalidArgument("batch_loss_and_grad: batch and view lists must be non-empty and equal length");
  std::vector<std::pair<LossBreakdown, std::vector<double>>> parts(batch.size());
  parallel_for(batch.size(), workers, [&](std::size_t j) {
    const std::size_t i = batch[j];
    const LayerStack clean = data.load(i, 0);
    const LayerStack aug = data.load(i, aug_views[j]);
    try {
      parts[j] = loss_and_grad(clean, aug, data.label(i), params, lambda, weights);
    } catch (const NumericFault& e) {
      throw NumericFault("utterance " + data.utt_id(i) + ": " + e.what());
    }
  });

  LossBreakdown mean;
  mean.lambda = lambda;
  std::vector<double> grad(params.values.size(), 0.0);
  for (const auto& [lb, g] : parts) {
    mean.total += lb.total;
    mean.cls += lb.cls;
    mean.cons += lb.cons;
    for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  mean.total *= inv;
  mean.cls *= inv;
  mean.cons *= inv;
  for (double& g : grad) g *= inv;
  if (!std::isfinite(mean.total)) {
    std::string ids;
    for (std::size_t i : batch) ids += (ids.empty() ? "" : ",") + data.utt_id(i);
    throw NumericFault("non-finite batch loss over utterances " + ids);
  }
  return {mean, std::move(grad)};
}

double clean_eer(const ModelParams& params, const ExampleSource& data, std::size_t workers) {
  std::vector<ScoreRecord> recs(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    const FusionTrace tr = forward(data.load(i, 0), params);
    recs[i].utt_id = data.utt_id(i);
    recs[i].label = data.label(i);
    recs[i].score = tr.posterior;
  });
  return compute_eer(recs).eer;
}

TrainResult train(const TrainConfig& cfg, const ExampleSource& train_data,
                  const ExampleSource& dev_data, const Checkpoint* resume,
                  const Checkpoint* resume_best, const LogSink& sink) {
  cfg.validate();
  const std::size_t n = train_data.size();
  if (n == 0) throw InvalidArgument("train: empty training set");
  if (dev_data.size() == 0) throw InvalidArgument("train: empty development set");
  const ClassWeights weights = class_weights_for(train_data, cfg.class_weights);
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::uint64_t total = cfg.epochs > 0 ? cfg.epochs * batches_per_epoch : cfg.max_iterations;

  Checkpoint state;
  if (resume) {
    state = *resume;
  } else {
    const LayerStack probe = train_data.load(0, 0);
    state.params = init_params(build_topology(probe.L, probe.D), cfg.seed);
    state.adam = AdamState::for_params(state.params.values.size(), cfg.learning_rate, cfg.weight_decay);
    state.cursor.rng_state = hash_keys({cfg.seed, 0x76696577ull});
  }
  state.fingerprint = cfg.fingerprint();

  TrainResult result;
  bool have_best = false;
  if (resume_best) {
    result.best = *resume_best;
    have_best = true;
  }

  std::vector<std::size_t> perm = epoch_permutation(n, cfg.seed, state.cursor.epoch);
  LossBreakdown window;
  std::size_t window_n = 0;

  while (state.iteration < total) {
    std::vector<std::size_t> batch;
    std::vector<std::size_t> views;
    while (batch.size() < cfg.batch_size) {
      const std::size_t i = perm[state.cursor.position];
      batch.push_back(i);
      ++state.cursor.position;
      if (state.cursor.position == n) {
        ++state.cursor.epoch;
        state.cursor.position = 0;
        perm = epoch_permutation(n, cfg.seed, state.cursor.epoch);
        break;  // batches do not straddle epochs
      }
    }
    Rng view_rng(state.cursor.rng_state);
    for (std::size_t i : batch) {
      const std::size_t k = train_data.num_augmented(i);
      if (k == 0) throw InvalidArgument("train: utterance " + train_data.utt_id(i) + " has no augmented view");
      views.push_back(1 + view_rng.below(k));
    }
    state.cursor.rng_state = view_rng.state();

    std::pair<LossBreakdown, std::vector<double>> lg;
    try {
      lg = batch_loss_and_grad(train_data, batch, views, state.params, cfg.lambda, weights, cfg.workers);
    } catch (const NumericFault& e) {
      throw NumericFault("train: iteration " + std::to_string(state.iteration) + ": " + e.what());
    }
    result.history.push_back(lg.first);
    window.cls += lg.first.cls;
    window.cons += lg.first.cons;
    window.total += lg.first.total;
    ++window_n;

    adam_step(state.params.values, lg.second, state.adam);
    ++state.iteration;
    state.dev_eer = std::numeric_limits<double>::quiet_NaN();

    if (state.iteration % cfg.checkpoint_every == 0 || state.iteration == total) {
      state.dev_eer = clean_eer(state.params, dev_data, cfg.workers);
      if (!have_best || state.dev_eer < result.best.dev_eer) {
        result.best = state;
        have_best = true;
      }
      const double inv = 1.0 / static_cast<double>(window_n);
      LogEntry entry{state.iteration, window.cls * inv, window.cons * inv, window.total * inv,
                     state.dev_eer};
      result.log.push_back(entry);
      if (sink) sink(entry);
      window = {};
      window_n = 0;
    }
  }
  if (!have_best) {
    result.best = state;
    if (std::isnan(result.best.dev_eer)) result.best.dev_eer = clean_eer(state.params, dev_data, cfg.workers);
  }
  result.last = std::move(state);
  return result;
}

std::vector<ScoreRecord> evaluate(const Checkpoint& ckpt, const std::vector<ManifestEntry>& manifest,
                                  std::size_t workers) {
  std::vector<ScoreRecord> out(manifest.size());
  parallel_for(manifest.size(), workers, [&](std::size_t i) {
    const ManifestEntry& e = manifest[i];
    FusionTrace tr;
    try {
      tr = forward(read_features(e.path), ckpt.params);
    } catch (const InvalidArgument& ex) {
      throw InvalidArgument("evaluate: utterance " + e.utt + ": " + ex.what());
    }
    out[i] = {e.utt, e.dataset, e.label, e.view, tr.posterior, ckpt.fingerprint};
  });
  return out;
}

// ---- checkpoint I/O -------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'R', 'C', 'K', 'P'};

class Block {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_doubles(const std::vector<double>& v) {
    put(static_cast<std::uint64_t>(v.size()));
    for (double x : v) put(x);
  }
  std::vector<char> bytes;
};

void append_block(std::vector<char>& out, const char* tag, const Block& b) {
  out.insert(out.end(), tag, tag + 4);
  const auto len = static_cast<std::uint64_t>(b.bytes.size());
  const auto* p = reinterpret_cast<const char*>(&len);
  out.insert(out.end(), p, p + sizeof len);
  out.insert(out.end(), b.bytes.begin(), b.bytes.end());
}

class Reader {
 public:
  Reader(const std::vector<char>& b, std::size_t begin, std::size_t end, std::string block)
      : b_(b), pos_(begin), end_(end), block_(std::move(block)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<double> get_doubles() {
    const auto n = get<std::uint64_t>();
    if (n > (end_ - pos_) / sizeof(double)) fail("array length exceeds block");
    std::vector<double> v(n);
    for (auto& x : v) x = get<double>();
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void done() const {
    if (pos_ != end_) fail("trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) fail("truncated");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: corrupt payload in block " + block_ + " (" + what + ") at byte offset " +
                          std::to_string(pos_),
                      pos_);
  }
  const std::vector<char>& b_;
  std::size_t pos_;
  std::size_t end_;
  std::string block_;
};

}  // namespace

std::vector<char> encode_checkpoint(const Checkpoint& c) {
  std::vector<char> out(kCkptMagic, kCkptMagic + 4);
  const std::uint16_t version = kCheckpointVersion;
  out.insert(out.end(), reinterpret_cast<const char*>(&version),
             reinterpret_cast<const char*>(&version) + 2);

  Block topo;
  topo.put(static_cast<std::uint32_t>(c.params.topology.L));
  topo.put(static_cast<std::uint32_t>(c.params.topology.D));
  append_block(out, "TOPO", topo);

  Block parm;
  parm.put_doubles(c.params.values);
  append_block(out, "PARM", parm);

  Block adam;
  adam.put(static_cast<std::uint64_t>(c.adam.step));
  adam.put(c.adam.learning_rate);
  adam.put(c.adam.beta1);
  adam.put(c.adam.beta2);
  adam.put(c.adam.epsilon);
  adam.put(c.adam.weight_decay);
  adam.put_doubles(c.adam.m);
  adam.put_doubles(c.adam.v);
  append_block(out, "ADAM", adam);

  Block rng;
  rng.put(c.cursor.rng_state);
  rng.put(c.cursor.epoch);
  rng.put(c.cursor.position);
  append_block(out, "RNGS", rng);

  Block meta;
  meta.put(c.iteration);
  meta.put(c.dev_eer);
  meta.put(static_cast<std::uint32_t>(c.fingerprint.size()));
  meta.bytes.insert(meta.bytes.end(), c.fingerprint.begin(), c.fingerprint.end());
  append_block(out, "META", meta);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<char>& b) {
  if (b.size() < 6 || std::memcmp(b.data(), kCkptMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic at byte offset 0", 0);
  std::uint16_t version;
  std::memcpy(&version, b.data() + 4, 2);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      4);

  Checkpoint c;
  bool seen[5] = {};
  std::size_t off = 6;
  while (off < b.size()) {
    if (b.size() - off < 12) throw FormatError("checkpoint: corrupt payload (truncated block header)", off);
    const std::string tag(b.data() + off, 4);
    std::uint64_t len;
    std::memcpy(&len, b.data() + off + 4, 8);
    const std::size_t begin = off + 12;
    if (len > b.size() - begin)
      throw FormatError("checkpoint: corrupt payload (block " + tag + " runs past end)", off);
    const std::size_t end = begin + static_cast<std::size_t>(len);
    Reader r(b, begin, end, tag);
    if (tag == "TOPO") {
      const auto L = r.get<std::uint32_t>();
      const auto D = r.get<std::uint32_t>();
      try {
        c.params.topology = build_topology(L, D);
      } catch (const InvalidArgument& e) {
        throw FormatError(std::string("checkpoint: corrupt payload in block TOPO: ") + e.what(), begin);
      }
      seen[0] = true;
    } else if (tag == "PARM") {
      c.params.values = r.get_doubles();
      seen[1] = true;
    } else if (tag == "ADAM") {
      c.adam.step = r.get<std::uint64_t>();
      c.adam.learning_rate = r.get<double>();
      c.adam.beta1 = r.get<double>();
      c.adam.beta2 = r.get<double>();
      c.adam.epsilon = r.get<double>();
      c.adam.weight_decay = r.get<double>();
      c.adam.m = r.get_doubles();
      c.adam.v = r.get_doubles();
      seen[2] = true;
    } else if (tag == "RNGS") {
      c.cursor.rng_state = r.get<std::uint64_t>();
      c.cursor.epoch = r.get<std::uint64_t>();
      c.cursor.position = r.get<std::uint64_t>();
      seen[3] = true;
    } else if (tag == "META") {
      c.iteration = r.get<std::uint64_t>();
      c.dev_eer = r.get<double>();
      c.fingerprint = r.get_string();
      seen[4] = true;
    } else {
      throw FormatError("checkpoint: corrupt payload (unknown block '" + tag + "')", off);
    }
    r.done();
    off = end;
  }
  for (bool s : seen)
    if (!s) throw FormatError("checkpoint: corrupt payload (missing block)", b.size());
  const std::size_t expected = ParamLayout(c.params.topology).total();
  if (c.params.values.size() != expected || c.adam.m.size() != expected || c.adam.v.size() != expected)
    throw FormatError("checkpoint: corrupt payload (parameter count does not match topology)", 6);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidArgument("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace raptor
