#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raptor/datagen.hpp"
#include "raptor/metrics.hpp"
#include "raptor/model.hpp"

namespace raptor {

enum class ClassWeightMode { Balanced, Uniform };

struct TrainConfig {
  double lambda = 0.25;
  double learning_rate = 1e-6;
  double weight_decay = 1e-4;
  std::size_t batch_size = 24;
  std::size_t max_iterations = 1000;
  std::size_t epochs = 0;  // when > 0, overrides max_iterations
  std::uint64_t seed = 0;
  ClassWeightMode class_weights = ClassWeightMode::Balanced;
  std::size_t checkpoint_every = 50;
  std::size_t workers = 1;
  std::string data_fingerprint;  // lineage of the training data, folded into the fingerprint

  void validate() const;
  nlohmann::json to_json() const;
  // Stable hash of the resolved config (workers excluded: it cannot change results).
  std::string fingerprint() const;
};

// Utterance-level access to paired views. Views are loaded on demand so
// corpora larger than memory can be streamed.
class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual const std::string& utt_id(std::size_t i) const = 0;
  virtual Label label(std::size_t i) const = 0;
  virtual std::size_t num_augmented(std::size_t i) const = 0;
  // view 0 = clean, k >= 1 = k-th augmented view.
  virtual LayerStack load(std::size_t i, std::size_t view) const = 0;
};

// Backed by a manifest of RSF1 feature files.
class ManifestSource : public ExampleSource {
 public:
  explicit ManifestSource(const std::vector<ManifestEntry>& entries);
  static ManifestSource from_file(const std::filesystem::path& path);

  std::size_t size() const override { return utts_.size(); }
  const std::string& utt_id(std::size_t i) const override { return utts_[i].utt; }
  Label label(std::size_t i) const override { return utts_[i].label; }
  std::size_t num_augmented(std::size_t i) const override { return utts_[i].augmented.size(); }
  LayerStack load(std::size_t i, std::size_t view) const override;

  // Fingerprint shared by all entries, or empty.
  const std::string& fingerprint() const { return fingerprint_; }

 private:
  struct Utt {
    std::string utt;
    Label label = Label::Unlabeled;
    std::string clean;
    std::vector<std::string> augmented;
  };
  std::vector<Utt> utts_;
  std::string fingerprint_;
};

// Generated on the fly from a SynthSpec: utterance indices [first, first+count),
// labels alternating bona fide / spoof, `views` augmented views each.
class SynthSource : public ExampleSource {
 public:
  SynthSource(SynthSpec spec, std::uint64_t first, std::size_t count, std::size_t views = 1);

  std::size_t size() const override { return count_; }
  const std::string& utt_id(std::size_t i) const override { return ids_[i]; }
  Label label(std::size_t i) const override;
  std::size_t num_augmented(std::size_t) const override { return views_; }
  LayerStack load(std::size_t i, std::size_t view) const override;

 private:
  SynthSpec spec_;
  std::uint64_t first_;
  std::size_t count_;
  std::size_t views_;
  std::vector<std::string> ids_;
};

struct TrainCursor {
  std::uint64_t rng_state = 0;  // augmented-view selection stream
  std::uint64_t epoch = 0;
  std::uint64_t position = 0;   // next index into the epoch permutation

  friend bool operator==(const TrainCursor&, const TrainCursor&) = default;
};

struct Checkpoint {
  ModelParams params;
  AdamState adam;
  std::uint64_t iteration = 0;
  TrainCursor cursor;
  std::string fingerprint;
  double dev_eer = std::numeric_limits<double>::quiet_NaN();

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

struct LogEntry {
  std::uint64_t iteration = 0;
  double cls = 0.0;    // means over the iterations since the previous entry
  double cons = 0.0;
  double total = 0.0;
  double dev_eer = 0.0;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<LogEntry> log;
  std::vector<LossBreakdown> history;  // per iteration, batch means
};

ClassWeights class_weights_for(const ExampleSource& data, ClassWeightMode mode);

// Mean loss and gradient over a batch, reduced in batch order.
std::pair<LossBreakdown, std::vector<double>> batch_loss_and_grad(
    const ExampleSource& data, std::span<const std::size_t> batch,
    std::span<const std::size_t> aug_views, const ModelParams& params, double lambda,
    const ClassWeights& weights, std::size_t workers);

// Seeded Fisher-Yates permutation for one epoch.
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

using LogSink = std::function<void(const LogEntry&)>;

// If resume is given, training continues from its state (and resume_best, if
// given, seeds the running best).
TrainResult train(const TrainConfig& cfg, const ExampleSource& train_data,
                  const ExampleSource& dev_data, const Checkpoint* resume = nullptr,
                  const Checkpoint* resume_best = nullptr, const LogSink& sink = {});

// Scores one record per (utterance, view) in manifest order.
std::vector<ScoreRecord> evaluate(const Checkpoint& ckpt, const std::vector<ManifestEntry>& manifest,
                                  std::size_t workers = 1);

// Clean-view EER of the given parameters over a source.
double clean_eer(const ModelParams& params, const ExampleSource& data, std::size_t workers = 1);

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace raptor
