#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "raptor/model.hpp"

namespace raptor {

struct ScoreRecord {
  std::string utt_id;
  std::string dataset_id;
  Label label = Label::BonaFide;
  std::uint32_t view_id = 0;
  double score = 0.5;        // spoof posterior
  std::string fingerprint;   // config lineage of the producing model; may be empty

  friend bool operator==(const ScoreRecord&, const ScoreRecord&) = default;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Spoof is the positive class: decide spoof iff score >= threshold. The EER
// is read off the ROC at the FPR = FNR crossing, linearly interpolated between
// adjacent operating points; tied scores form a single operating point.
EerResult compute_eer(std::span<const ScoreRecord> records);
EerResult compute_eer(std::span<const double> spoof_scores, std::span<const double> bona_scores);

// One global threshold over the concatenation of all datasets.
double pooled_eer(const std::map<std::string, std::vector<ScoreRecord>>& by_dataset);

// Unweighted mean of per-dataset EERs.
double average_eer(std::span<const double> eers);

std::map<std::string, std::vector<ScoreRecord>> group_by_dataset(std::span<const ScoreRecord> records);

struct TtaResult {
  std::string utt_id;
  std::string dataset_id;
  Label label = Label::BonaFide;
  double mean_posterior = 0.5;
  double u_ale = 0.0;  // nats
  std::vector<double> per_view;
};

TtaResult tta_aggregate(std::span<const ScoreRecord> views);

// Groups per-view records by utterance (first-appearance order) and aggregates each.
std::vector<TtaResult> tta_aggregate_all(std::span<const ScoreRecord> records);

// Percentage points, ensemble minus clean.
double delta_eer(double ensemble_eer, double clean_eer) noexcept;

struct TtaSummary {
  std::map<std::string, double> clean_eer;   // on the utterances covered by TTA
  std::map<std::string, double> tta_eer;     // EER of the mean posterior
  std::map<std::string, double> delta_eer;   // points
  std::map<std::string, double> mean_u_ale;
};

struct EvalReport {
  std::map<std::string, double> per_dataset_eer;
  double avg_eer = 0.0;
  double pooled_eer = 0.0;
  std::optional<TtaSummary> tta;
  std::size_t clean_records = 0;
  std::size_t tta_records = 0;
  nlohmann::json config;  // fingerprint and provenance

  nlohmann::ordered_json to_json() const;
};

// Throws InvalidArgument naming the utterance if a TTA record has no clean
// counterpart.
EvalReport build_report(std::span<const ScoreRecord> clean, std::span<const ScoreRecord> tta,
                        nlohmann::json config);

void write_report(const EvalReport& report, const std::filesystem::path& path);

// JSON Lines {"utt","dataset","label","view","score"[,"config"]}.
void write_scores(std::span<const ScoreRecord> records, const std::filesystem::path& path);
std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);
std::string scores_to_jsonl(std::span<const ScoreRecord> records);

void write_tta_results(std::span<const TtaResult> results, const std::filesystem::path& path,
                       const std::string& fingerprint);

// Rounds to 6 decimal places, the precision of every float in a report.
double round6(double x) noexcept;

}  // namespace raptor
