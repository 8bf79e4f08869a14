#include "raptor/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace raptor {

EerResult compute_eer(std::span<const double> spoof, std::span<const double> bona) {
  if (spoof.empty() || bona.empty())
    throw InvalidArgument("compute_eer: need at least one spoof and one bona fide score");

  struct Scored {
    double score;
    bool spoof;
  };
  std::vector<Scored> all;
  all.reserve(spoof.size() + bona.size());
  for (double s : spoof) all.push_back({s, true});
  for (double s : bona) all.push_back({s, false});
  for (const auto& x : all)
    if (!std::isfinite(x.score)) throw InvalidArgument("compute_eer: non-finite score");
  std::sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score < b.score; });

  const auto ns = static_cast<double>(spoof.size());
  const auto nb = static_cast<double>(bona.size());

  // Walk thresholds upward through the distinct scores, then +inf. At a
  // threshold equal to score s, everything strictly below s is rejected.
  std::size_t spoof_below = 0;
  std::size_t bona_below = 0;
  double prev_fpr = 1.0, prev_fnr = 0.0, prev_thr = all.front().score;
  std::size_t i = 0;
  bool first = true;
  while (true) {
    const bool at_end = i == all.size();
    const double thr = at_end ? std::nextafter(all.back().score, std::numeric_limits<double>::infinity())
                              : all[i].score;
    const double fpr = (nb - static_cast<double>(bona_below)) / nb;
    const double fnr = static_cast<double>(spoof_below) / ns;
    const double diff = fnr - fpr;
    if (diff >= 0.0) {
      if (diff == 0.0 || first) return {fpr, thr};
      const double prev_diff = prev_fnr - prev_fpr;  // < 0
      const double t = -prev_diff / (diff - prev_diff);
      return {prev_fpr + t * (fpr - prev_fpr), prev_thr + t * (thr - prev_thr)};
    }
    prev_fpr = fpr;
    prev_fnr = fnr;
    prev_thr = thr;
    first = false;
    if (at_end) break;
    const double s = all[i].score;
    while (i < all.size() && all[i].score == s) {
      if (all[i].spoof)
        ++spoof_below;
      else
        ++bona_below;
      ++i;
    }
  }
  // Unreachable: at +inf FNR = 1 and FPR = 0.
  return {prev_fpr, prev_thr};
}

EerResult compute_eer(std::span<const ScoreRecord> records) {
  std::vector<double> spoof, bona;
  for (const auto& r : records) {
    if (!(r.score >= 0.0 && r.score <= 1.0))
      throw InvalidArgument("compute_eer: score of " + r.utt_id + " is outside [0, 1]");
    if (r.label == Label::Spoof)
      spoof.push_back(r.score);
    else if (r.label == Label::BonaFide)
      bona.push_back(r.score);
    else
      throw InvalidArgument("compute_eer: unlabeled record " + r.utt_id);
  }
  if (spoof.empty() || bona.empty())
    throw InvalidArgument("compute_eer: single-class input (" + std::to_string(spoof.size()) +
                          " spoof, " + std::to_string(bona.size()) + " bona fide)");
  return compute_eer(spoof, bona);
}

std::map<std::string, std::vector<ScoreRecord>> group_by_dataset(std::span<const ScoreRecord> records) {
  std::map<std::string, std::vector<ScoreRecord>> out;
  for (const auto& r : records) out[r.dataset_id].push_back(r);
  return out;
}

double pooled_eer(const std::map<std::string, std::vector<ScoreRecord>>& by_dataset) {
  std::vector<ScoreRecord> all;
  for (const auto& [name, recs] : by_dataset) all.insert(all.end(), recs.begin(), recs.end());
  return compute_eer(all).eer;
}

double average_eer(std::span<const double> eers) {
  if (eers.empty()) throw InvalidArgument("average_eer: empty list");
  return std::accumulate(eers.begin(), eers.end(), 0.0) / static_cast<double>(eers.size());
}

TtaResult tta_aggregate(std::span<const ScoreRecord> views) {
  if (views.empty()) throw InvalidArgument("tta_aggregate: no views");
  TtaResult r;
  r.utt_id = views.front().utt_id;
  r.dataset_id = views.front().dataset_id;
  r.label = views.front().label;
  double sum = 0.0;
  double ent = 0.0;
  for (const auto& v : views) {
    if (v.utt_id != r.utt_id)
      throw InvalidArgument("tta_aggregate: mixed utterances " + r.utt_id + " and " + v.utt_id);
    r.per_view.push_back(v.score);
    sum += v.score;
    ent += binary_entropy(v.score);
  }
  const auto k = static_cast<double>(views.size());
  r.mean_posterior = sum / k;
  r.u_ale = ent / k;
  return r;
}

std::vector<TtaResult> tta_aggregate_all(std::span<const ScoreRecord> records) {
  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<ScoreRecord>> groups;
  for (const auto& r : records) {
    auto [it, inserted] = groups.try_emplace(r.utt_id);
    if (inserted) order.push_back(r.utt_id);
    it->second.push_back(r);
  }
  std::vector<TtaResult> out;
  out.reserve(order.size());
  for (const auto& u : order) out.push_back(tta_aggregate(groups[u]));
  return out;
}

double delta_eer(double ensemble_eer, double clean_eer) noexcept {
  return (ensemble_eer - clean_eer) * 100.0;
}

double round6(double x) noexcept { return std::round(x * 1e6) / 1e6; }

EvalReport build_report(std::span<const ScoreRecord> clean, std::span<const ScoreRecord> tta,
                        nlohmann::json config) {
  EvalReport rep;
  rep.config = std::move(config);
  rep.clean_records = clean.size();
  rep.tta_records = tta.size();

  const auto by_ds = group_by_dataset(clean);
  std::vector<double> eers;
  for (const auto& [ds, recs] : by_ds) {
    rep.per_dataset_eer[ds] = compute_eer(recs).eer;
    eers.push_back(rep.per_dataset_eer[ds]);
  }
  rep.avg_eer = average_eer(eers);
  rep.pooled_eer = pooled_eer(by_ds);

  if (tta.empty()) return rep;

  std::unordered_map<std::string, const ScoreRecord*> clean_by_utt;
  for (const auto& r : clean) clean_by_utt.emplace(r.utt_id, &r);
  for (const auto& r : tta) {
    if (!clean_by_utt.contains(r.utt_id))
      throw InvalidArgument("build_report: TTA record for " + r.utt_id + " has no clean record");
  }

  const auto results = tta_aggregate_all(tta);
  std::map<std::string, std::vector<ScoreRecord>> clean_sub, ens;
  std::map<std::string, std::pair<double, std::size_t>> ale;
  for (const auto& res : results) {
    const ScoreRecord& c = *clean_by_utt.at(res.utt_id);
    clean_sub[c.dataset_id].push_back(c);
    ScoreRecord e = c;
    e.score = res.mean_posterior;
    ens[c.dataset_id].push_back(std::move(e));
    auto& [sum, n] = ale[c.dataset_id];
    sum += res.u_ale;
    ++n;
  }
  TtaSummary s;
  for (const auto& [ds, recs] : ens) {
    const double c = compute_eer(clean_sub[ds]).eer;
    const double t = compute_eer(recs).eer;
    s.clean_eer[ds] = c;
    s.tta_eer[ds] = t;
    s.delta_eer[ds] = delta_eer(t, c);
    s.mean_u_ale[ds] = ale[ds].first / static_cast<double>(ale[ds].second);
  }
  rep.tta = std::move(s);
  return rep;
}

nlohmann::ordered_json EvalReport::to_json() const {
  auto rounded = [](const std::map<std::string, double>& m) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m) j[k] = round6(v);
    return j;
  };
  nlohmann::ordered_json j;
  j["per_dataset_eer"] = rounded(per_dataset_eer);
  j["avg_eer"] = round6(avg_eer);
  j["pooled_eer"] = round6(pooled_eer);
  if (tta) {
    j["clean_eer"] = rounded(tta->clean_eer);
    j["tta_eer"] = rounded(tta->tta_eer);
    j["delta_eer"] = rounded(tta->delta_eer);
    j["mean_u_ale"] = rounded(tta->mean_u_ale);
  } else {
    j["clean_eer"] = rounded(per_dataset_eer);
    j["tta_eer"] = nullptr;
    j["delta_eer"] = nullptr;
    j["mean_u_ale"] = nullptr;
  }
  j["config"] = config;
  j["counts"] = {{"clean_records", clean_records}, {"tta_records", tta_records}};
  return j;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out << report.to_json().dump(2) << '\n';
}

std::string scores_to_jsonl(std::span<const ScoreRecord> records) {
  std::ostringstream out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["utt"] = r.utt_id;
    j["dataset"] = r.dataset_id;
    j["label"] = static_cast<int>(r.label);
    j["view"] = r.view_id;
    j["score"] = r.score;
    if (!r.fingerprint.empty()) j["config"] = r.fingerprint;
    out << j.dump() << '\n';
  }
  return out.str();
}

void write_scores(std::span<const ScoreRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out << scores_to_jsonl(records);
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open score file " + path.string());
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ScoreRecord r;
      r.utt_id = j.at("utt").get<std::string>();
      r.dataset_id = j.at("dataset").get<std::string>();
      const int lab = j.at("label").get<int>();
      if (lab != 0 && lab != 1) throw InvalidArgument("label must be 0 or 1");
      r.label = static_cast<Label>(lab);
      r.view_id = j.at("view").get<std::uint32_t>();
      r.score = j.at("score").get<double>();
      if (!(r.score >= 0.0 && r.score <= 1.0)) throw InvalidArgument("score outside [0,1]");
      if (j.contains("config")) r.fingerprint = j["config"].get<std::string>();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_tta_results(std::span<const TtaResult> results, const std::filesystem::path& path,
                       const std::string& fingerprint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  for (const auto& r : results) {
    nlohmann::ordered_json j;
    j["utt"] = r.utt_id;
    j["dataset"] = r.dataset_id;
    j["label"] = static_cast<int>(r.label);
    j["mean_posterior"] = r.mean_posterior;
    j["u_ale"] = r.u_ale;
    j["views"] = r.per_view;
    if (!fingerprint.empty()) j["config"] = fingerprint;
    out << j.dump() << '\n';
  }
}

}  // namespace raptor
