#include "raptor/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "raptor/datagen.hpp"
#include "raptor/metrics.hpp"
#include "raptor/perturb.hpp"
#include "raptor/rng.hpp"
#include "raptor/trainer.hpp"

namespace raptor::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string out;
  bool force = false;
};

// Unknown or mistyped keys are usage errors.
json overlay_checked(json base, const json& overrides) {
  try {
    return overlay_config(std::move(base), overrides);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

json resolve_config(const Common& c, const std::string& seed_key) {
  json cfg = default_config();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw InvalidArgument("cannot open config " + c.config_path);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw FormatError(c.config_path + ": " + e.what());
    }
    cfg = overlay_checked(std::move(cfg), file);
  }
  json flags = json::object();
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    const std::string key = s.substr(0, eq);
    const std::string raw = s.substr(eq + 1);
    json v = json::parse(raw, nullptr, false);
    flags[key] = v.is_discarded() ? json(raw) : v;
  }
  if (c.seed && !seed_key.empty()) flags[seed_key] = *c.seed;
  return overlay_checked(std::move(cfg), flags);
}

SynthSpec synth_spec_from(const json& cfg) {
  SynthSpec s;
  s.L = cfg.at("synth.L").get<std::size_t>();
  s.T = cfg.at("synth.T").get<std::size_t>();
  s.D = cfg.at("synth.D").get<std::size_t>();
  s.artifact_layers = cfg.at("synth.artifact_layers").get<std::vector<std::size_t>>();
  s.artifact_gain = cfg.at("synth.artifact_gain").get<double>();
  s.class_separation = cfg.at("synth.class_separation").get<double>();
  s.jitter_scale = cfg.at("synth.jitter_scale").get<double>();
  s.seed = cfg.at("synth.seed").get<std::uint64_t>();
  s.validate();
  return s;
}

TtaConfig tta_config_from(const json& cfg) {
  TtaConfig t;
  t.K = cfg.at("tta.K").get<std::size_t>();
  t.noise_snr_db = cfg.at("tta.noise_snr_db").get<double>();
  t.speed_factor = cfg.at("tta.speed_factor").get<double>();
  t.master_seed = cfg.at("tta.master_seed").get<std::uint64_t>();
  t.validate();
  return t;
}

TrainConfig train_config_from(const json& cfg) {
  TrainConfig t;
  t.lambda = cfg.at("train.lambda").get<double>();
  t.learning_rate = cfg.at("train.learning_rate").get<double>();
  t.weight_decay = cfg.at("train.weight_decay").get<double>();
  t.batch_size = cfg.at("train.batch_size").get<std::size_t>();
  t.max_iterations = cfg.at("train.max_iterations").get<std::size_t>();
  t.epochs = cfg.at("train.epochs").get<std::size_t>();
  t.seed = cfg.at("train.seed").get<std::uint64_t>();
  t.checkpoint_every = cfg.at("train.checkpoint_every").get<std::size_t>();
  const auto mode = cfg.at("train.class_weights").get<std::string>();
  if (mode == "balanced")
    t.class_weights = ClassWeightMode::Balanced;
  else if (mode == "uniform")
    t.class_weights = ClassWeightMode::Uniform;
  else
    throw InvalidArgument("train.class_weights must be 'balanced' or 'uniform', got '" + mode + "'");
  t.validate();
  return t;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

// ---- subcommands ----------------------------------------------------------

void cmd_gen(const Common& c) {
  require(c.out, "--out");
  const json cfg = resolve_config(c, "synth.seed");
  const SynthSpec spec = synth_spec_from(cfg);
  const std::string fp = config_fingerprint(cfg, {"synth.", "gen."});
  const auto views = cfg.at("gen.views").get<std::uint32_t>();
  const auto test_sets = cfg.at("gen.test_sets").get<std::size_t>();
  if (test_sets == 0) throw InvalidArgument("gen.test_sets must be >= 1");

  const fs::path root = c.out;
  struct Split {
    const char* name;
    std::size_t count;
  };
  const Split splits[] = {{"train", cfg.at("gen.n_train").get<std::size_t>()},
                          {"dev", cfg.at("gen.n_dev").get<std::size_t>()},
                          {"test", cfg.at("gen.n_test").get<std::size_t>()}};
  std::uint64_t next = 0;
  for (const auto& split : splits) {
    const fs::path dir = root / "features" / split.name;
    fs::create_directories(dir);
    std::vector<ManifestEntry> manifest;
    std::vector<std::vector<ManifestEntry>> per_utt(split.count);
    parallel_for(split.count, c.workers, [&](std::size_t j) {
      const std::uint64_t idx = next + j;
      const Label y = idx % 2 == 0 ? Label::BonaFide : Label::Spoof;
      std::string dataset = "synth";
      if (std::string(split.name) == "test" && test_sets > 1)
        dataset = "synth_" + std::to_string((j / 2) % test_sets);
      for (std::uint32_t v = 0; v <= views; ++v) {
        LayerStack s = synth_view(spec, idx, y, v);
        s.dataset_id = dataset;
        const std::string file = s.utt_id + ".view" + std::to_string(v) + ".rsf";
        write_features(s, dir / file);
        per_utt[j].push_back({(fs::path("features") / split.name / file).generic_string(), s.utt_id,
                              dataset, y, v, fp});
      }
    });
    for (auto& u : per_utt) manifest.insert(manifest.end(), u.begin(), u.end());
    write_manifest(manifest, root / (std::string(split.name) + ".jsonl"));
    next += split.count;
  }
  json meta = {{"config", cfg}, {"fingerprint", fp}};
  std::ofstream(root / "gen.json", std::ios::binary) << meta.dump(2) << '\n';
  std::cerr << "gen: wrote " << next << " utterances to " << root.string() << " (config " << fp << ")\n";
}

void cmd_perturb(const Common& c, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw UsageError("perturb: need at least one --in WAV file");
  const json cfg = resolve_config(c, "tta.master_seed");
  const TtaConfig tta = tta_config_from(cfg);
  const double seconds = cfg.at("tta.seconds").get<double>();
  const std::string fp = config_fingerprint(cfg, {"tta."});
  parallel_for(inputs.size(), c.workers, [&](std::size_t i) {
    const fs::path src = inputs[i];
    const Waveform w = crop_pad(read_wav(src), seconds);
    const std::string stem = src.stem().string();
    const auto views = make_views(w, tta, stem);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const fs::path dst = src.parent_path() / (stem + ".view" + std::to_string(k + 1) + ".wav");
      write_wav(views[k], dst, "config " + fp);
    }
  });
  std::cerr << "perturb: " << inputs.size() << " files x " << tta.K << " views (config " << fp << ")\n";
}

void cmd_train(const Common& c, const std::string& train_path, const std::string& dev_path,
               const std::string& resume_path) {
  require(train_path, "--train");
  require(dev_path, "--dev");
  require(c.out, "--out");
  const json cfg = resolve_config(c, "train.seed");
  TrainConfig tc = train_config_from(cfg);
  tc.workers = c.workers;
  const ManifestSource train_src = ManifestSource::from_file(train_path);
  const ManifestSource dev_src = ManifestSource::from_file(dev_path);
  tc.data_fingerprint = train_src.fingerprint();
  const std::string fp = tc.fingerprint();

  const fs::path out = c.out;
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl", std::ios::binary);
  auto sink = [&](const LogEntry& e) {
    nlohmann::ordered_json j;
    j["iteration"] = e.iteration;
    j["cls"] = e.cls;
    j["cons"] = e.cons;
    j["total"] = e.total;
    j["dev_eer"] = e.dev_eer;
    j["config"] = fp;
    log << j.dump() << '\n' << std::flush;
    std::cerr << "train: iter " << e.iteration << " total " << e.total << " dev_eer " << e.dev_eer << '\n';
  };

  // A best.rckp beside the resumed checkpoint seeds the running best.
  std::optional<Checkpoint> resume, resume_best;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    const fs::path best = fs::path(resume_path).parent_path() / "best.rckp";
    if (fs::exists(best) && !fs::equivalent(best, resume_path)) resume_best = load_checkpoint(best);
  }
  const TrainResult r = train(tc, train_src, dev_src, resume ? &*resume : nullptr,
                              resume_best ? &*resume_best : nullptr, sink);
  save_checkpoint(r.best, out / "best.rckp");
  save_checkpoint(r.last, out / "last.rckp");
  std::cerr << "train: best dev EER " << r.best.dev_eer << " at iteration " << r.best.iteration << '\n';
}

void cmd_eval(const Common& c, const std::string& ckpt_path, const std::string& manifest_path,
              const std::string& views) {
  require(ckpt_path, "--checkpoint");
  require(manifest_path, "--manifest");
  require(c.out, "--out");
  if (views != "clean" && views != "augmented" && views != "all")
    throw UsageError("--views must be clean, augmented or all");
  (void)resolve_config(c, "");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  std::vector<ManifestEntry> manifest = read_manifest(manifest_path);
  if (views == "clean")
    std::erase_if(manifest, [](const ManifestEntry& e) { return e.view != 0; });
  else if (views == "augmented")
    std::erase_if(manifest, [](const ManifestEntry& e) { return e.view == 0; });
  const auto scores = evaluate(ckpt, manifest, c.workers);
  write_scores(scores, c.out);
  std::cerr << "eval: " << scores.size() << " scores -> " << c.out << '\n';
}

void cmd_tta(const Common& c, const std::string& scores_path) {
  require(scores_path, "--scores");
  require(c.out, "--out");
  (void)resolve_config(c, "");
  auto recs = read_scores(scores_path);
  std::erase_if(recs, [](const ScoreRecord& r) { return r.view_id == 0; });
  std::set<std::string> fps;
  for (const auto& r : recs) fps.insert(r.fingerprint);
  if (fps.size() > 1 && !c.force)
    throw InvalidArgument("tta: score file mixes config fingerprints (use --force to override)");
  const auto results = tta_aggregate_all(recs);
  write_tta_results(results, c.out, fps.size() == 1 ? *fps.begin() : std::string());
  std::cerr << "tta: " << results.size() << " utterances -> " << c.out << '\n';
}

void cmd_report(const Common& c, const std::string& clean_path, const std::string& tta_path) {
  require(clean_path, "--clean");
  require(c.out, "--out");
  const json cfg = resolve_config(c, "");
  auto clean = read_scores(clean_path);
  std::erase_if(clean, [](const ScoreRecord& r) { return r.view_id != 0; });
  std::vector<ScoreRecord> tta;
  if (!tta_path.empty()) {
    tta = read_scores(tta_path);
    std::erase_if(tta, [](const ScoreRecord& r) { return r.view_id == 0; });
  }
  std::set<std::string> fps;
  for (const auto& r : clean) fps.insert(r.fingerprint);
  for (const auto& r : tta) fps.insert(r.fingerprint);
  if (fps.size() > 1 && !c.force)
    throw InvalidArgument("report: inputs carry " + std::to_string(fps.size()) +
                          " different config fingerprints (use --force to mix)");

  json fp_list = json::array();
  for (const auto& f : fps) fp_list.push_back(f);
  json provenance = {
      {"fingerprint", fps.size() == 1 ? json(*fps.begin()) : json(fp_list)},
      {"tta", {{"K", cfg.at("tta.K")},
               {"codec", "mulaw-8bit-8kHz"},
               {"noise_snr_db", cfg.at("tta.noise_snr_db")},
               {"speed_factor", cfg.at("tta.speed_factor")},
               {"master_seed", cfg.at("tta.master_seed")}}},
      {"report", config_fingerprint(cfg, {"tta."})}};
  const EvalReport rep = build_report(clean, tta, std::move(provenance));
  write_report(rep, c.out);
  std::cerr << "report: avg EER " << rep.avg_eer << ", pooled EER " << rep.pooled_eer << " -> " << c.out << '\n';
}

void cmd_gatemap(const Common& c, const std::string& ckpt_path, const std::string& features) {
  require(ckpt_path, "--checkpoint");
  require(features, "--features");
  require(c.out, "--out");
  (void)resolve_config(c, "");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const FusionTrace tr = forward(read_features(features), ckpt.params);
  write_gate_map_csv(export_gate_maps(tr), c.out);
  std::cerr << "gatemap: " << tr.gates.size() << " gates x " << tr.frames() << " frames -> " << c.out << '\n';
}

}  // namespace

json default_config() {
  return {
      {"synth.L", 12},
      {"synth.T", 200},
      {"synth.D", 32},
      {"synth.artifact_layers", {6, 7, 8, 9}},
      {"synth.artifact_gain", 1.0},
      {"synth.class_separation", 1.0},
      {"synth.jitter_scale", 0.5},
      {"synth.seed", 0},
      {"gen.n_train", 400},
      {"gen.n_dev", 200},
      {"gen.n_test", 200},
      {"gen.views", 1},
      {"gen.test_sets", 1},
      {"train.lambda", 0.25},
      {"train.learning_rate", 1e-6},
      {"train.weight_decay", 1e-4},
      {"train.batch_size", 24},
      {"train.max_iterations", 1000},
      {"train.epochs", 0},
      {"train.seed", 0},
      {"train.class_weights", "balanced"},
      {"train.checkpoint_every", 50},
      {"tta.K", 3},
      {"tta.noise_snr_db", 15.0},
      {"tta.speed_factor", 1.05},
      {"tta.master_seed", 0},
      {"tta.seconds", 4.0},
  };
}

json overlay_config(json base, const json& overrides) {
  if (!overrides.is_object()) throw InvalidArgument("config must be a JSON object of dotted keys");
  for (const auto& [key, value] : overrides.items()) {
    if (!base.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
    json& slot = base[key];
    const bool ok = (slot.is_number() && value.is_number()) || slot.type() == value.type();
    if (!ok) throw InvalidArgument("config key '" + key + "' has the wrong type");
    if (slot.is_number_integer() && !value.is_number_integer())
      throw InvalidArgument("config key '" + key + "' must be an integer");
    if (slot.is_number_integer() && value.is_number_integer() && value.get<std::int64_t>() < 0)
      throw InvalidArgument("config key '" + key + "' must be non-negative");
    if (slot.is_number_float())
      slot = value.get<double>();
    else
      slot = value;
  }
  return base;
}

std::string config_fingerprint(const json& config, const std::vector<std::string>& prefixes) {
  json subset = json::object();
  for (const auto& [key, value] : config.items()) {
    for (const auto& p : prefixes)
      if (key.starts_with(p)) subset[key] = value;
  }
  return hex64(fnv1a64(subset.dump()));
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Pairwise-gated layer-fusion spoof detector toolkit", "raptor"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config,--spec", common.config_path, "JSON config with flat dotted keys");
    sub->add_option("--set", common.sets, "Override a config key: key=value (repeatable)");
    sub->add_option("--seed", common.seed, "Seed for this subcommand's randomness");
    sub->add_option("--workers", common.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", common.out, "Output path");
    sub->add_flag("--force", common.force, "Allow mixing config fingerprints");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic feature corpus");
  add_common(gen);

  std::vector<std::string> wav_inputs;
  auto* perturb = app.add_subcommand("perturb", "Write TTA views <stem>.view<k>.wav beside each input");
  add_common(perturb);
  perturb->add_option("--in", wav_inputs, "Input WAV file (repeatable)");

  std::string train_manifest, dev_manifest, resume;
  auto* train_cmd = app.add_subcommand("train", "Train the detector");
  add_common(train_cmd);
  train_cmd->add_option("--train", train_manifest, "Training manifest");
  train_cmd->add_option("--dev", dev_manifest, "Development manifest");
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

  std::string ckpt, manifest, views = "all";
  auto* eval_cmd = app.add_subcommand("eval", "Score a manifest");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint");
  eval_cmd->add_option("--manifest", manifest, "Manifest to score");
  eval_cmd->add_option("--views", views, "clean | augmented | all");

  std::string scores;
  auto* tta_cmd = app.add_subcommand("tta", "Aggregate per-view scores into TTA posteriors and U_ale");
  add_common(tta_cmd);
  tta_cmd->add_option("--scores", scores, "Score file with augmented views");

  std::string clean_scores, tta_scores;
  auto* report = app.add_subcommand("report", "Build the evaluation report");
  add_common(report);
  report->add_option("--clean", clean_scores, "Score file with clean (view 0) records");
  report->add_option("--tta", tta_scores, "Score file with augmented-view records");

  std::string features;
  auto* gatemap = app.add_subcommand("gatemap", "Export per-frame gate maps as CSV");
  add_common(gatemap);
  gatemap->add_option("--checkpoint", ckpt, "Checkpoint");
  gatemap->add_option("--features", features, "Feature file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) cmd_gen(common);
    else if (perturb->parsed()) cmd_perturb(common, wav_inputs);
    else if (train_cmd->parsed()) cmd_train(common, train_manifest, dev_manifest, resume);
    else if (eval_cmd->parsed()) cmd_eval(common, ckpt, manifest, views);
    else if (tta_cmd->parsed()) cmd_tta(common, scores);
    else if (report->parsed()) cmd_report(common, clean_scores, tta_scores);
    else if (gatemap->parsed()) cmd_gatemap(common, ckpt, features);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace raptor::cli
