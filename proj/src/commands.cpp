#include "densiscope/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "densiscope/attribution.hpp"
#include "densiscope/phantom.hpp"

namespace densiscope {

namespace fs = std::filesystem;

namespace {

constexpr const char* kStages[] = {"generate", "train", "predict", "explain", "evaluate"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::string slice_id(int patient_id, int slice_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%04d_s%02d", patient_id, slice_index);
  return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double to_double(const std::string& s, const fs::path& file) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(file.string() + ": bad number '" + s + "'");
  }
}

std::optional<double> to_optional(const std::string& s, const fs::path& file) {
  if (s.empty()) return std::nullopt;
  return to_double(s, file);
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  return os;
}

void write_text(const fs::path& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

std::string effective_config_text(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

void write_provenance(const Invocation& inv) {
  const RunLayout L = inv.layout();
  fs::create_directories(L.root);
  write_text(L.config(), effective_config_text(inv.config));
  write_text(L.config_source(), inv.source_text);
  nlohmann::json flags = nlohmann::json::object();
  if (inv.overrides.seed) flags["seed"] = *inv.overrides.seed;
  if (inv.overrides.patients) flags["patients"] = *inv.overrides.patients;
  if (inv.overrides.epochs) flags["epochs"] = *inv.overrides.epochs;
  if (inv.overrides.out) flags["out"] = *inv.overrides.out;
  write_text(L.overrides(), flags.dump(2) + "\n");
  write_text(L.version(), std::string("densiscope ") + DENSISCOPE_VERSION + "\n");
}

Splits load_cohort(const Invocation& inv) {
  const RunLayout L = inv.layout();
  if (!fs::exists(L.dataset())) {
    throw IoError("dataset directory not found: " + L.dataset().string() + " (run generate first)");
  }
  const auto slices = read_dataset(L.dataset());
  const Dataset all = prepare_dataset(slices, inv.config.image_size, inv.config.slices_per_patient);
  return split_by_patient(all, inv.config.split);
}

ModelState load_trained(const Invocation& inv) {
  const fs::path w = inv.layout().weights();
  if (!fs::exists(w)) throw IoError("weights not found: " + w.string() + " (run train first)");
  return load_weights(w);
}

// Test slices to explain: all of them, or a seeded sample of max_slices kept
// in dataset order.
std::vector<std::size_t> explain_selection(const Dataset& test, const AttributionConfig& a) {
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (a.max_slices > 0 && std::size_t(a.max_slices) < idx.size()) {
    std::mt19937_64 rng(a.seed ^ 0x5e1ec7ull);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::size_t(a.max_slices));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

const char* kSummaryHeader =
    "input_id,patient_id,slice_index,truth,prediction,background_mean,shap_sum,"
    "fgt_mean,fat_mean,inside_abs_mean,outside_abs_mean";

std::vector<ExplainRecord> read_explain_summary(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("SHAP summary not found: " + path.string() + " (run explain first)");
  std::string line;
  std::getline(is, line);
  if (line != kSummaryHeader) throw IoError(path.string() + ": unexpected header");
  std::vector<ExplainRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 11) throw IoError(path.string() + ": malformed row '" + line + "'");
    ExplainRecord r;
    r.input_id = f[0];
    r.patient_id = int(to_double(f[1], path));
    r.slice_index = int(to_double(f[2], path));
    r.truth = to_double(f[3], path);
    r.prediction = to_double(f[4], path);
    r.background_mean = to_double(f[5], path);
    r.shap_sum = to_double(f[6], path);
    r.regions.fgt_mean = to_optional(f[7], path);
    r.regions.fat_mean = to_optional(f[8], path);
    r.regions.inside_abs_mean = to_optional(f[9], path);
    r.regions.outside_abs_mean = to_optional(f[10], path);
    r.regions.patient_id = r.patient_id;
    r.regions.slice_index = r.slice_index;
    out.push_back(r);
  }
  return out;
}

std::vector<SliceResult> read_predictions(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("predictions not found: " + path.string() + " (run predict first)");
  std::string line;
  std::getline(is, line);
  if (line != "patient_id,slice_index,truth,prediction") {
    throw IoError(path.string() + ": unexpected header");
  }
  std::vector<SliceResult> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 4) throw IoError(path.string() + ": malformed row '" + line + "'");
    out.push_back({int(to_double(f[0], path)), int(to_double(f[1], path)), to_double(f[2], path),
                   to_double(f[3], path)});
  }
  return out;
}

std::set<std::string> read_stages(const fs::path& path) {
  std::set<std::string> done;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) done.insert(line);
  }
  return done;
}

template <typename E>
[[noreturn]] void rethrow_in_stage(const std::string& stage, const E& e) {
  throw E("stage '" + stage + "' failed: " + e.what());
}

}  // namespace

void cmd_generate(const Invocation& inv, std::ostream& log) {
  const RunConfig& c = inv.config;
  const RunLayout L = inv.layout();
  write_provenance(inv);
  const auto slices = generate_dataset(c.data_seed, c.patients, c.slices_per_patient, c.phantom);
  if (fs::exists(L.dataset())) fs::remove_all(L.dataset());
  write_dataset(L.dataset(), slices);
  const Dataset all = prepare_dataset(slices, c.image_size, c.slices_per_patient);
  const Splits s = split_by_patient(all, c.split);
  write_split_manifest(L.splits(), s);
  log << "generate: " << c.patients << " patients, " << slices.size() << " slices -> "
      << L.dataset().string() << "\n"
      << "generate: split " << s.train.patient_ids().size() << "/" << s.val.patient_ids().size()
      << "/" << s.test.patient_ids().size() << " patients (train/val/test)\n";
}

void cmd_train(const Invocation& inv, std::ostream& log) {
  const RunConfig& c = inv.config;
  const RunLayout L = inv.layout();
  write_provenance(inv);
  const Splits s = load_cohort(inv);

  const bool resume = fs::exists(L.weights());
  ModelState model = resume ? load_weights(L.weights()) : build_model(c.model, c.model_seed);
  if (resume) log << "train: resuming from epoch " << model.epoch << "\n";

  fs::create_directories(L.weights().parent_path());
  const bool fresh_history = !resume || !fs::exists(L.history());
  std::ofstream hist(L.history(), fresh_history ? std::ios::trunc : std::ios::app);
  if (!hist) throw IoError("cannot write " + L.history().string());
  if (fresh_history) hist << "epoch,train_loss,val_loss\n";

  const auto result = train(model, s.train, s.val, c.train, [&](const EpochRecord& r) {
    hist << r.epoch << "," << fmt(r.train_loss) << "," << fmt(r.val_loss) << "\n";
    hist.flush();
    log << "train: epoch " << r.epoch << " train MAPE " << fmt(r.train_loss) << " val MAPE "
        << fmt(r.val_loss) << "\n";
  });
  save_weights(model, L.weights());
  if (result.best_val) save_weights(*result.best_val, L.best_val_weights());
  log << "train: wrote " << L.weights().string() << " (epoch " << model.epoch << ")\n";
}

void cmd_predict(const Invocation& inv, std::ostream& log) {
  const RunLayout L = inv.layout();
  write_provenance(inv);
  const ModelState model = load_trained(inv);
  const Splits s = load_cohort(inv);
  const auto pred = predict(model, s.test);
  auto os = open_out(L.predictions());
  os << "patient_id,slice_index,truth,prediction\n";
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Sample& x = s.test.samples[i];
    os << x.patient_id << "," << x.slice_index << "," << fmt(x.density) << "," << fmt(pred[i])
       << "\n";
  }
  if (!os) throw IoError("failed writing " + L.predictions().string());
  log << "predict: " << pred.size() << " test slices -> " << L.predictions().string() << "\n";
}

void cmd_explain(const Invocation& inv, std::ostream& log) {
  const RunConfig& c = inv.config;
  const RunLayout L = inv.layout();
  write_provenance(inv);
  const ModelState model = load_trained(inv);
  const std::uint32_t checksum = weights_checksum(L.weights());
  const Splits s = load_cohort(inv);
  const BackgroundSet bg =
      sample_background(s.train, std::size_t(c.attribution.background_count), c.attribution.seed);
  const AttributionNet net(model.network, Mode::infer);

  if (fs::exists(L.shap_dir())) fs::remove_all(L.shap_dir());
  fs::create_directories(L.shap_dir());
  auto summary = open_out(L.shap_summary());
  summary << kSummaryHeader << "\n";

  const auto selection = explain_selection(s.test, c.attribution);
  std::size_t done = 0;
  for (std::size_t i : selection) {
    const Sample& x = s.test.samples[i];
    ShapMap map = deep_shap(net, x.image, bg);
    map.input_id = slice_id(x.patient_id, x.slice_index);
    map.model_checksum = checksum;
    write_shap_map(map, L.shap_dir() / (map.input_id + ".shap"));
    export_shap_overlay(x.image, map, L.shap_dir() / (map.input_id + ".ppm"));
    if (c.attribution.write_csv) write_shap_csv(map, L.shap_dir() / (map.input_id + ".csv"));
    const RegionStats r = region_shap_summary(map.values, x.breast_mask, x.fgt_mask);
    summary << map.input_id << "," << x.patient_id << "," << x.slice_index << ","
            << fmt(x.density) << "," << fmt(map.prediction) << "," << fmt(map.background_mean)
            << "," << fmt(map.values.sum()) << "," << opt_fmt(r.fgt_mean) << ","
            << opt_fmt(r.fat_mean) << "," << opt_fmt(r.inside_abs_mean) << ","
            << opt_fmt(r.outside_abs_mean) << "\n";
    summary.flush();
    if (++done % 10 == 0 || done == selection.size()) {
      log << "explain: " << done << "/" << selection.size() << " slices\n";
    }
  }
  if (!summary) throw IoError("failed writing " + L.shap_summary().string());
}

bool RunSummary::rho_pass(const AcceptanceThresholds& t) const {
  return eval.spearman_rho >= t.min_rho && eval.p_value < t.max_p;
}

bool RunSummary::region_sign_pass(const AcceptanceThresholds& t) const {
  return region_eligible > 0 && double(region_sign_ok) >= t.region_min_fraction * region_eligible;
}

bool RunSummary::region_ratio_pass(const AcceptanceThresholds& t) const {
  return region_eligible > 0 && outside_inside_ratio < t.outside_inside_ratio;
}

RunSummary cmd_evaluate(const Invocation& inv, std::ostream& log) {
  const RunConfig& c = inv.config;
  const AcceptanceThresholds& t = c.acceptance;
  const RunLayout L = inv.layout();
  write_provenance(inv);

  RunSummary out;
  fs::create_directories(L.scatter().parent_path());
  out.eval = evaluate(read_predictions(L.predictions()), c.permutations, c.eval_seed);
  scatter_report(out.eval, L.scatter());
  write_slice_report(out.eval, L.slice_report());

  if (fs::exists(L.shap_summary())) out.explained = read_explain_summary(L.shap_summary());
  auto regions = open_out(L.region_stats());
  regions << "input_id,patient_id,slice_index,truth,prediction,fgt_mean,fat_mean,"
             "inside_abs_mean,outside_abs_mean,accurate,sign_ok\n";
  double inside_sum = 0, outside_sum = 0;
  out.worst_completeness_excess = -std::numeric_limits<double>::infinity();
  for (const auto& e : out.explained) {
    const double expected = e.prediction - e.background_mean;
    const double tol = t.completeness_rel * std::abs(expected) + t.completeness_abs;
    out.worst_completeness_excess = std::max(out.worst_completeness_excess, e.completeness_error() - tol);

    const double reported = std::clamp(e.prediction, 0.0, 1.0);
    const bool accurate = std::abs(reported - e.truth) < t.region_error_band;
    const bool eligible = accurate && e.regions.fgt_mean.has_value();
    const bool sign_ok = eligible && *e.regions.fgt_mean > 0 && e.regions.fat_mean &&
                         *e.regions.fat_mean < 0;
    if (eligible) {
      ++out.region_eligible;
      out.region_sign_ok += sign_ok;
      inside_sum += e.regions.inside_abs_mean.value_or(0.0);
      outside_sum += e.regions.outside_abs_mean.value_or(0.0);
    }
    regions << e.input_id << "," << e.patient_id << "," << e.slice_index << "," << fmt(e.truth)
            << "," << fmt(reported) << "," << opt_fmt(e.regions.fgt_mean) << ","
            << opt_fmt(e.regions.fat_mean) << "," << opt_fmt(e.regions.inside_abs_mean) << ","
            << opt_fmt(e.regions.outside_abs_mean) << "," << int(eligible) << "," << int(sign_ok)
            << "\n";
  }
  if (out.explained.empty()) out.worst_completeness_excess = 0;
  out.outside_inside_ratio = inside_sum > 0 ? outside_sum / inside_sum : 0.0;

  nlohmann::json m{{"n_patients", out.eval.n_patients},
                   {"constant_predictions", out.eval.constant_predictions},
                   {"spearman_rho", out.eval.spearman_rho},
                   {"p_value", out.eval.p_value},
                   {"slice_spearman_rho", out.eval.slice_spearman_rho},
                   {"slice_p_value", out.eval.slice_p_value},
                   {"explained_slices", out.explained.size()},
                   {"worst_completeness_excess", out.worst_completeness_excess},
                   {"region_eligible", out.region_eligible},
                   {"region_sign_ok", out.region_sign_ok},
                   {"outside_inside_ratio", out.outside_inside_ratio},
                   {"pass",
                    {{"rho", out.rho_pass(t)},
                     {"completeness", out.completeness_pass()},
                     {"region_sign", out.region_sign_pass(t)},
                     {"region_ratio", out.region_ratio_pass(t)}}}};
  write_text(L.metrics(), m.dump(2) + "\n");
  log << "evaluate: per-patient rho " << fmt(out.eval.spearman_rho) << " (p " << fmt(out.eval.p_value)
      << ", n " << out.eval.n_patients << "), per-slice rho " << fmt(out.eval.slice_spearman_rho)
      << "\n";
  if (out.eval.constant_predictions) log << "evaluate: predictions are constant; rho set to 0\n";
  return out;
}

void print_verdicts(const RunSummary& s, const AcceptanceThresholds& t, std::ostream& os) {
  auto line = [&](bool pass, const std::string& what) {
    os << (pass ? "PASS  " : "FAIL  ") << what << "\n";
  };
  line(s.eval.spearman_rho >= t.min_rho, "per-patient Spearman rho " + fmt(s.eval.spearman_rho) +
                                             " >= " + fmt(t.min_rho) + " (n = " +
                                             std::to_string(s.eval.n_patients) + ")");
  line(s.eval.p_value < t.max_p, "permutation p " + fmt(s.eval.p_value) + " < " + fmt(t.max_p));
  line(s.completeness_pass(), "SHAP completeness on " + std::to_string(s.explained.size()) +
                                  " slices (worst excess over tolerance " +
                                  fmt(s.worst_completeness_excess) + ")");
  line(s.region_sign_pass(t), "FGT > 0 and fat < 0 on " + std::to_string(s.region_sign_ok) + "/" +
                                  std::to_string(s.region_eligible) + " accurate slices (need " +
                                  fmt(100 * t.region_min_fraction) + "%)");
  line(s.region_ratio_pass(t), "outside/inside mean |SHAP| " + fmt(s.outside_inside_ratio) + " < " +
                                   fmt(t.outside_inside_ratio));
}

RunSummary cmd_reproduce(const Invocation& inv, bool dry_run, std::ostream& log) {
  const RunLayout L = inv.layout();
  if (dry_run) {
    log << "reproduce plan for " << L.root.string() << ":\n";
    const auto done = read_stages(L.stages());
    int n = 1;
    for (const char* stage : kStages) {
      log << "  " << n++ << ". " << stage << (done.count(stage) ? " (done, skipped)" : "") << "\n";
    }
    return {};
  }

  if (fs::exists(L.stages()) && fs::exists(L.config())) {
    std::ifstream is(L.config());
    std::stringstream ss;
    ss << is.rdbuf();
    if (ss.str() != effective_config_text(inv.config)) {
      throw ValidationError("output directory " + L.root.string() +
                            " holds a run with a different configuration");
    }
  }
  auto done = read_stages(L.stages());
  RunSummary summary;
  for (const char* stage : kStages) {
    const std::string name = stage;
    if (done.count(name) && name != "evaluate") {
      log << "reproduce: " << name << " already done\n";
      continue;
    }
    try {
      if (name == "generate") cmd_generate(inv, log);
      if (name == "train") cmd_train(inv, log);
      if (name == "predict") cmd_predict(inv, log);
      if (name == "explain") cmd_explain(inv, log);
      if (name == "evaluate") summary = cmd_evaluate(inv, log);
    } catch (const ShapeError& e) {
      rethrow_in_stage(name, e);
    } catch (const ValidationError& e) {
      rethrow_in_stage(name, e);
    } catch (const NumericError& e) {
      rethrow_in_stage(name, e);
    } catch (const IoError& e) {
      rethrow_in_stage(name, e);
    }
    if (!done.count(name)) {
      std::ofstream os(L.stages(), std::ios::app);
      os << name << "\n";
      if (!os) throw IoError("cannot write " + L.stages().string());
      done.insert(name);
    }
  }
  print_verdicts(summary, inv.config.acceptance, log);
  return summary;
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Breast-density regression on synthetic MRI phantoms with Deep SHAP"};
  app.set_version_flag("--version", std::string("densiscope ") + DENSISCOPE_VERSION);
  app.require_subcommand(1);

  std::string config_path;
  ConfigOverrides ov;
  bool dry_run = false;
  std::uint64_t seed = 0;
  int patients = 0, epochs = 0;
  std::string out_dir;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"generate", "generate the phantom cohort and patient split"},
      {"train", "train or resume training of the model"},
      {"predict", "predict densities for the test split"},
      {"explain", "Deep SHAP maps and overlays for test slices"},
      {"evaluate", "correlation, scatter and region reports"},
      {"reproduce", "run every stage and print the pass/fail table"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration")->required();
    sub->add_option("--seed", seed, "global seed (overrides the file)");
    sub->add_option("--patients", patients, "number of phantom patients")->check(CLI::PositiveNumber);
    sub->add_option("--epochs", epochs, "training epochs")->check(CLI::PositiveNumber);
    sub->add_option("--out", out_dir, "experiment directory");
    if (name == "reproduce") sub->add_flag("--dry-run", dry_run, "print the stage plan only");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  CLI::App* chosen = nullptr;
  for (auto* s : subs) {
    if (s->parsed()) chosen = s;
  }
  if (chosen->count("--seed")) ov.seed = seed;
  if (chosen->count("--patients")) ov.patients = patients;
  if (chosen->count("--epochs")) ov.epochs = epochs;
  if (chosen->count("--out")) ov.out = out_dir;

  try {
    std::ifstream is(config_path);
    if (!is) throw IoError("cannot read config " + config_path);
    std::stringstream ss;
    ss << is.rdbuf();
    Invocation inv{parse_config(ss.str(), ov), ss.str(), ov};
    const std::string name = chosen->get_name();
    if (name == "generate") cmd_generate(inv, out);
    if (name == "train") cmd_train(inv, out);
    if (name == "predict") cmd_predict(inv, out);
    if (name == "explain") cmd_explain(inv, out);
    if (name == "evaluate") print_verdicts(cmd_evaluate(inv, out), inv.config.acceptance, out);
    if (name == "reproduce") cmd_reproduce(inv, dry_run, out);
    return 0;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace densiscope
