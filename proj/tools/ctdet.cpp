// Command-line entry point: pretraining, few-shot fine-tuning, evaluation,
// incremental runs, gradient checks, ablation sweeps and inspection dumps.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
// failure, 3 a check that ran but did not pass.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctdet/errors.hpp"
#include "ctdet/experiment.hpp"

namespace fs = std::filesystem;
using namespace ctdet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitNumerical = 2;
constexpr int kExitCheckFailed = 3;

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::size_t> shots;
  std::optional<std::uint64_t> trial;
  std::optional<std::string> precision;
  std::string out = "runs";
};

nlohmann::json flag_overrides(const RunFlags& f, nlohmann::json j) {
  if (!j.is_object()) j = nlohmann::json::object();
  auto& run = j["run"];
  if (!run.is_object()) run = nlohmann::json::object();
  if (f.seed) run["seed"] = *f.seed;
  if (f.variant) run["variant"] = *f.variant;
  if (f.shots) run["shots"] = *f.shots;
  if (f.trial) run["trial"] = *f.trial;
  if (f.precision) run["precision"] = *f.precision;
  return j;
}

ExperimentConfig resolve(const RunFlags& f) {
  nlohmann::json base = f.config.empty() ? nlohmann::json::object() : load_config_file(f.config);
  return ExperimentConfig::from_json(flag_overrides(f, base));
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

std::string run_tag(const ExperimentConfig& c) {
  return std::string(to_string(c.variant)) + "_n" + std::to_string(c.shots) + "_s" +
         std::to_string(c.seed) + "_t" + std::to_string(c.trial);
}

fs::path source_path(const RunFlags& f, const std::string& given) {
  return given.empty() ? fs::path(f.out) / "source.ckpt" : fs::path(given);
}

DetectorParams<float> require_source(const fs::path& path) {
  if (!fs::exists(path)) {
    throw FileError("source checkpoint not found: '" + path.string() + "' (run `ctdet pretrain` first)");
  }
  return load_source_detector(path);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_pretrain(const RunFlags& f) {
  const auto cfg = resolve(f);
  const fs::path dir(f.out);
  fs::create_directories(dir);
  const auto src = obtain_source_detector(cfg, dir / "source.ckpt", dir / "pretrain_log.jsonl");
  auto report = evaluate_source(src.params, cfg);
  report.metadata["from_cache"] = src.from_cache;
  write_json(dir / "source_eval.json", report.to_json());
  std::cout << render_table(report);
  std::cout << "source checkpoint: " << (dir / "source.ckpt").string()
            << (src.from_cache ? " (reused)" : "") << "\n";
  return kExitOk;
}

int cmd_finetune(const RunFlags& f, const std::string& source) {
  const auto cfg = resolve(f);
  const auto src = require_source(source_path(f, source));
  const fs::path dir = fs::path(f.out) / run_tag(cfg);
  fs::create_directories(dir);
  const auto run = run_fewshot(cfg, src, dir / "finetune_log.jsonl");
  save_fewshot(run.model, cfg, dir / "model.ckpt");
  write_json(dir / "eval.json", run.report.to_json());
  std::cout << render_table(run.report);
  std::cout << "model: " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunFlags& f, const std::string& checkpoint, const std::string& report_path) {
  auto loaded = load_fewshot(checkpoint);
  // flags given on the command line override the embedded config
  const auto cfg = ExperimentConfig::from_json(
      flag_overrides(f, f.config.empty() ? loaded.config.to_json() : load_config_file(f.config)));
  const Benchmark bench = default_benchmark();
  const Episode ep = sample_episode(bench, cfg.episode(bench), cfg.test_scenes);
  auto report = evaluate_fewshot(loaded.model, ep.test, cfg);
  report.metadata = {{"config", cfg.to_json()}, {"split", "target"}, {"checkpoint", checkpoint}};
  const fs::path out = report_path.empty() ? fs::path(f.out) / "eval.json" : fs::path(report_path);
  write_json(out, report.to_json());
  std::cout << render_table(report);
  return kExitOk;
}

int cmd_incremental(const RunFlags& f, const std::string& source) {
  const auto cfg = resolve(f);
  const auto src = require_source(source_path(f, source));
  const fs::path dir = fs::path(f.out) / ("incremental_n" + std::to_string(cfg.shots) + "_s" +
                                          std::to_string(cfg.seed) + "_t" + std::to_string(cfg.trial));
  fs::create_directories(dir);
  const auto report = run_incremental(cfg, src, dir / "incremental_log.jsonl");
  write_json(dir / "incremental.json", report);
  std::cout << "            S-mAP    T-mAP\n";
  for (const char* phase : {"before", "after"}) {
    std::printf("%-10s %7.2f  %7.2f\n", phase, 100.0 * report[phase]["source_map"].get<double>(),
                100.0 * report[phase]["target_map"].get<double>());
  }
  return kExitOk;
}

int cmd_gradcheck(const RunFlags& f, std::size_t draws) {
  const auto cfg = resolve(f);
  const auto rep = run_gradient_suite(cfg.seed, draws);
  nlohmann::json j = rep.to_json();
  j["config"] = cfg.to_json();
  write_json(fs::path(f.out) / "gradcheck.json", j);
  std::map<std::string, double> worst;
  for (const auto& e : rep.entries) {
    const std::string family = e.name.substr(0, e.name.find_first_of(".["));
    worst[family] = std::max(worst[family], e.max_rel_error);
  }
  for (const auto& [family, err] : worst)
    std::printf("%-16s max rel err %.3e  %s\n", family.c_str(), err, err <= rep.tolerance ? "pass" : "FAIL");
  std::printf("gradient suite: %zu draws, max %.3e, tolerance %.0e: %s\n", rep.draws, rep.max_rel_error,
              rep.tolerance, rep.passed() ? "pass" : "FAIL");
  return rep.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_ablate(const RunFlags& f, const std::string& source, const std::string& variants,
               const std::string& shot_list, std::size_t trials) {
  const auto base = resolve(f);
  const auto src = require_source(source_path(f, source));
  std::vector<Variant> vs;
  if (variants.empty()) {
    vs = table_variants();
  } else {
    for (const auto& v : split_list(variants)) vs.push_back(parse_variant(v));
  }
  std::vector<std::size_t> shots;
  for (const auto& s : split_list(shot_list)) {
    try {
      shots.push_back(static_cast<std::size_t>(std::stoul(s)));
    } catch (const std::exception&) {
      throw ConfigError("--shot-list: '" + s + "' is not a count");
    }
    if (shots.back() == 0) throw ConfigError("--shot-list: shots must be >= 1");
  }
  if (trials == 0) throw ConfigError("--trials must be >= 1");

  nlohmann::json rows = nlohmann::json::array();
  std::map<std::pair<std::size_t, std::string>, std::vector<double>> cells;
  for (std::size_t n : shots) {
    for (std::uint64_t t = 0; t < trials; ++t) {
      for (Variant v : vs) {
        nlohmann::json j = base.to_json();
        j["run"]["variant"] = to_string(v);
        j["run"]["shots"] = n;
        j["run"]["trial"] = t;
        const auto cfg = ExperimentConfig::from_json(j);
        const auto run = run_fewshot(cfg, src);
        rows.push_back({{"variant", to_string(v)}, {"shots", n}, {"trial", t}, {"seed", cfg.seed},
                        {"map", run.report.map}});
        cells[{n, to_string(v)}].push_back(run.report.map);
        std::printf("N=%-2zu trial %-2llu %-17s mAP %6.2f\n", n, static_cast<unsigned long long>(t),
                    to_string(v), 100.0 * run.report.map);
        std::fflush(stdout);
      }
    }
  }
  nlohmann::json means = nlohmann::json::array();
  std::printf("\n%-17s", "variant");
  for (std::size_t n : shots) std::printf("   N=%-3zu", n);
  std::printf("\n");
  for (Variant v : vs) {
    std::printf("%-17s", to_string(v));
    for (std::size_t n : shots) {
      const auto& xs = cells[{n, to_string(v)}];
      double m = 0;
      for (double x : xs) m += x;
      m /= static_cast<double>(xs.size());
      means.push_back({{"variant", to_string(v)}, {"shots", n}, {"mean_map", m}, {"trials", xs.size()}});
      std::printf("  %6.2f", 100.0 * m);
    }
    std::printf("\n");
  }
  write_json(fs::path(f.out) / "ablate.json",
             {{"config", base.to_json()}, {"runs", rows}, {"means", means}});
  return kExitOk;
}

int cmd_dump(const RunFlags& f, std::size_t count) {
  const auto cfg = resolve(f);
  const Benchmark bench = default_benchmark();
  const Episode ep = sample_episode(bench, cfg.episode(bench), count);
  const fs::path dir = fs::path(f.out) / "scenes";
  dump_scenes(ep.train, dir / "train", "train");
  dump_scenes(ep.test, dir / "test", "test");
  dump_scenes(source_test_scenes(bench, count), dir / "source", "source");
  write_json(dir / "config.json", cfg.to_json());
  std::cout << "wrote " << ep.train.size() << " train, " << ep.test.size() << " test and " << count
            << " source scenes under " << dir.string() << "\n";
  return kExitOk;
}

int cmd_affinity(const RunFlags& f, const std::string& checkpoint, std::size_t k) {
  auto loaded = load_fewshot(checkpoint);
  const auto cfg = ExperimentConfig::from_json(flag_overrides(f, loaded.config.to_json()));
  const Benchmark bench = default_benchmark();
  const Episode ep = sample_episode(bench, cfg.episode(bench), cfg.test_scenes);
  // target classes whose group members differ only by their context glyph
  std::vector<int> contextual;
  for (const auto& c : bench.target)
    if (c.confusion_group) contextual.push_back(c.id);
  const auto stats = affinity_concentration(cast_model<double>(loaded.model), ep.test, contextual, k);
  const nlohmann::json j{{"config", cfg.to_json()},
                         {"checkpoint", checkpoint},
                         {"classes", contextual},
                         {"k", stats.k},
                         {"positives", stats.positives},
                         {"mean_topk_mass", stats.mean_topk_mass},
                         {"examples", stats.examples}};
  write_json(fs::path(f.out) / "affinity.json", j);
  std::printf("mean top-%zu affinity mass over %zu positive priors: %.3f\n", stats.k, stats.positives,
              stats.mean_topk_mass);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detection with a context transformer on a synthetic benchmark"};
  app.require_subcommand(1);
  app.fallthrough();

  RunFlags f;
  app.add_option("--config", f.config, "Config file (key = value sections, or JSON)");
  app.add_option("--seed", f.seed, "Run seed");
  app.add_option("--variant", f.variant, "baseline, source_obj_only, transformer_only, full, unload_at_test, non_local");
  app.add_option("--shots", f.shots, "Training shots per target class");
  app.add_option("--trial", f.trial, "Trial index of the episode");
  app.add_option("--out", f.out, "Output directory")->capture_default_str();
  app.add_option("--precision", f.precision, "Evaluation arithmetic: single or double");

  std::string source, checkpoint, report_path, variants, shot_list = "5";
  std::size_t draws = 20, trials = 1, count = 8, k = 3;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain (or reuse) the source detector");
  auto* finetune = app.add_subcommand("finetune", "Fine-tune one variant on one episode");
  finetune->add_option("--source", source, "Source checkpoint (default <out>/source.ckpt)");
  auto* eval = app.add_subcommand("eval", "Evaluate a fine-tuned checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Few-shot model checkpoint")->required();
  eval->add_option("--report", report_path, "Report path (default <out>/eval.json)");
  auto* incremental = app.add_subcommand("incremental", "Incremental fine-tuning, source and target mAP");
  incremental->add_option("--source", source, "Source checkpoint (default <out>/source.ckpt)");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--draws", draws, "Random draws")->capture_default_str();
  auto* ablate = app.add_subcommand("ablate", "Sweep variants x shots x trials");
  ablate->add_option("--source", source, "Source checkpoint (default <out>/source.ckpt)");
  ablate->add_option("--variants", variants, "Comma list (default: the transfer table rows)");
  ablate->add_option("--shot-list", shot_list, "Comma list of shots")->capture_default_str();
  ablate->add_option("--trials", trials, "Trials per cell")->capture_default_str();
  auto* dump = app.add_subcommand("dump", "Write episode and source scenes as PNG plus annotations");
  dump->add_option("--count", count, "Test and source scenes")->capture_default_str();
  auto* affinity = app.add_subcommand("affinity", "Top-k affinity mass of positive priors");
  affinity->add_option("--checkpoint", checkpoint, "Few-shot model checkpoint")->required();
  affinity->add_option("-k", k, "Top k")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*pretrain) return cmd_pretrain(f);
    if (*finetune) return cmd_finetune(f, source);
    if (*eval) return cmd_eval(f, checkpoint, report_path);
    if (*incremental) return cmd_incremental(f, source);
    if (*gradcheck) return cmd_gradcheck(f, draws);
    if (*ablate) return cmd_ablate(f, source, variants, shot_list, trials);
    if (*dump) return cmd_dump(f, count);
    if (*affinity) return cmd_affinity(f, checkpoint, k);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {  // config, parameter, dimension, input errors
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const FileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const PlacementError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}
