#include "ctdet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ctdet/errors.hpp"

namespace ctdet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

nlohmann::json parse_value(const std::string& raw) {
  try {
    return nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    return raw;
  }
}

void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config: [" + where + "] must be a table of key = value");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("config: unknown key '" + k + "' in [" + where + "]");
  }
}

nlohmann::json sgd_json(std::size_t steps, std::size_t batch, const SgdConfig& s, bool flip) {
  nlohmann::json milestones = nlohmann::json::array();
  for (const auto& m : s.schedule) milestones.push_back(m.step);
  return {{"steps", steps},
          {"batch", batch},
          {"lr", s.learning_rate},
          {"momentum", s.momentum},
          {"weight_decay", s.weight_decay},
          {"milestones", milestones},
          {"gamma", s.schedule.empty() ? 0.1 : s.schedule.front().factor},
          {"flip", flip}};
}

void read_sgd(const nlohmann::json& j, const std::string& where, std::size_t& steps,
              std::size_t& batch, SgdConfig& s, bool& flip) {
  check_keys(j, where, {"steps", "batch", "lr", "momentum", "weight_decay", "milestones", "gamma", "flip"});
  if (j.contains("steps")) steps = j["steps"].get<std::size_t>();
  if (j.contains("batch")) batch = j["batch"].get<std::size_t>();
  if (j.contains("lr")) s.learning_rate = j["lr"].get<double>();
  if (j.contains("momentum")) s.momentum = j["momentum"].get<double>();
  if (j.contains("weight_decay")) s.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("flip")) flip = j["flip"].get<bool>();
  double gamma = s.schedule.empty() ? 0.1 : s.schedule.front().factor;
  if (j.contains("gamma")) gamma = j["gamma"].get<double>();
  std::vector<std::int64_t> steps_at;
  if (j.contains("milestones")) {
    steps_at = j["milestones"].get<std::vector<std::int64_t>>();
  } else {
    for (const auto& m : s.schedule) steps_at.push_back(m.step);
  }
  s.schedule.clear();
  for (auto st : steps_at) s.schedule.push_back({st, gamma});
  if (batch == 0) throw ConfigError("config: [" + where + "] batch must be positive");
  if (!(s.learning_rate > 0)) throw ConfigError("config: [" + where + "] lr must be positive");
}

}  // namespace

nlohmann::json parse_config_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
  }
  nlohmann::json out = nlohmann::json::object();
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": unclosed section");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      if (!out.contains(section)) out[section] = nlohmann::json::object();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside a [section]");
    out[section][key] = parse_value(value);
  }
  return out;
}

nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

const char* to_string(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

Precision parse_precision(const std::string& s) {
  if (s == "single") return Precision::kSingle;
  if (s == "double") return Precision::kDouble;
  throw ConfigError("unknown precision '" + s + "' (expected single or double)");
}

TransferConfig ExperimentConfig::transfer() const {
  TransferConfig t = TransferConfig::for_variant(variant, context);
  if (head_overrides.contains("backbone")) t.backbone = parse_head_mode(head_overrides["backbone"].get<std::string>());
  if (head_overrides.contains("bbox")) t.bbox = parse_head_mode(head_overrides["bbox"].get<std::string>());
  if (head_overrides.contains("bg")) t.bg = parse_head_mode(head_overrides["bg"].get<std::string>());
  if (head_overrides.contains("source_obj")) t.source_obj = parse_head_mode(head_overrides["source_obj"].get<std::string>());
  t.validate();
  return t;
}

EpisodeSpec ExperimentConfig::episode(const Benchmark& bench) const {
  return EpisodeSpec{shots, bench.target_ids(), seed, trial};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, "top level", {"run", "pretrain", "finetune", "transfer", "context", "eval", "incremental"});
    if (j.contains("run")) {
      const auto& r = j["run"];
      check_keys(r, "run", {"seed", "shots", "trial", "variant", "precision"});
      if (r.contains("seed")) c.seed = r["seed"].get<std::uint64_t>();
      if (r.contains("shots")) c.shots = r["shots"].get<std::size_t>();
      if (r.contains("trial")) c.trial = r["trial"].get<std::uint64_t>();
      if (r.contains("variant")) c.variant = parse_variant(r["variant"].get<std::string>());
      if (r.contains("precision")) c.precision = parse_precision(r["precision"].get<std::string>());
    }
    if (j.contains("pretrain")) {
      nlohmann::json pj = j["pretrain"];
      if (pj.is_object() && pj.contains("seed")) {
        c.pretrain.seed = pj["seed"].get<std::uint64_t>();
        pj.erase("seed");
      }
      read_sgd(pj, "pretrain", c.pretrain.steps, c.pretrain.batch, c.pretrain.sgd, c.pretrain.flip);
    }
    if (j.contains("finetune")) {
      read_sgd(j["finetune"], "finetune", c.finetune.steps, c.finetune.batch, c.finetune.sgd,
               c.finetune.flip);
    }
    if (j.contains("transfer")) {
      check_keys(j["transfer"], "transfer", {"backbone", "bbox", "bg", "source_obj"});
      for (const auto& [k, v] : j["transfer"].items()) {
        parse_head_mode(v.get<std::string>());
        c.head_overrides[k] = v;
      }
    }
    if (j.contains("context")) {
      check_keys(j["context"], "context", {"pool", "kernels", "embedding", "metric", "theta", "mode", "theta_init_std"});
      c.context = CtConfig::from_json(j["context"]);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      check_keys(e, "eval", {"test_scenes", "source_test_scenes", "iou", "interpolation", "score_floor"});
      if (e.contains("test_scenes")) c.test_scenes = e["test_scenes"].get<std::size_t>();
      if (e.contains("source_test_scenes")) c.source_test_scenes = e["source_test_scenes"].get<std::size_t>();
      if (e.contains("iou")) c.eval.iou_threshold = e["iou"].get<double>();
      if (e.contains("score_floor")) c.eval.score_floor = e["score_floor"].get<double>();
      if (e.contains("interpolation")) {
        const auto s = e["interpolation"].get<std::string>();
        if (s == "all_point") c.eval.interpolation = Interpolation::kAllPoint;
        else if (s == "eleven_point") c.eval.interpolation = Interpolation::kElevenPoint;
        else throw ConfigError("unknown interpolation '" + s + "' (expected all_point or eleven_point)");
      }
    }
    if (j.contains("incremental")) {
      check_keys(j["incremental"], "incremental", {"steps", "lr"});
      if (j["incremental"].contains("steps")) c.incremental_steps = j["incremental"]["steps"].get<std::size_t>();
      if (j["incremental"].contains("lr")) c.incremental_lr = j["incremental"]["lr"].get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: wrong value type: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.shots == 0) throw ConfigError("config: shots must be >= 1");
  c.transfer();  // surfaces conflicting head modes now
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  const TransferConfig t = transfer();
  nlohmann::json pre = sgd_json(pretrain.steps, pretrain.batch, pretrain.sgd, pretrain.flip);
  pre["seed"] = pretrain.seed;
  return {{"run",
           {{"seed", seed},
            {"shots", shots},
            {"trial", trial},
            {"variant", ctdet::to_string(variant)},
            {"precision", ctdet::to_string(precision)}}},
          {"pretrain", pre},
          {"finetune", sgd_json(finetune.steps, finetune.batch, finetune.sgd, finetune.flip)},
          {"transfer",
           {{"backbone", ctdet::to_string(t.backbone)},
            {"bbox", ctdet::to_string(t.bbox)},
            {"bg", ctdet::to_string(t.bg)},
            {"source_obj", ctdet::to_string(t.source_obj)}}},
          {"context", context.to_json()},
          {"eval",
           {{"test_scenes", test_scenes},
            {"source_test_scenes", source_test_scenes},
            {"iou", eval.iou_threshold},
            {"score_floor", eval.score_floor},
            {"interpolation", eval.interpolation == Interpolation::kAllPoint ? "all_point" : "eleven_point"}}},
          {"incremental", {{"steps", incremental_steps}, {"lr", incremental_lr}}}};
}

}  // namespace ctdet
