#include "tiledit/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "config_json.hpp"
#include "json.hpp"
#include "tiledit/bench.hpp"
#include "tiledit/checkpoint.hpp"
#include "tiledit/kd.hpp"
#include "tiledit/mlcd.hpp"
#include "tiledit/training.hpp"
#include "tiledit/video.hpp"

#ifndef TILEDIT_GIT_DESCRIBE
#define TILEDIT_GIT_DESCRIBE "unknown"
#endif

namespace tiledit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json to_json(const PipelineConfig& c) {
  json j;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["order"] = to_string(c.order);
  j["out_dir"] = c.out_dir;
  j["model"] = config_json(c.model);
  j["schedule"] = {{"kind", c.schedule}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
  j["teacher"] = {{"steps", c.teacher.steps},
                  {"batch_size", c.teacher.batch_size},
                  {"learning_rate", c.teacher.learning_rate}};
  j["mlcd"] = {{"segment_schedule", c.mlcd.segment_schedule},
               {"steps", c.mlcd.steps},
               {"batch_size", c.mlcd.batch_size},
               {"learning_rate", c.mlcd.learning_rate}};
  j["search"] = {{"ks", c.search.ks},
                 {"solver", c.search.solver},
                 {"r", c.search.r},
                 {"budget_fraction", c.search.budget_fraction},
                 {"samples", c.search.samples},
                 {"objective", c.search.objective},
                 {"times", c.search.times},
                 {"cumulative", c.search.cumulative}};
  j["kd"] = {{"lambda", c.kd.lambda},
             {"steps", c.kd.steps},
             {"batch_size", c.kd.batch_size},
             {"learning_rate", c.kd.learning_rate}};
  j["eval"] = {{"prompts", c.eval.prompts},
               {"student_steps", c.eval.student_steps},
               {"reference_steps", c.eval.reference_steps},
               {"heldout", c.eval.heldout}};
  return j;
}

PipelineConfig from_json(const json& j) {
  PipelineConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.order = stage_order_from_string(j.at("order").get<std::string>());
  c.out_dir = j.at("out_dir").get<std::string>();
  c.model = config_from_json(j.at("model"));
  const json& s = j.at("schedule");
  c.schedule = s.at("kind").get<std::string>();
  c.beta_start = s.at("beta_start").get<double>();
  c.beta_end = s.at("beta_end").get<double>();
  const json& t = j.at("teacher");
  c.teacher.steps = t.at("steps").get<std::size_t>();
  c.teacher.batch_size = t.at("batch_size").get<std::size_t>();
  c.teacher.learning_rate = t.at("learning_rate").get<double>();
  const json& m = j.at("mlcd");
  c.mlcd.segment_schedule = m.at("segment_schedule").get<std::vector<int>>();
  c.mlcd.steps = m.at("steps").get<std::size_t>();
  c.mlcd.batch_size = m.at("batch_size").get<std::size_t>();
  c.mlcd.learning_rate = m.at("learning_rate").get<double>();
  const json& q = j.at("search");
  c.search.ks = q.at("ks").get<std::vector<std::size_t>>();
  c.search.solver = q.at("solver").get<std::string>();
  c.search.r = q.at("r").get<double>();
  c.search.budget_fraction = q.at("budget_fraction").get<double>();
  c.search.samples = q.at("samples").get<std::size_t>();
  c.search.objective = q.at("objective").get<std::string>();
  c.search.times = q.at("times").get<std::string>();
  c.search.cumulative = q.at("cumulative").get<bool>();
  const json& k = j.at("kd");
  c.kd.lambda = k.at("lambda").get<double>();
  c.kd.steps = k.at("steps").get<std::size_t>();
  c.kd.batch_size = k.at("batch_size").get<std::size_t>();
  c.kd.learning_rate = k.at("learning_rate").get<double>();
  const json& e = j.at("eval");
  c.eval.prompts = e.at("prompts").get<std::size_t>();
  c.eval.student_steps = e.at("student_steps").get<int>();
  c.eval.reference_steps = e.at("reference_steps").get<int>();
  c.eval.heldout = e.at("heldout").get<std::size_t>();
  return c;
}

// Every key of `patch` must exist in `base`; objects are checked recursively.
void check_known_keys(const json& base, const json& patch, const std::string& prefix) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    if (base[it.key()].is_object()) {
      if (!it->is_object()) throw ConfigError("config key '" + key + "' must be an object");
      check_known_keys(base[it.key()], *it, key);
    }
  }
}

PipelineConfig merged(const PipelineConfig& base, const json& patch) {
  json j = to_json(base);
  check_known_keys(j, patch, "");
  j.merge_patch(patch);
  try {
    PipelineConfig c = from_json(j);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

// Offsets keep the per-stage random streams apart.
enum SeedStream : std::uint64_t { kInit = 0, kData = 1, kTeacher = 2, kMlcd = 3, kSearch = 4, kKd = 5, kEval = 6, kHeldout = 7 };

std::uint64_t stream(const PipelineConfig& c, SeedStream s) { return c.seed * 16 + s; }

// Held-out samples live far past anything the training loops read.
constexpr std::uint64_t kHeldoutOffset = std::uint64_t{1} << 40;

std::string metrics_json(const PipelineMetrics& m) {
  nlohmann::ordered_json j;
  j["base_sample_mse"] = m.base_sample_mse;
  j["mlcd_sample_mse"] = m.mlcd_sample_mse;
  j["mlcd_sample_ratio"] = m.mlcd_sample_mse / m.base_sample_mse;
  j["kd_hidden_before"] = m.kd_hidden_before;
  j["kd_hidden_after"] = m.kd_hidden_after;
  j["kd_hidden_ratio"] = m.kd_hidden_after / m.kd_hidden_before;
  return j.dump(2) + "\n";
}

}  // namespace

void PipelineConfig::validate() const {
  model.validate();
  if (schedule != "scaled_linear" && schedule != "linear")
    throw ConfigError("schedule.kind must be scaled_linear or linear");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  if (teacher.batch_size == 0 || mlcd.batch_size == 0 || kd.batch_size == 0)
    throw ConfigError("batch sizes must be positive");
  if (!(teacher.learning_rate > 0.0 && mlcd.learning_rate > 0.0 && kd.learning_rate > 0.0))
    throw ConfigError("learning rates must be positive");
  if (mlcd.segment_schedule.empty()) throw ConfigError("mlcd.segment_schedule is empty");
  if (search.ks.empty()) throw ConfigError("search.ks is empty");
  for (std::size_t k : search.ks)
    if (k < 1 || k > model.frames) throw ConfigError("search.ks entries must lie in [1, frames]");
  if (search.solver != "greedy" && search.solver != "dp" && search.solver != "lagrangian")
    throw ConfigError("search.solver must be greedy, dp or lagrangian");
  if (!(search.r > 0.0)) throw ConfigError("search.r must be positive");
  if (!(search.budget_fraction > 0.0)) throw ConfigError("search.budget_fraction must be positive");
  if (search.samples < 1) throw ConfigError("search.samples must be at least 1");
  objective_from_string(search.objective);
  if (search.times != "analytic" && search.times != "measured")
    throw ConfigError("search.times must be analytic or measured");
  if (!(kd.lambda >= 0.0)) throw ConfigError("kd.lambda must be nonnegative");
  if (eval.prompts == 0 || eval.heldout == 0) throw ConfigError("eval counts must be positive");
  if (eval.student_steps < 1 || eval.reference_steps < 1) throw ConfigError("eval step counts must be positive");
}

std::string to_string(StageOrder o) { return o == StageOrder::mlcd_first ? "mlcd-first" : "kd-first"; }

StageOrder stage_order_from_string(const std::string& s) {
  if (s == "mlcd-first") return StageOrder::mlcd_first;
  if (s == "kd-first") return StageOrder::kd_first;
  throw ConfigError("order must be mlcd-first or kd-first, got '" + s + "'");
}

std::string config_to_json(const PipelineConfig& c) { return to_json(c).dump(2) + "\n"; }

PipelineConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (!j.contains("version")) throw ConfigError("config is missing \"version\"");
  if (j["version"] != kConfigVersion)
    throw ConfigError("unsupported config version " + j["version"].dump());
  return merged(PipelineConfig{}, j);
}

PipelineConfig load_config(const std::string& path) { return config_from_json_text(read_text_file(path)); }

void apply_override(PipelineConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  c = merged(c, patch);
}

DiffusionSchedule make_schedule(const PipelineConfig& c) {
  if (c.schedule == "linear") return DiffusionSchedule::linear(c.model.train_steps, c.beta_start, c.beta_end);
  return DiffusionSchedule::scaled_linear(c.model.train_steps);
}

MaskMenu make_menu(const PipelineConfig& c) {
  return MaskMenu::global(c.model.frames, c.model.tokens_per_frame(), c.search.ks);
}

double sample_mse(const ToyDiT& model, const ToyDiT& reference, const DiffusionSchedule& s,
                  std::size_t prompts, int steps, int reference_steps, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t p = 0; p < prompts; ++p) {
    Rng rng(seed + p);
    const Tensor z = rng.normal_tensor({model.config.tokens(), model.config.in_dim()});
    const Tensor ref = ddim_sample_from(predictor(reference), s, z, reference_steps);
    const Tensor got = ddim_sample_from(predictor(model), s, z, steps);
    total += mean_squared_error(got, ref);
  }
  return total / static_cast<double>(prompts);
}

PipelineResult run_pipeline(const PipelineConfig& c) {
  c.validate();
  fs::create_directories(c.out_dir);
  const auto path = [&](const std::string& name) { return (fs::path(c.out_dir) / name).string(); };
  PipelineResult res;
  const DiffusionSchedule sched = make_schedule(c);
  const SyntheticDataset data(c.model.frames, c.model.height, c.model.width, c.model.channels, c.model.patch,
                              stream(c, kData));
  const auto heldout = data.batch(kHeldoutOffset, c.eval.heldout);
  const auto emit = [&](const std::string& name, const std::string& text) {
    write_text_file(path(name), text);
    res.artifacts.push_back(name);
  };
  const auto save = [&](const std::string& name, const ToyDiT& m) {
    save_checkpoint(path(name), m, sched);
    res.artifacts.push_back(name);
    for (const auto& mp : checkpoint_mask_paths(name, m.config.layers)) res.artifacts.push_back(mp);
  };

  // Stage 0: full-attention teacher.
  Rng init(stream(c, kInit));
  res.teacher = make_toy_dit(c.model, init);
  {
    TrainOptions opt;
    opt.steps = c.teacher.steps;
    opt.batch_size = c.teacher.batch_size;
    opt.learning_rate = c.teacher.learning_rate;
    opt.seed = stream(c, kTeacher);
    TrainingLog log;
    train_toy(res.teacher, sched, data, opt, &log);
    save("teacher.ckpt", res.teacher);
    emit("teacher_log.csv", log.to_csv());
  }

  const auto run_mlcd = [&](const ToyDiT& from) {
    MlcdOptions opt;
    opt.segment_schedule = c.mlcd.segment_schedule;
    opt.steps = c.mlcd.steps;
    opt.batch_size = c.mlcd.batch_size;
    opt.learning_rate = c.mlcd.learning_rate;
    opt.seed = stream(c, kMlcd);
    TrainingLog log;
    res.mlcd_student = mlcd_train(from, sched, data, opt, &log);
    save("mlcd.ckpt", res.mlcd_student);
    emit("mlcd_log.csv", log.to_csv());
    res.metrics.base_sample_mse = sample_mse(from, from, sched, c.eval.prompts, c.eval.student_steps,
                                             c.eval.reference_steps, stream(c, kEval));
    res.metrics.mlcd_sample_mse = sample_mse(res.mlcd_student, from, sched, c.eval.prompts,
                                             c.eval.student_steps, c.eval.reference_steps, stream(c, kEval));
  };

  const MaskMenu menu = make_menu(c);
  const auto run_search = [&](const ToyDiT& m) {
    ProfileOptions popt;
    popt.samples = c.search.samples;
    popt.seed = stream(c, kSearch);
    const auto clean = data.batch(kHeldoutOffset * 2, c.search.samples);
    const LossTable loss = profile_layer_losses(m, sched, menu, clean, popt);
    std::vector<double> times;
    if (c.search.times == "measured") {
      KernelBenchConfig kcfg;
      kcfg.heads = c.model.heads;
      kcfg.head_dim = c.model.dim / c.model.heads;
      kcfg.seed = popt.seed;
      for (const auto& row : speedup_report(menu, kcfg)) times.push_back(row.time_ms);
    } else {
      times = analytic_times(menu);
    }
    emit("losses.csv", loss_table_csv(loss));
    emit("times.csv", time_table_csv(times, c.search.times));
    LossTimeTables t{loss, times, c.search.budget_fraction * static_cast<double>(c.model.layers) * times[0]};
    std::string objective = c.search.objective;
    double target = t.target;
    if (c.search.solver == "greedy") {
      res.assignment = c.search.cumulative
                           ? greedy_search_model(m, sched, menu, clean, popt, c.search.r, true)
                           : greedy_search(loss, c.search.r);
      objective = "greedy";
      target = c.search.r;
    } else if (c.search.solver == "dp") {
      res.assignment = dp_search(t, objective_from_string(c.search.objective));
    } else {
      res.assignment = lagrangian_search(t, default_lagrangian_config(t)).assignment;
      objective = "additive";
    }
    emit("assignment.json", assignment_json(res.assignment, objective, target));
  };

  const auto run_kd = [&](const ToyDiT& teacher) {
    std::vector<TileMask> masks;
    for (std::size_t i : res.assignment) masks.push_back(menu[i]);
    KdOptions opt;
    opt.lambda = c.kd.lambda;
    opt.steps = c.kd.steps;
    opt.batch_size = c.kd.batch_size;
    opt.learning_rate = c.kd.learning_rate;
    opt.seed = stream(c, kKd);
    ToyDiT sparse_copy = teacher;
    sparse_copy.set_masks(masks);
    Rng before(stream(c, kHeldout));
    res.metrics.kd_hidden_before = final_hidden_mse(sparse_copy, teacher, sched, heldout, before);
    TrainingLog log;
    res.kd_student = kd_train(teacher, masks, sched, data, opt, &log);
    save("kd.ckpt", res.kd_student);
    emit("kd_log.csv", log.to_csv());
    Rng after(stream(c, kHeldout));
    res.metrics.kd_hidden_after = final_hidden_mse(res.kd_student, teacher, sched, heldout, after);
  };

  if (c.order == StageOrder::mlcd_first) {
    run_mlcd(res.teacher);
    run_search(res.mlcd_student);
    run_kd(res.mlcd_student);
  } else {
    run_search(res.teacher);
    run_kd(res.teacher);
    run_mlcd(res.kd_student);
  }

  emit("metrics.json", metrics_json(res.metrics));
  const std::string cfg_text = config_to_json(c);
  emit("config.json", cfg_text);
  write_manifest(path("manifest.json"), cfg_text, c.seed, res.artifacts);
  return res;
}

std::string git_describe() { return TILEDIT_GIT_DESCRIBE; }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const std::string& path, const std::string& config_json_text, std::uint64_t seed,
                    const std::vector<std::string>& artifact_paths) {
  nlohmann::ordered_json j;
  j["config"] = json::parse(config_json_text);
  j["config_hash"] = fnv1a_hex(config_json_text);
  j["seed"] = seed;
  j["git_describe"] = git_describe();
  j["versions"] = {{"config", kConfigVersion}, {"checkpoint", kCheckpointVersion}};
  j["artifact_paths"] = artifact_paths;
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  j["created_utc"] = stamp;
  write_text_file(path, j.dump(2) + "\n");
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace tiledit
