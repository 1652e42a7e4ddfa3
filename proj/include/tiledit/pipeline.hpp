#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tiledit/diffusion.hpp"
#include "tiledit/dit.hpp"
#include "tiledit/search.hpp"

namespace tiledit {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kConfigVersion = 1;

enum class StageOrder { mlcd_first, kd_first };

struct PipelineConfig {
  std::uint64_t seed = 0;
  StageOrder order = StageOrder::mlcd_first;
  std::string out_dir = "run";

  DitConfig model;
  std::string schedule = "scaled_linear";  // or "linear" with the betas below
  double beta_start = 1e-4;
  double beta_end = 0.02;

  struct {
    std::size_t steps = 600;
    std::size_t batch_size = 4;
    double learning_rate = 3e-3;
  } teacher;

  struct {
    std::vector<int> segment_schedule = {4};
    std::size_t steps = 400;
    std::size_t batch_size = 4;
    double learning_rate = 3e-4;
  } mlcd;

  struct {
    std::vector<std::size_t> ks = {4, 3, 2, 1};
    std::string solver = "greedy";  // greedy | dp | lagrangian
    double r = 0.05;
    double budget_fraction = 0.6;   // T_target = fraction · L · time(full)
    std::size_t samples = 4;        // m
    std::string objective = "additive";
    std::string times = "analytic";  // analytic | measured
    bool cumulative = false;
  } search;

  struct {
    double lambda = 100.0;
    std::size_t steps = 400;
    std::size_t batch_size = 4;
    double learning_rate = 1e-3;
  } kd;

  struct {
    std::size_t prompts = 16;
    int student_steps = 4;
    int reference_steps = 50;
    std::size_t heldout = 8;
  } eval;

  void validate() const;
};

std::string to_string(StageOrder o);
StageOrder stage_order_from_string(const std::string& s);

/// Canonical JSON text (sorted keys, 2-space indent) including "version".
std::string config_to_json(const PipelineConfig& c);
/// Missing keys keep their defaults; unknown keys and a wrong version are errors.
PipelineConfig config_from_json_text(const std::string& text);
PipelineConfig load_config(const std::string& path);
/// Applies "a.b.c=value" (value parsed as JSON, else taken as a string).
void apply_override(PipelineConfig& c, const std::string& assignment);

DiffusionSchedule make_schedule(const PipelineConfig& c);
MaskMenu make_menu(const PipelineConfig& c);

struct PipelineMetrics {
  /// Few-step samples vs the MLCD teacher's many-step samples, same noise.
  double base_sample_mse = 0.0;
  double mlcd_sample_mse = 0.0;
  /// Held-out final-hidden MSE to the KD teacher before and after KD.
  double kd_hidden_before = 0.0;
  double kd_hidden_after = 0.0;
};

struct PipelineResult {
  ToyDiT teacher;
  ToyDiT mlcd_student;
  ToyDiT kd_student;
  Assignment assignment;
  PipelineMetrics metrics;
  std::vector<std::string> artifacts;  // paths relative to out_dir
};

/// Mean over prompts of MSE(few-step sample of `model`, many-step sample of
/// `reference`) with shared initial noise per prompt.
double sample_mse(const ToyDiT& model, const ToyDiT& reference, const DiffusionSchedule& s,
                  std::size_t prompts, int steps, int reference_steps, std::uint64_t seed);

/// Teacher training, MLCD, layer-wise search and KD in the configured order,
/// writing checkpoints, logs, tables, metrics and a manifest into out_dir.
PipelineResult run_pipeline(const PipelineConfig& c);

std::string git_describe();
/// FNV-1a 64 of the text, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

/// Manifest JSON with config, config_hash, seed, git_describe, versions,
/// artifact_paths and a creation timestamp.
void write_manifest(const std::string& path, const std::string& config_json_text, std::uint64_t seed,
                    const std::vector<std::string>& artifact_paths);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace tiledit
