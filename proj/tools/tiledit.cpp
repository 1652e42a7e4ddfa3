#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tiledit/analysis.hpp"
#include "tiledit/bench.hpp"
#include "tiledit/checkpoint.hpp"
#include "tiledit/kd.hpp"
#include "tiledit/mlcd.hpp"
#include "tiledit/parallel.hpp"
#include "tiledit/pipeline.hpp"
#include "tiledit/search.hpp"
#include "tiledit/training.hpp"
#include "tiledit/video.hpp"

using namespace tiledit;
namespace fs = std::filesystem;

namespace {

// The selected subcommand's work; runs after parsing succeeds.
std::function<void()> action;

// Exit 1 with a diagnostic; distinct from CLI11's usage errors.
struct DomainFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Options of a subcommand as given (or defaulted), for the manifest.
std::string options_json(const CLI::App* app) {
  nlohmann::ordered_json j;
  j["command"] = app->get_parent() ? app->get_parent()->get_name() + " " + app->get_name() : app->get_name();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_name() == "--help") continue;
    const auto res = opt->count() > 0 ? opt->results() : std::vector<std::string>{opt->get_default_str()};
    j[opt->get_single_name()] = res.size() == 1 ? nlohmann::ordered_json(res[0]) : nlohmann::ordered_json(res);
  }
  return j.dump();
}

void manifest_for(const CLI::App* app, const std::string& output, std::uint64_t seed,
                  std::vector<std::string> artifacts = {}) {
  const fs::path out(output);
  if (artifacts.empty()) artifacts.push_back(out.filename().string());
  write_manifest(output + ".manifest.json", options_json(app), seed, artifacts);
}

void emit(const std::string& text, const std::string& output) {
  if (output.empty() || output == "-") {
    std::cout << text;
  } else {
    write_text_file(output, text);
  }
}

std::string join(const Assignment& a) {
  std::string s;
  for (std::size_t i = 0; i < a.size(); ++i) s += (i ? " " : "") + std::to_string(a[i]);
  return s;
}

SyntheticDataset dataset_for(const DitConfig& c, std::uint64_t seed) {
  return SyntheticDataset(c.frames, c.height, c.width, c.channels, c.patch, seed);
}

// flag > file > default
PipelineConfig resolve_config(const std::string& file, const std::vector<std::string>& overrides) {
  PipelineConfig c = file.empty() ? PipelineConfig{} : load_config(file);
  for (const auto& o : overrides) apply_override(c, o);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tiledit: tile-sparse attention, distillation and mask search on a toy video DiT"};
  app.require_subcommand(1);
  // ---- mask
  auto* mask = app.add_subcommand("mask", "Tile mask generation and sparsity")->require_subcommand(1);
  {
    auto* gen = mask->add_subcommand("gen", "Write a k:F-k mask file");
    static std::size_t frames = 0, k = 0, spf = 1;
    static bool full = false;
    static std::string out;
    gen->add_option("--frames", frames, "Latent frames F")->required()->check(CLI::PositiveNumber);
    gen->add_option("--k", k, "Global reference frames");
    gen->add_flag("--full", full, "Full attention instead of k:F-k");
    gen->add_option("--tokens-per-frame", spf, "Tokens per frame S")->required()->check(CLI::PositiveNumber);
    gen->add_option("-o,--output", out, "Mask file")->required();
    gen->callback([gen] {
      action = [gen] {
        if (!full && gen->count("--k") == 0) throw CLI::RequiredError("--k or --full");
        const TileMask m = full ? make_full_mask(frames, spf) : make_global_mask(frames, k, spf);
        save_mask_file(m, out);
        manifest_for(gen, out, 0);
        std::printf("%s kept=%zu sparsity=%.4f\n", m.label().c_str(), m.kept_count(), m.sparsity());
      };
    });

    auto* sp = mask->add_subcommand("sparsity", "Kept blocks and sparsity per k");
    static std::size_t sframes = 0, sk = 0;
    static std::string mask_file;
    sp->add_option("--frames", sframes, "Latent frames F")->check(CLI::PositiveNumber);
    sp->add_option("--k", sk, "Only this k");
    sp->add_option("--mask", mask_file, "Report a mask file instead")->check(CLI::ExistingFile);
    sp->callback([sp] {
      action = [sp] {
        std::printf("mask,k,kept,sparsity\n");
        if (!mask_file.empty()) {
          const TileMask m = load_mask_file(mask_file);
          std::printf("%s,%zu,%zu,%.6f\n", m.label().c_str(), m.k(), m.kept_count(), m.sparsity());
          return;
        }
        if (sframes == 0) throw CLI::RequiredError("--frames or --mask");
        const std::size_t lo = sp->count("--k") ? sk : 1, hi = sp->count("--k") ? sk : sframes;
        for (std::size_t kk = lo; kk <= hi; ++kk) {
          const TileMask m = make_global_mask(sframes, kk, 1);
          std::printf("%s,%zu,%zu,%.6f\n", m.label().c_str(), kk, m.kept_count(), m.sparsity());
        }
      };
    });
  }

  // ---- analyze
  auto* analyze = app.add_subcommand("analyze", "Attention tile statistics")->require_subcommand(1);
  {
    auto* st = analyze->add_subcommand("stats", "Diagonal ratio, locality and top-mass overlap per head");
    static std::string ckpt, out;
    static int t = -1;
    static std::vector<double> mass = {0.5, 0.9};
    static std::uint64_t data_seed = 1, a = 0, b = 1;
    st->add_option("--checkpoint", ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    st->add_option("--t", t, "Timestep (default T/2)");
    st->add_option("--mass", mass, "Top-mass levels p")->capture_default_str();
    st->add_option("--data-seed", data_seed, "Synthetic dataset seed")->capture_default_str();
    st->add_option("--sample-a", a, "First input index")->capture_default_str();
    st->add_option("--sample-b", b, "Second input index")->capture_default_str();
    st->add_option("-o,--output", out, "CSV output (stdout if omitted)");
    st->callback([st] {
      action = [st] {
        const Checkpoint c = load_checkpoint(ckpt);
        const auto data = dataset_for(c.model.config, data_seed);
        const int tt = t >= 0 ? t : c.schedule.train_steps() / 2;
        const auto rows = tile_statistics(c.model, data.tokens(a), data.tokens(b), tt, mass);
        emit(stats_csv(rows), out);
        if (!out.empty()) manifest_for(st, out, data_seed);
      };
    });
  }

  // ---- bench
  auto* bench = app.add_subcommand("bench", "Kernel timing")->require_subcommand(1);
  {
    auto* at = bench->add_subcommand("attn", "Time the block-skipping kernel across the mask menu");
    static std::size_t frames = 8, spf = 512;
    static std::vector<std::size_t> ks = {4, 3, 2, 1};
    static KernelBenchConfig cfg;
    static std::string out;
    at->add_option("--frames", frames)->capture_default_str()->check(CLI::PositiveNumber);
    at->add_option("--tokens-per-frame", spf)->capture_default_str()->check(CLI::PositiveNumber);
    at->add_option("--ks", ks, "Menu k values")->capture_default_str();
    at->add_option("--heads", cfg.heads)->capture_default_str()->check(CLI::PositiveNumber);
    at->add_option("--head-dim", cfg.head_dim)->capture_default_str()->check(CLI::PositiveNumber);
    at->add_option("--warmup", cfg.warmup)->capture_default_str();
    at->add_option("--runs", cfg.runs)->capture_default_str();
    at->add_option("--seed", cfg.seed)->capture_default_str();
    at->add_option("-o,--output", out, "CSV output (stdout if omitted)");
    at->callback([at] {
      action = [at] {
        const auto rows = speedup_report(MaskMenu::global(frames, spf, ks), cfg);
        emit(speedup_csv(rows), out);
        if (!out.empty()) manifest_for(at, out, cfg.seed);
      };
    });

    auto* rep = bench->add_subcommand("report", "Summarize a speedup CSV");
    static std::string input;
    static double noise = 0.10;
    rep->add_option("--input", input, "Speedup CSV from bench attn")->required()->check(CLI::ExistingFile);
    rep->add_option("--noise", noise, "Allowed relative drop between neighbours")->capture_default_str();
    rep->callback([] {
      action = [] {
        std::istringstream in(read_text_file(input));
        std::string line;
        std::getline(in, line);
        std::vector<std::pair<double, double>> pts;  // sparsity, speedup
        std::printf("%-8s %9s %11s %8s\n", "mask", "sparsity", "time_ms", "speedup");
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          std::vector<std::string> f;
          std::stringstream ss(line);
          for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
          if (f.size() != 6) throw DomainFailure("bad speedup row: " + line);
          pts.emplace_back(std::stod(f[3]), std::stod(f[5]));
          std::printf("%-8s %9s %11s %8s\n", f[0].c_str(), f[3].c_str(), f[4].c_str(), f[5].c_str());
        }
        bool monotone = true;
        for (std::size_t i = 1; i < pts.size(); ++i)
          if (pts[i].second < pts[i - 1].second * (1.0 - noise)) monotone = false;
        std::printf("monotone within %.0f%%: %s\n", noise * 100, monotone ? "yes" : "no");
      };
    });
  }

  // ---- train
  auto* train = app.add_subcommand("train", "Teacher training")->require_subcommand(1);
  {
    auto* toy = train->add_subcommand("toy", "Train the full-attention toy DiT on synthetic video");
    static std::string config, out, log;
    static std::vector<std::string> sets;
    static std::size_t steps = 0;
    static double lr = 0.0;
    static std::uint64_t seed = 0;
    toy->add_option("--config", config, "Pipeline config (model, schedule, teacher)")->check(CLI::ExistingFile);
    toy->add_option("--set", sets, "Config override key.path=value");
    toy->add_option("--steps", steps, "Training steps");
    toy->add_option("--lr", lr, "Learning rate");
    toy->add_option("--seed", seed, "Seed");
    toy->add_option("-o,--output", out, "Checkpoint")->required();
    toy->add_option("--log", log, "Training log CSV");
    toy->callback([toy] {
      action = [toy] {
        PipelineConfig c = resolve_config(config, sets);
        if (toy->count("--steps")) c.teacher.steps = steps;
        if (toy->count("--lr")) c.teacher.learning_rate = lr;
        if (toy->count("--seed")) c.seed = seed;
        c.validate();
        const auto sched = make_schedule(c);
        Rng init(c.seed * 16);
        ToyDiT m = make_toy_dit(c.model, init);
        TrainOptions opt{c.teacher.steps, c.teacher.batch_size, c.teacher.learning_rate, c.seed * 16 + 2};
        TrainingLog tl;
        train_toy(m, sched, dataset_for(c.model, c.seed * 16 + 1), opt, &tl);
        save_checkpoint(out, m, sched);
        if (!log.empty()) tl.save(log);
        std::vector<std::string> arts = {fs::path(out).filename().string()};
        for (const auto& p : checkpoint_mask_paths(out, m.config.layers)) arts.push_back(fs::path(p).filename().string());
        write_manifest(out + ".manifest.json", config_to_json(c), c.seed, arts);
        std::printf("final loss %.6g\n", tl.rows.empty() ? 0.0 : tl.rows.back().loss);
      };
    });
  }

  // ---- distill
  auto* distill = app.add_subcommand("distill", "Step and attention distillation")->require_subcommand(1);
  {
    auto* ml = distill->add_subcommand("mlcd", "Multi-step latent consistency distillation");
    static std::string teacher, out, log;
    static std::vector<int> segments = {4};
    static std::size_t steps = 400, batch = 4;
    static double lr = 3e-4;
    static std::uint64_t seed = 0, data_seed = 1;
    ml->add_option("--teacher", teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    ml->add_option("--segments", segments, "Segment schedule (nonincreasing)")->capture_default_str();
    ml->add_option("--steps", steps)->capture_default_str();
    ml->add_option("--batch", batch)->capture_default_str();
    ml->add_option("--lr", lr)->capture_default_str();
    ml->add_option("--seed", seed)->capture_default_str();
    ml->add_option("--data-seed", data_seed)->capture_default_str();
    ml->add_option("-o,--output", out, "Student checkpoint")->required();
    ml->add_option("--log", log, "Training log CSV");
    ml->callback([ml] {
      action = [ml] {
        const Checkpoint t = load_checkpoint(teacher);
        MlcdOptions opt{segments, steps, batch, lr, seed};
        TrainingLog tl;
        const ToyDiT s = mlcd_train(t.model, t.schedule, dataset_for(t.model.config, data_seed), opt, &tl);
        save_checkpoint(out, s, t.schedule);
        if (!log.empty()) tl.save(log);
        manifest_for(ml, out, seed);
      };
    });

    auto* kd = distill->add_subcommand("kd", "Layer-wise knowledge distillation into a sparse student");
    static std::string kteacher, assignment, kout, klog;
    static std::vector<std::size_t> ks = {4, 3, 2, 1};
    static KdOptions kopt;
    static std::uint64_t kdata_seed = 1;
    kd->add_option("--teacher", kteacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    kd->add_option("--assignment", assignment, "Assignment JSON from search")->required()->check(CLI::ExistingFile);
    kd->add_option("--ks", ks, "Menu k values the assignment indexes")->capture_default_str();
    kd->add_option("--lambda", kopt.lambda, "Diffusion-loss weight")->capture_default_str();
    kd->add_option("--steps", kopt.steps)->capture_default_str();
    kd->add_option("--batch", kopt.batch_size)->capture_default_str();
    kd->add_option("--lr", kopt.learning_rate)->capture_default_str();
    kd->add_option("--seed", kopt.seed)->capture_default_str();
    kd->add_option("--data-seed", kdata_seed)->capture_default_str();
    kd->add_option("-o,--output", kout, "Student checkpoint")->required();
    kd->add_option("--log", klog, "Training log CSV");
    kd->callback([kd] {
      action = [kd] {
        const Checkpoint t = load_checkpoint(kteacher);
        const auto& c = t.model.config;
        const MaskMenu menu = MaskMenu::global(c.frames, c.tokens_per_frame(), ks);
        const Assignment a = parse_assignment_json(read_text_file(assignment));
        if (a.size() != c.layers) throw DomainFailure("assignment length differs from the model's layer count");
        std::vector<TileMask> masks;
        for (std::size_t i : a) {
          if (i >= menu.size()) throw DomainFailure("assignment index outside the mask menu");
          masks.push_back(menu[i]);
        }
        TrainingLog tl;
        const ToyDiT s = kd_train(t.model, masks, t.schedule, dataset_for(c, kdata_seed), kopt, &tl);
        save_checkpoint(kout, s, t.schedule);
        if (!klog.empty()) tl.save(klog);
        manifest_for(kd, kout, kopt.seed);
      };
    });
  }

  // ---- search
  auto* search = app.add_subcommand("search", "Layer-wise mask search")->require_subcommand(1);
  {
    auto* prof = search->add_subcommand("profile", "Per-layer, per-mask final-hidden loss table");
    static std::string ckpt, losses_out, times_out;
    static std::vector<std::size_t> ks = {4, 3, 2, 1};
    static ProfileOptions popt;
    static std::uint64_t data_seed = 1;
    static bool measured = false;
    prof->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    prof->add_option("--ks", ks, "Menu k values")->capture_default_str();
    prof->add_option("--samples", popt.samples, "m")->capture_default_str()->check(CLI::PositiveNumber);
    prof->add_option("--seed", popt.seed)->capture_default_str();
    prof->add_option("--data-seed", data_seed)->capture_default_str();
    prof->add_option("--losses-out", losses_out, "Loss table CSV")->required();
    prof->add_option("--times-out", times_out, "Time table CSV");
    prof->add_flag("--measured", measured, "Time table from kernel timings instead of kept-block counts");
    prof->callback([prof] {
      action = [prof] {
        const Checkpoint t = load_checkpoint(ckpt);
        const auto& c = t.model.config;
        const MaskMenu menu = MaskMenu::global(c.frames, c.tokens_per_frame(), ks);
        const auto clean = dataset_for(c, data_seed).batch(0, popt.samples);
        write_text_file(losses_out, loss_table_csv(profile_layer_losses(t.model, t.schedule, menu, clean, popt)));
        std::vector<std::string> arts = {fs::path(losses_out).filename().string()};
        if (!times_out.empty()) {
          std::vector<double> times;
          if (measured) {
            KernelBenchConfig kcfg;
            kcfg.heads = c.heads;
            kcfg.head_dim = c.dim / c.heads;
            for (const auto& r : speedup_report(menu, kcfg)) times.push_back(r.time_ms);
          } else {
            times = analytic_times(menu);
          }
          write_text_file(times_out, time_table_csv(times, measured ? "measured" : "analytic"));
          arts.push_back(fs::path(times_out).filename().string());
        }
        manifest_for(prof, losses_out, popt.seed, arts);
      };
    });

    auto* gr = search->add_subcommand("greedy", "Threshold search over a loss table");
    static std::string glosses, gout;
    static double r = 0.05;
    gr->add_option("--losses", glosses, "Loss table CSV")->required()->check(CLI::ExistingFile);
    gr->add_option("--r", r, "Loss threshold")->capture_default_str();
    gr->add_option("-o,--output", gout, "Assignment JSON");
    gr->callback([gr] {
      action = [gr] {
        const Assignment a = greedy_search(parse_loss_table_csv(read_text_file(glosses)), r);
        std::printf("assignment: %s\n", join(a).c_str());
        if (!gout.empty()) {
          write_text_file(gout, assignment_json(a, "greedy", r));
          manifest_for(gr, gout, 0);
        }
      };
    });

    static std::string losses, times, out;
    static double budget = 0.0;
    static std::string objective = "additive";
    auto tables = [] {
      LossTimeTables t{parse_loss_table_csv(read_text_file(losses)), parse_time_table_csv(read_text_file(times)),
                       budget};
      t.validate();
      return t;
    };
    auto* dp = search->add_subcommand("dp", "Exact budgeted search");
    dp->add_option("--losses", losses, "Loss table CSV")->required()->check(CLI::ExistingFile);
    dp->add_option("--times", times, "Time table CSV")->required()->check(CLI::ExistingFile);
    dp->add_option("--budget", budget, "T_target")->required();
    dp->add_option("--objective", objective, "additive | minimax")
        ->capture_default_str()
        ->check(CLI::IsMember({"additive", "minimax"}));
    dp->add_option("-o,--output", out, "Assignment JSON");
    dp->callback([dp, tables] {
      action = [dp, tables] {
        const auto t = tables();
        const Objective o = objective_from_string(objective);
        const Assignment a = dp_search(t, o);
        std::printf("assignment: %s\nobjective: %.10g\ntime: %.10g\n", join(a).c_str(), objective_value(t.loss, a, o),
                    assignment_time(t.time, a));
        if (!out.empty()) {
          write_text_file(out, assignment_json(a, objective, budget));
          manifest_for(dp, out, 0);
        }
      };
    });

    auto* lg = search->add_subcommand("lagrangian", "Subgradient search on the Lagrangian dual");
    static LagrangianConfig lcfg;
    static std::string history;
    lg->add_option("--losses", losses, "Loss table CSV")->required()->check(CLI::ExistingFile);
    lg->add_option("--times", times, "Time table CSV")->required()->check(CLI::ExistingFile);
    lg->add_option("--budget", budget, "T_target")->required();
    lg->add_option("--lambda0", lcfg.lambda0, "Initial multiplier");
    lg->add_option("--alpha0", lcfg.alpha0, "Step size scale (default from the tables)");
    lg->add_option("--iterations", lcfg.iterations, "N")->capture_default_str();
    lg->add_option("-o,--output", out, "Assignment JSON");
    lg->add_option("--history", history, "Iteration history CSV");
    lg->callback([lg, tables] {
      action = [lg, tables] {
        const auto t = tables();
        LagrangianConfig cfg = default_lagrangian_config(t);
        if (lg->count("--lambda0")) cfg.lambda0 = lcfg.lambda0;
        if (lg->count("--alpha0")) cfg.alpha0 = lcfg.alpha0;
        cfg.iterations = lcfg.iterations;
        const auto res = lagrangian_search(t, cfg);
        std::printf("assignment: %s\nloss: %.10g\ntime: %.10g\nlambda: %.10g%s\n", join(res.assignment).c_str(),
                    objective_value(t.loss, res.assignment, Objective::additive),
                    assignment_time(t.time, res.assignment), res.lambda_final,
                    res.fallback ? "\nfallback: all-sparsest" : "");
        if (!history.empty()) {
          std::ostringstream h;
          h << "iteration,lambda,subgradient,loss,time\n";
          h.precision(17);
          for (std::size_t i = 0; i < res.history.size(); ++i) {
            const auto& s = res.history[i];
            h << i << ',' << s.lambda << ',' << s.subgradient << ',' << s.loss << ',' << s.time << '\n';
          }
          write_text_file(history, h.str());
        }
        if (!out.empty()) {
          write_text_file(out, assignment_json(res.assignment, "additive", budget));
          manifest_for(lg, out, 0);
        }
      };
    });
  }

  // ---- parallel
  auto* par = app.add_subcommand("parallel", "Head-partitioned attention")->require_subcommand(1);
  {
    auto* ver = par->add_subcommand("verify", "Compare parallel_mha with the serial path");
    static std::size_t heads = 8, workers = 4, frames = 8, spf = 4, k = 2, dim = 32;
    static std::uint64_t seed = 0;
    ver->add_option("--heads", heads)->capture_default_str()->check(CLI::PositiveNumber);
    ver->add_option("--workers", workers)->capture_default_str()->check(CLI::PositiveNumber);
    ver->add_option("--frames", frames)->capture_default_str()->check(CLI::PositiveNumber);
    ver->add_option("--tokens-per-frame", spf)->capture_default_str()->check(CLI::PositiveNumber);
    ver->add_option("--k", k, "Global frames (k = frames means full)")->capture_default_str();
    ver->add_option("--dim", dim)->capture_default_str()->check(CLI::PositiveNumber);
    ver->add_option("--seed", seed)->capture_default_str();
    ver->callback([] {
      action = [] {
        Rng rng(seed);
        const MhaParams p = make_mha_params(dim, heads, rng, 1.0 / std::sqrt(static_cast<double>(dim)));
        const TileMask m = k >= frames ? make_full_mask(frames, spf) : make_global_mask(frames, k, spf);
        const Tensor x = rng.normal_tensor({m.tokens(), dim});
        ParallelStats st;
        const Tensor y = parallel_mha(x, p, m.layout(), plan_layout(heads, workers), &st);
        const bool equal = y == sparse_mha(x, p, m);
        std::printf("mask %s, %zu heads on %zu workers\n", m.label().c_str(), heads, workers);
        for (std::size_t w = 0; w < st.per_worker.size(); ++w)
          std::printf("worker %zu: visited blocks %zu\n", w, st.per_worker[w].visited_blocks);
        std::printf("scatter bytes %zu, gather bytes %zu\nbitwise equal: %s\n", st.scatter_bytes, st.gather_bytes,
                    equal ? "yes" : "no");
        if (!equal) throw DomainFailure("parallel output differs from the serial path");
      };
    });
  }

  // ---- sample
  auto* sample = app.add_subcommand("sample", "DDIM sampling from a checkpoint");
  {
    static std::string ckpt, out;
    static int steps = 4;
    static std::uint64_t seed = 0;
    sample->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    sample->add_option("--steps", steps, "DDIM steps")->capture_default_str()->check(CLI::PositiveNumber);
    sample->add_option("--seed", seed)->capture_default_str();
    sample->add_option("-o,--output", out, "CSV frame,row,col,channel,value (stdout if omitted)");
    sample->callback([sample] {
      action = [sample] {
        const Checkpoint c = load_checkpoint(ckpt);
        Rng rng(seed);
        const VideoLatent v = ddim_sample(c.model, c.schedule, steps, rng);
        std::ostringstream s;
        s.precision(17);
        s << "frame,row,col,channel,value\n";
        for (std::size_t f = 0; f < v.frames; ++f)
          for (std::size_t y = 0; y < v.height; ++y)
            for (std::size_t x = 0; x < v.width; ++x)
              for (std::size_t ch = 0; ch < v.channels; ++ch)
                s << f << ',' << y << ',' << x << ',' << ch << ',' << v.at(f, y, x, ch) << '\n';
        emit(s.str(), out);
        if (!out.empty()) manifest_for(sample, out, seed);
      };
    });
  }

  // ---- pipeline
  auto* pipe = app.add_subcommand("pipeline", "Teacher, MLCD, search and KD end to end");
  {
    static std::string config, order, out;
    static std::vector<std::string> sets;
    static std::uint64_t seed = 0;
    pipe->add_option("--config", config, "Pipeline config JSON")->check(CLI::ExistingFile);
    pipe->add_option("--set", sets, "Config override key.path=value");
    pipe->add_option("--seed", seed, "Seed");
    pipe->add_option("--order", order, "mlcd-first | kd-first")->check(CLI::IsMember({"mlcd-first", "kd-first"}));
    pipe->add_option("--out", out, "Output directory");
    pipe->callback([pipe] {
      action = [pipe] {
        PipelineConfig c = resolve_config(config, sets);
        if (pipe->count("--seed")) c.seed = seed;
        if (pipe->count("--order")) c.order = stage_order_from_string(order);
        if (pipe->count("--out")) c.out_dir = out;
        const PipelineResult r = run_pipeline(c);
        std::printf("assignment: %s\n", join(r.assignment).c_str());
        std::printf("few-step sample MSE: base %.6g, mlcd %.6g (ratio %.3f)\n", r.metrics.base_sample_mse,
                    r.metrics.mlcd_sample_mse, r.metrics.mlcd_sample_mse / r.metrics.base_sample_mse);
        std::printf("held-out hidden MSE: before KD %.6g, after KD %.6g (ratio %.3f)\n", r.metrics.kd_hidden_before,
                    r.metrics.kd_hidden_after, r.metrics.kd_hidden_after / r.metrics.kd_hidden_before);
        std::printf("artifacts in %s\n", c.out_dir.c_str());
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    action();
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
