// protoseg: episodic few-shot segmentation on synthetic shapes.
// Subcommands: gen-data, train, eval, demo, ablate-par.
// Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "protoseg/config.hpp"
#include "protoseg/eval.hpp"
#include "protoseg/pgm.hpp"
#include "protoseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace protoseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct Overrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> iterations;
  std::optional<double> lr;
  std::optional<double> lambda_par;
  std::optional<double> alpha;
  std::optional<int> ways;
  std::optional<int> shots;
  std::optional<int> n_query;
  std::optional<std::uint64_t> seed;
  std::optional<int> episodes;
  std::optional<int> runs;
  std::optional<std::string> annotation;
  std::optional<std::uint64_t> eval_seed;
  bool probe_alignment = false;
};

void add_common_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "config file (sections of key = value)");
  cmd->add_option("--seed", ov.seed, "master seed");
}

void add_task_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--ways", ov.ways, "classes per episode (C)");
  cmd->add_option("--shots", ov.shots, "support pairs per class (K)");
  cmd->add_option("--n-query", ov.n_query, "query pairs per episode");
}

RunConfig make_config(const Overrides& ov) {
  RunConfig cfg = ov.config_path ? load_config(*ov.config_path) : RunConfig{};
  if (ov.iterations) cfg.train.iterations = *ov.iterations;
  if (ov.lr) cfg.train.lr = *ov.lr;
  if (ov.lambda_par) cfg.train.lambda_par = *ov.lambda_par;
  if (ov.alpha) cfg.train.alpha = *ov.alpha;
  if (ov.ways) {
    cfg.train.ways = *ov.ways;
    cfg.eval.ways = *ov.ways;
  }
  if (ov.shots) {
    cfg.train.shots = *ov.shots;
    cfg.eval.shots = *ov.shots;
  }
  if (ov.n_query) {
    cfg.train.n_query = *ov.n_query;
    cfg.eval.n_query = *ov.n_query;
  }
  if (ov.seed) cfg.train.seed = *ov.seed;
  if (ov.episodes) cfg.eval.episodes_per_run = *ov.episodes;
  if (ov.runs) cfg.eval.runs = *ov.runs;
  if (ov.eval_seed) cfg.eval.base_seed = *ov.eval_seed;
  if (ov.annotation) cfg.eval.annotation = detail::parse_annotation(*ov.annotation);
  if (ov.probe_alignment) cfg.probe_alignment = true;
  cfg.validate();
  return cfg;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
  write_text_file(out_dir + "/config_used.txt", config_echo(cfg));
}

// --- gen-data ---------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg, const std::string& out_dir, int episodes) {
  fs::create_directories(out_dir);
  const ClassSplit split = cfg.split();
  std::string manifest;
  manifest += "episodes = " + std::to_string(episodes) + "\n";
  manifest += "seed = " + std::to_string(cfg.train.seed) + "\n";
  manifest += "ways = " + std::to_string(cfg.train.ways) + "\n";
  manifest += "shots = " + std::to_string(cfg.train.shots) + "\n";
  manifest += "n_query = " + std::to_string(cfg.train.n_query) + "\n";
  manifest += "image_size = " + std::to_string(cfg.dataset.image_size) + "\n";
  for (int i = 0; i < episodes; ++i) {
    const std::uint64_t ep_seed =
        episode_seed_for_iteration(cfg.train.seed, static_cast<std::uint64_t>(i));
    const Episode ep = sample_episode(split.seen, cfg.train.ways, cfg.train.shots,
                                      cfg.train.n_query, ep_seed, cfg.dataset);
    char name[32];
    std::snprintf(name, sizeof(name), "episode_%05d", i);
    save_episode(ep, out_dir + "/" + name, ep_seed);
    manifest += std::string(name) + " seed = " + std::to_string(ep_seed) + "\n";
  }
  write_text_file(out_dir + "/manifest.txt", manifest);
  echo_config(cfg, out_dir);
  std::printf("wrote %d episodes to %s\n", episodes, out_dir.c_str());
  return kExitOk;
}

// --- train -------------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const std::string& out_dir, const std::string& resume_path,
              const std::string& data_dir) {
  fs::create_directories(out_dir);
  echo_config(cfg, out_dir);
  const ClassSplit split = cfg.split();

  Checkpoint resume;
  const Checkpoint* resume_ptr = nullptr;
  std::ios::openmode log_mode = std::ios::out;
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    resume_ptr = &resume;
    log_mode = std::ios::app;
  }

  std::ofstream loss_csv(out_dir + "/loss.csv", log_mode);
  if (!loss_csv) throw std::runtime_error("cannot open " + out_dir + "/loss.csv");

  TrainSinks sinks;
  sinks.loss_csv = &loss_csv;
  sinks.on_periodic_checkpoint = [&out_dir](const Checkpoint& ck) {
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint_iter%06llu.panc",
                  static_cast<unsigned long long>(ck.iteration));
    save_checkpoint(out_dir + "/" + name, ck);
  };
  sinks.on_progress = [&cfg](const LossRow& row) {
    if (row.iter % 100 == 0 || row.iter + 1 == cfg.train.iterations) {
      std::printf("iter=%llu lr=%g seg=%.4f par=%.4f\n",
                  static_cast<unsigned long long>(row.iter), row.lr, row.loss_seg, row.loss_par);
      std::fflush(stdout);
    }
  };

  EpisodeSource source = nullptr;
  if (!data_dir.empty()) {
    source = [data_dir](std::uint64_t iter, std::uint64_t) {
      char name[32];
      std::snprintf(name, sizeof(name), "episode_%05llu", static_cast<unsigned long long>(iter));
      const std::string dir = data_dir + "/" + name;
      if (!fs::exists(dir)) {
        throw std::runtime_error("train: dataset directory " + dir +
                                 " missing (generate at least `iterations` episodes)");
      }
      return load_episode(dir);
    };
  }

  const TrainResult result =
      train(cfg.encoder, cfg.train, cfg.dataset, split.seen, sinks, resume_ptr, source);
  save_checkpoint(out_dir + "/checkpoint.panc", result.checkpoint);
  std::printf("checkpoint: %s/checkpoint.panc\n", out_dir.c_str());
  return kExitOk;
}

// --- eval ---------------------------------------------------------------------

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  fs::create_directories(out_dir);
  echo_config(cfg, out_dir);
  const ClassSplit split = cfg.split();

  const MetricConfig metric{ck.train.alpha, ck.train.distance};
  EvalReport report = evaluate(panet_segmentor(ck.encoder, ck.params, metric), cfg.dataset,
                               split.unseen, cfg.eval);
  if (cfg.probe_alignment) {
    report.proto_align_distance = proto_alignment_distance(
        ck.encoder, ck.params, cfg.dataset, split.unseen, cfg.eval.ways, cfg.eval.shots,
        cfg.eval.n_query, cfg.probe_episodes, cfg.eval.base_seed);
  }
  if (!std::isfinite(report.mean_iou) || !std::isfinite(report.binary_iou)) {
    throw NumericError("eval: non-finite score");
  }
  const std::string text = report_text(report);
  std::fputs(text.c_str(), stdout);
  write_text_file(out_dir + "/report.txt", text);
  write_text_file(out_dir + "/report.kv", report_keyvalues(report));
  return kExitOk;
}

// --- demo ---------------------------------------------------------------------

int cmd_demo(const std::string& checkpoint_path, const std::string& episode_dir,
             const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const Episode ep = load_episode(episode_dir);
  fs::create_directories(out_dir);

  EpisodeInputs inputs = episode_inputs(ep, AnnotationKind::kDense, 0, 0);
  const MetricConfig metric{ck.train.alpha, ck.train.distance};
  const std::vector<LabelMask> preds = panet_segmentor(ck.encoder, ck.params, metric)(inputs);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::string path = out_dir + "/query_" + std::to_string(i) + "_pred.pgm";
    write_pgm(path, preds[i].w, preds[i].h, preds[i].labels);
    std::printf("wrote %s\n", path.c_str());
  }
  return kExitOk;
}

// --- ablate-par -----------------------------------------------------------------

int cmd_ablate_par(const RunConfig& base, const std::string& out_dir, int pairs) {
  fs::create_directories(out_dir);
  echo_config(base, out_dir);
  const ClassSplit split = base.split();

  std::string csv = "pair,seed,lambda,mean_iou,binary_iou,proto_align_distance\n";
  double sum_with = 0.0, sum_without = 0.0, dist_with = 0.0, dist_without = 0.0;
  for (int p = 0; p < pairs; ++p) {
    const std::uint64_t seed = derive_seed(base.train.seed, 0xab1a + static_cast<std::uint64_t>(p));
    for (const double lambda : {1.0, 0.0}) {
      RunConfig cfg = base;
      cfg.train.seed = seed;
      cfg.train.lambda_par = lambda;
      const TrainResult result = train(cfg.encoder, cfg.train, cfg.dataset, split.seen);

      const MetricConfig metric = cfg.train.metric();
      const EvalReport report = evaluate(
          panet_segmentor(cfg.encoder, result.checkpoint.params, metric), cfg.dataset,
          split.unseen, cfg.eval);
      const double dist = proto_alignment_distance(
          cfg.encoder, result.checkpoint.params, cfg.dataset, split.unseen, cfg.eval.ways,
          cfg.eval.shots, cfg.eval.n_query, cfg.probe_episodes, cfg.eval.base_seed);

      char row[160];
      std::snprintf(row, sizeof(row), "%d,%llu,%g,%.6f,%.6f,%.6f\n", p,
                    static_cast<unsigned long long>(seed), lambda, report.mean_iou,
                    report.binary_iou, dist);
      csv += row;
      std::printf("pair %d lambda=%g: mean_iou=%.4f binary_iou=%.4f align=%.4f\n", p, lambda,
                  report.mean_iou, report.binary_iou, dist);
      std::fflush(stdout);
      (lambda > 0.0 ? sum_with : sum_without) += report.mean_iou;
      (lambda > 0.0 ? dist_with : dist_without) += dist;
    }
  }
  write_text_file(out_dir + "/ablation.csv", csv);
  std::printf("\nmean over %d pairs:\n", pairs);
  std::printf("  with PAR    : mean_iou=%.4f align=%.4f\n", sum_with / pairs, dist_with / pairs);
  std::printf("  without PAR : mean_iou=%.4f align=%.4f\n", sum_without / pairs,
              dist_without / pairs);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"episodic few-shot semantic segmentation on synthetic shapes"};
  app.require_subcommand(1);

  Overrides ov;
  std::string out_dir = "out";
  std::string checkpoint_path, episode_dir, resume_path, data_dir;
  int gen_episodes = 10;
  int pairs = 3;

  CLI::App* gen = app.add_subcommand("gen-data", "render episodes to PGM directories");
  add_common_flags(gen, ov);
  add_task_flags(gen, ov);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--episodes", gen_episodes, "number of episodes to dump");

  CLI::App* tr = app.add_subcommand("train", "episodic training");
  add_common_flags(tr, ov);
  add_task_flags(tr, ov);
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--iterations", ov.iterations, "training iterations");
  tr->add_option("--lr", ov.lr, "initial learning rate");
  tr->add_option("--lambda-par", ov.lambda_par, "PAR loss weight (0 disables PAR)");
  tr->add_option("--alpha", ov.alpha, "softmax distance multiplier");
  tr->add_option("--resume", resume_path, "checkpoint to resume from");
  tr->add_option("--data-dir", data_dir, "train from a gen-data dump instead of the generator");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on unseen classes");
  add_common_flags(ev, ov);
  add_task_flags(ev, ov);
  ev->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  ev->add_option("--out", out_dir, "output directory")->required();
  ev->add_option("--episodes", ov.episodes, "episodes per run");
  ev->add_option("--runs", ov.runs, "independent runs to average");
  ev->add_option("--eval-seed", ov.eval_seed, "evaluation base seed");
  ev->add_option("--annotation", ov.annotation, "support annotation: dense|scribble|bbox");
  ev->add_flag("--probe-alignment", ov.probe_alignment,
               "also measure support/query prototype alignment distance");

  CLI::App* demo = app.add_subcommand("demo", "segment a dumped episode and write predictions");
  demo->add_option("--checkpoint", checkpoint_path, "trained checkpoint")->required();
  demo->add_option("--episode-dir", episode_dir, "episode directory from gen-data")->required();
  demo->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ab = app.add_subcommand("ablate-par", "matched PAR / no-PAR training comparison");
  add_common_flags(ab, ov);
  add_task_flags(ab, ov);
  ab->add_option("--out", out_dir, "output directory")->required();
  ab->add_option("--pairs", pairs, "matched seed pairs to run");
  ab->add_option("--iterations", ov.iterations, "training iterations per arm");
  ab->add_option("--episodes", ov.episodes, "eval episodes per run");
  ab->add_option("--runs", ov.runs, "eval runs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(make_config(ov), out_dir, gen_episodes);
    if (tr->parsed()) return cmd_train(make_config(ov), out_dir, resume_path, data_dir);
    if (ev->parsed()) return cmd_eval(make_config(ov), checkpoint_path, out_dir);
    if (demo->parsed()) return cmd_demo(checkpoint_path, episode_dir, out_dir);
    if (ab->parsed()) return cmd_ablate_par(make_config(ov), out_dir, pairs);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  }
  return kExitOk;
}
