// Command-line surface: data generation, Algorithm 1 (adjuster learning),
// Algorithm 2 (boosted WSOD), baseline and masking-classifier training,
// and evaluation with report/PR-curve output.
//
// Exit codes: 0 success, 2 config error, 3 sequencing/stale-checkpoint,
// 4 training divergence, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lbba/config.hpp"
#include "lbba/dataset_io.hpp"
#include "lbba/em_trainer.hpp"
#include "lbba/experiment.hpp"
#include "lbba/masking.hpp"

namespace fs = std::filesystem;
using namespace lbba;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

ExperimentConfig load_cfg(const CommonArgs& args) {
  ExperimentConfig cfg = load_config_file(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out = true) {
  cmd->add_option("--config", args.config_path, "experiment config JSON")
      ->required();
  if (needs_out) {
    cmd->add_option("--out", args.out_dir, "experiment directory")->required();
  }
  cmd->add_option("--seed", args.seed, "override the experiment seed");
}

// Data generation shared by the training commands: reuse when present.
void ensure_data(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const fs::path data_dir = out_dir / "data";
  if (!split_exists(DatasetPaths::under(data_dir).target)) {
    std::printf("generating benchmark data under %s\n", data_dir.c_str());
    generate_benchmark_data(cfg, data_dir);
  }
}

WsodSpec wsod_spec_from(const ExperimentConfig& cfg, int num_classes) {
  WsodSpec spec;
  spec.num_classes = num_classes;
  spec.mining = cfg.mining;
  spec.bbr_weight = cfg.schedule.bbr_weight;
  return spec;
}

void require_hash(const std::string& artifact, const std::string& found,
                  const std::string& expected) {
  if (!found.empty() && found != expected) {
    throw SequencingError(artifact + " was produced under config hash " + found +
                          ", expected " + expected + " (mixing artifacts)");
  }
}

int cmd_gen_data(const CommonArgs& args) {
  const ExperimentConfig cfg = load_cfg(args);
  DirLock lock(args.out_dir);
  generate_benchmark_data(cfg, args.out_dir);
  std::printf("wrote aux/ aux_val/ target/ target_gt/ target_test/ under %s\n",
              args.out_dir.c_str());
  return 0;
}

int cmd_train_adjusters(const CommonArgs& args) {
  const ExperimentConfig cfg = load_cfg(args);
  DirLock lock(args.out_dir);
  const std::string hash = write_config_echo(cfg, args.out_dir);
  ensure_data(cfg, args.out_dir);
  const DatasetPaths paths = DatasetPaths::under(fs::path(args.out_dir) / "data");
  const DatasetSplit aux = load_split(paths.aux);
  const DatasetSplit aux_val = load_split(paths.aux_val);
  StageSchedule schedule = cfg.schedule;
  schedule.wsod.seed = derive_seed(cfg.seed, 0x77);
  schedule.adjuster.seed = derive_seed(cfg.seed, 0x78);
  LossCsv csv(fs::path(args.out_dir) / "aux_losses.csv");
  const CheckpointLedger ledger = learn_adjusters<float>(
      aux, aux_val, cfg.mining, schedule, args.out_dir, hash, csv.logger());
  std::printf("ledger with %zu adjuster checkpoints at %s/ledger.json\n",
              ledger.adjusters.size(), args.out_dir.c_str());
  for (std::size_t t = 0; t < ledger.adjusters.size(); ++t) {
    std::printf("  g_%zu  aux-val mIoU raw %.4f adjusted %.4f\n", t,
                ledger.aux_val_miou_raw[t], ledger.aux_val_miou_adjusted[t]);
  }
  return 0;
}

int run_boost(const CommonArgs& args, ScheduleMode mode,
              const std::string& mode_flag) {
  ExperimentConfig cfg = load_cfg(args);
  cfg.schedule.mode = mode;
  if (!mode_flag.empty()) cfg.schedule.mode = schedule_mode_from(mode_flag);
  DirLock lock(args.out_dir);
  const std::string hash = write_config_echo(cfg, args.out_dir);
  ensure_data(cfg, args.out_dir);
  const DatasetPaths paths = DatasetPaths::under(fs::path(args.out_dir) / "data");
  DatasetSplit target = load_split(paths.target);

  StageSchedule schedule = cfg.schedule;
  schedule.wsod.seed = derive_seed(cfg.seed, 0x77);
  schedule.adjuster.seed = derive_seed(cfg.seed, 0x78);

  CheckpointLedger ledger;
  if (schedule.mode == ScheduleMode::kBaseline) {
    ledger.config_hash = hash;
  } else {
    ledger = CheckpointLedger::load(fs::path(args.out_dir) / "ledger.json");
    require_hash("ledger.json", ledger.config_hash, hash);
  }
  LossCsv csv(fs::path(args.out_dir) / (schedule.mode == ScheduleMode::kBaseline
                                            ? "baseline_losses.csv"
                                            : "boost_losses.csv"));
  WsodNet<float> f = boost_wsod<float>(target, ledger, cfg.mining, schedule,
                                       args.out_dir, csv.logger());
  const fs::path ckpt = fs::path(args.out_dir) / "checkpoints" / "f_final";
  f.params().save(ckpt, "f_final", hash);
  std::printf("final detector checkpoint: %s\n", ckpt.c_str());
  return 0;
}

int cmd_train_mask(const CommonArgs& args) {
  const ExperimentConfig cfg = load_cfg(args);
  DirLock lock(args.out_dir);
  const std::string hash = write_config_echo(cfg, args.out_dir);
  ensure_data(cfg, args.out_dir);
  const DatasetPaths paths = DatasetPaths::under(fs::path(args.out_dir) / "data");
  DatasetSplit target = load_split(paths.target);
  TrainConfig mt = cfg.mask.train;
  mt.seed = derive_seed(cfg.seed, 0x79);
  MaskClassifier<float> h = train_mask_classifier<float>(target, mt);
  const fs::path ckpt = fs::path(args.out_dir) / "checkpoints" / "mask";
  h.params().save(ckpt, "mask", hash);
  std::printf("mask classifier checkpoint: %s\n", ckpt.c_str());
  return 0;
}

struct EvalArgs {
  std::string config_path;
  std::string model_dir;
  std::string dataset_dir;
  std::string corloc_dataset_dir;
  std::string report_path;
  std::string adjuster_dir;
  std::string mask_dir;
  std::string pr_csv_dir;
  std::optional<double> mask_tau;
  bool no_mask = false;
};

int cmd_eval(const EvalArgs& args) {
  ExperimentConfig cfg = load_config_file(args.config_path);
  const std::string hash = config_hash(cfg);

  const DatasetSplit ap_split = load_split(args.dataset_dir);
  if (!ap_split.has_private_gt()) {
    throw ModeError("eval: dataset at " + args.dataset_dir +
                    " carries no ground truth; point --dataset at a full-mode "
                    "split (e.g. target_gt/ or target_test/)");
  }
  const DatasetSplit corloc_split = args.corloc_dataset_dir.empty()
                                        ? ap_split
                                        : load_split(args.corloc_dataset_dir);

  std::string tag, ckpt_hash;
  ParamStore<float> store =
      ParamStore<float>::load(args.model_dir, &tag, &ckpt_hash);
  require_hash(args.model_dir, ckpt_hash, hash);
  WsodNet<float> f(wsod_spec_from(cfg, ap_split.num_classes()), std::move(store));

  std::optional<MaskClassifier<float>> mask;
  if (!args.no_mask && !args.mask_dir.empty()) {
    std::string mhash;
    ParamStore<float> mstore = ParamStore<float>::load(args.mask_dir, &tag, &mhash);
    require_hash(args.mask_dir, mhash, hash);
    mask.emplace(ap_split.num_classes(), std::move(mstore));
  }

  std::optional<Adjuster<float>> adjuster;
  if (!args.adjuster_dir.empty()) {
    std::string ahash;
    ParamStore<float> astore = ParamStore<float>::load(args.adjuster_dir, &tag, &ahash);
    require_hash(args.adjuster_dir, ahash, hash);
    AdjusterSpec gspec;
    gspec.num_aux_classes = static_cast<int>(cfg.dataset.aux_classes.size());
    gspec.one_class = cfg.schedule.one_class_adjuster;
    adjuster.emplace(gspec, std::move(astore), cfg.schedule.stages);
  }

  const double tau = args.mask_tau.value_or(cfg.mask.tau);
  std::vector<std::vector<PrPoint>> curves;
  EvalResult result = evaluate_model<float>(
      f, ap_split, corloc_split, cfg.eval, mask ? &*mask : nullptr, tau,
      adjuster ? &*adjuster : nullptr, cfg.mining,
      args.pr_csv_dir.empty() ? nullptr : &curves);
  result.config_hash = hash;
  result.seed = cfg.seed;
  write_report(result, args.report_path);
  if (!args.pr_csv_dir.empty()) {
    write_pr_csvs(curves, result.class_names, args.pr_csv_dir);
  }
  std::printf("report: %s\n", args.report_path.c_str());
  std::printf("  mAP %.4f  mean CorLoc %.4f  detections %d\n",
              result.map.value_or(0.0), result.mean_corloc.value_or(0.0),
              result.num_detections);
  return 0;
}

int cmd_run_experiment(const CommonArgs& args) {
  const ExperimentConfig cfg = load_cfg(args);
  DirLock lock(args.out_dir);
  const ExperimentOutcome outcome = run_experiment<float>(cfg, args.out_dir);
  std::printf("report: %s\n", outcome.report_path.c_str());
  std::printf("  mAP %.4f  mean CorLoc %.4f  mIoU raw %.4f adjusted %.4f\n",
              outcome.result.map.value_or(0.0),
              outcome.result.mean_corloc.value_or(0.0),
              outcome.result.miou_raw.value_or(0.0),
              outcome.result.miou_adjusted.value_or(0.0));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LBBA-boosted weakly supervised object detection"};
  app.require_subcommand(1);

  CommonArgs gen_args, adj_args, boost_args, base_args, mask_args, run_args;
  EvalArgs eval_args;
  std::string boost_mode;

  add_common(app.add_subcommand("gen-data",
                                "generate the synthetic benchmark datasets"),
             gen_args);
  add_common(app.add_subcommand(
                 "train-adjusters",
                 "Algorithm 1: learn the adjuster sequence g_0..g_T"),
             adj_args);
  CLI::App* boost = app.add_subcommand(
      "boost-wsod", "Algorithm 2: LBBA-boosted WSOD on the target split");
  add_common(boost, boost_args);
  boost->add_option("--mode", boost_mode,
                    "progressive (default) | last_only | baseline");
  add_common(app.add_subcommand("train-baseline",
                                "train the no-adjuster baseline detector"),
             base_args);
  add_common(app.add_subcommand("train-mask",
                                "train the multi-label masking classifier"),
             mask_args);
  add_common(app.add_subcommand("run-experiment",
                                "full pipeline: data, Algorithm 1+2, mask, eval"),
             run_args);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint and write report.json");
  ev->add_option("--config", eval_args.config_path, "experiment config JSON")->required();
  ev->add_option("--model", eval_args.model_dir, "WSOD checkpoint directory")->required();
  ev->add_option("--dataset", eval_args.dataset_dir,
                 "full-mode dataset directory for AP")->required();
  ev->add_option("--corloc-dataset", eval_args.corloc_dataset_dir,
                 "full-mode dataset for CorLoc (default: --dataset)");
  ev->add_option("--report", eval_args.report_path, "output report JSON path")->required();
  ev->add_option("--adjuster", eval_args.adjuster_dir,
                 "adjuster checkpoint for the mIoU diagnostic");
  ev->add_option("--mask", eval_args.mask_dir, "mask classifier checkpoint");
  ev->add_option("--mask-tau", eval_args.mask_tau, "masking threshold on raw logits");
  ev->add_flag("--no-mask", eval_args.no_mask, "disable score masking");
  ev->add_option("--pr-csv", eval_args.pr_csv_dir, "directory for PR-curve CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("gen-data")) return cmd_gen_data(gen_args);
    if (app.got_subcommand("train-adjusters")) return cmd_train_adjusters(adj_args);
    if (app.got_subcommand("boost-wsod")) {
      return run_boost(boost_args, ScheduleMode::kProgressive, boost_mode);
    }
    if (app.got_subcommand("train-baseline")) {
      return run_boost(base_args, ScheduleMode::kBaseline, "baseline");
    }
    if (app.got_subcommand("train-mask")) return cmd_train_mask(mask_args);
    if (app.got_subcommand("eval")) return cmd_eval(eval_args);
    if (app.got_subcommand("run-experiment")) return cmd_run_experiment(run_args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const SequencingError& e) {
    std::fprintf(stderr, "sequencing error: %s\n", e.what());
    return 3;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 4;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
