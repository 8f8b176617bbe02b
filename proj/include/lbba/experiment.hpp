#pragma once

#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lbba/config.hpp"
#include "lbba/dataset_io.hpp"
#include "lbba/em_trainer.hpp"
#include "lbba/error.hpp"
#include "lbba/eval.hpp"
#include "lbba/masking.hpp"

#include <json.hpp>

namespace lbba {

// Worker-thread cap: min(LBBA_NUM_THREADS, hardware). Generation is the
// only parallel section; training is strictly sequential.
inline int worker_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("LBBA_NUM_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) hw = std::min(hw, cap);
  }
  return hw;
}

// Exclusive ownership of an experiment directory. A stale file from a
// crashed run must be removed by hand; the error says which file.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    if (fs::exists(path_)) {
      throw SequencingError("experiment directory is locked by " + path_.string() +
                            " (another writer, or a stale lock to remove)");
    }
    std::ofstream f(path_, std::ios::binary);
    f << "pid " << ::getpid() << "\n";
  }
  ~DirLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

// The five benchmark splits. `target` is saved weak (no boxes on disk at
// all); `target_gt` is its full-annotation twin, generated from the same
// seed, used only by metrics.
struct DatasetPaths {
  std::filesystem::path aux, aux_val, target, target_gt, target_test;

  static DatasetPaths under(const std::filesystem::path& root) {
    return DatasetPaths{root / "aux", root / "aux_val", root / "target",
                        root / "target_gt", root / "target_test"};
  }
};

inline void generate_benchmark_data(const ExperimentConfig& cfg,
                                    const std::filesystem::path& data_dir) {
  const SceneConfig scene = cfg.dataset.scene();
  const int threads = worker_threads();
  const DatasetPaths paths = DatasetPaths::under(data_dir);
  const nlohmann::json echo = config_to_json(cfg).at("dataset");

  const std::uint64_t base = cfg.dataset.seed;
  save_split(generate_dataset(scene, cfg.dataset.aux_classes,
                              cfg.dataset.aux_train_images, derive_seed(base, 1),
                              AnnotationMode::kFull, threads),
             paths.aux, echo);
  save_split(generate_dataset(scene, cfg.dataset.aux_classes,
                              cfg.dataset.aux_val_images, derive_seed(base, 2),
                              AnnotationMode::kFull, threads),
             paths.aux_val, echo);
  const DatasetSplit target_full = generate_dataset(
      scene, cfg.dataset.target_classes, cfg.dataset.target_train_images,
      derive_seed(base, 3), AnnotationMode::kFull, threads);
  save_split(target_full.weak_view(), paths.target, echo);
  save_split(target_full, paths.target_gt, echo);
  save_split(generate_dataset(scene, cfg.dataset.target_classes,
                              cfg.dataset.target_test_images, derive_seed(base, 4),
                              AnnotationMode::kFull, threads),
             paths.target_test, echo);
}

// Streams per-epoch means to stdout and appends to the loss CSV with the
// pinned column set.
class LossCsv {
 public:
  LossCsv() = default;
  explicit LossCsv(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    out_ << "epoch,stage,loss_total,loss_wsddn,loss_r,loss_rpn_cls,loss_rpn_det,"
            "loss_det,loss_bbr\n";
  }

  EpochLogger logger(bool echo_stdout = true) {
    return [this, echo_stdout](const std::string& phase, int stage, int epoch,
                               const WsodLosses& m) {
      if (out_.is_open()) {
        char line[256];
        std::snprintf(line, sizeof(line), "%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                      epoch, stage, m.total, m.wsddn, m.refine, m.rpn_cls,
                      m.rpn_det, m.det, m.bbr);
        out_ << line;
        out_.flush();
      }
      if (echo_stdout) {
        std::printf("[%s stage %d epoch %d] total %.4f wsddn %.4f r %.4f "
                    "rpn_cls %.4f rpn_det %.4f det %.4f bbr %.4f\n",
                    phase.c_str(), stage, epoch, m.total, m.wsddn, m.refine,
                    m.rpn_cls, m.rpn_det, m.det, m.bbr);
        std::fflush(stdout);
      }
    };
  }

 private:
  std::ofstream out_;
};

// Full evaluation pass: detections (optionally masked) and AP on
// `ap_split`, CorLoc on `corloc_split` (the training split, following the
// usual protocol), and the proposal-mIoU diagnostic when an adjuster is
// supplied. Splits must carry GT.
template <typename S>
EvalResult evaluate_model(WsodNet<S>& f, const DatasetSplit& ap_split,
                          const DatasetSplit& corloc_split,
                          const EvalConfig& eval_cfg,
                          const MaskClassifier<S>* mask, double tau,
                          const Adjuster<S>* adjuster,
                          const MiningConfig& mining,
                          std::vector<std::vector<PrPoint>>* pr_curves = nullptr) {
  const int C = ap_split.num_classes();
  EvalResult result;
  result.class_names = ap_split.class_names();
  result.num_images = ap_split.size();

  std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(C));
  std::vector<std::map<int, std::vector<Box>>> gts(static_cast<std::size_t>(C));
  std::vector<MiouInput> miou_raw_in, miou_adj_in;

  for (int i = 0; i < ap_split.size(); ++i) {
    for (const Instance& inst : ap_split.private_gt(i)) {
      gts[static_cast<std::size_t>(inst.class_id)][i].push_back(inst.box);
      ++result.num_gts;
    }
    const WsodPrediction pred =
        f.predict_raw(ap_split.pixels(i), ap_split.proposals(i).boxes);
    std::vector<ScoredBox> boxes = f.detections_from_prediction(
        pred, eval_cfg.nms, eval_cfg.score_thresh);
    if (mask) {
      boxes = apply_mask(boxes, mask->logits(ap_split.pixels(i)), tau);
    }
    for (const ScoredBox& sb : boxes) {
      dets[static_cast<std::size_t>(sb.class_id)].push_back(
          Detection{i, sb.score, sb.box});
      ++result.num_detections;
    }
    if (adjuster) {
      const auto selected = select_wsod_proposals(pred.proposals, pred.decoded,
                                                  pred.scores, mining);
      std::vector<Box> sel_boxes;
      for (const auto& sp : selected) sel_boxes.push_back(sp.proposal);
      MiouInput raw, adj;
      for (const Instance& inst : ap_split.private_gt(i)) {
        raw.gt_boxes.push_back(inst.box);
        raw.gt_classes.push_back(inst.class_id);
      }
      adj.gt_boxes = raw.gt_boxes;
      adj.gt_classes = raw.gt_classes;
      raw.boxes = sel_boxes;
      adj.boxes = adjuster->adjust(ap_split.pixels(i), sel_boxes).boxes;
      miou_raw_in.push_back(std::move(raw));
      miou_adj_in.push_back(std::move(adj));
    }
  }

  if (pr_curves) pr_curves->assign(static_cast<std::size_t>(C), {});
  for (int c = 0; c < C; ++c) {
    result.per_class_ap.push_back(average_precision(
        dets[static_cast<std::size_t>(c)], gts[static_cast<std::size_t>(c)], 0.5,
        pr_curves ? &(*pr_curves)[static_cast<std::size_t>(c)] : nullptr));
  }
  result.map = mean_of(result.per_class_ap);

  // CorLoc over the training split: top-scoring box per positive image
  std::vector<std::map<int, Box>> tops(static_cast<std::size_t>(C));
  std::vector<std::map<int, std::vector<Box>>> cgts(static_cast<std::size_t>(C));
  for (int i = 0; i < corloc_split.size(); ++i) {
    const WsodPrediction pred = f.predict_raw(corloc_split.pixels(i),
                                              corloc_split.proposals(i).boxes);
    for (int c = 0; c < C; ++c) {
      if (!corloc_split.labels(i)[static_cast<std::size_t>(c)]) continue;
      int best = 0;
      for (int r = 1; r < pred.scores.dim(0); ++r) {
        if (pred.scores.at(r, c) > pred.scores.at(best, c)) best = r;
      }
      tops[static_cast<std::size_t>(c)][i] =
          pred.decoded[static_cast<std::size_t>(best)];
      for (const Instance& inst : corloc_split.private_gt(i)) {
        if (inst.class_id == c) {
          cgts[static_cast<std::size_t>(c)][i].push_back(inst.box);
        }
      }
    }
  }
  for (int c = 0; c < C; ++c) {
    result.per_class_corloc.push_back(corloc(tops[static_cast<std::size_t>(c)],
                                             cgts[static_cast<std::size_t>(c)]));
  }
  result.mean_corloc = mean_of(result.per_class_corloc);

  if (adjuster) {
    result.miou_raw = proposal_miou(miou_raw_in, C);
    result.miou_adjusted = proposal_miou(miou_adj_in, C);
  }
  return result;
}

inline void write_report(const EvalResult& result, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  f << eval_result_to_json(result).dump(2) << "\n";
  if (!f) throw IoError("cannot write report " + path.string());
}

inline void write_pr_csvs(const std::vector<std::vector<PrPoint>>& curves,
                          const std::vector<std::string>& class_names,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t c = 0; c < curves.size(); ++c) {
    std::ofstream f(dir / ("pr_" + class_names[c] + ".csv"), std::ios::binary);
    f << "score,precision,recall\n";
    for (const PrPoint& p : curves[c]) {
      char line[96];
      std::snprintf(line, sizeof(line), "%.6f,%.6f,%.6f\n", p.score, p.precision,
                    p.recall);
      f << line;
    }
  }
}

// Writes the echoed config (with hash) into the experiment directory,
// rejecting a mismatch with an existing echo.
inline std::string write_config_echo(const ExperimentConfig& cfg,
                                     const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string hash = config_hash(cfg);
  const fs::path path = out_dir / "config.json";
  if (fs::exists(path)) {
    std::ifstream f(path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded() || j.value("config_hash", "") != hash) {
      throw SequencingError("existing " + path.string() +
                            " does not match this config (stale artifacts)");
    }
    return hash;
  }
  nlohmann::json echo = config_to_json(cfg);
  echo["config_hash"] = hash;
  std::ofstream f(path, std::ios::binary);
  f << echo.dump(2) << "\n";
  if (!f) throw IoError("cannot write " + path.string());
  return hash;
}

inline bool split_exists(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "manifest.json");
}

struct ExperimentOutcome {
  CheckpointLedger ledger;
  std::filesystem::path final_checkpoint;
  std::filesystem::path report_path;
  EvalResult result;
};

// End-to-end pipeline: data generation (reused when present), Algorithm 1,
// Algorithm 2 in the configured mode, masking classifier, evaluation,
// report. Completed stages resume from their checkpoints.
template <typename S>
ExperimentOutcome run_experiment(const ExperimentConfig& cfg,
                                 const std::filesystem::path& out_dir,
                                 bool echo_stdout = true) {
  namespace fs = std::filesystem;
  cfg.validate();
  const std::string hash = write_config_echo(cfg, out_dir);

  const fs::path data_dir = out_dir / "data";
  const DatasetPaths paths = DatasetPaths::under(data_dir);
  if (!split_exists(paths.target)) {
    generate_benchmark_data(cfg, data_dir);
  }
  DatasetSplit target = load_split(paths.target);

  StageSchedule schedule = cfg.schedule;
  schedule.wsod.seed = derive_seed(cfg.seed, 0x77);
  schedule.adjuster.seed = derive_seed(cfg.seed, 0x78);

  ExperimentOutcome outcome;
  LossCsv aux_csv(out_dir / "aux_losses.csv");
  LossCsv boost_csv(out_dir / "boost_losses.csv");

  if (cfg.schedule.mode == ScheduleMode::kBaseline) {
    // no adjusters needed; keep an empty ledger for bookkeeping
    outcome.ledger.config_hash = hash;
    outcome.ledger.stages = 0;
    outcome.ledger.save(out_dir / "ledger.json");
  } else if (fs::exists(out_dir / "ledger.json") &&
             CheckpointLedger::load(out_dir / "ledger.json").adjusters.size() ==
                 static_cast<std::size_t>(cfg.schedule.stages + 1)) {
    outcome.ledger = CheckpointLedger::load(out_dir / "ledger.json");
    if (outcome.ledger.config_hash != hash) {
      throw SequencingError("ledger.json does not match this config");
    }
  } else {
    const DatasetSplit aux = load_split(paths.aux);
    const DatasetSplit aux_val = load_split(paths.aux_val);
    outcome.ledger = learn_adjusters<S>(aux, aux_val, cfg.mining, schedule,
                                        out_dir, hash, aux_csv.logger(echo_stdout));
  }

  WsodNet<S> f = boost_wsod<S>(target, outcome.ledger, cfg.mining, schedule,
                               out_dir, boost_csv.logger(echo_stdout));
  outcome.final_checkpoint = out_dir / "checkpoints" / "f_final";
  f.params().save(outcome.final_checkpoint, "f_final", hash);

  std::optional<MaskClassifier<S>> mask;
  if (cfg.mask.enabled) {
    TrainConfig mt = cfg.mask.train;
    mt.seed = derive_seed(cfg.seed, 0x79);
    mask.emplace(train_mask_classifier<S>(target, mt));
    mask->params().save(out_dir / "checkpoints" / "mask", "mask", hash);
  }

  std::optional<Adjuster<S>> gT;
  if (cfg.schedule.mode != ScheduleMode::kBaseline) {
    AdjusterSpec gspec;
    gspec.num_aux_classes = static_cast<int>(outcome.ledger.aux_classes.size());
    gspec.one_class = outcome.ledger.one_class;
    gT.emplace(gspec,
               ParamStore<S>::load(out_dir / outcome.ledger.adjusters.back()),
               outcome.ledger.stages);
  }

  const DatasetSplit target_test = load_split(paths.target_test);
  const DatasetSplit target_gt = load_split(paths.target_gt);
  outcome.result = evaluate_model<S>(f, target_test, target_gt, cfg.eval,
                                     mask ? &*mask : nullptr, cfg.mask.tau,
                                     gT ? &*gT : nullptr, cfg.mining);
  outcome.result.config_hash = hash;
  outcome.result.seed = cfg.seed;
  outcome.report_path = out_dir / "report.json";
  write_report(outcome.result, outcome.report_path);
  return outcome;
}

}  // namespace lbba
