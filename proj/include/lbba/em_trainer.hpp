#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lbba/adjuster.hpp"
#include "lbba/dataset_io.hpp"
#include "lbba/error.hpp"
#include "lbba/eval.hpp"
#include "lbba/masking.hpp"
#include "lbba/mining.hpp"
#include "lbba/optimizer.hpp"
#include "lbba/rng.hpp"
#include "lbba/synthdata.hpp"
#include "lbba/wsod_net.hpp"

#include <json.hpp>

namespace lbba {

enum class ScheduleMode { kProgressive, kLastOnly, kBaseline };

inline std::string schedule_mode_name(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::kProgressive: return "progressive";
    case ScheduleMode::kLastOnly: return "last_only";
    case ScheduleMode::kBaseline: return "baseline";
  }
  return "?";
}

inline ScheduleMode schedule_mode_from(const std::string& s) {
  if (s == "progressive") return ScheduleMode::kProgressive;
  if (s == "last_only") return ScheduleMode::kLastOnly;
  if (s == "baseline") return ScheduleMode::kBaseline;
  throw ConfigError("unknown schedule mode: " + s);
}

struct StageSchedule {
  int stages = 3;  // T
  ScheduleMode mode = ScheduleMode::kProgressive;
  TrainConfig wsod;
  TrainConfig adjuster;
  bool fine_tune = false;            // continue f across boosted stages
  bool fixed_proposal_source = false;  // ablation: E-step on P_mil only
  bool one_class_adjuster = false;
  double pmil_mix_ratio = 0.25;
  double bbr_weight = 1.0;

  void validate() const {
    if (stages < 0) throw ConfigError("schedule: stages must be >= 0");
    if (mode == ScheduleMode::kLastOnly && stages < 1) {
      throw ConfigError("schedule: last_only requires stages >= 1");
    }
    wsod.validate();
    adjuster.validate();
  }
};

// Per-epoch loss telemetry; streamed to stdout and a CSV by the trainers.
using EpochLogger = std::function<void(const std::string& phase, int stage,
                                       int epoch, const WsodLosses& mean)>;

// Ordered checkpoints of Algorithm 1 plus per-stage diagnostics. The ledger
// file records relative checkpoint paths so an experiment directory can be
// moved wholesale.
struct CheckpointLedger {
  std::string config_hash;
  int stages = 0;  // T
  std::vector<std::string> aux_classes;
  std::vector<std::string> adjusters;  // g_0 .. g_T
  std::vector<std::string> aux_wsod;   // f_aux_0 .. f_aux_T
  std::vector<double> aux_val_miou_raw;
  std::vector<double> aux_val_miou_adjusted;
  bool one_class = false;

  nlohmann::json to_json() const {
    return nlohmann::json{{"config_hash", config_hash},
                          {"stages", stages},
                          {"aux_classes", aux_classes},
                          {"adjusters", adjusters},
                          {"aux_wsod", aux_wsod},
                          {"aux_val_miou_raw", aux_val_miou_raw},
                          {"aux_val_miou_adjusted", aux_val_miou_adjusted},
                          {"one_class", one_class}};
  }

  static CheckpointLedger from_json(const nlohmann::json& j) {
    CheckpointLedger l;
    l.config_hash = j.at("config_hash").get<std::string>();
    l.stages = j.at("stages").get<int>();
    l.aux_classes = j.at("aux_classes").get<std::vector<std::string>>();
    l.adjusters = j.at("adjusters").get<std::vector<std::string>>();
    l.aux_wsod = j.at("aux_wsod").get<std::vector<std::string>>();
    l.aux_val_miou_raw = j.value("aux_val_miou_raw", std::vector<double>{});
    l.aux_val_miou_adjusted =
        j.value("aux_val_miou_adjusted", std::vector<double>{});
    l.one_class = j.value("one_class", false);
    return l;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    f << to_json().dump(2) << "\n";
    if (!f) throw IoError("cannot write ledger " + path.string());
  }

  static CheckpointLedger load(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw SequencingError("missing ledger " + path.string());
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw SequencingError("corrupt ledger " + path.string());
    return from_json(j);
  }
};

namespace detail {

template <typename S>
WsodSpec wsod_spec_for(int num_classes, const StageSchedule& schedule,
                       const MiningConfig& mining) {
  WsodSpec spec;
  spec.num_classes = num_classes;
  spec.mining = mining;
  spec.bbr_weight = schedule.bbr_weight;
  return spec;
}

}  // namespace detail

// Trains one WSOD model on a weak-mode split. `adjuster` null trains the
// Eq. 3 baseline; otherwise the boosted objective L_wsod + L_bbr. The
// split's GT channel is never touched (the audit counter stays flat).
template <typename S>
WsodNet<S> train_wsod_stage(const DatasetSplit& split, const MiningConfig& mining,
                            const StageSchedule& schedule,
                            const Adjuster<S>* adjuster, int stage,
                            const std::string& phase,
                            const EpochLogger& log = nullptr,
                            std::optional<WsodNet<S>> warm_start = std::nullopt) {
  if (split.mode() != AnnotationMode::kWeak) {
    throw ModeError("train_wsod_stage: detector training requires a weak-mode split");
  }
  const TrainConfig& cfg = schedule.wsod;
  WsodNet<S> net = warm_start
                       ? std::move(*warm_start)
                       : WsodNet<S>(detail::wsod_spec_for<S>(split.num_classes(),
                                                             schedule, mining),
                                    derive_seed(cfg.seed, 0xf00d,
                                                static_cast<std::uint64_t>(stage)));
  SgdOptimizer<S> opt(cfg);
  std::vector<int> order(static_cast<std::size_t>(split.size()));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto erng = make_rng(cfg.seed, 0xe60c, static_cast<std::uint64_t>(epoch),
                         static_cast<std::uint64_t>(stage));
    std::shuffle(order.begin(), order.end(), erng);
    WsodLosses mean;
    for (int i : order) {
      auto srng = make_rng(cfg.seed, 0x57e9,
                           derive_seed(static_cast<std::uint64_t>(epoch), 0,
                                       static_cast<std::uint64_t>(stage)),
                           static_cast<std::uint64_t>(i));
      AdjustFn fn;
      if (adjuster) {
        const Tensor<double>& pixels = split.pixels(i);
        fn = [adjuster, &pixels](const std::vector<Box>& boxes) {
          return adjuster->adjust(pixels, boxes).boxes;
        };
      }
      mean += net.train_step(split.pixels(i), split.proposals(i).boxes,
                             split.labels(i), fn, opt, epoch, srng);
    }
    mean.scale(1.0 / split.size());
    if (log) log(phase, stage, epoch, mean);
  }
  return net;
}

// P_wsod per auxiliary image under the given detector: region-proposal
// geometry of the selected proposals (the decoded box stays metadata).
template <typename S>
std::vector<std::vector<Box>> collect_wsod_selections(WsodNet<S>& f,
                                                      const DatasetSplit& split) {
  std::vector<std::vector<Box>> out(static_cast<std::size_t>(split.size()));
  for (int i = 0; i < split.size(); ++i) {
    const WsodPrediction pred =
        f.predict_raw(split.pixels(i), split.proposals(i).boxes);
    const auto selected = select_wsod_proposals(pred.proposals, pred.decoded,
                                                pred.scores, f.spec().mining);
    for (const auto& sp : selected) {
      out[static_cast<std::size_t>(i)].push_back(sp.proposal);
    }
  }
  return out;
}

// mIoU diagnostic of one adjuster over a full-mode probe split, with the
// precomputed proposals as input.
template <typename S>
std::pair<double, double> adjuster_probe_miou(const Adjuster<S>& g,
                                              const DatasetSplit& probe) {
  std::vector<MiouInput> raw_in, adj_in;
  for (int i = 0; i < probe.size(); ++i) {
    MiouInput raw, adj;
    for (const Instance& inst : probe.instances(i)) {
      raw.gt_boxes.push_back(inst.box);
      raw.gt_classes.push_back(inst.class_id);
    }
    raw.boxes = probe.proposals(i).boxes;
    adj.gt_boxes = raw.gt_boxes;
    adj.gt_classes = raw.gt_classes;
    adj.boxes = g.adjust(probe.pixels(i), probe.proposals(i).boxes).boxes;
    raw_in.push_back(std::move(raw));
    adj_in.push_back(std::move(adj));
  }
  const auto r = proposal_miou(raw_in, probe.num_classes());
  const auto a = proposal_miou(adj_in, probe.num_classes());
  return {r.value_or(0.0), a.value_or(0.0)};
}

// Algorithm 1: initialize g_0 supervised on the auxiliary set, train the
// auxiliary WSOD model under g_0, then alternate E-steps (fit g_{t+1} on
// the proposals selected by f_t) and M-steps (refit f_{t+1} under g_{t+1}).
// The auxiliary WSOD model only ever sees the weak view of the split.
template <typename S>
CheckpointLedger learn_adjusters(const DatasetSplit& aux,
                                 const DatasetSplit& aux_val,
                                 const MiningConfig& mining,
                                 const StageSchedule& schedule,
                                 const std::filesystem::path& workdir,
                                 const std::string& config_hash,
                                 const EpochLogger& log = nullptr) {
  namespace fs = std::filesystem;
  if (aux.mode() != AnnotationMode::kFull) {
    throw ModeError("learn_adjusters: auxiliary split must be full mode");
  }
  schedule.validate();
  fs::create_directories(workdir / "checkpoints");

  const fs::path ledger_path = workdir / "ledger.json";
  CheckpointLedger ledger;
  if (fs::exists(ledger_path)) {
    ledger = CheckpointLedger::load(ledger_path);
    if (ledger.config_hash != config_hash) {
      throw SequencingError("ledger at " + ledger_path.string() +
                            " was produced by a different config (stale checkpoint)");
    }
  } else {
    ledger.config_hash = config_hash;
    ledger.stages = schedule.stages;
    ledger.aux_classes = aux.class_names();
    ledger.one_class = schedule.one_class_adjuster;
  }

  AdjusterSpec gspec;
  gspec.num_aux_classes = aux.num_classes();
  gspec.one_class = schedule.one_class_adjuster;

  const DatasetSplit weak_aux = aux.weak_view();
  const std::uint64_t gt_reads_before = weak_aux.gt_access_count();

  auto ckpt_dir = [&](const std::string& tag) {
    return workdir / "checkpoints" / tag;
  };
  auto have = [&](const std::string& tag) {
    return fs::exists(ckpt_dir(tag) / "manifest.json") &&
           fs::exists(ckpt_dir(tag) / "params.bin");
  };

  // g_0
  std::optional<Adjuster<S>> g;
  if (have("g_0")) {
    g.emplace(gspec, ParamStore<S>::load(ckpt_dir("g_0")), 0);
  } else {
    g.emplace(train_initial_adjuster<S>(aux, gspec, schedule.adjuster));
    g->params().save(ckpt_dir("g_0"), "g_0", config_hash);
  }
  auto record_stage = [&](int t) {
    const std::string gtag = "g_" + std::to_string(t);
    if (static_cast<int>(ledger.adjusters.size()) <= t) {
      ledger.adjusters.push_back("checkpoints/" + gtag);
      const auto [raw, adj] = adjuster_probe_miou(*g, aux_val);
      // soft trend check: stage quality is expected to be non-decreasing
      if (!ledger.aux_val_miou_adjusted.empty() &&
          adj < ledger.aux_val_miou_adjusted.back() - 1e-3) {
        std::fprintf(stderr,
                     "warning: adjuster mIoU dropped at stage %d "
                     "(%.4f -> %.4f)\n",
                     t, ledger.aux_val_miou_adjusted.back(), adj);
      }
      ledger.aux_val_miou_raw.push_back(raw);
      ledger.aux_val_miou_adjusted.push_back(adj);
      ledger.save(ledger_path);
    }
  };
  record_stage(0);

  // f_aux_0 under g_0, trained on the weak view only
  std::optional<WsodNet<S>> f;
  auto train_or_load_f = [&](int t) {
    const std::string ftag = "f_aux_" + std::to_string(t);
    if (have(ftag)) {
      f.emplace(detail::wsod_spec_for<S>(aux.num_classes(), schedule, mining),
                ParamStore<S>::load(ckpt_dir(ftag)));
    } else {
      f.emplace(train_wsod_stage<S>(
          weak_aux, mining, schedule,
          schedule.fixed_proposal_source ? nullptr : &*g, t, "aux_wsod", log));
      f->params().save(ckpt_dir(ftag), ftag, config_hash);
    }
    if (static_cast<int>(ledger.aux_wsod.size()) <= t) {
      ledger.aux_wsod.push_back("checkpoints/" + ftag);
      ledger.save(ledger_path);
    }
  };
  train_or_load_f(0);

  for (int t = 0; t < schedule.stages; ++t) {
    const std::string gtag = "g_" + std::to_string(t + 1);
    if (have(gtag)) {
      g.emplace(gspec, ParamStore<S>::load(ckpt_dir(gtag)), t + 1);
    } else {
      // E-step: selections from f_t (or the fixed precomputed source in
      // the ablation), then continue the adjuster from g_t
      std::vector<std::vector<Box>> selections;
      if (schedule.fixed_proposal_source) {
        selections.assign(static_cast<std::size_t>(aux.size()), {});
      } else {
        selections = collect_wsod_selections(*f, weak_aux);
      }
      TrainConfig gcfg = schedule.adjuster;
      gcfg.seed = derive_seed(schedule.adjuster.seed, 0x9000,
                              static_cast<std::uint64_t>(t + 1));
      g.emplace(train_adjuster_stage<S>(aux, selections, *g, gcfg,
                                        schedule.pmil_mix_ratio, t + 1));
      g->params().save(ckpt_dir(gtag), gtag, config_hash);
    }
    record_stage(t + 1);
    // M-step
    train_or_load_f(t + 1);
  }

  if (weak_aux.gt_access_count() != gt_reads_before) {
    throw ModeError("learn_adjusters: auxiliary WSOD training read private GT");
  }
  ledger.save(ledger_path);
  return ledger;
}

// Algorithm 2: LBBA-boosted WSOD on the weakly annotated target split.
// Progressive mode runs stages t = 0..T re-supervised by g_t; last_only
// uses g_T once; baseline drops the adjuster entirely.
template <typename S>
WsodNet<S> boost_wsod(const DatasetSplit& target, const CheckpointLedger& ledger,
                      const MiningConfig& mining, const StageSchedule& schedule,
                      const std::filesystem::path& workdir,
                      const EpochLogger& log = nullptr,
                      const std::string& ckpt_prefix = "f") {
  namespace fs = std::filesystem;
  schedule.validate();
  if (target.mode() != AnnotationMode::kWeak) {
    throw ModeError("boost_wsod: target split must be weak mode");
  }
  if (schedule.mode != ScheduleMode::kBaseline) {
    for (const std::string& cls : target.class_names()) {
      for (const std::string& aux_cls : ledger.aux_classes) {
        if (cls == aux_cls) {
          throw ConfigError("boost_wsod: class '" + cls +
                            "' appears in both auxiliary and target rosters");
        }
      }
    }
  }

  AdjusterSpec gspec;
  gspec.num_aux_classes = static_cast<int>(ledger.aux_classes.size());
  gspec.one_class = ledger.one_class;

  auto load_adjuster = [&](int t) {
    if (t >= static_cast<int>(ledger.adjusters.size())) {
      throw SequencingError("boost_wsod: ledger is missing adjuster g_" +
                            std::to_string(t));
    }
    const fs::path dir = workdir / ledger.adjusters[static_cast<std::size_t>(t)];
    return Adjuster<S>(gspec, ParamStore<S>::load(dir), t);
  };

  const std::uint64_t gt_reads_before = target.gt_access_count();
  fs::create_directories(workdir / "checkpoints");
  std::optional<WsodNet<S>> f;
  const std::string hash = ledger.config_hash;

  auto run_stage = [&](int stage, const Adjuster<S>* g) {
    std::optional<WsodNet<S>> warm;
    if (schedule.fine_tune && f) warm = std::move(f);
    f.emplace(train_wsod_stage<S>(target, mining, schedule, g, stage, "boost",
                                  log, std::move(warm)));
    f->params().save(workdir / "checkpoints" /
                         (ckpt_prefix + "_" + std::to_string(stage)),
                     ckpt_prefix + "_" + std::to_string(stage), hash);
  };

  switch (schedule.mode) {
    case ScheduleMode::kBaseline:
      run_stage(0, nullptr);
      break;
    case ScheduleMode::kLastOnly: {
      const Adjuster<S> g = load_adjuster(schedule.stages);
      run_stage(0, &g);
      break;
    }
    case ScheduleMode::kProgressive:
      for (int t = 0; t <= schedule.stages; ++t) {
        const Adjuster<S> g = load_adjuster(t);
        run_stage(t, &g);
      }
      break;
  }

  if (target.gt_access_count() != gt_reads_before) {
    throw ModeError("boost_wsod: training read the target split's private GT");
  }
  return std::move(*f);
}

}  // namespace lbba
