#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "lbba/em_trainer.hpp"
#include "lbba/error.hpp"
#include "lbba/mining.hpp"
#include "lbba/optimizer.hpp"
#include "lbba/synthdata.hpp"

#include <json.hpp>

namespace lbba {

struct DatasetConfig {
  int image_size = 64;
  std::vector<std::string> aux_classes = {"square", "disc",  "triangle",
                                          "ring",   "cross", "hbar"};
  std::vector<std::string> target_classes = {"diamond", "frame", "vbar", "tee"};
  int aux_train_images = 800;
  int aux_val_images = 120;
  int target_train_images = 400;
  int target_test_images = 200;
  int instances_min = 1;
  int instances_max = 3;
  double size_min = 12.0;
  double size_max = 28.0;
  double noise = 0.10;
  bool allow_occlusion = false;
  int max_proposals = 128;
  double min_proposal_size = 6.0;
  std::uint64_t seed = 7;

  SceneConfig scene() const {
    SceneConfig s;
    s.height = image_size;
    s.width = image_size;
    s.instances_min = instances_min;
    s.instances_max = instances_max;
    s.size_min = size_min;
    s.size_max = size_max;
    s.noise = noise;
    s.allow_occlusion = allow_occlusion;
    s.max_proposals = max_proposals;
    s.min_proposal_size = min_proposal_size;
    return s;
  }
};

struct MaskConfig {
  bool enabled = true;
  double tau = -3.0;  // threshold on raw logits
  TrainConfig train = [] {
    TrainConfig t;
    t.learning_rate = 0.03;
    t.epochs = 10;
    t.decay_epoch = 8;
    return t;
  }();
};

struct EvalConfig {
  double nms = 0.3;
  double score_thresh = 0.05;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  StageSchedule schedule;
  MiningConfig mining;
  MaskConfig mask;
  EvalConfig eval;

  void validate() const {
    std::set<std::string> aux(dataset.aux_classes.begin(), dataset.aux_classes.end());
    for (const std::string& cls : dataset.target_classes) {
      if (aux.count(cls)) {
        throw ConfigError("config: class '" + cls +
                          "' appears in both auxiliary and target rosters");
      }
      shape_from_name(cls);
    }
    for (const std::string& cls : dataset.aux_classes) shape_from_name(cls);
    if (dataset.aux_classes.size() < 2 || dataset.target_classes.size() < 2) {
      throw ConfigError("config: each roster needs at least 2 classes");
    }
    if (dataset.aux_train_images < 1 || dataset.target_train_images < 1) {
      throw ConfigError("config: dataset sizes must be >= 1");
    }
    if (mining.top_k < 1) throw ConfigError("config: mining.top_k must be >= 1");
    if (mining.nms_thresh <= 0 || mining.nms_thresh >= 1 || eval.nms <= 0 ||
        eval.nms >= 1) {
      throw ConfigError("config: NMS thresholds must lie in (0,1)");
    }
    dataset.scene().validate(static_cast<int>(dataset.aux_classes.size()));
    schedule.validate();
    mask.train.validate();
  }
};

namespace cfgio {

inline TrainConfig train_config_from(const nlohmann::json& j, TrainConfig base) {
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.momentum = j.value("momentum", base.momentum);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.epochs = j.value("epochs", base.epochs);
  base.decay_epoch = j.value("decay_epoch", base.decay_epoch);
  base.decay_factor = j.value("decay_factor", base.decay_factor);
  return base;
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},   {"batch_size", t.batch_size},
          {"epochs", t.epochs},               {"decay_epoch", t.decay_epoch},
          {"decay_factor", t.decay_factor}};
}

}  // namespace cfgio

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    DatasetConfig& dc = cfg.dataset;
    dc.image_size = d.value("image_size", dc.image_size);
    dc.aux_classes = d.value("aux_classes", dc.aux_classes);
    dc.target_classes = d.value("target_classes", dc.target_classes);
    dc.aux_train_images = d.value("aux_train_images", dc.aux_train_images);
    dc.aux_val_images = d.value("aux_val_images", dc.aux_val_images);
    dc.target_train_images = d.value("target_train_images", dc.target_train_images);
    dc.target_test_images = d.value("target_test_images", dc.target_test_images);
    dc.instances_min = d.value("instances_min", dc.instances_min);
    dc.instances_max = d.value("instances_max", dc.instances_max);
    dc.size_min = d.value("size_min", dc.size_min);
    dc.size_max = d.value("size_max", dc.size_max);
    dc.noise = d.value("noise", dc.noise);
    dc.allow_occlusion = d.value("allow_occlusion", dc.allow_occlusion);
    dc.max_proposals = d.value("max_proposals", dc.max_proposals);
    dc.min_proposal_size = d.value("min_proposal_size", dc.min_proposal_size);
    dc.seed = d.value("seed", dc.seed);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    StageSchedule& sc = cfg.schedule;
    sc.stages = s.value("stages", sc.stages);
    sc.mode = schedule_mode_from(s.value("mode", schedule_mode_name(sc.mode)));
    if (s.contains("wsod")) sc.wsod = cfgio::train_config_from(s.at("wsod"), sc.wsod);
    if (s.contains("adjuster")) {
      sc.adjuster = cfgio::train_config_from(s.at("adjuster"), sc.adjuster);
    }
    sc.fine_tune = s.value("fine_tune", sc.fine_tune);
    sc.fixed_proposal_source =
        s.value("fixed_proposal_source", sc.fixed_proposal_source);
    sc.one_class_adjuster = s.value("one_class_adjuster", sc.one_class_adjuster);
    sc.pmil_mix_ratio = s.value("pmil_mix_ratio", sc.pmil_mix_ratio);
    sc.bbr_weight = s.value("bbr_weight", sc.bbr_weight);
  }
  if (j.contains("mining")) {
    const auto& m = j.at("mining");
    cfg.mining.seed_iou = m.value("seed_iou", cfg.mining.seed_iou);
    cfg.mining.top_k = m.value("top_k", cfg.mining.top_k);
    cfg.mining.score_thresh = m.value("score_thresh", cfg.mining.score_thresh);
    cfg.mining.nms_thresh = m.value("nms_thresh", cfg.mining.nms_thresh);
  }
  if (j.contains("mask")) {
    const auto& m = j.at("mask");
    cfg.mask.enabled = m.value("enabled", cfg.mask.enabled);
    cfg.mask.tau = m.value("tau", cfg.mask.tau);
    cfg.mask.train = cfgio::train_config_from(m, cfg.mask.train);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    cfg.eval.nms = e.value("nms", cfg.eval.nms);
    cfg.eval.score_thresh = e.value("score_thresh", cfg.eval.score_thresh);
  }
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  return nlohmann::json{
      {"seed", cfg.seed},
      {"dataset",
       {{"image_size", cfg.dataset.image_size},
        {"aux_classes", cfg.dataset.aux_classes},
        {"target_classes", cfg.dataset.target_classes},
        {"aux_train_images", cfg.dataset.aux_train_images},
        {"aux_val_images", cfg.dataset.aux_val_images},
        {"target_train_images", cfg.dataset.target_train_images},
        {"target_test_images", cfg.dataset.target_test_images},
        {"instances_min", cfg.dataset.instances_min},
        {"instances_max", cfg.dataset.instances_max},
        {"size_min", cfg.dataset.size_min},
        {"size_max", cfg.dataset.size_max},
        {"noise", cfg.dataset.noise},
        {"allow_occlusion", cfg.dataset.allow_occlusion},
        {"max_proposals", cfg.dataset.max_proposals},
        {"min_proposal_size", cfg.dataset.min_proposal_size},
        {"seed", cfg.dataset.seed}}},
      {"schedule",
       {{"stages", cfg.schedule.stages},
        {"mode", schedule_mode_name(cfg.schedule.mode)},
        {"wsod", cfgio::train_config_json(cfg.schedule.wsod)},
        {"adjuster", cfgio::train_config_json(cfg.schedule.adjuster)},
        {"fine_tune", cfg.schedule.fine_tune},
        {"fixed_proposal_source", cfg.schedule.fixed_proposal_source},
        {"one_class_adjuster", cfg.schedule.one_class_adjuster},
        {"pmil_mix_ratio", cfg.schedule.pmil_mix_ratio},
        {"bbr_weight", cfg.schedule.bbr_weight}}},
      {"mining",
       {{"seed_iou", cfg.mining.seed_iou},
        {"top_k", cfg.mining.top_k},
        {"score_thresh", cfg.mining.score_thresh},
        {"nms_thresh", cfg.mining.nms_thresh}}},
      {"mask",
       {{"enabled", cfg.mask.enabled},
        {"tau", cfg.mask.tau},
        {"learning_rate", cfg.mask.train.learning_rate},
        {"epochs", cfg.mask.train.epochs},
        {"decay_epoch", cfg.mask.train.decay_epoch}}},
      {"eval", {{"nms", cfg.eval.nms}, {"score_thresh", cfg.eval.score_thresh}}}};
}

// FNV-1a over the canonical (sorted-key) dump; embedded in every artifact
// so mixing outputs of different configs is caught at load time.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = config_to_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string());
  ExperimentConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace lbba
