#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "lbba/config.hpp"
#include "lbba/em_trainer.hpp"
#include "lbba/experiment.hpp"

using namespace lbba;
namespace fs = std::filesystem;

namespace {

// Micro scale: one epoch, one EM stage, a handful of 32x32 images. The
// point is mechanics (sequencing, determinism, isolation), not quality.
ExperimentConfig micro_config() {
  ExperimentConfig cfg;
  cfg.seed = 5;
  cfg.dataset.image_size = 32;
  cfg.dataset.aux_classes = {"square", "disc", "triangle"};
  cfg.dataset.target_classes = {"diamond", "vbar"};
  cfg.dataset.aux_train_images = 8;
  cfg.dataset.aux_val_images = 4;
  cfg.dataset.target_train_images = 8;
  cfg.dataset.target_test_images = 6;
  cfg.dataset.size_min = 10;
  cfg.dataset.size_max = 16;
  cfg.dataset.instances_max = 2;
  cfg.dataset.max_proposals = 32;
  cfg.dataset.seed = 17;
  cfg.schedule.stages = 1;
  cfg.schedule.wsod.epochs = 1;
  cfg.schedule.wsod.decay_epoch = 1;
  cfg.schedule.adjuster.epochs = 1;
  cfg.schedule.adjuster.decay_epoch = 1;
  cfg.mask.train.epochs = 1;
  cfg.mask.train.decay_epoch = 1;
  return cfg;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

struct MicroData {
  DatasetSplit aux, aux_val, target_full;
};

MicroData micro_data(const ExperimentConfig& cfg) {
  MicroData d;
  const SceneConfig scene = cfg.dataset.scene();
  d.aux = generate_dataset(scene, cfg.dataset.aux_classes,
                           cfg.dataset.aux_train_images,
                           derive_seed(cfg.dataset.seed, 1), AnnotationMode::kFull);
  d.aux_val = generate_dataset(scene, cfg.dataset.aux_classes,
                               cfg.dataset.aux_val_images,
                               derive_seed(cfg.dataset.seed, 2), AnnotationMode::kFull);
  d.target_full = generate_dataset(scene, cfg.dataset.target_classes,
                                   cfg.dataset.target_train_images,
                                   derive_seed(cfg.dataset.seed, 3),
                                   AnnotationMode::kFull);
  return d;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(LearnAdjusters, ProducesContiguousLedger) {
  const ExperimentConfig cfg = micro_config();
  const MicroData data = micro_data(cfg);
  const fs::path dir = fresh_dir("lbba_em_ledger");
  const CheckpointLedger ledger = learn_adjusters<float>(
      data.aux, data.aux_val, cfg.mining, cfg.schedule, dir, "h1");
  // T = 1 -> adjusters g_0, g_1 and WSOD checkpoints f_aux_0, f_aux_1
  ASSERT_EQ(ledger.adjusters.size(), 2u);
  ASSERT_EQ(ledger.aux_wsod.size(), 2u);
  for (std::size_t t = 0; t < ledger.adjusters.size(); ++t) {
    const fs::path ckpt = dir / ledger.adjusters[t];
    std::string tag;
    ParamStore<float>::load(ckpt, &tag);
    EXPECT_EQ(tag, "g_" + std::to_string(t));
  }
  EXPECT_EQ(ledger.aux_val_miou_raw.size(), 2u);
  fs::remove_all(dir);
}

TEST(LearnAdjusters, RejectsWeakAuxAndStaleLedger) {
  const ExperimentConfig cfg = micro_config();
  const MicroData data = micro_data(cfg);
  const fs::path dir = fresh_dir("lbba_em_stale");
  EXPECT_THROW(learn_adjusters<float>(data.aux.weak_view(), data.aux_val,
                                      cfg.mining, cfg.schedule, dir, "h1"),
               ModeError);
  learn_adjusters<float>(data.aux, data.aux_val, cfg.mining, cfg.schedule, dir, "h1");
  EXPECT_THROW(learn_adjusters<float>(data.aux, data.aux_val, cfg.mining,
                                      cfg.schedule, dir, "other-hash"),
               SequencingError);
  fs::remove_all(dir);
}

TEST(LearnAdjusters, DeterministicAcrossRunsAndResumable) {
  const ExperimentConfig cfg = micro_config();
  const MicroData data = micro_data(cfg);
  const fs::path a = fresh_dir("lbba_em_det_a");
  const fs::path b = fresh_dir("lbba_em_det_b");
  learn_adjusters<float>(data.aux, data.aux_val, cfg.mining, cfg.schedule, a, "h1");
  learn_adjusters<float>(data.aux, data.aux_val, cfg.mining, cfg.schedule, b, "h1");
  for (const char* rel :
       {"checkpoints/g_0/params.bin", "checkpoints/g_1/params.bin",
        "checkpoints/f_aux_0/params.bin", "checkpoints/f_aux_1/params.bin"}) {
    EXPECT_EQ(file_bytes(a / rel), file_bytes(b / rel)) << rel;
  }

  // resume: keep only stage-0 artifacts in a fresh dir, rerun, compare
  const fs::path c = fresh_dir("lbba_em_det_c");
  fs::create_directories(c / "checkpoints");
  fs::copy(a / "checkpoints" / "g_0", c / "checkpoints" / "g_0",
           fs::copy_options::recursive);
  fs::copy(a / "checkpoints" / "f_aux_0", c / "checkpoints" / "f_aux_0",
           fs::copy_options::recursive);
  CheckpointLedger partial = CheckpointLedger::load(a / "ledger.json");
  partial.adjusters.resize(1);
  partial.aux_wsod.resize(1);
  partial.aux_val_miou_raw.resize(1);
  partial.aux_val_miou_adjusted.resize(1);
  partial.save(c / "ledger.json");

  learn_adjusters<float>(data.aux, data.aux_val, cfg.mining, cfg.schedule, c, "h1");
  for (const char* rel :
       {"checkpoints/g_1/params.bin", "checkpoints/f_aux_1/params.bin"}) {
    EXPECT_EQ(file_bytes(a / rel), file_bytes(c / rel)) << rel;
  }
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST(BoostWsod, ModesAndLedgerSequencing) {
  const ExperimentConfig cfg = micro_config();
  const MicroData data = micro_data(cfg);
  const fs::path dir = fresh_dir("lbba_boost_modes");
  const CheckpointLedger ledger = learn_adjusters<float>(
      data.aux, data.aux_val, cfg.mining, cfg.schedule, dir, "h1");
  const DatasetSplit target = data.target_full.weak_view();

  StageSchedule base = cfg.schedule;
  base.mode = ScheduleMode::kBaseline;
  EXPECT_NO_THROW(boost_wsod<float>(target, ledger, cfg.mining, base, dir,
                                    nullptr, "fb"));

  StageSchedule prog = cfg.schedule;
  prog.mode = ScheduleMode::kProgressive;
  EXPECT_NO_THROW(boost_wsod<float>(target, ledger, cfg.mining, prog, dir,
                                    nullptr, "fp"));

  // last_only consumes only g_T: removing earlier adjusters must not break
  // it, while progressive now fails on the missing entry
  fs::remove_all(dir / "checkpoints" / "g_0");
  StageSchedule last = cfg.schedule;
  last.mode = ScheduleMode::kLastOnly;
  EXPECT_NO_THROW(boost_wsod<float>(target, ledger, cfg.mining, last, dir,
                                    nullptr, "fl"));
  EXPECT_THROW(boost_wsod<float>(target, ledger, cfg.mining, prog, dir,
                                 nullptr, "fp2"),
               IoError);
  fs::remove_all(dir);
}

TEST(BoostWsod, WeakIsolationAuditAndDisjointness) {
  const ExperimentConfig cfg = micro_config();
  const MicroData data = micro_data(cfg);
  const fs::path dir = fresh_dir("lbba_boost_audit");
  const CheckpointLedger ledger = learn_adjusters<float>(
      data.aux, data.aux_val, cfg.mining, cfg.schedule, dir, "h1");

  const DatasetSplit target = data.target_full.weak_view();
  EXPECT_EQ(target.gt_access_count(), 0u);
  StageSchedule prog = cfg.schedule;
  boost_wsod<float>(target, ledger, cfg.mining, prog, dir, nullptr, "fa");
  EXPECT_EQ(target.gt_access_count(), 0u);  // zero GT reads during training

  // a full-mode target is rejected outright
  EXPECT_THROW(boost_wsod<float>(data.target_full, ledger, cfg.mining, prog,
                                 dir, nullptr, "fx"),
               ModeError);

  // overlapping rosters are rejected
  CheckpointLedger overlapping = ledger;
  overlapping.aux_classes.push_back("diamond");
  EXPECT_THROW(boost_wsod<float>(target, overlapping, cfg.mining, prog, dir,
                                 nullptr, "fy"),
               ConfigError);
  fs::remove_all(dir);
}

TEST(RunExperiment, ReportBytesIdenticalAcrossReruns) {
  const ExperimentConfig cfg = micro_config();
  const fs::path a = fresh_dir("lbba_exp_a");
  const fs::path b = fresh_dir("lbba_exp_b");
  run_experiment<float>(cfg, a, /*echo_stdout=*/false);
  run_experiment<float>(cfg, b, /*echo_stdout=*/false);
  const std::string ra = file_bytes(a / "report.json");
  ASSERT_FALSE(ra.empty());
  EXPECT_EQ(ra, file_bytes(b / "report.json"));
  // rerun over a completed directory reuses the artifacts and reproduces
  // the identical report
  run_experiment<float>(cfg, a, false);
  EXPECT_EQ(ra, file_bytes(a / "report.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunExperiment, ResumeAfterStageOneMatchesUninterrupted) {
  const ExperimentConfig cfg = micro_config();
  const fs::path full = fresh_dir("lbba_exp_full");
  const fs::path part = fresh_dir("lbba_exp_part");
  run_experiment<float>(cfg, full, false);

  // simulate an interrupted run: stage-0 artifacts only, then resume
  fs::create_directories(part / "checkpoints");
  fs::copy(full / "config.json", part / "config.json");
  fs::copy(full / "data", part / "data", fs::copy_options::recursive);
  fs::copy(full / "checkpoints" / "g_0", part / "checkpoints" / "g_0",
           fs::copy_options::recursive);
  fs::copy(full / "checkpoints" / "f_aux_0", part / "checkpoints" / "f_aux_0",
           fs::copy_options::recursive);
  CheckpointLedger partial = CheckpointLedger::load(full / "ledger.json");
  partial.adjusters.resize(1);
  partial.aux_wsod.resize(1);
  partial.aux_val_miou_raw.resize(1);
  partial.aux_val_miou_adjusted.resize(1);
  partial.save(part / "ledger.json");

  run_experiment<float>(cfg, part, false);
  EXPECT_EQ(file_bytes(full / "report.json"), file_bytes(part / "report.json"));
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST(RunExperiment, DegenerateSchedulesProduceReports) {
  ExperimentConfig cfg = micro_config();
  cfg.schedule.stages = 0;  // ledger degenerates to g_0 only
  const fs::path a = fresh_dir("lbba_exp_t0");
  EXPECT_NO_THROW(run_experiment<float>(cfg, a, false));
  EXPECT_TRUE(fs::exists(a / "report.json"));
  const CheckpointLedger ledger = CheckpointLedger::load(a / "ledger.json");
  EXPECT_EQ(ledger.adjusters.size(), 1u);

  ExperimentConfig base = micro_config();
  base.schedule.mode = ScheduleMode::kBaseline;
  const fs::path b = fresh_dir("lbba_exp_base");
  EXPECT_NO_THROW(run_experiment<float>(base, b, false));
  EXPECT_TRUE(fs::exists(b / "report.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunExperiment, MismatchedConfigHashRejected) {
  const ExperimentConfig cfg = micro_config();
  const fs::path dir = fresh_dir("lbba_exp_hash");
  run_experiment<float>(cfg, dir, false);
  ExperimentConfig other = cfg;
  other.schedule.wsod.learning_rate *= 2;
  EXPECT_THROW(run_experiment<float>(other, dir, false), SequencingError);
  fs::remove_all(dir);
}

TEST(LearnAdjusters, FixedProposalSourceAblationRuns) {
  ExperimentConfig cfg = micro_config();
  cfg.schedule.fixed_proposal_source = true;
  const MicroData data = micro_data(cfg);
  const fs::path dir = fresh_dir("lbba_em_fixed_src");
  const CheckpointLedger ledger = learn_adjusters<float>(
      data.aux, data.aux_val, cfg.mining, cfg.schedule, dir, "h1");
  EXPECT_EQ(ledger.adjusters.size(), 2u);  // same ledger shape as the full loop
  fs::remove_all(dir);
}

TEST(DirLockTest, SecondWriterRejected) {
  const fs::path dir = fresh_dir("lbba_lock");
  {
    DirLock lock(dir);
    EXPECT_THROW(DirLock second(dir), SequencingError);
  }
  // released on destruction
  EXPECT_NO_THROW(DirLock third(dir));
  fs::remove_all(dir);
}

TEST(ConfigTest, HashStableAndSensitive) {
  const ExperimentConfig a = micro_config();
  ExperimentConfig b = micro_config();
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.mask.tau = -6.0;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(ConfigTest, OverlappingRostersRejected) {
  ExperimentConfig cfg = micro_config();
  cfg.dataset.target_classes.push_back("square");  // already auxiliary
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(ConfigTest, JsonRoundTripPreservesHash) {
  const ExperimentConfig cfg = micro_config();
  const ExperimentConfig back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_hash(cfg), config_hash(back));
  EXPECT_EQ(schedule_mode_name(back.schedule.mode),
            schedule_mode_name(cfg.schedule.mode));
}
