#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "lbba/eval.hpp"
#include "lbba/rng.hpp"

using namespace lbba;

namespace {

// Every-point interpolated AP computed the slow way: sort detections,
// greedily mark TP/FP, then for every prefix find the interpolated
// precision by an O(n^2) scan over higher-recall points.
double ap_oracle(std::vector<Detection> dets,
                 const std::map<int, std::vector<Box>>& gts) {
  int npos = 0;
  for (const auto& [img, boxes] : gts) npos += static_cast<int>(boxes.size());
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) {
                     return a.score > b.score;
                   });
  std::map<int, std::vector<char>> used;
  for (const auto& [img, boxes] : gts) used[img].assign(boxes.size(), 0);
  const int n = static_cast<int>(dets.size());
  std::vector<double> prec, rec;
  int tp = 0;
  for (int k = 0; k < n; ++k) {
    const Detection& d = dets[static_cast<std::size_t>(k)];
    bool hit = false;
    if (gts.count(d.image)) {
      const auto& boxes = gts.at(d.image);
      int best = -1;
      double best_iou = 0;
      for (std::size_t j = 0; j < boxes.size(); ++j) {
        const double v = iou(d.box, boxes[j]);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(j);
        }
      }
      if (best >= 0 && best_iou >= 0.5 && !used[d.image][static_cast<std::size_t>(best)]) {
        used[d.image][static_cast<std::size_t>(best)] = 1;
        hit = true;
      }
    }
    tp += hit;
    prec.push_back(static_cast<double>(tp) / (k + 1));
    rec.push_back(static_cast<double>(tp) / npos);
  }
  double ap = 0;
  for (int k = 0; k < n; ++k) {
    const double r_prev = k > 0 ? rec[static_cast<std::size_t>(k - 1)] : 0.0;
    const double dr = rec[static_cast<std::size_t>(k)] - r_prev;
    if (dr <= 0) continue;
    double p_interp = 0;
    for (int j = k; j < n; ++j) p_interp = std::max(p_interp, prec[static_cast<std::size_t>(j)]);
    ap += dr * p_interp;
  }
  return ap;
}

Box random_box(std::mt19937_64& rng) {
  const double x = uniform(rng, 0.0, 30.0), y = uniform(rng, 0.0, 30.0);
  return Box{x, y, x + uniform(rng, 3.0, 12.0), y + uniform(rng, 3.0, 12.0)};
}

}  // namespace

TEST(Ap, PerfectDetectorIsOne) {
  std::map<int, std::vector<Box>> gts;
  gts[0] = {Box{0, 0, 4, 4}};
  const auto ap = average_precision({{0, 0.8, Box{0, 0, 4, 4}}}, gts);
  ASSERT_TRUE(ap.has_value());
  EXPECT_DOUBLE_EQ(*ap, 1.0);
}

TEST(Ap, BelowIouThresholdIsZero) {
  std::map<int, std::vector<Box>> gts;
  gts[0] = {Box{0, 0, 10, 10}};
  // IoU = 16/(100+16-16) = 0.16 < 0.5
  const auto ap = average_precision({{0, 0.8, Box{0, 0, 4, 4}}}, gts);
  ASSERT_TRUE(ap.has_value());
  EXPECT_DOUBLE_EQ(*ap, 0.0);
}

TEST(Ap, NoGtIsUndefined) {
  EXPECT_FALSE(average_precision({{0, 0.8, Box{0, 0, 4, 4}}}, {}).has_value());
}

TEST(Ap, HandBuiltInterleavedCaseMatchesOracle) {
  // 3 images, interleaved TPs and FPs across score order
  std::map<int, std::vector<Box>> gts;
  gts[0] = {Box{0, 0, 4, 4}, Box{10, 10, 14, 14}};
  gts[1] = {Box{2, 2, 8, 8}};
  gts[2] = {Box{5, 5, 9, 9}};
  std::vector<Detection> dets = {
      {0, 0.95, Box{0, 0, 4, 4}},       // TP
      {1, 0.90, Box{20, 20, 24, 24}},   // FP
      {2, 0.85, Box{5, 5, 9, 9}},       // TP
      {0, 0.80, Box{0.2, 0, 4.2, 4}},   // FP (GT already used)
      {1, 0.75, Box{2, 2, 8, 8}},       // TP
      {0, 0.60, Box{10, 10, 14, 14}},   // TP
      {2, 0.55, Box{0, 0, 2, 2}},       // FP
  };
  const auto ap = average_precision(dets, gts);
  ASSERT_TRUE(ap.has_value());
  EXPECT_DOUBLE_EQ(*ap, ap_oracle(dets, gts));
  // sanity: 4 TPs over 4 GTs with two interleaved FPs
  EXPECT_GT(*ap, 0.7);
  EXPECT_LT(*ap, 1.0);
}

TEST(Ap, MatchesOracleOnRandomInstances) {
  auto rng = make_rng(515);
  for (int trial = 0; trial < 200; ++trial) {
    std::map<int, std::vector<Box>> gts;
    const int n_img = uniform_int(rng, 1, 3);
    for (int img = 0; img < n_img; ++img) {
      const int n = uniform_int(rng, 0, 3);
      for (int j = 0; j < n; ++j) gts[img].push_back(random_box(rng));
      if (gts[img].empty()) gts.erase(img);
    }
    if (gts.empty()) continue;
    std::vector<Detection> dets;
    const int nd = uniform_int(rng, 1, 10);
    for (int k = 0; k < nd; ++k) {
      Detection d;
      d.image = uniform_int(rng, 0, n_img - 1);
      d.score = uniform(rng, 0.0, 1.0);
      // half the detections perturb a GT box, half are random
      if (uniform(rng, 0, 1) < 0.5 && gts.count(d.image)) {
        const Box& g = gts[d.image][0];
        d.box = Box{g.x1 + uniform(rng, -2, 2), g.y1 + uniform(rng, -2, 2),
                    g.x2 + uniform(rng, -2, 2), g.y2 + uniform(rng, -2, 2)};
        if (!d.box.valid()) d.box = g;
      } else {
        d.box = random_box(rng);
      }
      dets.push_back(d);
    }
    const auto ap = average_precision(dets, gts);
    ASSERT_TRUE(ap.has_value());
    EXPECT_DOUBLE_EQ(*ap, ap_oracle(dets, gts)) << "trial " << trial;
  }
}

TEST(Ap, InvariantToMonotoneScoreRescaling) {
  auto rng = make_rng(909);
  std::map<int, std::vector<Box>> gts;
  gts[0] = {random_box(rng), random_box(rng)};
  gts[1] = {random_box(rng)};
  std::vector<Detection> dets;
  for (int k = 0; k < 8; ++k) {
    dets.push_back({uniform_int(rng, 0, 1), uniform(rng, 0.1, 1.0), random_box(rng)});
  }
  dets.push_back({0, 0.95, gts[0][0]});
  dets.push_back({1, 0.9, gts[1][0]});
  const auto base = average_precision(dets, gts);
  auto scaled = dets;
  for (auto& d : scaled) d.score = 2.0 * d.score + 1.0;
  auto cubed = dets;
  for (auto& d : cubed) d.score = d.score * d.score * d.score;
  EXPECT_DOUBLE_EQ(*base, *average_precision(scaled, gts));
  EXPECT_DOUBLE_EQ(*base, *average_precision(cubed, gts));
}

TEST(Ap, TrailingZeroOverlapFalsePositiveNeverIncreasesAp) {
  auto rng = make_rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<int, std::vector<Box>> gts;
    gts[0] = {random_box(rng)};
    std::vector<Detection> dets = {{0, 0.9, gts[0][0]},
                                   {0, uniform(rng, 0.3, 0.8), random_box(rng)}};
    const double base = *average_precision(dets, gts);
    auto more = dets;
    more.push_back({0, 0.01, Box{500, 500, 504, 504}});  // zero overlap, lowest score
    EXPECT_LE(*average_precision(more, gts), base + 1e-12);
  }
}

TEST(CorLoc, AllCorrectAndAllWrong) {
  std::map<int, std::vector<Box>> gts;
  gts[0] = {Box{0, 0, 4, 4}};
  gts[1] = {Box{5, 5, 9, 9}};
  std::map<int, Box> top_correct = {{0, Box{0, 0, 4, 4}}, {1, Box{5, 5, 9, 9}}};
  EXPECT_DOUBLE_EQ(*corloc(top_correct, gts), 1.0);
  std::map<int, Box> top_wrong = {{0, Box{20, 20, 24, 24}}, {1, Box{30, 30, 34, 34}}};
  EXPECT_DOUBLE_EQ(*corloc(top_wrong, gts), 0.0);
  EXPECT_FALSE(corloc({}, gts).has_value());
}

TEST(CorLoc, MixedTenImageCaseMatchesDirectCount) {
  auto rng = make_rng(313);
  std::map<int, std::vector<Box>> gts;
  std::map<int, Box> top;
  int expect_hits = 0;
  for (int img = 0; img < 10; ++img) {
    gts[img] = {random_box(rng)};
    if (img % 3 == 0) {
      top[img] = gts[img][0];  // exact hit
      ++expect_hits;
    } else {
      top[img] = Box{100.0 + img, 100.0, 104.0 + img, 104.0};  // miss
    }
  }
  EXPECT_DOUBLE_EQ(*corloc(top, gts), expect_hits / 10.0);
}

TEST(Miou, BoxesEqualToGtsGiveOne) {
  MiouInput img;
  img.boxes = {Box{0, 0, 4, 4}, Box{8, 8, 12, 12}};
  img.gt_boxes = img.boxes;
  img.gt_classes = {0, 1};
  const auto v = proposal_miou({img}, 2);
  ASSERT_TRUE(v.has_value());
  EXPECT_DOUBLE_EQ(*v, 1.0);
}

TEST(Miou, MatchesExhaustiveOracleOnRandomCase) {
  auto rng = make_rng(606);
  std::vector<MiouInput> images(3);
  const int num_classes = 3;
  for (auto& img : images) {
    for (int j = 0; j < 3; ++j) {
      img.gt_boxes.push_back(random_box(rng));
      img.gt_classes.push_back(uniform_int(rng, 0, num_classes - 1));
    }
    for (int k = 0; k < 10; ++k) img.boxes.push_back(random_box(rng));
  }
  const auto got = proposal_miou(images, num_classes);
  // oracle: brute force over all pairs
  std::vector<double> sum(num_classes, 0);
  std::vector<int> cnt(num_classes, 0);
  for (const auto& img : images) {
    for (const Box& b : img.boxes) {
      double best = 0;
      int cls = img.gt_classes[0];
      for (std::size_t j = 0; j < img.gt_boxes.size(); ++j) {
        const double v = iou(b, img.gt_boxes[j]);
        if (v > best) {
          best = v;
          cls = img.gt_classes[j];
        }
      }
      // zero-IoU boxes attribute to the first GT's class, same as impl
      if (best == 0) cls = img.gt_classes[0];
      sum[static_cast<std::size_t>(cls)] += best;
      cnt[static_cast<std::size_t>(cls)] += 1;
    }
  }
  double macro = 0;
  int classes = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (cnt[static_cast<std::size_t>(c)] == 0) continue;
    macro += sum[static_cast<std::size_t>(c)] / cnt[static_cast<std::size_t>(c)];
    ++classes;
  }
  ASSERT_TRUE(got.has_value());
  EXPECT_NEAR(*got, macro / classes, 1e-12);
}

TEST(Miou, GtToBoxDirectionFlag) {
  MiouInput img;
  img.boxes = {Box{0, 0, 4, 4}};
  img.gt_boxes = {Box{0, 0, 4, 4}, Box{20, 20, 30, 30}};
  img.gt_classes = {0, 0};
  // proposal->GT: single box matches perfectly -> 1.0
  EXPECT_DOUBLE_EQ(*proposal_miou({img}, 1, false), 1.0);
  // GT->proposal: second GT has zero-overlap best -> (1.0 + 0.0)/2
  EXPECT_DOUBLE_EQ(*proposal_miou({img}, 1, true), 0.5);
}

TEST(Report, JsonSchemaAndNullHandling) {
  EvalResult r;
  r.class_names = {"a", "b"};
  r.per_class_ap = {0.5, std::nullopt};
  r.per_class_corloc = {1.0, std::nullopt};
  r.map = 0.5;
  r.mean_corloc = 1.0;
  r.miou_raw = std::nullopt;
  r.miou_adjusted = std::nullopt;
  r.num_images = 3;
  r.config_hash = "cafe";
  r.seed = 7;
  const nlohmann::json j = eval_result_to_json(r);
  EXPECT_TRUE(j.contains("per_class"));
  EXPECT_TRUE(j.at("per_class").contains("a"));
  EXPECT_DOUBLE_EQ(j.at("per_class").at("a").at("ap").get<double>(), 0.5);
  EXPECT_TRUE(j.at("per_class").at("b").at("ap").is_null());
  EXPECT_TRUE(j.at("miou_raw").is_null());
  EXPECT_EQ(j.at("config_hash").get<std::string>(), "cafe");
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 7u);
  EXPECT_EQ(j.at("counts").at("images").get<int>(), 3);
}
