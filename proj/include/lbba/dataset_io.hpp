#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lbba/error.hpp"
#include "lbba/synthdata.hpp"

#include <json.hpp>

namespace lbba {

namespace detail {

inline void write_pgm(const std::filesystem::path& path,
                      const Tensor<double>& pixels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  const int H = pixels.dim(0), W = pixels.dim(1);
  f << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      row[static_cast<std::size_t>(x)] =
          static_cast<unsigned char>(std::lround(pixels.at(y, x) * 255.0));
    }
    f.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!f) throw IoError("short write: " + path.string());
}

inline Tensor<double> read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0) {
    throw IoError("not an 8-bit P5 PGM: " + path.string());
  }
  f.get();  // single whitespace after header
  Tensor<double> pixels({h, w});
  std::vector<unsigned char> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), w);
    if (!f) throw IoError("truncated PGM: " + path.string());
    for (int x = 0; x < w; ++x) {
      pixels.at(y, x) = row[static_cast<std::size_t>(x)] / 255.0;
    }
  }
  return pixels;
}

inline std::string image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.pgm", index);
  return buf;
}

}  // namespace detail

// Directory layout: manifest.json, images/%06d.pgm, annotations.jsonl
// (instances only in full mode), proposals.jsonl.
inline void save_split(const DatasetSplit& split, const std::filesystem::path& dir,
                       const nlohmann::json& config_echo = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");

  nlohmann::json manifest;
  manifest["class_names"] = split.class_names();
  manifest["mode"] = split.mode() == AnnotationMode::kFull ? "full" : "weak";
  manifest["num_images"] = split.size();
  manifest["seed"] = split.seed();
  manifest["config"] = config_echo;
  {
    std::ofstream f(dir / "manifest.json", std::ios::binary);
    f << manifest.dump(2) << "\n";
    if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  }

  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary);
  std::ofstream props(dir / "proposals.jsonl", std::ios::binary);
  if (!ann || !props) throw IoError("cannot write annotation files in " + dir.string());
  for (int i = 0; i < split.size(); ++i) {
    detail::write_pgm(dir / "images" / detail::image_name(i), split.pixels(i));

    nlohmann::json a;
    a["index"] = i;
    a["labels"] = split.labels(i);
    if (split.mode() == AnnotationMode::kFull) {
      nlohmann::json inst = nlohmann::json::array();
      for (const Instance& it : split.instances(i)) {
        inst.push_back({it.class_id, it.box.x1, it.box.y1, it.box.x2, it.box.y2});
      }
      a["instances"] = inst;
    }
    ann << a.dump() << "\n";

    nlohmann::json p;
    p["index"] = i;
    nlohmann::json boxes = nlohmann::json::array();
    const ProposalSet& ps = split.proposals(i);
    for (const Box& b : ps.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    p["boxes"] = boxes;
    p["tags"] = ps.tags;
    props << p.dump() << "\n";
  }
  if (!ann || !props) throw IoError("short write in " + dir.string());
}

inline DatasetSplit load_split(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("missing " + (dir / "manifest.json").string());
  nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
  if (manifest.is_discarded()) throw IoError("corrupt " + (dir / "manifest.json").string());

  const auto class_names = manifest.at("class_names").get<std::vector<std::string>>();
  const std::string mode_str = manifest.at("mode").get<std::string>();
  if (mode_str != "full" && mode_str != "weak") {
    throw IoError("bad mode in " + (dir / "manifest.json").string());
  }
  const AnnotationMode mode =
      mode_str == "full" ? AnnotationMode::kFull : AnnotationMode::kWeak;
  const int n = manifest.at("num_images").get<int>();

  DatasetSplit split(class_names, mode);
  split.set_seed(manifest.value("seed", std::uint64_t(0)));
  // Weak directories carry no instance boxes at all.
  split.set_has_private_gt(mode == AnnotationMode::kFull);

  std::ifstream ann(dir / "annotations.jsonl");
  std::ifstream props(dir / "proposals.jsonl");
  if (!ann) throw IoError("missing " + (dir / "annotations.jsonl").string());
  if (!props) throw IoError("missing " + (dir / "proposals.jsonl").string());

  for (int i = 0; i < n; ++i) {
    ImageSample sample;
    sample.pixels = detail::read_pgm(dir / "images" / detail::image_name(i));

    std::string line;
    if (!std::getline(ann, line)) {
      throw IoError("truncated annotations.jsonl in " + dir.string());
    }
    nlohmann::json a = nlohmann::json::parse(line, nullptr, false);
    if (a.is_discarded() || a.value("index", -1) != i) {
      throw IoError("corrupt annotations.jsonl at line " + std::to_string(i + 1) +
                    " in " + dir.string());
    }
    sample.image_labels = a.at("labels").get<std::vector<int>>();
    if (a.contains("instances")) {
      for (const auto& row : a.at("instances")) {
        Instance inst;
        inst.class_id = row.at(0).get<int>();
        inst.box = Box{row.at(1).get<double>(), row.at(2).get<double>(),
                       row.at(3).get<double>(), row.at(4).get<double>()};
        sample.instances.push_back(inst);
      }
    }

    if (!std::getline(props, line)) {
      throw IoError("truncated proposals.jsonl in " + dir.string());
    }
    nlohmann::json p = nlohmann::json::parse(line, nullptr, false);
    if (p.is_discarded() || p.value("index", -1) != i) {
      throw IoError("corrupt proposals.jsonl at line " + std::to_string(i + 1) +
                    " in " + dir.string());
    }
    ProposalSet ps;
    for (const auto& row : p.at("boxes")) {
      ps.boxes.push_back(Box{row.at(0).get<double>(), row.at(1).get<double>(),
                             row.at(2).get<double>(), row.at(3).get<double>()});
    }
    ps.tags = p.at("tags").get<std::vector<std::string>>();
    split.push_sample(std::move(sample), std::move(ps));
  }
  return split;
}

}  // namespace lbba
