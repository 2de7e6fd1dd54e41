#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "surgline/common.hpp"
#include "surgline/contrastive.hpp"
#include "surgline/ingest.hpp"
#include "surgline/zeroshot.hpp"

namespace testing {

using surgline::ClassId;
using surgline::Matrix;
using surgline::Rng;

inline ClassId class_name(std::size_t k) { return "C" + std::to_string(k + 1); }

inline std::vector<ClassId> class_names(std::size_t n) {
  std::vector<ClassId> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(class_name(k));
  return out;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sd = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = sd * rng.normal();
  return m;
}

inline Matrix random_unit_rows(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix m = random_matrix(rng, rows, cols);
  m.rowwise().normalize();
  return m;
}

/// Labels drawn from `n_classes`, each class present at least once when n >= n_classes.
inline std::vector<ClassId> random_labels(Rng& rng, std::size_t n, std::size_t n_classes) {
  std::vector<ClassId> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(class_name(i < n_classes ? i : rng.uniform_index(n_classes)));
  rng.shuffle(out);
  return out;
}

/// Records with the given per-class counts spread over a few videos.
inline std::vector<surgline::FrameRecord> records_with_counts(const std::vector<std::size_t>& counts,
                                                             std::size_t n_videos = 3) {
  std::vector<surgline::FrameRecord> out;
  std::int64_t f = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    for (std::size_t i = 0; i < counts[k]; ++i, ++f) {
      const std::string vid = "v" + std::to_string(f % static_cast<std::int64_t>(n_videos));
      out.push_back({vid, f, static_cast<double>(f) / 5.0, class_name(k), "img" + std::to_string(f)});
    }
  }
  return out;
}

/// Prediction whose ranking starts with `top` and contains every class once.
inline surgline::Prediction ranked_prediction(Rng& rng, const std::vector<ClassId>& classes, const ClassId& truth,
                                              const ClassId& top, std::size_t k, std::int64_t frame, double t,
                                              const std::string& video = "vid") {
  surgline::Prediction p;
  p.video_id = video;
  p.frame_index = frame;
  p.timestamp_s = t;
  p.true_label = truth;
  std::vector<ClassId> rest;
  for (const auto& c : classes)
    if (c != top) rest.push_back(c);
  rng.shuffle(rest);
  p.ranking.push_back(top);
  for (std::size_t i = 0; i + 1 < k; ++i) p.ranking.push_back(rest[i]);
  double s = 0.9;
  for (std::size_t i = 0; i < k; ++i) {
    p.scores.push_back(s);
    s *= 0.5;
  }
  return p;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("surgline-test-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(SURGLINE_TEST_FIXTURES) / name;
}

}  // namespace testing
