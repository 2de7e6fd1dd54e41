#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgline/ingest.hpp"
#include "surgline/vocab.hpp"
#include "surgline/zeroshot.hpp"

namespace surgline {

/// Duration given to a timeline built from a single frame, which has no
/// neighbour to take a midpoint with.
inline constexpr double kSingleFrameDuration = 0.2;

/// Sliding-window majority vote over an odd window (truncated at the ends).
/// Ties go to the previous smoothed label, then to the raw label at the
/// centre, then to whichever tied label occurs first in the window.
std::vector<ClassId> smooth_labels(const std::vector<ClassId>& per_frame, int window);

struct TimelineSegment {
  ClassId class_id;
  double start_s = 0.0;
  double end_s = 0.0;
  double mean_confidence = 0.0;
  std::int64_t first_frame = 0;
  std::int64_t last_frame = 0;

  double duration() const { return end_s - start_s; }
};

struct NarrativeLine {
  double start_s = 0.0;
  double end_s = 0.0;
  std::string sentence;
};

struct Timeline {
  std::string video_id;
  std::vector<TimelineSegment> segments;
  std::vector<NarrativeLine> narrative;

  double start_s() const { return segments.front().start_s; }
  double end_s() const { return segments.back().end_s; }
  /// Class covering time t; the final segment includes its end.
  const ClassId& label_at(double t) const;

  nlohmann::ordered_json to_json() const;
  /// Summary header followed by "[HH:MM:SS–HH:MM:SS] sentence" lines.
  std::string narrative_text() const;
};

/// One labelled, time-stamped point of a per-frame stream.
struct TimedLabel {
  std::int64_t frame_index = 0;
  double timestamp_s = 0.0;
  ClassId label;
  double confidence = 1.0;
};

/// Run-length encodes an already-smoothed stream. Boundaries sit at midpoints
/// between adjacent frames; the first segment starts at the first timestamp and
/// the last ends at the last timestamp.
Timeline segments_from_stream(const std::string& video_id, const std::vector<TimedLabel>& stream,
                              const ClassVocabulary& vocab);

/// Smooths the top-1 stream of one video's predictions and segments it.
/// Segment confidence is the mean raw top-1 score of its frames.
Timeline build_timeline(const std::vector<Prediction>& preds, const ClassVocabulary& vocab, int window);
/// As above, after checking that `frames` and `preds` describe the same frames.
Timeline build_timeline(const std::vector<FrameRecord>& frames, const std::vector<Prediction>& preds,
                        const ClassVocabulary& vocab, int window);
/// Unsmoothed timeline of the true labels carried by `preds`.
Timeline truth_timeline(const std::vector<Prediction>& preds, const ClassVocabulary& vocab);

struct PhaseDiagram {
  std::vector<double> time_s;
  std::vector<ClassId> predicted;
  std::vector<ClassId> truth;
  std::vector<ClassId> classes;
  /// Per class: fraction of grid points with this true class that the
  /// prediction matches; null when the class never occurs in the truth.
  std::map<ClassId, std::optional<double>> agreement;
  double overall_agreement = 0.0;

  std::string to_csv() const;
  nlohmann::ordered_json agreement_json() const;
};

/// Samples both timelines on `grid` (default: a uniform grid with `step`
/// spacing over the common span). Throws when the spans differ.
PhaseDiagram export_phase_diagram(const Timeline& predicted, const Timeline& truth,
                                  const std::vector<double>& grid);
PhaseDiagram export_phase_diagram(const Timeline& predicted, const Timeline& truth, double step = 1.0);

/// Formats seconds as HH:MM:SS (rounded to the nearest second).
std::string format_hms(double seconds);

/// Groups predictions by video (stable order of first appearance), each
/// group sorted by frame index.
std::vector<std::vector<Prediction>> group_by_video(const std::vector<Prediction>& preds);

}  // namespace surgline
