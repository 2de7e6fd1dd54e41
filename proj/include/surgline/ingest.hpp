#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "surgline/common.hpp"
#include "surgline/vocab.hpp"

namespace surgline {

struct VideoMeta {
  std::string video_id;
  double fps = 0.0;
  std::int64_t frame_count = 0;
  std::string source;  // video path, frame directory, or "synthetic"

  void validate() const;
};

/// One sampled, labeled frame. `image` is a decoder reference (see image.hpp).
struct FrameRecord {
  std::string video_id;
  std::int64_t frame_index = 0;
  double timestamp_s = 0.0;
  ClassId label;
  std::string image;

  bool operator==(const FrameRecord&) const = default;
};

struct GestureInterval {
  std::int64_t start_frame = 0;
  std::int64_t end_frame = 0;  // inclusive
  ClassId label;

  bool operator==(const GestureInterval&) const = default;
};

/// Per-source-frame labels; nullopt marks an unlabeled frame.
using FrameLabels = std::vector<std::optional<ClassId>>;

/// Parses "start end Gk" lines. Codes are checked against `vocab` when given,
/// otherwise against G1..G15.
std::vector<GestureInterval> parse_gesture_transcript(const std::filesystem::path& path, const VideoMeta& video,
                                                      const ClassVocabulary* vocab = nullptr);
std::vector<GestureInterval> parse_gesture_transcript_text(std::string_view text, const VideoMeta& video,
                                                           const ClassVocabulary* vocab = nullptr);
FrameLabels expand_intervals(const std::vector<GestureInterval>& intervals, const VideoMeta& video);

using PhaseNameMap = std::map<std::string, ClassId>;

PhaseNameMap default_phase_name_map();
PhaseNameMap load_phase_name_map(const std::filesystem::path& path);

struct PhaseParseOptions {
  /// When set, surplus rows are dropped and missing rows stay unlabeled
  /// instead of raising an error.
  bool allow_row_mismatch = false;
};

FrameLabels parse_phase_annotation(const std::filesystem::path& path, const VideoMeta& video,
                                   const PhaseNameMap& name_map, PhaseParseOptions options = {});
FrameLabels parse_phase_annotation_text(std::string_view text, const VideoMeta& video,
                                        const PhaseNameMap& name_map, PhaseParseOptions options = {});

struct SampledFrames {
  std::vector<FrameRecord> records;
  double effective_fps = 0.0;
};

/// Image reference assigned to a sampled frame: "<source>#<frame_index>".
std::string video_frame_ref(const VideoMeta& video, std::int64_t frame_index);

SampledFrames sample_frames(const VideoMeta& video, const FrameLabels& labels, int stride);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t seed = 0;

  bool operator==(const DatasetSplit&) const = default;
};

struct SplitRatios {
  double train = 0.6, val = 0.1, test = 0.3;
};
struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
};
using SplitSpec = std::variant<SplitRatios, SplitCounts>;

/// Sizes a ratio split by largest remainder, then moves one video into any
/// empty set when at least three videos exist.
SplitCounts resolve_split_sizes(std::size_t n_videos, const SplitSpec& spec);
DatasetSplit make_split(const std::vector<std::string>& videos, const SplitSpec& spec, std::uint64_t seed);

enum class SplitPart { train, val, test };
std::vector<FrameRecord> select_split(const std::vector<FrameRecord>& records, const DatasetSplit& split,
                                      SplitPart part);

std::map<ClassId, std::size_t> class_counts(const std::vector<FrameRecord>& records);

/// Every class grows to the maximum class count by drawing with replacement
/// from its own records. Originals keep their order; additions follow.
std::vector<FrameRecord> balance_upsample(const std::vector<FrameRecord>& records, std::uint64_t seed);

/// Every class shrinks to the minimum class count by sampling without
/// replacement. Output preserves input order.
std::vector<FrameRecord> balance_downsample(const std::vector<FrameRecord>& records, std::uint64_t seed);

struct SynthOptions {
  int n_classes = 7;
  int n_per_class = 20;
  int image_size = 64;
  double noise = 0.0;
  std::uint64_t seed = 0;
  int n_videos = 10;
  std::string label_prefix = "C";
  double fps = 5.0;
};

struct SynthDataset {
  std::vector<VideoMeta> videos;
  std::vector<FrameRecord> records;
};

/// Record j of class k lands in video j mod n_videos; within a video, classes
/// appear in order as contiguous runs, so each video reads like a procedure.
SynthDataset synth_dataset(const SynthOptions& options);

// File formats -------------------------------------------------------------

struct ManifestEntry {
  VideoMeta video;
  std::string annotation;
  Task task = Task::phase;
};

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
std::string serialize_manifest(const std::vector<ManifestEntry>& entries);

std::string serialize_split(const DatasetSplit& split);
DatasetSplit parse_split(std::string_view json_text);
DatasetSplit load_split(const std::filesystem::path& path);

/// CSV with header video_id,frame_index,timestamp_s,label,image.
std::string serialize_frames(const std::vector<FrameRecord>& records);
std::vector<FrameRecord> parse_frames(std::string_view csv_text);
std::vector<FrameRecord> load_frames(const std::filesystem::path& path);

/// Orders records by (video_id, frame_index).
void sort_records(std::vector<FrameRecord>& records);

}  // namespace surgline
