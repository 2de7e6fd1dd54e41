#include "surgline/ingest.hpp"

#include <algorithm>
#include <array>
#include <tuple>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "surgline/image.hpp"

namespace surgline {

namespace {

std::int64_t parse_int(std::string_view s, const std::string& context) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ParseError(context + ": expected integer, got '" + std::string(s) + "'");
  return v;
}

std::vector<std::string> tokens(std::string_view line) {
  std::istringstream ss{std::string(line)};
  std::vector<std::string> out;
  std::string t;
  while (ss >> t) out.push_back(t);
  return out;
}

bool is_default_gesture_code(std::string_view code) {
  if (code.size() < 2 || code[0] != 'G') return false;
  int n = 0;
  const auto* end = code.data() + code.size();
  auto [ptr, ec] = std::from_chars(code.data() + 1, end, n);
  return ec == std::errc() && ptr == end && n >= 1 && n <= 15 && code[1] != '0';
}

}  // namespace

void VideoMeta::validate() const {
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError(video_id + ": fps must be positive");
  if (frame_count < 0) throw ValidationError(video_id + ": negative frame_count");
}

std::vector<GestureInterval> parse_gesture_transcript_text(std::string_view text, const VideoMeta& video,
                                                           const ClassVocabulary* vocab) {
  video.validate();
  std::vector<GestureInterval> out;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    const auto toks = tokens(line);
    if (toks.empty()) continue;
    const std::string where = video.video_id + " line " + std::to_string(line_no);
    if (toks.size() != 3) throw ParseError(where + ": expected 'start end Gk'");
    GestureInterval iv{parse_int(toks[0], where), parse_int(toks[1], where), toks[2]};
    const bool known = vocab ? vocab->index_of(iv.label).has_value() : is_default_gesture_code(iv.label);
    if (!known) throw ValidationError(where + ": unknown gesture code '" + iv.label + "'");
    if (iv.start_frame < 0 || iv.end_frame < iv.start_frame || iv.end_frame >= video.frame_count) {
      throw ValidationError(where + ": interval out of frame bounds");
    }
    out.push_back(std::move(iv));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.start_frame < b.start_frame; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].start_frame <= out[i - 1].end_frame) {
      throw ValidationError(video.video_id + ": overlapping intervals at frames " +
                            std::to_string(out[i - 1].start_frame) + " and " +
                            std::to_string(out[i].start_frame));
    }
  }
  return out;
}

std::vector<GestureInterval> parse_gesture_transcript(const std::filesystem::path& path, const VideoMeta& video,
                                                      const ClassVocabulary* vocab) {
  return parse_gesture_transcript_text(read_file(path), video, vocab);
}

FrameLabels expand_intervals(const std::vector<GestureInterval>& intervals, const VideoMeta& video) {
  FrameLabels labels(static_cast<std::size_t>(video.frame_count));
  for (const auto& iv : intervals) {
    for (auto f = iv.start_frame; f <= iv.end_frame && f < video.frame_count; ++f) {
      labels[static_cast<std::size_t>(f)] = iv.label;
    }
  }
  return labels;
}

PhaseNameMap default_phase_name_map() {
  return {{"Preparation", "P1"},           {"CalotTriangleDissection", "P2"},
          {"ClippingCutting", "P3"},       {"GallbladderDissection", "P4"},
          {"GallbladderPackaging", "P5"},  {"CleaningCoagulation", "P6"},
          {"GallbladderRetraction", "P7"}};
}

PhaseNameMap load_phase_name_map(const std::filesystem::path& path) {
  const auto doc = nlohmann::json::parse(read_file(path));
  PhaseNameMap out;
  for (const auto& [name, code] : doc.items()) out[name] = code.get<std::string>();
  return out;
}

FrameLabels parse_phase_annotation_text(std::string_view text, const VideoMeta& video,
                                        const PhaseNameMap& name_map, PhaseParseOptions options) {
  video.validate();
  auto lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw ParseError(video.video_id + ": empty phase annotation");
  const auto header = split(trim(lines[0]), '\t');
  if (header.size() != 2 || header[0] != "Frame" || header[1] != "Phase") {
    throw ParseError(video.video_id + ": expected header 'Frame<TAB>Phase'");
  }
  const auto rows = static_cast<std::int64_t>(lines.size() - 1);
  if (rows != video.frame_count && !options.allow_row_mismatch) {
    throw ValidationError(video.video_id + ": row count mismatch: " + std::to_string(rows) +
                          " rows for " + std::to_string(video.frame_count) + " frames");
  }
  FrameLabels labels(static_cast<std::size_t>(video.frame_count));
  for (std::int64_t r = 0; r < std::min(rows, video.frame_count); ++r) {
    const std::string where = video.video_id + " line " + std::to_string(r + 2);
    const auto cols = split(trim(lines[static_cast<std::size_t>(r + 1)]), '\t');
    if (cols.size() != 2) throw ParseError(where + ": expected 2 tab-separated columns");
    const auto frame = parse_int(cols[0], where);
    if (frame != r) throw ParseError(where + ": frame " + std::to_string(frame) + " out of sequence");
    const auto it = name_map.find(cols[1]);
    if (it == name_map.end()) throw ValidationError(where + ": unmapped phase name '" + cols[1] + "'");
    labels[static_cast<std::size_t>(r)] = it->second;
  }
  return labels;
}

FrameLabels parse_phase_annotation(const std::filesystem::path& path, const VideoMeta& video,
                                   const PhaseNameMap& name_map, PhaseParseOptions options) {
  return parse_phase_annotation_text(read_file(path), video, name_map, options);
}

std::string video_frame_ref(const VideoMeta& video, std::int64_t frame_index) {
  return video.source + "#" + std::to_string(frame_index);
}

SampledFrames sample_frames(const VideoMeta& video, const FrameLabels& labels, int stride) {
  if (stride < 1) throw ValidationError("stride must be >= 1");
  video.validate();
  SampledFrames out;
  out.effective_fps = video.fps / stride;
  const auto n = std::min<std::int64_t>(video.frame_count, static_cast<std::int64_t>(labels.size()));
  for (std::int64_t f = 0; f < n; f += stride) {
    const auto& label = labels[static_cast<std::size_t>(f)];
    if (!label) continue;
    out.records.push_back({video.video_id, f, static_cast<double>(f) / video.fps, *label,
                           video_frame_ref(video, f)});
  }
  return out;
}

SplitCounts resolve_split_sizes(std::size_t n, const SplitSpec& spec) {
  if (const auto* counts = std::get_if<SplitCounts>(&spec)) {
    if (counts->train + counts->val + counts->test != n) {
      throw ValidationError("infeasible split: counts (" + std::to_string(counts->train) + "," +
                            std::to_string(counts->val) + "," + std::to_string(counts->test) +
                            ") do not partition " + std::to_string(n) + " videos");
    }
    return *counts;
  }
  const auto& r = std::get<SplitRatios>(spec);
  const double ratios[3] = {r.train, r.val, r.test};
  const double total = r.train + r.val + r.test;
  if (!(total > 0) || r.train < 0 || r.val < 0 || r.test < 0) throw ValidationError("infeasible split: bad ratios");
  std::size_t sizes[3];
  double rema[3];
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = ratios[i] / total * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    rema[i] = quota - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rema[a] > rema[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  if (n >= 3) {
    for (int i = 0; i < 3; ++i) {
      if (sizes[i] == 0 && ratios[i] > 0) {
        const auto donor = static_cast<int>(std::max_element(sizes, sizes + 3) - sizes);
        --sizes[donor];
        ++sizes[i];
      }
    }
  }
  return {sizes[0], sizes[1], sizes[2]};
}

DatasetSplit make_split(const std::vector<std::string>& videos, const SplitSpec& spec, std::uint64_t seed) {
  std::vector<std::string> pool = videos;
  std::sort(pool.begin(), pool.end());
  if (std::adjacent_find(pool.begin(), pool.end()) != pool.end()) throw ValidationError("duplicate video_id in split input");
  const auto sizes = resolve_split_sizes(pool.size(), spec);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(pool);
  DatasetSplit out;
  out.seed = seed;
  auto it = pool.begin();
  out.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes.train));
  it += static_cast<std::ptrdiff_t>(sizes.train);
  out.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes.val));
  it += static_cast<std::ptrdiff_t>(sizes.val);
  out.test.assign(it, pool.end());
  for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
  return out;
}

std::vector<FrameRecord> select_split(const std::vector<FrameRecord>& records, const DatasetSplit& split,
                                      SplitPart part) {
  const auto& ids = part == SplitPart::train ? split.train : part == SplitPart::val ? split.val : split.test;
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<FrameRecord> out;
  for (const auto& r : records) {
    if (wanted.count(r.video_id)) out.push_back(r);
  }
  return out;
}

std::map<ClassId, std::size_t> class_counts(const std::vector<FrameRecord>& records) {
  std::map<ClassId, std::size_t> counts;
  for (const auto& r : records) ++counts[r.label];
  return counts;
}

namespace {

std::map<ClassId, std::vector<std::size_t>> indices_by_class(const std::vector<FrameRecord>& records) {
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].label].push_back(i);
  return by_class;
}

}  // namespace

std::vector<FrameRecord> balance_upsample(const std::vector<FrameRecord>& records, std::uint64_t seed) {
  if (records.empty()) throw ValidationError("balance_upsample: empty input");
  const auto by_class = indices_by_class(records);
  std::size_t target = 0;
  for (const auto& [_, idx] : by_class) target = std::max(target, idx.size());
  Rng rng(derive_seed(seed, "upsample"));
  std::vector<FrameRecord> out = records;
  for (const auto& [_, idx] : by_class) {
    for (std::size_t n = idx.size(); n < target; ++n) out.push_back(records[idx[rng.uniform_index(idx.size())]]);
  }
  return out;
}

std::vector<FrameRecord> balance_downsample(const std::vector<FrameRecord>& records, std::uint64_t seed) {
  if (records.empty()) throw ValidationError("balance_downsample: empty input");
  auto by_class = indices_by_class(records);
  std::size_t target = records.size();
  for (const auto& [_, idx] : by_class) target = std::min(target, idx.size());
  Rng rng(derive_seed(seed, "downsample"));
  std::vector<bool> keep(records.size(), false);
  for (auto& [_, idx] : by_class) {
    // Partial Fisher-Yates: the first `target` slots become the kept sample.
    for (std::size_t i = 0; i < target; ++i) {
      std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
      keep[idx[i]] = true;
    }
  }
  std::vector<FrameRecord> out;
  out.reserve(target * by_class.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (keep[i]) out.push_back(records[i]);
  }
  return out;
}

SynthDataset synth_dataset(const SynthOptions& o) {
  if (o.n_classes < 2) throw ValidationError("synth_dataset: n_classes must be >= 2");
  if (o.n_per_class < 0 || o.image_size < 1 || o.noise < 0 || o.n_videos < 1 || !(o.fps > 0)) {
    throw ValidationError("synth_dataset: invalid options");
  }
  SynthDataset ds;
  std::vector<std::int64_t> next_frame(static_cast<std::size_t>(o.n_videos), 0);
  char name[32];
  for (int v = 0; v < o.n_videos; ++v) {
    std::snprintf(name, sizeof(name), "synth%03d", v);
    ds.videos.push_back({name, o.fps, 0, "synthetic"});
  }
  for (int v = 0; v < o.n_videos; ++v) {
    for (int k = 0; k < o.n_classes; ++k) {
      for (int j = v; j < o.n_per_class; j += o.n_videos) {
        auto& video = ds.videos[static_cast<std::size_t>(v)];
        const auto frame = next_frame[static_cast<std::size_t>(v)]++;
        const SynthPattern pattern{k, o.n_classes, o.image_size, o.noise,
                                   derive_seed(o.seed, std::to_string(k) + "/" + std::to_string(j))};
        ds.records.push_back({video.video_id, frame, static_cast<double>(frame) / o.fps,
                              o.label_prefix + std::to_string(k + 1), synth_ref(pattern)});
        video.frame_count = frame + 1;
      }
    }
  }
  return ds;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!doc.contains("videos") || !doc["videos"].is_array()) throw ParseError(path.string() + ": missing 'videos'");
  std::vector<ManifestEntry> out;
  const auto base = path.parent_path();
  const auto resolve = [&](const std::string& p) {
    if (p.empty() || p == "synthetic" || std::filesystem::path(p).is_absolute()) return p;
    return (base / p).string();
  };
  for (const auto& v : doc["videos"]) {
    try {
      ManifestEntry e;
      e.video.video_id = v.at("video_id").get<std::string>();
      e.video.source = resolve(v.value("path", std::string("synthetic")));
      e.video.fps = v.at("fps").get<double>();
      e.video.frame_count = v.at("frame_count").get<std::int64_t>();
      e.annotation = resolve(v.value("annotation", std::string()));
      e.task = task_from_string(v.value("task", std::string("phase")));
      e.video.validate();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(path.string() + ": bad video entry: " + ex.what());
    }
  }
  return out;
}

std::string serialize_manifest(const std::vector<ManifestEntry>& entries) {
  nlohmann::ordered_json doc;
  doc["videos"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json v;
    v["video_id"] = e.video.video_id;
    v["path"] = e.video.source;
    v["fps"] = e.video.fps;
    v["frame_count"] = e.video.frame_count;
    v["annotation"] = e.annotation;
    v["task"] = to_string(e.task);
    doc["videos"].push_back(std::move(v));
  }
  return doc.dump(2) + "\n";
}

std::string serialize_split(const DatasetSplit& split) {
  nlohmann::ordered_json doc;
  doc["train"] = split.train;
  doc["val"] = split.val;
  doc["test"] = split.test;
  doc["seed"] = split.seed;
  return doc.dump(2) + "\n";
}

DatasetSplit parse_split(std::string_view json_text) {
  try {
    const auto doc = nlohmann::json::parse(json_text);
    DatasetSplit s;
    s.train = doc.at("train").get<std::vector<std::string>>();
    s.val = doc.at("val").get<std::vector<std::string>>();
    s.test = doc.at("test").get<std::vector<std::string>>();
    s.seed = doc.value("seed", std::uint64_t{0});
    std::set<std::string> seen;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const auto& id : *part) {
        if (!seen.insert(id).second) throw ValidationError("split file: video '" + id + "' appears twice");
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("split file: ") + e.what());
  }
}

DatasetSplit load_split(const std::filesystem::path& path) { return parse_split(read_file(path)); }

std::string serialize_frames(const std::vector<FrameRecord>& records) {
  std::string out = "video_id,frame_index,timestamp_s,label,image\n";
  for (const auto& r : records) {
    if (r.video_id.find(',') != std::string::npos || r.label.find(',') != std::string::npos ||
        r.image.find(',') != std::string::npos) {
      throw ValidationError("frame record fields may not contain commas: " + r.video_id);
    }
    out += r.video_id + "," + std::to_string(r.frame_index) + "," + format_real(r.timestamp_s) + "," + r.label +
           "," + r.image + "\n";
  }
  return out;
}

std::vector<FrameRecord> parse_frames(std::string_view csv_text) {
  auto lines = split(csv_text, '\n');
  if (lines.empty() || trim(lines[0]) != "video_id,frame_index,timestamp_s,label,image") {
    throw ParseError("frames CSV: bad header");
  }
  std::vector<FrameRecord> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto line = trim(lines[i]);
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    const std::string where = "frames CSV line " + std::to_string(i + 1);
    if (cols.size() != 5) throw ParseError(where + ": expected 5 columns");
    FrameRecord r;
    r.video_id = cols[0];
    r.frame_index = parse_int(cols[1], where);
    try {
      r.timestamp_s = std::stod(cols[2]);
    } catch (const std::logic_error&) {
      throw ParseError(where + ": bad timestamp");
    }
    r.label = cols[3];
    r.image = cols[4];
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<FrameRecord> load_frames(const std::filesystem::path& path) { return parse_frames(read_file(path)); }

void sort_records(std::vector<FrameRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const FrameRecord& a, const FrameRecord& b) {
    return std::tie(a.video_id, a.frame_index) < std::tie(b.video_id, b.frame_index);
  });
}

}  // namespace surgline
