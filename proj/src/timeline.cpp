#include "surgline/timeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace surgline {

std::vector<ClassId> smooth_labels(const std::vector<ClassId>& per_frame, int window) {
  if (per_frame.empty()) throw ValidationError("smooth_labels: empty input");
  if (window < 1 || window % 2 == 0) throw ValidationError("smooth_labels: window must be odd and >= 1, got " + std::to_string(window));
  if (window == 1) return per_frame;
  const auto n = static_cast<std::ptrdiff_t>(per_frame.size());
  const std::ptrdiff_t half = window / 2;
  std::vector<ClassId> out;
  out.reserve(per_frame.size());
  std::map<ClassId, int> votes;
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto lo = std::max<std::ptrdiff_t>(0, i - half);
    const auto hi = std::min<std::ptrdiff_t>(n - 1, i + half);
    votes.clear();
    int best = 0;
    for (auto j = lo; j <= hi; ++j) best = std::max(best, ++votes[per_frame[static_cast<std::size_t>(j)]]);
    const auto tied = [&](const ClassId& c) {
      const auto it = votes.find(c);
      return it != votes.end() && it->second == best;
    };
    if (!out.empty() && tied(out.back())) {
      out.push_back(out.back());
    } else if (tied(per_frame[static_cast<std::size_t>(i)])) {
      out.push_back(per_frame[static_cast<std::size_t>(i)]);
    } else {
      for (auto j = lo; j <= hi; ++j) {
        if (tied(per_frame[static_cast<std::size_t>(j)])) {
          out.push_back(per_frame[static_cast<std::size_t>(j)]);
          break;
        }
      }
    }
  }
  return out;
}

const ClassId& Timeline::label_at(double t) const {
  if (segments.empty()) throw ValidationError("timeline is empty");
  if (t < start_s() || t > end_s()) throw ValidationError("time " + format_real(t) + " outside timeline span");
  const auto it = std::upper_bound(segments.begin(), segments.end(), t,
                                   [](double v, const TimelineSegment& s) { return v < s.end_s; });
  return it == segments.end() ? segments.back().class_id : it->class_id;
}

std::string format_hms(double seconds) {
  const long long s = std::llround(std::max(0.0, seconds));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%02lld:%02lld:%02lld", s / 3600, (s / 60) % 60, s % 60);
  return buf;
}

nlohmann::ordered_json Timeline::to_json() const {
  nlohmann::ordered_json j;
  j["video_id"] = video_id;
  auto& segs = j["segments"] = nlohmann::ordered_json::array();
  for (const auto& s : segments) {
    segs.push_back({{"class", s.class_id},
                    {"start_s", s.start_s},
                    {"end_s", s.end_s},
                    {"confidence", s.mean_confidence},
                    {"frame_span", {s.first_frame, s.last_frame}}});
  }
  auto& nar = j["narrative"] = nlohmann::ordered_json::array();
  for (const auto& l : narrative) nar.push_back({{"start_s", l.start_s}, {"end_s", l.end_s}, {"text", l.sentence}});
  return j;
}

std::string Timeline::narrative_text() const {
  std::vector<ClassId> distinct;
  for (const auto& s : segments) {
    if (std::find(distinct.begin(), distinct.end(), s.class_id) == distinct.end()) distinct.push_back(s.class_id);
  }
  std::ostringstream out;
  out << "Video " << video_id << ": " << segments.size() << " segments, " << distinct.size()
      << " distinct classes, total duration " << format_hms(segments.empty() ? 0.0 : end_s() - start_s()) << '\n';
  for (const auto& l : narrative) {
    out << '[' << format_hms(l.start_s) << "–" << format_hms(l.end_s) << "] " << l.sentence << '\n';
  }
  return out.str();
}

Timeline segments_from_stream(const std::string& video_id, const std::vector<TimedLabel>& stream,
                              const ClassVocabulary& vocab) {
  if (stream.empty()) throw ValidationError("timeline: no frames for video " + video_id);
  for (std::size_t i = 1; i < stream.size(); ++i) {
    if (!(stream[i].timestamp_s > stream[i - 1].timestamp_s)) {
      throw ValidationError("timeline: timestamps of video " + video_id + " are not strictly increasing at frame " +
                            std::to_string(stream[i].frame_index));
    }
  }
  Timeline t;
  t.video_id = video_id;
  const double end = stream.size() == 1 ? stream[0].timestamp_s + kSingleFrameDuration : stream.back().timestamp_s;
  std::size_t begin = 0;
  while (begin < stream.size()) {
    std::size_t last = begin;
    double conf = stream[begin].confidence;
    while (last + 1 < stream.size() && stream[last + 1].label == stream[begin].label) conf += stream[++last].confidence;
    TimelineSegment s;
    s.class_id = stream[begin].label;
    s.start_s = t.segments.empty() ? stream[0].timestamp_s : t.segments.back().end_s;
    s.end_s = last + 1 < stream.size() ? 0.5 * (stream[last].timestamp_s + stream[last + 1].timestamp_s) : end;
    s.mean_confidence = conf / static_cast<double>(last - begin + 1);
    s.first_frame = stream[begin].frame_index;
    s.last_frame = stream[last].frame_index;
    t.segments.push_back(s);
    t.narrative.push_back({s.start_s, s.end_s, narrative_for(vocab, s.class_id)});
    begin = last + 1;
  }
  return t;
}

namespace {

void check_single_video(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw ValidationError("timeline: empty prediction list");
  for (const auto& p : preds) {
    if (p.video_id != preds.front().video_id) {
      throw ValidationError("timeline: predictions span videos " + preds.front().video_id + " and " + p.video_id);
    }
    if (p.ranking.empty() || p.scores.empty()) throw ValidationError("timeline: prediction without ranking");
  }
}

}  // namespace

Timeline build_timeline(const std::vector<Prediction>& preds, const ClassVocabulary& vocab, int window) {
  check_single_video(preds);
  std::vector<ClassId> raw;
  raw.reserve(preds.size());
  for (const auto& p : preds) raw.push_back(p.ranking.front());
  const auto smoothed = smooth_labels(raw, window);
  std::vector<TimedLabel> stream;
  stream.reserve(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    stream.push_back({preds[i].frame_index, preds[i].timestamp_s, smoothed[i], preds[i].scores.front()});
  }
  return segments_from_stream(preds.front().video_id, stream, vocab);
}

Timeline build_timeline(const std::vector<FrameRecord>& frames, const std::vector<Prediction>& preds,
                        const ClassVocabulary& vocab, int window) {
  if (frames.size() != preds.size()) {
    throw ValidationError("timeline: " + std::to_string(frames.size()) + " frames but " +
                          std::to_string(preds.size()) + " predictions");
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].video_id != preds[i].video_id || frames[i].frame_index != preds[i].frame_index) {
      throw ValidationError("timeline: frame " + std::to_string(i) + " (" + frames[i].video_id + "#" +
                            std::to_string(frames[i].frame_index) + ") does not match its prediction");
    }
  }
  return build_timeline(preds, vocab, window);
}

Timeline truth_timeline(const std::vector<Prediction>& preds, const ClassVocabulary& vocab) {
  check_single_video(preds);
  std::vector<TimedLabel> stream;
  for (const auto& p : preds) {
    if (!p.true_label) throw ValidationError("timeline: frame " + std::to_string(p.frame_index) + " has no true label");
    stream.push_back({p.frame_index, p.timestamp_s, *p.true_label, 1.0});
  }
  return segments_from_stream(preds.front().video_id, stream, vocab);
}

PhaseDiagram export_phase_diagram(const Timeline& predicted, const Timeline& truth, const std::vector<double>& grid) {
  if (predicted.segments.empty() || truth.segments.empty()) throw ValidationError("phase diagram: empty timeline");
  constexpr double tol = 1e-9;
  if (std::abs(predicted.start_s() - truth.start_s()) > tol || std::abs(predicted.end_s() - truth.end_s()) > tol) {
    throw ValidationError("phase diagram: span mismatch [" + format_real(predicted.start_s()) + ", " +
                          format_real(predicted.end_s()) + "] vs [" + format_real(truth.start_s()) + ", " +
                          format_real(truth.end_s()) + "]");
  }
  if (grid.empty()) throw ValidationError("phase diagram: empty grid");
  PhaseDiagram d;
  std::map<ClassId, std::pair<std::size_t, std::size_t>> tally;  // (matches, occurrences)
  std::size_t matches = 0;
  for (double t : grid) {
    d.time_s.push_back(t);
    d.predicted.push_back(predicted.label_at(t));
    d.truth.push_back(truth.label_at(t));
    auto& [m, total] = tally[d.truth.back()];
    ++total;
    if (d.predicted.back() == d.truth.back()) {
      ++m;
      ++matches;
    }
  }
  for (const auto* tl : {&truth, &predicted}) {
    for (const auto& s : tl->segments) {
      if (std::find(d.classes.begin(), d.classes.end(), s.class_id) == d.classes.end()) d.classes.push_back(s.class_id);
    }
  }
  for (const auto& c : d.classes) {
    const auto it = tally.find(c);
    d.agreement[c] = it == tally.end() ? std::nullopt
                                       : std::optional<double>(static_cast<double>(it->second.first) / it->second.second);
  }
  d.overall_agreement = static_cast<double>(matches) / static_cast<double>(grid.size());
  return d;
}

PhaseDiagram export_phase_diagram(const Timeline& predicted, const Timeline& truth, double step) {
  if (!(step > 0)) throw ValidationError("phase diagram: step must be positive");
  if (truth.segments.empty()) throw ValidationError("phase diagram: empty timeline");
  std::vector<double> grid;
  const double start = truth.start_s(), end = truth.end_s();
  for (std::size_t i = 0;; ++i) {
    const double t = start + static_cast<double>(i) * step;
    if (t > end) break;
    grid.push_back(t);
  }
  if (grid.back() < end) grid.push_back(end);
  return export_phase_diagram(predicted, truth, grid);
}

std::string PhaseDiagram::to_csv() const {
  std::ostringstream out;
  out << "time_s,predicted,truth\n";
  for (std::size_t i = 0; i < time_s.size(); ++i) out << format_real(time_s[i]) << ',' << predicted[i] << ',' << truth[i] << '\n';
  return out.str();
}

nlohmann::ordered_json PhaseDiagram::agreement_json() const {
  nlohmann::ordered_json j;
  j["overall"] = overall_agreement;
  auto& per = j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& c : classes) {
    const auto& v = agreement.at(c);
    per[c] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  }
  return j;
}

std::vector<std::vector<Prediction>> group_by_video(const std::vector<Prediction>& preds) {
  std::vector<std::vector<Prediction>> groups;
  std::map<std::string, std::size_t> where;
  for (const auto& p : preds) {
    const auto [it, fresh] = where.emplace(p.video_id, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(p);
  }
  for (auto& g : groups) {
    std::stable_sort(g.begin(), g.end(), [](const Prediction& a, const Prediction& b) { return a.frame_index < b.frame_index; });
  }
  return groups;
}

}  // namespace surgline
