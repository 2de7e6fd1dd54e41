#include "surgline/zeroshot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace surgline {

std::string to_string(Aggregation aggregation) {
  switch (aggregation) {
    case Aggregation::mean_of_texts: return "mean_of_texts";
    case Aggregation::canonical_only: return "canonical_only";
    case Aggregation::max_sim: return "max_sim";
  }
  return "?";
}

Aggregation aggregation_from_string(std::string_view name) {
  if (name == "mean_of_texts") return Aggregation::mean_of_texts;
  if (name == "canonical_only") return Aggregation::canonical_only;
  if (name == "max_sim") return Aggregation::max_sim;
  throw ValidationError("unknown aggregation '" + std::string(name) + "'");
}

ClassPrototypeSet prototypes_from_text_embeddings(const std::vector<ClassId>& class_ids,
                                                  const std::vector<EmbeddingMatrix>& per_class,
                                                  Aggregation aggregation) {
  if (class_ids.empty() || class_ids.size() != per_class.size()) {
    throw ValidationError("prototypes: need one text embedding set per class");
  }
  const Eigen::Index dim = per_class.front().dim();
  ClassPrototypeSet set;
  set.class_ids = class_ids;
  set.aggregation = aggregation;
  set.prototypes.resize(static_cast<Eigen::Index>(class_ids.size()), dim);
  std::vector<RowVector> rows;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const Matrix& t = per_class[c].values();
    if (t.rows() == 0 || t.cols() != dim) throw ValidationError("prototypes: bad text set for " + class_ids[c]);
    const Eigen::Index used = aggregation == Aggregation::canonical_only ? 1 : t.rows();
    const RowVector mean = t.topRows(used).colwise().mean();
    const double norm = mean.norm();
    if (!(norm > 0.0)) throw ValidationError("prototypes: texts of " + class_ids[c] + " cancel out");
    set.prototypes.row(static_cast<Eigen::Index>(c)) = mean / norm;
    for (Eigen::Index r = 0; r < used; ++r) {
      rows.push_back(t.row(r));
      set.text_class.push_back(c);
    }
  }
  set.texts.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) set.texts.row(static_cast<Eigen::Index>(r)) = rows[r];
  return set;
}

ClassPrototypeSet build_prototypes(const DualEncoder& enc, const ClassVocabulary& vocab, Aggregation aggregation) {
  const auto mode = aggregation == Aggregation::canonical_only ? PromptMode::canonical_only : PromptMode::all_texts;
  std::vector<std::string> prompts;
  std::vector<std::size_t> counts;
  for (const auto& e : vocab.entries()) {
    const auto p = prompts_for_class(vocab, e.id, mode);
    counts.push_back(p.size());
    prompts.insert(prompts.end(), p.begin(), p.end());
  }
  const Matrix all = enc.encode_texts(prompts).values();
  std::vector<EmbeddingMatrix> per_class;
  Eigen::Index offset = 0;
  for (auto n : counts) {
    per_class.emplace_back(all.middleRows(offset, static_cast<Eigen::Index>(n)));
    offset += static_cast<Eigen::Index>(n);
  }
  return prototypes_from_text_embeddings(vocab.class_ids(), per_class, aggregation);
}

Matrix class_similarities(const EmbeddingMatrix& frames, const ClassPrototypeSet& protos) {
  if (frames.dim() != protos.prototypes.cols()) throw ValidationError("frame/prototype dimension mismatch");
  if (protos.aggregation != Aggregation::max_sim) return frames.values() * protos.prototypes.transpose();
  const Matrix per_text = frames.values() * protos.texts.transpose();
  Matrix sim = Matrix::Constant(frames.rows(), static_cast<Eigen::Index>(protos.size()),
                                -std::numeric_limits<double>::infinity());
  for (Eigen::Index j = 0; j < per_text.cols(); ++j) {
    const auto c = static_cast<Eigen::Index>(protos.text_class[static_cast<std::size_t>(j)]);
    sim.col(c) = sim.col(c).cwiseMax(per_text.col(j));
  }
  return sim;
}

std::vector<Prediction> predict_topk(const EmbeddingMatrix& frames, const ClassPrototypeSet& protos,
                                     double logit_scale, int k) {
  const int n_classes = static_cast<int>(protos.size());
  if (k < 1 || k > n_classes) {
    throw ValidationError("k=" + std::to_string(k) + " out of range 1.." + std::to_string(n_classes));
  }
  const Matrix sim = class_similarities(frames, protos);
  std::vector<Prediction> out(static_cast<std::size_t>(frames.rows()));
  std::vector<int> order(static_cast<std::size_t>(n_classes));
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    const RowVector z = logit_scale * sim.row(i);
    const RowVector e = (z.array() - z.maxCoeff()).exp();
    const RowVector p = e / e.sum();
    std::iota(order.begin(), order.end(), 0);
    // Rank on cosines: softmax is monotone, and vectorized exp can split exact ties.
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sim(i, a) > sim(i, b); });
    auto& pred = out[static_cast<std::size_t>(i)];
    for (int r = 0; r < k; ++r) {
      const int c = order[static_cast<std::size_t>(r)];
      pred.ranking.push_back(protos.class_ids[static_cast<std::size_t>(c)]);
      pred.scores.push_back(p(c));
      pred.cosines.push_back(sim(i, c));
    }
  }
  return out;
}

std::vector<Prediction> predict_topk(const DualEncoder& enc, const ClassPrototypeSet& protos,
                                     const std::vector<FrameRecord>& records, const FrameDecoder& decoder, int k,
                                     int batch_size) {
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  std::vector<Prediction> out;
  out.reserve(records.size());
  for (std::size_t begin = 0; begin < records.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(records.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<Image> images;
    for (std::size_t i = begin; i < end; ++i) images.push_back(decoder.decode(records[i].image));
    auto preds = predict_topk(enc.encode_images(images), protos, enc.logit_scale(), k);
    for (std::size_t i = begin; i < end; ++i) {
      auto& p = preds[i - begin];
      p.video_id = records[i].video_id;
      p.frame_index = records[i].frame_index;
      p.timestamp_s = records[i].timestamp_s;
      p.true_label = records[i].label;
      out.push_back(std::move(p));
    }
  }
  return out;
}

double top1_accuracy(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw ValidationError("top1_accuracy: empty prediction list");
  std::size_t hits = 0;
  for (const auto& p : preds) {
    if (!p.true_label) throw ValidationError("top1_accuracy: prediction without true label");
    hits += !p.ranking.empty() && p.ranking.front() == *p.true_label;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

namespace {

void check_field(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) throw ValidationError("CSV field contains a delimiter: " + s);
}

template <typename T>
T parse_number(const std::string& s, std::size_t line, const char* what) {
  T v{};
  const auto* b = s.data();
  const auto r = std::from_chars(b, b + s.size(), v);
  if (r.ec != std::errc() || r.ptr != b + s.size()) {
    throw ParseError("predictions line " + std::to_string(line) + ": bad " + what + " '" + s + "'");
  }
  return v;
}

}  // namespace

std::string serialize_predictions(const std::vector<Prediction>& preds) {
  std::size_t k = preds.empty() ? 0 : preds.front().ranking.size();
  bool with_cosines = !preds.empty();
  for (const auto& p : preds) {
    if (p.ranking.size() != k || p.scores.size() != k) throw ValidationError("predictions disagree on k");
    with_cosines = with_cosines && p.cosines.size() == k;
  }
  std::ostringstream out;
  out << "video_id,frame_index,timestamp_s,true_label";
  for (std::size_t r = 1; r <= k; ++r) out << ",top" << r;
  for (std::size_t r = 1; r <= k; ++r) out << ",score_top" << r;
  if (with_cosines)
    for (std::size_t r = 1; r <= k; ++r) out << ",cosine_top" << r;
  out << '\n';
  for (const auto& p : preds) {
    check_field(p.video_id);
    out << p.video_id << ',' << p.frame_index << ',' << format_real(p.timestamp_s) << ','
        << p.true_label.value_or("");
    for (const auto& c : p.ranking) {
      check_field(c);
      out << ',' << c;
    }
    for (double s : p.scores) out << ',' << format_real(s);
    if (with_cosines)
      for (double s : p.cosines) out << ',' << format_real(s);
    out << '\n';
  }
  return out.str();
}

std::vector<Prediction> parse_predictions(std::string_view csv_text) {
  const auto lines = split(csv_text, '\n');
  if (lines.empty() || trim(lines[0]).empty()) throw ParseError("predictions: missing header");
  const auto header = split(trim(lines[0]), ',');
  if (header.size() < 6 || header[0] != "video_id" || header[1] != "frame_index" || header[2] != "timestamp_s" ||
      header[3] != "true_label") {
    throw ParseError("predictions: unexpected header '" + trim(lines[0]) + "'");
  }
  std::size_t k = 0;
  while (4 + k < header.size() && header[4 + k] == "top" + std::to_string(k + 1)) ++k;
  if (k == 0) throw ParseError("predictions: no top1 column");
  for (std::size_t r = 0; r < k; ++r) {
    if (4 + k + r >= header.size() || header[4 + k + r] != "score_top" + std::to_string(r + 1)) {
      throw ParseError("predictions: expected score_top" + std::to_string(r + 1) + " column");
    }
  }
  const bool with_cosines = header.size() == 4 + 3 * k;
  if (!with_cosines && header.size() != 4 + 2 * k) throw ParseError("predictions: unexpected column count");
  std::vector<Prediction> out;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const auto line = trim(lines[ln]);
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != header.size()) {
      throw ParseError("predictions line " + std::to_string(ln + 1) + ": expected " + std::to_string(header.size()) +
                       " fields, got " + std::to_string(f.size()));
    }
    Prediction p;
    p.video_id = f[0];
    p.frame_index = parse_number<std::int64_t>(f[1], ln + 1, "frame_index");
    p.timestamp_s = parse_number<double>(f[2], ln + 1, "timestamp_s");
    if (!f[3].empty()) p.true_label = f[3];
    for (std::size_t r = 0; r < k; ++r) {
      p.ranking.push_back(f[4 + r]);
      p.scores.push_back(parse_number<double>(f[4 + k + r], ln + 1, "score"));
      if (with_cosines) p.cosines.push_back(parse_number<double>(f[4 + 2 * k + r], ln + 1, "cosine"));
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path) { return parse_predictions(read_file(path)); }

}  // namespace surgline
