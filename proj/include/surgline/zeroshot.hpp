#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "surgline/contrastive.hpp"
#include "surgline/dualenc.hpp"
#include "surgline/ingest.hpp"
#include "surgline/vocab.hpp"

namespace surgline {

enum class Aggregation { mean_of_texts, canonical_only, max_sim };

std::string to_string(Aggregation aggregation);
Aggregation aggregation_from_string(std::string_view name);

/// Text-side class representation. `prototypes` holds one unit row per class
/// (for max_sim it is still the renormalized mean, kept for inspection);
/// `texts` holds every text embedding with `text_class` mapping rows to
/// classes.
struct ClassPrototypeSet {
  std::vector<ClassId> class_ids;
  Aggregation aggregation = Aggregation::mean_of_texts;
  Matrix prototypes;
  Matrix texts;
  std::vector<std::size_t> text_class;

  std::size_t size() const { return class_ids.size(); }
};

/// Builds prototypes from per-class text embeddings (row 0 = canonical).
ClassPrototypeSet prototypes_from_text_embeddings(const std::vector<ClassId>& class_ids,
                                                  const std::vector<EmbeddingMatrix>& per_class,
                                                  Aggregation aggregation);
ClassPrototypeSet build_prototypes(const DualEncoder& enc, const ClassVocabulary& vocab, Aggregation aggregation);

struct Prediction {
  std::string video_id;
  std::int64_t frame_index = 0;
  double timestamp_s = 0.0;
  std::optional<ClassId> true_label;
  std::vector<ClassId> ranking;  // length k, best first
  std::vector<double> scores;    // softmax confidences matching `ranking`
  std::vector<double> cosines;   // raw cosine similarities matching `ranking`
};

/// C-column cosine similarity of each frame to each class.
Matrix class_similarities(const EmbeddingMatrix& frames, const ClassPrototypeSet& protos);

/// Ranks classes by softmax(logit_scale * cosine). Equal scores keep
/// vocabulary order. Frame provenance fields are left default.
std::vector<Prediction> predict_topk(const EmbeddingMatrix& frames, const ClassPrototypeSet& protos,
                                     double logit_scale, int k);

/// Encodes `records` in batches and fills provenance and true labels.
std::vector<Prediction> predict_topk(const DualEncoder& enc, const ClassPrototypeSet& protos,
                                     const std::vector<FrameRecord>& records, const FrameDecoder& decoder, int k,
                                     int batch_size = 64);

/// Top-1 accuracy of predictions carrying true labels.
double top1_accuracy(const std::vector<Prediction>& preds);

/// CSV: video_id,frame_index,timestamp_s,true_label,top1..topk,score_top1..score_topk,cosine_top1..cosine_topk.
/// The cosine columns are optional on read.
std::string serialize_predictions(const std::vector<Prediction>& preds);
std::vector<Prediction> parse_predictions(std::string_view csv_text);
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace surgline
