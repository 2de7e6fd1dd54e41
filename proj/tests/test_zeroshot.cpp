#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "surgline/zeroshot.hpp"

using namespace surgline;

TEST_SUITE("zeroshot") {
  TEST_CASE("prototypes from the phase bank") {
    const auto enc = DualEncoder::surrogate(2);
    const auto vocab = bundled_vocabulary(Task::phase);
    for (auto agg : {Aggregation::mean_of_texts, Aggregation::canonical_only, Aggregation::max_sim}) {
      const auto p = build_prototypes(enc, vocab, agg);
      CHECK(p.prototypes.rows() == 7);
      for (Eigen::Index i = 0; i < 7; ++i) CHECK(std::abs(p.prototypes.row(i).norm() - 1.0) < 1e-9);
    }
    const auto canon = build_prototypes(enc, vocab, Aggregation::canonical_only);
    const std::vector<std::string> p4{vocab.entry("P4").canonical};
    CHECK((canon.prototypes.row(3) - enc.encode_texts(p4).values().row(0)).norm() < 1e-12);
  }

  TEST_CASE("identical texts give that embedding") {
    Rng rng(1);
    const Matrix u = testing::random_unit_rows(rng, 1, 6);
    Matrix five(5, 6);
    for (int i = 0; i < 5; ++i) five.row(i) = u.row(0);
    const auto p = prototypes_from_text_embeddings({"A", "B"}, {EmbeddingMatrix(five), EmbeddingMatrix(testing::random_unit_rows(rng, 5, 6))},
                                                   Aggregation::mean_of_texts);
    CHECK((p.prototypes.row(0) - u.row(0)).norm() < 1e-12);
  }

  TEST_CASE("mean prototype matches the renormalized-mean oracle") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<EmbeddingMatrix> sets;
      for (int c = 0; c < 3; ++c) sets.emplace_back(testing::random_unit_rows(rng, 5, 12));
      const auto p = prototypes_from_text_embeddings({"A", "B", "C"}, sets, Aggregation::mean_of_texts);
      for (int c = 0; c < 3; ++c) {
        std::vector<long double> mean(12, 0);
        for (int i = 0; i < 5; ++i)
          for (int d = 0; d < 12; ++d) mean[d] += sets[c].values()(i, d) / 5.0L;
        long double norm = 0;
        for (auto v : mean) norm += v * v;
        norm = std::sqrt(norm);
        for (int d = 0; d < 12; ++d) CHECK(std::abs(p.prototypes(c, d) - static_cast<double>(mean[d] / norm)) < 1e-6);
      }
    }
  }

  TEST_CASE("nearest prototype wins") {
    Matrix protos = Matrix::Identity(7, 7);
    std::vector<EmbeddingMatrix> sets;
    for (int c = 0; c < 7; ++c) sets.emplace_back(Matrix(protos.row(c)));
    std::vector<ClassId> ids;
    for (int c = 0; c < 7; ++c) ids.push_back("P" + std::to_string(c + 1));
    const auto set = prototypes_from_text_embeddings(ids, sets, Aggregation::canonical_only);
    const auto preds = predict_topk(EmbeddingMatrix(Matrix(protos.row(2))), set, 100.0, 7);
    REQUIRE(preds.size() == 1);
    CHECK(preds[0].ranking[0] == "P3");
    auto sorted = preds[0].ranking;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<ClassId>{"P1", "P2", "P3", "P4", "P5", "P6", "P7"});
    // Remaining classes tie and keep vocabulary order.
    CHECK(preds[0].ranking[1] == "P1");
    CHECK(preds[0].ranking[6] == "P7");
    double total = 0;
    for (double s : preds[0].scores) total += s;
    CHECK(total == doctest::Approx(1.0));
    CHECK_THROWS_AS(predict_topk(EmbeddingMatrix(Matrix(protos.row(2))), set, 100.0, 8), ValidationError);
    CHECK_THROWS_AS(predict_topk(EmbeddingMatrix(Matrix(protos.row(2))), set, 100.0, 0), ValidationError);
  }

  TEST_CASE("max_sim uses the closest text") {
    Matrix a(2, 2), b(2, 2);
    a << 1, 0, 0, 1;
    b << std::sqrt(0.5), std::sqrt(0.5), std::sqrt(0.5), -std::sqrt(0.5);
    const auto set = prototypes_from_text_embeddings({"A", "B"}, {EmbeddingMatrix(a), EmbeddingMatrix(b)}, Aggregation::max_sim);
    Matrix f(1, 2);
    f << 1, 0;
    const Matrix s = class_similarities(EmbeddingMatrix(f), set);
    CHECK(s(0, 0) == doctest::Approx(1.0));
    CHECK(s(0, 1) == doctest::Approx(std::sqrt(0.5)));
  }

  TEST_CASE("prediction csv round trip") {
    Rng rng(2);
    const auto classes = testing::class_names(5);
    std::vector<Prediction> preds;
    for (int i = 0; i < 20; ++i) {
      auto p = testing::ranked_prediction(rng, classes, classes[rng.uniform_index(5)], classes[rng.uniform_index(5)], 3, i,
                                          0.2 * i);
      p.scores = {0.5 + 1e-13 * i, 0.3, 1.0 / 7.0};
      p.cosines = {0.9, -0.1, 1.0 / 3.0};
      preds.push_back(p);
    }
    const auto back = parse_predictions(serialize_predictions(preds));
    REQUIRE(back.size() == preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      CHECK(back[i].ranking == preds[i].ranking);
      CHECK(back[i].scores == preds[i].scores);
      CHECK(back[i].cosines == preds[i].cosines);
      CHECK(back[i].true_label == preds[i].true_label);
      CHECK(back[i].timestamp_s == preds[i].timestamp_s);
    }
    CHECK_THROWS_AS(parse_predictions("a,b\n"), ParseError);
  }

  TEST_CASE("encoder overload fills provenance") {
    const auto enc = DualEncoder::surrogate(3);
    const auto vocab = bundled_vocabulary(Task::phase);
    SynthOptions o;
    o.n_classes = 7;
    o.n_per_class = 2;
    o.image_size = 32;
    o.label_prefix = "P";
    const auto ds = synth_dataset(o);
    const auto protos = build_prototypes(enc, vocab, Aggregation::mean_of_texts);
    const DefaultFrameDecoder dec;
    const auto preds = predict_topk(enc, protos, ds.records, dec, 5, 4);
    REQUIRE(preds.size() == ds.records.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
      CHECK(preds[i].video_id == ds.records[i].video_id);
      CHECK(preds[i].true_label == ds.records[i].label);
      CHECK(preds[i].ranking.size() == 5);
      CHECK(std::is_sorted(preds[i].scores.rbegin(), preds[i].scores.rend()));
    }
  }
}
