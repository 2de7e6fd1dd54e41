#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "surgline/metrics.hpp"

using namespace surgline;

namespace {

std::vector<Prediction> toy(const std::vector<std::pair<ClassId, ClassId>>& pairs, const std::vector<ClassId>& classes,
                            std::size_t k) {
  Rng rng(1);
  std::vector<Prediction> out;
  std::int64_t f = 0;
  for (const auto& [t, p] : pairs) out.push_back(testing::ranked_prediction(rng, classes, t, p, k, f, 0.2 * f)), ++f;
  return out;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("all correct") {
    const auto classes = testing::class_names(7);
    std::vector<std::pair<ClassId, ClassId>> pairs;
    for (int i = 0; i < 21; ++i) pairs.emplace_back(classes[i % 7], classes[i % 7]);
    const auto r = evaluate(toy(pairs, classes, 5), classes);
    CHECK(r.top(1) == 1.0);
    CHECK(r.top(5) == 1.0);
    CHECK(r.f1 == doctest::Approx(1.0));
    const auto cm = confusion(toy(pairs, classes, 5), classes);
    CHECK(Matrix(cm.counts.diagonal().asDiagonal()) == cm.counts);
  }

  TEST_CASE("hand-counted three-class toy set") {
    const std::vector<ClassId> classes{"A", "B", "C"};
    std::vector<std::pair<ClassId, ClassId>> pairs{{"A", "B"}, {"A", "A"}, {"A", "A"}, {"A", "A"}, {"B", "B"},
                                                   {"B", "B"}, {"B", "B"}, {"C", "C"}, {"C", "C"}, {"C", "C"}};
    const auto r = evaluate(toy(pairs, classes, 1), classes, {1});
    CHECK(r.top(1) == doctest::Approx(0.9));
    CHECK(r.per_class.at("A").precision == doctest::Approx(1.0));
    CHECK(r.per_class.at("A").recall == doctest::Approx(0.75));
    CHECK(r.per_class.at("A").f1 == doctest::Approx(6.0 / 7.0));
    CHECK(r.per_class.at("B").precision == doctest::Approx(0.75));
    CHECK(r.per_class.at("B").recall == doctest::Approx(1.0));
    CHECK(r.per_class.at("B").predicted == 4);
    CHECK(r.per_class.at("C").f1 == doctest::Approx(1.0));
    CHECK(r.precision == doctest::Approx(0.925));
    CHECK(r.recall == doctest::Approx(0.9));
    CHECK(r.f1 == doctest::Approx(0.9));
    CHECK(*r.per_class.at("A").topk.at(1) == doctest::Approx(0.75));
  }

  TEST_CASE("single confusion") {
    const auto classes = testing::class_names(7);
    const auto cm = confusion(toy({{"C1", "C3"}}, classes, 1), classes);
    CHECK(cm.counts(0, 2) == 1);
    CHECK(cm.total() == 1);
    const Matrix n = cm.normalized();
    CHECK(n(0, 2) == 1.0);
    CHECK(n.row(0).sum() == 1.0);
    CHECK(cm.empty_rows()[1]);
    CHECK(cm.to_csv(false).rfind("true\\pred,C1,", 0) == 0);
  }

  TEST_CASE("random 200-frame sets tally correctly") {
    const auto classes = testing::class_names(6);
    Rng rng(33);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::pair<ClassId, ClassId>> pairs;
      std::map<ClassId, std::size_t> support;
      for (int i = 0; i < 200; ++i) {
        pairs.emplace_back(classes[rng.uniform_index(6)], classes[rng.uniform_index(6)]);
        ++support[pairs.back().first];
      }
      const auto preds = toy(pairs, classes, 5);
      const auto cm = confusion(preds, classes);
      CHECK(cm.total() == 200);
      for (std::size_t c = 0; c < classes.size(); ++c)
        CHECK(cm.counts.row(static_cast<Eigen::Index>(c)).sum() == static_cast<double>(support[classes[c]]));
      const auto r = evaluate(preds, classes);
      CHECK(r.top(5) >= r.top(1));
      CHECK(std::abs(r.recall - r.top(1)) < 1e-12);
      CHECK(std::abs(cm.counts.trace() / 200.0 - r.top(1)) < 1e-12);
    }
  }

  TEST_CASE("stored gesture dump reproduces its marginals") {
    const auto preds = load_predictions(testing::fixture("reference_gesture_predictions.csv"));
    const auto r = evaluate(preds, bundled_vocabulary(Task::gesture).class_ids());
    CHECK(std::round(r.top(1) * 1e4) == 5917);
    CHECK(std::round(r.precision * 1e4) == 6529);
    CHECK(std::round(r.recall * 1e4) == 5917);
    CHECK(std::round(r.f1 * 1e4) == 6110);
  }

  TEST_CASE("input errors") {
    const auto classes = testing::class_names(3);
    CHECK_THROWS_AS(evaluate({}, classes), ValidationError);
    CHECK_THROWS_WITH_AS(evaluate(toy({{"C9", "C1"}}, testing::class_names(9), 1), classes, {1}),
                         doctest::Contains("outside vocabulary"), ValidationError);
    CHECK_THROWS_AS(evaluate(toy({{"C1", "C1"}}, classes, 3), classes, {5}), ValidationError);
    CHECK_THROWS_AS(evaluate(toy({{"C1", "C1"}}, classes, 1), classes, {2}), ValidationError);
    auto unlabeled = toy({{"C1", "C1"}}, classes, 1);
    unlabeled[0].true_label.reset();
    CHECK_THROWS_AS(evaluate(unlabeled, classes, {1}), ValidationError);
  }

  TEST_CASE("report serializations") {
    const auto classes = testing::class_names(3);
    const auto r = evaluate(toy({{"C1", "C1"}, {"C2", "C1"}}, classes, 3), classes, {1, 3});
    const auto j = r.to_json();
    CHECK(j.contains("per_class"));
    CHECK(r.to_csv().find("overall") != std::string::npos);
    CHECK_FALSE(r.per_class.at("C3").topk.at(1).has_value());
  }
}
