#include "surgline/metrics.hpp"

#include <algorithm>
#include <sstream>

namespace surgline {

namespace {

std::map<ClassId, std::size_t> index_classes(const std::vector<ClassId>& classes) {
  if (classes.empty()) throw ValidationError("metrics: empty class list");
  std::map<ClassId, std::size_t> idx;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!idx.emplace(classes[i], i).second) throw ValidationError("metrics: duplicate class " + classes[i]);
  }
  return idx;
}

std::size_t require_class(const std::map<ClassId, std::size_t>& idx, const std::string& label, const char* role) {
  const auto it = idx.find(label);
  if (it == idx.end()) throw ValidationError(std::string("metrics: ") + role + " label '" + label + "' outside vocabulary");
  return it->second;
}

void check_prediction(const Prediction& p) {
  if (!p.true_label) {
    throw ValidationError("metrics: frame " + p.video_id + "#" + std::to_string(p.frame_index) + " has no true label");
  }
  if (p.ranking.empty()) throw ValidationError("metrics: empty ranking");
}

nlohmann::ordered_json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

double MetricsReport::top(int k) const {
  const auto it = overall_topk.find(k);
  if (it == overall_topk.end()) throw ValidationError("top-" + std::to_string(k) + " was not evaluated");
  return it->second;
}

MetricsReport evaluate(const std::vector<Prediction>& preds, const std::vector<ClassId>& classes,
                       const std::vector<int>& k_set) {
  if (preds.empty()) throw ValidationError("evaluate: empty prediction list");
  const auto idx = index_classes(classes);
  std::vector<int> ks = k_set;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (int k : ks) {
    if (k < 1 || k > static_cast<int>(classes.size())) {
      throw ValidationError("evaluate: k=" + std::to_string(k) + " outside 1.." + std::to_string(classes.size()));
    }
  }

  const std::size_t c = classes.size();
  std::vector<std::size_t> support(c, 0), predicted(c, 0), correct(c, 0);
  std::map<int, std::vector<std::size_t>> hits;
  for (int k : ks) hits[k].assign(c, 0);
  for (const auto& p : preds) {
    check_prediction(p);
    const auto t = require_class(idx, *p.true_label, "true");
    const auto top1 = require_class(idx, p.ranking.front(), "predicted");
    ++support[t];
    ++predicted[top1];
    correct[t] += top1 == t;
    for (int k : ks) {
      if (static_cast<int>(p.ranking.size()) < k) {
        throw ValidationError("evaluate: ranking has " + std::to_string(p.ranking.size()) + " entries, need " +
                              std::to_string(k));
      }
      const auto end = p.ranking.begin() + k;
      hits[k][t] += std::find(p.ranking.begin(), end, *p.true_label) != end;
    }
  }

  MetricsReport r;
  r.classes = classes;
  r.n_frames = preds.size();
  const double n = static_cast<double>(preds.size());
  for (int k : ks) {
    std::size_t total = 0;
    for (auto h : hits[k]) total += h;
    r.overall_topk[k] = static_cast<double>(total) / n;
  }
  std::size_t macro_n = 0;
  for (std::size_t i = 0; i < c; ++i) {
    ClassMetrics m;
    m.support = support[i];
    m.predicted = predicted[i];
    for (int k : ks) {
      m.topk[k] = support[i] ? std::optional<double>(static_cast<double>(hits[k][i]) / support[i]) : std::nullopt;
    }
    m.precision = predicted[i] ? static_cast<double>(correct[i]) / predicted[i] : 0.0;
    m.recall = support[i] ? static_cast<double>(correct[i]) / support[i] : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    const double w = static_cast<double>(support[i]) / n;
    r.precision += w * m.precision;
    r.f1 += w * m.f1;
    if (support[i] || predicted[i]) {
      ++macro_n;
      r.macro_precision += m.precision;
      r.macro_recall += m.recall;
      r.macro_f1 += m.f1;
    }
    r.per_class.emplace(classes[i], std::move(m));
  }
  // Support-weighted recall reduces to plain accuracy; computing it from the
  // totals keeps the identity exact in floating point.
  std::size_t all_correct = 0;
  for (auto v : correct) all_correct += v;
  r.recall = static_cast<double>(all_correct) / n;
  r.macro_precision /= static_cast<double>(macro_n);
  r.macro_recall /= static_cast<double>(macro_n);
  r.macro_f1 /= static_cast<double>(macro_n);
  return r;
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_frames"] = n_frames;
  for (const auto& [k, v] : overall_topk) j["overall_top" + std::to_string(k)] = v;
  j["weighted"] = {{"precision", precision}, {"recall", recall}, {"f1", f1}};
  j["macro"] = {{"precision", macro_precision}, {"recall", macro_recall}, {"f1", macro_f1}};
  auto& pc = j["per_class"] = nlohmann::ordered_json::object();
  for (const auto& id : classes) {
    const auto& m = per_class.at(id);
    nlohmann::ordered_json e;
    e["support"] = m.support;
    for (const auto& [k, v] : m.topk) e["top" + std::to_string(k)] = optional_json(v);
    e["precision"] = m.precision;
    e["recall"] = m.recall;
    e["f1"] = m.f1;
    pc[id] = e;
  }
  return j;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "class,support";
  for (const auto& [k, _] : overall_topk) out << ",top" << k;
  out << ",precision,recall,f1\n";
  for (const auto& id : classes) {
    const auto& m = per_class.at(id);
    out << id << ',' << m.support;
    for (const auto& [k, v] : m.topk) out << ',' << (v ? format_real(*v) : "");
    out << ',' << format_real(m.precision) << ',' << format_real(m.recall) << ',' << format_real(m.f1) << '\n';
  }
  out << "overall," << n_frames;
  for (const auto& [_, v] : overall_topk) out << ',' << format_real(v);
  out << ',' << format_real(precision) << ',' << format_real(recall) << ',' << format_real(f1) << '\n';
  return out.str();
}

ConfusionMatrix confusion(const std::vector<Prediction>& preds, const std::vector<ClassId>& classes) {
  if (preds.empty()) throw ValidationError("confusion: empty prediction list");
  const auto idx = index_classes(classes);
  ConfusionMatrix m;
  m.classes = classes;
  m.counts = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes.size()), static_cast<Eigen::Index>(classes.size()));
  for (const auto& p : preds) {
    check_prediction(p);
    const auto t = require_class(idx, *p.true_label, "true");
    const auto y = require_class(idx, p.ranking.front(), "predicted");
    m.counts(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(y)) += 1.0;
  }
  return m;
}

std::size_t ConfusionMatrix::total() const { return static_cast<std::size_t>(counts.sum()); }

Eigen::MatrixXd ConfusionMatrix::normalized() const {
  Eigen::MatrixXd out = counts;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double s = out.row(i).sum();
    if (s > 0) out.row(i) /= s;
  }
  return out;
}

std::vector<bool> ConfusionMatrix::empty_rows() const {
  std::vector<bool> out;
  for (Eigen::Index i = 0; i < counts.rows(); ++i) out.push_back(counts.row(i).sum() == 0);
  return out;
}

std::string ConfusionMatrix::to_csv(bool normalize) const {
  const Eigen::MatrixXd v = normalize ? normalized() : counts;
  std::ostringstream out;
  out << "true\\pred";
  for (const auto& c : classes) out << ',' << c;
  out << '\n';
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    out << classes[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
      if (normalize) out << ',' << format_real(v(i, j));
      else out << ',' << static_cast<long long>(v(i, j));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace surgline
