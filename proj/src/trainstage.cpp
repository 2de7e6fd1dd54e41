#include "surgline/trainstage.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <sstream>

#include "surgline/contrastive.hpp"

namespace surgline {

std::string to_string(StageKind kind) {
  switch (kind) {
    case StageKind::gesture_ft: return "gesture_ft";
    case StageKind::phase_ft: return "phase_ft";
    case StageKind::control_phase_only: return "control_phase_only";
    case StageKind::control_phase_only_long: return "control_phase_only_long";
  }
  return "?";
}

std::string to_string(Balancing balancing) {
  switch (balancing) {
    case Balancing::upsample: return "upsample";
    case Balancing::downsample: return "downsample";
    case Balancing::none: return "none";
  }
  return "?";
}

std::string to_string(Selection selection) { return selection == Selection::last_epoch ? "last_epoch" : "best_val"; }

StageKind stage_kind_from_string(std::string_view name) {
  for (auto k : {StageKind::gesture_ft, StageKind::phase_ft, StageKind::control_phase_only,
                 StageKind::control_phase_only_long}) {
    if (name == to_string(k)) return k;
  }
  throw ValidationError("unknown stage '" + std::string(name) + "'");
}

Balancing balancing_from_string(std::string_view name) {
  for (auto b : {Balancing::upsample, Balancing::downsample, Balancing::none}) {
    if (name == to_string(b)) return b;
  }
  throw ValidationError("unknown balancing '" + std::string(name) + "'");
}

Selection selection_from_string(std::string_view name) {
  if (name == "last_epoch") return Selection::last_epoch;
  if (name == "best_val") return Selection::best_val;
  throw ValidationError("unknown selection rule '" + std::string(name) + "'");
}

Task stage_task(StageKind kind) { return kind == StageKind::gesture_ft ? Task::gesture : Task::phase; }

void StageConfig::validate() const {
  if (epochs <= 0) throw ValidationError("epochs must be > 0, got " + std::to_string(epochs));
  if (batch_size <= 0) throw ValidationError("batch_size must be > 0, got " + std::to_string(batch_size));
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be > 0, got " + format_real(learning_rate));
  }
  if (freeze.unfreeze_last_k < 0) throw ValidationError("unfreeze_last_k must be >= 0");
  if (stage == StageKind::phase_ft && init_from == kPretrainedBase) {
    throw ValidationError("phase_ft must be initialized from a gesture checkpoint, not the pretrained base");
  }
}

nlohmann::ordered_json StageConfig::to_json() const {
  return {{"stage", to_string(stage)},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"balancing", to_string(balancing)},
          {"freeze", freeze.to_json()},
          {"seed", seed},
          {"init_from", init_from},
          {"selection", to_string(selection)}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j, StageConfig base) {
  try {
    if (j.contains("stage")) base.stage = stage_kind_from_string(j["stage"].get<std::string>());
    if (j.contains("epochs")) base.epochs = j["epochs"].get<int>();
    if (j.contains("learning_rate")) base.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<int>();
    if (j.contains("balancing")) base.balancing = balancing_from_string(j["balancing"].get<std::string>());
    if (j.contains("freeze")) {
      const auto& f = j["freeze"];
      if (f.contains("unfreeze_last_k")) base.freeze.unfreeze_last_k = f["unfreeze_last_k"].get<int>();
      if (f.contains("train_projections")) base.freeze.train_projections = f["train_projections"].get<bool>();
      if (f.contains("train_logit_scale")) base.freeze.train_logit_scale = f["train_logit_scale"].get<bool>();
    }
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("init_from")) base.init_from = j["init_from"].get<std::string>();
    if (j.contains("selection")) base.selection = selection_from_string(j["selection"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("stage config: ") + e.what());
  }
  return base;
}

StageConfig StageConfig::from_json(const nlohmann::json& j) { return from_json(j, StageConfig{}); }

StageConfig stage_a_config() {
  StageConfig c;
  c.stage = StageKind::gesture_ft;
  c.epochs = 50;
  c.learning_rate = 5e-5;
  c.batch_size = 64;
  c.balancing = Balancing::upsample;
  c.freeze = FreezePolicy{3, false, false};
  return c;
}

StageConfig stage_b_config(const std::string& init_from) {
  StageConfig c;
  c.stage = StageKind::phase_ft;
  c.epochs = 15;
  c.learning_rate = 5e-5;
  c.batch_size = 32;
  c.balancing = Balancing::downsample;
  c.freeze = FreezePolicy{3, false, false};
  c.init_from = init_from;
  return c;
}

StageConfig control_config(bool long_run) {
  StageConfig c = stage_b_config(kPretrainedBase);
  c.stage = long_run ? StageKind::control_phase_only_long : StageKind::control_phase_only;
  c.epochs = long_run ? 65 : 15;
  return c;
}

StageConfig preset_config(StageKind kind) {
  switch (kind) {
    case StageKind::gesture_ft: return stage_a_config();
    case StageKind::phase_ft: return stage_b_config("");
    case StageKind::control_phase_only: return control_config(false);
    case StageKind::control_phase_only_long: return control_config(true);
  }
  return stage_a_config();
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_top1\n";
  for (const auto& h : history) {
    out << h.epoch << ',' << format_real(h.train_loss) << ',' << (h.val_loss ? format_real(*h.val_loss) : "") << ','
        << (h.val_top1 ? format_real(*h.val_top1) : "") << '\n';
  }
  return out.str();
}

namespace {

struct Adam {
  double lr;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::map<std::string, std::pair<Matrix, Matrix>> moments;

  explicit Adam(double learning_rate) : lr(learning_rate) {}

  void begin_step() { ++step; }

  void update(const std::string& name, Matrix& param, const Matrix& grad) {
    auto [it, fresh] = moments.try_emplace(name);
    auto& [m, v] = it->second;
    if (fresh) {
      m = Matrix::Zero(param.rows(), param.cols());
      v = Matrix::Zero(param.rows(), param.cols());
    }
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(step));
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

nlohmann::ordered_json history_json(const std::vector<EpochRecord>& history) {
  auto arr = nlohmann::ordered_json::array();
  const auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  for (const auto& h : history) {
    arr.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_loss", opt(h.val_loss)}, {"val_top1", opt(h.val_top1)}});
  }
  return arr;
}

std::vector<EpochRecord> history_from_json(const nlohmann::json& arr) {
  std::vector<EpochRecord> out;
  const auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()); };
  for (const auto& h : arr) {
    out.push_back({h.at("epoch").get<int>(), h.at("train_loss").get<double>(), opt(h.at("val_loss")), opt(h.at("val_top1"))});
  }
  return out;
}

struct PreparedFrames {
  std::vector<Matrix> patches;   // one per record
  std::vector<std::size_t> cls;  // vocabulary index per record
};

PreparedFrames prepare_frames(const DualEncoder& enc, const std::vector<FrameRecord>& records,
                              const ClassVocabulary& vocab, const FrameDecoder& decoder) {
  PreparedFrames out;
  std::map<std::string, std::size_t> seen;
  for (const auto& r : records) {
    const auto idx = vocab.index_of(r.label);
    if (!idx) {
      throw ValidationError("frame " + r.video_id + "#" + std::to_string(r.frame_index) + " has label '" + r.label +
                            "' outside the " + to_string(vocab.task()) + " vocabulary");
    }
    out.cls.push_back(*idx);
    const auto it = seen.find(r.image);
    if (it != seen.end()) {
      out.patches.push_back(out.patches[it->second]);
    } else {
      seen.emplace(r.image, out.patches.size());
      out.patches.push_back(enc.preprocess(decoder.decode(r.image)));
    }
  }
  return out;
}

// Contrastive loss and logit gradient for a batch of images against the
// texts chosen for it; returns the loss and fills the embedding gradients.
double batch_loss(const Matrix& img, const Matrix& txt, double scale, const std::vector<ClassId>& labels,
                  EmbeddingGradients* grads) {
  const PositiveMask mask = PositiveMask::from_labels(labels, labels);
  const Matrix logits = similarity_logits(img, txt, scale);
  if (!grads) return multi_positive_infonce(logits, mask).value;
  const auto lg = multi_positive_infonce_with_gradient(logits, mask);
  *grads = backprop_similarity(img, txt, scale, lg.grad_logits);
  return lg.loss.value;
}

}  // namespace

StageResult run_stage(const DualEncoder& enc, const std::vector<FrameRecord>& train,
                      const std::vector<FrameRecord>& val, const ClassVocabulary& vocab, const StageConfig& cfg,
                      const StageOptions& options) {
  cfg.validate();
  if (vocab.task() != stage_task(cfg.stage)) {
    throw ValidationError("stage " + to_string(cfg.stage) + " needs a " + to_string(stage_task(cfg.stage)) +
                          " vocabulary, got " + to_string(vocab.task()));
  }
  if (train.empty()) throw ValidationError("run_stage: empty training split");
  const DefaultFrameDecoder default_decoder;
  const FrameDecoder& decoder = options.decoder ? *options.decoder : default_decoder;

  std::vector<FrameRecord> balanced;
  switch (cfg.balancing) {
    case Balancing::upsample: balanced = balance_upsample(train, derive_seed(cfg.seed, "balance")); break;
    case Balancing::downsample: balanced = balance_downsample(train, derive_seed(cfg.seed, "balance")); break;
    case Balancing::none: balanced = train; break;
  }

  DualEncoder model = enc;
  model.set_freeze_policy(cfg.freeze);
  const PreparedFrames data = prepare_frames(model, balanced, vocab, decoder);
  const PreparedFrames val_data = prepare_frames(model, val, vocab, decoder);

  const auto ids = vocab.class_ids();
  std::vector<std::vector<std::vector<int>>> tokens(ids.size());
  for (std::size_t c = 0; c < ids.size(); ++c) {
    for (const auto& t : prompts_for_class(vocab, ids[c], PromptMode::all_texts)) tokens[c].push_back(model.tokenize(t));
  }

  Adam adam(cfg.learning_rate);
  auto& params = model.mutable_parameters();
  const ag::Var& log_scale = model.log_logit_scale_param();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

  const auto evaluate_val = [&](EpochRecord& rec) {
    if (val.empty()) return;
    ag::NoGradGuard no_grad;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    std::vector<std::vector<int>> canon;
    for (std::size_t c = 0; c < ids.size(); ++c) canon.push_back(tokens[c][0]);
    const Matrix protos = model.text_graph(canon).value();
    std::size_t hits = 0;
    for (std::size_t b = 0; b < val.size(); b += bs) {
      const std::size_t e = std::min(val.size(), b + bs);
      std::vector<Matrix> patches(val_data.patches.begin() + static_cast<std::ptrdiff_t>(b),
                                  val_data.patches.begin() + static_cast<std::ptrdiff_t>(e));
      std::vector<std::vector<int>> text;
      std::vector<ClassId> labels;
      for (std::size_t i = b; i < e; ++i) {
        text.push_back(tokens[val_data.cls[i]][0]);
        labels.push_back(ids[val_data.cls[i]]);
      }
      const Matrix img = model.image_graph(patches).value();
      loss_sum += batch_loss(img, model.text_graph(text).value(), model.logit_scale(), labels, nullptr);
      ++batches;
      const Matrix sim = img * protos.transpose();
      for (Eigen::Index i = 0; i < sim.rows(); ++i) {
        Eigen::Index best = 0;
        sim.row(i).maxCoeff(&best);  // first maximum, i.e. vocabulary order on ties
        hits += static_cast<std::size_t>(best) == val_data.cls[b + static_cast<std::size_t>(i)];
      }
    }
    rec.val_loss = loss_sum / static_cast<double>(batches);
    rec.val_top1 = static_cast<double>(hits) / static_cast<double>(val.size());
  };

  StageResult result{CheckpointRecord{}, model};
  result.record.config = cfg;
  std::optional<std::pair<double, double>> best_val;
  std::vector<std::size_t> order(balanced.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    int batch_no = 0;
    for (std::size_t b = 0; b < order.size(); b += bs, ++batch_no) {
      const std::size_t e = std::min(order.size(), b + bs);
      std::vector<Matrix> patches;
      std::vector<std::vector<int>> text;
      std::vector<ClassId> labels;
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t r = order[i];
        const std::size_t c = data.cls[r];
        patches.push_back(data.patches[r]);
        text.push_back(tokens[c][rng.uniform_index(tokens[c].size())]);
        labels.push_back(ids[c]);
      }
      const ag::Var img = model.image_graph(patches);
      const ag::Var txt = model.text_graph(text);
      const double scale = model.logit_scale();
      EmbeddingGradients g;
      double loss = 0.0;
      try {
        loss = batch_loss(img.value(), txt.value(), scale, labels, &g);
      } catch (const Error& err) {
        throw ValidationError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no) + ": " + err.what());
      }
      if (!std::isfinite(loss)) {
        throw ValidationError("non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no));
      }
      ag::backward({{img, g.img}, {txt, g.txt}});
      if (log_scale.requires_grad()) log_scale.node()->accumulate(Matrix::Constant(1, 1, g.logit_scale * scale));
      adam.begin_step();
      for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        if (p.grad().size() != 0) adam.update(name, p.mutable_value(), p.grad());
        p.zero_grad();
      }
      loss_sum += loss;
      if (options.on_step) options.on_step(epoch, batch_no, loss);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batch_no);
    evaluate_val(rec);
    result.record.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    // best_val: highest val top-1, ties broken by lower val loss.
    const bool better = rec.val_top1 && (!best_val || *rec.val_top1 > best_val->first ||
                                       (*rec.val_top1 == best_val->first && *rec.val_loss < best_val->second));
    const bool keep = cfg.selection == Selection::last_epoch || !rec.val_top1 || better;
    if (keep) {
      if (rec.val_top1 && cfg.selection == Selection::best_val) best_val = std::pair{*rec.val_top1, *rec.val_loss};
      result.record.selected_epoch = epoch;
      if (cfg.selection == Selection::best_val) result.encoder = model;
    }
  }
  if (cfg.selection == Selection::last_epoch) result.encoder = model;
  result.record.id = checkpoint_id(checkpoint_archive(result.record, result.encoder));
  return result;
}

TensorArchive checkpoint_archive(const CheckpointRecord& record, const DualEncoder& enc) {
  TensorArchive a = enc.to_archive();
  a.metadata["format"] = "surgline-checkpoint-v1";
  a.metadata["stage_config"] = record.config.to_json().dump();
  a.metadata["history"] = history_json(record.history).dump();
  a.metadata["selected_epoch"] = std::to_string(record.selected_epoch);
  a.metadata["id"] = checkpoint_id(a);
  return a;
}

std::string checkpoint_id(const TensorArchive& archive) {
  TensorArchive copy = archive;
  copy.metadata.erase("id");
  return sha256_hex(serialize_safetensors(copy));
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointRecord& record, const DualEncoder& enc) {
  save_safetensors(checkpoint_archive(record, enc), path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive a = load_safetensors(path);
  const auto meta = [&](const char* key) -> const std::string& {
    const auto it = a.metadata.find(key);
    if (it == a.metadata.end()) throw ParseError(path.string() + ": checkpoint lacks '" + key + "'");
    return it->second;
  };
  if (meta("format") != "surgline-checkpoint-v1") throw ParseError(path.string() + ": unknown checkpoint format");
  const std::string id = checkpoint_id(a);
  if (meta("id") != id) throw ValidationError(path.string() + ": checkpoint id does not match its contents");
  LoadedCheckpoint out{CheckpointRecord{}, DualEncoder::from_archive(a)};
  try {
    out.record.id = id;
    out.record.config = StageConfig::from_json(nlohmann::json::parse(meta("stage_config")));
    out.record.history = history_from_json(nlohmann::json::parse(meta("history")));
    out.record.selected_epoch = std::stoi(meta("selected_epoch"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> ProbeResult::predict(const Matrix& embeddings) const {
  const Matrix logits = (embeddings * weight.transpose()).rowwise() + bias;
  std::vector<std::size_t> out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    out.push_back(static_cast<std::size_t>(best));
  }
  return out;
}

ProbeResult train_linear_probe(const EmbeddingMatrix& embeddings, const std::vector<ClassId>& labels,
                               const std::vector<ClassId>& classes, const ProbeConfig& cfg, const ProbeSplit& split) {
  if (cfg.epochs <= 0 || !(cfg.learning_rate > 0)) throw ValidationError("probe: epochs and learning rate must be positive");
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) throw ValidationError("probe: one label per embedding required");
  if (classes.empty()) throw ValidationError("probe: empty class list");
  std::map<ClassId, std::size_t> cls;
  for (std::size_t i = 0; i < classes.size(); ++i) cls.emplace(classes[i], i);
  std::vector<std::size_t> y;
  for (const auto& l : labels) {
    const auto it = cls.find(l);
    if (it == cls.end()) throw ValidationError("probe: label '" + l + "' outside the class list");
    y.push_back(it->second);
  }
  std::set<std::size_t> used;
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (auto i : *part) {
      if (i >= labels.size()) throw ValidationError("probe: split index " + std::to_string(i) + " out of range");
      if (!used.insert(i).second) throw ValidationError("probe: split index sets overlap at " + std::to_string(i));
    }
  }
  if (split.train.empty()) throw ValidationError("probe: empty training split");

  ProbeResult r;
  r.classes = classes;
  std::set<std::size_t> train_classes;
  for (auto i : split.train) train_classes.insert(y[i]);
  if (train_classes.size() < classes.size()) {
    r.warnings.push_back("training split covers " + std::to_string(train_classes.size()) + " of " +
                         std::to_string(classes.size()) + " classes");
  }

  const auto c = static_cast<Eigen::Index>(classes.size());
  const Eigen::Index d = embeddings.dim();
  const auto n = static_cast<Eigen::Index>(split.train.size());
  Matrix x(n, d);
  Matrix target = Matrix::Zero(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = split.train[static_cast<std::size_t>(i)];
    x.row(i) = embeddings.values().row(static_cast<Eigen::Index>(src));
    target(i, static_cast<Eigen::Index>(y[src])) = 1.0;
  }
  Rng rng(derive_seed(cfg.seed, "probe"));
  Matrix w(c, d);
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.01 * rng.normal();
  Matrix b = Matrix::Zero(1, c);
  Adam adam(cfg.learning_rate);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Matrix logits = (x * w.transpose()).rowwise() + b.row(0);
    const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
    logits.colwise() -= mx;
    Matrix p = logits.array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    const Matrix g = (p - target) / static_cast<double>(n);
    adam.begin_step();
    adam.update("weight", w, g.transpose() * x);
    adam.update("bias", b, g.colwise().sum());
  }
  r.weight = w;
  r.bias = b.row(0);
  const auto accuracy = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
    if (idx.empty()) return std::nullopt;
    Matrix e(static_cast<Eigen::Index>(idx.size()), d);
    for (std::size_t i = 0; i < idx.size(); ++i) e.row(static_cast<Eigen::Index>(i)) = embeddings.values().row(static_cast<Eigen::Index>(idx[i]));
    const auto pred = r.predict(e);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) hits += pred[i] == y[idx[i]];
    return static_cast<double>(hits) / static_cast<double>(idx.size());
  };
  r.train_accuracy = accuracy(split.train);
  r.val_accuracy = accuracy(split.val);
  r.test_accuracy = accuracy(split.test);
  return r;
}

}  // namespace surgline
