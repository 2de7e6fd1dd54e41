#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "surgline/common.hpp"
#include "surgline/dualenc.hpp"
#include "surgline/ingest.hpp"
#include "surgline/metrics.hpp"
#include "surgline/safetensors.hpp"
#include "surgline/timeline.hpp"
#include "surgline/trainstage.hpp"
#include "surgline/vocab.hpp"
#include "surgline/zeroshot.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace surgline;

namespace {

enum class Kind { text, integer, real, boolean };

struct Key {
  std::string name;   // snake_case; config-file key and SURGLINE_<NAME> env suffix
  std::string flags;  // CLI11 flag spec
  Kind kind;
  json fallback;      // null = unset
  std::string help;
  bool required = false;
};

class Run;

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<void(Run&)> body;
};

// Layered settings: defaults < config file < environment < flags.
class Run {
 public:
  Run(std::string command, json config, std::string config_path, fs::path out)
      : command_(std::move(command)), config_(std::move(config)), config_path_(std::move(config_path)),
        out_(std::move(out)) {}

  bool has(const std::string& key) const { return config_.contains(key) && !config_[key].is_null(); }
  std::string text(const std::string& key) const { return require(key).get<std::string>(); }
  std::int64_t integer(const std::string& key) const { return require(key).get<std::int64_t>(); }
  double real(const std::string& key) const { return require(key).get<double>(); }
  bool flag(const std::string& key) const { return has(key) && config_[key].get<bool>(); }
  std::uint64_t seed() const { return config_.at("seed").get<std::uint64_t>(); }
  void set(const std::string& key, json v) { config_[key] = std::move(v); }
  const fs::path& out() const { return out_; }

  std::string input(const std::string& name, const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("missing input " + name + ": " + path.string());
    const std::string hash = fs::is_regular_file(path) ? sha256_file(path) : std::string();
    inputs_[name] = {{"path", path.string()}, {"sha256", hash}};
    return hash;
  }

  void write(const std::string& name, const std::string& filename, const std::string& contents) {
    write_file_atomic(out_ / filename, contents);
    outputs_[name] = {{"path", (out_ / filename).string()}, {"sha256", sha256_hex(contents)}};
  }

  void finish() const {
    json m;
    m["command"] = command_;
    m["config_path"] = config_path_.empty() ? json(nullptr) : json(config_path_);
    m["config"] = config_;
    m["seed"] = config_.contains("seed") ? config_["seed"] : json(nullptr);
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    write_file_atomic(out_ / "run_manifest.json", m.dump(2) + "\n");
  }

 private:
  const json& require(const std::string& key) const {
    if (!has(key)) throw ValidationError("missing required setting '" + key + "'");
    return config_.at(key);
  }

  std::string command_;
  json config_;
  std::string config_path_;
  fs::path out_;
  json inputs_ = json::object();
  json outputs_ = json::object();
};

std::string env_name(const std::string& key) {
  std::string s = "SURGLINE_";
  for (char c : key) s.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return s;
}

json convert(const Key& key, const std::string& raw, const std::string& origin) {
  const auto fail = [&]() -> json {
    throw ValidationError(origin + ": invalid value '" + raw + "' for " + key.name);
  };
  switch (key.kind) {
    case Kind::text: return raw;
    case Kind::integer: {
      if (key.name == "seed") {
        std::uint64_t v = 0;
        const auto r = std::from_chars(raw.data(), raw.data() + raw.size(), v);
        if (r.ec != std::errc() || r.ptr != raw.data() + raw.size()) return fail();
        return v;
      }
      std::int64_t v = 0;
      const auto r = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (r.ec != std::errc() || r.ptr != raw.data() + raw.size()) return fail();
      return v;
    }
    case Kind::real: {
      double v = 0;
      const auto r = std::from_chars(raw.data(), raw.data() + raw.size(), v);
      if (r.ec != std::errc() || r.ptr != raw.data() + raw.size()) return fail();
      return v;
    }
    case Kind::boolean:
      if (raw == "1" || raw == "true" || raw == "yes" || raw == "on") return true;
      if (raw == "0" || raw == "false" || raw == "no" || raw == "off") return false;
      return fail();
  }
  return fail();
}

json check_type(const Key& key, const json& v, const std::string& origin) {
  if (v.is_null()) return v;
  const bool ok = (key.kind == Kind::text && v.is_string()) || (key.kind == Kind::integer && v.is_number_integer()) ||
                  (key.kind == Kind::real && v.is_number()) || (key.kind == Kind::boolean && v.is_boolean());
  if (!ok) throw ValidationError(origin + ": wrong type for " + key.name);
  return key.kind == Kind::real ? json(v.get<double>()) : v;
}

json read_config_file(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (!doc.is_object()) throw ParseError(path + ": config must be a JSON object");
  // A run manifest replays its resolved config.
  if (doc.contains("command") && doc.contains("config") && doc["config"].is_object()) doc = doc["config"];
  json flat = json::object();
  for (const auto& [k, v] : doc.items()) {
    std::string name = k;
    std::replace(name.begin(), name.end(), '-', '_');
    if (name == "freeze" && v.is_object()) {
      for (const auto& [fk, fv] : v.items()) flat[fk] = fv;
    } else {
      flat[name] = v;
    }
  }
  return flat;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

// ---------------------------------------------------------------------------

ClassVocabulary task_vocab(const Run& run) {
  if (run.has("vocab")) return load_vocabulary(run.text("vocab"));
  return bundled_vocabulary(task_from_string(run.text("task")));
}

std::vector<FrameRecord> frames_input(Run& run) {
  run.input("frames", run.text("frames"));
  return load_frames(run.text("frames"));
}

std::optional<DatasetSplit> split_input(Run& run) {
  if (!run.has("split")) return std::nullopt;
  run.input("split", run.text("split"));
  return load_split(run.text("split"));
}

SplitPart part_from_string(const std::string& s) {
  if (s == "train") return SplitPart::train;
  if (s == "val") return SplitPart::val;
  if (s == "test") return SplitPart::test;
  throw ValidationError("unknown split part '" + s + "'");
}

DualEncoder base_encoder(Run& run) {
  const std::string spec = run.text("encoder");
  if (spec == "surrogate") return DualEncoder::surrogate(derive_seed(run.seed(), "surrogate"));
  run.input("backbone", fs::path(spec) / "model.safetensors");
  return DualEncoder::from_pretrained(spec);
}

// Encoder for inference: a checkpoint when given, else the base encoder.
DualEncoder inference_encoder(Run& run) {
  if (run.has("checkpoint")) {
    run.input("checkpoint", run.text("checkpoint"));
    return load_checkpoint(run.text("checkpoint")).encoder;
  }
  return base_encoder(run);
}

// Frame embeddings, optionally cached under $SURGLINE_CACHE keyed by encoder
// content and image reference.
Matrix embed_frames(const DualEncoder& enc, const std::vector<FrameRecord>& records, int batch) {
  const DefaultFrameDecoder decoder;
  const auto cache_dir = env("SURGLINE_CACHE");
  TensorArchive cache;
  fs::path cache_file;
  if (cache_dir) {
    cache_file = fs::path(*cache_dir) / ("emb-" + sha256_hex(serialize_safetensors(enc.to_archive())).substr(0, 24) +
                                         ".safetensors");
    if (fs::exists(cache_file)) cache = load_safetensors(cache_file);
  }
  const auto d = static_cast<Eigen::Index>(enc.config().embed_dim);
  Matrix out(static_cast<Eigen::Index>(records.size()), d);
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = cache.tensors.find(sha256_hex(records[i].image));
    if (it != cache.tensors.end() && it->second.numel() == d) {
      out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const RowVector>(it->second.data.data(), d);
    } else {
      missing.push_back(i);
    }
  }
  for (std::size_t b = 0; b < missing.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(missing.size(), b + static_cast<std::size_t>(batch));
    std::vector<Image> images;
    for (std::size_t i = b; i < e; ++i) images.push_back(decoder.decode(records[missing[i]].image));
    const Matrix emb = enc.encode_images(images).values();
    for (std::size_t i = b; i < e; ++i) {
      const auto row = static_cast<Eigen::Index>(missing[i]);
      out.row(row) = emb.row(static_cast<Eigen::Index>(i - b));
      Tensor t;
      t.shape = {d};
      for (Eigen::Index j = 0; j < d; ++j) t.data.push_back(out(row, j));
      cache.tensors[sha256_hex(records[missing[i]].image)] = std::move(t);
    }
  }
  if (cache_dir && !missing.empty()) save_safetensors(cache, cache_file);
  return out;
}

void log_epoch(const EpochRecord& r, int total) {
  std::cerr << "epoch " << r.epoch << "/" << total << " train_loss=" << format_real(r.train_loss);
  if (r.val_loss) std::cerr << " val_loss=" << format_real(*r.val_loss);
  if (r.val_top1) std::cerr << " val_top1=" << format_real(*r.val_top1);
  std::cerr << '\n';
}

// ---------------------------------------------------------------------------

void cmd_synth(Run& run) {
  SynthOptions o;
  o.n_classes = static_cast<int>(run.integer("classes"));
  o.n_per_class = static_cast<int>(run.integer("per_class"));
  o.image_size = static_cast<int>(run.integer("size"));
  o.noise = run.real("noise");
  o.seed = run.seed();
  o.n_videos = static_cast<int>(run.integer("videos"));
  o.fps = run.real("fps");
  Task task = Task::phase;
  if (run.has("task")) {
    task = task_from_string(run.text("task"));
    o.label_prefix = task == Task::gesture ? "G" : "P";
    if (o.n_classes > static_cast<int>(expected_class_count(task))) {
      throw ValidationError("synth: " + std::to_string(o.n_classes) + " classes exceed the " + to_string(task) + " vocabulary");
    }
  } else {
    o.label_prefix = run.text("prefix");
  }
  if (o.n_classes < 2) throw ValidationError("synth: need at least 2 classes");
  if (o.n_per_class < 1 || o.n_videos < 1 || o.image_size < 1) throw ValidationError("synth: counts must be positive");
  const auto ds = synth_dataset(o);
  std::vector<ManifestEntry> entries;
  for (const auto& v : ds.videos) entries.push_back({v, "", task});
  run.write("frames", "frames.csv", serialize_frames(ds.records));
  run.write("manifest", "manifest.json", serialize_manifest(entries));
  std::cerr << "synth: " << ds.records.size() << " frames in " << ds.videos.size() << " videos\n";
}

void cmd_prepare(Run& run) {
  run.input("manifest", run.text("manifest"));
  const auto entries = load_manifest(run.text("manifest"));
  const int stride = static_cast<int>(run.integer("stride"));
  const PhaseNameMap name_map = run.has("phase_map") ? load_phase_name_map(run.text("phase_map")) : default_phase_name_map();
  if (run.has("phase_map")) run.input("phase_map", run.text("phase_map"));
  std::optional<Task> only;
  if (run.has("task")) only = task_from_string(run.text("task"));
  std::vector<FrameRecord> records;
  json summary = json::array();
  for (const auto& e : entries) {
    if (only && e.task != *only) continue;
    if (e.annotation.empty()) throw ValidationError(e.video.video_id + ": manifest entry has no annotation");
    run.input("annotation:" + e.video.video_id, e.annotation);
    FrameLabels labels;
    if (e.task == Task::gesture) {
      labels = expand_intervals(parse_gesture_transcript(e.annotation, e.video), e.video);
    } else {
      labels = parse_phase_annotation(e.annotation, e.video, name_map, {run.flag("allow_row_mismatch")});
    }
    const auto sampled = sample_frames(e.video, labels, stride);
    summary.push_back({{"video_id", e.video.video_id},
                       {"task", to_string(e.task)},
                       {"frames", sampled.records.size()},
                       {"effective_fps", sampled.effective_fps}});
    records.insert(records.end(), sampled.records.begin(), sampled.records.end());
  }
  if (records.empty()) throw ValidationError("prepare: no labeled frames were sampled");
  sort_records(records);
  run.write("frames", "frames.csv", serialize_frames(records));
  run.write("summary", "prepare_summary.json", summary.dump(2) + "\n");
}

std::vector<double> parse_reals(const std::string& s, const char* what) {
  std::vector<double> out;
  for (const auto& part : split(s, ',')) {
    const auto t = trim(part);
    double v = 0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
      throw ValidationError(std::string("invalid ") + what + " '" + s + "'");
    }
    out.push_back(v);
  }
  return out;
}

void cmd_split(Run& run) {
  std::vector<std::string> videos;
  if (run.has("frames")) {
    std::set<std::string> ids;
    for (const auto& r : frames_input(run)) ids.insert(r.video_id);
    videos.assign(ids.begin(), ids.end());
  } else if (run.has("videos")) {
    for (const auto& v : split(run.text("videos"), ',')) {
      if (!trim(v).empty()) videos.push_back(trim(v));
    }
  } else {
    throw ValidationError("split: give --frames or --videos");
  }
  SplitSpec spec = SplitRatios{};
  if (run.has("counts")) {
    const auto c = parse_reals(run.text("counts"), "counts");
    if (c.size() != 3 || std::any_of(c.begin(), c.end(), [](double x) { return x < 0 || x != std::floor(x); })) {
      throw ValidationError("split: --counts needs three non-negative integers");
    }
    spec = SplitCounts{static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]), static_cast<std::size_t>(c[2])};
  } else {
    const auto r = parse_reals(run.text("ratios"), "ratios");
    if (r.size() != 3) throw ValidationError("split: --ratios needs three values");
    spec = SplitRatios{r[0], r[1], r[2]};
  }
  const auto s = make_split(videos, spec, run.seed());
  run.write("split", "split.json", serialize_split(s));
  std::cerr << "split: " << s.train.size() << "/" << s.val.size() << "/" << s.test.size() << " videos\n";
}

void cmd_balance(Run& run) {
  auto records = frames_input(run);
  if (const auto s = split_input(run)) records = select_split(records, *s, part_from_string(run.text("part")));
  const std::string mode = run.text("mode");
  std::vector<FrameRecord> out;
  if (mode == "upsample") out = balance_upsample(records, run.seed());
  else if (mode == "downsample") out = balance_downsample(records, run.seed());
  else throw ValidationError("balance: --mode must be upsample or downsample");
  run.write("frames", "frames_balanced.csv", serialize_frames(out));
  for (const auto& [c, n] : class_counts(out)) std::cerr << c << ": " << n << '\n';
}

void train(Run& run, StageKind kind) {
  StageConfig cfg = preset_config(kind);
  if (kind == StageKind::control_phase_only && run.flag("long")) cfg = control_config(true);
  const auto pick = [&](const char* key, auto& field) {
    using T = std::decay_t<decltype(field)>;
    if (run.has(key)) {
      if constexpr (std::is_same_v<T, int>) field = static_cast<int>(run.integer(key));
      else if constexpr (std::is_same_v<T, double>) field = run.real(key);
      else if constexpr (std::is_same_v<T, bool>) field = run.flag(key);
    }
  };
  pick("epochs", cfg.epochs);
  pick("learning_rate", cfg.learning_rate);
  pick("batch_size", cfg.batch_size);
  pick("unfreeze_last_k", cfg.freeze.unfreeze_last_k);
  pick("train_projections", cfg.freeze.train_projections);
  pick("train_logit_scale", cfg.freeze.train_logit_scale);
  if (run.has("balancing")) cfg.balancing = balancing_from_string(run.text("balancing"));
  if (run.has("selection")) cfg.selection = selection_from_string(run.text("selection"));
  cfg.seed = run.seed();

  std::optional<DualEncoder> start;
  if (kind == StageKind::phase_ft) {
    if (!run.has("init")) throw ValidationError("train-phases requires --init <gesture checkpoint>");
    run.input("init", run.text("init"));
    auto ckpt = load_checkpoint(run.text("init"));
    if (ckpt.record.config.stage != StageKind::gesture_ft) {
      throw ValidationError("--init must be a gesture_ft checkpoint, got " + to_string(ckpt.record.config.stage));
    }
    cfg.init_from = ckpt.record.id;
    start.emplace(std::move(ckpt.encoder));
  } else {
    start.emplace(base_encoder(run));
    cfg.init_from = kPretrainedBase;
  }
  // Snapshot the fully resolved stage settings.
  run.set("epochs", cfg.epochs);
  run.set("learning_rate", cfg.learning_rate);
  run.set("batch_size", cfg.batch_size);
  run.set("balancing", to_string(cfg.balancing));
  run.set("selection", to_string(cfg.selection));
  run.set("unfreeze_last_k", cfg.freeze.unfreeze_last_k);
  run.set("train_projections", cfg.freeze.train_projections);
  run.set("train_logit_scale", cfg.freeze.train_logit_scale);
  cfg.validate();

  const ClassVocabulary vocab = task_vocab(run);
  auto records = frames_input(run);
  std::vector<FrameRecord> train_set = records, val_set;
  if (const auto s = split_input(run)) {
    train_set = select_split(records, *s, SplitPart::train);
    val_set = select_split(records, *s, SplitPart::val);
  }
  StageOptions opts;
  opts.on_epoch = [&](const EpochRecord& r) { log_epoch(r, cfg.epochs); };
  const auto result = run_stage(*start, train_set, val_set, vocab, cfg, opts);
  const auto archive = checkpoint_archive(result.record, result.encoder);
  run.write("checkpoint", "checkpoint.safetensors", serialize_safetensors(archive));
  run.write("history", "history.csv", history_csv(result.record.history));
  json stage;
  stage["id"] = result.record.id;
  stage["config"] = cfg.to_json();
  stage["selected_epoch"] = result.record.selected_epoch;
  stage["encoder_config_hash"] = result.encoder.config_hash();
  run.write("stage", "stage.json", stage.dump(2) + "\n");
  std::cerr << "checkpoint " << result.record.id << '\n';
}

void cmd_probe(Run& run) {
  const ClassVocabulary vocab = task_vocab(run);
  const auto records = frames_input(run);
  const auto s = split_input(run);
  if (!s) throw ValidationError("probe requires --split");
  const DualEncoder enc = inference_encoder(run);
  ProbeSplit ps;
  std::vector<ClassId> labels;
  for (std::size_t i = 0; i < records.size(); ++i) labels.push_back(records[i].label);
  const std::set<std::string> tr(s->train.begin(), s->train.end()), va(s->val.begin(), s->val.end()),
      te(s->test.begin(), s->test.end());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& v = records[i].video_id;
    if (tr.count(v)) ps.train.push_back(i);
    else if (va.count(v)) ps.val.push_back(i);
    else if (te.count(v)) ps.test.push_back(i);
  }
  ProbeConfig pc;
  pc.epochs = static_cast<int>(run.integer("epochs"));
  pc.learning_rate = run.real("learning_rate");
  pc.seed = run.seed();
  const EmbeddingMatrix emb(embed_frames(enc, records, static_cast<int>(run.integer("batch_size"))));
  const auto r = train_linear_probe(emb, labels, vocab.class_ids(), pc, ps);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json out;
  out["classes"] = r.classes;
  out["accuracy"] = {{"train", opt(r.train_accuracy)}, {"val", opt(r.val_accuracy)}, {"test", opt(r.test_accuracy)}};
  out["warnings"] = r.warnings;
  json w = json::array();
  for (Eigen::Index i = 0; i < r.weight.rows(); ++i) {
    std::vector<double> row(r.weight.cols());
    for (Eigen::Index j = 0; j < r.weight.cols(); ++j) row[static_cast<std::size_t>(j)] = r.weight(i, j);
    w.push_back(row);
  }
  out["weight"] = w;
  out["bias"] = std::vector<double>(r.bias.data(), r.bias.data() + r.bias.size());
  run.write("probe", "probe.json", out.dump(2) + "\n");
  std::cerr << "probe test accuracy " << (r.test_accuracy ? format_real(*r.test_accuracy) : "n/a") << '\n';
}

void cmd_predict(Run& run) {
  const ClassVocabulary vocab = task_vocab(run);
  auto records = frames_input(run);
  if (const auto s = split_input(run)) records = select_split(records, *s, part_from_string(run.text("part")));
  if (records.empty()) throw ValidationError("predict: no frames selected");
  const DualEncoder enc = inference_encoder(run);
  const auto protos = build_prototypes(enc, vocab, aggregation_from_string(run.text("aggregation")));
  const int k = static_cast<int>(std::min<std::int64_t>(run.integer("k"), static_cast<std::int64_t>(vocab.size())));
  const EmbeddingMatrix emb(embed_frames(enc, records, static_cast<int>(run.integer("batch_size"))));
  auto preds = predict_topk(emb, protos, enc.logit_scale(), k);
  for (std::size_t i = 0; i < records.size(); ++i) {
    preds[i].video_id = records[i].video_id;
    preds[i].frame_index = records[i].frame_index;
    preds[i].timestamp_s = records[i].timestamp_s;
    preds[i].true_label = records[i].label;
  }
  run.write("predictions", "predictions.csv", serialize_predictions(preds));
  std::cerr << "predict: " << preds.size() << " frames, top-1 " << format_real(top1_accuracy(preds)) << '\n';
}

void cmd_eval(Run& run) {
  const ClassVocabulary vocab = task_vocab(run);
  run.input("predictions", run.text("preds"));
  const auto preds = load_predictions(run.text("preds"));
  std::vector<int> ks;
  for (double k : parse_reals(run.text("k"), "k list")) {
    if (k != std::floor(k)) throw ValidationError("k values must be integers");
    ks.push_back(static_cast<int>(k));
  }
  const auto report = evaluate(preds, vocab.class_ids(), ks);
  const auto cm = confusion(preds, vocab.class_ids());
  run.write("metrics_json", "metrics.json", report.to_json().dump(2) + "\n");
  run.write("metrics_csv", "metrics.csv", report.to_csv());
  run.write("confusion", "confusion.csv", cm.to_csv(false));
  run.write("confusion_normalized", "confusion_normalized.csv", cm.to_csv(true));
  for (const auto& [k, v] : report.overall_topk) std::cout << "top" << k << " " << format_real(v) << '\n';
  std::cout << "precision " << format_real(report.precision) << "\nrecall " << format_real(report.recall) << "\nf1 "
            << format_real(report.f1) << '\n';
}

void cmd_timeline(Run& run) {
  const ClassVocabulary vocab = task_vocab(run);
  run.input("predictions", run.text("preds"));
  const auto preds = load_predictions(run.text("preds"));
  if (preds.empty()) throw ValidationError("timeline: empty prediction file");
  const int window = static_cast<int>(run.integer("window"));
  for (const auto& group : group_by_video(preds)) {
    const auto& vid = group.front().video_id;
    const Timeline tl = build_timeline(group, vocab, window);
    run.write("timeline:" + vid, vid + ".timeline.json", tl.to_json().dump(2) + "\n");
    run.write("narrative:" + vid, vid + ".narrative.txt", tl.narrative_text());
    const bool labelled = std::all_of(group.begin(), group.end(), [](const Prediction& p) { return p.true_label.has_value(); });
    if (!labelled) continue;
    const Timeline truth = truth_timeline(group, vocab);
    std::vector<double> grid;
    PhaseDiagram d;
    if (run.has("step")) {
      d = export_phase_diagram(tl, truth, run.real("step"));
    } else {
      for (const auto& p : group) grid.push_back(p.timestamp_s);
      d = export_phase_diagram(tl, truth, grid);
    }
    run.write("phase_diagram:" + vid, vid + ".phase_diagram.csv", d.to_csv());
    run.write("agreement:" + vid, vid + ".agreement.json", d.agreement_json().dump(2) + "\n");
  }
}

// ---------------------------------------------------------------------------

Key seed_key() { return {"seed", "--seed", Kind::integer, nullptr, "Seed for every stochastic step (generated if omitted)"}; }
Key task_key(const char* fallback) {
  return {"task", "--task", Kind::text, fallback ? json(fallback) : json(nullptr), "gesture or phase"};
}
Key vocab_key() { return {"vocab", "--vocab", Kind::text, nullptr, "Vocabulary JSON (default: bundled bank for --task)"}; }
Key frames_key(bool required) { return {"frames", "--frames", Kind::text, nullptr, "Frames CSV", required}; }
Key split_key() { return {"split", "--split", Kind::text, nullptr, "Split JSON"}; }
Key encoder_key() {
  return {"encoder", "--encoder", Kind::text, "surrogate", "'surrogate' or a pretrained CLIP directory"};
}

std::vector<Key> training_keys() {
  return {frames_key(true),
          split_key(),
          vocab_key(),
          encoder_key(),
          seed_key(),
          {"epochs", "--epochs", Kind::integer, nullptr, "Epochs (stage preset when omitted)"},
          {"learning_rate", "--lr,--learning-rate", Kind::real, nullptr, "Adam learning rate"},
          {"batch_size", "--batch,--batch-size", Kind::integer, nullptr, "Batch size"},
          {"balancing", "--balancing", Kind::text, nullptr, "upsample, downsample or none"},
          {"selection", "--selection", Kind::text, nullptr, "last_epoch or best_val"},
          {"unfreeze_last_k", "--unfreeze-last-k", Kind::integer, nullptr, "Trainable trailing blocks per tower"},
          {"train_projections", "--train-projections", Kind::boolean, nullptr, "Also train the projection heads"},
          {"train_logit_scale", "--train-logit-scale", Kind::boolean, nullptr, "Also train the logit scale"}};
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"prepare", "Parse annotations, sample frames and write a frames CSV",
                  {{"manifest", "--manifest", Kind::text, nullptr, "Video manifest JSON", true},
                   task_key(nullptr),
                   {"stride", "--stride", Kind::integer, 5, "Keep every n-th source frame"},
                   {"phase_map", "--phase-map", Kind::text, nullptr, "Phase name to class id map JSON"},
                   {"allow_row_mismatch", "--allow-row-mismatch", Kind::boolean, false,
                    "Tolerate phase files whose row count differs from frame_count"}},
                  cmd_prepare});
  cmds.push_back({"split", "Build a video-level train/val/test split",
                  {frames_key(false),
                   {"videos", "--videos", Kind::text, nullptr, "Comma-separated video ids"},
                   {"counts", "--counts", Kind::text, nullptr, "Absolute video counts, e.g. 9,1,3"},
                   {"ratios", "--ratios", Kind::text, "0.6,0.1,0.3", "Split ratios"},
                   seed_key()},
                  cmd_split});
  cmds.push_back({"balance", "Up- or down-sample the classes of a split",
                  {frames_key(true), split_key(),
                   {"part", "--part", Kind::text, "train", "Split part to balance"},
                   {"mode", "--mode", Kind::text, nullptr, "upsample or downsample", true},
                   seed_key()},
                  cmd_balance});
  auto tg = training_keys();
  tg.push_back(task_key("gesture"));
  cmds.push_back({"train-gestures", "Gesture fine-tuning stage", tg, [](Run& r) { train(r, StageKind::gesture_ft); }});
  auto tp = training_keys();
  tp.push_back(task_key("phase"));
  tp.push_back({"init", "--init", Kind::text, nullptr, "Gesture-stage checkpoint", true});
  cmds.push_back({"train-phases", "Phase fine-tuning initialized from a gesture checkpoint", tp,
                  [](Run& r) { train(r, StageKind::phase_ft); }});
  auto tc = training_keys();
  tc.push_back(task_key("phase"));
  tc.push_back({"long", "--long", Kind::boolean, false, "65-epoch control instead of 15"});
  cmds.push_back({"train-control", "Phase-only control run from the base encoder", tc, [](Run& r) {
                    train(r, r.flag("long") ? StageKind::control_phase_only_long : StageKind::control_phase_only);
                  }});
  cmds.push_back({"probe", "Linear probe on frozen frame embeddings",
                  {frames_key(true), split_key(), vocab_key(), task_key("gesture"), encoder_key(),
                   {"checkpoint", "--checkpoint", Kind::text, nullptr, "Encoder checkpoint (default: base encoder)"},
                   {"epochs", "--epochs", Kind::integer, 200, "Probe epochs"},
                   {"learning_rate", "--lr,--learning-rate", Kind::real, 5e-4, "Probe learning rate"},
                   {"batch_size", "--batch,--batch-size", Kind::integer, 64, "Encoding batch size"},
                   seed_key()},
                  cmd_probe});
  cmds.push_back({"predict", "Zero-shot top-k predictions for frames",
                  {frames_key(true), split_key(),
                   {"part", "--part", Kind::text, "test", "Split part to predict"},
                   vocab_key(), task_key("phase"), encoder_key(),
                   {"checkpoint", "--checkpoint", Kind::text, nullptr, "Encoder checkpoint (default: base encoder)"},
                   {"aggregation", "--aggregation", Kind::text, "mean_of_texts", "mean_of_texts, canonical_only or max_sim"},
                   {"k", "--k", Kind::integer, 5, "Ranked classes per frame"},
                   {"batch_size", "--batch,--batch-size", Kind::integer, 64, "Encoding batch size"},
                   seed_key()},
                  cmd_predict});
  cmds.push_back({"eval", "Top-k accuracy, weighted P/R/F1 and confusion matrices",
                  {{"preds", "--preds", Kind::text, nullptr, "Predictions CSV", true},
                   {"k", "--k", Kind::text, "1,5", "Comma-separated k values"},
                   vocab_key(), task_key("phase")},
                  cmd_eval});
  cmds.push_back({"timeline", "Smoothed timeline, narrative and phase diagram per video",
                  {{"preds", "--preds", Kind::text, nullptr, "Predictions CSV", true},
                   {"window", "--window", Kind::integer, 11, "Odd smoothing window (1 = none)"},
                   {"step", "--step", Kind::real, nullptr, "Phase-diagram grid step in seconds (default: frame times)"},
                   vocab_key(), task_key("phase")},
                  cmd_timeline});
  cmds.push_back({"synth", "Generate a synthetic labeled dataset",
                  {{"classes", "--classes", Kind::integer, 7, "Number of classes"},
                   {"per_class", "--per-class", Kind::integer, 40, "Frames per class"},
                   {"size", "--size", Kind::integer, 64, "Image side in pixels"},
                   {"noise", "--noise", Kind::real, 0.05, "Pixel noise standard deviation"},
                   {"videos", "--videos", Kind::integer, 10, "Number of synthetic videos"},
                   {"fps", "--fps", Kind::real, 5.0, "Frame rate of the synthetic videos"},
                   {"prefix", "--prefix", Kind::text, "C", "Label prefix when --task is not given"},
                   task_key(nullptr), seed_key()},
                  cmd_synth});
  return cmds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Staged contrastive fine-tuning and timelines for surgical video"};
  app.require_subcommand(1);
  const auto cmds = commands();
  struct Bound {
    CLI::App* sub;
    std::map<std::string, std::string> raw;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> opts;
    std::string config;
    std::string out;
  };
  std::vector<Bound> bound(cmds.size());
  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto& b = bound[i];
    b.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
    b.sub->add_option("--config", b.config, "JSON config file or a run manifest to replay");
    b.sub->add_option("--out", b.out, "Output directory")->required();
    for (const auto& k : cmds[i].keys) {
      b.raw[k.name];
      b.flags[k.name] = false;
    }
    for (const auto& k : cmds[i].keys) {
      if (k.kind == Kind::boolean) b.opts[k.name] = b.sub->add_flag(k.flags, b.flags[k.name], k.help);
      else b.opts[k.name] = b.sub->add_option(k.flags, b.raw[k.name], k.help);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto& b = bound[i];
    if (!b.sub->parsed()) continue;
    const auto& cmd = cmds[i];
    try {
      json cfg = json::object();
      for (const auto& k : cmd.keys) cfg[k.name] = k.fallback;
      if (!b.config.empty()) {
        const json file = read_config_file(b.config);
        for (const auto& [name, v] : file.items()) {
          const auto it = std::find_if(cmd.keys.begin(), cmd.keys.end(), [&](const Key& k) { return k.name == name; });
          if (it == cmd.keys.end()) throw ValidationError(b.config + ": unknown setting '" + name + "' for " + cmd.name);
          cfg[name] = check_type(*it, v, b.config);
        }
      }
      for (const auto& k : cmd.keys) {
        if (const auto v = env(env_name(k.name).c_str())) cfg[k.name] = convert(k, *v, env_name(k.name));
      }
      for (const auto& k : cmd.keys) {
        if (b.opts[k.name]->count() == 0) continue;
        cfg[k.name] = k.kind == Kind::boolean ? json(b.flags[k.name]) : convert(k, b.raw[k.name], "--" + k.name);
      }
      for (const auto& k : cmd.keys) {
        if (k.required && cfg[k.name].is_null()) {
          throw ValidationError("missing required option " + k.flags.substr(0, k.flags.find(',')));
        }
      }
      if (cfg.contains("seed") && cfg["seed"].is_null()) {
        std::random_device rd;
        cfg["seed"] = (static_cast<std::uint64_t>(rd()) << 32) | rd();
        std::cerr << "seed " << cfg["seed"].get<std::uint64_t>() << " (generated)\n";
      }
      fs::create_directories(b.out);
      Run run(cmd.name, std::move(cfg), b.config, b.out);
      cmd.body(run);
      run.finish();
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return 1;
    }
  }
  return 1;
}
