#include "surgline/dualenc.hpp"

#include <algorithm>
#include <cmath>

namespace surgline {

namespace {

const char* kVision = "vision_model";
const char* kText = "text_model";

std::string layer_prefix(const char* tower, int i) {
  return std::string(tower) + ".encoder.layers." + std::to_string(i) + ".";
}

void block_shapes(std::vector<ParameterShape>& out, const char* tower, const TowerConfig& t) {
  const Eigen::Index w = t.width, m = t.mlp_width;
  for (int i = 0; i < t.layers; ++i) {
    const auto p = layer_prefix(tower, i);
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
      out.push_back({p + "self_attn." + proj + ".weight", w, w});
      out.push_back({p + "self_attn." + proj + ".bias", 1, w});
    }
    out.push_back({p + "layer_norm1.weight", 1, w});
    out.push_back({p + "layer_norm1.bias", 1, w});
    out.push_back({p + "mlp.fc1.weight", m, w});
    out.push_back({p + "mlp.fc1.bias", 1, m});
    out.push_back({p + "mlp.fc2.weight", w, m});
    out.push_back({p + "mlp.fc2.bias", 1, w});
    out.push_back({p + "layer_norm2.weight", 1, w});
    out.push_back({p + "layer_norm2.bias", 1, w});
  }
}

bool ends_with(const std::string& s, std::string_view suffix) { return s.ends_with(suffix); }

bool is_norm(const std::string& name) {
  return name.find("layer_norm") != std::string::npos || name.find("layrnorm") != std::string::npos ||
         name.find("post_layernorm") != std::string::npos;
}

Matrix init_parameter(const ParameterShape& s, const DualEncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, s.name));
  const auto normal = [&](double stddev) {
    Matrix m(s.rows, s.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = stddev * rng.normal();
    return m;
  };
  if (s.name == "logit_scale") return Matrix::Constant(1, 1, cfg.log_logit_scale);
  if (is_norm(s.name)) return ends_with(s.name, ".weight") ? Matrix::Ones(s.rows, s.cols) : Matrix::Zero(s.rows, s.cols);
  if (ends_with(s.name, ".bias")) return Matrix::Zero(s.rows, s.cols);
  if (ends_with(s.name, "class_embedding")) return normal(1.0 / std::sqrt(static_cast<double>(s.cols)));
  if (s.name == "text_model.embeddings.token_embedding.weight") return normal(0.5);
  if (ends_with(s.name, "position_embedding.weight")) return normal(0.02);
  // Linear maps, patch embedding and projections: fan-in scaled.
  return normal(1.0 / std::sqrt(static_cast<double>(s.cols)));
}

Matrix from_row_major(const Tensor& t, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  if (t.numel() != rows * cols) {
    throw ValidationError("tensor " + name + " has " + std::to_string(t.numel()) + " values, expected " +
                          std::to_string(rows * cols));
  }
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(),
                                                                                                    rows, cols);
}

Tensor to_row_major(const Matrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data.resize(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), m.rows(),
                                                                                     m.cols()) = m;
  return t;
}

nlohmann::ordered_json tower_json(const TowerConfig& t) {
  return {{"width", t.width}, {"layers", t.layers}, {"heads", t.heads}, {"mlp_width", t.mlp_width}};
}

TowerConfig tower_from(const nlohmann::json& j) {
  return {j.at("width").get<int>(), j.at("layers").get<int>(), j.at("heads").get<int>(), j.at("mlp_width").get<int>()};
}

}  // namespace

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::surrogate ? "surrogate" : "pretrained_backbone";
}

nlohmann::ordered_json DualEncoderConfig::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = to_string(kind);
  j["vision"] = {{"tower", tower_json(vision.tower)},
                 {"image_size", vision.image_size},
                 {"patch_size", vision.patch_size}};
  j["text"] = {{"tower", tower_json(text.tower)},
               {"vocab_size", text.vocab_size},
               {"context_length", text.context_length},
               {"causal", text.causal},
               {"pooling", text.pooling == TextPooling::eot ? "eot" : "mean"}};
  j["embed_dim"] = embed_dim;
  j["log_logit_scale"] = log_logit_scale;
  j["preprocess"] = {{"shortest_side_crop", preprocess.shortest_side_crop},
                     {"mean", preprocess.mean},
                     {"std", preprocess.std}};
  j["tokenizer"] = tokenizer == TokenizerKind::hash ? "hash" : "bpe";
  return j;
}

DualEncoderConfig DualEncoderConfig::from_json(const nlohmann::json& j) {
  try {
    DualEncoderConfig c;
    c.kind = j.at("kind").get<std::string>() == "surrogate" ? EncoderKind::surrogate : EncoderKind::pretrained_backbone;
    c.vision.tower = tower_from(j.at("vision").at("tower"));
    c.vision.image_size = j.at("vision").at("image_size").get<int>();
    c.vision.patch_size = j.at("vision").at("patch_size").get<int>();
    c.text.tower = tower_from(j.at("text").at("tower"));
    c.text.vocab_size = j.at("text").at("vocab_size").get<int>();
    c.text.context_length = j.at("text").at("context_length").get<int>();
    c.text.causal = j.at("text").at("causal").get<bool>();
    c.text.pooling = j.at("text").at("pooling").get<std::string>() == "eot" ? TextPooling::eot : TextPooling::mean;
    c.embed_dim = j.at("embed_dim").get<int>();
    c.log_logit_scale = j.at("log_logit_scale").get<double>();
    c.preprocess.shortest_side_crop = j.at("preprocess").at("shortest_side_crop").get<bool>();
    c.preprocess.mean = j.at("preprocess").at("mean").get<std::array<double, 3>>();
    c.preprocess.std = j.at("preprocess").at("std").get<std::array<double, 3>>();
    c.tokenizer = j.at("tokenizer").get<std::string>() == "bpe" ? TokenizerKind::bpe : TokenizerKind::hash;
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("encoder config: ") + e.what());
  }
}

void DualEncoderConfig::validate() const {
  for (const auto* t : {&vision.tower, &text.tower}) {
    if (t->width <= 0 || t->layers < 0 || t->heads <= 0 || t->width % t->heads != 0 || t->mlp_width <= 0) {
      throw ValidationError("encoder config: invalid tower geometry");
    }
  }
  if (vision.patch_size <= 0 || vision.image_size % vision.patch_size != 0) {
    throw ValidationError("encoder config: image size must be a multiple of the patch size");
  }
  if (text.vocab_size < 3 || text.context_length < 2 || embed_dim <= 0) throw ValidationError("encoder config: invalid text geometry");
}

DualEncoderConfig surrogate_config() { return DualEncoderConfig{}; }

DualEncoderConfig vit_b32_config() {
  DualEncoderConfig c;
  c.kind = EncoderKind::pretrained_backbone;
  c.vision = {{768, 12, 12, 3072}, 224, 32};
  c.text = {{512, 12, 8, 2048}, 49408, 77, true, TextPooling::eot};
  c.embed_dim = 512;
  c.preprocess = {true, {0.48145466, 0.4578275, 0.40821073}, {0.26862954, 0.26130258, 0.27577711}};
  c.tokenizer = TokenizerKind::bpe;
  return c;
}

nlohmann::ordered_json FreezePolicy::to_json() const {
  return {{"unfreeze_last_k", unfreeze_last_k},
          {"train_projections", train_projections},
          {"train_logit_scale", train_logit_scale}};
}

FreezePolicy FreezePolicy::from_json(const nlohmann::json& j) {
  return {j.at("unfreeze_last_k").get<int>(), j.at("train_projections").get<bool>(),
          j.at("train_logit_scale").get<bool>()};
}

std::vector<ParameterShape> parameter_shapes(const DualEncoderConfig& c) {
  std::vector<ParameterShape> out;
  const Eigen::Index vw = c.vision.tower.width, tw = c.text.tower.width;
  const Eigen::Index patch_dim = 3 * c.vision.patch_size * c.vision.patch_size;
  out.push_back({"vision_model.embeddings.class_embedding", 1, vw});
  out.push_back({"vision_model.embeddings.patch_embedding.weight", vw, patch_dim});
  out.push_back({"vision_model.embeddings.position_embedding.weight", c.vision.num_patches() + 1, vw});
  out.push_back({"vision_model.pre_layrnorm.weight", 1, vw});
  out.push_back({"vision_model.pre_layrnorm.bias", 1, vw});
  block_shapes(out, kVision, c.vision.tower);
  out.push_back({"vision_model.post_layernorm.weight", 1, vw});
  out.push_back({"vision_model.post_layernorm.bias", 1, vw});
  out.push_back({"visual_projection.weight", c.embed_dim, vw});
  out.push_back({"text_model.embeddings.token_embedding.weight", c.text.vocab_size, tw});
  out.push_back({"text_model.embeddings.position_embedding.weight", c.text.context_length, tw});
  block_shapes(out, kText, c.text.tower);
  out.push_back({"text_model.final_layer_norm.weight", 1, tw});
  out.push_back({"text_model.final_layer_norm.bias", 1, tw});
  out.push_back({"text_projection.weight", c.embed_dim, tw});
  out.push_back({"logit_scale", 1, 1});
  return out;
}

std::set<std::string> trainable_parameter_names(const DualEncoderConfig& c, const FreezePolicy& policy) {
  const int k = policy.unfreeze_last_k;
  if (k < 0) throw ValidationError("unfreeze_last_k must be >= 0");
  for (const auto* t : {&c.vision.tower, &c.text.tower}) {
    if (k > t->layers) {
      throw ValidationError("unfreeze_last_k=" + std::to_string(k) + " exceeds encoder depth " +
                            std::to_string(t->layers));
    }
  }
  std::vector<std::string> prefixes;
  for (int i = c.vision.tower.layers - k; i < c.vision.tower.layers; ++i) prefixes.push_back(layer_prefix(kVision, i));
  for (int i = c.text.tower.layers - k; i < c.text.tower.layers; ++i) prefixes.push_back(layer_prefix(kText, i));
  std::set<std::string> names;
  for (const auto& s : parameter_shapes(c)) {
    const bool in_block = std::any_of(prefixes.begin(), prefixes.end(),
                                      [&](const std::string& p) { return s.name.starts_with(p); });
    const bool projection = s.name == "visual_projection.weight" || s.name == "text_projection.weight";
    if (in_block || (projection && policy.train_projections) || (s.name == "logit_scale" && policy.train_logit_scale)) {
      names.insert(s.name);
    }
  }
  return names;
}

// ---------------------------------------------------------------------------

DualEncoder DualEncoder::surrogate(std::uint64_t seed, const DualEncoderConfig& config) {
  config.validate();
  DualEncoder enc;
  enc.config_ = config;
  enc.config_.kind = EncoderKind::surrogate;
  enc.config_.tokenizer = TokenizerKind::hash;
  for (const auto& s : parameter_shapes(enc.config_)) {
    enc.params_.emplace(s.name, ag::Var(init_parameter(s, enc.config_, seed)));
  }
  enc.tokenizer_ = std::make_shared<HashTokenizer>(enc.config_.text.vocab_size);
  enc.bind();
  return enc;
}

DualEncoder DualEncoder::from_pretrained(const std::filesystem::path& dir) {
  DualEncoderConfig cfg = vit_b32_config();
  const auto config_path = dir / "config.json";
  if (std::filesystem::exists(config_path)) {
    const auto j = nlohmann::json::parse(read_file(config_path));
    const auto tower = [](const nlohmann::json& t, TowerConfig def) {
      const auto get = [&](const char* key, int fallback) {
        return t.contains(key) && t[key].is_number_integer() ? t[key].get<int>() : fallback;
      };
      return TowerConfig{get("hidden_size", def.width), get("num_hidden_layers", def.layers),
                         get("num_attention_heads", def.heads), get("intermediate_size", def.mlp_width)};
    };
    if (j.contains("vision_config") && j["vision_config"].is_object()) {
      const auto& v = j["vision_config"];
      cfg.vision.tower = tower(v, cfg.vision.tower);
      cfg.vision.image_size = v.value("image_size", cfg.vision.image_size);
      cfg.vision.patch_size = v.value("patch_size", cfg.vision.patch_size);
    }
    if (j.contains("text_config") && j["text_config"].is_object()) {
      const auto& t = j["text_config"];
      cfg.text.tower = tower(t, cfg.text.tower);
      cfg.text.vocab_size = t.value("vocab_size", cfg.text.vocab_size);
      cfg.text.context_length = t.value("max_position_embeddings", cfg.text.context_length);
    }
    cfg.embed_dim = j.value("projection_dim", cfg.embed_dim);
  }
  cfg.validate();
  TensorArchive weights = load_safetensors(dir / "model.safetensors");
  weights.metadata.clear();
  weights.metadata["encoder_config"] = cfg.to_json().dump();
  weights.metadata["freeze_policy"] = FreezePolicy{0, false, false}.to_json().dump();
  weights.metadata["tokenizer_vocab"] = read_file(dir / "vocab.json");
  weights.metadata["tokenizer_merges"] = read_file(dir / "merges.txt");
  return from_archive(weights);
}

DualEncoder DualEncoder::from_archive(const TensorArchive& archive) {
  const auto meta = [&](const char* key) -> const std::string& {
    const auto it = archive.metadata.find(key);
    if (it == archive.metadata.end()) throw ParseError(std::string("encoder archive lacks metadata '") + key + "'");
    return it->second;
  };
  DualEncoder enc;
  enc.config_ = DualEncoderConfig::from_json(nlohmann::json::parse(meta("encoder_config")));
  for (const auto& s : parameter_shapes(enc.config_)) {
    const auto it = archive.tensors.find(s.name);
    if (it == archive.tensors.end()) throw ValidationError("missing parameter tensor '" + s.name + "'");
    enc.params_.emplace(s.name, ag::Var(from_row_major(it->second, s.rows, s.cols, s.name)));
  }
  if (enc.config_.tokenizer == TokenizerKind::bpe) {
    enc.bpe_vocab_json_ = meta("tokenizer_vocab");
    enc.bpe_merges_txt_ = meta("tokenizer_merges");
    enc.tokenizer_ = std::make_shared<BpeTokenizer>(BpeTokenizer::from_text(enc.bpe_vocab_json_, enc.bpe_merges_txt_));
  } else {
    enc.tokenizer_ = std::make_shared<HashTokenizer>(enc.config_.text.vocab_size);
  }
  enc.bind();
  enc.set_freeze_policy(FreezePolicy::from_json(nlohmann::json::parse(meta("freeze_policy"))));
  return enc;
}

DualEncoder::DualEncoder(const DualEncoder& other)
    : config_(other.config_),
      policy_(other.policy_),
      trainable_(other.trainable_),
      tokenizer_(other.tokenizer_),
      bpe_vocab_json_(other.bpe_vocab_json_),
      bpe_merges_txt_(other.bpe_merges_txt_) {
  for (const auto& [name, v] : other.params_) params_.emplace(name, ag::Var(v.value(), v.requires_grad()));
  bind();
}

DualEncoder& DualEncoder::operator=(const DualEncoder& other) {
  if (this != &other) *this = DualEncoder(other);
  return *this;
}

void DualEncoder::bind() {
  const auto get = [&](const std::string& name) -> ag::Var {
    const auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter '" + name + "'");
    return it->second;
  };
  const auto blocks = [&](const char* tower, int layers) {
    std::vector<BlockParams> out;
    for (int i = 0; i < layers; ++i) {
      const auto p = layer_prefix(tower, i);
      out.push_back({get(p + "layer_norm1.weight"), get(p + "layer_norm1.bias"),
                     get(p + "self_attn.q_proj.weight"), get(p + "self_attn.q_proj.bias"),
                     get(p + "self_attn.k_proj.weight"), get(p + "self_attn.k_proj.bias"),
                     get(p + "self_attn.v_proj.weight"), get(p + "self_attn.v_proj.bias"),
                     get(p + "self_attn.out_proj.weight"), get(p + "self_attn.out_proj.bias"),
                     get(p + "layer_norm2.weight"), get(p + "layer_norm2.bias"),
                     get(p + "mlp.fc1.weight"), get(p + "mlp.fc1.bias"),
                     get(p + "mlp.fc2.weight"), get(p + "mlp.fc2.bias")});
    }
    return out;
  };
  bound_.patch_w = get("vision_model.embeddings.patch_embedding.weight");
  bound_.class_emb = get("vision_model.embeddings.class_embedding");
  bound_.vis_pos = get("vision_model.embeddings.position_embedding.weight");
  bound_.pre_ln_w = get("vision_model.pre_layrnorm.weight");
  bound_.pre_ln_b = get("vision_model.pre_layrnorm.bias");
  bound_.post_ln_w = get("vision_model.post_layernorm.weight");
  bound_.post_ln_b = get("vision_model.post_layernorm.bias");
  bound_.vis_proj = get("visual_projection.weight");
  bound_.tok_emb = get("text_model.embeddings.token_embedding.weight");
  bound_.txt_pos = get("text_model.embeddings.position_embedding.weight");
  bound_.final_ln_w = get("text_model.final_layer_norm.weight");
  bound_.final_ln_b = get("text_model.final_layer_norm.bias");
  bound_.txt_proj = get("text_projection.weight");
  bound_.logit_scale = get("logit_scale");
  bound_.vision_blocks = blocks(kVision, config_.vision.tower.layers);
  bound_.text_blocks = blocks(kText, config_.text.tower.layers);
}

double DualEncoder::logit_scale() const { return std::exp(bound_.logit_scale.value()(0, 0)); }

const ag::Var& DualEncoder::log_logit_scale_param() const { return bound_.logit_scale; }

void DualEncoder::set_freeze_policy(const FreezePolicy& policy) {
  trainable_ = trainable_parameter_names(config_, policy);
  policy_ = policy;
  for (auto& [name, v] : params_) {
    v.set_requires_grad(trainable_.count(name) > 0);
    v.zero_grad();
  }
}

DualEncoder apply_freeze_policy(const DualEncoder& encoder, const FreezePolicy& policy) {
  DualEncoder out = encoder;
  out.set_freeze_policy(policy);
  return out;
}

Matrix DualEncoder::preprocess(const Image& image) const {
  if (image.width <= 0 || image.height <= 0) throw ValidationError("preprocess: empty image");
  if (image.channels != 3) throw ValidationError("preprocess: expected 3 channels, got " + std::to_string(image.channels));
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
    throw ValidationError("preprocess: pixel buffer does not match image shape");
  }
  const int size = config_.vision.image_size;
  Image work;
  if (config_.preprocess.shortest_side_crop) {
    const double s = static_cast<double>(size) / std::min(image.width, image.height);
    const int w = std::max(size, static_cast<int>(std::lround(image.width * s)));
    const int h = std::max(size, static_cast<int>(std::lround(image.height * s)));
    work = center_crop(resize_bilinear(image, w, h), size, size);
  } else {
    work = resize_bilinear(image, size, size);
  }
  const int p = config_.vision.patch_size;
  const int grid = size / p;
  Matrix patches(grid * grid, 3 * p * p);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      const Eigen::Index row = gy * grid + gx;
      Eigen::Index col = 0;
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x) {
            const double v = work.at(gy * p + y, gx * p + x, c);
            patches(row, col++) = (v - config_.preprocess.mean[c]) / config_.preprocess.std[c];
          }
    }
  }
  return patches;
}

std::vector<int> DualEncoder::tokenize(const std::string& text) const {
  return tokenizer_->encode(text, config_.text.context_length);
}

ag::Var DualEncoder::run_block(const BlockParams& b, const ag::Var& x, int heads, bool causal) const {
  const auto width = x.cols();
  const auto hd = width / heads;
  const ag::Var h = ag::layer_norm(x, b.ln1_w, b.ln1_b);
  const ag::Var q = ag::scale(ag::linear(h, b.q_w, &b.q_b), 1.0 / std::sqrt(static_cast<double>(hd)));
  const ag::Var k = ag::linear(h, b.k_w, &b.k_b);
  const ag::Var v = ag::linear(h, b.v_w, &b.v_b);
  std::vector<ag::Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int i = 0; i < heads; ++i) {
    const auto s = ag::matmul_nt(ag::slice_cols(q, i * hd, hd), ag::slice_cols(k, i * hd, hd));
    outs.push_back(ag::matmul(ag::softmax_rows(s, causal), ag::slice_cols(v, i * hd, hd)));
  }
  const ag::Var attn = heads == 1 ? outs[0] : ag::concat_cols(outs);
  const ag::Var x1 = ag::add(x, ag::linear(attn, b.o_w, &b.o_b));
  const ag::Var h2 = ag::layer_norm(x1, b.ln2_w, b.ln2_b);
  const ag::Var m = ag::linear(ag::quick_gelu(ag::linear(h2, b.fc1_w, &b.fc1_b)), b.fc2_w, &b.fc2_b);
  return ag::add(x1, m);
}

ag::Var DualEncoder::image_tower(const Matrix& patches) const {
  if (patches.rows() != config_.vision.num_patches() || patches.cols() != bound_.patch_w.cols()) {
    throw ValidationError("image tower: expected " + std::to_string(config_.vision.num_patches()) + "x" +
                          std::to_string(bound_.patch_w.cols()) + " patches");
  }
  const ag::Var emb = ag::matmul_nt(ag::constant(patches), bound_.patch_w);
  ag::Var x = ag::add(ag::concat_rows({bound_.class_emb, emb}), bound_.vis_pos);
  x = ag::layer_norm(x, bound_.pre_ln_w, bound_.pre_ln_b);
  for (const auto& b : bound_.vision_blocks) x = run_block(b, x, config_.vision.tower.heads, false);
  const ag::Var pooled = ag::layer_norm(ag::slice_rows(x, 0, 1), bound_.post_ln_w, bound_.post_ln_b);
  return ag::matmul_nt(pooled, bound_.vis_proj);
}

ag::Var DualEncoder::text_tower(const std::vector<int>& ids) const {
  const auto len = static_cast<Eigen::Index>(ids.size());
  if (len == 0 || len > config_.text.context_length) throw ValidationError("text tower: bad token count");
  ag::Var x = ag::add(ag::gather_rows(bound_.tok_emb, ids), ag::slice_rows(bound_.txt_pos, 0, len));
  for (const auto& b : bound_.text_blocks) x = run_block(b, x, config_.text.tower.heads, config_.text.causal);
  x = ag::layer_norm(x, bound_.final_ln_w, bound_.final_ln_b);
  const ag::Var pooled = config_.text.pooling == TextPooling::eot ? ag::slice_rows(x, len - 1, 1) : ag::mean_rows(x);
  return ag::matmul_nt(pooled, bound_.txt_proj);
}

ag::Var DualEncoder::image_graph(std::span<const Matrix> patches) const {
  if (patches.empty()) throw ValidationError("encode_images: empty batch");
  std::vector<ag::Var> rows;
  rows.reserve(patches.size());
  for (const auto& p : patches) rows.push_back(image_tower(p));
  return ag::l2_normalize_rows(ag::concat_rows(rows));
}

ag::Var DualEncoder::text_graph(const std::vector<std::vector<int>>& token_ids) const {
  if (token_ids.empty()) throw ValidationError("encode_texts: empty prompt list");
  std::vector<ag::Var> rows;
  rows.reserve(token_ids.size());
  for (const auto& ids : token_ids) rows.push_back(text_tower(ids));
  return ag::l2_normalize_rows(ag::concat_rows(rows));
}

EmbeddingMatrix DualEncoder::encode_preprocessed(std::span<const Matrix> patches) const {
  ag::NoGradGuard no_grad;
  return EmbeddingMatrix(image_graph(patches).value());
}

EmbeddingMatrix DualEncoder::encode_images(std::span<const Image> frames) const {
  std::vector<Matrix> patches;
  patches.reserve(frames.size());
  for (const auto& f : frames) patches.push_back(preprocess(f));
  return encode_preprocessed(patches);
}

EmbeddingMatrix DualEncoder::encode_texts(std::span<const std::string> prompts) const {
  if (prompts.empty()) throw ValidationError("encode_texts: empty prompt list");
  std::vector<std::vector<int>> ids;
  ids.reserve(prompts.size());
  for (const auto& p : prompts) ids.push_back(tokenize(p));
  ag::NoGradGuard no_grad;
  return EmbeddingMatrix(text_graph(ids).value());
}

std::map<std::string, Matrix> DualEncoder::snapshot() const {
  std::map<std::string, Matrix> out;
  for (const auto& [name, v] : params_) out.emplace(name, v.value());
  return out;
}

Eigen::Index DualEncoder::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& [_, v] : params_) n += v.value().size();
  return n;
}

std::string DualEncoder::config_hash() const { return sha256_hex(config_.to_json().dump()); }

TensorArchive DualEncoder::to_archive() const {
  TensorArchive a;
  for (const auto& [name, v] : params_) a.tensors.emplace(name, to_row_major(v.value()));
  a.metadata["encoder_kind"] = to_string(config_.kind);
  a.metadata["encoder_config"] = config_.to_json().dump();
  a.metadata["freeze_policy"] = policy_.to_json().dump();
  a.metadata["config_hash"] = config_hash();
  if (config_.tokenizer == TokenizerKind::bpe) {
    a.metadata["tokenizer_vocab"] = bpe_vocab_json_;
    a.metadata["tokenizer_merges"] = bpe_merges_txt_;
  }
  return a;
}

}  // namespace surgline
