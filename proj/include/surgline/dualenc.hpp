#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgline/autograd.hpp"
#include "surgline/contrastive.hpp"
#include "surgline/image.hpp"
#include "surgline/safetensors.hpp"
#include "surgline/tokenizer.hpp"

namespace surgline {

enum class EncoderKind { pretrained_backbone, surrogate };
enum class TextPooling { eot, mean };
enum class TokenizerKind { hash, bpe };

std::string to_string(EncoderKind kind);

struct TowerConfig {
  int width = 32;
  int layers = 4;
  int heads = 2;
  int mlp_width = 128;
};

struct VisionConfig {
  TowerConfig tower;
  int image_size = 32;
  int patch_size = 8;
  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
};

struct TextConfig {
  TowerConfig tower;
  int vocab_size = 1024;
  int context_length = 32;
  bool causal = false;
  TextPooling pooling = TextPooling::mean;
};

struct PreprocessConfig {
  /// Resize shortest side then center-crop (backbone) vs. direct resize (surrogate).
  bool shortest_side_crop = false;
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::array<double, 3> std{0.25, 0.25, 0.25};
};

struct DualEncoderConfig {
  EncoderKind kind = EncoderKind::surrogate;
  VisionConfig vision;
  TextConfig text;
  int embed_dim = 32;
  double log_logit_scale = 2.659260036932778;  // ln(1 / 0.07)
  PreprocessConfig preprocess;
  TokenizerKind tokenizer = TokenizerKind::hash;

  nlohmann::ordered_json to_json() const;
  static DualEncoderConfig from_json(const nlohmann::json& j);
  void validate() const;
};

/// Desk-scale encoder: 32x32 input, 8x8 patches, width 32, 4 blocks per
/// tower, hashed bag-of-words text tower with mean pooling, D = 32.
DualEncoderConfig surrogate_config();
/// CLIP ViT-B/32 geometry (12 + 12 blocks, 224 px input, D = 512).
DualEncoderConfig vit_b32_config();

struct FreezePolicy {
  int unfreeze_last_k = 3;
  bool train_projections = false;
  bool train_logit_scale = false;

  nlohmann::ordered_json to_json() const;
  static FreezePolicy from_json(const nlohmann::json& j);
  bool operator==(const FreezePolicy&) const = default;
};

struct ParameterShape {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index numel() const { return rows * cols; }
};

/// Every parameter of the architecture, named after the Hugging Face CLIP
/// layout, without allocating storage.
std::vector<ParameterShape> parameter_shapes(const DualEncoderConfig& config);

/// Names left trainable by `policy`. Throws ValidationError when
/// unfreeze_last_k exceeds either tower's depth.
std::set<std::string> trainable_parameter_names(const DualEncoderConfig& config, const FreezePolicy& policy);

/// Paired image/text towers sharing an embedding space. Copies are deep.
/// Inference is const and safe to run concurrently; training mutates
/// parameter values and needs exclusive access.
class DualEncoder {
 public:
  /// Deterministically initialized surrogate; equal seeds give equal weights.
  static DualEncoder surrogate(std::uint64_t seed, const DualEncoderConfig& config = surrogate_config());
  /// Loads config.json (optional), model.safetensors, vocab.json and
  /// merges.txt from a Hugging Face style CLIP directory.
  static DualEncoder from_pretrained(const std::filesystem::path& dir);
  static DualEncoder from_archive(const TensorArchive& archive);

  DualEncoder(const DualEncoder& other);
  DualEncoder& operator=(const DualEncoder& other);
  DualEncoder(DualEncoder&&) noexcept = default;
  DualEncoder& operator=(DualEncoder&&) noexcept = default;

  EncoderKind kind() const { return config_.kind; }
  const DualEncoderConfig& config() const { return config_; }
  const FreezePolicy& freeze_policy() const { return policy_; }
  const std::set<std::string>& trainable_set() const { return trainable_; }
  double logit_scale() const;

  /// Resize/crop/normalize and cut into a (patches x 3*p*p) matrix.
  Matrix preprocess(const Image& image) const;
  std::vector<int> tokenize(const std::string& text) const;

  EmbeddingMatrix encode_images(std::span<const Image> frames) const;
  EmbeddingMatrix encode_preprocessed(std::span<const Matrix> patches) const;
  EmbeddingMatrix encode_texts(std::span<const std::string> prompts) const;

  /// Differentiable, row-normalized embeddings for a training step.
  ag::Var image_graph(std::span<const Matrix> patches) const;
  ag::Var text_graph(const std::vector<std::vector<int>>& token_ids) const;
  const ag::Var& log_logit_scale_param() const;

  const std::map<std::string, ag::Var>& parameters() const { return params_; }
  std::map<std::string, ag::Var>& mutable_parameters() { return params_; }
  std::map<std::string, Matrix> snapshot() const;
  Eigen::Index parameter_count() const;

  /// Marks exactly the policy's parameters trainable and everything else frozen.
  void set_freeze_policy(const FreezePolicy& policy);

  /// Parameters plus self-describing metadata (kind, config, policy, config
  /// hash, tokenizer assets).
  TensorArchive to_archive() const;
  std::string config_hash() const;

 private:
  struct BlockParams {
    ag::Var ln1_w, ln1_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ln2_w, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  struct Bound {
    ag::Var patch_w, class_emb, vis_pos, pre_ln_w, pre_ln_b, post_ln_w, post_ln_b, vis_proj;
    ag::Var tok_emb, txt_pos, final_ln_w, final_ln_b, txt_proj;
    ag::Var logit_scale;
    std::vector<BlockParams> vision_blocks, text_blocks;
  };

  DualEncoder() = default;
  void bind();
  ag::Var run_block(const BlockParams& b, const ag::Var& x, int heads, bool causal) const;
  ag::Var image_tower(const Matrix& patches) const;
  ag::Var text_tower(const std::vector<int>& ids) const;

  DualEncoderConfig config_;
  FreezePolicy policy_{0, false, false};
  std::set<std::string> trainable_;
  std::map<std::string, ag::Var> params_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  std::string bpe_vocab_json_;
  std::string bpe_merges_txt_;
  Bound bound_;
};

/// Copy of `encoder` with `policy` applied.
DualEncoder apply_freeze_policy(const DualEncoder& encoder, const FreezePolicy& policy);

}  // namespace surgline
