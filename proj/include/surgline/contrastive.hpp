#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "surgline/common.hpp"

namespace surgline {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Row-wise unit-norm embeddings (N x D).
class EmbeddingMatrix {
 public:
  static constexpr double kNormTolerance = 1e-5;

  EmbeddingMatrix() = default;
  /// Throws ValidationError when any row norm is outside 1 +/- kNormTolerance.
  explicit EmbeddingMatrix(Matrix values);
  /// Normalizes every row; zero rows are rejected.
  static EmbeddingMatrix normalized(const Matrix& values);

  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index dim() const { return values_.cols(); }
  const Matrix& values() const { return values_; }

 private:
  Matrix values_;
};

/// mask(i, j) is true iff image i and text j share a class.
class PositiveMask {
 public:
  PositiveMask(Eigen::Index rows, Eigen::Index cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

  static PositiveMask from_labels(const std::vector<ClassId>& image_labels, const std::vector<ClassId>& text_labels);
  static PositiveMask identity(Eigen::Index n);

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  bool operator()(Eigen::Index i, Eigen::Index j) const { return bits_[i * cols_ + j] != 0; }
  void set(Eigen::Index i, Eigen::Index j, bool v) { bits_[i * cols_ + j] = v ? 1 : 0; }

  Eigen::Index row_count(Eigen::Index i) const;
  Eigen::Index col_count(Eigen::Index j) const;

  /// Throws ValidationError naming the first row/column without a positive.
  void require_positive_everywhere() const;

 private:
  Eigen::Index rows_;
  Eigen::Index cols_;
  std::vector<std::uint8_t> bits_;
};

struct LossOutput {
  double value = 0.0;
  double image_to_text = 0.0;
  double text_to_image = 0.0;
};

struct LossWithGradient {
  LossOutput loss;
  Matrix grad_logits;  // dL/dlogits, same shape as the logits
};

/// logit_scale * img * txt^T.
Matrix similarity_logits(const Matrix& img, const Matrix& txt, double logit_scale);
Matrix similarity_logits(const EmbeddingMatrix& img, const EmbeddingMatrix& txt, double logit_scale);

/// Symmetric multi-positive InfoNCE. Each anchor's term is the negative mean
/// log-softmax over its positives; each direction averages over anchors; the
/// value is the mean of the two directions.
LossOutput multi_positive_infonce(const Matrix& logits, const PositiveMask& mask);
LossWithGradient multi_positive_infonce_with_gradient(const Matrix& logits, const PositiveMask& mask);

struct EmbeddingGradients {
  Matrix img;
  Matrix txt;
  double logit_scale = 0.0;
};

/// Chain rule from dL/dlogits back to the (unnormalized) embedding inputs of
/// similarity_logits.
EmbeddingGradients backprop_similarity(const Matrix& img, const Matrix& txt, double logit_scale,
                                       const Matrix& grad_logits);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  Matrix analytic_img, analytic_txt;
  Matrix numeric_img, numeric_txt;
};

/// Compares analytic gradients of multi_positive_infonce(similarity_logits(img,
/// txt)) against central differences of an extended-precision evaluation.
/// Per-entry relative error is |a - n| / max(|a| + |n|, 1e-8).
GradientCheckResult gradient_check(const Matrix& img, const Matrix& txt, const PositiveMask& mask,
                                   double logit_scale, double epsilon = 1e-6);

}  // namespace surgline
