#include "surgline/contrastive.hpp"

#include <cmath>
#include <functional>

namespace surgline {

EmbeddingMatrix::EmbeddingMatrix(Matrix values) : values_(std::move(values)) {
  for (Eigen::Index i = 0; i < values_.rows(); ++i) {
    const double n = values_.row(i).norm();
    if (!(std::abs(n - 1.0) <= kNormTolerance)) {
      throw ValidationError("embedding row " + std::to_string(i) + " has norm " + format_real(n));
    }
  }
}

EmbeddingMatrix EmbeddingMatrix::normalized(const Matrix& values) {
  Matrix out = values;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw ValidationError("cannot normalize embedding row " + std::to_string(i));
    out.row(i) /= n;
  }
  return EmbeddingMatrix(std::move(out));
}

PositiveMask PositiveMask::from_labels(const std::vector<ClassId>& image_labels,
                                       const std::vector<ClassId>& text_labels) {
  PositiveMask m(static_cast<Eigen::Index>(image_labels.size()), static_cast<Eigen::Index>(text_labels.size()));
  for (std::size_t i = 0; i < image_labels.size(); ++i)
    for (std::size_t j = 0; j < text_labels.size(); ++j)
      m.set(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j), image_labels[i] == text_labels[j]);
  return m;
}

PositiveMask PositiveMask::identity(Eigen::Index n) {
  PositiveMask m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) m.set(i, i, true);
  return m;
}

Eigen::Index PositiveMask::row_count(Eigen::Index i) const {
  Eigen::Index c = 0;
  for (Eigen::Index j = 0; j < cols_; ++j) c += (*this)(i, j);
  return c;
}

Eigen::Index PositiveMask::col_count(Eigen::Index j) const {
  Eigen::Index c = 0;
  for (Eigen::Index i = 0; i < rows_; ++i) c += (*this)(i, j);
  return c;
}

void PositiveMask::require_positive_everywhere() const {
  for (Eigen::Index i = 0; i < rows_; ++i)
    if (row_count(i) == 0) throw ValidationError("positive mask: image row " + std::to_string(i) + " has no positive");
  for (Eigen::Index j = 0; j < cols_; ++j)
    if (col_count(j) == 0) throw ValidationError("positive mask: text column " + std::to_string(j) + " has no positive");
}

Matrix similarity_logits(const Matrix& img, const Matrix& txt, double logit_scale) {
  if (img.cols() != txt.cols()) {
    throw ValidationError("similarity_logits: dimension mismatch (" + std::to_string(img.cols()) + " vs " +
                          std::to_string(txt.cols()) + ")");
  }
  return logit_scale * (img * txt.transpose());
}

Matrix similarity_logits(const EmbeddingMatrix& img, const EmbeddingMatrix& txt, double logit_scale) {
  return similarity_logits(img.values(), txt.values(), logit_scale);
}

namespace {

void check_inputs(const Matrix& logits, const PositiveMask& mask) {
  if (logits.rows() != mask.rows() || logits.cols() != mask.cols()) {
    throw ValidationError("infonce: mask shape does not match logits");
  }
  if (logits.size() == 0) throw ValidationError("infonce: empty logits");
  if (!logits.allFinite()) throw ValidationError("infonce: non-finite logits");
  mask.require_positive_everywhere();
}

// Softmax over each row of `m` plus the per-row log-sum-exp.
void row_softmax(const Matrix& m, Matrix& probs, Vector& lse) {
  probs.resize(m.rows(), m.cols());
  lse.resize(m.rows());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    const RowVector e = (m.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    probs.row(i) = e / s;
    lse(i) = mx + std::log(s);
  }
}

// One direction: rows are anchors. Returns the mean anchor loss and
// accumulates `weight` * dL/dm into grad.
double directional_loss(const Matrix& m, const PositiveMask& mask, bool transposed, double weight, Matrix* grad) {
  Matrix probs;
  Vector lse;
  row_softmax(m, probs, lse);
  const auto n = m.rows();
  double total = 0.0;
  for (Eigen::Index a = 0; a < n; ++a) {
    double pos_sum = 0.0;
    Eigen::Index pos = 0;
    for (Eigen::Index b = 0; b < m.cols(); ++b) {
      const bool p = transposed ? mask(b, a) : mask(a, b);
      if (p) {
        pos_sum += m(a, b);
        ++pos;
      }
    }
    total += lse(a) - pos_sum / static_cast<double>(pos);
    if (grad) {
      for (Eigen::Index b = 0; b < m.cols(); ++b) {
        const bool p = transposed ? mask(b, a) : mask(a, b);
        const double g = weight / static_cast<double>(n) * (probs(a, b) - (p ? 1.0 / static_cast<double>(pos) : 0.0));
        if (transposed) (*grad)(b, a) += g;
        else (*grad)(a, b) += g;
      }
    }
  }
  return total / static_cast<double>(n);
}

LossOutput infonce_impl(const Matrix& logits, const PositiveMask& mask, Matrix* grad) {
  check_inputs(logits, mask);
  if (grad) grad->setZero(logits.rows(), logits.cols());
  LossOutput out;
  out.image_to_text = directional_loss(logits, mask, false, 0.5, grad);
  out.text_to_image = directional_loss(logits.transpose(), mask, true, 0.5, grad);
  out.value = 0.5 * (out.image_to_text + out.text_to_image);
  return out;
}

// Independent extended-precision evaluation used as the finite-difference oracle.
long double reference_loss(const Matrix& img, const Matrix& txt, const PositiveMask& mask, long double scale) {
  const auto n = img.rows(), m = txt.rows(), d = img.cols();
  std::vector<long double> logits(static_cast<std::size_t>(n * m));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      long double s = 0.0L;
      for (Eigen::Index k = 0; k < d; ++k) s += static_cast<long double>(img(i, k)) * txt(j, k);
      logits[static_cast<std::size_t>(i * m + j)] = scale * s;
    }
  const auto at = [&](Eigen::Index i, Eigen::Index j) { return logits[static_cast<std::size_t>(i * m + j)]; };
  long double i2t = 0.0L;
  for (Eigen::Index i = 0; i < n; ++i) {
    long double mx = at(i, 0);
    for (Eigen::Index j = 1; j < m; ++j) mx = std::max(mx, at(i, j));
    long double z = 0.0L, pos = 0.0L;
    int cnt = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      z += std::exp(at(i, j) - mx);
      if (mask(i, j)) {
        pos += at(i, j);
        ++cnt;
      }
    }
    i2t += mx + std::log(z) - pos / cnt;
  }
  long double t2i = 0.0L;
  for (Eigen::Index j = 0; j < m; ++j) {
    long double mx = at(0, j);
    for (Eigen::Index i = 1; i < n; ++i) mx = std::max(mx, at(i, j));
    long double z = 0.0L, pos = 0.0L;
    int cnt = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      z += std::exp(at(i, j) - mx);
      if (mask(i, j)) {
        pos += at(i, j);
        ++cnt;
      }
    }
    t2i += mx + std::log(z) - pos / cnt;
  }
  return 0.5L * (i2t / n + t2i / m);
}

Matrix numeric_gradient(Matrix& target, const std::function<long double()>& f, double eps) {
  Matrix g(target.rows(), target.cols());
  for (Eigen::Index i = 0; i < target.rows(); ++i) {
    for (Eigen::Index k = 0; k < target.cols(); ++k) {
      const double orig = target(i, k);
      const double hi = orig + eps, lo = orig - eps;
      target(i, k) = hi;
      const long double up = f();
      target(i, k) = lo;
      const long double down = f();
      target(i, k) = orig;
      g(i, k) = static_cast<double>((up - down) / (static_cast<long double>(hi) - lo));
    }
  }
  return g;
}

double max_rel(const Matrix& a, const Matrix& n) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(a(i)) + std::abs(n(i)), 1e-8);
    worst = std::max(worst, std::abs(a(i) - n(i)) / denom);
  }
  return worst;
}

}  // namespace

LossOutput multi_positive_infonce(const Matrix& logits, const PositiveMask& mask) {
  return infonce_impl(logits, mask, nullptr);
}

LossWithGradient multi_positive_infonce_with_gradient(const Matrix& logits, const PositiveMask& mask) {
  LossWithGradient out;
  out.loss = infonce_impl(logits, mask, &out.grad_logits);
  return out;
}

EmbeddingGradients backprop_similarity(const Matrix& img, const Matrix& txt, double logit_scale,
                                       const Matrix& grad_logits) {
  EmbeddingGradients g;
  g.img = logit_scale * grad_logits * txt;
  g.txt = logit_scale * grad_logits.transpose() * img;
  g.logit_scale = (grad_logits.array() * (img * txt.transpose()).array()).sum();
  return g;
}

GradientCheckResult gradient_check(const Matrix& img, const Matrix& txt, const PositiveMask& mask,
                                   double logit_scale, double epsilon) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw ValidationError("gradient_check: epsilon outside [1e-7, 1e-3]");
  GradientCheckResult r;
  const auto lg = multi_positive_infonce_with_gradient(similarity_logits(img, txt, logit_scale), mask);
  const auto eg = backprop_similarity(img, txt, logit_scale, lg.grad_logits);
  r.analytic_img = eg.img;
  r.analytic_txt = eg.txt;

  Matrix img_work = img, txt_work = txt;
  const long double scale = logit_scale;
  const auto f = [&] { return reference_loss(img_work, txt_work, mask, scale); };
  r.numeric_img = numeric_gradient(img_work, f, epsilon);
  r.numeric_txt = numeric_gradient(txt_work, f, epsilon);
  r.max_relative_error = std::max(max_rel(r.analytic_img, r.numeric_img), max_rel(r.analytic_txt, r.numeric_txt));
  return r;
}

}  // namespace surgline
