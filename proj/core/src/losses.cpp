#include <cmath>

#include "mrcl/errors.hpp"
#include "mrcl/losses.hpp"

namespace mrcl::loss {

using masking::MaskPlan;
using masking::PatchSequence;

ContrastiveHead parse_head(std::string_view name) {
  if (name == "infonce") return ContrastiveHead::kInfoNce;
  if (name == "barlow") return ContrastiveHead::kBarlow;
  throw ConfigError("unknown contrastive head '" + std::string(name) + "' (expected infonce or barlow)");
}

std::string to_string(ContrastiveHead head) { return head == ContrastiveHead::kInfoNce ? "infonce" : "barlow"; }

void LossWeights::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("loss.alpha must be >= 0");
  if (!(lam >= 0.0)) throw ConfigError("loss.lam must be >= 0");
  if (!(contrastive_weight > 0.0)) throw ConfigError("loss.contrastive_weight must be > 0");
  if (!(tau > 0.0)) throw ConfigError("loss.tau must be > 0");
  if (!(bt_lambda > 0.0)) throw ConfigError("loss.bt_lambda must be > 0");
  if (!(bt_eps >= 0.0)) throw ConfigError("loss.bt_eps must be >= 0");
}

double compose_total(const LossWeights& w, double contrastive, double rec_masked, double rec_unmasked) {
  return w.contrastive_weight * contrastive + w.alpha * rec_masked + w.lam * rec_unmasked;
}

namespace {

template <typename T>
void check_pair(const Mat<T>& z1, const Mat<T>& z2, const char* what) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols() || z1.rows() == 0 || z1.cols() == 0) {
    throw ShapeError(std::string(what) + ": embeddings must be non-empty and of equal shape, got " +
                     std::to_string(z1.rows()) + "x" + std::to_string(z1.cols()) + " and " +
                     std::to_string(z2.rows()) + "x" + std::to_string(z2.cols()));
  }
}

template <typename T>
Mat<T> normalize_rows(const Mat<T>& z, Eigen::Matrix<T, Eigen::Dynamic, 1>& norms) {
  norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    if (!(norms(i) > T(0))) throw NumericError("info_nce: row " + std::to_string(i) + " has zero norm");
  }
  return z.array().colwise() / norms.array();
}

// d/dz of (z / |z|) applied to upstream g, row by row.
template <typename T>
Mat<T> normalize_backward(const Mat<T>& zn, const Eigen::Matrix<T, Eigen::Dynamic, 1>& norms, const Mat<T>& g) {
  Mat<T> out(g.rows(), g.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    out.row(i) = (g.row(i) - zn.row(i) * zn.row(i).dot(g.row(i))) / norms(i);
  }
  return out;
}

// Row-wise softmax cross-entropy with the diagonal as target; returns the summed loss and
// writes d(sum)/d(logits).
template <typename T>
T diagonal_cross_entropy(const Mat<T>& logits, Mat<T>& dlogits) {
  T total = T(0);
  dlogits.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const auto e = (logits.row(i).array() - mx).exp();
    const T sum = e.sum();
    total += std::log(sum) + mx - logits(i, i);
    dlogits.row(i) = (e / sum).matrix();
    dlogits(i, i) -= T(1);
  }
  return total;
}

}  // namespace

template <typename T>
T info_nce(const Mat<T>& z1, const Mat<T>& z2, T tau, Mat<T>* grad1, Mat<T>* grad2) {
  check_pair(z1, z2, "info_nce");
  if (!(tau > T(0))) throw ConfigError("info_nce: temperature must be positive");
  const auto b = static_cast<T>(z1.rows());
  Eigen::Matrix<T, Eigen::Dynamic, 1> n1, n2;
  const Mat<T> u1 = normalize_rows(z1, n1);
  const Mat<T> u2 = normalize_rows(z2, n2);
  const Mat<T> logits = (u1 * u2.transpose()) / tau;
  Mat<T> d_rows, d_cols;
  const T forward = diagonal_cross_entropy(logits, d_rows);
  const T backward_dir = diagonal_cross_entropy(Mat<T>(logits.transpose()), d_cols);
  const T loss = (forward + backward_dir) / (T(2) * b);
  if (grad1 || grad2) {
    // dL/dlogits = (d_rows + d_cols^T) / (2B)
    const Mat<T> dlogits = (d_rows + d_cols.transpose()) / (T(2) * b * tau);
    if (grad1) *grad1 = normalize_backward(u1, n1, Mat<T>(dlogits * u2));
    if (grad2) *grad2 = normalize_backward(u2, n2, Mat<T>(dlogits.transpose() * u1));
  }
  return loss;
}

namespace {

template <typename T>
struct Standardized {
  Mat<T> s;
  RowVec<T> rstd;
};

template <typename T>
Standardized<T> standardize(const Mat<T>& z, T eps, const char* side) {
  const auto b = static_cast<T>(z.rows());
  const RowVec<T> mean = z.colwise().mean();
  const Mat<T> centered = z.rowwise() - mean;
  const RowVec<T> var = centered.colwise().squaredNorm() / b;
  Standardized<T> out;
  out.rstd.resize(z.cols());
  for (Eigen::Index d = 0; d < z.cols(); ++d) {
    if (var(d) == T(0)) {
      throw NumericError(std::string("barlow_twins: feature ") + std::to_string(d) + " of " + side +
                         " has zero variance across the batch");
    }
    out.rstd(d) = T(1) / std::sqrt(var(d) + eps);
  }
  out.s = centered.array().rowwise() * out.rstd.array();
  return out;
}

// Backward of s = (z - mean) * rstd with rstd = (var + eps)^-1/2, biased variance.
template <typename T>
Mat<T> standardize_backward(const Standardized<T>& st, const Mat<T>& ds) {
  const auto b = static_cast<T>(ds.rows());
  const RowVec<T> mean_ds = ds.colwise().mean();
  const RowVec<T> mean_ds_s = (ds.array() * st.s.array()).matrix().colwise().sum() / b;
  // dz = rstd * (ds - mean(ds) - s * mean(ds * s)); mean(s) == 0 removes the remaining term.
  Mat<T> out = ds.rowwise() - mean_ds;
  for (Eigen::Index d = 0; d < ds.cols(); ++d) {
    out.col(d) = (out.col(d) - st.s.col(d) * mean_ds_s(d)) * st.rstd(d);
  }
  return out;
}

}  // namespace

template <typename T>
T barlow_twins(const Mat<T>& z1, const Mat<T>& z2, T bt_lambda, T eps, Mat<T>* grad1, Mat<T>* grad2) {
  check_pair(z1, z2, "barlow_twins");
  if (z1.rows() < 2) throw ShapeError("barlow_twins: batch standardization needs B >= 2");
  const auto b = static_cast<T>(z1.rows());
  const Standardized<T> s1 = standardize(z1, eps, "z1");
  const Standardized<T> s2 = standardize(z2, eps, "z2");
  const Mat<T> c = (s1.s.transpose() * s2.s) / b;
  T loss = T(0);
  Mat<T> dc(c.rows(), c.cols());
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      if (i == j) {
        const T diff = T(1) - c(i, j);
        loss += diff * diff;
        dc(i, j) = T(-2) * diff;
      } else {
        loss += bt_lambda * c(i, j) * c(i, j);
        dc(i, j) = T(2) * bt_lambda * c(i, j);
      }
    }
  }
  if (grad1) *grad1 = standardize_backward(s1, Mat<T>((s2.s * dc.transpose()) / b));
  if (grad2) *grad2 = standardize_backward(s2, Mat<T>((s1.s * dc) / b));
  return loss;
}

namespace {

template <typename T>
void check_recon(const PatchSequence<T>& recon, const PatchSequence<T>& target, const MaskPlan& plan) {
  if (recon.patches.rows() != target.patches.rows() || recon.patches.cols() != target.patches.cols()) {
    throw ShapeError("reconstruction_loss: recon is " + std::to_string(recon.patches.rows()) + "x" +
                     std::to_string(recon.patches.cols()) + " but target is " +
                     std::to_string(target.patches.rows()) + "x" + std::to_string(target.patches.cols()));
  }
  if (plan.num_patches() != recon.patches.rows()) {
    throw ShapeError("reconstruction_loss: mask plan covers " + std::to_string(plan.num_patches()) +
                     " patches, tensors have " + std::to_string(recon.patches.rows()));
  }
}

}  // namespace

template <typename T>
ReconstructionTerms<T> reconstruction_loss(const PatchSequence<T>& recon, const PatchSequence<T>& target,
                                           const MaskPlan& plan) {
  check_recon(recon, target, plan);
  const std::vector<bool> masked = plan.is_masked();
  T sum_masked = T(0);
  T sum_visible = T(0);
  for (Eigen::Index n = 0; n < recon.patches.rows(); ++n) {
    const T se = (recon.patches.row(n) - target.patches.row(n)).squaredNorm();
    (masked[static_cast<std::size_t>(n)] ? sum_masked : sum_visible) += se;
  }
  const auto dim = static_cast<T>(recon.patches.cols());
  ReconstructionTerms<T> out;
  if (plan.num_masked() > 0) out.masked = sum_masked / (dim * static_cast<T>(plan.num_masked()));
  if (plan.num_visible > 0) out.unmasked = sum_visible / (dim * static_cast<T>(plan.num_visible));
  return out;
}

template <typename T>
Mat<T> reconstruction_grad(const PatchSequence<T>& recon, const PatchSequence<T>& target, const MaskPlan& plan,
                           T w_masked, T w_unmasked) {
  check_recon(recon, target, plan);
  const std::vector<bool> masked = plan.is_masked();
  const auto dim = static_cast<T>(recon.patches.cols());
  const T scale_m = plan.num_masked() > 0 ? T(2) * w_masked / (dim * static_cast<T>(plan.num_masked())) : T(0);
  const T scale_u = plan.num_visible > 0 ? T(2) * w_unmasked / (dim * static_cast<T>(plan.num_visible)) : T(0);
  Mat<T> grad = recon.patches - target.patches;
  for (Eigen::Index n = 0; n < grad.rows(); ++n) grad.row(n) *= masked[static_cast<std::size_t>(n)] ? scale_m : scale_u;
  return grad;
}

template <typename T>
LossBreakdown total_loss(const PairOutputs<T>& out, const LossWeights& weights, ContrastiveHead head,
                         PairGradients<T>* grads) {
  const std::size_t b = out.recon1.size();
  if (out.recon2.size() != b || out.target1.size() != b || out.target2.size() != b || out.plan1.size() != b ||
      out.plan2.size() != b || static_cast<std::size_t>(out.proj1.rows()) != b) {
    throw ShapeError("total_loss: per-view outputs disagree on the batch size");
  }
  LossBreakdown breakdown;
  breakdown.weights = weights;
  const T cw = static_cast<T>(weights.contrastive_weight);

  Mat<T>* g1 = grads ? &grads->proj1 : nullptr;
  Mat<T>* g2 = grads ? &grads->proj2 : nullptr;
  T contrastive;
  if (head == ContrastiveHead::kInfoNce) {
    contrastive = info_nce(out.proj1, out.proj2, static_cast<T>(weights.tau), g1, g2);
  } else {
    contrastive = barlow_twins(out.proj1, out.proj2, static_cast<T>(weights.bt_lambda),
                               static_cast<T>(weights.bt_eps), g1, g2);
  }
  if (grads) {
    grads->proj1 *= cw;
    grads->proj2 *= cw;
    grads->recon1.resize(b);
    grads->recon2.resize(b);
  }

  const auto bt = static_cast<T>(b);
  T rec_masked = T(0);
  T rec_unmasked = T(0);
  const T wm = static_cast<T>(weights.alpha) / bt;
  const T wu = static_cast<T>(weights.lam) / bt;
  for (int view = 0; view < 2; ++view) {
    const auto& recon = view == 0 ? out.recon1 : out.recon2;
    const auto& target = view == 0 ? out.target1 : out.target2;
    const auto& plans = view == 0 ? out.plan1 : out.plan2;
    T view_masked = T(0);
    T view_unmasked = T(0);
    for (std::size_t i = 0; i < b; ++i) {
      const auto terms = reconstruction_loss(recon[i], target[i], plans[i]);
      view_masked += terms.masked;
      view_unmasked += terms.unmasked;
      if (grads) {
        (view == 0 ? grads->recon1 : grads->recon2)[i] = reconstruction_grad(recon[i], target[i], plans[i], wm, wu);
      }
    }
    rec_masked += view_masked / bt;
    rec_unmasked += view_unmasked / bt;
  }

  breakdown.contrastive = static_cast<double>(contrastive);
  breakdown.rec_masked = static_cast<double>(rec_masked);
  breakdown.rec_unmasked = static_cast<double>(rec_unmasked);
  breakdown.total = compose_total(weights, breakdown.contrastive, breakdown.rec_masked, breakdown.rec_unmasked);
  return breakdown;
}

#define MRCL_INSTANTIATE(T)                                                                                   \
  template T info_nce<T>(const Mat<T>&, const Mat<T>&, T, Mat<T>*, Mat<T>*);                                  \
  template T barlow_twins<T>(const Mat<T>&, const Mat<T>&, T, T, Mat<T>*, Mat<T>*);                           \
  template ReconstructionTerms<T> reconstruction_loss<T>(const PatchSequence<T>&, const PatchSequence<T>&,    \
                                                         const MaskPlan&);                                    \
  template Mat<T> reconstruction_grad<T>(const PatchSequence<T>&, const PatchSequence<T>&, const MaskPlan&, T, \
                                         T);                                                                  \
  template LossBreakdown total_loss<T>(const PairOutputs<T>&, const LossWeights&, ContrastiveHead,           \
                                       PairGradients<T>*);
MRCL_INSTANTIATE(float)
MRCL_INSTANTIATE(double)
#undef MRCL_INSTANTIATE

}  // namespace mrcl::loss
