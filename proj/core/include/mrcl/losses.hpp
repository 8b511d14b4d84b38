#pragma once

// Contrastive heads and the masked/unmasked reconstruction terms of the joint objective:
//   total = contrastive_weight * contrastive + alpha * rec_masked + lam * rec_unmasked

#include <string>
#include <string_view>
#include <vector>

#include "mrcl/masking.hpp"
#include "mrcl/tensor.hpp"

namespace mrcl::loss {

enum class ContrastiveHead { kInfoNce, kBarlow };

ContrastiveHead parse_head(std::string_view name);
std::string to_string(ContrastiveHead head);

struct LossWeights {
  double alpha = 8.0;               // masked-patch prediction
  double lam = 5.0;                 // unmasked-patch reconstruction
  double contrastive_weight = 1.0;
  double tau = 0.2;                 // InfoNCE temperature
  double bt_lambda = 0.0051;        // Barlow Twins off-diagonal weight
  double bt_eps = 1e-5;             // added to the per-feature variance in the standardizer

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double contrastive = 0.0;
  double rec_masked = 0.0;
  double rec_unmasked = 0.0;
  double total = 0.0;
  LossWeights weights;
};

/// The one place the weighted sum is formed, so the breakdown recomposes bit-exactly.
double compose_total(const LossWeights& w, double contrastive, double rec_masked, double rec_unmasked);

/// Symmetric in-batch NT-Xent over cross-view pairs, cosine similarity / tau.
/// Rows are L2-normalized internally; zero-norm rows raise NumericError.
/// Gradients w.r.t. z1, z2 are written when the pointers are non-null.
template <typename T>
T info_nce(const Mat<T>& z1, const Mat<T>& z2, T tau, Mat<T>* grad1 = nullptr, Mat<T>* grad2 = nullptr);

/// sum_i (1 - C_ii)^2 + bt_lambda * sum_{i!=j} C_ij^2, C = (s1^T s2) / B on batch-standardized
/// features s = (z - mean) / sqrt(var + eps) (biased variance). Exactly zero variance raises
/// NumericError naming the feature.
template <typename T>
T barlow_twins(const Mat<T>& z1, const Mat<T>& z2, T bt_lambda, T eps, Mat<T>* grad1 = nullptr,
               Mat<T>* grad2 = nullptr);

template <typename T>
struct ReconstructionTerms {
  T masked = T(0);
  T unmasked = T(0);
};

/// Per-slot-set mean squared error. A plan without masked slots gives masked == 0.
template <typename T>
ReconstructionTerms<T> reconstruction_loss(const masking::PatchSequence<T>& recon,
                                           const masking::PatchSequence<T>& target,
                                           const masking::MaskPlan& plan);

/// Gradient of  w_masked * masked + w_unmasked * unmasked  w.r.t. recon.
template <typename T>
Mat<T> reconstruction_grad(const masking::PatchSequence<T>& recon, const masking::PatchSequence<T>& target,
                           const masking::MaskPlan& plan, T w_masked, T w_unmasked);

/// Everything the objective needs from one batch of view pairs.
template <typename T>
struct PairOutputs {
  Mat<T> proj1;  // B x proj_dim
  Mat<T> proj2;
  std::vector<masking::PatchSequence<T>> recon1, recon2;
  std::vector<masking::PatchSequence<T>> target1, target2;
  std::vector<masking::MaskPlan> plan1, plan2;
};

template <typename T>
struct PairGradients {
  Mat<T> proj1, proj2;
  std::vector<Mat<T>> recon1, recon2;
};

/// Reconstruction terms are batch means per view, summed over both views.
template <typename T>
LossBreakdown total_loss(const PairOutputs<T>& out, const LossWeights& weights, ContrastiveHead head,
                         PairGradients<T>* grads = nullptr);

}  // namespace mrcl::loss
