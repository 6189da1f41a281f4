#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "agrikd/common.hpp"
#include "agrikd/tensor.hpp"

namespace agrikd {

/// Composite-objective component order (fixed everywhere, including λ vectors,
/// ablation toggles and report columns): ce, proj1, proj2, logits, relation.
enum class LossComponent : std::size_t {
    kCrossEntropy = 0,
    kProj1 = 1,
    kProj2 = 2,
    kLogitKd = 3,
    kRelation = 4,
};

inline constexpr std::size_t kNumLossComponents = 5;
extern const std::array<const char*, kNumLossComponents> kLossComponentNames;

struct LossWeights {
    std::array<double, kNumLossComponents> lambda{0.2, 0.2, 0.2, 0.2, 0.2};
    double temperature = 4.0;
    double beta1 = 1.0;
    double beta2 = 1.0;
    double label_smoothing = 0.1;

    void validate() const;
};

/// Mean over the batch of -sum_c y'_c log softmax(logits)_c with
/// y' = (1-eps)*onehot + eps/C.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels,
                     double smoothing = 0.0);

/// Batch-mean KL(softmax(z_T/T) || softmax(z_S/T)). No temperature-squared
/// rescaling; the heuristic lambda balancing absorbs magnitude differences.
Tensor logit_kd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

struct RelationLoss {
    Tensor total;  // beta1*inter + beta2*intra
    Tensor inter;  // mean over rows of 1 - rho(row_i(P_T), row_i(P_S))
    Tensor intra;  // mean over columns of 1 - rho(col_j(P_T), col_j(P_S))
};

/// Correlation agreement between the two probability matrices [B x C].
/// Requires B >= 2 and C >= 2 and rows summing to 1 (within 1e-6).
RelationLoss relation_loss(const Tensor& teacher_probs, const Tensor& student_probs, double beta1,
                           double beta2);

/// Batch mean of -alpha*(1-p_t)^gamma * log p_t.
Tensor focal_loss(const Tensor& logits, const std::vector<std::size_t>& labels, double alpha,
                  double gamma);

/// Pearson correlation per matching row pair of two [R x C] matrices -> [R].
/// Each standard deviation carries a +1e-8 guard, so zero-variance rows give
/// rho ~ 0 instead of NaN.
Tensor pearson_rows(const Tensor& x, const Tensor& y);

/// Constant one-hot (optionally smoothed) targets for a label vector.
Tensor onehot_targets(const std::vector<std::size_t>& labels, std::size_t num_classes,
                      double smoothing = 0.0);

}  // namespace agrikd
