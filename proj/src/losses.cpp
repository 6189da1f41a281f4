#include "agrikd/losses.hpp"

#include <cmath>

namespace agrikd {

const std::array<const char*, kNumLossComponents> kLossComponentNames = {
    "ce", "proj1", "proj2", "logits", "relation"};

namespace {
constexpr double kVarEps = 1e-8;  // added to each standard deviation in Pearson
}

void LossWeights::validate() const {
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    for (double l : lambda) {
        if (l < 0.0 || !std::isfinite(l)) throw ConfigError("loss weights must be non-negative");
    }
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("relation coefficients must be >= 0");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("label smoothing must be in [0,1)");
    }
}

Tensor onehot_targets(const std::vector<std::size_t>& labels, std::size_t num_classes,
                      double smoothing) {
    std::vector<double> data(labels.size() * num_classes, smoothing / static_cast<double>(num_classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw DataError("label " + std::to_string(labels[i]) + " out of range for " +
                            std::to_string(num_classes) + " classes");
        }
        data[i * num_classes + labels[i]] += 1.0 - smoothing;
    }
    return Tensor::from_data({labels.size(), num_classes}, std::move(data));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels, double smoothing) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("cross_entropy expects [BxC] logits, got " + shape_str(s));
    if (labels.size() != s[0]) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(s[0]));
    }
    if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("label smoothing must be in [0,1)");
    Tensor targets = onehot_targets(labels, s[1], smoothing);
    Tensor logp = log_softmax_rows(logits);
    return div(neg(sum(mul(targets, logp))), static_cast<double>(s[0]));
}

Tensor logit_kd(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
    if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
    if (student_logits.shape() != teacher_logits.shape()) {
        throw DimensionError("logit_kd: student " + shape_str(student_logits.shape()) +
                             " vs teacher " + shape_str(teacher_logits.shape()));
    }
    const auto batch = static_cast<double>(student_logits.dim(0));
    Tensor soft_teacher = div(teacher_logits, temperature);
    Tensor p = softmax_rows(soft_teacher);
    Tensor log_p = log_softmax_rows(soft_teacher);
    Tensor log_q = log_softmax_rows(div(student_logits, temperature));
    return div(sum(mul(p, sub(log_p, log_q))), batch);
}

Tensor pearson_rows(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape() || x.ndim() != 2) {
        throw DimensionError("pearson_rows expects two equal [RxC] matrices, got " +
                             shape_str(x.shape()) + " and " + shape_str(y.shape()));
    }
    Tensor xc = sub(x, mean_axis(x, 1, true));
    Tensor yc = sub(y, mean_axis(y, 1, true));
    Tensor cov = mean_axis(mul(xc, yc), 1);
    Tensor sx = add(sqrt(mean_axis(mul(xc, xc), 1)), kVarEps);
    Tensor sy = add(sqrt(mean_axis(mul(yc, yc), 1)), kVarEps);
    return div(cov, mul(sx, sy));
}

RelationLoss relation_loss(const Tensor& teacher_probs, const Tensor& student_probs, double beta1,
                           double beta2) {
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("relation coefficients must be >= 0");
    const Shape& s = teacher_probs.shape();
    if (s.size() != 2 || student_probs.shape() != s) {
        throw DimensionError("relation_loss expects matching [BxC] matrices, got " + shape_str(s) +
                             " and " + shape_str(student_probs.shape()));
    }
    if (s[0] < 2 || s[1] < 2) {
        throw ContractError("relation_loss needs B >= 2 and C >= 2 for well-defined correlations");
    }
    for (const Tensor* probs : {&teacher_probs, &student_probs}) {
        const auto& v = probs->data();
        for (std::size_t r = 0; r < s[0]; ++r) {
            double row = 0.0;
            for (std::size_t c = 0; c < s[1]; ++c) row += v[r * s[1] + c];
            if (std::fabs(row - 1.0) > 1e-6) {
                throw ContractError("relation_loss: row " + std::to_string(r) +
                                    " is not a probability vector (sum " + std::to_string(row) + ")");
            }
        }
    }
    RelationLoss out;
    out.inter = mean(sub(1.0, pearson_rows(teacher_probs, student_probs)));
    out.intra = mean(sub(1.0, pearson_rows(transpose(teacher_probs), transpose(student_probs))));
    out.total = add(mul(out.inter, beta1), mul(out.intra, beta2));
    return out;
}

Tensor focal_loss(const Tensor& logits, const std::vector<std::size_t>& labels, double alpha,
                  double gamma) {
    if (alpha <= 0.0) throw ConfigError("focal loss alpha must be > 0");
    if (gamma < 0.0) throw ConfigError("focal loss gamma must be >= 0");
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("focal_loss expects [BxC] logits, got " + shape_str(s));
    if (labels.size() != s[0]) {
        throw DimensionError("focal_loss: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(s[0]));
    }
    Tensor onehot = onehot_targets(labels, s[1]);
    Tensor logp = log_softmax_rows(logits);
    Tensor log_pt = sum_axis(mul(logp, onehot), 1);      // [B]
    Tensor pt = sum_axis(mul(exp(logp), onehot), 1);     // [B]
    Tensor weight = pow(sub(1.0, pt), gamma);
    return mean(mul(mul(weight, log_pt), -alpha));
}

}  // namespace agrikd
