#include "agrikd/projectors.hpp"

#include <cmath>
#include <memory>

namespace agrikd {

namespace {

Tensor init_conv(std::size_t out_ch, std::size_t in_ch, std::size_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
    return Tensor::rand_uniform({out_ch, in_ch, k, k}, -bound, bound, rng, true);
}

}  // namespace

Tensor feature_map_to_tokens(const Tensor& features) {
    const Shape& s = features.shape();
    if (s.size() != 4) throw DimensionError("expected feature map [BxCxgxg], got " + shape_str(s));
    if (s[2] != s[3]) throw DimensionError("feature map must be square, got " + shape_str(s));
    return reshape(permute(features, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

// ---- PCA projector -----------------------------------------------------------

PcaProjector::PcaProjector(std::size_t in_channels, std::size_t embed_dim, double mask_p,
                           double dropout_rate, Rng& rng)
    : in_channels_(in_channels), embed_dim_(embed_dim), mask_p_(mask_p), dropout_(dropout_rate) {
    if (in_channels == 0 || embed_dim == 0) throw ConfigError("pca projector: dimensions must be positive");
    if (mask_p < 0.0 || mask_p > 1.0) throw ConfigError("pca projector: mask probability must be in [0,1]");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("pca projector: dropout must be in [0,1)");
    wq_ = init_conv(embed_dim, in_channels, 3, rng);
    bq_ = Tensor::zeros({embed_dim}, true);
    wk_ = init_conv(embed_dim, in_channels, 3, rng);
    bk_ = Tensor::zeros({embed_dim}, true);
    wv_ = init_conv(embed_dim, in_channels, 3, rng);
    bv_ = Tensor::zeros({embed_dim}, true);
}

QkvTriplet PcaProjector::project(const Tensor& features, bool training, Rng* rng) const {
    const Shape& s = features.shape();
    if (s.size() != 4 || s[1] != in_channels_) {
        throw DimensionError("pca projector configured for " + std::to_string(in_channels_) +
                             " channels, got features " + shape_str(s));
    }
    if (training && rng == nullptr) throw ContractError("pca projector: training mode requires an RNG");
    QkvTriplet out;
    auto project_one = [&](const Tensor& w, const Tensor& b) {
        Tensor tokens = feature_map_to_tokens(conv2d(features, w, b, 1, 1));
        if (training) tokens = dropout(tokens, dropout_, true, *rng);
        return tokens;
    };
    out.q = project_one(wq_, bq_);
    out.k = project_one(wk_, bk_);
    out.v = project_one(wv_, bv_);
    return out;
}

NamedParams PcaProjector::named_parameters() const {
    return {
        {"pca.conv_q.weight", wq_}, {"pca.conv_q.bias", bq_},
        {"pca.conv_k.weight", wk_}, {"pca.conv_k.bias", bk_},
        {"pca.conv_v.weight", wv_}, {"pca.conv_v.bias", bv_},
    };
}

PcaProjector PcaProjector::clone() const {
    PcaProjector copy = *this;
    copy.wq_ = wq_.clone();
    copy.bq_ = bq_.clone();
    copy.wk_ = wk_.clone();
    copy.bk_ = bk_.clone();
    copy.wv_ = wv_.clone();
    copy.bv_ = bv_.clone();
    return copy;
}

Tensor partial_mask(const Tensor& student, const Tensor& teacher, double p, Rng& rng) {
    if (p < 0.0 || p > 1.0) throw ConfigError("mask probability must be in [0,1], got " + std::to_string(p));
    if (student.shape() != teacher.shape()) {
        throw DimensionError("partial_mask: student " + shape_str(student.shape()) + " vs teacher " +
                             shape_str(teacher.shape()));
    }
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> take_teacher(student.numel());
    for (auto& m : take_teacher) m = uniform(rng) < p ? 1.0 : 0.0;
    Tensor mask = Tensor::from_data(student.shape(), std::move(take_teacher));
    Tensor keep = sub(1.0, mask);
    return add(mul(teacher.detach(), mask), mul(student, keep));
}

Tensor pc_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const Shape& s = q.shape();
    if (s.size() != 3 || k.shape() != s || v.shape() != s) {
        throw DimensionError("pc_attention expects matching [BxNxd] tensors, got " + shape_str(s) +
                             ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
    }
    const double scale = std::sqrt(static_cast<double>(s[2]));
    Tensor scores = div(matmul(q, transpose(k)), scale);
    return matmul(softmax_rows(scores), v);
}

Tensor proj1_loss(const Tensor& teacher_attn, const Tensor& teacher_values, const Tensor& pc_attn,
                  const Tensor& student_values, std::size_t embed_dim) {
    const Shape& s = teacher_attn.shape();
    if (s.size() != 3 || teacher_values.shape() != s || pc_attn.shape() != s ||
        student_values.shape() != s) {
        throw DimensionError("proj1_loss expects four matching [BxNxd] tensors");
    }
    if (s[2] != embed_dim) {
        throw DimensionError("proj1_loss: embed dim " + std::to_string(embed_dim) +
                             " does not match tensors " + shape_str(s));
    }
    const double scale = std::sqrt(static_cast<double>(embed_dim));
    Tensor attn_term = mean(pow(sub(teacher_attn.detach(), pc_attn), 2.0));
    Tensor vt = teacher_values.detach();
    Tensor value_corr_t = div(mul(vt, vt), scale);
    Tensor value_corr_s = div(mul(student_values, student_values), scale);
    Tensor value_term = mean(pow(sub(value_corr_t, value_corr_s), 2.0));
    return add(attn_term, value_term);
}

// ---- GWL projector -----------------------------------------------------------

std::vector<std::size_t> quadrant_of_cell(std::size_t grid) {
    if (grid == 0 || grid % 2 != 0) throw ConfigError("quadrant grouping requires an even grid");
    const std::size_t half = grid / 2;
    std::vector<std::size_t> out(grid * grid);
    for (std::size_t y = 0; y < grid; ++y) {
        for (std::size_t x = 0; x < grid; ++x) {
            out[y * grid + x] = (y >= half ? 2 : 0) + (x >= half ? 1 : 0);
        }
    }
    return out;
}

std::vector<std::size_t> quadrant_token_order(std::size_t grid) {
    if (grid == 0 || grid % 2 != 0) throw ConfigError("quadrant grouping requires an even grid");
    const std::size_t half = grid / 2;
    std::vector<std::size_t> order;
    order.reserve(grid * grid);
    const std::size_t corners[4][2] = {{0, 0}, {0, half}, {half, 0}, {half, half}};
    for (const auto& corner : corners) {
        for (std::size_t y = corner[0]; y < corner[0] + half; ++y) {
            for (std::size_t x = corner[1]; x < corner[1] + half; ++x) {
                order.push_back(y * grid + x);
            }
        }
    }
    return order;
}

std::vector<std::size_t> raster_restore_order(std::size_t grid) {
    const auto order = quadrant_token_order(grid);
    std::vector<std::size_t> inverse(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) inverse[order[pos]] = pos;
    return inverse;
}

namespace {

// Reorders axis 1 of a [B x N x C] tensor by `order`.
Tensor reorder_tokens(const Tensor& tokens, const std::vector<std::size_t>& order) {
    const Shape& s = tokens.shape();
    auto map = std::make_shared<std::vector<std::size_t>>(tokens.numel());
    std::size_t idx = 0;
    for (std::size_t b = 0; b < s[0]; ++b) {
        for (std::size_t t = 0; t < s[1]; ++t) {
            const std::size_t src = (b * s[1] + order[t]) * s[2];
            for (std::size_t c = 0; c < s[2]; ++c) (*map)[idx++] = src + c;
        }
    }
    return gather(tokens, s, map);
}

}  // namespace

GwlProjector::GwlProjector(std::size_t in_channels, std::size_t embed_dim, std::size_t grid,
                           double dropout_rate, Rng& rng)
    : in_channels_(in_channels), embed_dim_(embed_dim), grid_(grid), dropout_(dropout_rate) {
    if (in_channels == 0 || embed_dim == 0) throw ConfigError("gwl projector: dimensions must be positive");
    if (grid == 0 || grid % 2 != 0) {
        throw ConfigError("gwl projector requires an even grid, got " + std::to_string(grid));
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("gwl projector: dropout must be in [0,1)");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
    w_ = Tensor::rand_uniform({in_channels, embed_dim}, -bound, bound, rng, true);
    b_ = Tensor::zeros({embed_dim}, true);
}

Tensor GwlProjector::forward(const Tensor& features, bool training, Rng* rng) const {
    const Shape& s = features.shape();
    if (s.size() != 4 || s[1] != in_channels_ || s[2] != grid_ || s[3] != grid_) {
        throw DimensionError("gwl projector configured for [Bx" + std::to_string(in_channels_) + "x" +
                             std::to_string(grid_) + "x" + std::to_string(grid_) + "], got " +
                             shape_str(s));
    }
    if (training && rng == nullptr) throw ContractError("gwl projector: training mode requires an RNG");

    Tensor tokens = feature_map_to_tokens(features);  // raster order
    // Quadrant-major grouping; the shared (W, b) then applies to each group.
    Tensor grouped = reorder_tokens(tokens, quadrant_token_order(grid_));
    Tensor projected = add(matmul(grouped, w_), b_);
    if (training) projected = dropout(projected, dropout_, true, *rng);
    // Reassemble so token i is raster position i, matching teacher token order.
    return reorder_tokens(projected, raster_restore_order(grid_));
}

NamedParams GwlProjector::named_parameters() const {
    return {{"gwl.weight", w_}, {"gwl.bias", b_}};
}

GwlProjector GwlProjector::clone() const {
    GwlProjector copy = *this;
    copy.w_ = w_.clone();
    copy.b_ = b_.clone();
    return copy;
}

Tensor proj2_loss(const Tensor& teacher_tokens, const Tensor& projected_tokens) {
    if (teacher_tokens.shape() != projected_tokens.shape()) {
        throw DimensionError("proj2_loss: teacher " + shape_str(teacher_tokens.shape()) +
                             " vs student " + shape_str(projected_tokens.shape()));
    }
    return mean(pow(sub(teacher_tokens.detach(), projected_tokens), 2.0));
}

}  // namespace agrikd
