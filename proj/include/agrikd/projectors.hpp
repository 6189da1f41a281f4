#pragma once

#include <vector>

#include "agrikd/common.hpp"
#include "agrikd/models.hpp"
#include "agrikd/tensor.hpp"

namespace agrikd {

struct QkvTriplet {
    Tensor q, k, v;  // each [B x N x d]
};

/// Projects the student feature map into transformer-style query/key/value
/// token matrices through three independent 3x3 same-padding convolutions,
/// then matches a stochastically teacher-mixed attention output.
class PcaProjector {
  public:
    PcaProjector(std::size_t in_channels, std::size_t embed_dim, double mask_p, double dropout_rate,
                 Rng& rng);

    /// Three convolutions + spatial flatten to tokens (patchify order).
    /// Dropout applies to the projections, before attention, in training mode.
    QkvTriplet project(const Tensor& features, bool training = false, Rng* rng = nullptr) const;

    double mask_probability() const { return mask_p_; }
    std::size_t embed_dim() const { return embed_dim_; }

    NamedParams named_parameters() const;
    PcaProjector clone() const;

  private:
    std::size_t in_channels_;
    std::size_t embed_dim_;
    double mask_p_;
    double dropout_;
    Tensor wq_, bq_, wk_, bk_, wv_, bv_;  // each [d x C' x 3 x 3] / [d]
};

/// Elementwise teacher substitution: teacher value where xi < p, student value
/// otherwise, with fresh independent Uniform(0,1) draws per element per call.
/// The realized mask is a constant of the step: student gradients pass only
/// where the student value survived; teacher positions get zero.
Tensor partial_mask(const Tensor& student, const Tensor& teacher, double p, Rng& rng);

/// softmax(Q K^T / sqrt(d)) V per batch element; softmax over the last axis.
Tensor pc_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Attention matching plus value correlation matching; both terms are means
/// over all elements, the value term compares V.V/sqrt(d) elementwise squares.
/// Teacher tensors are detached internally.
Tensor proj1_loss(const Tensor& teacher_attn, const Tensor& teacher_values, const Tensor& pc_attn,
                  const Tensor& student_values, std::size_t embed_dim);

/// Partitions the g x g token grid into TL/TR/BL/BR quadrants, projects every
/// token with one shared affine map, and reassembles to raster token order
/// (identical to the teacher's patchify ordering).
class GwlProjector {
  public:
    GwlProjector(std::size_t in_channels, std::size_t embed_dim, std::size_t grid,
                 double dropout_rate, Rng& rng);

    Tensor forward(const Tensor& features, bool training = false, Rng* rng = nullptr) const;

    NamedParams named_parameters() const;
    GwlProjector clone() const;

  private:
    std::size_t in_channels_;
    std::size_t embed_dim_;
    std::size_t grid_;
    double dropout_;
    Tensor w_, b_;  // shared across all four quadrants
};

/// Mean squared error over all elements; teacher tokens detached internally.
Tensor proj2_loss(const Tensor& teacher_tokens, const Tensor& projected_tokens);

// Quadrant geometry (grid must be even). Quadrant ids: 0=TL, 1=TR, 2=BL, 3=BR.
std::vector<std::size_t> quadrant_of_cell(std::size_t grid);
/// Raster index of each position in the quadrant-major (TL,TR,BL,BR) token list.
std::vector<std::size_t> quadrant_token_order(std::size_t grid);
/// Inverse permutation: position in the quadrant-major list for each raster index.
std::vector<std::size_t> raster_restore_order(std::size_t grid);

/// [B x C' x g x g] -> [B x N x C'] token matrix in raster (patchify) order.
Tensor feature_map_to_tokens(const Tensor& features);

}  // namespace agrikd
