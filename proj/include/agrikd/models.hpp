#pragma once

#include <string>
#include <utility>
#include <vector>

#include "agrikd/common.hpp"
#include "agrikd/tensor.hpp"

namespace agrikd {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Tokens in row-major order over the patch grid; this ordering is the global
/// token order consumed by both projectors. Output is [B x N x (p^2 * ch)].
Tensor patchify(const Tensor& images, std::size_t patch_size);
/// Inverse of patchify (exact bijection).
Tensor unpatchify(const Tensor& tokens, std::size_t image_side, std::size_t patch_size,
                  std::size_t channels);

/// Inverted (zeroed-units scaled by 1/(1-rate)) dropout; identity when not training.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

/// Per-token layer normalization over the last axis with affine parameters.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- teacher: small transformer encoder -------------------------------------

struct TeacherConfig {
    std::size_t image_side = 32;
    std::size_t channels = 1;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 32;
    std::size_t num_blocks = 2;
    std::size_t num_heads = 2;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 3;
    int qkv_block = -1;   // block supplying Q/K/V and the attention output; -1 = last
    int token_block = 0;  // block supplying token embeddings

    std::size_t grid() const;    // image_side / patch_size
    std::size_t tokens() const;  // grid^2
    void validate() const;
};

/// Per-batch record of everything the teacher exposes for distillation. All
/// tensors exclude the classification token row.
struct TeacherOutputs {
    Tensor logits;      // [B x C]
    Tensor attn;        // [B x N x d] post-softmax attention-weighted values (heads concatenated)
    Tensor values;      // [B x N x d] value matrix of the designated block
    Tensor queries;     // [B x N x d]
    Tensor keys;        // [B x N x d]
    Tensor tokens;      // [B x N x d] block output embeddings
    std::vector<Tensor> attn_weights;  // per head [B x S x S], rows sum to 1 (diagnostic)
};

class TeacherModel {
  public:
    TeacherModel(const TeacherConfig& config, Rng& rng);

    TeacherOutputs forward(const Tensor& images) const;

    const TeacherConfig& config() const { return config_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    NamedParams named_parameters() const;
    TeacherModel clone() const;

  private:
    struct Block {
        Tensor norm1_gamma, norm1_beta;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor norm2_gamma, norm2_beta;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    TeacherConfig config_;
    bool frozen_ = false;
    Tensor patch_w_, patch_b_;  // [P x d], [d]
    Tensor cls_;                // [1 x d]
    Tensor pos_;                // [(N+1) x d]
    std::vector<Block> blocks_;
    Tensor final_gamma_, final_beta_;
    Tensor head_w_, head_b_;
};

// ---- student: truncated inverted-residual CNN --------------------------------

struct IrBlockSpec {
    std::size_t out_channels;
    std::size_t stride;
};

struct StudentConfig {
    std::size_t image_side = 32;
    std::size_t channels = 1;
    std::size_t stem_channels = 8;
    std::size_t stem_stride = 2;
    // Block catalog; only the first truncation_index blocks are instantiated,
    // the distillation feature map is the last instantiated block's output.
    std::vector<IrBlockSpec> blocks = {{12, 2}, {16, 2}, {24, 1}, {32, 1}, {48, 2}};
    std::size_t expansion = 3;
    std::size_t truncation_index = 3;
    std::vector<std::size_t> fc_head = {32, 16};
    double dropout = 0.3;
    std::size_t num_classes = 3;

    std::size_t feature_channels() const;  // C' at the truncation point
    std::size_t feature_side() const;      // spatial side at the truncation point
    void validate() const;
};

struct StudentOutputs {
    Tensor logits;    // [B x C]
    Tensor features;  // [B x C' x g x g] feature map at the truncation point
};

class StudentModel {
  public:
    /// `expected_grid` is the paired teacher's token-grid side; a mismatch with
    /// the truncation feature map is rejected here, never at forward time.
    StudentModel(const StudentConfig& config, std::size_t expected_grid, Rng& rng);

    /// Dropout is active only when `training` is true (rng required then).
    StudentOutputs forward(const Tensor& images, bool training = false, Rng* rng = nullptr) const;

    const StudentConfig& config() const { return config_; }
    std::size_t grid() const { return config_.feature_side(); }

    NamedParams named_parameters() const;
    StudentModel clone() const;

  private:
    struct IrBlock {
        Tensor expand_w, expand_b;  // 1x1
        Tensor dw_w, dw_b;          // 3x3 depthwise, carries the stride
        Tensor project_w, project_b;
        std::size_t stride = 1;
        bool residual = false;
    };

    StudentConfig config_;
    Tensor stem_w_, stem_b_;
    std::vector<IrBlock> blocks_;
    std::vector<std::pair<Tensor, Tensor>> fc_;  // hidden layers + final classifier
};

// ---- parameter and MAC accounting --------------------------------------------

std::size_t count_params(const NamedParams& params);
std::size_t count_params(const TeacherModel& m);
std::size_t count_params(const StudentModel& m);

// Closed-form multiply-accumulate counts (per single image):
//   conv:   k^2 * Cin/groups * Cout * Hout * Wout
//   linear: in * out (x tokens when applied token-wise)
//   attention: QKV + score + context + output-projection matmul terms
std::size_t conv_macs(std::size_t kernel, std::size_t cin, std::size_t cout, std::size_t hout,
                      std::size_t wout, std::size_t groups = 1);
std::size_t linear_macs(std::size_t in, std::size_t out);
std::size_t linear_params(std::size_t in, std::size_t out, bool bias = true);

std::size_t flops_estimate(const TeacherModel& m, std::size_t image_side);
std::size_t flops_estimate(const StudentModel& m, std::size_t image_side);

}  // namespace agrikd
