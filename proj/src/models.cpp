#include "agrikd/models.hpp"

#include <cmath>
#include <memory>

namespace agrikd {

namespace {

std::size_t conv_out_side(std::size_t side, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (side + 2 * pad < kernel) throw DimensionError("convolution kernel exceeds padded input");
    return (side + 2 * pad - kernel) / stride + 1;
}

Tensor init_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::rand_uniform(shape, -bound, bound, rng, true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

}  // namespace

// ---- shared ops ----------------------------------------------------------------

Tensor patchify(const Tensor& images, std::size_t patch_size) {
    const Shape& s = images.shape();
    if (s.size() != 4) throw DimensionError("patchify expects [BxHxWxch], got " + shape_str(s));
    const std::size_t b = s[0], h = s[1], w = s[2], ch = s[3];
    if (h != w) throw DimensionError("patchify requires square images, got " + shape_str(s));
    if (patch_size == 0 || h % patch_size != 0) {
        throw DimensionError("image side " + std::to_string(h) + " is not divisible by patch size " +
                             std::to_string(patch_size));
    }
    const std::size_t g = h / patch_size;
    const std::size_t n = g * g;
    const std::size_t p = patch_size * patch_size * ch;
    auto map = std::make_shared<std::vector<std::size_t>>(b * n * p);
    std::size_t idx = 0;
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t py = 0; py < g; ++py) {
            for (std::size_t px = 0; px < g; ++px) {
                for (std::size_t dy = 0; dy < patch_size; ++dy) {
                    for (std::size_t dx = 0; dx < patch_size; ++dx) {
                        for (std::size_t c = 0; c < ch; ++c) {
                            (*map)[idx++] =
                                ((bi * h + py * patch_size + dy) * w + px * patch_size + dx) * ch + c;
                        }
                    }
                }
            }
        }
    }
    return gather(images, {b, n, p}, map);
}

Tensor unpatchify(const Tensor& tokens, std::size_t image_side, std::size_t patch_size,
                  std::size_t channels) {
    const Shape& s = tokens.shape();
    if (s.size() != 3) throw DimensionError("unpatchify expects [BxNxP], got " + shape_str(s));
    const std::size_t b = s[0];
    if (patch_size == 0 || image_side % patch_size != 0) {
        throw DimensionError("unpatchify: side not divisible by patch size");
    }
    const std::size_t g = image_side / patch_size;
    if (s[1] != g * g || s[2] != patch_size * patch_size * channels) {
        throw DimensionError("unpatchify: geometry does not match tokens " + shape_str(s));
    }
    const std::size_t n = s[1], p = s[2];
    auto map = std::make_shared<std::vector<std::size_t>>(tokens.numel());
    std::size_t idx = 0;
    for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t y = 0; y < image_side; ++y) {
            for (std::size_t x = 0; x < image_side; ++x) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t token = (y / patch_size) * g + x / patch_size;
                    const std::size_t inner = ((y % patch_size) * patch_size + x % patch_size) * channels + c;
                    (*map)[idx++] = (bi * n + token) * p + inner;
                }
            }
        }
    }
    return gather(tokens, {b, image_side, image_side, channels}, map);
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
    if (!training || rate == 0.0) return x;
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<double> mask(x.numel());
    const double scale = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = uniform(rng) < rate ? 0.0 : scale;
    return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t last = x.ndim() - 1;
    Tensor centered = sub(x, mean_axis(x, last, true));
    Tensor variance = mean_axis(mul(centered, centered), last, true);
    Tensor normed = div(centered, sqrt(add(variance, eps)));
    return add(mul(normed, gamma), beta);
}

// ---- teacher --------------------------------------------------------------------

std::size_t TeacherConfig::grid() const {
    if (patch_size == 0 || image_side % patch_size != 0) {
        throw ConfigError("teacher: image side " + std::to_string(image_side) +
                          " not divisible by patch size " + std::to_string(patch_size));
    }
    return image_side / patch_size;
}

std::size_t TeacherConfig::tokens() const {
    const std::size_t g = grid();
    return g * g;
}

void TeacherConfig::validate() const {
    grid();
    if (embed_dim == 0 || num_blocks == 0 || num_heads == 0 || num_classes == 0) {
        throw ConfigError("teacher: dimensions must be positive");
    }
    if (embed_dim % num_heads != 0) {
        throw ConfigError("teacher: embed dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(num_heads));
    }
    const auto check_block = [this](int index, const char* what) {
        const int n = static_cast<int>(num_blocks);
        if (index < -1 || index >= n) {
            throw ConfigError(std::string("teacher: ") + what + " index " + std::to_string(index) +
                              " out of range for " + std::to_string(n) + " blocks");
        }
    };
    check_block(qkv_block, "qkv block");
    check_block(token_block, "token block");
}

TeacherModel::TeacherModel(const TeacherConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const std::size_t p = config_.patch_size * config_.patch_size * config_.channels;
    const std::size_t d = config_.embed_dim;
    const std::size_t s = config_.tokens() + 1;
    patch_w_ = init_uniform({p, d}, p, rng);
    patch_b_ = Tensor::zeros({d}, true);
    cls_ = Tensor::rand_normal({1, d}, 0.0, 0.02, rng, true);
    pos_ = Tensor::rand_normal({s, d}, 0.0, 0.02, rng, true);
    for (std::size_t i = 0; i < config_.num_blocks; ++i) {
        Block blk;
        blk.norm1_gamma = Tensor::ones({d}, true);
        blk.norm1_beta = Tensor::zeros({d}, true);
        blk.wq = init_uniform({d, d}, d, rng);
        blk.bq = Tensor::zeros({d}, true);
        blk.wk = init_uniform({d, d}, d, rng);
        blk.bk = Tensor::zeros({d}, true);
        blk.wv = init_uniform({d, d}, d, rng);
        blk.bv = Tensor::zeros({d}, true);
        blk.wo = init_uniform({d, d}, d, rng);
        blk.bo = Tensor::zeros({d}, true);
        blk.norm2_gamma = Tensor::ones({d}, true);
        blk.norm2_beta = Tensor::zeros({d}, true);
        const std::size_t hidden = config_.mlp_ratio * d;
        blk.mlp_w1 = init_uniform({d, hidden}, d, rng);
        blk.mlp_b1 = Tensor::zeros({hidden}, true);
        blk.mlp_w2 = init_uniform({hidden, d}, hidden, rng);
        blk.mlp_b2 = Tensor::zeros({d}, true);
        blocks_.push_back(std::move(blk));
    }
    final_gamma_ = Tensor::ones({d}, true);
    final_beta_ = Tensor::zeros({d}, true);
    head_w_ = init_uniform({d, config_.num_classes}, d, rng);
    head_b_ = Tensor::zeros({config_.num_classes}, true);
}

TeacherOutputs TeacherModel::forward(const Tensor& images) const {
    std::unique_ptr<NoGradGuard> guard;
    if (frozen_) guard = std::make_unique<NoGradGuard>();

    const Shape& is = images.shape();
    if (is.size() != 4 || is[1] != config_.image_side || is[2] != config_.image_side ||
        is[3] != config_.channels) {
        throw DimensionError("teacher: images " + shape_str(is) + " do not match configured side " +
                             std::to_string(config_.image_side));
    }
    const std::size_t b = is[0];
    const std::size_t d = config_.embed_dim;
    const std::size_t n = config_.tokens();
    const std::size_t heads = config_.num_heads;
    const std::size_t dh = d / heads;

    Tensor tok = linear(patchify(images, config_.patch_size), patch_w_, patch_b_);
    Tensor cls = broadcast_to(reshape(cls_, {1, 1, d}), {b, 1, d});
    Tensor x = add(concat({cls, tok}, 1), pos_);

    const std::size_t qkv_index =
        config_.qkv_block < 0 ? config_.num_blocks - 1 : static_cast<std::size_t>(config_.qkv_block);
    const std::size_t token_index =
        config_.token_block < 0 ? config_.num_blocks - 1 : static_cast<std::size_t>(config_.token_block);

    TeacherOutputs out;
    auto strip_cls = [n](const Tensor& t) { return slice(t, 1, 1, n); };

    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const Block& blk = blocks_[i];
        Tensor h1 = layer_norm(x, blk.norm1_gamma, blk.norm1_beta);
        Tensor q = linear(h1, blk.wq, blk.bq);
        Tensor k = linear(h1, blk.wk, blk.bk);
        Tensor v = linear(h1, blk.wv, blk.bv);

        std::vector<Tensor> contexts;
        std::vector<Tensor> weights;
        for (std::size_t hidx = 0; hidx < heads; ++hidx) {
            Tensor qh = slice(q, 2, hidx * dh, dh);
            Tensor kh = slice(k, 2, hidx * dh, dh);
            Tensor vh = slice(v, 2, hidx * dh, dh);
            Tensor scores = div(matmul(qh, transpose(kh)), std::sqrt(static_cast<double>(dh)));
            Tensor attn = softmax_rows(scores);  // [B x S x S], row-stochastic
            weights.push_back(attn);
            contexts.push_back(matmul(attn, vh));
        }
        Tensor ctx = concat(contexts, 2);
        x = add(x, linear(ctx, blk.wo, blk.bo));

        Tensor h2 = layer_norm(x, blk.norm2_gamma, blk.norm2_beta);
        Tensor mlp = linear(relu(linear(h2, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2);
        x = add(x, mlp);

        if (i == qkv_index) {
            out.attn = strip_cls(ctx);
            out.queries = strip_cls(q);
            out.keys = strip_cls(k);
            out.values = strip_cls(v);
            out.attn_weights = weights;
        }
        if (i == token_index) {
            out.tokens = strip_cls(x);
        }
    }

    Tensor final = layer_norm(x, final_gamma_, final_beta_);
    Tensor cls_out = reshape(slice(final, 1, 0, 1), {b, d});
    out.logits = linear(cls_out, head_w_, head_b_);
    return out;
}

NamedParams TeacherModel::named_parameters() const {
    NamedParams params;
    params.emplace_back("patch_embed.weight", patch_w_);
    params.emplace_back("patch_embed.bias", patch_b_);
    params.emplace_back("cls_token", cls_);
    params.emplace_back("pos_embed", pos_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string prefix = "block" + std::to_string(i) + ".";
        const Block& blk = blocks_[i];
        params.emplace_back(prefix + "norm1.gamma", blk.norm1_gamma);
        params.emplace_back(prefix + "norm1.beta", blk.norm1_beta);
        params.emplace_back(prefix + "attn.wq", blk.wq);
        params.emplace_back(prefix + "attn.bq", blk.bq);
        params.emplace_back(prefix + "attn.wk", blk.wk);
        params.emplace_back(prefix + "attn.bk", blk.bk);
        params.emplace_back(prefix + "attn.wv", blk.wv);
        params.emplace_back(prefix + "attn.bv", blk.bv);
        params.emplace_back(prefix + "attn.wo", blk.wo);
        params.emplace_back(prefix + "attn.bo", blk.bo);
        params.emplace_back(prefix + "norm2.gamma", blk.norm2_gamma);
        params.emplace_back(prefix + "norm2.beta", blk.norm2_beta);
        params.emplace_back(prefix + "mlp.w1", blk.mlp_w1);
        params.emplace_back(prefix + "mlp.b1", blk.mlp_b1);
        params.emplace_back(prefix + "mlp.w2", blk.mlp_w2);
        params.emplace_back(prefix + "mlp.b2", blk.mlp_b2);
    }
    params.emplace_back("final_norm.gamma", final_gamma_);
    params.emplace_back("final_norm.beta", final_beta_);
    params.emplace_back("head.weight", head_w_);
    params.emplace_back("head.bias", head_b_);
    return params;
}

TeacherModel TeacherModel::clone() const {
    TeacherModel copy = *this;
    copy.patch_w_ = patch_w_.clone();
    copy.patch_b_ = patch_b_.clone();
    copy.cls_ = cls_.clone();
    copy.pos_ = pos_.clone();
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        Block& blk = copy.blocks_[i];
        const Block& src = blocks_[i];
        blk.norm1_gamma = src.norm1_gamma.clone();
        blk.norm1_beta = src.norm1_beta.clone();
        blk.wq = src.wq.clone();
        blk.bq = src.bq.clone();
        blk.wk = src.wk.clone();
        blk.bk = src.bk.clone();
        blk.wv = src.wv.clone();
        blk.bv = src.bv.clone();
        blk.wo = src.wo.clone();
        blk.bo = src.bo.clone();
        blk.norm2_gamma = src.norm2_gamma.clone();
        blk.norm2_beta = src.norm2_beta.clone();
        blk.mlp_w1 = src.mlp_w1.clone();
        blk.mlp_b1 = src.mlp_b1.clone();
        blk.mlp_w2 = src.mlp_w2.clone();
        blk.mlp_b2 = src.mlp_b2.clone();
    }
    copy.final_gamma_ = final_gamma_.clone();
    copy.final_beta_ = final_beta_.clone();
    copy.head_w_ = head_w_.clone();
    copy.head_b_ = head_b_.clone();
    return copy;
}

// ---- student --------------------------------------------------------------------

std::size_t StudentConfig::feature_channels() const {
    if (truncation_index == 0 || truncation_index > blocks.size()) {
        throw ConfigError("student: truncation index " + std::to_string(truncation_index) +
                          " out of range for " + std::to_string(blocks.size()) + " blocks");
    }
    return blocks[truncation_index - 1].out_channels;
}

std::size_t StudentConfig::feature_side() const {
    std::size_t side = conv_out_side(image_side, 3, stem_stride, 1);
    for (std::size_t i = 0; i < truncation_index; ++i) {
        side = conv_out_side(side, 3, blocks[i].stride, 1);
    }
    return side;
}

void StudentConfig::validate() const {
    if (image_side == 0 || channels == 0 || stem_channels == 0 || stem_stride == 0 ||
        expansion == 0 || num_classes == 0) {
        throw ConfigError("student: dimensions must be positive");
    }
    feature_channels();
    for (const auto& blk : blocks) {
        if (blk.out_channels == 0 || blk.stride == 0) throw ConfigError("student: invalid block spec");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("student: dropout must be in [0,1)");
}

StudentModel::StudentModel(const StudentConfig& config, std::size_t expected_grid, Rng& rng)
    : config_(config) {
    config_.validate();
    const std::size_t side = config_.feature_side();
    if (side != expected_grid) {
        throw ConfigError("student feature side " + std::to_string(side) +
                          " does not match teacher token grid " + std::to_string(expected_grid));
    }

    stem_w_ = init_uniform({config_.stem_channels, config_.channels, 3, 3}, 9 * config_.channels, rng);
    stem_b_ = Tensor::zeros({config_.stem_channels}, true);

    std::size_t cin = config_.stem_channels;
    for (std::size_t i = 0; i < config_.truncation_index; ++i) {
        const IrBlockSpec& spec = config_.blocks[i];
        const std::size_t hidden = cin * config_.expansion;
        IrBlock blk;
        blk.expand_w = init_uniform({hidden, cin, 1, 1}, cin, rng);
        blk.expand_b = Tensor::zeros({hidden}, true);
        blk.dw_w = init_uniform({hidden, 1, 3, 3}, 9, rng);
        blk.dw_b = Tensor::zeros({hidden}, true);
        blk.project_w = init_uniform({spec.out_channels, hidden, 1, 1}, hidden, rng);
        blk.project_b = Tensor::zeros({spec.out_channels}, true);
        blk.stride = spec.stride;
        blk.residual = spec.stride == 1 && spec.out_channels == cin;
        blocks_.push_back(std::move(blk));
        cin = spec.out_channels;
    }

    std::size_t in = config_.feature_channels();
    for (std::size_t width : config_.fc_head) {
        fc_.emplace_back(init_uniform({in, width}, in, rng), Tensor::zeros({width}, true));
        in = width;
    }
    fc_.emplace_back(init_uniform({in, config_.num_classes}, in, rng),
                     Tensor::zeros({config_.num_classes}, true));
}

StudentOutputs StudentModel::forward(const Tensor& images, bool training, Rng* rng) const {
    const Shape& is = images.shape();
    if (is.size() != 4 || is[1] != config_.image_side || is[2] != config_.image_side ||
        is[3] != config_.channels) {
        throw DimensionError("student: images " + shape_str(is) + " do not match configured side " +
                             std::to_string(config_.image_side));
    }
    if (training && rng == nullptr) throw ContractError("student: training mode requires an RNG");

    Tensor x = permute(images, {0, 3, 1, 2});  // NHWC -> NCHW
    x = relu(conv2d(x, stem_w_, stem_b_, config_.stem_stride, 1));
    for (const IrBlock& blk : blocks_) {
        Tensor t = relu(conv2d(x, blk.expand_w, blk.expand_b, 1, 0));
        t = relu(conv2d(t, blk.dw_w, blk.dw_b, blk.stride, 1, blk.dw_w.dim(0)));
        t = conv2d(t, blk.project_w, blk.project_b, 1, 0);
        x = blk.residual ? add(t, x) : t;
    }

    StudentOutputs out;
    out.features = x;

    Tensor pooled = mean_axis(mean_axis(x, 3), 2);  // [B x C']
    for (std::size_t i = 0; i + 1 < fc_.size(); ++i) {
        pooled = relu(linear(pooled, fc_[i].first, fc_[i].second));
        if (training) pooled = dropout(pooled, config_.dropout, true, *rng);
    }
    out.logits = linear(pooled, fc_.back().first, fc_.back().second);
    return out;
}

NamedParams StudentModel::named_parameters() const {
    NamedParams params;
    params.emplace_back("stem.weight", stem_w_);
    params.emplace_back("stem.bias", stem_b_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string prefix = "ir" + std::to_string(i) + ".";
        const IrBlock& blk = blocks_[i];
        params.emplace_back(prefix + "expand.weight", blk.expand_w);
        params.emplace_back(prefix + "expand.bias", blk.expand_b);
        params.emplace_back(prefix + "dw.weight", blk.dw_w);
        params.emplace_back(prefix + "dw.bias", blk.dw_b);
        params.emplace_back(prefix + "project.weight", blk.project_w);
        params.emplace_back(prefix + "project.bias", blk.project_b);
    }
    for (std::size_t i = 0; i < fc_.size(); ++i) {
        const std::string prefix =
            i + 1 == fc_.size() ? std::string("head.out.") : "head.fc" + std::to_string(i) + ".";
        params.emplace_back(prefix + "weight", fc_[i].first);
        params.emplace_back(prefix + "bias", fc_[i].second);
    }
    return params;
}

StudentModel StudentModel::clone() const {
    StudentModel copy = *this;
    copy.stem_w_ = stem_w_.clone();
    copy.stem_b_ = stem_b_.clone();
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        IrBlock& blk = copy.blocks_[i];
        const IrBlock& src = blocks_[i];
        blk.expand_w = src.expand_w.clone();
        blk.expand_b = src.expand_b.clone();
        blk.dw_w = src.dw_w.clone();
        blk.dw_b = src.dw_b.clone();
        blk.project_w = src.project_w.clone();
        blk.project_b = src.project_b.clone();
    }
    for (std::size_t i = 0; i < fc_.size(); ++i) {
        copy.fc_[i].first = fc_[i].first.clone();
        copy.fc_[i].second = fc_[i].second.clone();
    }
    return copy;
}

// ---- parameter and MAC accounting --------------------------------------------------

std::size_t count_params(const NamedParams& params) {
    std::size_t total = 0;
    for (const auto& [name, tensor] : params) total += tensor.numel();
    return total;
}

std::size_t count_params(const TeacherModel& m) { return count_params(m.named_parameters()); }
std::size_t count_params(const StudentModel& m) { return count_params(m.named_parameters()); }

std::size_t conv_macs(std::size_t kernel, std::size_t cin, std::size_t cout, std::size_t hout,
                      std::size_t wout, std::size_t groups) {
    return kernel * kernel * (cin / groups) * cout * hout * wout;
}

std::size_t linear_macs(std::size_t in, std::size_t out) { return in * out; }

std::size_t linear_params(std::size_t in, std::size_t out, bool bias) {
    return in * out + (bias ? out : 0);
}

std::size_t flops_estimate(const TeacherModel& m, std::size_t image_side) {
    const TeacherConfig& c = m.config();
    if (c.patch_size == 0 || image_side % c.patch_size != 0) {
        throw DimensionError("image side " + std::to_string(image_side) +
                             " not divisible by patch size");
    }
    const std::size_t g = image_side / c.patch_size;
    const std::size_t n = g * g;
    const std::size_t s = n + 1;
    const std::size_t d = c.embed_dim;
    const std::size_t p = c.patch_size * c.patch_size * c.channels;
    std::size_t macs = n * linear_macs(p, d);
    const std::size_t hidden = c.mlp_ratio * d;
    for (std::size_t i = 0; i < c.num_blocks; ++i) {
        macs += 3 * s * linear_macs(d, d);  // QKV projections
        macs += s * s * d;                  // attention scores (all heads)
        macs += s * s * d;                  // attention-weighted values
        macs += s * linear_macs(d, d);      // output projection
        macs += s * (linear_macs(d, hidden) + linear_macs(hidden, d));
    }
    macs += linear_macs(d, c.num_classes);
    return macs;
}

std::size_t flops_estimate(const StudentModel& m, std::size_t image_side) {
    const StudentConfig& c = m.config();
    std::size_t side = conv_out_side(image_side, 3, c.stem_stride, 1);
    std::size_t macs = conv_macs(3, c.channels, c.stem_channels, side, side);
    std::size_t cin = c.stem_channels;
    for (std::size_t i = 0; i < c.truncation_index; ++i) {
        const IrBlockSpec& spec = c.blocks[i];
        const std::size_t hidden = cin * c.expansion;
        macs += conv_macs(1, cin, hidden, side, side);
        const std::size_t out_side = conv_out_side(side, 3, spec.stride, 1);
        macs += conv_macs(3, hidden, hidden, out_side, out_side, hidden);
        macs += conv_macs(1, hidden, spec.out_channels, out_side, out_side);
        side = out_side;
        cin = spec.out_channels;
    }
    std::size_t in = c.feature_channels();
    for (std::size_t width : c.fc_head) {
        macs += linear_macs(in, width);
        in = width;
    }
    macs += linear_macs(in, c.num_classes);
    return macs;
}

}  // namespace agrikd
