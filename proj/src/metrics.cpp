#include "agrikd/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace agrikd {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : classes_(num_classes) {
    if (num_classes == 0) throw ContractError("confusion matrix needs at least one class");
    counts_.assign(num_classes * num_classes, 0);
}

void ConfusionMatrix::add(std::size_t true_class, std::size_t predicted_class) {
    if (true_class >= classes_ || predicted_class >= classes_) {
        throw DataError("confusion matrix: class index out of range");
    }
    ++counts_[true_class * classes_ + predicted_class];
}

std::size_t ConfusionMatrix::at(std::size_t true_class, std::size_t predicted_class) const {
    if (true_class >= classes_ || predicted_class >= classes_) {
        throw DataError("confusion matrix: class index out of range");
    }
    return counts_[true_class * classes_ + predicted_class];
}

std::size_t ConfusionMatrix::total() const {
    std::size_t t = 0;
    for (std::size_t c : counts_) t += c;
    return t;
}

double macro_f1(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ContractError("macro_f1 of an empty confusion matrix");
    const std::size_t classes = cm.num_classes();
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t tp = cm.at(c, c);
        std::size_t actual = 0, predicted = 0;
        for (std::size_t j = 0; j < classes; ++j) {
            actual += cm.at(c, j);
            predicted += cm.at(j, c);
        }
        if (tp == 0) continue;  // zero-support or never-correct class scores 0
        const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
        const double recall = static_cast<double>(tp) / static_cast<double>(actual);
        total += 2.0 * precision * recall / (precision + recall);
    }
    return total / static_cast<double>(classes);
}

double accuracy(const ConfusionMatrix& cm) {
    const std::size_t n = cm.total();
    if (n == 0) throw ContractError("accuracy of an empty confusion matrix");
    std::size_t correct = 0;
    for (std::size_t c = 0; c < cm.num_classes(); ++c) correct += cm.at(c, c);
    return static_cast<double>(correct) / static_cast<double>(n);
}

std::vector<std::size_t> predict_classes(const Tensor& logits) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("predict_classes expects [BxC] logits, got " + shape_str(s));
    std::vector<std::size_t> out(s[0]);
    const auto& v = logits.data();
    for (std::size_t r = 0; r < s[0]; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < s[1]; ++c) {
            if (v[r * s[1] + c] > v[r * s[1] + best]) best = c;
        }
        out[r] = best;
    }
    return out;
}

ConfusionMatrix evaluate_student(const StudentModel& model, const Dataset& data,
                                 const std::vector<std::size_t>& indices, std::size_t batch_size) {
    ConfusionMatrix cm(data.num_classes());
    NoGradGuard guard;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const std::size_t len = std::min(batch_size, indices.size() - start);
        std::vector<std::size_t> batch(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                       indices.begin() + static_cast<std::ptrdiff_t>(start + len));
        StudentOutputs out = model.forward(data.gather_images(batch));
        const auto predictions = predict_classes(out.logits);
        const auto labels = data.gather_labels(batch);
        for (std::size_t i = 0; i < len; ++i) cm.add(labels[i], predictions[i]);
    }
    return cm;
}

Tensor grad_cam(const StudentModel& model, const Tensor& image, std::size_t target_class) {
    Tensor batch = image;
    if (image.ndim() == 3) {
        batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    }
    if (batch.ndim() != 4 || batch.dim(0) != 1) {
        throw DimensionError("grad_cam expects a single image, got " + shape_str(image.shape()));
    }
    if (target_class >= model.config().num_classes) {
        throw DataError("grad_cam: class " + std::to_string(target_class) + " out of range");
    }

    StudentOutputs out = model.forward(batch);
    Tensor score = reshape(slice(out.logits, 1, target_class, 1), {1});
    out.features.zero_grad();
    backward(score);

    const std::size_t channels = out.features.dim(1);
    const std::size_t g = out.features.dim(2);
    const std::size_t hw = g * g;
    const auto& f = out.features.data();
    const auto& df = out.features.grad();

    std::vector<double> map(hw, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
        double w = 0.0;
        for (std::size_t i = 0; i < hw; ++i) w += df[c * hw + i];
        w /= static_cast<double>(hw);
        for (std::size_t i = 0; i < hw; ++i) map[i] += w * f[c * hw + i];
    }
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (auto& v : map) {
        v = std::max(v, 0.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi > lo) {
        for (auto& v : map) v = (v - lo) / (hi - lo);
    } else if (hi > 0.0) {
        for (auto& v : map) v = 1.0;  // constant positive map
    }  // all-zero map stays all-zero
    return Tensor::from_data({g, g}, std::move(map));
}

namespace {

template <class Model>
double measure_latency(const Model& model, std::size_t warmup_iters, std::size_t timed_iters) {
    if (timed_iters == 0) throw ContractError("latency: timed iterations must be >= 1");
    const auto& cfg = model.config();
    Rng rng(12345);
    Tensor image = Tensor::rand_uniform({1, cfg.image_side, cfg.image_side, cfg.channels}, 0, 1, rng);
    NoGradGuard guard;
    for (std::size_t i = 0; i < warmup_iters; ++i) (void)model.forward(image);
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < timed_iters; ++i) (void)model.forward(image);
    const auto stop = std::chrono::steady_clock::now();
    const double total_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    return total_ms / static_cast<double>(timed_iters);
}

}  // namespace

double latency_ms(const TeacherModel& model, std::size_t warmup_iters, std::size_t timed_iters) {
    return measure_latency(model, warmup_iters, timed_iters);
}

double latency_ms(const StudentModel& model, std::size_t warmup_iters, std::size_t timed_iters) {
    return measure_latency(model, warmup_iters, timed_iters);
}

std::string heatmap_text(const Tensor& map) {
    if (map.ndim() != 2) throw DimensionError("heatmap_text expects a 2-D map, got " + shape_str(map.shape()));
    std::ostringstream os;
    os.precision(6);
    os << std::fixed;
    for (std::size_t y = 0; y < map.dim(0); ++y) {
        for (std::size_t x = 0; x < map.dim(1); ++x) {
            os << map.at({y, x}) << (x + 1 == map.dim(1) ? '\n' : ' ');
        }
    }
    return os.str();
}

void write_pgm(const std::string& path, const Tensor& map, std::size_t scale) {
    if (map.ndim() != 2) throw DimensionError("write_pgm expects a 2-D map, got " + shape_str(map.shape()));
    if (scale == 0) throw ContractError("write_pgm: scale must be >= 1");
    std::ofstream out(path);
    if (!out) throw DataError("cannot write heat map: " + path);
    const std::size_t h = map.dim(0) * scale;
    const std::size_t w = map.dim(1) * scale;
    out << "P2\n" << w << " " << h << "\n255\n";
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double v = map.at({y / scale, x / scale});
            const int px = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            out << px << (x + 1 == w ? '\n' : ' ');
        }
    }
}

}  // namespace agrikd
