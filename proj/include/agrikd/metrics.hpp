#pragma once

#include <string>
#include <vector>

#include "agrikd/dataio.hpp"
#include "agrikd/models.hpp"

namespace agrikd {

/// C x C counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(std::size_t num_classes);
    void add(std::size_t true_class, std::size_t predicted_class);
    std::size_t at(std::size_t true_class, std::size_t predicted_class) const;
    std::size_t num_classes() const { return classes_; }
    std::size_t total() const;

  private:
    std::size_t classes_;
    std::vector<std::size_t> counts_;
};

/// Unweighted mean of per-class F1 = 2PR/(P+R). A class with no true and no
/// predicted positives contributes 0.
double macro_f1(const ConfusionMatrix& cm);
double accuracy(const ConfusionMatrix& cm);

std::vector<std::size_t> predict_classes(const Tensor& logits);

/// Eval-mode confusion matrix of the student over the given dataset rows.
ConfusionMatrix evaluate_student(const StudentModel& model, const Dataset& data,
                                 const std::vector<std::size_t>& indices,
                                 std::size_t batch_size = 32);

/// Channel weights are the spatial means of d(score)/d(F_S); the map is
/// relu(sum_k w_k F_S[k]) min-max normalized to [0,1] (all-zero stays zero).
/// `image` is [1 x H x W x ch] or [H x W x ch].
Tensor grad_cam(const StudentModel& model, const Tensor& image, std::size_t target_class);

/// Mean wall-clock milliseconds per forward pass, eval mode, single thread.
double latency_ms(const TeacherModel& model, std::size_t warmup_iters, std::size_t timed_iters);
double latency_ms(const StudentModel& model, std::size_t warmup_iters, std::size_t timed_iters);

/// Plain-text grid (rows of values) for a [g x g] map.
std::string heatmap_text(const Tensor& map);
/// ASCII PGM (P2) with optional nearest-neighbour upscaling.
void write_pgm(const std::string& path, const Tensor& map, std::size_t scale = 1);

}  // namespace agrikd
