#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sfl/tensor.hpp"

namespace sfl {

using ClassId = std::uint8_t;

// Classes 1..C-1: background excluded for multi-class tasks, the single
// foreground class for binary ones.
std::vector<int> default_foreground(int num_classes);

struct DiceOptions {
  double eps = 1e-6;
  // Empty means default_foreground(C).
  std::vector<int> classes;
};

// probs: softmax output (N,C,H,W); gt: N*H*W class ids. Per-class
// d_c = (2 sum p g + eps) / (sum p^2 + sum g^2 + eps) over the whole batch,
// loss = 1 - mean_c d_c. Differentiable w.r.t. probs.
Tensor soft_dice_loss(const Tensor& probs, std::span<const ClassId> gt, const DiceOptions& options = {});

// Per-pixel argmax over channels of (N,C,H,W) -> N*H*W ids.
std::vector<ClassId> argmax_channel(const Tensor& logits);

enum class IouReduction { per_sample_mean, pooled };

struct MetricReport {
  std::vector<double> per_class_iou;
  double average_iou = 0.0;
  std::size_t sample_count = 0;
};

// IoU of a single sample (or of one pooled set of pixels). A class absent
// from both masks scores 1.
MetricReport iou_report(std::span<const ClassId> pred, std::span<const ClassId> gt, int num_classes,
                        std::span<const int> foreground_classes);

// Dataset-level IoU: per-sample reports averaged over samples, or one
// report over the pooled confusion counts.
class IouAccumulator {
 public:
  IouAccumulator(int num_classes, std::vector<int> foreground_classes,
                 IouReduction reduction = IouReduction::per_sample_mean);

  void add(std::span<const ClassId> pred, std::span<const ClassId> gt);
  MetricReport report() const;

 private:
  int num_classes_;
  std::vector<int> foreground_;
  IouReduction reduction_;
  std::size_t samples_ = 0;
  std::vector<double> class_sum_;
  double average_sum_ = 0.0;
  std::vector<std::int64_t> inter_;
  std::vector<std::int64_t> uni_;
};

}  // namespace sfl
