#include "sfl/metrics.hpp"

#include <string>

#include "sfl/autograd.hpp"

namespace sfl {

std::vector<int> default_foreground(int num_classes) {
  std::vector<int> fg;
  for (int c = 1; c < num_classes; ++c) fg.push_back(c);
  if (fg.empty()) fg.push_back(0);
  return fg;
}

Tensor soft_dice_loss(const Tensor& probs, std::span<const ClassId> gt, const DiceOptions& options) {
  detail::require_rank("soft_dice_loss", probs, 4);
  const auto N = probs.size(0), C = probs.size(1), HW = probs.size(2) * probs.size(3);
  if (static_cast<std::int64_t>(gt.size()) != N * HW)
    throw ContractError("soft_dice_loss: mask has " + std::to_string(gt.size()) + " pixels, probs " +
                        shape_str(probs.shape()));
  for (ClassId id : gt)
    if (id >= C)
      throw DataError("soft_dice_loss: class id " + std::to_string(id) + " >= num_classes " + std::to_string(C));
  std::vector<int> classes = options.classes.empty() ? default_foreground(static_cast<int>(C)) : options.classes;
  for (int c : classes)
    if (c < 0 || c >= C) throw ContractError("soft_dice_loss: class " + std::to_string(c) + " out of range");

  const double eps = options.eps;
  const auto K = classes.size();
  std::vector<double> inter(K, 0.0), psq(K, 0.0), gsum(K, 0.0);
  Tensor loss = Tensor::zeros({}, probs.dtype());
  dispatch(probs.dtype(), [&]<class T>(T) {
    auto p = probs.data<T>();
    for (std::size_t k = 0; k < K; ++k) {
      const int c = classes[k];
      for (std::int64_t n = 0; n < N; ++n) {
        const T* pc = p.data() + (n * C + c) * HW;
        const ClassId* g = gt.data() + n * HW;
        for (std::int64_t i = 0; i < HW; ++i) {
          const double v = pc[i];
          psq[k] += v * v;
          if (g[i] == c) {
            inter[k] += v;
            gsum[k] += 1.0;
          }
        }
      }
    }
    double mean_dice = 0.0;
    for (std::size_t k = 0; k < K; ++k) mean_dice += (2.0 * inter[k] + eps) / (psq[k] + gsum[k] + eps);
    mean_dice /= static_cast<double>(K);
    loss.data<T>()[0] = static_cast<T>(1.0 - mean_dice);
  });

  std::vector<ClassId> mask(gt.begin(), gt.end());
  detail::record(loss, "soft_dice_loss", {probs},
                 [probs, mask = std::move(mask), classes, inter, psq, gsum, eps, N, C, HW](detail::TensorImpl& out) {
                   dispatch(probs.dtype(), [&]<class T>(T) {
                     const double g_out = detail::out_grad<T>(out)[0];
                     auto p = probs.data<T>();
                     auto dp = detail::grad_of<T>(*probs.impl());
                     const double K = static_cast<double>(classes.size());
                     for (std::size_t k = 0; k < classes.size(); ++k) {
                       const int c = classes[k];
                       const double D = psq[k] + gsum[k] + eps;
                       const double num = 2.0 * inter[k] + eps;
                       for (std::int64_t n = 0; n < N; ++n) {
                         const std::int64_t base = (n * C + c) * HW;
                         for (std::int64_t i = 0; i < HW; ++i) {
                           const double g = mask[static_cast<std::size_t>(n * HW + i)] == c ? 1.0 : 0.0;
                           const double dd = (2.0 * g * D - num * 2.0 * p[base + i]) / (D * D);
                           dp[base + i] += static_cast<T>(-g_out * dd / K);
                         }
                       }
                     }
                   });
                 });
  return loss;
}

std::vector<ClassId> argmax_channel(const Tensor& logits) {
  detail::require_rank("argmax_channel", logits, 4);
  const auto N = logits.size(0), C = logits.size(1), HW = logits.size(2) * logits.size(3);
  std::vector<ClassId> out(static_cast<std::size_t>(N * HW));
  dispatch(logits.dtype(), [&]<class T>(T) {
    auto v = logits.data<T>();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < HW; ++i) {
        std::int64_t best = 0;
        T best_v = v[n * C * HW + i];
        for (std::int64_t c = 1; c < C; ++c) {
          const T x = v[(n * C + c) * HW + i];
          if (x > best_v) {
            best_v = x;
            best = c;
          }
        }
        out[static_cast<std::size_t>(n * HW + i)] = static_cast<ClassId>(best);
      }
  });
  return out;
}

namespace {

void count_confusion(std::span<const ClassId> pred, std::span<const ClassId> gt, int num_classes,
                     std::vector<std::int64_t>& inter, std::vector<std::int64_t>& uni) {
  if (pred.size() != gt.size())
    throw ContractError("iou: prediction has " + std::to_string(pred.size()) + " pixels, ground truth " +
                        std::to_string(gt.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int a = pred[i], b = gt[i];
    if (a >= num_classes || b >= num_classes)
      throw DataError("iou: class id " + std::to_string(std::max(a, b)) + " >= num_classes " +
                      std::to_string(num_classes));
    if (a == b) {
      ++inter[a];
      ++uni[a];
    } else {
      ++uni[a];
      ++uni[b];
    }
  }
}

MetricReport from_counts(const std::vector<std::int64_t>& inter, const std::vector<std::int64_t>& uni,
                         std::span<const int> foreground) {
  MetricReport r;
  r.sample_count = 1;
  for (std::size_t c = 0; c < inter.size(); ++c)
    r.per_class_iou.push_back(uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]));
  double s = 0.0;
  for (int c : foreground) s += r.per_class_iou[static_cast<std::size_t>(c)];
  r.average_iou = foreground.empty() ? 0.0 : s / static_cast<double>(foreground.size());
  return r;
}

}  // namespace

MetricReport iou_report(std::span<const ClassId> pred, std::span<const ClassId> gt, int num_classes,
                        std::span<const int> foreground_classes) {
  for (int c : foreground_classes)
    if (c < 0 || c >= num_classes) throw ContractError("iou: foreground class " + std::to_string(c) + " out of range");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(num_classes), 0), uni(inter);
  count_confusion(pred, gt, num_classes, inter, uni);
  return from_counts(inter, uni, foreground_classes);
}

IouAccumulator::IouAccumulator(int num_classes, std::vector<int> foreground_classes, IouReduction reduction)
    : num_classes_(num_classes),
      foreground_(std::move(foreground_classes)),
      reduction_(reduction),
      class_sum_(static_cast<std::size_t>(num_classes), 0.0),
      inter_(static_cast<std::size_t>(num_classes), 0),
      uni_(static_cast<std::size_t>(num_classes), 0) {}

void IouAccumulator::add(std::span<const ClassId> pred, std::span<const ClassId> gt) {
  ++samples_;
  if (reduction_ == IouReduction::pooled) {
    count_confusion(pred, gt, num_classes_, inter_, uni_);
    return;
  }
  auto r = iou_report(pred, gt, num_classes_, foreground_);
  for (std::size_t c = 0; c < class_sum_.size(); ++c) class_sum_[c] += r.per_class_iou[c];
  average_sum_ += r.average_iou;
}

MetricReport IouAccumulator::report() const {
  if (reduction_ == IouReduction::pooled) {
    auto r = from_counts(inter_, uni_, foreground_);
    r.sample_count = samples_;
    return r;
  }
  MetricReport r;
  r.sample_count = samples_;
  const double n = samples_ ? static_cast<double>(samples_) : 1.0;
  for (double s : class_sum_) r.per_class_iou.push_back(samples_ ? s / n : 0.0);
  r.average_iou = samples_ ? average_sum_ / n : 0.0;
  return r;
}

}  // namespace sfl
