#pragma once

#include <optional>
#include <random>
#include <vector>

#include "sfl/analysis.hpp"
#include "sfl/engine.hpp"
#include "sfl/metrics.hpp"
#include "sfl/wire.hpp"

namespace sfl::testing {

Message random_message(std::mt19937_64& rng);
bool same_message(const Message& a, const Message& b);

// Mean over `classes` of |P∩G| / |P∪G|, 1 when both are empty.
double oracle_iou(const std::vector<ClassId>& pred, const std::vector<ClassId>& gt, const std::vector<int>& classes);
// 1 - mean over `classes` of (2|P∩G| + eps) / (|P| + |G| + eps), for one-hot predictions.
double oracle_dice_loss(const std::vector<ClassId>& pred, const std::vector<ClassId>& gt,
                        const std::vector<int>& classes, double eps = 1e-6);
Tensor one_hot(const std::vector<ClassId>& ids, int classes, int n, int h, int w);

// sum_k n_k x_k / N in long double, rounded to the tensor dtype.
TensorList oracle_fedavg(const std::vector<WeightUpload>& uploads);

// Enumerates every (fe_last, be_first) pair and applies the selection rules
// directly to per-plan cost reports.
std::optional<SplitPlan> brute_force_split(const ModelGraph& g, const SplitConstraints& c, std::int64_t size);

}  // namespace sfl::testing
