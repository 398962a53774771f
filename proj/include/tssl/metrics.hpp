#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "tssl/errors.hpp"

namespace tssl {

/// Average precision of a ranked binary detection: mean over positives of the precision
/// at that positive's rank. Items are ranked by descending score; tied scores are ranked
/// negatives-first, so ties never inflate the result. Returns 0 with no positives.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DimensionError("average_precision: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return labels[a] < labels[b];
  });
  double hits = 0, sum = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (labels[order[r]]) {
      hits += 1;
      sum += hits / static_cast<double>(r + 1);
    }
  return hits > 0 ? sum / hits : 0.0;
}

/// Mean of per-group AP over groups that contain at least one positive.
inline double average_precision_per_group(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                          std::size_t group) {
  if (group == 0 || scores.size() % group != 0) throw DimensionError("average_precision_per_group: bad group size");
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t g = 0; g < scores.size(); g += group) {
    const auto l = labels.subspan(g, group);
    if (std::find(l.begin(), l.end(), 1) == l.end()) continue;
    total += average_precision(scores.subspan(g, group), l);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

/// Index of the largest entry in each row of a [rows, cols] score matrix (first on ties).
inline std::vector<std::size_t> argmax_rows(std::span<const double> scores, std::size_t cols) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r + cols <= scores.size(); r += cols)
    out.push_back(static_cast<std::size_t>(std::max_element(scores.begin() + r, scores.begin() + r + cols) - (scores.begin() + r)));
  return out;
}

}  // namespace tssl
