#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tssl/errors.hpp"
#include "tssl/ops.hpp"
#include "tssl/tensor.hpp"

namespace tssl {

struct LossWeights {
  double ofl = 1.0;
  double tsp = 1.0;
  double contrastive = 1.0;
  double temperature = 0.1;

  void validate() const {
    if (ofl < 0 || tsp < 0 || contrastive < 0) throw ContractError("loss weights must be non-negative");
    if (!(temperature > 0)) throw ContractError("temperature must be positive");
  }
  bool operator==(const LossWeights&) const = default;
};

/// Mean binary cross-entropy between sigmoid(scores) and the out-of-order flags.
template <class T>
Tensor<T> loss_ofl(const Tensor<T>& scores, std::span<const std::uint8_t> flags) {
  return bce_with_logits(scores, std::vector<T>(flags.begin(), flags.end()));
}

/// Mean cross-entropy over gaps; logits [..., classes].
template <class T>
Tensor<T> loss_tsp(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  return cross_entropy(logits, labels);
}

/// exp(cosine(u1, u2) / temperature) for already projected vectors.
inline double similarity(std::span<const double> u1, std::span<const double> u2, double temperature) {
  if (u1.size() != u2.size()) throw DimensionError("similarity: vector sizes differ");
  double dot = 0, n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < u1.size(); ++i) {
    dot += u1[i] * u2[i];
    n1 += u1[i] * u1[i];
    n2 += u2[i] * u2[i];
  }
  if (n1 == 0 || n2 == 0) throw ContractError("similarity: zero vector");
  return std::exp(dot / std::sqrt(n1 * n2) / temperature);
}

namespace loss_detail {

// Scaled cosine logits between rows of z1 [n, d] and z2 [n, d]; rows are unit vectors.
template <class T>
Tensor<T> cosine_logits(const Tensor<T>& z1, const Tensor<T>& z2, double temperature) {
  if (z1.rank() != 2 || z1.shape() != z2.shape())
    throw DimensionError("contrastive loss: views " + shape_str(z1.shape()) + " and " + shape_str(z2.shape()));
  return scale(matmul(z1, transpose(z2)), static_cast<T>(1.0 / temperature));
}

}  // namespace loss_detail

/// Cross-clip frame contrast. Rows of z1/z2 are unit projections of two views; rows with
/// equal clip id form positive pairs (every j,k), rows of other clips are negatives.
/// Each term is -log(pos / (pos + sum of negatives)); with `strict`, the positive is left
/// out of the denominator. Mean over all positive pairs.
template <class T>
Tensor<T> loss_c1(const Tensor<T>& z1, const Tensor<T>& z2, const std::vector<std::size_t>& clip_ids,
                  double temperature, bool strict = false) {
  const std::size_t n = z1.dim(0);
  if (clip_ids.size() != n) throw DimensionError("loss_c1: clip id count does not match views");
  const Tensor<T> logits = loss_detail::cosine_logits(z1, z2, temperature);
  std::vector<unsigned char> negatives(n * n, 0);
  std::vector<std::size_t> rows, cols;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      if (clip_ids[a] != clip_ids[b]) {
        negatives[a * n + b] = 1;
      } else {
        rows.push_back(a);
        cols.push_back(b);
      }
    }
  for (std::size_t a = 0; a < n; ++a)
    if (std::find(negatives.begin() + a * n, negatives.begin() + (a + 1) * n, 1) == negatives.begin() + (a + 1) * n)
      throw ContractError("loss_c1: needs at least two clips in the batch");
  const Tensor<T> neg = reshape(masked_logsumexp(logits, negatives), {n, 1});
  const Tensor<T> pos = gather_elements(logits, rows, cols);
  const Tensor<T> neg_per_pair = reshape(index_select(neg, rows), {rows.size()});
  const Tensor<T> denom = strict ? neg_per_pair : logaddexp(pos, neg_per_pair);
  return mean(sub(denom, pos));
}

/// Within-clip frame contrast: anchor row a against the other view of the same frame,
/// normalized over the other view's frames of the same clip. Mean over anchors.
template <class T>
Tensor<T> loss_c2(const Tensor<T>& z1, const Tensor<T>& z2, const std::vector<std::size_t>& clip_ids,
                  double temperature) {
  const std::size_t n = z1.dim(0);
  if (clip_ids.size() != n) throw DimensionError("loss_c2: clip id count does not match views");
  const Tensor<T> logits = loss_detail::cosine_logits(z1, z2, temperature);
  std::vector<unsigned char> same(n * n, 0);
  std::vector<std::size_t> diag(n);
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t members = 0;
    for (std::size_t b = 0; b < n; ++b)
      if (clip_ids[a] == clip_ids[b]) {
        same[a * n + b] = 1;
        ++members;
      }
    if (members < 2) throw ContractError("loss_c2: every clip needs at least two frames");
    diag[a] = a;
  }
  return mean(sub(masked_logsumexp(logits, same), gather_elements(logits, diag, diag)));
}

/// Individual loss terms; undefined tensors are absent terms.
template <class T>
struct LossParts {
  Tensor<T> ofl, tsp, c1, c2;
};

/// Weighted sum; a zero weight leaves its term out of the graph entirely.
template <class T>
Tensor<T> loss_combined(const LossParts<T>& parts, const LossWeights& w) {
  w.validate();
  Tensor<T> total;
  auto add_term = [&](const Tensor<T>& t, double weight, const char* name) {
    if (weight == 0) return;
    if (!t.defined()) throw ContractError(std::string("loss_combined: missing term ") + name);
    if (!std::isfinite(static_cast<double>(t.item()))) throw NumericalError(std::string("non-finite loss term ") + name);
    const Tensor<T> s = weight == 1 ? t : scale(t, static_cast<T>(weight));
    total = total.defined() ? add(total, s) : s;
  };
  add_term(parts.ofl, w.ofl, "ofl");
  add_term(parts.tsp, w.tsp, "tsp");
  add_term(parts.c1, w.contrastive, "c1");
  add_term(parts.c2, w.contrastive, "c2");
  if (!total.defined()) throw ContractError("loss_combined: all weights are zero");
  return total;
}

}  // namespace tssl
