#include "ospd/partition.hpp"

#include <cmath>

namespace ospd {

PartialAttention empty_partial(int head_dim) { return {Vector::Zero(head_dim), 0.0, -std::numeric_limits<double>::infinity()}; }

PartialAttention partial_attention(const Eigen::Ref<const Vector>& q, const KvRows& rows) {
  if (q.size() != rows.head_dim()) throw DimensionError("partial_attention: query width does not match head_dim");
  if (rows.empty()) return empty_partial(rows.head_dim());
  const Vector scores = rows.keys() * q;
  const auto stats = stable_softmax_stats(scores);
  return {rows.values().transpose() * stats.weights, stats.gamma, stats.m};
}

PartialAttention private_partial(const Eigen::Ref<const Vector>& q, const PrivatePartition& part, int layer, int head) {
  return partial_attention(q, part.at(layer, head));
}

PartialAttention public_partial(const Eigen::Ref<const Vector>& q, const PublicPartition& part, int layer, int head) {
  return partial_attention(q, part.at(layer, head));
}

Vector merge_partials(const PartialAttention& pvt, const PartialAttention& pub) {
  if (pvt.empty() && pub.empty()) throw EmptyPartitionError("merge_partials: both partitions empty");
  if (pub.empty()) return pvt.a;
  if (pvt.empty()) return pub.a;
  if (pvt.a.size() != pub.a.size()) throw DimensionError("merge_partials: head widths differ");
  const double alpha = std::exp(pub.m - pvt.m);
  const double c_pvt = pvt.gamma / (pvt.gamma + alpha * pub.gamma);
  const double c_pub = pub.gamma / (pvt.gamma / alpha + pub.gamma);
  return c_pvt * pvt.a + c_pub * pub.a;
}

std::vector<PartialAttention> batched_public_partials(std::span<const PublicQuery> batch, int layer, int head) {
  if (batch.empty()) throw DimensionError("batched_public_partials: empty batch");
  const int head_dim = batch.front().part->at(layer, head).head_dim();

  Eigen::Index total = 0;
  std::vector<Eigen::Index> offsets;
  offsets.reserve(batch.size() + 1);
  for (const auto& item : batch) {
    const auto& rows = item.part->at(layer, head);
    if (item.q.size() != head_dim || rows.head_dim() != head_dim) {
      throw DimensionError("batched_public_partials: ragged head width");
    }
    offsets.push_back(total);
    total += rows.size();
  }
  offsets.push_back(total);

  const auto n = static_cast<Eigen::Index>(batch.size());
  Matrix queries(n, head_dim);
  Matrix keys(total, head_dim);
  Matrix values(total, head_dim);
  for (Eigen::Index b = 0; b < n; ++b) {
    const auto& item = batch[static_cast<std::size_t>(b)];
    const auto& rows = item.part->at(layer, head);
    queries.row(b) = item.q.transpose();
    keys.middleRows(offsets[b], rows.size()) = rows.keys();
    values.middleRows(offsets[b], rows.size()) = rows.values();
  }

  // Every query against every row, then mask rows owned by other users.
  Matrix scores = matmul(queries, keys.transpose());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index b = 0; b < n; ++b) {
    scores.row(b).head(offsets[b]).setConstant(neg_inf);
    scores.row(b).tail(total - offsets[b + 1]).setConstant(neg_inf);
  }

  std::vector<PartialAttention> out;
  out.reserve(batch.size());
  for (Eigen::Index b = 0; b < n; ++b) {
    const Eigen::Index len = offsets[b + 1] - offsets[b];
    if (len == 0) {
      out.push_back(empty_partial(head_dim));
      continue;
    }
    const double m = scores.row(b).maxCoeff();
    const RowVector e = (scores.row(b).array() - m).exp().matrix();
    const double gamma = e.sum();
    out.push_back({(e * values).transpose() / gamma, gamma, m});
  }
  return out;
}

}  // namespace ospd
