#pragma once

#include <limits>
#include <span>
#include <vector>

#include "ospd/model.hpp"

namespace ospd {

/// One party's share of a single head's attention: the softmax-weighted value
/// vector over its own rows, the shifted denominator and the shift.
///
/// An empty partition is represented by gamma = 0 and m = -inf; it acts as the
/// identity in merge_partials.
struct PartialAttention {
  Vector a;
  double gamma = 0.0;
  double m = -std::numeric_limits<double>::infinity();

  bool empty() const { return gamma == 0.0; }
  /// Scalars this partial puts on the wire: a, gamma and m.
  Eigen::Index scalar_count() const { return a.size() + 2; }
};

PartialAttention empty_partial(int head_dim);

struct Private {};
struct Public {};

/// KV rows of one side of the split. Private partitions hold prompt states and
/// stay with the user party; there is deliberately no wire encoding for them.
template <typename Label>
class KvPartition {
 public:
  KvPartition() = default;
  KvPartition(int n_layers, int n_heads, int head_dim) : store_(n_layers, n_heads, head_dim) {}
  explicit KvPartition(KvStore store) : store_(std::move(store)) {}

  KvRows& at(int layer, int head) { return store_.at(layer, head); }
  const KvRows& at(int layer, int head) const { return store_.at(layer, head); }
  Eigen::Index length() const { return store_.length(); }
  int n_layers() const { return store_.n_layers(); }
  int n_heads() const { return store_.n_heads(); }

 private:
  KvStore store_;
};

using PrivatePartition = KvPartition<Private>;
using PublicPartition = KvPartition<Public>;

/// Partial attention of q over one head's rows.
PartialAttention partial_attention(const Eigen::Ref<const Vector>& q, const KvRows& rows);

PartialAttention private_partial(const Eigen::Ref<const Vector>& q, const PrivatePartition& part, int layer, int head);
PartialAttention public_partial(const Eigen::Ref<const Vector>& q, const PublicPartition& part, int layer, int head);

/// Stabilized two-way merge: c_pvt = g_pvt / (g_pvt + alpha g_pub),
/// c_pub = g_pub / (g_pvt / alpha + g_pub), alpha = exp(m_pub - m_pvt).
Vector merge_partials(const PartialAttention& pvt, const PartialAttention& pub);

struct PublicQuery {
  Vector q;
  const PublicPartition* part = nullptr;
};

/// Public partials for many users at one (layer, head) in a single masked pass
/// over the concatenated rows of all users.
std::vector<PartialAttention> batched_public_partials(std::span<const PublicQuery> batch, int layer, int head);

}  // namespace ospd
