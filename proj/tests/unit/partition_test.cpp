#include "ospd/partition.hpp"

#include <gtest/gtest.h>

#include "ospd/verify/oracles.hpp"
#include "ospd/wire.hpp"

namespace ospd {
namespace {

static_assert(!WireEncodable<PrivatePartition>, "private partitions must not be encodable");
static_assert(!WireEncodable<PublicPartition>);
static_assert(WireEncodable<PartialAttention>);

KvRows rows_from(const Matrix& k, const Matrix& v) {
  KvRows rows(static_cast<int>(k.cols()));
  for (Eigen::Index i = 0; i < k.rows(); ++i) rows.append(k.row(i), v.row(i));
  return rows;
}

std::vector<long double> oracle_attention(const Vector& q, const Matrix& k, const Matrix& v) {
  oracle::LMatrix lk(k.rows(), std::vector<long double>(k.cols())), lv = lk;
  std::vector<long double> lq(q.size());
  for (Eigen::Index j = 0; j < q.size(); ++j) lq[j] = q(j);
  for (Eigen::Index i = 0; i < k.rows(); ++i)
    for (Eigen::Index j = 0; j < k.cols(); ++j) {
      lk[i][j] = k(i, j);
      lv[i][j] = v(i, j);
    }
  return oracle::attention(lq, lk, lv);
}

Vector split_merge(const Vector& q, const Matrix& k, const Matrix& v, Eigen::Index cut) {
  const auto pvt = partial_attention(q, rows_from(k.topRows(cut), v.topRows(cut)));
  const auto pub = partial_attention(q, rows_from(k.bottomRows(k.rows() - cut), v.bottomRows(k.rows() - cut)));
  return merge_partials(pvt, pub);
}

TEST(PartialAttention, SingleRowGivesItsValue) {
  Matrix k(1, 4), v(1, 4);
  k << 1, 0, 0, 0;
  v << 3, 1, 4, 1;
  const auto p = partial_attention(Vector::Ones(4), rows_from(k, v));
  EXPECT_EQ(p.a, Vector(v.row(0).transpose()));
  EXPECT_EQ(p.gamma, 1.0);
  EXPECT_EQ(p.scalar_count(), 6);
}

TEST(PartialAttention, OrthogonalQueryAveragesValues) {
  Matrix k = Matrix::Zero(3, 4);
  k.col(1).setConstant(2.0);
  Vector q = Vector::Zero(4);
  q(0) = 1.0;
  const Matrix v = seeded_matrix(4, 3, 4, 1.0);
  const auto p = partial_attention(q, rows_from(k, v));
  EXPECT_LE((p.a - v.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(PartialAttention, QueryWidthMismatchThrows) {
  EXPECT_THROW(partial_attention(Vector::Zero(3), KvRows(4)), DimensionError);
}

TEST(Merge, MatchesUnsplitOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.index(30));
    const Eigen::Index cut = 1 + static_cast<Eigen::Index>(rng.index(n - 1));
    const Vector q = seeded_matrix(trial * 3 + 1, 8, 1, 2.0);
    const Matrix k = seeded_matrix(trial * 3 + 2, n, 8, 2.0);
    const Matrix v = seeded_matrix(trial * 3 + 3, n, 8, 1.0);
    const auto want = oracle_attention(q, k, v);
    const Vector got = split_merge(q, k, v, cut);
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(got(j), static_cast<double>(want[j]), 1e-12) << trial;
  }
}

TEST(Merge, LargeScoreGapStaysStable) {
  Matrix k(2, 2), v(2, 2);
  k << 400, 0, -400, 0;
  v << 1, 2, 3, 4;
  const Vector q = Vector::Ones(2);
  const Vector got = split_merge(q, k, v, 1);
  EXPECT_TRUE(all_finite(got));
  EXPECT_NEAR(got(0), 1.0, 1e-15);
  EXPECT_NEAR(got(1), 2.0, 1e-15);
}

TEST(Merge, EmptyPublicSideIsIdentity) {
  const Matrix k = seeded_matrix(1, 5, 4, 1.0);
  const Matrix v = seeded_matrix(2, 5, 4, 1.0);
  const auto pvt = partial_attention(Vector::Ones(4), rows_from(k, v));
  EXPECT_EQ(merge_partials(pvt, empty_partial(4)), pvt.a);
  EXPECT_EQ(merge_partials(empty_partial(4), pvt), pvt.a);
  EXPECT_THROW(merge_partials(empty_partial(4), empty_partial(4)), EmptyPartitionError);
}

TEST(Merge, DuplicatedRowsGiveSameOutput) {
  const Matrix k = seeded_matrix(5, 6, 4, 1.0);
  const Matrix v = seeded_matrix(6, 6, 4, 1.0);
  const Vector q = seeded_matrix(7, 4, 1, 1.0);
  const auto p = partial_attention(q, rows_from(k, v));
  EXPECT_LE((merge_partials(p, p) - p.a).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Merge, SwappingRolesGivesSameOutput) {
  const Matrix k = seeded_matrix(8, 9, 4, 3.0);
  const Matrix v = seeded_matrix(9, 9, 4, 1.0);
  const Vector q = seeded_matrix(10, 4, 1, 1.0);
  const auto a = partial_attention(q, rows_from(k.topRows(4), v.topRows(4)));
  const auto b = partial_attention(q, rows_from(k.bottomRows(5), v.bottomRows(5)));
  EXPECT_LE((merge_partials(a, b) - merge_partials(b, a)).cwiseAbs().maxCoeff(), 1e-12);
}

PublicPartition partition_of(std::uint64_t seed, int len) {
  PublicPartition part(1, 1, 8);
  const Matrix k = seeded_matrix(seed, len, 8, 1.0);
  const Matrix v = seeded_matrix(seed + 1, len, 8, 1.0);
  for (int i = 0; i < len; ++i) part.at(0, 0).append(k.row(i), v.row(i));
  return part;
}

void expect_batched_matches_loop(const std::vector<int>& lengths) {
  std::vector<PublicPartition> parts;
  for (std::size_t i = 0; i < lengths.size(); ++i) parts.push_back(partition_of(10 * i + 1, lengths[i]));
  std::vector<PublicQuery> batch;
  for (std::size_t i = 0; i < lengths.size(); ++i) batch.push_back({seeded_matrix(500 + i, 8, 1, 1.0), &parts[i]});
  const auto got = batched_public_partials(batch, 0, 0);
  ASSERT_EQ(got.size(), lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const auto want = public_partial(batch[i].q, parts[i], 0, 0);
    EXPECT_EQ(got[i].empty(), want.empty());
    if (want.empty()) continue;
    EXPECT_LE((got[i].a - want.a).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(got[i].gamma, want.gamma, 1e-12);
    EXPECT_NEAR(got[i].m, want.m, 1e-12);
  }
}

TEST(BatchedPublic, OneUser) { expect_batched_matches_loop({7}); }
TEST(BatchedPublic, EightUsersSameLength) { expect_batched_matches_loop(std::vector<int>(8, 5)); }
TEST(BatchedPublic, DifferentLengths) { expect_batched_matches_loop({1, 9, 0, 3, 12}); }

TEST(BatchedPublic, RaggedWidthThrows) {
  auto a = partition_of(1, 3);
  PublicPartition b(1, 1, 4);
  b.at(0, 0).append(Vector::Ones(4), Vector::Ones(4));
  std::vector<PublicQuery> batch{{Vector::Ones(8), &a}, {Vector::Ones(4), &b}};
  EXPECT_THROW(batched_public_partials(batch, 0, 0), DimensionError);
  EXPECT_THROW(batched_public_partials(std::span<const PublicQuery>{}, 0, 0), DimensionError);
}

}  // namespace
}  // namespace ospd
