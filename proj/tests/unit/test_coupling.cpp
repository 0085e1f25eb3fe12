#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "../oracles.hpp"
#include "cfot/coupling.hpp"
#include "cfot/metrics.hpp"

using namespace cfot;

namespace {

dgp::DgpConfig markovian_cfg(std::int64_t n = 5000) {
  dgp::DgpConfig c;
  c.n_samples = n;
  c.seed = 5;
  return c;
}

RowPool markovian_pool(std::int64_t n = 5000) {
  return make_pool(Task::markovian, dgp::gen_dataset(markovian_cfg(n)).samples);
}

double circular_gap(double a, double b) {
  const double d = std::abs(a - b);
  return std::min(d, dgp::kTwoPi - d);
}

}  // namespace

TEST(Coupling, MarkovianBatchSharesParentAndIsOptimal) {
  const OnlineMarkovianSource src(markovian_cfg());
  Engine rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto [b, plan] = markovian_batch(rng, 64, &src, PriorConfig{});
    ASSERT_TRUE(is_permutation(plan.assignment));
    EXPECT_EQ(plan.scheme, Scheme::markovian_ot);
    EXPECT_EQ(b.size(), 64);
    EXPECT_EQ((b.cond.array() - b.cond(0, 0)).abs().maxCoeff(), 0.0);
    const Permutation id = [] {
      Permutation p(64);
      std::iota(p.begin(), p.end(), 0);
      return p;
    }();
    EXPECT_NEAR(plan.cost, pairing_cost(b.u, b.x, id), 1e-9);
    Permutation p = id;
    for (int k = 0; k < 50; ++k) {
      std::shuffle(p.begin(), p.end(), rng);
      EXPECT_LE(plan.cost, pairing_cost(b.u, b.x, p) + 1e-9);
    }
  }
}

TEST(Coupling, SingleColumnBatches) {
  const OnlineMarkovianSource src(markovian_cfg());
  const RowPool pool = markovian_pool(100);
  Engine rng(2);
  EXPECT_EQ(markovian_batch(rng, 1, &src, PriorConfig{}).second.assignment, Permutation{0});
  EXPECT_EQ(naive_batch(rng, 1, pool, PriorConfig{}).second.assignment, Permutation{0});
  EXPECT_THROW(markovian_batch(rng, 0, &src, PriorConfig{}), ContractViolation);
  EXPECT_THROW(markovian_batch(rng, 4, nullptr, PriorConfig{}), ContractViolation);
}

TEST(Coupling, MarkovianLatentsIndependentOfParentNaiveNot) {
  const OnlineMarkovianSource src(markovian_cfg());
  const RowPool pool = markovian_pool();
  Engine rng(3);
  const int batches = 40, m = 64;
  Eigen::MatrixXd u_mk(2, batches * m), c_mk(2, batches * m), u_nv(2, batches * m), c_nv(2, batches * m);
  std::vector<double> u0, pa;
  for (int k = 0; k < batches; ++k) {
    const auto mk = markovian_batch(rng, m, &src, PriorConfig{}).first;
    const auto nv = naive_batch(rng, m, pool, PriorConfig{}).first;
    for (int j = 0; j < m; ++j) {
      const int c = k * m + j;
      u_mk.col(c) = mk.u.col(j);
      c_mk.col(c) << std::sin(mk.cond(0, j)), std::cos(mk.cond(0, j));
      u_nv.col(c) = nv.u.col(j);
      c_nv.col(c) << std::sin(nv.cond(0, j)), std::cos(nv.cond(0, j));
      u0.push_back(mk.u(0, j));
      pa.push_back(mk.cond(0, j));
    }
  }
  EXPECT_LT(std::abs(oracle::pearson(u0, pa)), 0.03);
  const double dcor_mk = distance_correlation(u_mk, c_mk);
  const double dcor_nv = distance_correlation(u_nv, c_nv);
  EXPECT_GT(dcor_nv, 2 * dcor_mk);
}

TEST(Coupling, LatentMarginalIsThePrior) {
  const OnlineMarkovianSource src(markovian_cfg());
  Engine rng(4);
  Eigen::MatrixXd u(2, 400);
  for (int k = 0; k < 10; ++k) u.middleCols(40 * k, 40) = markovian_batch(rng, 40, &src, PriorConfig{}).first.u;
  const Eigen::MatrixXd ref = PriorConfig{}.sample(rng, 400);
  EXPECT_FALSE(energy_test(u, ref, 200, 0.01, rng).rejects(0.01));
}

TEST(Coupling, NaiveBatchIsOptimalWithinBatch) {
  const RowPool pool = markovian_pool();
  Engine rng(6);
  for (int k = 0; k < 5; ++k) {
    const auto [b, plan] = naive_batch(rng, 128, pool, PriorConfig{});
    ASSERT_TRUE(is_permutation(plan.assignment));
    Permutation p(128);
    std::iota(p.begin(), p.end(), 0);
    EXPECT_NEAR(plan.cost, pairing_cost(b.u, b.x, p), 1e-9);
    for (int r = 0; r < 50; ++r) {
      std::shuffle(p.begin(), p.end(), rng);
      EXPECT_LE(plan.cost, pairing_cost(b.u, b.x, p) + 1e-9);
    }
  }
  const auto [ib, iplan] = independent_batch(rng, 16, pool, PriorConfig{});
  Permutation id(16);
  std::iota(id.begin(), id.end(), 0);
  EXPECT_EQ(iplan.assignment, id);
  EXPECT_NEAR(iplan.cost, pairing_cost(ib.u, ib.x, id), 1e-12);
}

TEST(Coupling, IndependentBatchKeepsRowsIntact) {
  const RowPool pool = markovian_pool(300);
  Engine rng(7);
  const auto [b, plan] = independent_batch(rng, 50, pool, PriorConfig{});
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    bool found = false;
    for (Eigen::Index r = 0; r < pool.size() && !found; ++r)
      found = pool.x.col(r) == b.x.col(j) && pool.cond.col(r) == b.cond.col(j);
    EXPECT_TRUE(found);
  }
}

TEST(Coupling, BinnedSourceStaysInWindowAcrossWrap) {
  RowPool pool{Eigen::MatrixXd(2, 400), Eigen::MatrixXd(1, 400)};
  for (int i = 0; i < 400; ++i) {
    pool.cond(0, i) = dgp::kTwoPi * i / 400.0;
    pool.x.col(i) << i, -i;
  }
  const BinnedSource src(pool, 0.1);
  const auto w = src.window(0.01);
  ASSERT_FALSE(w.empty());
  for (auto r : w) EXPECT_LE(circular_gap(pool.cond(0, static_cast<Eigen::Index>(r)), 0.01), 0.05 + 1e-12);
  EXPECT_TRUE(std::find(w.begin(), w.end(), 399u) != w.end());
  Engine rng(8);
  for (int k = 0; k < 200; ++k) {
    const ConditionalDraw d = src.draw(rng, 16);
    for (Eigen::Index j = 0; j < 16; ++j) {
      EXPECT_LE(circular_gap(d.cond(0, j), d.cond(0, 0)), 0.1 + 1e-12);
      const int r = static_cast<int>(d.x(0, j));
      EXPECT_EQ(d.cond(0, j), pool.cond(0, r));
    }
  }
}

TEST(Coupling, MediatorPoolBinsOnMediatorAngle) {
  dgp::DgpConfig c = markovian_cfg(2000);
  c.graph = dgp::GraphVariant::frontdoor;
  const RowPool pool = make_pool(Task::frontdoor_outcome, dgp::gen_dataset(c).samples);
  EXPECT_EQ(pool.cond.rows(), 2);
  const BinnedSource src(pool, 0.05);
  Engine rng(9);
  const auto [b, plan] = markovian_batch(rng, 32, &src, PriorConfig{});
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    const double a = std::atan2(b.cond(0, j), b.cond(1, j)), a0 = std::atan2(b.cond(0, 0), b.cond(1, 0));
    EXPECT_LE(circular_gap(dgp::wrap_angle(a), dgp::wrap_angle(a0)), 0.05 + 1e-12);
  }
  EXPECT_THROW(make_pool(Task::frontdoor_outcome, dgp::gen_dataset(markovian_cfg(10)).samples), InputError);
  EXPECT_EQ(online_source(Task::frontdoor_outcome, c), nullptr);
}

TEST(Coupling, BackdoorSourceSharesConfounder) {
  dgp::DgpConfig c = markovian_cfg();
  c.graph = dgp::GraphVariant::backdoor;
  const auto src = online_source(Task::backdoor, c);
  Engine rng(10);
  const ConditionalDraw d = src->draw(rng, 20);
  EXPECT_EQ(d.cond.rows(), 2);
  EXPECT_EQ((d.cond.row(1).array() - d.cond(1, 0)).abs().maxCoeff(), 0.0);
  EXPECT_EQ((d.cond.row(0).array() - d.cond(0, 0)).abs().maxCoeff(), 0.0);
}
