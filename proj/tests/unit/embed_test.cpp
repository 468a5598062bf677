#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "kt/embed.hpp"
#include "test_support.hpp"

namespace kt {
namespace {

TEST(Normalize, UnitNormAndDirection) {
  Eigen::VectorXd v(2);
  v << 3.0, 4.0;
  const auto n = normalized(v);
  EXPECT_NEAR(n(0), 0.6, 1e-15);
  EXPECT_NEAR(n(1), 0.8, 1e-15);
}

TEST(Normalize, IdempotentInDouble) {
  const auto m = testing::random_unit_vectors<double>(50, 17, 3);
  for (int j = 0; j < m.cols(); ++j) {
    const Eigen::VectorXd once = normalized(Eigen::VectorXd(m.col(j) * 7.5));
    const Eigen::VectorXd twice = normalized(once);
    EXPECT_NEAR(once.norm(), 1.0, 1e-12);
    EXPECT_LE((once - twice).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Normalize, RejectsZeroAndNonFinite) {
  EXPECT_THROW(normalized(Eigen::VectorXf::Zero(4)), EmbeddingError);
  Eigen::VectorXf v = Eigen::VectorXf::Ones(3);
  v(1) = std::nanf("");
  EXPECT_THROW(normalized(v), EmbeddingError);
}

TEST(CosineDistance, Examples) {
  Eigen::VectorXd a(2), b(2), c(2);
  a << 1, 0;
  b << 0, 1;
  c << -1, 0;
  EXPECT_DOUBLE_EQ(cosine_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(cosine_distance(a, b), 1.0);
  EXPECT_DOUBLE_EQ(cosine_distance(a, c), 2.0);
}

TEST(CosineDistance, SymmetricAndBounded) {
  const auto m = testing::random_unit_vectors<double>(40, 8, 11);
  for (int i = 0; i < m.cols(); ++i) {
    for (int j = 0; j < m.cols(); ++j) {
      const double d = cosine_distance(m.col(i), m.col(j));
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 2.0);
      EXPECT_NEAR(d, cosine_distance(m.col(j), m.col(i)), 1e-15);
    }
  }
}

TEST(CosineDistance, DimensionMismatchThrows) {
  EXPECT_THROW(cosine_distance(Eigen::VectorXf::Ones(3), Eigen::VectorXf::Ones(4)), DimensionMismatch);
}

TEST(DimensionLatch, LatchesFirstValue) {
  DimensionLatch latch;
  EXPECT_FALSE(latch.get());
  latch.enforce(8);
  EXPECT_EQ(latch.get(), 8);
  EXPECT_NO_THROW(latch.enforce(8));
  try {
    latch.enforce(9);
    FAIL();
  } catch (const DimensionMismatch& e) {
    EXPECT_EQ(e.expected(), 8);
    EXPECT_EQ(e.actual(), 9);
  }
}

TEST(DimensionLatch, ConcurrentFirstUseAgrees) {
  DimensionLatch latch;
  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      try {
        latch.enforce(t % 2 ? 5 : 6);
      } catch (const DimensionMismatch&) {
        ++failures;
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(failures.load(), 4);
}

TEST(EmbedText, NormalizesAndLatches) {
  testing::ScriptedBackend backend;
  backend.on_embed = [](const std::string&) { return std::vector<float>{0.0f, 2.0f}; };
  DimensionLatch latch;
  const auto v = embed_text(backend, "m", "x", latch);
  EXPECT_FLOAT_EQ(v(1), 1.0f);
  EXPECT_EQ(latch.get(), 2);
  backend.on_embed = [](const std::string&) { return std::vector<float>{1.0f, 2.0f, 3.0f}; };
  EXPECT_THROW(embed_text(backend, "m", "x", latch), DimensionMismatch);
}

TEST(EmbedText, ZeroVectorAndBackendFailure) {
  testing::ScriptedBackend backend;
  DimensionLatch latch;
  backend.on_embed = [](const std::string&) { return std::vector<float>{0.0f, 0.0f}; };
  EXPECT_THROW(embed_text(backend, "m", "x", latch), EmbeddingError);
  backend.on_embed = [](const std::string&) -> std::vector<float> { throw BackendError("down", true); };
  try {
    embed_text(backend, "m", "x", latch);
    FAIL();
  } catch (const EmbeddingError& e) {
    EXPECT_TRUE(e.retriable());
  }
}

}  // namespace
}  // namespace kt
