#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <cstring>

#include <unistd.h>

#include "grc/ops.hpp"
#include "grc/optim.hpp"
#include "grc/params.hpp"

using namespace grc;
using namespace grc::ad;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("grc_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::mt19937_64 rng(1);
  ParameterStore ps;
  Tensor& w = ps.add("w", {3}, 1.0, rng);
  const std::vector<double> before(w.data().begin(), w.data().end());
  Adam opt(ps);
  w.mutable_grad();
  opt.step();
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), before);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, ConstantGradientMovesAgainstItsSign) {
  ParameterStore ps;
  Tensor& w = ps.add_constant("w", {2}, 0.0);
  Adam opt(ps, {.learning_rate = 0.01});
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    auto g = w.mutable_grad();
    g[0] = 0.5;
    g[1] = -2.0;
    opt.step();
  }
  EXPECT_LT(w[0], 0.0);
  EXPECT_GT(w[1], 0.0);
  EXPECT_EQ(opt.steps(), 50u);
}

TEST(Adam, SingleStepOnSquareShrinksIterate) {
  ParameterStore ps;
  Tensor& x = ps.add_constant("x", {1}, 1.0);
  Adam opt(ps, {.learning_rate = 0.1});
  backward(sum(mul(x, x)));
  opt.step();
  // Bias-corrected first step moves by exactly lr * g/|g| (up to epsilon).
  const double expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(x[0], expected, 1e-12);
  EXPECT_LT(std::abs(x[0]), 1.0);
}

TEST(Adam, NonFiniteGradientAbortsWithoutSideEffects) {
  ParameterStore ps;
  Tensor& x = ps.add_constant("x", {2}, 1.0);
  Adam opt(ps);
  x.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(opt.step(), NumericalFault);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(opt.steps(), 0u);
  EXPECT_EQ(opt.first_moments()[0][0], 0.0);
}

TEST(Adam, MomentsMirrorParameterShapes) {
  std::mt19937_64 rng(2);
  ParameterStore ps;
  ps.add("a", {2, 3}, 1.0, rng);
  ps.add("b", {4}, 1.0, rng);
  Adam opt(ps);
  ASSERT_EQ(opt.first_moments().size(), 2u);
  EXPECT_EQ(opt.first_moments()[0].size(), 6u);
  EXPECT_EQ(opt.second_moments()[1].size(), 4u);
}

TEST(Adam, DeterministicUpdates) {
  auto run = [] {
    std::mt19937_64 rng(9);
    ParameterStore ps;
    Tensor& w = ps.add("w", {4}, 1.0, rng);
    Adam opt(ps, {.learning_rate = 0.05, .max_grad_norm = 1.0});
    for (int i = 0; i < 10; ++i) {
      opt.zero_grad();
      backward(sum(mul(exp(w), w)));
      opt.step();
    }
    return std::vector<double>(w.data().begin(), w.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  ParameterStore ps;
  ps.add("layer.w", {3, 4}, 1.0, rng);
  ps.add("layer.b", {4}, 1e-300, rng);
  ps.at("layer.b").mutable_data()[0] = 0.1 + 0.2;
  const auto path = temp_path("ckpt.bin");
  save_checkpoint(path, ps, {{"stage", "unit"}});

  ParameterStore other;
  other.add_constant("layer.w", {3, 4}, 0.0);
  other.add_constant("layer.b", {4}, 0.0);
  const auto header = load_checkpoint(path, other);
  EXPECT_EQ(header.at("stage"), "unit");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto a = ps.tensors()[i].data();
    const auto b = other.tensors()[i].data();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(std::memcmp(&a[j], &b[j], sizeof(double)), 0);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  ParameterStore ps;
  ps.add_constant("w", {2}, 1.0);
  const auto path = temp_path("ckpt_shape.bin");
  save_checkpoint(path, ps, nlohmann::json::object());
  ParameterStore other;
  other.add_constant("w", {3}, 0.0);
  EXPECT_ANY_THROW(load_checkpoint(path, other));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFileIsRejected) {
  const auto path = temp_path("ckpt_bad.bin");
  std::ofstream(path) << "not a checkpoint";
  EXPECT_ANY_THROW(read_checkpoint(path));
  std::filesystem::remove(path);
}

TEST(ParameterStore, CloneIsDeepAndCopyRestores) {
  ParameterStore ps;
  ps.add_constant("w", {2}, 1.0);
  ParameterStore snap = ps.clone();
  ps.at("w").mutable_data()[0] = 5.0;
  EXPECT_EQ(snap.at("w")[0], 1.0);
  ps.copy_values_from(snap);
  EXPECT_EQ(ps.at("w")[0], 1.0);
  EXPECT_THROW(ps.add_constant("w", {1}, 0.0), ContractViolation);
}
