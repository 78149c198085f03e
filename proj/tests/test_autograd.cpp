#include "support.hpp"

using namespace novelgs;
using namespace novelgs::testing;

namespace {

using Builder = std::function<ad::Var(const std::vector<ad::Var>&)>;

// Checks analytic against central-difference gradients of sum(w * f(inputs)).
void check_op(const std::vector<ad::Shape>& shapes, const Builder& f, std::uint64_t seed = 1, Real tol = 1e-6) {
  Rng rng(seed);
  std::vector<ad::Var> inputs;
  for (auto s : shapes) inputs.push_back(ad::Var::parameter(s, init_normal(s.size(), 1.0, rng)));
  const auto out = f(inputs);
  const auto w = probe_weights(out.size(), seed + 7);
  ad::backward(weighted_sum(out, w));
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<Real> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    auto eval = [&] {
      const auto o = f(inputs);
      Real s = 0;
      for (std::size_t i = 0; i < o.size(); ++i) s += o.value()[i] * w[i];
      return s;
    };
    const auto numeric = numeric_gradient(inputs[k].mutable_value(), eval);
    EXPECT_LT(relative_error(analytic, numeric), tol) << "input " << k;
  }
}

}  // namespace

TEST(Autograd, MatmulGradient) {
  check_op({{3, 4}, {4, 5}}, [](const auto& in) { return ad::matmul(in[0], in[1]); });
}

TEST(Autograd, AddRowAndLinearGradient) {
  check_op({{3, 4}, {4, 2}, {1, 2}}, [](const auto& in) { return ad::linear(in[0], in[1], in[2]); });
}

TEST(Autograd, AddScaleTiledGradient) {
  check_op({{3, 4}, {3, 4}}, [](const auto& in) { return ad::scale(ad::add(in[0], in[1]), -1.5); });
  check_op({{6, 4}, {2, 4}}, [](const auto& in) { return ad::add_tiled(in[0], in[1]); });
}

TEST(Autograd, ActivationGradients) {
  check_op({{3, 5}}, [](const auto& in) { return ad::silu(in[0]); });
  check_op({{3, 5}}, [](const auto& in) { return ad::gelu(in[0]); });
}

TEST(Autograd, LayerNormGradient) {
  check_op({{4, 6}}, [](const auto& in) { return ad::layer_norm(in[0]); }, 3, 1e-5);
}

TEST(Autograd, ModulateAndGatedResidualGradient) {
  check_op({{4, 3}, {1, 3}, {1, 3}}, [](const auto& in) { return ad::modulate(in[0], in[1], in[2]); });
  check_op({{4, 3}, {1, 3}, {4, 3}}, [](const auto& in) { return ad::gated_residual(in[0], in[1], in[2]); });
}

TEST(Autograd, SliceAndConcatGradient) {
  check_op({{4, 6}}, [](const auto& in) { return ad::slice_cols(in[0], 2, 3); });
  check_op({{5, 3}}, [](const auto& in) { return ad::slice_rows(in[0], 1, 3); });
  check_op({{2, 3}, {4, 3}}, [](const auto& in) { return ad::concat_rows({in[0], in[1]}); });
  check_op({{3, 2}, {3, 4}, {3, 1}}, [](const auto& in) { return ad::concat_cols({in[0], in[1], in[2]}); });
}

TEST(Autograd, ReductionsGradient) {
  check_op({{3, 3}}, [](const auto& in) { return ad::sum(in[0]); });
  check_op({{1, 1}, {1, 1}}, [](const auto& in) { return ad::add_scalars({in[0], in[1]}); });
  const std::vector<Real> target{0.1, -0.2, 0.3, 0.4, 0.5, -0.6};
  check_op({{2, 3}}, [&](const auto& in) { return ad::mse(in[0], target); });
}

TEST(Autograd, SelfAttentionGradient) {
  check_op({{5, 12}}, [](const auto& in) { return self_attention(in[0], 2); }, 5, 1e-5);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  // f(x) = sum(x*W) + sum(x*W) reuses one node twice.
  check_op({{2, 3}, {3, 2}}, [](const auto& in) {
    const auto y = ad::matmul(in[0], in[1]);
    return ad::add(y, y);
  });
}

TEST(Autograd, ShapeMismatchRejected) {
  auto a = ad::Var::parameter({2, 3}, std::vector<Real>(6, 1.0));
  auto b = ad::Var::parameter({2, 3}, std::vector<Real>(6, 1.0));
  EXPECT_THROW(ad::matmul(a, b), std::invalid_argument);
  EXPECT_THROW(ad::add(a, ad::Var::zeros({3, 2})), std::invalid_argument);
  EXPECT_THROW(ad::backward(a), std::logic_error);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  auto c = ad::Var::constant({1, 2}, {1.0, 2.0});
  auto p = ad::Var::parameter({2, 1}, {3.0, 4.0});
  auto y = ad::matmul(c, p);
  EXPECT_FALSE(c.requires_grad());
  ad::backward(y);
  EXPECT_DOUBLE_EQ(p.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 2.0);
}
