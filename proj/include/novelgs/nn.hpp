#pragma once

// Parameter storage, initializers and the layers the denoiser is built from.

#include "novelgs/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace novelgs {

using Rng = std::mt19937_64;

// Box-Muller on top of the engine so draws are identical across standard
// library implementations.
inline Real standard_normal(Rng& rng) {
  constexpr Real two_pi = 6.283185307179586;
  const Real u1 = (static_cast<Real>(rng() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const Real u2 = static_cast<Real>(rng() >> 11) * 0x1.0p-53;          // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

inline Real uniform01(Rng& rng) { return static_cast<Real>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<Real>(n)) % n;
}

inline std::vector<Real> init_normal(std::size_t n, Real stddev, Rng& rng) {
  std::vector<Real> v(n);
  for (auto& x : v) x = stddev * standard_normal(rng);
  return v;
}

inline std::vector<Real> init_xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const Real limit = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
  std::vector<Real> v(fan_in * fan_out);
  for (auto& x : v) x = limit * (2.0 * uniform01(rng) - 1.0);
  return v;
}

// Named parameters in registration order.
class ParameterSet {
 public:
  ad::Var add(const std::string& name, ad::Shape shape, std::vector<Real> values) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw std::logic_error("duplicate parameter name " + name);
    auto v = ad::Var::parameter(shape, std::move(values));
    entries_.emplace_back(name, v);
    return v;
  }

  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, ad::Var>>& entries() { return entries_; }

  ad::Var find(const std::string& name) const {
    for (const auto& [n, v] : entries_)
      if (n == name) return v;
    throw std::out_of_range("no parameter named " + name);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true)
      : weight_(params.add(name + ".weight", {in, out}, init_xavier(in, out, rng))) {
    if (with_bias) bias_ = params.add(name + ".bias", {1, out}, std::vector<Real>(out, 0.0));
  }

  ad::Var operator()(const ad::Var& x) const {
    auto y = ad::matmul(x, weight_);
    return bias_.defined() ? ad::add_row(y, bias_) : y;
  }

  ad::Var& weight() { return weight_; }
  ad::Var& bias() { return bias_; }
  const ad::Var& weight() const { return weight_; }
  const ad::Var& bias() const { return bias_; }

  void fill_weight(Real v) {
    for (auto& w : weight_.mutable_value()) w = v;
  }
  void set_bias(const std::vector<Real>& v) {
    if (!bias_.defined() || v.size() != bias_.size()) throw std::invalid_argument("set_bias: size mismatch");
    std::copy(v.begin(), v.end(), bias_.mutable_value().begin());
  }

 private:
  ad::Var weight_;
  ad::Var bias_;
};

// Multi-head scaled dot-product self-attention over all rows of a packed
// [n, 3D] query/key/value matrix. Returns [n, D].
inline ad::Var self_attention(const ad::Var& qkv, std::size_t heads) {
  const std::size_t n = qkv.rows();
  if (qkv.cols() % 3 != 0) throw std::invalid_argument("self_attention: expected [n, 3D] input");
  const std::size_t d = qkv.cols() / 3;
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("self_attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dh));
  const auto N = static_cast<Eigen::Index>(n), DH = static_cast<Eigen::Index>(dh);

  auto probs = std::make_shared<std::vector<ad::RowMatrix>>(heads);
  std::vector<Real> value(n * d);
  ad::ConstMatrixMap in = qkv.matrix();
  ad::MatrixMap out(value.data(), N, static_cast<Eigen::Index>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    const auto q = in.block(0, off, N, DH);
    const auto k = in.block(0, static_cast<Eigen::Index>(d) + off, N, DH);
    const auto v = in.block(0, static_cast<Eigen::Index>(2 * d) + off, N, DH);
    ad::RowMatrix s = (q * k.transpose()) * inv_sqrt;
    for (Eigen::Index r = 0; r < N; ++r) {
      const Real mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    out.block(0, off, N, DH).noalias() = s * v;
    (*probs)[h] = std::move(s);
  }

  return ad::make_op({n, d}, std::move(value), {qkv}, [probs, heads, n, d, dh, inv_sqrt](ad::Node& self) {
    ad::Node& nin = *self.inputs[0];
    const auto N = static_cast<Eigen::Index>(n), DH = static_cast<Eigen::Index>(dh), D = static_cast<Eigen::Index>(d);
    ad::ConstMatrixMap in = ad::value_map(nin);
    ad::MatrixMap gin = ad::grad_map(nin);
    ad::ConstMatrixMap gout(self.grad.data(), N, D);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h * dh);
      const auto q = in.block(0, off, N, DH);
      const auto k = in.block(0, D + off, N, DH);
      const auto v = in.block(0, 2 * D + off, N, DH);
      const ad::RowMatrix& p = (*probs)[h];
      const auto go = gout.block(0, off, N, DH);
      gin.block(0, 2 * D + off, N, DH).noalias() += p.transpose() * go;
      ad::RowMatrix gp = go * v.transpose();
      const Eigen::VectorXd rowdot = (gp.array() * p.array()).rowwise().sum();
      ad::RowMatrix gs = p.array() * (gp.colwise() - rowdot).array();
      gs *= inv_sqrt;
      gin.block(0, off, N, DH).noalias() += gs * k;
      gin.block(0, D + off, N, DH).noalias() += gs.transpose() * q;
    }
  });
}

}  // namespace novelgs
