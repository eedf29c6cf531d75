#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "msrn/error.hpp"
#include "msrn/ops.hpp"
#include "msrn/rng.hpp"
#include "msrn/tape.hpp"
#include "msrn/tensor.hpp"

namespace msrn {

/// Architecture hyperparameters of the multi-scale residual network.
struct ModelSpec {
  std::size_t patch_size = 11;
  std::size_t bands = 0;
  std::size_t classes = 0;
  std::size_t kernels = 24;
  double dropout = 0.3;

  static constexpr std::size_t kStemKernel = 7;
  static constexpr std::size_t kStemStride = 2;

  void validate() const {
    if (bands < kStemKernel) {
      throw ConfigError("band count " + std::to_string(bands) + " is below the stem kernel extent 7");
    }
    if (patch_size < 5 || patch_size % 2 == 0) {
      throw ConfigError("patch_size must be odd and >= 5, got " + std::to_string(patch_size));
    }
    if (classes < 1) throw ConfigError("class count must be >= 1");
    if (kernels < 1) throw ConfigError("kernel count must be >= 1");
    check_dropout_probability(dropout);
  }

  // Spectral extent after the strided stem, floor((B - 7) / 2) + 1.
  std::size_t stem_bands() const { return (bands - kStemKernel) / kStemStride + 1; }

  Conv3dSpec stem_conv() const {
    return {{1, 1, kStemKernel}, {1, 1, kStemStride}, Padding::Valid, 1, kernels};
  }
  // Collapses the spectral axis to a single band.
  Conv3dSpec bridge_a_conv() const { return {{1, 1, stem_bands()}, {1, 1, 1}, Padding::Valid, kernels, kernels}; }
  Conv3dSpec bridge_b_conv() const { return {{3, 3, 1}, {1, 1, 1}, Padding::Same, kernels, kernels}; }

  Shape input_shape(std::size_t n) const { return {n, patch_size, patch_size, bands, 1}; }

  /// Activation shape after every stage, computed from the shape laws alone.
  std::vector<std::pair<std::string, Shape>> shape_chain(std::size_t n) const {
    validate();
    std::vector<std::pair<std::string, Shape>> chain;
    Shape s = input_shape(n);
    chain.emplace_back("input", s);
    s = stem_conv().output_shape(s);
    chain.emplace_back("stem", s);
    chain.emplace_back("spectral", s);
    s = bridge_a_conv().output_shape(s);
    chain.emplace_back("bridge_a", s);
    s = bridge_b_conv().output_shape(s);
    chain.emplace_back("bridge_b", s);
    chain.emplace_back("spatial", s);
    chain.emplace_back("pool", Shape{n, kernels});
    chain.emplace_back("logits", Shape{n, classes});
    return chain;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// A convolution followed by batch normalization.
struct ConvBn {
  Conv3dSpec spec;
  Tensor weight;
  Tensor bias;
  BatchNormState bn;

  static ConvBn zeros(const Conv3dSpec& spec) {
    spec.validate();
    ConvBn layer;
    layer.spec = spec;
    layer.weight = Tensor(spec.weight_shape());
    layer.bias = Tensor({spec.out_channels});
    layer.bn = BatchNormState::fresh(spec.out_channels);
    return layer;
  }

  std::size_t fan_in() const { return spec.kernel[0] * spec.kernel[1] * spec.kernel[2] * spec.in_channels; }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".conv.weight", self.weight, true);
    fn(prefix + ".conv.bias", self.bias, true);
    fn(prefix + ".bn.gamma", self.bn.gamma, true);
    fn(prefix + ".bn.beta", self.bn.beta, true);
    fn(prefix + ".bn.running_mean", self.bn.running_mean, false);
    fn(prefix + ".bn.running_var", self.bn.running_var, false);
  }
};

enum class BlockKind { Spectral, Spatial };

/// Residual unit with three parallel convolutions of different extent, a
/// channel concatenation and a 1x1x1 fusion convolution back to k channels:
///
///   out = x + BN(fuse(concat(branch_1(x), branch_2(x), branch_3(x))))
///
/// Each branch is conv -> BN -> ReLU. Spectral blocks use 1x1xm kernels with
/// m in {3, 5, 7}; spatial blocks use rxrx1 kernels with r in {1, 3, 5}.
template <BlockKind Kind>
struct MultiScaleBlock {
  static constexpr std::array<std::size_t, 3> kExtents =
      Kind == BlockKind::Spectral ? std::array<std::size_t, 3>{3, 5, 7} : std::array<std::size_t, 3>{1, 3, 5};

  std::array<ConvBn, 3> branches;
  ConvBn fusion;

  static Conv3dSpec branch_conv(std::size_t extent, std::size_t k) {
    if constexpr (Kind == BlockKind::Spectral) {
      return {{1, 1, extent}, {1, 1, 1}, Padding::Same, k, k};
    } else {
      return {{extent, extent, 1}, {1, 1, 1}, Padding::Same, k, k};
    }
  }

  static MultiScaleBlock zeros(std::size_t k) {
    MultiScaleBlock block;
    for (std::size_t i = 0; i < 3; ++i) block.branches[i] = ConvBn::zeros(branch_conv(kExtents[i], k));
    block.fusion = ConvBn::zeros({{1, 1, 1}, {1, 1, 1}, Padding::Same, 3 * k, k});
    return block;
  }

  std::size_t width() const { return fusion.spec.out_channels; }

  static std::string branch_name(std::size_t i) {
    return std::string(Kind == BlockKind::Spectral ? "branch_m" : "branch_r") + std::to_string(kExtents[i]);
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < 3; ++i) ConvBn::visit(self.branches[i], prefix + "." + branch_name(i), fn);
    ConvBn::visit(self.fusion, prefix + ".fusion", fn);
  }

  // Zeroes the fusion convolution and its BN affine terms, which turns the
  // block into an exact identity map in either mode.
  void zero_fusion_path() {
    fusion.weight.fill(0.0);
    fusion.bias.fill(0.0);
    fusion.bn.gamma.fill(0.0);
    fusion.bn.beta.fill(0.0);
  }
};

using SpectralBlockParams = MultiScaleBlock<BlockKind::Spectral>;
using SpatialBlockParams = MultiScaleBlock<BlockKind::Spatial>;

namespace detail {

inline Var conv_bn(Tape& tape, Var x, const ConvBn& layer, Mode mode, ConvBn* stats_sink, const std::string& prefix,
                   bool activate) {
  Var w = tape.parameter(prefix + ".conv.weight", layer.weight);
  Var b = tape.parameter(prefix + ".conv.bias", layer.bias);
  Var gamma = tape.parameter(prefix + ".bn.gamma", layer.bn.gamma);
  Var beta = tape.parameter(prefix + ".bn.beta", layer.bn.beta);
  Var y = conv3d(tape, x, w, b, layer.spec);
  y = batchnorm(tape, y, gamma, beta, layer.bn, mode, stats_sink ? &stats_sink->bn : nullptr);
  return activate ? relu(tape, y) : y;
}

template <BlockKind Kind>
Var block_forward(Tape& tape, Var x, const MultiScaleBlock<Kind>& p, Mode mode, MultiScaleBlock<Kind>* stats_sink,
                  const std::string& prefix) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() != 5 || xv.shape().back() != p.width()) {
    throw ShapeError(prefix + " block: expected [n,h,w,b," + std::to_string(p.width()) + "] input, got " +
                     shape_str(xv.shape()));
  }
  std::vector<Var> outs;
  for (std::size_t i = 0; i < 3; ++i) {
    outs.push_back(conv_bn(tape, x, p.branches[i], mode, stats_sink ? &stats_sink->branches[i] : nullptr,
                           prefix + "." + MultiScaleBlock<Kind>::branch_name(i), true));
  }
  Var joined = concat_channels(tape, outs);
  Var fused = conv_bn(tape, joined, p.fusion, mode, stats_sink ? &stats_sink->fusion : nullptr, prefix + ".fusion",
                      false);
  return add(tape, x, fused);
}

}  // namespace detail

/// Spectral block on the tape. Train mode updates p's running statistics.
inline Var spectral_block_forward(Tape& tape, Var x, SpectralBlockParams& p, Mode mode,
                                  const std::string& prefix = "spectral") {
  return detail::block_forward(tape, x, p, mode, mode == Mode::Train ? &p : nullptr, prefix);
}

inline Var spatial_block_forward(Tape& tape, Var x, SpatialBlockParams& p, Mode mode,
                                 const std::string& prefix = "spatial") {
  return detail::block_forward(tape, x, p, mode, mode == Mode::Train ? &p : nullptr, prefix);
}

inline Tensor spectral_block_forward(const Tensor& x, SpectralBlockParams& p, Mode mode) {
  Tape tape;
  return tape.value(spectral_block_forward(tape, tape.constant(x), p, mode));
}

inline Tensor spatial_block_forward(const Tensor& x, SpatialBlockParams& p, Mode mode) {
  Tape tape;
  return tape.value(spatial_block_forward(tape, tape.constant(x), p, mode));
}

/// Every tensor of the network, visited in a fixed topological order that is
/// shared by initialization, optimization and checkpointing.
struct ModelParams {
  ConvBn stem;
  SpectralBlockParams spectral;
  ConvBn bridge_a;
  ConvBn bridge_b;
  SpatialBlockParams spatial;
  Tensor classifier_weight;
  Tensor classifier_bias;

  // fn(name, tensor, trainable)
  template <typename Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  std::size_t trainable_count() const {
    std::size_t total = 0;
    visit([&](const std::string&, const Tensor& t, bool trainable) {
      if (trainable) total += t.size();
    });
    return total;
  }

  std::size_t tensor_count() const {
    std::size_t total = 0;
    visit([&](const std::string&, const Tensor&, bool) { ++total; });
    return total;
  }

  Tensor* find(const std::string& name) {
    Tensor* found = nullptr;
    visit([&](const std::string& n, Tensor& t, bool) {
      if (n == name) found = &t;
    });
    return found;
  }

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn) {
    ConvBn::visit(self.stem, "stem", fn);
    SpectralBlockParams::visit(self.spectral, "spectral", fn);
    ConvBn::visit(self.bridge_a, "bridge_a", fn);
    ConvBn::visit(self.bridge_b, "bridge_b", fn);
    SpatialBlockParams::visit(self.spatial, "spatial", fn);
    fn(std::string("classifier.weight"), self.classifier_weight, true);
    fn(std::string("classifier.bias"), self.classifier_bias, true);
  }
};

/// The assembled network:
///
///   stem conv 1x1x7 stride (1,1,2) VALID -> BN -> ReLU
///   -> spectral block
///   -> bridge conv 1x1xB1 VALID -> BN -> ReLU
///   -> bridge conv 3x3x1 SAME -> BN -> ReLU
///   -> spatial block
///   -> global average pool -> dropout -> dense -> logits
class MsrnModel {
 public:
  // Parameters shaped for spec with all weights zero and fresh BN state.
  static MsrnModel skeleton(const ModelSpec& spec) {
    spec.validate();
    MsrnModel m;
    m.spec_ = spec;
    const std::size_t k = spec.kernels;
    m.params_.stem = ConvBn::zeros(spec.stem_conv());
    m.params_.spectral = SpectralBlockParams::zeros(k);
    m.params_.bridge_a = ConvBn::zeros(spec.bridge_a_conv());
    m.params_.bridge_b = ConvBn::zeros(spec.bridge_b_conv());
    m.params_.spatial = SpatialBlockParams::zeros(k);
    m.params_.classifier_weight = Tensor({k, spec.classes});
    m.params_.classifier_bias = Tensor({spec.classes});
    return m;
  }

  // He initialization: zero-mean Gaussian weights with std sqrt(2 / fan_in),
  // zero biases, BN gamma 1 and beta 0. Draws follow the parameter order.
  static MsrnModel build(const ModelSpec& spec, Rng& rng) {
    MsrnModel m = skeleton(spec);
    auto init_conv = [&](ConvBn& layer) {
      const double stddev = std::sqrt(2.0 / static_cast<double>(layer.fan_in()));
      for (double& v : layer.weight.data()) v = rng.normal(0.0, stddev);
    };
    ModelParams& p = m.params_;
    init_conv(p.stem);
    for (auto& b : p.spectral.branches) init_conv(b);
    init_conv(p.spectral.fusion);
    init_conv(p.bridge_a);
    init_conv(p.bridge_b);
    for (auto& b : p.spatial.branches) init_conv(b);
    init_conv(p.spatial.fusion);
    const double stddev = std::sqrt(2.0 / static_cast<double>(spec.kernels));
    for (double& v : p.classifier_weight.data()) v = rng.normal(0.0, stddev);
    return m;
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  ModelParams& params() noexcept { return params_; }
  const ModelParams& params() const noexcept { return params_; }

  /// Records the forward pass on tape and returns logits [n, K]. Every
  /// trainable tensor is registered on the tape, so backward() yields a
  /// gradient for each of them. Train mode updates BN running statistics and
  /// requires dropout_rng when dropout > 0.
  Var forward(Tape& tape, const Tensor& batch, Mode mode, Rng* dropout_rng = nullptr) {
    return forward_impl(tape, batch, mode, dropout_rng, mode == Mode::Train ? &params_ : nullptr);
  }

  /// Eval-mode logits; a pure function of the parameters and the batch.
  Tensor predict_logits(const Tensor& batch) const {
    Tape tape;
    return tape.value(forward_impl(tape, batch, Mode::Eval, nullptr, nullptr));
  }

  std::vector<std::size_t> predict(const Tensor& batch) const {
    const Tensor logits = predict_logits(batch);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (logits[i * k + j] > logits[i * k + best]) best = j;
      }
      out[i] = best;
    }
    return out;
  }

 private:
  Var forward_impl(Tape& tape, const Tensor& batch, Mode mode, Rng* dropout_rng, ModelParams* sink) const {
    if (batch.rank() != 5 || batch.dim(0) == 0) {
      throw ShapeError("model input must be [n,s,s,B,1] with n >= 1, got " + shape_str(batch.shape()));
    }
    require_shape(batch, spec_.input_shape(batch.dim(0)), "model input");
    if (mode == Mode::Train && spec_.dropout > 0.0 && dropout_rng == nullptr) {
      throw UsageError("training-mode forward needs a dropout generator");
    }

    params_.visit([&](const std::string& name, const Tensor& t, bool trainable) {
      if (trainable) tape.parameter(name, t);
    });

    const ModelParams& p = params_;
    Var x = tape.constant(batch);
    x = detail::conv_bn(tape, x, p.stem, mode, sink ? &sink->stem : nullptr, "stem", true);
    x = detail::block_forward(tape, x, p.spectral, mode, sink ? &sink->spectral : nullptr, "spectral");
    x = detail::conv_bn(tape, x, p.bridge_a, mode, sink ? &sink->bridge_a : nullptr, "bridge_a", true);
    x = detail::conv_bn(tape, x, p.bridge_b, mode, sink ? &sink->bridge_b : nullptr, "bridge_b", true);
    x = detail::block_forward(tape, x, p.spatial, mode, sink ? &sink->spatial : nullptr, "spatial");
    x = global_avg_pool(tape, x);
    if (mode == Mode::Train) {
      Rng unused;
      x = dropout(tape, x, spec_.dropout, dropout_rng ? *dropout_rng : unused, mode);
    }
    Var w = tape.parameter("classifier.weight", p.classifier_weight);
    Var b = tape.parameter("classifier.bias", p.classifier_bias);
    return dense(tape, x, w, b);
  }

  ModelSpec spec_;
  ModelParams params_;
};

inline MsrnModel build_msrn(const ModelSpec& spec, Rng& rng) { return MsrnModel::build(spec, rng); }

}  // namespace msrn
