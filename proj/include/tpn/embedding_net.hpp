#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tpn/adam.hpp"
#include "tpn/autodiff.hpp"
#include "tpn/error.hpp"
#include "tpn/rng.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

enum class Architecture { mlp, lenet2conv };

inline std::string to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "lenet2conv"; }

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "mlp") return Architecture::mlp;
  if (s == "lenet2conv") return Architecture::lenet2conv;
  throw DomainError("unknown architecture '" + s + "' (expected mlp or lenet2conv)");
}

/// Shape and initialization of the embedding function.
///
/// `mlp` uses input_dim -> hidden... -> embedding_dim with ReLU between
/// layers. `lenet2conv` is conv(k) -> pool2 -> relu -> conv(k) -> pool2 ->
/// relu -> fc -> relu -> fc over single-channel images; the defaults are 20
/// and 50 filters of 5x5 and a 500-wide fully connected layer.
struct NetworkConfig {
  Architecture arch = Architecture::mlp;
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden = {64, 64};

  std::size_t image_channels = 1;
  std::size_t image_height = 28;
  std::size_t image_width = 28;
  std::vector<std::size_t> conv_filters = {20, 50};
  std::size_t conv_kernel = 5;
  std::size_t fc_width = 500;

  std::size_t embedding_dim = 10;
  std::uint64_t seed = 0;

  std::size_t input_features() const {
    return arch == Architecture::mlp ? input_dim : image_channels * image_height * image_width;
  }

  /// [input, hidden..., embedding] for the MLP.
  std::vector<std::size_t> layer_widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(embedding_dim);
    return w;
  }

  Conv2dGeometry conv_geometry(std::size_t layer) const {
    Conv2dGeometry g;
    g.kernel = conv_kernel;
    g.in_channels = image_channels;
    g.height = image_height;
    g.width = image_width;
    for (std::size_t l = 0; l < layer; ++l) {
      g.in_channels = conv_filters[l];
      g.height = (g.height - conv_kernel + 1) / 2;
      g.width = (g.width - conv_kernel + 1) / 2;
    }
    g.out_channels = conv_filters[layer];
    return g;
  }

  std::size_t flattened_conv_features() const {
    const auto g = conv_geometry(conv_filters.size() - 1);
    return g.out_channels * (g.out_height() / 2) * (g.out_width() / 2);
  }

  void validate() const {
    if (embedding_dim == 0) throw ShapeError("network: embedding_dim must be positive");
    if (arch == Architecture::mlp) {
      if (input_dim == 0) throw ShapeError("network: input_dim must be positive");
      for (std::size_t i = 0; i < hidden.size(); ++i)
        if (hidden[i] == 0) throw ShapeError("network: hidden layer " + std::to_string(i) + " has zero width");
      return;
    }
    if (image_channels == 0 || image_height == 0 || image_width == 0) throw ShapeError("network: empty image shape");
    if (conv_filters.size() != 2) throw ShapeError("network: lenet2conv needs exactly two conv layers");
    if (fc_width == 0 || conv_kernel == 0) throw ShapeError("network: zero-width layer");
    for (std::size_t l = 0; l < conv_filters.size(); ++l) {
      if (conv_filters[l] == 0) throw ShapeError("network: conv layer " + std::to_string(l) + " has zero filters");
      const auto g = conv_geometry(l);
      if (g.height < conv_kernel || g.width < conv_kernel || g.out_height() % 2 || g.out_width() % 2) {
        throw ShapeError("network: image too small or odd-sized for conv layer " + std::to_string(l));
      }
    }
  }
};

namespace detail {

template <std::floating_point T>
BasicTensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// Fresh parameters: uniform weights in +-sqrt(6 / fan_in) for layers feeding
/// a ReLU, +-sqrt(3 / fan_in) for the output layer; zero biases.
template <std::floating_point T = double>
BasicParameters<T> init_parameters(const NetworkConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x1417));
  BasicParameters<T> p;
  auto bound = [](std::size_t fan_in, bool last) { return std::sqrt((last ? 3.0 : 6.0) / static_cast<double>(fan_in)); };

  if (config.arch == Architecture::mlp) {
    const auto widths = config.layer_widths();
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const bool last = l + 2 == widths.size();
      p.add("fc" + std::to_string(l) + ".weight",
            detail::uniform_tensor<T>(Shape{widths[l], widths[l + 1]}, bound(widths[l], last), rng));
      p.add("fc" + std::to_string(l) + ".bias", BasicTensor<T>(Shape{widths[l + 1]}));
    }
    return p;
  }

  for (std::size_t l = 0; l < config.conv_filters.size(); ++l) {
    const auto g = config.conv_geometry(l);
    p.add("conv" + std::to_string(l) + ".weight",
          detail::uniform_tensor<T>(Shape{g.patch(), g.out_channels}, bound(g.patch(), false), rng));
    p.add("conv" + std::to_string(l) + ".bias", BasicTensor<T>(Shape{g.out_channels}));
  }
  const std::size_t flat = config.flattened_conv_features();
  p.add("fc0.weight", detail::uniform_tensor<T>(Shape{flat, config.fc_width}, bound(flat, false), rng));
  p.add("fc0.bias", BasicTensor<T>(Shape{config.fc_width}));
  p.add("fc1.weight",
        detail::uniform_tensor<T>(Shape{config.fc_width, config.embedding_dim}, bound(config.fc_width, true), rng));
  p.add("fc1.bias", BasicTensor<T>(Shape{config.embedding_dim}));
  return p;
}

/// The embedding function f(x; theta).
template <std::floating_point T = double>
class BasicEmbeddingNet {
 public:
  using TensorT = BasicTensor<T>;
  using VarT = BasicVar<T>;

  /// Parameter leaves of one tape, in parameter order.
  struct Bound {
    std::vector<VarT> vars;
  };

  explicit BasicEmbeddingNet(NetworkConfig config) : config_(std::move(config)), params_(init_parameters<T>(config_)) {}

  BasicEmbeddingNet(NetworkConfig config, BasicParameters<T> params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    const auto expected = init_parameters<T>(config_);
    if (expected.size() != params_.size()) throw ShapeError("network: parameter count does not match config");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& want = expected.entries()[i];
      const auto& got = params_.entries()[i];
      if (want.name != got.name || want.value.shape() != got.value.shape()) {
        throw ShapeError("network: parameter '" + got.name + "' " + shape_string(got.value.shape()) +
                         " does not match expected '" + want.name + "' " + shape_string(want.value.shape()));
      }
    }
  }

  const NetworkConfig& config() const noexcept { return config_; }
  const BasicParameters<T>& parameters() const noexcept { return params_; }
  BasicParameters<T>& parameters() noexcept { return params_; }

  Bound bind(BasicTape<T>& tape) const {
    Bound b;
    for (const auto& e : params_.entries()) b.vars.push_back(tape.variable(e.value, e.name));
    return b;
  }

  VarT embed(const Bound& theta, const VarT& batch) const {
    if (batch.shape().size() != 2 || batch.shape()[1] != config_.input_features()) {
      throw ShapeError("embed: batch " + shape_string(batch.shape()) + " does not match input width " +
                       std::to_string(config_.input_features()));
    }
    if (config_.arch == Architecture::mlp) {
      VarT h = batch;
      const std::size_t layers = theta.vars.size() / 2;
      for (std::size_t l = 0; l < layers; ++l) {
        h = add_bias(matmul(h, theta.vars[2 * l]), theta.vars[2 * l + 1]);
        if (l + 1 < layers) h = relu(h);
      }
      return h;
    }
    VarT h = batch;
    for (std::size_t l = 0; l < 2; ++l) {
      const auto g = config_.conv_geometry(l);
      h = conv2d(h, theta.vars[2 * l], theta.vars[2 * l + 1], g);
      h = relu(maxpool2x2(h, g.out_channels, g.out_height(), g.out_width()));
    }
    h = relu(add_bias(matmul(h, theta.vars[4]), theta.vars[5]));
    return add_bias(matmul(h, theta.vars[6]), theta.vars[7]);
  }

  /// Forward pass without gradient tracking, in chunks of `chunk` rows.
  TensorT embed(const TensorT& batch, std::size_t chunk = 256) const {
    if (batch.rank() != 2) throw ShapeError("embed: batch must be a matrix, got " + shape_string(batch.shape()));
    const std::size_t n = batch.shape()[0];
    std::vector<T> out;
    out.reserve(n * config_.embedding_dim);
    for (std::size_t begin = 0; begin < n || (n == 0 && begin == 0); begin += chunk) {
      const std::size_t end = std::min(n, begin + chunk);
      BasicTape<T> tape;
      Bound theta;
      for (const auto& e : params_.entries()) theta.vars.push_back(tape.constant(e.value));
      const std::size_t cols = batch.shape()[1];
      std::vector<T> rows(batch.storage().begin() + begin * cols, batch.storage().begin() + end * cols);
      auto part = embed(theta, tape.constant(TensorT(Shape{end - begin, cols}, std::move(rows)))).value();
      out.insert(out.end(), part.storage().begin(), part.storage().end());
      if (n == 0) break;
    }
    return TensorT(Shape{n, config_.embedding_dim}, std::move(out));
  }

 private:
  NetworkConfig config_;
  BasicParameters<T> params_;
};

using EmbeddingNet = BasicEmbeddingNet<double>;

}  // namespace tpn
