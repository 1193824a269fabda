#pragma once

// The five architectures of the experiment grid, described declaratively and
// realized as parameter sets plus a forward pass.

#include <algorithm>
#include <array>
#include <cctype>
#include <limits>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hiercomp/autodiff.hpp"
#include "hiercomp/checkpoint.hpp"
#include "hiercomp/random.hpp"

namespace hiercomp {

enum class NetworkName : std::uint8_t { VGG11, ShallowFC, WideNet, DeepNet, ThreeConvNet };

inline constexpr std::size_t kInputDim = kImageChannels * kImageSide * kImageSide;  // 3072
inline constexpr std::size_t kShallowWidth = 10000;
inline constexpr std::size_t kWideDepth = 2;
inline constexpr std::size_t kDeepDepth = 7;

inline std::string_view network_name(NetworkName n) {
  switch (n) {
    case NetworkName::VGG11: return "VGG11";
    case NetworkName::ShallowFC: return "ShallowFC";
    case NetworkName::WideNet: return "WideNet";
    case NetworkName::DeepNet: return "DeepNet";
    case NetworkName::ThreeConvNet: return "ThreeConvNet";
  }
  return "?";
}

inline NetworkName parse_network(std::string_view s) {
  std::string k;
  for (char c : s)
    if (c != '_' && c != '-') k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (k == "vgg11") return NetworkName::VGG11;
  if (k == "shallowfc") return NetworkName::ShallowFC;
  if (k == "widenet") return NetworkName::WideNet;
  if (k == "deepnet") return NetworkName::DeepNet;
  if (k == "threeconvnet") return NetworkName::ThreeConvNet;
  throw std::invalid_argument("unknown network '" + std::string(s) + "'");
}

inline constexpr std::array<NetworkName, 5> kAllNetworks{NetworkName::VGG11, NetworkName::ShallowFC,
                                                         NetworkName::WideNet, NetworkName::DeepNet,
                                                         NetworkName::ThreeConvNet};

struct LayerSpec {
  enum class Kind : std::uint8_t { Conv, Dense, ReLU, MaxPool, Flatten, GlobalAvgPool };
  Kind kind = Kind::ReLU;
  std::size_t in = 0, out = 0, kernel = 0, stride = 1, pad = 0;

  static LayerSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t pad, std::size_t stride = 1) {
    return {Kind::Conv, in, out, k, stride, pad};
  }
  static LayerSpec dense(std::size_t in, std::size_t out) { return {Kind::Dense, in, out}; }
  static LayerSpec relu() { return {Kind::ReLU}; }
  static LayerSpec maxpool() { return {Kind::MaxPool}; }
  static LayerSpec flatten() { return {Kind::Flatten}; }
  static LayerSpec global_avg_pool() { return {Kind::GlobalAvgPool}; }

  bool has_parameters() const { return kind == Kind::Conv || kind == Kind::Dense; }
  std::size_t fan_in() const { return kind == Kind::Conv ? in * kernel * kernel : in; }
  std::size_t parameter_count() const {
    if (kind == Kind::Conv) return out * in * kernel * kernel + out;
    if (kind == Kind::Dense) return out * in + out;
    return 0;
  }
  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  NetworkName name = NetworkName::ShallowFC;
  std::size_t output_dim = 10;
  std::vector<LayerSpec> layers;
  std::uint64_t init_seed = 0;
};

// Closed-form count straight from the layer list.
inline std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : spec.layers) n += l.parameter_count();
  return n;
}

// Parameters of a ReLU MLP with `depth` hidden layers of equal width.
inline std::uint64_t fc_parameter_count(std::uint64_t width, std::size_t depth, std::uint64_t in, std::uint64_t out) {
  return in * width + width + (depth - 1) * (width * width + width) + width * out + out;
}

// Integer hidden width whose MLP count is closest to `target` (ties go to the
// narrower network).
inline std::size_t solve_matched_width(std::uint64_t target, std::size_t depth, std::size_t in, std::size_t out) {
  if (depth < 1) throw std::invalid_argument("solve_matched_width: depth must be >= 1");
  if (target < fc_parameter_count(1, depth, in, out))
    throw std::invalid_argument("solve_matched_width: target " + std::to_string(target) +
                                " below the smallest network of depth " + std::to_string(depth));
  // count(w) = a w^2 + b w + out
  const double a = static_cast<double>(depth - 1);
  const double b = static_cast<double>(in + 1 + (depth - 1) + out);
  const double c = static_cast<double>(out) - static_cast<double>(target);
  const double root = a == 0 ? -c / b : (-b + std::sqrt(b * b - 4 * a * c)) / (2 * a);
  const auto center = static_cast<std::int64_t>(std::floor(root));
  std::size_t best = 0;
  std::uint64_t best_err = std::numeric_limits<std::uint64_t>::max();
  for (std::int64_t w = std::max<std::int64_t>(1, center - 2); w <= center + 3; ++w) {
    const std::uint64_t n = fc_parameter_count(static_cast<std::uint64_t>(w), depth, in, out);
    const std::uint64_t err = n > target ? n - target : target - n;
    if (err < best_err) {
      best_err = err;
      best = static_cast<std::size_t>(w);
    }
  }
  return best;
}

namespace detail {

inline std::vector<LayerSpec> mlp_layers(std::size_t width, std::size_t depth, std::size_t out) {
  std::vector<LayerSpec> layers{LayerSpec::flatten(), LayerSpec::dense(kInputDim, width), LayerSpec::relu()};
  for (std::size_t i = 1; i < depth; ++i) {
    layers.push_back(LayerSpec::dense(width, width));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::dense(width, out));
  return layers;
}

// VGG "A" configuration on 32x32 inputs: five conv stages end at 512x1x1,
// followed by a two-stage classifier 512 -> 512 -> out.
inline std::vector<LayerSpec> vgg11_layers(std::size_t out) {
  std::vector<LayerSpec> layers;
  std::size_t in = kImageChannels;
  const int cfg[] = {64, -1, 128, -1, 256, 256, -1, 512, 512, -1, 512, 512, -1};
  for (int c : cfg) {
    if (c < 0) {
      layers.push_back(LayerSpec::maxpool());
    } else {
      layers.push_back(LayerSpec::conv(in, static_cast<std::size_t>(c), 3, 1));
      layers.push_back(LayerSpec::relu());
      in = static_cast<std::size_t>(c);
    }
  }
  layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::dense(512, 512));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::dense(512, out));
  return layers;
}

inline std::vector<LayerSpec> three_conv_layers(std::size_t out) {
  return {LayerSpec::conv(3, 8, 5, 2),   LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(8, 10, 5, 2),  LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::conv(10, 12, 5, 2), LayerSpec::relu(), LayerSpec::maxpool(),
          LayerSpec::global_avg_pool(),  LayerSpec::dense(12, out)};
}

}  // namespace detail

inline constexpr double kMatchTolerance = 0.01;

inline NetworkSpec make_network_spec(NetworkName name, std::size_t output_dim) {
  if (output_dim == 0) throw std::invalid_argument("network: output_dim must be positive");
  NetworkSpec spec{name, output_dim, {}, 0};
  switch (name) {
    case NetworkName::VGG11:
      spec.layers = detail::vgg11_layers(output_dim);
      break;
    case NetworkName::ShallowFC:
      spec.layers = detail::mlp_layers(kShallowWidth, 1, output_dim);
      break;
    case NetworkName::WideNet:
    case NetworkName::DeepNet: {
      const std::size_t depth = name == NetworkName::WideNet ? kWideDepth : kDeepDepth;
      const std::size_t target = parameter_count({NetworkName::VGG11, output_dim, detail::vgg11_layers(output_dim)});
      const std::size_t width = solve_matched_width(target, depth, kInputDim, output_dim);
      spec.layers = detail::mlp_layers(width, depth, output_dim);
      const double rel = std::abs(static_cast<double>(parameter_count(spec)) - static_cast<double>(target)) /
                         static_cast<double>(target);
      if (rel > kMatchTolerance)
        throw std::runtime_error("network: cannot match VGG11 parameter count for " +
                                 std::string(network_name(name)));
      break;
    }
    case NetworkName::ThreeConvNet:
      spec.layers = detail::three_conv_layers(output_dim);
      break;
  }
  return spec;
}

template <class T>
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    std::size_t conv = 0, fc = 0;
    for (const auto& l : spec_.layers) {
      if (!l.has_parameters()) continue;
      std::string base = l.kind == LayerSpec::Kind::Conv ? "conv" + std::to_string(++conv)
                                                         : "fc" + std::to_string(++fc);
      Shape wshape = l.kind == LayerSpec::Kind::Conv ? Shape{l.out, l.in, l.kernel, l.kernel} : Shape{l.out, l.in};
      params_.emplace_back(base + ".weight", Tensor<T>(wshape));
      params_.emplace_back(base + ".bias", Tensor<T>({l.out}));
    }
  }

  // Parameters hold tape pointers during a step; moving the vector is fine,
  // but the network itself must stay put while a tape is alive.
  Network(const Network&) = default;
  Network& operator=(const Network&) = default;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const noexcept { return spec_; }
  NetworkSpec& spec() noexcept { return spec_; }
  std::span<Parameter<T>> parameters() noexcept { return params_; }
  std::span<const Parameter<T>> parameters() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  // input [B x 3 x 32 x 32] -> [B x output_dim]
  Var<T> forward(Tape<T>& tape, Var<T> x) {
    std::size_t next_param = 0;
    for (const auto& l : spec_.layers) {
      switch (l.kind) {
        case LayerSpec::Kind::Conv: {
          auto w = tape.parameter(params_[next_param++]);
          auto b = tape.parameter(params_[next_param++]);
          x = conv2d(x, w, b, l.stride, l.pad);
          break;
        }
        case LayerSpec::Kind::Dense: {
          auto w = tape.parameter(params_[next_param++]);
          auto b = tape.parameter(params_[next_param++]);
          x = dense(x, w, b);
          break;
        }
        case LayerSpec::Kind::ReLU: x = relu(x); break;
        case LayerSpec::Kind::MaxPool: x = maxpool2x2(x); break;
        case LayerSpec::Kind::Flatten: x = flatten(x); break;
        case LayerSpec::Kind::GlobalAvgPool: x = global_avg_pool(x); break;
      }
    }
    return x;
  }

  Tensor<T> predict(const Tensor<T>& batch) {
    Tape<T> tape;
    return forward(tape, tape.constant(batch)).value();
  }

 private:
  NetworkSpec spec_;
  std::vector<Parameter<T>> params_;
};

// Seed of the initial weights for one run: a function of the architecture
// and run id only, so every scrambling condition starts from the same point.
inline std::uint64_t init_seed_for(NetworkName name, std::size_t output_dim, int run_id) {
  return mix_seed(fnv1a64(network_name(name)), output_dim, static_cast<std::uint64_t>(run_id));
}

inline constexpr int kMaxRunId = 5;

// Fan-in scaled uniform: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Network<T>& init_matched(Network<T>& net, int run_id) {
  if (run_id < 1 || run_id > kMaxRunId)
    throw std::invalid_argument("init_matched: run_id " + std::to_string(run_id) + " outside 1..5");
  net.spec().init_seed = init_seed_for(net.spec().name, net.spec().output_dim, run_id);
  Rng rng(net.spec().init_seed);
  auto params = net.parameters();
  std::size_t k = 0;
  for (const auto& l : net.spec().layers) {
    if (!l.has_parameters()) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in()));
    for (int part = 0; part < 2; ++part)
      for (auto& v : params[k++].value.values()) v = static_cast<T>(uniform(rng, -bound, bound));
  }
  return net;
}

template <class T>
Network<T> build_network(NetworkName name, std::size_t output_dim, int run_id) {
  Network<T> net(make_network_spec(name, output_dim));
  init_matched(net, run_id);
  return net;
}

}  // namespace hiercomp
