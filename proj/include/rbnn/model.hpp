#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rbnn/autodiff.hpp"
#include "rbnn/layers.hpp"
#include "rbnn/rng.hpp"
#include "rbnn/variational.hpp"

namespace rbnn {

/// Malformed or inconsistent model specification.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class LayerKind { ConstrainedConv, Conv, Dense, Relu, Tanh, MaxPool, Flatten };

inline std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::ConstrainedConv: return "constrained_conv";
    case LayerKind::Conv: return "conv";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t filters = 0;  // conv kinds
  std::size_t kernel = 0;   // conv kinds
  std::size_t stride = 1;   // conv kinds and maxpool
  Padding padding = Padding::Valid;
  std::size_t window = 0;  // maxpool
  std::size_t units = 0;   // dense

  bool is_conv() const { return kind == LayerKind::Conv || kind == LayerKind::ConstrainedConv; }
  bool has_params() const { return is_conv() || kind == LayerKind::Dense; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Declarative layer stack shared by the baseline and its Bayesian twin.
///
/// Text form, one directive per line (`#` starts a comment):
///
///     input 64
///     channels 1
///     classes 2
///     layer constrained_conv filters=3 kernel=5 stride=1 padding=valid
///     layer conv filters=16 kernel=3 stride=2 padding=valid
///     layer relu
///     layer maxpool window=2 stride=2
///     layer flatten
///     layer dense units=2
struct ModelSpec {
  std::size_t input_size = 64;
  std::size_t channels = 1;
  std::size_t classes = 2;
  std::vector<LayerSpec> layers;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;

  /// Desk-scale template: constrained conv, two strided conv blocks, two dense layers.
  static ModelSpec desk_default() {
    ModelSpec s;
    auto conv = [](LayerKind k, std::size_t f, std::size_t ks, std::size_t st) {
      LayerSpec l;
      l.kind = k;
      l.filters = f;
      l.kernel = ks;
      l.stride = st;
      return l;
    };
    auto simple = [](LayerKind k) {
      LayerSpec l;
      l.kind = k;
      return l;
    };
    LayerSpec pool;
    pool.kind = LayerKind::MaxPool;
    pool.window = 2;
    pool.stride = 2;
    LayerSpec hidden;
    hidden.kind = LayerKind::Dense;
    hidden.units = 128;
    LayerSpec head;
    head.kind = LayerKind::Dense;
    head.units = 2;
    s.layers = {conv(LayerKind::ConstrainedConv, 3, 5, 1),
                conv(LayerKind::Conv, 16, 3, 2),
                simple(LayerKind::Relu),
                pool,
                conv(LayerKind::Conv, 32, 3, 2),
                simple(LayerKind::Relu),
                pool,
                simple(LayerKind::Flatten),
                hidden,
                simple(LayerKind::Relu),
                head};
    return s;
  }

  static ModelSpec parse(std::string_view text) {
    ModelSpec s;
    s.layers.clear();
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string word;
      if (!(ls >> word)) continue;
      auto fail = [&](const std::string& msg) {
        throw SpecError("model spec line " + std::to_string(lineno) + ": " + msg);
      };
      auto read_count = [&](std::istringstream& is) {
        long long v = 0;
        if (!(is >> v) || v <= 0) fail("expected a positive integer after '" + word + "'");
        return static_cast<std::size_t>(v);
      };
      if (word == "input") {
        s.input_size = read_count(ls);
      } else if (word == "channels") {
        s.channels = read_count(ls);
      } else if (word == "classes") {
        s.classes = read_count(ls);
      } else if (word == "layer") {
        std::string kind;
        if (!(ls >> kind)) fail("missing layer kind");
        LayerSpec l;
        if (kind == "constrained_conv") l.kind = LayerKind::ConstrainedConv;
        else if (kind == "conv") l.kind = LayerKind::Conv;
        else if (kind == "dense") l.kind = LayerKind::Dense;
        else if (kind == "relu") l.kind = LayerKind::Relu;
        else if (kind == "tanh") l.kind = LayerKind::Tanh;
        else if (kind == "maxpool") l.kind = LayerKind::MaxPool;
        else if (kind == "flatten") l.kind = LayerKind::Flatten;
        else fail("unknown layer kind '" + kind + "'");
        std::string kv;
        while (ls >> kv) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) fail("expected key=value, got '" + kv + "'");
          const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
          auto num = [&]() -> std::size_t {
            std::size_t pos = 0;
            long long v = 0;
            try {
              v = std::stoll(val, &pos);
            } catch (const std::exception&) {
              fail("bad number for " + key);
            }
            if (pos != val.size() || v <= 0) fail("bad number for " + key);
            return static_cast<std::size_t>(v);
          };
          if (key == "filters" && l.is_conv()) l.filters = num();
          else if (key == "kernel" && l.is_conv()) l.kernel = num();
          else if (key == "stride" && (l.is_conv() || l.kind == LayerKind::MaxPool)) l.stride = num();
          else if (key == "window" && l.kind == LayerKind::MaxPool) l.window = num();
          else if (key == "units" && l.kind == LayerKind::Dense) l.units = num();
          else if (key == "padding" && l.is_conv()) {
            if (val == "valid") l.padding = Padding::Valid;
            else if (val == "same") l.padding = Padding::Same;
            else fail("padding must be valid or same");
          } else {
            fail("key '" + key + "' not allowed for layer " + kind);
          }
        }
        if (l.kind == LayerKind::MaxPool && l.window == 0) fail("maxpool needs window=");
        s.layers.push_back(l);
      } else {
        fail("unknown directive '" + word + "'");
      }
    }
    s.validate();
    return s;
  }

  /// Canonical text form; parse(serialize()) reproduces *this.
  std::string serialize() const {
    std::ostringstream os;
    os << "input " << input_size << "\nchannels " << channels << "\nclasses " << classes << '\n';
    for (const auto& l : layers) {
      os << "layer " << layer_kind_name(l.kind);
      if (l.is_conv()) {
        os << " filters=" << l.filters << " kernel=" << l.kernel << " stride=" << l.stride
           << " padding=" << (l.padding == Padding::Valid ? "valid" : "same");
      } else if (l.kind == LayerKind::MaxPool) {
        os << " window=" << l.window << " stride=" << l.stride;
      } else if (l.kind == LayerKind::Dense) {
        os << " units=" << l.units;
      }
      os << '\n';
    }
    return os.str();
  }

  /// Per-layer output shapes for a batch of `batch` inputs. Throws SpecError
  /// when the stack does not chain.
  std::vector<Shape> output_shapes(std::size_t batch = 1) const {
    std::vector<Shape> shapes;
    Shape cur{batch, channels, input_size, input_size};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string where = "layer " + std::to_string(i) + " (" + std::string(layer_kind_name(l.kind)) + ")";
      if (l.is_conv()) {
        if (cur.size() != 4) throw SpecError(where + ": convolution after flatten");
        if (l.filters == 0 || l.kernel == 0) throw SpecError(where + ": needs filters= and kernel=");
        try {
          const ConvGeometry g = conv_geometry(cur[2], cur[3], l.kernel, l.kernel, l.stride, l.padding);
          cur = {batch, l.filters, g.out_h, g.out_w};
        } catch (const ShapeError& e) {
          throw SpecError(where + ": " + e.what());
        }
      } else if (l.kind == LayerKind::MaxPool) {
        if (cur.size() != 4) throw SpecError(where + ": pooling after flatten");
        if (l.window > cur[2] || l.window > cur[3]) throw SpecError(where + ": window larger than input");
        cur = {batch, cur[1], (cur[2] - l.window) / l.stride + 1, (cur[3] - l.window) / l.stride + 1};
      } else if (l.kind == LayerKind::Flatten) {
        cur = {batch, shape_numel(cur) / batch};
      } else if (l.kind == LayerKind::Dense) {
        if (cur.size() != 2) throw SpecError(where + ": dense layer needs a flatten before it");
        if (l.units == 0) throw SpecError(where + ": needs units=");
        cur = {batch, l.units};
      }
      shapes.push_back(cur);
    }
    return shapes;
  }

  void validate() const {
    if (input_size == 0 || channels == 0) throw SpecError("input size and channels must be positive");
    if (classes < 2) throw SpecError("need at least two classes");
    if (layers.empty()) throw SpecError("model spec has no layers");
    std::size_t convs = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.is_conv()) ++convs;
      if (l.kind == LayerKind::ConstrainedConv) {
        if (i != 0) throw SpecError("constrained_conv is only allowed as the first layer");
        if (l.kernel % 2 == 0) throw SpecError("constrained_conv needs an odd kernel size");
      }
    }
    if (convs == 0) throw SpecError("model spec needs at least one convolution layer");
    if (layers.front().kind != LayerKind::ConstrainedConv) {
      throw SpecError("first layer must be the constrained convolution");
    }
    if (layers.back().kind != LayerKind::Dense || layers.back().units != classes) {
      throw SpecError("last layer must be a dense layer with units equal to the class count");
    }
    const auto shapes = output_shapes(1);
    if (shapes.back().size() != 2) throw SpecError("model output must be [N, classes]");
  }
};

enum class ModelMode { Baseline, Bayesian };

inline std::string_view mode_name(ModelMode m) { return m == ModelMode::Baseline ? "baseline" : "bayesian"; }

inline ModelMode parse_mode(std::string_view s) {
  if (s == "baseline") return ModelMode::Baseline;
  if (s == "bayesian" || s == "bnn") return ModelMode::Bayesian;
  throw std::invalid_argument("unknown model mode '" + std::string(s) + "' (expected baseline or bnn)");
}

using Layer = std::variant<ConvLayer, DenseLayer, FlipoutConvLayer, FlipoutDenseLayer, ActivationLayer, MaxPoolLayer,
                           FlattenLayer>;

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
};

/// Initialisation knobs for the variational parameters.
struct VariationalInit {
  double rho = -5.0;
  PriorSpec prior{};
};

/// Instantiated network: either all point-estimate layers or all flipout layers.
class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, ModelMode mode, std::vector<Layer> layers)
      : spec_(std::move(spec)), mode_(mode), layers_(std::move(layers)) {}

  const ModelSpec& spec() const noexcept { return spec_; }
  ModelMode mode() const noexcept { return mode_; }
  bool bayesian() const noexcept { return mode_ == ModelMode::Bayesian; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  /// Every trainable tensor in a fixed order (layer order; mu before rho,
  /// kernel/weight before bias).
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    visit_params([&](const std::string& name, const Tensor& t) { out.push_back({name, const_cast<Tensor*>(&t)}); });
    return out;
  }

  std::vector<ConstParamRef> parameters() const {
    std::vector<ConstParamRef> out;
    visit_params([&](const std::string& name, const Tensor& t) { out.push_back({name, &t}); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  /// Re-applies the constrained-layer projection (to mu for Bayesian models).
  void project_constraints() {
    for (auto& layer : layers_) {
      if (auto* c = std::get_if<ConvLayer>(&layer); c && c->constrained) c->kernel = constrained_project(c->kernel);
      if (auto* c = std::get_if<FlipoutConvLayer>(&layer); c && c->constrained) {
        c->kernel.mu = constrained_project(c->kernel.mu);
      }
    }
  }

  /// Kernel of the constrained layer (mu for Bayesian models).
  const Tensor& constrained_kernel() const {
    for (const auto& layer : layers_) {
      if (const auto* c = std::get_if<ConvLayer>(&layer); c && c->constrained) return c->kernel;
      if (const auto* c = std::get_if<FlipoutConvLayer>(&layer); c && c->constrained) return c->kernel.mu;
    }
    throw SpecError("model has no constrained layer");
  }

 private:
  template <class Fn>
  void visit_params(Fn&& fn) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, ConvLayer>) {
              fn(p + "kernel", l.kernel);
              if (l.bias) fn(p + "bias", *l.bias);
            } else if constexpr (std::is_same_v<L, DenseLayer>) {
              fn(p + "weight", l.weight);
              fn(p + "bias", l.bias);
            } else if constexpr (std::is_same_v<L, FlipoutConvLayer>) {
              fn(p + "kernel.mu", l.kernel.mu);
              fn(p + "kernel.rho", l.kernel.rho);
              if (l.bias) {
                fn(p + "bias.mu", l.bias->mu);
                fn(p + "bias.rho", l.bias->rho);
              }
            } else if constexpr (std::is_same_v<L, FlipoutDenseLayer>) {
              fn(p + "weight.mu", l.weight.mu);
              fn(p + "weight.rho", l.weight.rho);
              fn(p + "bias.mu", l.bias.mu);
              fn(p + "bias.rho", l.bias.rho);
            }
          },
          layers_[i]);
    }
  }

  ModelSpec spec_;
  ModelMode mode_ = ModelMode::Baseline;
  std::vector<Layer> layers_;
};

/// Instantiates parameters: He-uniform weights (limit sqrt(6 / fan_in)), zero
/// biases, the constrained kernel drawn positive then projected, and for
/// Bayesian mode rho filled with `init.rho`.
inline Model build(const ModelSpec& spec, ModelMode mode, std::uint64_t seed, const VariationalInit& init = {}) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  const auto shapes = spec.output_shapes(1);
  std::vector<Layer> layers;
  std::size_t in_channels = spec.channels;
  std::size_t in_features = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::ConstrainedConv:
      case LayerKind::Conv: {
        const bool constrained = l.kind == LayerKind::ConstrainedConv;
        const Shape kshape{l.filters, in_channels, l.kernel, l.kernel};
        Tensor kernel;
        if (constrained) {
          kernel = constrained_project(rng.uniform_tensor(kshape, 0.0, 1.0));
        } else {
          const double lim = std::sqrt(6.0 / static_cast<double>(in_channels * l.kernel * l.kernel));
          kernel = rng.uniform_tensor(kshape, -lim, lim);
        }
        std::optional<Tensor> bias;
        if (!constrained) bias = Tensor(Shape{l.filters});
        if (mode == ModelMode::Baseline) {
          layers.emplace_back(ConvLayer{std::move(kernel), std::move(bias), l.stride, l.padding, constrained});
        } else {
          FlipoutConvLayer f;
          f.kernel = GaussianVariational::with_rho(std::move(kernel), init.rho);
          if (bias) f.bias = GaussianVariational::with_rho(std::move(*bias), init.rho);
          f.stride = l.stride;
          f.padding = l.padding;
          f.constrained = constrained;
          layers.emplace_back(std::move(f));
        }
        in_channels = l.filters;
        break;
      }
      case LayerKind::Dense: {
        const double lim = std::sqrt(6.0 / static_cast<double>(in_features));
        Tensor w = rng.uniform_tensor({in_features, l.units}, -lim, lim);
        Tensor b(Shape{l.units});
        if (mode == ModelMode::Baseline) {
          layers.emplace_back(DenseLayer{std::move(w), std::move(b)});
        } else {
          layers.emplace_back(FlipoutDenseLayer{GaussianVariational::with_rho(std::move(w), init.rho),
                                                GaussianVariational::with_rho(std::move(b), init.rho)});
        }
        break;
      }
      case LayerKind::Relu: layers.emplace_back(ActivationLayer{Activation::Relu}); break;
      case LayerKind::Tanh: layers.emplace_back(ActivationLayer{Activation::Tanh}); break;
      case LayerKind::MaxPool: layers.emplace_back(MaxPoolLayer{l.window, l.stride}); break;
      case LayerKind::Flatten: layers.emplace_back(FlattenLayer{}); break;
    }
    if (shapes[i].size() == 2) in_features = shapes[i][1];
  }
  return Model(spec, mode, std::move(layers));
}

/// Deterministic twin of a Bayesian model holding its means.
inline Model collapse(const Model& bayesian) {
  if (!bayesian.bayesian()) return bayesian;
  std::vector<Layer> layers;
  for (const auto& layer : bayesian.layers()) {
    if (const auto* c = std::get_if<FlipoutConvLayer>(&layer)) {
      std::optional<Tensor> bias;
      if (c->bias) bias = c->bias->mu;
      layers.emplace_back(ConvLayer{c->kernel.mu, std::move(bias), c->stride, c->padding, c->constrained});
    } else if (const auto* d = std::get_if<FlipoutDenseLayer>(&layer)) {
      layers.emplace_back(DenseLayer{d->weight.mu, d->bias.mu});
    } else {
      layers.push_back(layer);
    }
  }
  return Model(bayesian.spec(), ModelMode::Baseline, std::move(layers));
}

// ---------------------------------------------------------------------------
// Forward pass

struct ForwardOptions {
  /// Record parameters as gradient leaves.
  bool trainable = false;
  /// Noise source; required for Bayesian models.
  Rng* rng = nullptr;
  /// When set, receives the activation shape after every layer.
  std::vector<Shape>* trace = nullptr;
};

struct ForwardPass {
  Var logits;
  /// Tape handles parallel to Model::parameters().
  std::vector<Var> params;
  /// Variational tensors with the eps used in this pass, for the KL terms.
  std::vector<BoundVariational> variational;
};

inline void check_input(const Model& model, const Tensor& x) {
  const ModelSpec& s = model.spec();
  if (x.rank() != 4 || x.dim(1) != s.channels || x.dim(2) != s.input_size || x.dim(3) != s.input_size) {
    throw ShapeError("model expects input [N," + std::to_string(s.channels) + "," + std::to_string(s.input_size) + "," +
                     std::to_string(s.input_size) + "], got " + shape_str(x.shape()));
  }
}

/// Runs the layer stack on `input`. Flipout noise for each layer is drawn from
/// `opts.rng` in layer order.
inline ForwardPass forward(const Model& model, Var input, const ForwardOptions& opts = {}) {
  check_input(model, input.value());
  if (model.bayesian() && opts.rng == nullptr) throw std::invalid_argument("Bayesian forward pass needs an Rng");
  Tape& tape = input.tape();
  ForwardPass pass;
  auto bind = [&](const Tensor& t) {
    Var v = bind_tensor(tape, t, opts.trainable);
    pass.params.push_back(v);
    return v;
  };
  Var h = input;
  for (const auto& layer : model.layers()) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvLayer>) {
            Var k = bind(l.kernel);
            h = conv2d(h, k, l.stride, l.padding);
            if (l.bias) h = add_channel_bias(h, bind(*l.bias));
          } else if constexpr (std::is_same_v<L, DenseLayer>) {
            Var w = bind(l.weight);
            h = dense(h, w, bind(l.bias));
          } else if constexpr (std::is_same_v<L, FlipoutConvLayer>) {
            Var mu = bind(l.kernel.mu);
            Var rho = bind(l.kernel.rho);
            std::optional<Shape> bshape;
            if (l.bias) bshape = l.bias->mu.shape();
            const auto& hs = h.shape();
            FlipoutNoise noise =
                draw_flipout_noise(l.kernel.mu.shape(), bshape, hs[0], hs[1], l.kernel.mu.dim(0), *opts.rng);
            const std::size_t stride = l.stride;
            const Padding padding = l.padding;
            h = flipout_apply(h, mu, rho, noise, [&](Var x, Var k) { return conv2d(x, k, stride, padding); });
            pass.variational.push_back({mu, rho, noise.weight_eps});
            if (l.bias) {
              Var bmu = bind(l.bias->mu);
              Var brho = bind(l.bias->rho);
              h = add_channel_bias(h, sample_weight(bmu, brho, *noise.bias_eps));
              pass.variational.push_back({bmu, brho, *noise.bias_eps});
            }
          } else if constexpr (std::is_same_v<L, FlipoutDenseLayer>) {
            Var mu = bind(l.weight.mu);
            Var rho = bind(l.weight.rho);
            const auto& hs = h.shape();
            FlipoutNoise noise =
                draw_flipout_noise(l.weight.mu.shape(), l.bias.mu.shape(), hs[0], hs[1], l.weight.mu.dim(1), *opts.rng);
            h = flipout_apply(h, mu, rho, noise, [](Var x, Var w) { return matmul(x, w); });
            pass.variational.push_back({mu, rho, noise.weight_eps});
            Var bmu = bind(l.bias.mu);
            Var brho = bind(l.bias.rho);
            h = add_channel_bias(h, sample_weight(bmu, brho, *noise.bias_eps));
            pass.variational.push_back({bmu, brho, *noise.bias_eps});
          } else if constexpr (std::is_same_v<L, ActivationLayer>) {
            h = apply_activation(l.kind, h);
          } else if constexpr (std::is_same_v<L, MaxPoolLayer>) {
            h = maxpool2d(h, l.window, l.stride);
          } else {
            h = flatten(h);
          }
        },
        layer);
    if (opts.trace) opts.trace->push_back(h.shape());
  }
  pass.logits = h;
  return pass;
}

/// Logits for a batch without gradient bookkeeping. `rng` is required for
/// Bayesian models (one stochastic pass).
inline Tensor predict_logits(const Model& model, const Tensor& batch, Rng* rng = nullptr) {
  Tape tape;
  ForwardOptions opts;
  opts.rng = rng;
  return forward(model, tape.constant(batch), opts).logits.value();
}

/// Logits of a point-estimate model; a pure function of parameters and input.
inline Tensor forward_deterministic(const Model& model, const Tensor& batch) {
  if (model.bayesian()) throw std::invalid_argument("forward_deterministic needs a baseline model");
  return predict_logits(model, batch);
}

}  // namespace rbnn
