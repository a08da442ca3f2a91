#include "brainmass/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "brainmass/errors.hpp"

namespace brainmass {

void EncoderConfig::validate() const {
  if (v_rois < 2) throw ValidationError("v_rois must be >= 2");
  if (n_layers < 1) throw ValidationError("n_layers must be >= 1");
  if (n_heads < 1 || v_rois % n_heads != 0)
    throw ValidationError("v_rois (" + std::to_string(v_rois) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
  if (ffn_dim < 1) throw ValidationError("ffn_dim must be >= 1");
  if (readout_dim < 1) throw ValidationError("readout_dim must be >= 1");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ValidationError("mask_ratio must lie in (0, 1)");
}

nlohmann::json to_json(const EncoderConfig& cfg) {
  return {{"v_rois", cfg.v_rois},   {"n_layers", cfg.n_layers},       {"n_heads", cfg.n_heads},
          {"ffn_dim", cfg.ffn_dim}, {"readout_dim", cfg.readout_dim}, {"mask_ratio", cfg.mask_ratio}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& doc) {
  static const std::set<std::string> kFields = {"v_rois", "n_layers", "n_heads", "ffn_dim", "readout_dim", "mask_ratio"};
  if (!doc.is_object()) throw ValidationError("encoder config must be a JSON object");
  for (const auto& [key, _] : doc.items())
    if (!kFields.contains(key)) throw ValidationError("unknown encoder config field '" + key + "'");
  for (const auto& key : kFields)
    if (!doc.contains(key)) throw ValidationError("encoder config is missing '" + key + "'");
  auto count = [&doc](const char* key) {
    const auto& v = doc.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw ValidationError(std::string("encoder config field '") + key + "' must be a non-negative integer");
    return v.get<std::size_t>();
  };
  EncoderConfig cfg;
  cfg.v_rois = count("v_rois");
  cfg.n_layers = count("n_layers");
  cfg.n_heads = count("n_heads");
  cfg.ffn_dim = count("ffn_dim");
  cfg.readout_dim = count("readout_dim");
  if (!doc.at("mask_ratio").is_number()) throw ValidationError("mask_ratio must be a number");
  cfg.mask_ratio = doc.at("mask_ratio").get<double>();
  cfg.validate();
  return cfg;
}

std::string describe(const EncoderConfig& cfg) { return to_json(cfg).dump(); }

std::size_t encoder_parameter_count(const EncoderConfig& cfg) {
  const std::size_t v = cfg.v_rois, f = cfg.ffn_dim, d = cfg.readout_dim;
  // Per layer: C heads × 3 × (V×d_k) = 3V², W_O = V², two norms = 4V,
  // FFN = 2VF + F + V.
  const std::size_t per_layer = 4 * v * v + 4 * v + 2 * v * f + f + v;
  return v * v + v + cfg.n_layers * per_layer + v * d + d;
}

std::size_t mlp_parameter_count(std::size_t in, std::size_t hidden, std::size_t out) {
  return in * hidden + hidden + hidden * out + out;
}

LayerSelect parse_layer_select(const std::string& text) {
  if (text == "first") return LayerSelect::first;
  if (text == "last") return LayerSelect::last;
  if (text == "mean") return LayerSelect::mean;
  throw ParameterError("layer selection must be first, last or mean (got '" + text + "')");
}

namespace nn {
namespace {

template <typename T>
Tensor<T> gaussian(Shape shape, std::mt19937_64& rng, double std_dev) {
  if (!(std_dev >= 0.0)) throw ParameterError("init_std must be non-negative");
  std::vector<T> v(shape.size(), T{0});
  if (std_dev == 0.0) return Tensor<T>(shape, std::move(v), true);
  std::normal_distribution<double> dist(0.0, std_dev);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v), true);
}

template <typename T>
Tensor<T> constant(Shape shape, T value) {
  return Tensor<T>::full(shape, value, true);
}

}  // namespace

template <typename T>
ParameterList<T> EncoderParams<T>::parameters(const std::string& prefix) const {
  ParameterList<T> out;
  out.push_back({prefix + "pos_embedding", pos_embedding, true});
  out.push_back({prefix + "mask_embedding", mask_embedding, true});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const std::string lp = prefix + "layer" + std::to_string(l) + ".";
    for (std::size_t c = 0; c < layer.wq.size(); ++c) {
      const std::string hp = lp + "head" + std::to_string(c) + ".";
      out.push_back({hp + "wq", layer.wq[c], false});
      out.push_back({hp + "wk", layer.wk[c], false});
      out.push_back({hp + "wv", layer.wv[c], false});
    }
    out.push_back({lp + "wo", layer.wo, false});
    out.push_back({lp + "ln1.gain", layer.ln1_gain, true});
    out.push_back({lp + "ln1.bias", layer.ln1_bias, true});
    out.push_back({lp + "ffn.w1", layer.ffn_w1, false});
    out.push_back({lp + "ffn.b1", layer.ffn_b1, false});
    out.push_back({lp + "ffn.w2", layer.ffn_w2, false});
    out.push_back({lp + "ffn.b2", layer.ffn_b2, false});
    out.push_back({lp + "ln2.gain", layer.ln2_gain, true});
    out.push_back({lp + "ln2.bias", layer.ln2_bias, true});
  }
  out.push_back({prefix + "readout.weight", readout_weight, false});
  out.push_back({prefix + "readout.bias", readout_bias, false});
  return out;
}

template <typename T>
ParameterList<T> Mlp<T>::parameters(const std::string& prefix) const {
  return {{prefix + "w1", w1, false}, {prefix + "b1", b1, false}, {prefix + "w2", w2, false}, {prefix + "b2", b2, false}};
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng, double init_std) {
  cfg.validate();
  const std::size_t v = cfg.v_rois, dk = cfg.head_dim(), f = cfg.ffn_dim;
  EncoderParams<T> p;
  p.pos_embedding = gaussian<T>({v, v}, rng, init_std);
  p.mask_embedding = gaussian<T>({1, v}, rng, init_std);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    LayerParams<T> layer;
    for (std::size_t c = 0; c < cfg.n_heads; ++c) {
      layer.wq.push_back(gaussian<T>({v, dk}, rng, init_std));
      layer.wk.push_back(gaussian<T>({v, dk}, rng, init_std));
      layer.wv.push_back(gaussian<T>({v, dk}, rng, init_std));
    }
    layer.wo = gaussian<T>({v, v}, rng, init_std);
    layer.ln1_gain = constant<T>({1, v}, T{1});
    layer.ln1_bias = constant<T>({1, v}, T{0});
    layer.ffn_w1 = gaussian<T>({v, f}, rng, init_std);
    layer.ffn_b1 = constant<T>({1, f}, T{0});
    layer.ffn_w2 = gaussian<T>({f, v}, rng, init_std);
    layer.ffn_b2 = constant<T>({1, v}, T{0});
    layer.ln2_gain = constant<T>({1, v}, T{1});
    layer.ln2_bias = constant<T>({1, v}, T{0});
    p.layers.push_back(std::move(layer));
  }
  p.readout_weight = gaussian<T>({v, cfg.readout_dim}, rng, init_std);
  p.readout_bias = constant<T>({1, cfg.readout_dim}, T{0});
  return p;
}

template <typename T>
Mlp<T> init_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng, double init_std) {
  Mlp<T> m;
  m.w1 = gaussian<T>({in, hidden}, rng, init_std);
  m.b1 = constant<T>({1, hidden}, T{0});
  m.w2 = gaussian<T>({hidden, out}, rng, init_std);
  m.b2 = constant<T>({1, out}, T{0});
  return m;
}

template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x) {
  const auto hidden = gelu(add(matmul(x, mlp.w1), mlp.b1));
  return add(matmul(hidden, mlp.w2), mlp.b2);
}

template <typename T>
void copy_values(const ParameterList<T>& dst, const ParameterList<T>& src) {
  if (dst.size() != src.size())
    throw ShapeError("parameter lists differ in length: " + std::to_string(dst.size()) + " vs " +
                     std::to_string(src.size()));
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].tensor.shape() != src[i].tensor.shape())
      throw ShapeError("parameter '" + dst[i].name + "' " + dst[i].tensor.shape().str() + " vs '" + src[i].name +
                       "' " + src[i].tensor.shape().str());
    auto out = Tensor<T>(dst[i].tensor).mutable_values();
    std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), out.begin());
  }
}

template <typename T>
Tensor<T> to_tensor(const RealMatrix& m) {
  std::vector<T> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[i * m.cols() + j] = static_cast<T>(m(i, j));
  return Tensor<T>(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

template <typename T>
Tensor<T> embed_tokens(const EncoderParams<T>& params, const Tensor<T>& x, std::span<const std::size_t> masked) {
  const std::size_t v = params.pos_embedding.rows();
  if (x.shape() != Shape{v, v})
    throw ShapeError("embed_tokens: input " + x.shape().str() + " does not match V=" + std::to_string(v));
  for (auto i : masked)
    if (i >= v) throw ParameterError("mask index " + std::to_string(i) + " out of range for V=" + std::to_string(v));
  Tensor<T> tokens = x;
  if (!masked.empty()) {
    const std::vector<std::size_t> repeat(masked.size(), 0);
    tokens = scatter_rows(x, masked, gather_rows(params.mask_embedding, std::span<const std::size_t>(repeat)));
  }
  return add(tokens, params.pos_embedding);
}

template <typename T>
Tensor<T> transformer_block(const LayerParams<T>& layer, const Tensor<T>& h, const EncoderConfig& cfg,
                            std::vector<RealMatrix>* attention) {
  const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(cfg.head_dim()));
  const auto normed = layer_norm(h, layer.ln1_gain, layer.ln1_bias);
  std::vector<Tensor<T>> heads;
  heads.reserve(layer.wq.size());
  for (std::size_t c = 0; c < layer.wq.size(); ++c) {
    const auto q = matmul(normed, layer.wq[c]);
    const auto k = matmul(normed, layer.wk[c]);
    const auto val = matmul(normed, layer.wv[c]);
    const auto attn = softmax_rows(scale(matmul(q, transpose(k)), inv_sqrt_dk));
    if (attention != nullptr) {
      RealMatrix map(attn.rows(), attn.cols());
      for (std::size_t i = 0; i < attn.rows(); ++i)
        for (std::size_t j = 0; j < attn.cols(); ++j) map(i, j) = static_cast<double>(attn.at(i, j));
      attention->push_back(std::move(map));
    }
    heads.push_back(matmul(attn, val));
  }
  const auto mixed = heads.size() == 1 ? heads.front() : concat(heads, Axis::cols);
  const auto u = add(h, matmul(mixed, layer.wo));
  const auto hidden = gelu(add(matmul(layer_norm(u, layer.ln2_gain, layer.ln2_bias), layer.ffn_w1), layer.ffn_b1));
  return add(u, add(matmul(hidden, layer.ffn_w2), layer.ffn_b2));
}

template <typename T>
EncoderOutput<T> encode(const EncoderParams<T>& params, const EncoderConfig& cfg, const Tensor<T>& x,
                        std::span<const std::size_t> masked, bool capture_attention) {
  cfg.validate();
  if (params.layers.size() != cfg.n_layers) throw ShapeError("encoder state has a different layer count than its config");
  EncoderOutput<T> out;
  std::vector<RealMatrix>* sink = nullptr;
  if (capture_attention) {
    out.attention.n_layers = cfg.n_layers;
    out.attention.n_heads = cfg.n_heads;
    out.attention.maps.reserve(cfg.n_layers * cfg.n_heads);
    sink = &out.attention.maps;
  }
  Tensor<T> h = embed_tokens(params, x, masked);
  for (const auto& layer : params.layers) h = transformer_block(layer, h, cfg, sink);
  out.tokens = h;
  return out;
}

template <typename T>
Tensor<T> readout(const EncoderParams<T>& params, const Tensor<T>& tokens) {
  const auto projected = add(matmul(tokens, params.readout_weight), params.readout_bias);
  return reshape(projected, Shape{1, projected.size()});
}

#define BRAINMASS_INSTANTIATE(T)                                                                              \
  template struct EncoderParams<T>;                                                                           \
  template struct Mlp<T>;                                                                                     \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&, std::mt19937_64&, double);                  \
  template Mlp<T> init_mlp<T>(std::size_t, std::size_t, std::size_t, std::mt19937_64&, double);               \
  template Tensor<T> mlp_forward(const Mlp<T>&, const Tensor<T>&);                                            \
  template void copy_values(const ParameterList<T>&, const ParameterList<T>&);                                \
  template Tensor<T> to_tensor<T>(const RealMatrix&);                                                         \
  template Tensor<T> embed_tokens(const EncoderParams<T>&, const Tensor<T>&, std::span<const std::size_t>);   \
  template Tensor<T> transformer_block(const LayerParams<T>&, const Tensor<T>&, const EncoderConfig&,         \
                                       std::vector<RealMatrix>*);                                             \
  template EncoderOutput<T> encode(const EncoderParams<T>&, const EncoderConfig&, const Tensor<T>&,           \
                                   std::span<const std::size_t>, bool);                                       \
  template Tensor<T> readout(const EncoderParams<T>&, const Tensor<T>&);

BRAINMASS_INSTANTIATE(float)
BRAINMASS_INSTANTIATE(double)

#undef BRAINMASS_INSTANTIATE

}  // namespace nn

RealMatrix minmax_normalize(const RealMatrix& m) {
  if (m.size() == 0) return m;
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  if (hi - lo < 1e-12) return RealMatrix::Zero(m.rows(), m.cols());
  return ((m.array() - lo) / (hi - lo)).matrix();
}

RealMatrix averaged_attention(const nn::AttentionMaps& maps, LayerSelect select) {
  if (maps.maps.empty()) throw ParameterError("no attention maps were captured");
  std::vector<std::size_t> layers;
  switch (select) {
    case LayerSelect::first: layers = {0}; break;
    case LayerSelect::last: layers = {maps.n_layers - 1}; break;
    case LayerSelect::mean:
      for (std::size_t l = 0; l < maps.n_layers; ++l) layers.push_back(l);
      break;
  }
  RealMatrix acc = RealMatrix::Zero(maps.maps.front().rows(), maps.maps.front().cols());
  for (auto l : layers)
    for (std::size_t c = 0; c < maps.n_heads; ++c) acc += maps.at(l, c);
  return acc / static_cast<double>(layers.size() * maps.n_heads);
}

RealMatrix attention_heatmap(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                             std::span<const Connectome> cohort, LayerSelect select) {
  if (cohort.empty()) throw ParameterError("attention heatmap needs a non-empty cohort");
  nn::NoGradScope<float> no_grad;
  RealMatrix acc = RealMatrix::Zero(static_cast<Eigen::Index>(cfg.v_rois), static_cast<Eigen::Index>(cfg.v_rois));
  for (const auto& fc : cohort) {
    if (fc.rois() != cfg.v_rois)
      throw ValidationError("connectome of '" + fc.source_subject + "' has V=" + std::to_string(fc.rois()) +
                            ", model expects " + std::to_string(cfg.v_rois));
    const auto out = nn::encode(params, cfg, nn::to_tensor<float>(fc.matrix), {}, true);
    acc += averaged_attention(out.attention, select);
  }
  acc /= static_cast<double>(cohort.size());
  return minmax_normalize(acc);
}

}  // namespace brainmass
