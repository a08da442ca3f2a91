#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "brainmass/connectome.hpp"
#include "brainmass/tensor.hpp"

namespace brainmass {

/// Shape of one BrainTF encoder. Tokens are ROI connection profiles, so the
/// model width equals the ROI count.
struct EncoderConfig {
  std::size_t v_rois = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 32;
  std::size_t readout_dim = 8;
  double mask_ratio = 0.2;

  void validate() const;
  std::size_t head_dim() const { return v_rois / n_heads; }
  std::size_t embedding_dim() const { return readout_dim * v_rois; }
  bool operator==(const EncoderConfig&) const = default;
};

nlohmann::json to_json(const EncoderConfig& cfg);
/// Accepts exactly the six EncoderConfig fields; anything else is a
/// ValidationError.
EncoderConfig encoder_config_from_json(const nlohmann::json& doc);
std::string describe(const EncoderConfig& cfg);

/// Closed-form parameter counts.
std::size_t encoder_parameter_count(const EncoderConfig& cfg);  // encoder + readout
std::size_t mlp_parameter_count(std::size_t in, std::size_t hidden, std::size_t out);

namespace nn {

template <typename T>
struct LayerParams {
  std::vector<Tensor<T>> wq, wk, wv;  // per head, V×d_k
  Tensor<T> wo;                       // V×V
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor<T> ln2_gain, ln2_bias;
};

template <typename T>
struct EncoderParams {
  Tensor<T> pos_embedding;   // V×V
  Tensor<T> mask_embedding;  // 1×V
  std::vector<LayerParams<T>> layers;
  Tensor<T> readout_weight;  // V×D
  Tensor<T> readout_bias;    // 1×D

  /// Canonical enumeration. The order is part of the checkpoint format.
  ParameterList<T> parameters(const std::string& prefix = {}) const;
};

/// Two affine maps with GELU in between.
template <typename T>
struct Mlp {
  Tensor<T> w1, b1, w2, b2;

  ParameterList<T> parameters(const std::string& prefix = {}) const;
};

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng, double init_std = 0.02);

template <typename T>
Mlp<T> init_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng, double init_std = 0.02);

template <typename T>
Tensor<T> mlp_forward(const Mlp<T>& mlp, const Tensor<T>& x);

/// Copies values (not handles) from `src` into `dst`, which must enumerate
/// identically shaped tensors.
template <typename T>
void copy_values(const ParameterList<T>& dst, const ParameterList<T>& src);

template <typename T>
Tensor<T> to_tensor(const RealMatrix& m);

struct AttentionMaps {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<RealMatrix> maps;  // layer-major: maps[l * n_heads + c]

  const RealMatrix& at(std::size_t layer, std::size_t head) const { return maps[layer * n_heads + head]; }
};

template <typename T>
struct EncoderOutput {
  Tensor<T> tokens;  // V×V final hidden states
  AttentionMaps attention;  // empty unless captured
};

/// H⁰: token i = x_i + pos_i, or mask_embedding + pos_i for masked i.
template <typename T>
Tensor<T> embed_tokens(const EncoderParams<T>& params, const Tensor<T>& x, std::span<const std::size_t> masked);

/// Pre-norm block: u = h + MHSA(LN(h)); out = u + FFN(LN(u)).
template <typename T>
Tensor<T> transformer_block(const LayerParams<T>& layer, const Tensor<T>& h, const EncoderConfig& cfg,
                            std::vector<RealMatrix>* attention = nullptr);

template <typename T>
EncoderOutput<T> encode(const EncoderParams<T>& params, const EncoderConfig& cfg, const Tensor<T>& x,
                        std::span<const std::size_t> masked = {}, bool capture_attention = false);

/// Shared V→D map on every token, concatenated in ROI order (1×D·V).
template <typename T>
Tensor<T> readout(const EncoderParams<T>& params, const Tensor<T>& tokens);

}  // namespace nn

enum class LayerSelect { first, last, mean };
LayerSelect parse_layer_select(const std::string& text);

/// Min-max scaling into [0, 1]; a range below 1e-12 maps everything to 0.
RealMatrix minmax_normalize(const RealMatrix& m);

/// Head-averaged attention of the selected layer(s), averaged over the cohort
/// and min-max normalized.
RealMatrix attention_heatmap(const nn::EncoderParams<float>& params, const EncoderConfig& cfg,
                             std::span<const Connectome> cohort, LayerSelect select);

/// Unnormalized head/layer average for one forward pass.
RealMatrix averaged_attention(const nn::AttentionMaps& maps, LayerSelect select);

}  // namespace brainmass
