#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d3etr/grad.hpp"
#include "d3etr/param_store.hpp"

namespace d3etr::nn {

using ad::DiffArray;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 1;
  std::size_t n_dec_layers = 4;
  std::size_t n_queries = 12;
  std::size_t n_classes = 5;
  // Encoder token grid; each token flattens a patch x patch block of cells.
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch = 2;
  std::size_t c_in = 3;
  std::size_t ffn_dim = 128;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t tokens() const { return grid_h * grid_w; }
  std::size_t d_in() const { return patch * patch * c_in; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Row-major allow mask; 1 = may attend.
using AttnMask = std::vector<std::uint8_t>;

// Block-diagonal mask over consecutive groups of the given sizes.
AttnMask build_group_mask(std::span<const std::size_t> group_sizes);
AttnMask build_group_mask(std::size_t n_student, std::size_t n_aux);

// softmax_j(q_i . k_j / sqrt(dim)) with masked entries exactly 0.
DiffArray attention_weights(const DiffArray& queries, const DiffArray& keys,
                            const AttnMask* mask = nullptr);

struct AttentionProjections {
  DiffArray wq, bq, wk, bk, wv, bv, wo, bo;
};

struct AttentionResult {
  DiffArray output;
  std::vector<DiffArray> weights;  // one N_q x N_kv map per head
};

AttentionResult multi_head_attention(const DiffArray& x_q, const DiffArray& x_k,
                                     const DiffArray& x_v, const AttentionProjections& proj,
                                     std::size_t n_heads, const AttnMask* mask = nullptr);

// Fixed 2-D sine embedding, HW x d (first half encodes y, second half x).
DiffArray sine_position_embedding(std::size_t grid_h, std::size_t grid_w, std::size_t d_model);

// Identity backbone: groups scene cells into patch tokens (HW x patch^2*c).
DiffArray patchify(std::span<const double> grid, std::size_t height, std::size_t width,
                   std::size_t channels, std::size_t patch);

struct EncoderOutput {
  DiffArray tokens;  // HW x d
  DiffArray pos;     // HW x d
};

struct GroupSlice {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const GroupSlice&, const GroupSlice&) = default;
};

struct LayerOutput {
  DiffArray logits;  // N_total x K
  DiffArray probs;   // sigmoid(logits)
  DiffArray boxes;   // N_total x 4, sigmoid-squashed (cx, cy, w, h)
};

struct AttentionRecord {
  std::vector<std::vector<DiffArray>> self_attn;   // [layer][head] N_total x N_total
  std::vector<std::vector<DiffArray>> cross_attn;  // [layer][head] N_total x HW
};

struct DecoderOutputs {
  std::vector<LayerOutput> layers;
  AttentionRecord attention;
  std::vector<GroupSlice> groups;  // group 0 is the student group
};

class Detector {
 public:
  Detector(ModelConfig cfg, ad::ParamStore params);

  // Xavier-uniform weights, zero biases, unit norms, N(0,1) query embeddings.
  static Detector init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  const DiffArray& query_embed() const { return params_.get("query_embed"); }

  // Copy whose parameters are constants: forward passes record no graph.
  Detector frozen() const;

  EncoderOutput encode(const DiffArray& features) const;
  EncoderOutput encode(const DiffArray& features, const DiffArray& pos) const;
  // Decodes consecutive query groups that never attend to each other.
  DecoderOutputs decode(const EncoderOutput& enc, std::span<const DiffArray> query_groups) const;
  DecoderOutputs decode(const EncoderOutput& enc, const DiffArray& student_queries,
                        const std::optional<DiffArray>& aux_queries = std::nullopt) const;
  // Student group only, own queries.
  DecoderOutputs forward(const DiffArray& features) const;

 private:
  AttentionProjections attn(const std::string& prefix) const;
  DiffArray ln(const std::string& prefix, const DiffArray& x) const;
  DiffArray ffn(const std::string& prefix, const DiffArray& x) const;

  ModelConfig cfg_;
  ad::ParamStore params_;
};

// Names of the parameters a decoder layer owns.
std::vector<std::string> layer_param_names(const std::string& prefix, bool cross);

}  // namespace d3etr::nn
