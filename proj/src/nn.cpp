#include "d3etr/nn.hpp"

#include <cmath>
#include <numbers>

#include "d3etr/rng.hpp"

namespace d3etr::nn {

using namespace ad;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw GradError("ModelConfig: " + m); };
  if (d_model == 0 || n_heads == 0 || n_dec_layers == 0 || n_queries == 0 || n_classes == 0 ||
      grid_h == 0 || grid_w == 0 || patch == 0 || c_in == 0 || ffn_dim == 0) {
    fail("all counts must be >= 1 (n_enc_layers may be 0)");
  }
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_model % 4 != 0) fail("d_model must be a multiple of 4 for the 2-D sine embedding");
}

AttnMask build_group_mask(std::span<const std::size_t> group_sizes) {
  std::size_t n = 0;
  for (std::size_t g : group_sizes) n += g;
  AttnMask mask(n * n, 0);
  std::size_t begin = 0;
  for (std::size_t g : group_sizes) {
    for (std::size_t r = begin; r < begin + g; ++r)
      for (std::size_t c = begin; c < begin + g; ++c) mask[r * n + c] = 1;
    begin += g;
  }
  return mask;
}

AttnMask build_group_mask(std::size_t n_student, std::size_t n_aux) {
  const std::size_t sizes[] = {n_student, n_aux};
  return build_group_mask(sizes);
}

DiffArray attention_weights(const DiffArray& queries, const DiffArray& keys, const AttnMask* mask) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.cols() != keys.cols()) {
    throw GradError("attention_weights: feature dims differ " + shape_str(queries.shape()) +
                    " vs " + shape_str(keys.shape()));
  }
  const DiffArray scores =
      scale(matmul_nt(queries, keys), 1.0 / std::sqrt(static_cast<double>(queries.cols())));
  return mask ? masked_softmax(scores, *mask) : softmax(scores, -1);
}

AttentionResult multi_head_attention(const DiffArray& x_q, const DiffArray& x_k,
                                     const DiffArray& x_v, const AttentionProjections& p,
                                     std::size_t n_heads, const AttnMask* mask) {
  const std::size_t d = p.wq.cols();
  if (x_q.cols() != p.wq.rows() || x_k.cols() != p.wk.rows() || x_v.cols() != p.wv.rows() ||
      x_k.rows() != x_v.rows() || d % n_heads != 0 || p.wo.rows() != d) {
    throw GradError("multi_head_attention: dimension mismatch (q " + shape_str(x_q.shape()) +
                    ", k " + shape_str(x_k.shape()) + ", v " + shape_str(x_v.shape()) + ")");
  }
  const DiffArray q = add(matmul(x_q, p.wq), p.bq);
  const DiffArray k = add(matmul(x_k, p.wk), p.bk);
  const DiffArray v = add(matmul(x_v, p.wv), p.bv);
  const std::size_t hd = d / n_heads;
  AttentionResult out;
  std::vector<DiffArray> heads;
  for (std::size_t m = 0; m < n_heads; ++m) {
    const std::size_t b = m * hd, e = b + hd;
    DiffArray w = attention_weights(slice_cols(q, b, e), slice_cols(k, b, e), mask);
    heads.push_back(matmul(w, slice_cols(v, b, e)));
    out.weights.push_back(std::move(w));
  }
  const DiffArray cat = n_heads == 1 ? heads[0] : concat(heads, 1);
  out.output = add(matmul(cat, p.wo), p.bo);
  return out;
}

DiffArray sine_position_embedding(std::size_t grid_h, std::size_t grid_w, std::size_t d_model) {
  // DETR-style: normalized cumulative coordinates, temperature 10000.
  const std::size_t half = d_model / 2;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> out(grid_h * grid_w * d_model);
  auto encode = [&](double coord, double* dst) {
    for (std::size_t i = 0; i < half; ++i) {
      const double dim_t = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / half);
      const double a = coord / dim_t;
      dst[i] = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  };
  for (std::size_t y = 0; y < grid_h; ++y) {
    for (std::size_t x = 0; x < grid_w; ++x) {
      double* row = out.data() + (y * grid_w + x) * d_model;
      encode(static_cast<double>(y + 1) / static_cast<double>(grid_h) * two_pi, row);
      encode(static_cast<double>(x + 1) / static_cast<double>(grid_w) * two_pi, row + half);
    }
  }
  return DiffArray::constant({grid_h * grid_w, d_model}, std::move(out));
}

DiffArray patchify(std::span<const double> grid, std::size_t height, std::size_t width,
                   std::size_t channels, std::size_t patch) {
  if (grid.size() != height * width * channels || height % patch != 0 || width % patch != 0) {
    throw GradError("patchify: grid of " + std::to_string(grid.size()) + " values does not tile " +
                    std::to_string(height) + "x" + std::to_string(width) + "x" +
                    std::to_string(channels) + " by patch " + std::to_string(patch));
  }
  const std::size_t th = height / patch, tw = width / patch, dim = patch * patch * channels;
  std::vector<double> out(th * tw * dim);
  for (std::size_t ty = 0; ty < th; ++ty) {
    for (std::size_t tx = 0; tx < tw; ++tx) {
      double* dst = out.data() + (ty * tw + tx) * dim;
      for (std::size_t py = 0; py < patch; ++py) {
        for (std::size_t px = 0; px < patch; ++px) {
          const std::size_t cell = (ty * patch + py) * width + (tx * patch + px);
          for (std::size_t c = 0; c < channels; ++c) *dst++ = grid[cell * channels + c];
        }
      }
    }
  }
  return DiffArray::constant({th * tw, dim}, std::move(out));
}

std::vector<std::string> layer_param_names(const std::string& prefix, bool cross) {
  std::vector<std::string> names;
  auto attn = [&](const std::string& p) {
    for (const char* s : {"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"}) names.push_back(p + s);
  };
  auto norm = [&](const std::string& p) {
    names.push_back(p + "g");
    names.push_back(p + "b");
  };
  attn(prefix + "sa.");
  norm(prefix + "ln1.");
  if (cross) {
    attn(prefix + "ca.");
    norm(prefix + "ln2.");
  }
  for (const char* s : {"w1", "b1", "w2", "b2"}) names.push_back(prefix + "ffn." + s);
  norm(prefix + (cross ? "ln3." : "ln2."));
  return names;
}

Detector::Detector(ModelConfig cfg, ParamStore params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
}

namespace {

DiffArray xavier(SplitMix64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.uniform(-a, a);
  return DiffArray::parameter({fan_in, fan_out}, std::move(v));
}

DiffArray filled(std::size_t rows, std::size_t cols, double value) {
  return DiffArray::parameter({rows, cols}, std::vector<double>(rows * cols, value));
}

}  // namespace

Detector Detector::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(SplitMix64::derive(seed, 0x1417));
  const std::size_t d = cfg.d_model, f = cfg.ffn_dim;
  ParamStore ps;
  auto add_attn = [&](const std::string& p) {
    for (const char* w : {"q", "k", "v", "o"}) {
      ps.add(p + "w" + w, xavier(rng, d, d));
      ps.add(p + "b" + w, filled(1, d, 0.0));
    }
  };
  auto add_norm = [&](const std::string& p) {
    ps.add(p + "g", filled(1, d, 1.0));
    ps.add(p + "b", filled(1, d, 0.0));
  };
  auto add_ffn = [&](const std::string& p) {
    ps.add(p + "w1", xavier(rng, d, f));
    ps.add(p + "b1", filled(1, f, 0.0));
    ps.add(p + "w2", xavier(rng, f, d));
    ps.add(p + "b2", filled(1, d, 0.0));
  };

  ps.add("input_proj.w", xavier(rng, cfg.d_in(), d));
  ps.add("input_proj.b", filled(1, d, 0.0));
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    add_attn(p + "sa.");
    add_norm(p + "ln1.");
    add_ffn(p + "ffn.");
    add_norm(p + "ln2.");
  }
  {
    std::vector<double> q(cfg.n_queries * d);
    for (double& x : q) x = rng.normal();
    ps.add("query_embed", DiffArray::parameter({cfg.n_queries, d}, std::move(q)));
  }
  for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    add_attn(p + "sa.");
    add_norm(p + "ln1.");
    add_attn(p + "ca.");
    add_norm(p + "ln2.");
    add_ffn(p + "ffn.");
    add_norm(p + "ln3.");
  }
  add_norm("dec_norm.");
  ps.add("class_head.w", xavier(rng, d, cfg.n_classes));
  // Prior of ~0.12 foreground probability keeps early background BCE small.
  ps.add("class_head.b", filled(1, cfg.n_classes, -2.0));
  ps.add("box_head.w1", xavier(rng, d, d));
  ps.add("box_head.b1", filled(1, d, 0.0));
  ps.add("box_head.w2", xavier(rng, d, 4));
  ps.add("box_head.b2", filled(1, 4, 0.0));
  return Detector(cfg, std::move(ps));
}

Detector Detector::frozen() const {
  ParamStore ps;
  for (const auto& [name, p] : params_) ps.add(name, p.detach());
  return Detector(cfg_, std::move(ps));
}

AttentionProjections Detector::attn(const std::string& p) const {
  const auto& g = [&](const char* s) -> const DiffArray& { return params_.get(p + s); };
  return {g("wq"), g("bq"), g("wk"), g("bk"), g("wv"), g("bv"), g("wo"), g("bo")};
}

DiffArray Detector::ln(const std::string& p, const DiffArray& x) const {
  return layer_norm(x, params_.get(p + "g"), params_.get(p + "b"));
}

DiffArray Detector::ffn(const std::string& p, const DiffArray& x) const {
  const DiffArray h = relu(add(matmul(x, params_.get(p + "w1")), params_.get(p + "b1")));
  return add(matmul(h, params_.get(p + "w2")), params_.get(p + "b2"));
}

EncoderOutput Detector::encode(const DiffArray& features) const {
  return encode(features, sine_position_embedding(cfg_.grid_h, cfg_.grid_w, cfg_.d_model));
}

EncoderOutput Detector::encode(const DiffArray& features, const DiffArray& pos) const {
  if (features.rank() != 2 || features.rows() != cfg_.tokens() || features.cols() != cfg_.d_in()) {
    throw GradError("encoder: expected features of shape [" + std::to_string(cfg_.tokens()) + "," +
                    std::to_string(cfg_.d_in()) + "], got " + shape_str(features.shape()));
  }
  if (pos.shape() != Shape{cfg_.tokens(), cfg_.d_model}) {
    throw GradError("encoder: positional embedding shape " + shape_str(pos.shape()));
  }
  DiffArray x = add(matmul(features, params_.get("input_proj.w")), params_.get("input_proj.b"));
  for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    const DiffArray qk = add(x, pos);
    const auto sa = multi_head_attention(qk, qk, x, attn(p + "sa."), cfg_.n_heads);
    x = ln(p + "ln1.", add(x, sa.output));
    x = ln(p + "ln2.", add(x, ffn(p + "ffn.", x)));
  }
  return {x, pos};
}

DecoderOutputs Detector::decode(const EncoderOutput& enc,
                                std::span<const DiffArray> query_groups) const {
  const std::size_t d = cfg_.d_model;
  DecoderOutputs out;
  std::vector<std::size_t> sizes;
  std::size_t total = 0;
  for (const auto& g : query_groups) {
    if (g.rank() != 2 || g.cols() != d) {
      throw GradError("decoder: query group of shape " + shape_str(g.shape()) +
                      " does not match d_model " + std::to_string(d) +
                      " (query transplant requires equal hidden size)");
    }
    out.groups.push_back({total, total + g.rows()});
    sizes.push_back(g.rows());
    total += g.rows();
  }
  if (total == 0) throw GradError("decoder: no queries");
  const DiffArray query_pos = query_groups.size() == 1
                                  ? query_groups[0]
                                  : concat(std::vector<DiffArray>(query_groups.begin(), query_groups.end()), 0);
  const AttnMask mask = build_group_mask(sizes);
  const AttnMask* self_mask = query_groups.size() > 1 ? &mask : nullptr;

  const DiffArray memory_k = add(enc.tokens, enc.pos);
  DiffArray tgt = DiffArray::zeros({total, d});
  for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    const DiffArray qk = add(tgt, query_pos);
    auto sa = multi_head_attention(qk, qk, tgt, attn(p + "sa."), cfg_.n_heads, self_mask);
    tgt = ln(p + "ln1.", add(tgt, sa.output));
    auto ca = multi_head_attention(add(tgt, query_pos), memory_k, enc.tokens, attn(p + "ca."),
                                   cfg_.n_heads);
    tgt = ln(p + "ln2.", add(tgt, ca.output));
    tgt = ln(p + "ln3.", add(tgt, ffn(p + "ffn.", tgt)));

    const DiffArray h = ln("dec_norm.", tgt);
    LayerOutput lo;
    lo.logits = add(matmul(h, params_.get("class_head.w")), params_.get("class_head.b"));
    lo.probs = sigmoid(lo.logits);
    const DiffArray bh = relu(add(matmul(h, params_.get("box_head.w1")), params_.get("box_head.b1")));
    lo.boxes = sigmoid(add(matmul(bh, params_.get("box_head.w2")), params_.get("box_head.b2")));
    out.layers.push_back(std::move(lo));
    out.attention.self_attn.push_back(std::move(sa.weights));
    out.attention.cross_attn.push_back(std::move(ca.weights));
  }
  return out;
}

DecoderOutputs Detector::decode(const EncoderOutput& enc, const DiffArray& student_queries,
                                const std::optional<DiffArray>& aux_queries) const {
  std::vector<DiffArray> groups{student_queries};
  if (aux_queries) groups.push_back(*aux_queries);
  return decode(enc, groups);
}

DecoderOutputs Detector::forward(const DiffArray& features) const {
  return decode(encode(features), query_embed());
}

}  // namespace d3etr::nn
