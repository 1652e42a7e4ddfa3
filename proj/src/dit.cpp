#include "tiledit/dit.hpp"

#include <cmath>

namespace tiledit {

void DitConfig::validate() const {
  if (layers < 1 || heads < 1 || dim < 1 || mlp_ratio < 1 || frames < 1 || height < 1 ||
      width < 1 || channels < 1 || patch < 1) {
    throw std::invalid_argument("dit config: all sizes must be >= 1");
  }
  if (dim % heads != 0) throw std::invalid_argument("dit config: dim must be divisible by heads");
  if (height % patch != 0 || width % patch != 0) {
    throw GeometryError("dit config: height/width must be divisible by patch");
  }
  if (train_steps < 1) throw std::invalid_argument("dit config: train_steps must be >= 1");
}

std::vector<std::pair<std::string, Tensor*>> named_tensors(DitParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out = {
      {"w_in", &p.w_in}, {"b_in", &p.b_in}, {"w_t", &p.w_t}, {"b_t", &p.b_t}};
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.insert(out.end(), {{pre + "ln1_gain", &L.ln1_gain},
                           {pre + "ln1_bias", &L.ln1_bias},
                           {pre + "attn.wq", &L.attn.wq},
                           {pre + "attn.wk", &L.attn.wk},
                           {pre + "attn.wv", &L.attn.wv},
                           {pre + "attn.wo", &L.attn.wo},
                           {pre + "ln2_gain", &L.ln2_gain},
                           {pre + "ln2_bias", &L.ln2_bias},
                           {pre + "w1", &L.w1},
                           {pre + "b1", &L.b1},
                           {pre + "w2", &L.w2},
                           {pre + "b2", &L.b2}});
  }
  out.insert(out.end(), {{"lnf_gain", &p.lnf_gain},
                         {"lnf_bias", &p.lnf_bias},
                         {"w_out", &p.w_out},
                         {"b_out", &p.b_out}});
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const DitParams& p) {
  auto mut = named_tensors(const_cast<DitParams&>(p));
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(std::move(name), t);
  return out;
}

DitParams zeros_like(const DitParams& p) {
  DitParams z = p;
  for (auto& [name, t] : named_tensors(z)) t->fill(0.0);
  return z;
}

std::size_t parameter_count(const DitParams& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors(p)) n += t->size();
  return n;
}

void ToyDiT::set_masks(std::vector<TileMask> assignment) {
  if (assignment.size() != config.layers) {
    throw std::invalid_argument("mask assignment has " + std::to_string(assignment.size()) +
                                " entries for " + std::to_string(config.layers) + " layers");
  }
  for (const auto& mk : assignment) {
    if (mk.frames() != config.frames || mk.tokens_per_frame() != config.tokens_per_frame()) {
      throw GeometryError("mask geometry " + std::to_string(mk.frames()) + "x" +
                          std::to_string(mk.tokens_per_frame()) + " does not match model " +
                          std::to_string(config.frames) + "x" +
                          std::to_string(config.tokens_per_frame()));
    }
  }
  masks = std::move(assignment);
}

void ToyDiT::validate() const {
  config.validate();
  if (params.layers.size() != config.layers || masks.size() != config.layers) {
    throw std::invalid_argument("model: layer count mismatch");
  }
  for (const auto& mk : masks) {
    if (mk.frames() != config.frames || mk.tokens_per_frame() != config.tokens_per_frame()) {
      throw GeometryError("model: mask geometry mismatch");
    }
  }
}

ToyDiT make_toy_dit(const DitConfig& c, Rng& rng) {
  c.validate();
  ToyDiT m;
  m.config = c;
  const double sd_in = 1.0 / std::sqrt(static_cast<double>(c.in_dim()));
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(c.dim));
  const double sd_h = 1.0 / std::sqrt(static_cast<double>(c.hidden()));
  auto& p = m.params;
  p.w_in = rng.normal_tensor({c.in_dim(), c.dim}, sd_in);
  p.b_in = Tensor({c.dim});
  p.w_t = rng.normal_tensor({c.dim, c.dim}, sd_d);
  p.b_t = Tensor({c.dim});
  for (std::size_t l = 0; l < c.layers; ++l) {
    LayerParams L;
    L.ln1_gain = Tensor({c.dim}, 1.0);
    L.ln1_bias = Tensor({c.dim});
    L.attn = make_mha_params(c.dim, c.heads, rng, sd_d);
    L.ln2_gain = Tensor({c.dim}, 1.0);
    L.ln2_bias = Tensor({c.dim});
    L.w1 = rng.normal_tensor({c.dim, c.hidden()}, sd_d);
    L.b1 = Tensor({c.hidden()});
    L.w2 = rng.normal_tensor({c.hidden(), c.dim}, sd_h);
    L.b2 = Tensor({c.dim});
    p.layers.push_back(std::move(L));
  }
  p.lnf_gain = Tensor({c.dim}, 1.0);
  p.lnf_bias = Tensor({c.dim});
  p.w_out = rng.normal_tensor({c.dim, c.in_dim()}, 0.02);
  p.b_out = Tensor({c.in_dim()});
  m.masks.assign(c.layers, make_full_mask(c.frames, c.tokens_per_frame()));
  return m;
}

Tensor positional_embedding(const DitConfig& c) {
  const std::size_t gh = c.height / c.patch, gw = c.width / c.patch;
  const std::size_t chunk = 2 * (c.dim / 6);  // per axis; leftover columns stay 0
  Tensor pos({c.tokens(), c.dim});
  for (std::size_t tok = 0; tok < c.tokens(); ++tok) {
    const TokenCoord tc = token_coord(tok, gh, gw);
    const double coords[3] = {static_cast<double>(tc.frame), static_cast<double>(tc.row),
                              static_cast<double>(tc.col)};
    for (std::size_t axis = 0; axis < 3; ++axis) {
      for (std::size_t i = 0; i < chunk / 2; ++i) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(chunk));
        pos(tok, axis * chunk + 2 * i) = std::sin(coords[axis] * freq);
        pos(tok, axis * chunk + 2 * i + 1) = std::cos(coords[axis] * freq);
      }
    }
  }
  return pos;
}

Tensor timestep_features(int t, std::size_t dim) {
  Tensor f({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
    f(0, 2 * i) = std::sin(static_cast<double>(t) * freq);
    f(0, 2 * i + 1) = std::cos(static_cast<double>(t) * freq);
  }
  return f;
}

DitOutput dit_forward(const ToyDiT& m, const Tensor& tokens, int t, DitCache* cache, Exec exec) {
  const DitConfig& c = m.config;
  if (tokens.rank() != 2 || tokens.rows() != c.tokens() || tokens.cols() != c.in_dim()) {
    throw GeometryError("dit_forward: tokens " + shape_string(tokens.shape()) + ", expected " +
                        shape_string({c.tokens(), c.in_dim()}));
  }
  if (t < 1 || t > c.train_steps) {
    throw std::out_of_range("dit_forward: timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(c.train_steps) + "]");
  }
  if (m.masks.size() != c.layers) throw std::invalid_argument("dit_forward: mask count mismatch");
  const auto& p = m.params;

  const Tensor features = timestep_features(t, c.dim);
  Tensor temb = matmul(features, p.w_t);
  for (std::size_t j = 0; j < c.dim; ++j) temb[j] += p.b_t[j];

  Tensor x = matmul(tokens, p.w_in);
  add_row_broadcast(x, p.b_in);
  add_inplace(x, positional_embedding(c));
  add_row_broadcast(x, temb);

  DitOutput out;
  if (cache) {
    cache->tokens = tokens;
    cache->t = t;
    cache->features = features;
    cache->layers.assign(c.layers, {});
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    const LayerParams& L = p.layers[l];
    const BlockLayout layout = m.masks[l].layout();
    LayerCache local;
    LayerCache& lc = cache ? cache->layers[l] : local;
    lc.x_in = x;
    lc.h1 = layer_norm(x, L.ln1_gain, L.ln1_bias);
    Tensor a = sparse_mha(lc.h1, L.attn, layout, exec, nullptr, &lc.mha);
    add_inplace(x, a);
    lc.x_mid = x;
    lc.h2 = layer_norm(x, L.ln2_gain, L.ln2_bias);
    lc.pre_act = matmul(lc.h2, L.w1);
    add_row_broadcast(lc.pre_act, L.b1);
    lc.act = lc.pre_act;
    for (auto& v : lc.act.values()) v = gelu(v);
    Tensor mlp = matmul(lc.act, L.w2);
    add_row_broadcast(mlp, L.b2);
    add_inplace(x, mlp);
    out.taps.attention.push_back(std::move(a));
    out.taps.mlp.push_back(std::move(mlp));
  }
  out.taps.final_hidden = x;
  Tensor y = layer_norm(x, p.lnf_gain, p.lnf_bias);
  out.eps = matmul(y, p.w_out);
  add_row_broadcast(out.eps, p.b_out);
  if (cache) {
    cache->x_final = std::move(x);
    cache->y_final = std::move(y);
  }
  return out;
}

void dit_backward(const ToyDiT& m, const DitCache& cache, const Tensor& d_eps,
                  const TapGrads* taps, DitParams& g) {
  const DitConfig& c = m.config;
  const auto& p = m.params;
  const auto has = [](const std::vector<Tensor>& v, std::size_t l) {
    return l < v.size() && v[l].size() > 0;
  };

  add_inplace(g.w_out, matmul_tn(cache.y_final, d_eps));
  add_inplace(g.b_out, sum_rows(d_eps));
  const Tensor dy = matmul_nt(d_eps, p.w_out);
  auto lnf = layer_norm_backward(cache.x_final, p.lnf_gain, dy);
  add_inplace(g.lnf_gain, lnf.dgain);
  add_inplace(g.lnf_bias, lnf.dbias);
  Tensor dx = std::move(lnf.dx);
  if (taps && taps->final_hidden.size() > 0) add_inplace(dx, taps->final_hidden);

  for (std::size_t l = c.layers; l-- > 0;) {
    const LayerParams& L = p.layers[l];
    LayerParams& G = g.layers[l];
    const LayerCache& lc = cache.layers[l];

    // x_out = x_mid + mlp
    Tensor dmlp = dx;
    if (taps && has(taps->mlp, l)) add_inplace(dmlp, taps->mlp[l]);
    add_inplace(G.w2, matmul_tn(lc.act, dmlp));
    add_inplace(G.b2, sum_rows(dmlp));
    Tensor dpre = matmul_nt(dmlp, L.w2);
    for (std::size_t i = 0; i < dpre.size(); ++i) dpre[i] *= gelu_grad(lc.pre_act[i]);
    add_inplace(G.w1, matmul_tn(lc.h2, dpre));
    add_inplace(G.b1, sum_rows(dpre));
    const Tensor dh2 = matmul_nt(dpre, L.w1);
    auto ln2 = layer_norm_backward(lc.x_mid, L.ln2_gain, dh2);
    add_inplace(G.ln2_gain, ln2.dgain);
    add_inplace(G.ln2_bias, ln2.dbias);
    add_inplace(dx, ln2.dx);

    // x_mid = x_in + attn
    Tensor dattn = dx;
    if (taps && has(taps->attention, l)) add_inplace(dattn, taps->attention[l]);
    const MhaGrads mg = mha_backward(lc.h1, L.attn, m.masks[l].layout(), dattn, &lc.mha);
    add_inplace(G.attn.wq, mg.dwq);
    add_inplace(G.attn.wk, mg.dwk);
    add_inplace(G.attn.wv, mg.dwv);
    add_inplace(G.attn.wo, mg.dwo);
    auto ln1 = layer_norm_backward(lc.x_in, L.ln1_gain, mg.dx);
    add_inplace(G.ln1_gain, ln1.dgain);
    add_inplace(G.ln1_bias, ln1.dbias);
    add_inplace(dx, ln1.dx);
  }

  add_inplace(g.w_in, matmul_tn(cache.tokens, dx));
  const Tensor dtemb = sum_rows(dx);
  add_inplace(g.b_in, dtemb);
  add_inplace(g.w_t, matmul_tn(cache.features, dtemb.reshaped({1, c.dim})));
  add_inplace(g.b_t, dtemb);
}

EpsPredictor predictor(const ToyDiT& m, Exec exec) {
  return [&m, exec](const Tensor& z, int t) { return dit_forward(m, z, t, nullptr, exec).eps; };
}

VideoLatent ddim_sample(const ToyDiT& m, const DiffusionSchedule& s, int num_steps, Rng& rng) {
  const auto& c = m.config;
  const Tensor z = ddim_sample_tokens(predictor(m), s, c.tokens(), c.in_dim(), num_steps, rng);
  return unpatchify(z, c.frames, c.height, c.width, c.channels, c.patch);
}

}  // namespace tiledit
