#include "tiledit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <omp.h>

namespace tiledit {

void MhaParams::validate() const {
  const std::size_t d = dim();
  if (heads == 0 || d == 0 || d % heads != 0) {
    throw DimensionError("mha: model dim " + std::to_string(d) + " not divisible by heads " +
                         std::to_string(heads));
  }
  for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
    if (w->shape() != std::vector<std::size_t>{d, d}) {
      throw DimensionError("mha: projection has shape " + shape_string(w->shape()) + ", expected " +
                           shape_string({d, d}));
    }
  }
}

MhaParams make_mha_params(std::size_t dim, std::size_t heads, Rng& rng, double stddev) {
  MhaParams p;
  p.heads = heads;
  p.wq = rng.normal_tensor({dim, dim}, stddev);
  p.wk = rng.normal_tensor({dim, dim}, stddev);
  p.wv = rng.normal_tensor({dim, dim}, stddev);
  p.wo = rng.normal_tensor({dim, dim}, stddev);
  p.validate();
  return p;
}

MhaParams identity_mha_params(std::size_t dim, std::size_t heads) {
  MhaParams p;
  p.heads = heads;
  Tensor eye({dim, dim});
  for (std::size_t i = 0; i < dim; ++i) eye(i, i) = 1.0;
  p.wq = p.wk = p.wv = p.wo = eye;
  p.validate();
  return p;
}

namespace kernels {

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
               std::size_t n) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: Q/K/V shapes differ: " + shape_string(q.shape()) + ", " +
                         shape_string(k.shape()) + ", " + shape_string(v.shape()));
  }
  if (heads == 0 || q.cols() % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q.cols()) +
                         " not divisible by heads " + std::to_string(heads));
  }
  if (q.rows() != n) {
    throw GeometryError("attention: sequence has " + std::to_string(q.rows()) +
                        " tokens, mask expects " + std::to_string(n));
  }
}

// Scores of one query row against the listed key ranges, written contiguously
// into buf in ascending key order. Returns the number of keys.
std::size_t row_scores(const double* qrow, const Tensor& k, std::size_t col0, std::size_t dh,
                       const std::vector<TokenRange>& keys, double scale, double* buf) {
  const std::size_t d = k.cols();
  const double* kd = k.storage().data();
  std::size_t c = 0;
  for (const auto& r : keys) {
    for (std::size_t j = r.begin; j < r.end; ++j) {
      const double* krow = kd + j * d + col0;
      double acc = 0.0;
      for (std::size_t t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
      buf[c++] = acc * scale;
    }
  }
  return c;
}

// In-place softmax over buf[0..count).
void softmax_inplace(double* buf, std::size_t count) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < count; ++c) mx = std::max(mx, buf[c]);
  double total = 0.0;
  for (std::size_t c = 0; c < count; ++c) {
    buf[c] = std::exp(buf[c] - mx);
    total += buf[c];
  }
  const double inv = 1.0 / total;
  for (std::size_t c = 0; c < count; ++c) buf[c] *= inv;
}

std::size_t max_keys(const BlockLayout& layout) {
  std::size_t m = 0;
  for (const auto& b : layout.blocks) {
    std::size_t c = 0;
    for (const auto& r : b.keys) c += r.size();
    m = std::max(m, c);
  }
  return m;
}

}  // namespace

void block_sparse_attention_heads(const Tensor& q, const Tensor& k, const Tensor& v,
                                  std::size_t heads, std::size_t head_begin, std::size_t head_end,
                                  const BlockLayout& layout, Tensor& out, Exec exec,
                                  AttentionStats* stats) {
  check_qkv(q, k, v, heads, layout.tokens);
  if (head_begin > head_end || head_end > heads) {
    throw std::invalid_argument("attention: head range out of bounds");
  }
  if (out.shape() != q.shape()) out = Tensor(q.shape());
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t width = max_keys(layout);
  const auto nblocks = static_cast<std::ptrdiff_t>(layout.blocks.size());
  const double* qd = q.storage().data();
  const double* vd = v.storage().data();
  double* od = out.storage().data();
  std::size_t visited = 0;
  std::size_t madds = 0;

#pragma omp parallel if (exec == Exec::parallel) reduction(+ : visited, madds)
  {
    std::vector<double> buf(width);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
      const QueryBlock& qb = layout.blocks[static_cast<std::size_t>(b)];
      visited += qb.keys.size();
      for (std::size_t h = head_begin; h < head_end; ++h) {
        const std::size_t col0 = h * dh;
        for (std::size_t i = qb.queries.begin; i < qb.queries.end; ++i) {
          const std::size_t count = row_scores(qd + i * d + col0, k, col0, dh, qb.keys, scale,
                                               buf.data());
          softmax_inplace(buf.data(), count);
          double* orow = od + i * d + col0;
          for (std::size_t t = 0; t < dh; ++t) orow[t] = 0.0;
          std::size_t c = 0;
          for (const auto& r : qb.keys) {
            for (std::size_t j = r.begin; j < r.end; ++j) {
              const double w = buf[c++];
              const double* vrow = vd + j * d + col0;
              for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vrow[t];
            }
          }
          madds += 2 * count * dh;
        }
      }
    }
  }
  if (stats) {
    stats->visited_blocks += visited;
    stats->multiply_adds += madds;
  }
}

void block_sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const BlockLayout& layout, Tensor& out, Exec exec,
                            AttentionStats* stats) {
  block_sparse_attention_heads(q, k, v, heads, 0, heads, layout, out, exec, stats);
}

void block_sparse_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const BlockLayout& layout,
                                     const Tensor& dout, Tensor& dq, Tensor& dk, Tensor& dv) {
  check_qkv(q, k, v, heads, layout.tokens);
  if (dout.shape() != q.shape()) {
    throw DimensionError("attention backward: upstream " + shape_string(dout.shape()) +
                         " vs " + shape_string(q.shape()));
  }
  dq = Tensor(q.shape());
  dk = Tensor(q.shape());
  dv = Tensor(q.shape());
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t width = max_keys(layout);
  std::vector<double> p(width), dp(width);
  const double* qd = q.storage().data();
  const double* kd = k.storage().data();
  const double* vd = v.storage().data();
  const double* god = dout.storage().data();

  for (const auto& qb : layout.blocks) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col0 = h * dh;
      for (std::size_t i = qb.queries.begin; i < qb.queries.end; ++i) {
        const double* qrow = qd + i * d + col0;
        const double* gorow = god + i * d + col0;
        const std::size_t count = row_scores(qrow, k, col0, dh, qb.keys, scale, p.data());
        softmax_inplace(p.data(), count);
        // dp_j = dO_i · V_j ; D = Σ p_j dp_j
        double dsum = 0.0;
        std::size_t c = 0;
        for (const auto& r : qb.keys) {
          for (std::size_t j = r.begin; j < r.end; ++j) {
            const double* vrow = vd + j * d + col0;
            double acc = 0.0;
            for (std::size_t t = 0; t < dh; ++t) acc += gorow[t] * vrow[t];
            dp[c] = acc;
            dsum += p[c] * acc;
            ++c;
          }
        }
        double* dqrow = dq.storage().data() + i * d + col0;
        c = 0;
        for (const auto& r : qb.keys) {
          for (std::size_t j = r.begin; j < r.end; ++j) {
            const double ds = p[c] * (dp[c] - dsum) * scale;
            const double* krow = kd + j * d + col0;
            double* dkrow = dk.storage().data() + j * d + col0;
            double* dvrow = dv.storage().data() + j * d + col0;
            for (std::size_t t = 0; t < dh; ++t) {
              dqrow[t] += ds * krow[t];
              dkrow[t] += ds * qrow[t];
              dvrow[t] += p[c] * gorow[t];
            }
            ++c;
          }
        }
      }
    }
  }
}

void masked_dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const std::vector<bool>& allowed, Tensor& out) {
  const std::size_t n = q.rows();
  check_qkv(q, k, v, heads, n);
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  out = Tensor(q.shape());
  std::optional<std::vector<bool>> mask;
  if (!allowed.empty()) mask = allowed;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor scores({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += q(i, h * dh + t) * k(j, h * dh + t);
        scores(i, j) = acc * scale;
      }
    const Tensor probs = softmax_rows(scores, mask);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double w = probs(i, j);
        if (w == 0.0) continue;
        for (std::size_t t = 0; t < dh; ++t) out(i, h * dh + t) += w * v(j, h * dh + t);
      }
  }
}

void masked_dense_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const std::vector<bool>& allowed,
                                     const Tensor& dout, Tensor& dq, Tensor& dk, Tensor& dv) {
  const std::size_t n = q.rows();
  check_qkv(q, k, v, heads, n);
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Tensor(q.shape());
  dk = Tensor(q.shape());
  dv = Tensor(q.shape());
  std::optional<std::vector<bool>> mask;
  if (!allowed.empty()) mask = allowed;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor scores({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += q(i, h * dh + t) * k(j, h * dh + t);
        scores(i, j) = acc * scale;
      }
    const Tensor probs = softmax_rows(scores, mask);
    Tensor dprobs({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += dout(i, h * dh + t) * v(j, h * dh + t);
        dprobs(i, j) = acc;
      }
    for (std::size_t i = 0; i < n; ++i) {
      double dsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) dsum += probs(i, j) * dprobs(i, j);
      for (std::size_t j = 0; j < n; ++j) {
        const double ds = probs(i, j) * (dprobs(i, j) - dsum) * scale;
        for (std::size_t t = 0; t < dh; ++t) {
          dq(i, h * dh + t) += ds * k(j, h * dh + t);
          dk(j, h * dh + t) += ds * q(i, h * dh + t);
          dv(j, h * dh + t) += probs(i, j) * dout(i, h * dh + t);
        }
      }
    }
  }
}

}  // namespace kernels

std::vector<bool> allowed_matrix(const BlockLayout& layout) {
  const std::size_t n = layout.tokens;
  std::vector<bool> allowed(n * n, false);
  for (const auto& qb : layout.blocks)
    for (std::size_t i = qb.queries.begin; i < qb.queries.end; ++i)
      for (const auto& r : qb.keys)
        for (std::size_t j = r.begin; j < r.end; ++j) allowed[i * n + j] = true;
  return allowed;
}

namespace {

void check_input(const Tensor& x, const MhaParams& p) {
  p.validate();
  if (x.rank() != 2 || x.cols() != p.dim()) {
    throw DimensionError("mha: input " + shape_string(x.shape()) + " does not match model dim " +
                         std::to_string(p.dim()));
  }
}

MhaGrads project_backward(const Tensor& x, const MhaParams& p, const Tensor& o,
                          const Tensor& upstream, const Tensor& dq, const Tensor& dk,
                          const Tensor& dv) {
  MhaGrads g;
  g.dwo = matmul_tn(o, upstream);
  g.dwq = matmul_tn(x, dq);
  g.dwk = matmul_tn(x, dk);
  g.dwv = matmul_tn(x, dv);
  g.dx = matmul_nt(dq, p.wq);
  add_inplace(g.dx, matmul_nt(dk, p.wk));
  add_inplace(g.dx, matmul_nt(dv, p.wv));
  return g;
}

}  // namespace

Tensor dense_mha(const Tensor& x, const MhaParams& p) {
  check_input(x, p);
  const Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  Tensor o;
  kernels::masked_dense_attention(q, k, v, p.heads, {}, o);
  return matmul(o, p.wo);
}

Tensor masked_dense_mha(const Tensor& x, const MhaParams& p, const BlockLayout& layout) {
  check_input(x, p);
  if (x.rows() != layout.tokens) {
    throw GeometryError("mha: sequence has " + std::to_string(x.rows()) +
                        " tokens, mask expects " + std::to_string(layout.tokens));
  }
  const Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  Tensor o;
  kernels::masked_dense_attention(q, k, v, p.heads, allowed_matrix(layout), o);
  return matmul(o, p.wo);
}

Tensor sparse_mha(const Tensor& x, const MhaParams& p, const BlockLayout& layout, Exec exec,
                  AttentionStats* stats, MhaCache* cache) {
  check_input(x, p);
  if (x.rows() != layout.tokens) {
    throw GeometryError("mha: sequence has " + std::to_string(x.rows()) +
                        " tokens, mask expects " + std::to_string(layout.tokens));
  }
  MhaCache local;
  MhaCache& c = cache ? *cache : local;
  c.q = matmul(x, p.wq);
  c.k = matmul(x, p.wk);
  c.v = matmul(x, p.wv);
  kernels::block_sparse_attention(c.q, c.k, c.v, p.heads, layout, c.o, exec, stats);
  return matmul(c.o, p.wo);
}

Tensor sparse_mha(const Tensor& x, const MhaParams& p, const TileMask& mask, Exec exec,
                  AttentionStats* stats) {
  return sparse_mha(x, p, mask.layout(), exec, stats);
}

Tensor sparse_mha(const Tensor& x, const MhaParams& p, const MmDitMask& mask, Exec exec,
                  AttentionStats* stats) {
  return sparse_mha(x, p, mask.layout(), exec, stats);
}

MhaGrads mha_backward(const Tensor& x, const MhaParams& p, const BlockLayout& layout,
                      const Tensor& upstream, const MhaCache* cache) {
  MhaCache local;
  if (!cache) {
    sparse_mha(x, p, layout, Exec::serial, nullptr, &local);
    cache = &local;
  }
  if (upstream.shape() != x.shape()) {
    throw DimensionError("mha backward: upstream " + shape_string(upstream.shape()) + " vs " +
                         shape_string(x.shape()));
  }
  const Tensor dO = matmul_nt(upstream, p.wo);
  Tensor dq, dk, dv;
  kernels::block_sparse_attention_backward(cache->q, cache->k, cache->v, p.heads, layout, dO, dq,
                                           dk, dv);
  return project_backward(x, p, cache->o, upstream, dq, dk, dv);
}

MhaGrads masked_dense_mha_backward(const Tensor& x, const MhaParams& p, const BlockLayout& layout,
                                   const Tensor& upstream) {
  check_input(x, p);
  const Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  const auto allowed = allowed_matrix(layout);
  Tensor o;
  kernels::masked_dense_attention(q, k, v, p.heads, allowed, o);
  const Tensor dO = matmul_nt(upstream, p.wo);
  Tensor dq, dk, dv;
  kernels::masked_dense_attention_backward(q, k, v, p.heads, allowed, dO, dq, dk, dv);
  return project_backward(x, p, o, upstream, dq, dk, dv);
}

std::vector<Tensor> attention_weights(const Tensor& x, const MhaParams& p,
                                      const BlockLayout& layout) {
  check_input(x, p);
  const std::size_t n = x.rows();
  if (n != layout.tokens) throw GeometryError("attention_weights: token count mismatch");
  const Tensor q = matmul(x, p.wq), k = matmul(x, p.wk);
  const std::size_t dh = p.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto allowed = allowed_matrix(layout);
  std::vector<Tensor> maps;
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor scores({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += q(i, h * dh + t) * k(j, h * dh + t);
        scores(i, j) = acc * scale;
      }
    maps.push_back(softmax_rows(scores, allowed));
  }
  return maps;
}

}  // namespace tiledit
