#include "egm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "egm/rng.hpp"

namespace egm {

namespace {

using nlohmann::json;

constexpr double kLnEps = 1e-5;

template <class S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}

template <class S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  const S pdf = S(0.3989422804014327) * std::exp(S(-0.5) * x * x);
  return cdf + x * pdf;
}

// Row-wise layer norm; xhat and rstd are kept for the backward pass.
template <class S>
void layer_norm(const Matrix<S>& x, const Vector<S>& gain, const Vector<S>& bias, Matrix<S>& out,
                Matrix<S>& xhat, Vector<S>& rstd) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  out.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S rs = S(1) / std::sqrt(var + S(kLnEps));
    rstd[r] = rs;
    xhat.row(r) = (x.row(r).array() - mu) * rs;
    out.row(r) = xhat.row(r).cwiseProduct(gain.transpose()) + bias.transpose();
  }
}

// Returns d(loss)/d(x) and accumulates the gain/bias gradients.
template <class S>
Matrix<S> layer_norm_backward(const Matrix<S>& d_out, const Matrix<S>& xhat, const Vector<S>& rstd,
                              const Vector<S>& gain, Vector<S>& d_gain, Vector<S>& d_bias) {
  const Eigen::Index rows = d_out.rows();
  const Eigen::Index cols = d_out.cols();
  Matrix<S> d_x(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto d_xhat = d_out.row(r).cwiseProduct(gain.transpose());
    const S m1 = d_xhat.mean();
    const S m2 = d_xhat.cwiseProduct(xhat.row(r)).mean();
    d_x.row(r) = (d_xhat.array() - m1 - xhat.row(r).array() * m2) * rstd[r];
  }
  d_gain += (d_out.cwiseProduct(xhat)).colwise().sum().transpose();
  d_bias += d_out.colwise().sum().transpose();
  return d_x;
}

template <class S>
void fill_uniform(Matrix<S>& m, Rng& rng, double bound) {
  S* p = m.data();
  for (std::int64_t i = 0; i < m.size(); ++i)
    p[i] = static_cast<S>((rng.uniform() * 2.0 - 1.0) * bound);
}

template <class S>
Matrix<S> xavier(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  Matrix<S> m(fan_in, fan_out);
  fill_uniform(m, rng, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  return m;
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1) throw DataError("model config: vocab_size must be positive");
  if (d_model < 1) throw DataError("model config: d_model must be positive");
  if (n_layers < 1) throw DataError("model config: n_layers must be positive");
  if (n_heads < 1) throw DataError("model config: n_heads must be positive");
  if (d_model % n_heads != 0) throw DataError("model config: d_model must be divisible by n_heads");
  if (d_ffn < 1) throw DataError("model config: d_ffn must be positive");
  if (max_seq_len < 1) throw DataError("model config: max_seq_len must be positive");
  if (window_size < 1 || window_size > max_seq_len)
    throw DataError("model config: window_size must be in [1, max_seq_len]");
  for (int g : global_positions)
    if (g < 0 || g >= max_seq_len)
      throw DataError("model config: global position " + std::to_string(g) + " out of range");
  if (random_blocks_per_row < 0)
    throw DataError("model config: random_blocks_per_row must be non-negative");
}

std::string config_to_json_string(const ModelConfig& config) {
  json j;
  j["vocab_size"] = config.vocab_size;
  j["d_model"] = config.d_model;
  j["n_layers"] = config.n_layers;
  j["n_heads"] = config.n_heads;
  j["d_ffn"] = config.d_ffn;
  j["max_seq_len"] = config.max_seq_len;
  j["window_size"] = config.window_size;
  j["global_positions"] = config.global_positions;
  j["random_blocks_per_row"] = config.random_blocks_per_row;
  j["seed"] = config.seed;
  j["tie_output"] = config.tie_output;
  return j.dump();
}

ModelConfig config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model config JSON: ") + e.what());
  }
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.window_size = j.at("window_size").get<int>();
  c.global_positions = j.at("global_positions").get<std::vector<int>>();
  c.random_blocks_per_row = j.at("random_blocks_per_row").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.tie_output = j.at("tie_output").get<bool>();
  c.validate();
  return c;
}

AttentionPattern attention_pattern(const ModelConfig& config, int seq_len, std::uint64_t seed) {
  config.validate();
  if (seq_len < 1 || seq_len > config.max_seq_len)
    throw DataError("attention pattern: seq_len " + std::to_string(seq_len) +
                    " exceeds max_seq_len " + std::to_string(config.max_seq_len));

  std::vector<int> globals;
  for (int g : config.global_positions)
    if (g < seq_len) globals.push_back(g);
  std::sort(globals.begin(), globals.end());
  globals.erase(std::unique(globals.begin(), globals.end()), globals.end());

  const int half = config.window_size / 2;
  AttentionPattern pat;
  pat.seq_len = seq_len;
  pat.admits.resize(static_cast<std::size_t>(seq_len));

  Rng rng(derive_seed(seed, "pattern"));
  for (int p = 0; p < seq_len; ++p) {
    auto& row = pat.admits[static_cast<std::size_t>(p)];
    if (std::binary_search(globals.begin(), globals.end(), p)) {
      row.resize(static_cast<std::size_t>(seq_len));
      for (int i = 0; i < seq_len; ++i) row[static_cast<std::size_t>(i)] = i;
      if (config.random_blocks_per_row > 0)
        for (int r = 0; r < config.random_blocks_per_row; ++r) rng.uniform_int(static_cast<std::uint64_t>(seq_len));
      continue;
    }
    const int lo = std::max(0, p - half);
    const int hi = std::min(seq_len - 1, p + half);
    row.reserve(static_cast<std::size_t>(hi - lo + 1) + globals.size() +
                static_cast<std::size_t>(config.random_blocks_per_row));
    for (int i = lo; i <= hi; ++i) row.push_back(i);
    row.insert(row.end(), globals.begin(), globals.end());
    for (int r = 0; r < config.random_blocks_per_row; ++r)
      row.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(seq_len))));
    std::sort(row.begin(), row.end());
    row.erase(std::unique(row.begin(), row.end()), row.end());
  }
  return pat;
}

template <class S>
std::vector<ParamRef<S>> parameters(ModelState<S>& state) {
  std::vector<ParamRef<S>> out;
  const auto add = [&out](const std::string& name, auto& tensor) {
    out.push_back({name, tensor.data(), static_cast<std::int64_t>(tensor.size())});
  };
  add("token_embed", state.token_embed);
  add("pos_embed", state.pos_embed);
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    auto& p = state.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    add(pre + "ln1_gain", p.ln1_gain);
    add(pre + "ln1_bias", p.ln1_bias);
    add(pre + "wq", p.wq);
    add(pre + "bq", p.bq);
    add(pre + "wk", p.wk);
    add(pre + "bk", p.bk);
    add(pre + "wv", p.wv);
    add(pre + "bv", p.bv);
    add(pre + "wo", p.wo);
    add(pre + "bo", p.bo);
    add(pre + "ln2_gain", p.ln2_gain);
    add(pre + "ln2_bias", p.ln2_bias);
    add(pre + "w_ffn1", p.w_ffn1);
    add(pre + "b_ffn1", p.b_ffn1);
    add(pre + "w_ffn2", p.w_ffn2);
    add(pre + "b_ffn2", p.b_ffn2);
  }
  add("lnf_gain", state.lnf_gain);
  add("lnf_bias", state.lnf_bias);
  if (!state.config.tie_output) add("w_out", state.w_out);
  add("b_out", state.b_out);
  return out;
}

template <class S>
std::vector<ParamRef<S>> parameters(Gradients<S>& grads, const ModelConfig& config) {
  // Same declared order as the state enumeration.
  std::vector<ParamRef<S>> out;
  const auto add = [&out](const std::string& name, auto& tensor) {
    out.push_back({name, tensor.data(), static_cast<std::int64_t>(tensor.size())});
  };
  add("token_embed", grads.token_embed);
  add("pos_embed", grads.pos_embed);
  for (std::size_t l = 0; l < grads.layers.size(); ++l) {
    auto& p = grads.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    add(pre + "ln1_gain", p.ln1_gain);
    add(pre + "ln1_bias", p.ln1_bias);
    add(pre + "wq", p.wq);
    add(pre + "bq", p.bq);
    add(pre + "wk", p.wk);
    add(pre + "bk", p.bk);
    add(pre + "wv", p.wv);
    add(pre + "bv", p.bv);
    add(pre + "wo", p.wo);
    add(pre + "bo", p.bo);
    add(pre + "ln2_gain", p.ln2_gain);
    add(pre + "ln2_bias", p.ln2_bias);
    add(pre + "w_ffn1", p.w_ffn1);
    add(pre + "b_ffn1", p.b_ffn1);
    add(pre + "w_ffn2", p.w_ffn2);
    add(pre + "b_ffn2", p.b_ffn2);
  }
  add("lnf_gain", grads.lnf_gain);
  add("lnf_bias", grads.lnf_bias);
  if (!config.tie_output) add("w_out", grads.w_out);
  add("b_out", grads.b_out);
  return out;
}

template <class S>
Gradients<S> make_gradients(const ModelConfig& config) {
  config.validate();
  Gradients<S> g;
  g.token_embed = Matrix<S>::Zero(config.vocab_size, config.d_model);
  g.pos_embed = Matrix<S>::Zero(config.max_seq_len, config.d_model);
  g.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& p : g.layers) {
    p.wq = Matrix<S>::Zero(config.d_model, config.d_model);
    p.wk = Matrix<S>::Zero(config.d_model, config.d_model);
    p.wv = Matrix<S>::Zero(config.d_model, config.d_model);
    p.wo = Matrix<S>::Zero(config.d_model, config.d_model);
    p.bq = Vector<S>::Zero(config.d_model);
    p.bk = Vector<S>::Zero(config.d_model);
    p.bv = Vector<S>::Zero(config.d_model);
    p.bo = Vector<S>::Zero(config.d_model);
    p.ln1_gain = Vector<S>::Zero(config.d_model);
    p.ln1_bias = Vector<S>::Zero(config.d_model);
    p.ln2_gain = Vector<S>::Zero(config.d_model);
    p.ln2_bias = Vector<S>::Zero(config.d_model);
    p.w_ffn1 = Matrix<S>::Zero(config.d_model, config.d_ffn);
    p.b_ffn1 = Vector<S>::Zero(config.d_ffn);
    p.w_ffn2 = Matrix<S>::Zero(config.d_ffn, config.d_model);
    p.b_ffn2 = Vector<S>::Zero(config.d_model);
  }
  g.lnf_gain = Vector<S>::Zero(config.d_model);
  g.lnf_bias = Vector<S>::Zero(config.d_model);
  if (!config.tie_output) g.w_out = Matrix<S>::Zero(config.d_model, config.vocab_size);
  g.b_out = Vector<S>::Zero(config.vocab_size);
  g.d_embeddings.resize(0, 0);
  return g;
}

template <class S>
void zero_gradients(Gradients<S>& grads) {
  grads.token_embed.setZero();
  grads.pos_embed.setZero();
  for (auto& p : grads.layers) {
    p.wq.setZero();
    p.wk.setZero();
    p.wv.setZero();
    p.wo.setZero();
    p.bq.setZero();
    p.bk.setZero();
    p.bv.setZero();
    p.bo.setZero();
    p.ln1_gain.setZero();
    p.ln1_bias.setZero();
    p.ln2_gain.setZero();
    p.ln2_bias.setZero();
    p.w_ffn1.setZero();
    p.b_ffn1.setZero();
    p.w_ffn2.setZero();
    p.b_ffn2.setZero();
  }
  grads.lnf_gain.setZero();
  grads.lnf_bias.setZero();
  if (grads.w_out.size() > 0) grads.w_out.setZero();
  grads.b_out.setZero();
  grads.d_embeddings.resize(0, 0);
}

template <class S>
ModelState<S> init_state(const ModelConfig& config) {
  config.validate();
  ModelState<S> state;
  state.config = config;
  Rng rng(derive_seed(config.seed, "init"));

  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  state.token_embed.resize(config.vocab_size, config.d_model);
  fill_uniform(state.token_embed, rng, embed_bound);
  state.pos_embed.resize(config.max_seq_len, config.d_model);
  fill_uniform(state.pos_embed, rng, embed_bound);

  state.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& p : state.layers) {
    p.ln1_gain = Vector<S>::Ones(config.d_model);
    p.ln1_bias = Vector<S>::Zero(config.d_model);
    p.wq = xavier<S>(config.d_model, config.d_model, rng);
    p.bq = Vector<S>::Zero(config.d_model);
    p.wk = xavier<S>(config.d_model, config.d_model, rng);
    p.bk = Vector<S>::Zero(config.d_model);
    p.wv = xavier<S>(config.d_model, config.d_model, rng);
    p.bv = Vector<S>::Zero(config.d_model);
    p.wo = xavier<S>(config.d_model, config.d_model, rng);
    p.bo = Vector<S>::Zero(config.d_model);
    p.ln2_gain = Vector<S>::Ones(config.d_model);
    p.ln2_bias = Vector<S>::Zero(config.d_model);
    p.w_ffn1 = xavier<S>(config.d_model, config.d_ffn, rng);
    p.b_ffn1 = Vector<S>::Zero(config.d_ffn);
    p.w_ffn2 = xavier<S>(config.d_ffn, config.d_model, rng);
    p.b_ffn2 = Vector<S>::Zero(config.d_model);
  }
  state.lnf_gain = Vector<S>::Ones(config.d_model);
  state.lnf_bias = Vector<S>::Zero(config.d_model);
  if (!config.tie_output) state.w_out = xavier<S>(config.d_model, config.vocab_size, rng);
  state.b_out = Vector<S>::Zero(config.vocab_size);
  return state;
}

template <class To, class From>
ModelState<To> cast_state(const ModelState<From>& state) {
  ModelState<To> out;
  out.config = state.config;
  out.token_embed = state.token_embed.template cast<To>();
  out.pos_embed = state.pos_embed.template cast<To>();
  out.layers.resize(state.layers.size());
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const auto& a = state.layers[l];
    auto& b = out.layers[l];
    b.wq = a.wq.template cast<To>();
    b.wk = a.wk.template cast<To>();
    b.wv = a.wv.template cast<To>();
    b.wo = a.wo.template cast<To>();
    b.bq = a.bq.template cast<To>();
    b.bk = a.bk.template cast<To>();
    b.bv = a.bv.template cast<To>();
    b.bo = a.bo.template cast<To>();
    b.ln1_gain = a.ln1_gain.template cast<To>();
    b.ln1_bias = a.ln1_bias.template cast<To>();
    b.ln2_gain = a.ln2_gain.template cast<To>();
    b.ln2_bias = a.ln2_bias.template cast<To>();
    b.w_ffn1 = a.w_ffn1.template cast<To>();
    b.b_ffn1 = a.b_ffn1.template cast<To>();
    b.w_ffn2 = a.w_ffn2.template cast<To>();
    b.b_ffn2 = a.b_ffn2.template cast<To>();
  }
  out.lnf_gain = state.lnf_gain.template cast<To>();
  out.lnf_bias = state.lnf_bias.template cast<To>();
  if (state.w_out.size() > 0) out.w_out = state.w_out.template cast<To>();
  out.b_out = state.b_out.template cast<To>();
  return out;
}

template <class S>
Matrix<S> embed_tokens(const ModelState<S>& state, const std::vector<int>& ids) {
  Matrix<S> e(static_cast<Eigen::Index>(ids.size()), state.config.d_model);
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (ids[p] < 0 || ids[p] >= state.config.vocab_size)
      throw DataError("token id " + std::to_string(ids[p]) + " at position " + std::to_string(p) +
                      " is outside the vocabulary");
    e.row(static_cast<Eigen::Index>(p)) = state.token_embed.row(ids[p]);
  }
  return e;
}

template <class S>
Matrix<S> forward_from_embeddings(const ModelState<S>& state, const Matrix<S>& token_embeddings,
                                  const AttentionPattern& pattern, Activations<S>* acts,
                                  ForwardTrace<S>* trace) {
  const ModelConfig& cfg = state.config;
  const Eigen::Index n = token_embeddings.rows();
  if (token_embeddings.cols() != cfg.d_model)
    throw DataError("embedding width " + std::to_string(token_embeddings.cols()) +
                    " does not match d_model " + std::to_string(cfg.d_model));
  if (n > cfg.max_seq_len)
    throw DataError("sequence length " + std::to_string(n) + " exceeds max_seq_len");
  if (pattern.seq_len != static_cast<int>(n))
    throw DataError("attention pattern was built for a different sequence length");

  const int n_heads = cfg.n_heads;
  const int dh = cfg.d_model / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Matrix<S> x = token_embeddings + state.pos_embed.topRows(n);
  if (acts) {
    acts->pattern = &pattern;
    acts->ids.clear();
    acts->x0 = x;
    acts->layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerActs<S>{});
  }
  if (trace) {
    trace->pattern = pattern;
    trace->attn.assign(static_cast<std::size_t>(cfg.n_layers), {});
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams<S>& P = state.layers[static_cast<std::size_t>(l)];
    Matrix<S> xhat1, a;
    Vector<S> rstd1;
    layer_norm(x, P.ln1_gain, P.ln1_bias, a, xhat1, rstd1);

    Matrix<S> q = (a * P.wq).rowwise() + P.bq.transpose();
    Matrix<S> k = (a * P.wk).rowwise() + P.bk.transpose();
    Matrix<S> v = (a * P.wv).rowwise() + P.bv.transpose();

    Matrix<S> ctx(n, cfg.d_model);
    std::vector<std::vector<Vector<S>>> attn_w(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
      auto& rows = attn_w[static_cast<std::size_t>(h)];
      rows.resize(static_cast<std::size_t>(n));
      const int off = h * dh;
      for (Eigen::Index p = 0; p < n; ++p) {
        const auto& adm = pattern.admits[static_cast<std::size_t>(p)];
        Vector<S>& w = rows[static_cast<std::size_t>(p)];
        w.resize(static_cast<Eigen::Index>(adm.size()));
        const auto qp = q.row(p).segment(off, dh);
        for (std::size_t j = 0; j < adm.size(); ++j)
          w[static_cast<Eigen::Index>(j)] = qp.dot(k.row(adm[j]).segment(off, dh)) * scale;
        const S mx = w.maxCoeff();
        w = (w.array() - mx).exp();
        w /= w.sum();
        auto cp = ctx.row(p).segment(off, dh);
        cp.setZero();
        for (std::size_t j = 0; j < adm.size(); ++j)
          cp += w[static_cast<Eigen::Index>(j)] * v.row(adm[j]).segment(off, dh);
      }
    }

    Matrix<S> attn_out = (ctx * P.wo).rowwise() + P.bo.transpose();
    Matrix<S> x_mid = x + attn_out;

    Matrix<S> xhat2, b;
    Vector<S> rstd2;
    layer_norm(x_mid, P.ln2_gain, P.ln2_bias, b, xhat2, rstd2);

    Matrix<S> ffn_pre = (b * P.w_ffn1).rowwise() + P.b_ffn1.transpose();
    Matrix<S> ffn_act = ffn_pre.unaryExpr([](S t) { return gelu(t); });
    Matrix<S> ffn_out = (ffn_act * P.w_ffn2).rowwise() + P.b_ffn2.transpose();
    Matrix<S> x_next = x_mid + ffn_out;

    if (trace) trace->attn[static_cast<std::size_t>(l)] = attn_w;
    if (acts) {
      LayerActs<S>& A = acts->layers[static_cast<std::size_t>(l)];
      A.x_in = std::move(x);
      A.xhat1 = std::move(xhat1);
      A.rstd1 = std::move(rstd1);
      A.a = std::move(a);
      A.q = std::move(q);
      A.k = std::move(k);
      A.v = std::move(v);
      A.attn = std::move(attn_w);
      A.ctx = std::move(ctx);
      A.x_mid = x_mid;
      A.xhat2 = std::move(xhat2);
      A.rstd2 = std::move(rstd2);
      A.b = std::move(b);
      A.ffn_pre = std::move(ffn_pre);
      A.ffn_act = std::move(ffn_act);
    }
    x = std::move(x_next);
  }

  Matrix<S> xhat_f, y;
  Vector<S> rstd_f;
  layer_norm(x, state.lnf_gain, state.lnf_bias, y, xhat_f, rstd_f);

  Matrix<S> logits;
  if (cfg.tie_output)
    logits = (y * state.token_embed.transpose()).rowwise() + state.b_out.transpose();
  else
    logits = (y * state.w_out).rowwise() + state.b_out.transpose();

  if (acts) {
    acts->xhat_f = std::move(xhat_f);
    acts->rstd_f = std::move(rstd_f);
    acts->y = y;
  }
  if (trace) trace->final_hidden = y;
  return logits;
}

template <class S>
Matrix<S> forward(const ModelState<S>& state, const std::vector<int>& ids,
                  const AttentionPattern& pattern, Activations<S>* acts, ForwardTrace<S>* trace) {
  Matrix<S> e = embed_tokens(state, ids);
  Matrix<S> logits = forward_from_embeddings(state, e, pattern, acts, trace);
  if (acts) acts->ids = ids;
  return logits;
}

template <class S>
void backward(const ModelState<S>& state, const Activations<S>& acts, const Matrix<S>& d_logits,
              Gradients<S>& grads, bool want_embedding_grad) {
  const ModelConfig& cfg = state.config;
  const AttentionPattern& pattern = *acts.pattern;
  const Eigen::Index n = acts.y.rows();
  const int n_heads = cfg.n_heads;
  const int dh = cfg.d_model / n_heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  Matrix<S> d_y;
  if (cfg.tie_output) {
    d_y = d_logits * state.token_embed;
    grads.token_embed += d_logits.transpose() * acts.y;
  } else {
    d_y = d_logits * state.w_out.transpose();
    grads.w_out += acts.y.transpose() * d_logits;
  }
  grads.b_out += d_logits.colwise().sum().transpose();

  Matrix<S> d_x =
      layer_norm_backward(d_y, acts.xhat_f, acts.rstd_f, state.lnf_gain, grads.lnf_gain, grads.lnf_bias);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerActs<S>& A = acts.layers[static_cast<std::size_t>(l)];
    const LayerParams<S>& P = state.layers[static_cast<std::size_t>(l)];
    LayerParams<S>& G = grads.layers[static_cast<std::size_t>(l)];

    // Feed-forward block; d_x is the gradient at the layer output.
    G.w_ffn2 += A.ffn_act.transpose() * d_x;
    G.b_ffn2 += d_x.colwise().sum().transpose();
    Matrix<S> d_act = d_x * P.w_ffn2.transpose();
    Matrix<S> d_pre =
        d_act.cwiseProduct(A.ffn_pre.unaryExpr([](S t) { return gelu_grad(t); }));
    G.w_ffn1 += A.b.transpose() * d_pre;
    G.b_ffn1 += d_pre.colwise().sum().transpose();
    Matrix<S> d_b = d_pre * P.w_ffn1.transpose();
    Matrix<S> d_x_mid =
        layer_norm_backward(d_b, A.xhat2, A.rstd2, P.ln2_gain, G.ln2_gain, G.ln2_bias);
    d_x_mid += d_x;  // residual

    // Attention block.
    G.wo += A.ctx.transpose() * d_x_mid;
    G.bo += d_x_mid.colwise().sum().transpose();
    Matrix<S> d_ctx = d_x_mid * P.wo.transpose();

    Matrix<S> d_q = Matrix<S>::Zero(n, cfg.d_model);
    Matrix<S> d_k = Matrix<S>::Zero(n, cfg.d_model);
    Matrix<S> d_v = Matrix<S>::Zero(n, cfg.d_model);
    for (int h = 0; h < n_heads; ++h) {
      const int off = h * dh;
      for (Eigen::Index p = 0; p < n; ++p) {
        const auto& adm = pattern.admits[static_cast<std::size_t>(p)];
        const Vector<S>& w = A.attn[static_cast<std::size_t>(h)][static_cast<std::size_t>(p)];
        const auto dcp = d_ctx.row(p).segment(off, dh);
        Vector<S> dw(static_cast<Eigen::Index>(adm.size()));
        for (std::size_t j = 0; j < adm.size(); ++j) {
          dw[static_cast<Eigen::Index>(j)] = dcp.dot(A.v.row(adm[j]).segment(off, dh));
          d_v.row(adm[j]).segment(off, dh) += w[static_cast<Eigen::Index>(j)] * dcp;
        }
        const S dot = w.dot(dw);
        auto dqp = d_q.row(p).segment(off, dh);
        const auto qp = A.q.row(p).segment(off, dh);
        for (std::size_t j = 0; j < adm.size(); ++j) {
          const S ds = w[static_cast<Eigen::Index>(j)] * (dw[static_cast<Eigen::Index>(j)] - dot) * scale;
          dqp += ds * A.k.row(adm[j]).segment(off, dh);
          d_k.row(adm[j]).segment(off, dh) += ds * qp;
        }
      }
    }

    G.wq += A.a.transpose() * d_q;
    G.bq += d_q.colwise().sum().transpose();
    G.wk += A.a.transpose() * d_k;
    G.bk += d_k.colwise().sum().transpose();
    G.wv += A.a.transpose() * d_v;
    G.bv += d_v.colwise().sum().transpose();
    Matrix<S> d_a = d_q * P.wq.transpose();
    d_a += d_k * P.wk.transpose();
    d_a += d_v * P.wv.transpose();
    Matrix<S> d_x_in =
        layer_norm_backward(d_a, A.xhat1, A.rstd1, P.ln1_gain, G.ln1_gain, G.ln1_bias);
    d_x_in += d_x_mid;  // residual
    d_x = std::move(d_x_in);
  }

  grads.pos_embed.topRows(n) += d_x;
  if (!acts.ids.empty())
    for (Eigen::Index p = 0; p < n; ++p)
      grads.token_embed.row(acts.ids[static_cast<std::size_t>(p)]) += d_x.row(p);
  if (want_embedding_grad) grads.d_embeddings = std::move(d_x);
}

namespace {

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

template <class S>
const char* dtype_name() {
  return sizeof(S) == 4 ? "float32" : "float64";
}

}  // namespace

template <class S>
void save_checkpoint(const std::string& path, const ModelState<S>& state) {
  json header;
  header["dtype"] = dtype_name<S>();
  header["config"] = json::parse(config_to_json_string(state.config));
  const std::string header_text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("EGMC", 4);
  write_pod<std::uint32_t>(os, 1);
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(header_text.size()));
  os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  auto params = parameters(const_cast<ModelState<S>&>(state));
  for (const auto& p : params) {
    const std::size_t bytes = static_cast<std::size_t>(p.size) * sizeof(S);
    os.write(reinterpret_cast<const char*>(p.data), static_cast<std::streamsize>(bytes));
    checksum = fnv1a64(p.data, bytes, checksum);
  }
  write_pod<std::uint64_t>(os, checksum);
  if (!os) throw DataError("failed writing '" + path + "'");
}

template <class S>
ModelState<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EGMC", 4) != 0) throw DataError("'" + path + "' is not a checkpoint");
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != 1) throw DataError("unsupported checkpoint version");
  const auto header_len = read_pod<std::uint32_t>(is, "header length");
  std::string header_text(header_len, '\0');
  is.read(header_text.data(), header_len);
  if (!is) throw DataError("checkpoint truncated while reading header");

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::string dtype = header.at("dtype").get<std::string>();
  const ModelConfig config = config_from_json_string(header.at("config").dump());

  ModelState<S> state = init_state<S>(config);  // right shapes; values overwritten
  auto params = parameters(state);
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (auto& p : params) {
    if (dtype == dtype_name<S>()) {
      const std::size_t bytes = static_cast<std::size_t>(p.size) * sizeof(S);
      is.read(reinterpret_cast<char*>(p.data), static_cast<std::streamsize>(bytes));
      if (!is) throw DataError("checkpoint truncated while reading " + p.name);
      checksum = fnv1a64(p.data, bytes, checksum);
    } else if (dtype == "float32") {
      std::vector<float> buf(static_cast<std::size_t>(p.size));
      is.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!is) throw DataError("checkpoint truncated while reading " + p.name);
      checksum = fnv1a64(buf.data(), buf.size() * sizeof(float), checksum);
      for (std::int64_t i = 0; i < p.size; ++i) p.data[i] = static_cast<S>(buf[static_cast<std::size_t>(i)]);
    } else if (dtype == "float64") {
      std::vector<double> buf(static_cast<std::size_t>(p.size));
      is.read(reinterpret_cast<char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(double)));
      if (!is) throw DataError("checkpoint truncated while reading " + p.name);
      checksum = fnv1a64(buf.data(), buf.size() * sizeof(double), checksum);
      for (std::int64_t i = 0; i < p.size; ++i) p.data[i] = static_cast<S>(buf[static_cast<std::size_t>(i)]);
    } else {
      throw DataError("checkpoint has unknown dtype '" + dtype + "'");
    }
  }
  const auto stored = read_pod<std::uint64_t>(is, "checksum");
  if (stored != checksum) throw DataError("checkpoint '" + path + "' failed its content checksum");
  return state;
}

template std::vector<ParamRef<float>> parameters(ModelState<float>&);
template std::vector<ParamRef<double>> parameters(ModelState<double>&);
template std::vector<ParamRef<float>> parameters(Gradients<float>&, const ModelConfig&);
template std::vector<ParamRef<double>> parameters(Gradients<double>&, const ModelConfig&);
template Gradients<float> make_gradients(const ModelConfig&);
template Gradients<double> make_gradients(const ModelConfig&);
template void zero_gradients(Gradients<float>&);
template void zero_gradients(Gradients<double>&);
template ModelState<float> init_state(const ModelConfig&);
template ModelState<double> init_state(const ModelConfig&);
template ModelState<float> cast_state<float, double>(const ModelState<double>&);
template ModelState<double> cast_state<double, float>(const ModelState<float>&);
template ModelState<float> cast_state<float, float>(const ModelState<float>&);
template ModelState<double> cast_state<double, double>(const ModelState<double>&);
template Matrix<float> embed_tokens(const ModelState<float>&, const std::vector<int>&);
template Matrix<double> embed_tokens(const ModelState<double>&, const std::vector<int>&);
template Matrix<float> forward_from_embeddings(const ModelState<float>&, const Matrix<float>&,
                                               const AttentionPattern&, Activations<float>*,
                                               ForwardTrace<float>*);
template Matrix<double> forward_from_embeddings(const ModelState<double>&, const Matrix<double>&,
                                                const AttentionPattern&, Activations<double>*,
                                                ForwardTrace<double>*);
template Matrix<float> forward(const ModelState<float>&, const std::vector<int>&,
                               const AttentionPattern&, Activations<float>*, ForwardTrace<float>*);
template Matrix<double> forward(const ModelState<double>&, const std::vector<int>&,
                                const AttentionPattern&, Activations<double>*, ForwardTrace<double>*);
template void backward(const ModelState<float>&, const Activations<float>&, const Matrix<float>&,
                       Gradients<float>&, bool);
template void backward(const ModelState<double>&, const Activations<double>&, const Matrix<double>&,
                       Gradients<double>&, bool);
template void save_checkpoint(const std::string&, const ModelState<float>&);
template void save_checkpoint(const std::string&, const ModelState<double>&);
template ModelState<float> load_checkpoint<float>(const std::string&);
template ModelState<double> load_checkpoint<double>(const std::string&);

}  // namespace egm
