#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "egm/types.hpp"

namespace egm {

// Compact encoder-only masked language model with configurable sparse
// attention: a sliding window around each position, a set of global
// positions that attend everywhere and are attended by everyone, and
// optionally a few random extra targets per row.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ffn = 256;
  int max_seq_len = 4096;
  // Effective window at position p is [p - window_size/2, p + window_size/2];
  // an even value therefore behaves like the next odd one.
  int window_size = 64;
  std::vector<int> global_positions;
  int random_blocks_per_row = 0;
  std::uint64_t seed = 0;
  bool tie_output = true;

  void validate() const;  // throws DataError
};

std::string config_to_json_string(const ModelConfig& config);
ModelConfig config_from_json_string(const std::string& text);

// Explicit per-position admissible-index sets, sorted and unique.
struct AttentionPattern {
  int seq_len = 0;
  std::vector<std::vector<int>> admits;
};

AttentionPattern attention_pattern(const ModelConfig& config, int seq_len, std::uint64_t seed);

template <class S>
struct LayerParams {
  Matrix<S> wq, wk, wv, wo;  // d x d, stored input-major: y = x * w + b
  Vector<S> bq, bk, bv, bo;
  Vector<S> ln1_gain, ln1_bias;
  Vector<S> ln2_gain, ln2_bias;
  Matrix<S> w_ffn1;  // d x d_ffn
  Vector<S> b_ffn1;
  Matrix<S> w_ffn2;  // d_ffn x d
  Vector<S> b_ffn2;
};

template <class S>
struct ModelState {
  ModelConfig config;
  Matrix<S> token_embed;  // vocab x d
  Matrix<S> pos_embed;    // max_seq x d
  std::vector<LayerParams<S>> layers;
  Vector<S> lnf_gain, lnf_bias;
  Matrix<S> w_out;  // d x vocab, only when untied
  Vector<S> b_out;  // vocab
};

// Flat view over one parameter tensor; `parameters` enumerates them in the
// declared (checkpoint) order, identically for states and gradients.
template <class S>
struct ParamRef {
  std::string name;
  S* data = nullptr;
  std::int64_t size = 0;
};

template <class S>
std::vector<ParamRef<S>> parameters(ModelState<S>& state);

template <class S>
struct Gradients {
  Matrix<S> token_embed;
  Matrix<S> pos_embed;
  std::vector<LayerParams<S>> layers;
  Vector<S> lnf_gain, lnf_bias;
  Matrix<S> w_out;
  Vector<S> b_out;
  Matrix<S> d_embeddings;  // filled when requested in backward()
};

template <class S>
std::vector<ParamRef<S>> parameters(Gradients<S>& grads, const ModelConfig& config);

template <class S>
Gradients<S> make_gradients(const ModelConfig& config);

template <class S>
void zero_gradients(Gradients<S>& grads);

// Deterministic initialization from config.seed: scaled-uniform matrices,
// zero biases, unit norm gains.
template <class S>
ModelState<S> init_state(const ModelConfig& config);

template <class To, class From>
ModelState<To> cast_state(const ModelState<From>& state);

// Everything the backward pass needs, captured by the forward pass.  The
// attention pattern is referenced, not copied; it must outlive the struct.
template <class S>
struct LayerActs {
  Matrix<S> x_in;
  Matrix<S> xhat1;
  Vector<S> rstd1;
  Matrix<S> a;
  Matrix<S> q, k, v;
  std::vector<std::vector<Vector<S>>> attn;  // [head][row], aligned with admits
  Matrix<S> ctx;
  Matrix<S> x_mid;
  Matrix<S> xhat2;
  Vector<S> rstd2;
  Matrix<S> b;
  Matrix<S> ffn_pre;
  Matrix<S> ffn_act;
};

template <class S>
struct Activations {
  const AttentionPattern* pattern = nullptr;
  std::vector<int> ids;  // empty when entered through embeddings
  Matrix<S> x0;          // token embeddings + positions
  std::vector<LayerActs<S>> layers;
  Matrix<S> xhat_f;
  Vector<S> rstd_f;
  Matrix<S> y;  // final hidden states
};

// Attention weights restricted to the sparse pattern, for interpretability.
template <class S>
struct ForwardTrace {
  AttentionPattern pattern;
  // [layer][head][row] weights aligned with pattern.admits[row].
  std::vector<std::vector<std::vector<Vector<S>>>> attn;
  Matrix<S> final_hidden;
};

// Token-embedding rows for the ids (positions are added inside the forward
// pass, so forward(ids) == forward_from_embeddings(embed_tokens(ids))).
template <class S>
Matrix<S> embed_tokens(const ModelState<S>& state, const std::vector<int>& ids);

template <class S>
Matrix<S> forward_from_embeddings(const ModelState<S>& state, const Matrix<S>& token_embeddings,
                                  const AttentionPattern& pattern, Activations<S>* acts = nullptr,
                                  ForwardTrace<S>* trace = nullptr);

template <class S>
Matrix<S> forward(const ModelState<S>& state, const std::vector<int>& ids,
                  const AttentionPattern& pattern, Activations<S>* acts = nullptr,
                  ForwardTrace<S>* trace = nullptr);

// Exact reverse mode from d(loss)/d(logits); accumulates into `grads`.
template <class S>
void backward(const ModelState<S>& state, const Activations<S>& acts, const Matrix<S>& d_logits,
              Gradients<S>& grads, bool want_embedding_grad = false);

// Checkpoint container: JSON config header, parameter blobs in declared
// order, FNV-1a content checksum.
template <class S>
void save_checkpoint(const std::string& path, const ModelState<S>& state);

template <class S>
ModelState<S> load_checkpoint(const std::string& path);

}  // namespace egm
