#include "unlearn/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "unlearn/weights_io.hpp"
#include "adam.hpp"

namespace unlearn {

using nlohmann::json;

void ModelConfig::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_mlp <= 0 || vocab_size <= 0 || context_length <= 0) {
    throw ValidationError("model config: all sizes must be positive");
  }
  if (d_model % n_heads != 0) throw ValidationError("model config: d_model must be divisible by n_heads");
  if (!(ln_eps > 0.0)) throw ValidationError("model config: ln_eps must be positive");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers},     {"d_model", c.d_model},
           {"n_heads", c.n_heads},       {"d_mlp", c.d_mlp},
           {"vocab_size", c.vocab_size}, {"context_length", c.context_length},
           {"ln_eps", c.ln_eps}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_mlp = j.value("d_mlp", d.d_mlp);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_length = j.value("context_length", d.context_length);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

void TrainConfig::validate() const {
  if (steps < 0 || batch_size < 1 || warmup_steps < 0) {
    throw ValidationError("train: steps >= 0, batch_size >= 1 and warmup_steps >= 0 required");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("train: learning_rate must be > 0");
  if (grad_clip < 0.0 || weight_decay < 0.0) throw ValidationError("train: grad_clip and weight_decay must be >= 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"optimizer", c.optimizer == Optimizer::kAdam ? "adam" : "momentum"},
           {"learning_rate", c.learning_rate},
           {"momentum", c.momentum},
           {"warmup_steps", c.warmup_steps},
           {"linear_decay", c.linear_decay},
           {"grad_clip", c.grad_clip},
           {"weight_decay", c.weight_decay},
           {"log_every", c.log_every}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  const auto opt = j.value("optimizer", std::string("adam"));
  if (opt != "adam" && opt != "momentum") throw ValidationError("optimizer must be 'adam' or 'momentum'");
  c.optimizer = opt == "adam" ? Optimizer::kAdam : Optimizer::kMomentum;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.linear_decay = j.value("linear_decay", d.linear_decay);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.log_every = j.value("log_every", d.log_every);
}

namespace {

const char* kSlotNames[kBlockSlotCount] = {"ln1.g",      "ln1.b",     "attn.w_qkv", "attn.b_qkv",
                                           "attn.w_out", "attn.b_out", "ln2.g",      "ln2.b",
                                           "mlp.w_in",   "mlp.b_in",  "mlp.w_out",  "mlp.b_out"};

std::vector<std::pair<std::string, std::pair<int, int>>> tensor_layout(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::pair<int, int>>> out;
  const int d = c.d_model;
  out.push_back({"tok_emb", {c.vocab_size, d}});
  out.push_back({"pos_emb", {c.context_length, d}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::pair<int, int> shapes[kBlockSlotCount] = {{1, d}, {1, d}, {d, 3 * d},     {1, 3 * d},
                                                         {d, d}, {1, d}, {1, d},         {1, d},
                                                         {d, c.d_mlp}, {1, c.d_mlp}, {c.d_mlp, d}, {1, d}};
    for (int s = 0; s < kBlockSlotCount; ++s) {
      out.push_back({"blocks." + std::to_string(l) + "." + kSlotNames[s], shapes[s]});
    }
  }
  out.push_back({"ln_f.g", {1, d}});
  out.push_back({"ln_f.b", {1, d}});
  out.push_back({"unembed.w", {d, c.vocab_size}});
  out.push_back({"unembed.b", {1, c.vocab_size}});
  return out;
}

}  // namespace

template <typename T>
std::size_t ModelParamsT<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

template <typename T>
int ModelParamsT<T>::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ValidationError("unknown parameter tensor '" + name + "'");
  return static_cast<int>(it - names.begin());
}

template <typename T>
ModelParamsT<T> zero_params(const ModelConfig& config) {
  config.validate();
  ModelParamsT<T> p;
  p.config = config;
  for (const auto& [name, shape] : tensor_layout(config)) {
    p.names.push_back(name);
    p.tensors.push_back(Matrix<T>::Zero(shape.first, shape.second));
  }
  return p;
}

std::set<std::string> all_tensor_names(const ModelConfig& config) {
  std::set<std::string> out;
  for (const auto& [name, shape] : tensor_layout(config)) out.insert(name);
  return out;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  auto p = zero_params<float>(config);
  std::mt19937_64 rng(seed);
  const float std_dev = 0.02f;
  const float out_std = std_dev / std::sqrt(2.0f * static_cast<float>(config.n_layers));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto fill = [&](MatrixF& m, float s) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * normal(rng);
  };
  fill(p.tensors[ModelParams::kTokEmb], std_dev);
  fill(p.tensors[ModelParams::kPosEmb], std_dev);
  for (int l = 0; l < config.n_layers; ++l) {
    p.block(l, kLn1Gain).setOnes();
    p.block(l, kLn2Gain).setOnes();
    fill(p.block(l, kQkvWeight), std_dev);
    fill(p.block(l, kAttnOutWeight), out_std);
    fill(p.block(l, kMlpInWeight), std_dev);
    fill(p.block(l, kMlpOutWeight), out_std);
  }
  p.tensors[static_cast<std::size_t>(p.final_index(0))].setOnes();
  fill(p.tensors[static_cast<std::size_t>(p.final_index(2))], std_dev);
  return p;
}

namespace {

template <typename T>
struct LnCache {
  Matrix<T> xhat;
  Vector<T> rstd;
};

template <typename T>
Matrix<T> layernorm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, T eps, LnCache<T>& cache) {
  const Eigen::Index n = x.rows();
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = x.row(i).mean();
    auto centered = (x.row(i).array() - mu).matrix();
    const T var = centered.squaredNorm() / static_cast<T>(x.cols());
    const T r = T(1) / std::sqrt(var + eps);
    cache.rstd(i) = r;
    cache.xhat.row(i) = centered * r;
  }
  Matrix<T> out = (cache.xhat.array().rowwise() * gain.row(0).array()).matrix();
  out.rowwise() += bias.row(0);
  return out;
}

template <typename T>
Matrix<T> layernorm_backward(const Matrix<T>& dout, const Matrix<T>& gain, const LnCache<T>& cache, Matrix<T>* dgain,
                             Matrix<T>* dbias) {
  if (dgain) *dgain += (dout.array() * cache.xhat.array()).colwise().sum().matrix();
  if (dbias) *dbias += dout.colwise().sum();
  const Matrix<T> dxhat = (dout.array().rowwise() * gain.row(0).array()).matrix();
  Matrix<T> dx(dout.rows(), dout.cols());
  const T inv_d = T(1) / static_cast<T>(dout.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    const T mean_dxhat = dxhat.row(i).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) * inv_d;
    dx.row(i) = cache.rstd(i) *
                (dxhat.row(i).array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::tanh(kGeluC<T> * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T u = kGeluC<T> * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * T(0.044715) * x * x);
}

template <typename T>
struct BlockTrace {
  Matrix<T> x_in;
  LnCache<T> ln1;
  Matrix<T> ln1_out;
  Matrix<T> qkv;
  std::vector<Matrix<T>> probs;
  Matrix<T> attn_cat;
  LnCache<T> ln2;
  Matrix<T> ln2_out;
  Matrix<T> h_pre;
  Matrix<T> h_act;
};

template <typename T>
struct Trace {
  std::vector<BlockTrace<T>> blocks;
  Matrix<T> x_top;  // residual at the highest computed layer (post-hook)
  LnCache<T> lnf;
  Matrix<T> lnf_out;
  Matrix<T> logits;
  bool hooked = false;
};

template <typename T>
void apply_hooks(int layer, Matrix<T>& x, std::span<const Hook<T>> hooks) {
  for (const auto& h : hooks) {
    if (h.layer != layer) continue;
    Matrix<T> y = h.apply(x);
    if (y.rows() != x.rows() || y.cols() != x.cols()) {
      throw ValidationError("hook at layer " + std::to_string(layer) + " changed the activation shape");
    }
    x = std::move(y);
  }
}

template <typename T>
Matrix<T> block_forward(const ModelParamsT<T>& p, int l, const Matrix<T>& x, BlockTrace<T>& bt) {
  const auto& c = p.config;
  const Eigen::Index n = x.rows();
  const int d = c.d_model, hd = c.head_dim();
  const T eps = static_cast<T>(c.ln_eps);
  bt.x_in = x;
  bt.ln1_out = layernorm<T>(x, p.block(l, kLn1Gain), p.block(l, kLn1Bias), eps, bt.ln1);
  bt.qkv.noalias() = bt.ln1_out * p.block(l, kQkvWeight);
  bt.qkv.rowwise() += p.block(l, kQkvBias).row(0);

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  bt.attn_cat.resize(n, d);
  bt.probs.resize(static_cast<std::size_t>(c.n_heads));
  for (int h = 0; h < c.n_heads; ++h) {
    const auto q = bt.qkv.middleCols(h * hd, hd);
    const auto k = bt.qkv.middleCols(d + h * hd, hd);
    const auto v = bt.qkv.middleCols(2 * d + h * hd, hd);
    Matrix<T> s = (q * k.transpose()) * scale;
    auto& prob = bt.probs[static_cast<std::size_t>(h)];
    prob.setZero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T m = s.row(i).head(i + 1).maxCoeff();
      T z = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        const T e = std::exp(s(i, j) - m);
        prob(i, j) = e;
        z += e;
      }
      prob.row(i).head(i + 1) /= z;
    }
    bt.attn_cat.middleCols(h * hd, hd).noalias() = prob * v;
  }
  Matrix<T> x_mid = x + bt.attn_cat * p.block(l, kAttnOutWeight);
  x_mid.rowwise() += p.block(l, kAttnOutBias).row(0);

  bt.ln2_out = layernorm<T>(x_mid, p.block(l, kLn2Gain), p.block(l, kLn2Bias), eps, bt.ln2);
  bt.h_pre.noalias() = bt.ln2_out * p.block(l, kMlpInWeight);
  bt.h_pre.rowwise() += p.block(l, kMlpInBias).row(0);
  bt.h_act = bt.h_pre.unaryExpr([](T v) { return gelu(v); });
  Matrix<T> out = x_mid + bt.h_act * p.block(l, kMlpOutWeight);
  out.rowwise() += p.block(l, kMlpOutBias).row(0);
  return out;
}

// Runs embeddings and blocks [0, upto). When upto == n_layers the final norm
// and unembedding run as well.
template <typename T>
Trace<T> run_trace(const ModelParamsT<T>& p, std::span<const int> tokens, std::span<const Hook<T>> hooks, int upto,
                   const std::set<int>& capture, ActivationCache<T>* cache) {
  const auto& c = p.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  if (n == 0) throw ValidationError("forward: empty token sequence");
  if (n > c.context_length) {
    throw ValidationError("forward: sequence length " + std::to_string(n) + " exceeds context length " +
                          std::to_string(c.context_length));
  }
  if (upto < 0 || upto > c.n_layers) throw ValidationError("forward: layer out of range");
  Trace<T> tr;
  tr.hooked = !hooks.empty();
  Matrix<T> x(n, c.d_model);
  const auto& emb = p.tensors[ModelParamsT<T>::kTokEmb];
  const auto& pos = p.tensors[ModelParamsT<T>::kPosEmb];
  for (Eigen::Index t = 0; t < n; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= c.vocab_size) throw ValidationError("forward: token id out of vocabulary");
    x.row(t) = emb.row(tok) + pos.row(t);
  }
  tr.blocks.resize(static_cast<std::size_t>(upto));
  for (int l = 0; l <= upto; ++l) {
    apply_hooks<T>(l, x, hooks);
    if (cache && capture.count(l)) (*cache)[l] = x;
    if (l == upto) break;
    x = block_forward<T>(p, l, x, tr.blocks[static_cast<std::size_t>(l)]);
  }
  tr.x_top = x;
  if (upto == c.n_layers) {
    tr.lnf_out = layernorm<T>(x, p.final_tensor(0), p.final_tensor(1), static_cast<T>(c.ln_eps), tr.lnf);
    tr.logits.noalias() = tr.lnf_out * p.final_tensor(2);
    tr.logits.rowwise() += p.final_tensor(3).row(0);
  }
  return tr;
}

template <typename T>
struct GradSink {
  ModelParamsT<T>* grads = nullptr;
  const std::vector<char>* trainable = nullptr;

  Matrix<T>* at(int index) const {
    if (!grads || !(*trainable)[static_cast<std::size_t>(index)]) return nullptr;
    return &grads->tensors[static_cast<std::size_t>(index)];
  }
};

template <typename T>
Matrix<T> block_backward(const ModelParamsT<T>& p, int l, const BlockTrace<T>& bt, const Matrix<T>& dout,
                         const GradSink<T>& sink) {
  const auto& c = p.config;
  const int d = c.d_model, hd = c.head_dim();
  const Eigen::Index n = dout.rows();

  // MLP
  if (auto* g = sink.at(p.block_index(l, kMlpOutWeight))) g->noalias() += bt.h_act.transpose() * dout;
  if (auto* g = sink.at(p.block_index(l, kMlpOutBias))) *g += dout.colwise().sum();
  Matrix<T> dh = dout * p.block(l, kMlpOutWeight).transpose();
  dh.array() *= bt.h_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
  if (auto* g = sink.at(p.block_index(l, kMlpInWeight))) g->noalias() += bt.ln2_out.transpose() * dh;
  if (auto* g = sink.at(p.block_index(l, kMlpInBias))) *g += dh.colwise().sum();
  const Matrix<T> dln2 = dh * p.block(l, kMlpInWeight).transpose();
  Matrix<T> dx_mid = dout + layernorm_backward<T>(dln2, p.block(l, kLn2Gain), bt.ln2,
                                                  sink.at(p.block_index(l, kLn2Gain)),
                                                  sink.at(p.block_index(l, kLn2Bias)));

  // Attention
  if (auto* g = sink.at(p.block_index(l, kAttnOutWeight))) g->noalias() += bt.attn_cat.transpose() * dx_mid;
  if (auto* g = sink.at(p.block_index(l, kAttnOutBias))) *g += dx_mid.colwise().sum();
  const Matrix<T> dcat = dx_mid * p.block(l, kAttnOutWeight).transpose();
  Matrix<T> dqkv(n, 3 * d);
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  for (int h = 0; h < c.n_heads; ++h) {
    const auto q = bt.qkv.middleCols(h * hd, hd);
    const auto k = bt.qkv.middleCols(d + h * hd, hd);
    const auto v = bt.qkv.middleCols(2 * d + h * hd, hd);
    const auto& prob = bt.probs[static_cast<std::size_t>(h)];
    const auto dO = dcat.middleCols(h * hd, hd);
    const Matrix<T> dP = dO * v.transpose();
    dqkv.middleCols(2 * d + h * hd, hd).noalias() = prob.transpose() * dO;
    Matrix<T> dS(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T inner = prob.row(i).dot(dP.row(i));
      dS.row(i) = (prob.row(i).array() * (dP.row(i).array() - inner)).matrix() * scale;
    }
    dqkv.middleCols(h * hd, hd).noalias() = dS * k;
    dqkv.middleCols(d + h * hd, hd).noalias() = dS.transpose() * q;
  }
  if (auto* g = sink.at(p.block_index(l, kQkvWeight))) g->noalias() += bt.ln1_out.transpose() * dqkv;
  if (auto* g = sink.at(p.block_index(l, kQkvBias))) *g += dqkv.colwise().sum();
  const Matrix<T> dln1 = dqkv * p.block(l, kQkvWeight).transpose();
  return dx_mid + layernorm_backward<T>(dln1, p.block(l, kLn1Gain), bt.ln1, sink.at(p.block_index(l, kLn1Gain)),
                                        sink.at(p.block_index(l, kLn1Bias)));
}

// Reverse pass from the logits (optional) and/or an injected gradient at
// residual layer `inject_layer`, down to residual layer `stop_layer`.
template <typename T>
Matrix<T> backward(const ModelParamsT<T>& p, std::span<const int> tokens, const Trace<T>& tr, const Matrix<T>* dlogits,
                   int inject_layer, const Matrix<T>* d_inject, int stop_layer, const GradSink<T>& sink) {
  if (tr.hooked) throw ValidationError("backward through hooked forward passes is not supported");
  const auto& c = p.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const int top = static_cast<int>(tr.blocks.size());
  Matrix<T> dx = Matrix<T>::Zero(n, c.d_model);
  if (dlogits) {
    if (top != c.n_layers) throw ValidationError("backward: logits gradient needs a full forward");
    if (auto* g = sink.at(p.final_index(2))) g->noalias() += tr.lnf_out.transpose() * (*dlogits);
    if (auto* g = sink.at(p.final_index(3))) *g += dlogits->colwise().sum();
    const Matrix<T> dlnf = (*dlogits) * p.final_tensor(2).transpose();
    dx = layernorm_backward<T>(dlnf, p.final_tensor(0), tr.lnf, sink.at(p.final_index(0)), sink.at(p.final_index(1)));
  }
  for (int k = top;; --k) {
    if (k == inject_layer && d_inject) dx += *d_inject;
    if (k == stop_layer) break;
    dx = block_backward<T>(p, k - 1, tr.blocks[static_cast<std::size_t>(k - 1)], dx, sink);
  }
  if (stop_layer == 0) {
    if (auto* g = sink.at(ModelParamsT<T>::kTokEmb)) {
      for (Eigen::Index t = 0; t < n; ++t) g->row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    }
    if (auto* g = sink.at(ModelParamsT<T>::kPosEmb)) g->topRows(n) += dx;
  }
  return dx;
}

template <typename T>
std::vector<char> trainable_mask(const ModelParamsT<T>& p, const std::set<std::string>& trainable) {
  std::vector<char> mask(p.tensors.size(), 0);
  for (const auto& name : trainable) mask[static_cast<std::size_t>(p.index_of(name))] = 1;
  return mask;
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ModelParamsT<T>& params, std::span<const int> tokens, std::span<const Hook<T>> hooks,
                         const std::set<int>& capture_layers) {
  ForwardResult<T> out;
  auto tr = run_trace<T>(params, tokens, hooks, params.config.n_layers, capture_layers, &out.cache);
  out.logits = std::move(tr.logits);
  return out;
}

template <typename T>
Matrix<T> residual_at(const ModelParamsT<T>& params, std::span<const int> tokens, int layer,
                      std::span<const Hook<T>> hooks) {
  return run_trace<T>(params, tokens, hooks, layer, {}, nullptr).x_top;
}

template <typename T>
T evaluate_objective(const ScalarObjective& obj, const Matrix<T>& logits, std::span<const int> tokens,
                     Matrix<T>* dlogits) {
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  if (const auto* o = std::get_if<ConstantObjective>(&obj)) return static_cast<T>(o->value);
  if (const auto* o = std::get_if<LogitDiffObjective>(&obj)) {
    if (o->position < 0 || o->position >= logits.rows() || o->incorrect_tokens.empty()) {
      throw ValidationError("logit-diff objective: bad position or empty incorrect set");
    }
    const T scale = static_cast<T>(o->scale);
    const T w = scale / static_cast<T>(o->incorrect_tokens.size());
    T mean_incorrect = 0;
    for (int t : o->incorrect_tokens) mean_incorrect += logits(o->position, t);
    mean_incorrect /= static_cast<T>(o->incorrect_tokens.size());
    if (dlogits) {
      (*dlogits)(o->position, o->correct_token) += scale;
      for (int t : o->incorrect_tokens) (*dlogits)(o->position, t) -= w;
    }
    return scale * (logits(o->position, o->correct_token) - mean_incorrect);
  }
  const auto& ce = std::get<CrossEntropyObjective>(obj);
  const Eigen::Index n = logits.rows();
  if (n < 2) throw ValidationError("cross-entropy needs at least two tokens");
  const T count = static_cast<T>(n - 1);
  const T scale = static_cast<T>(ce.scale);
  T total = 0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    const T m = logits.row(t).maxCoeff();
    const auto shifted = (logits.row(t).array() - m).exp();
    const T z = shifted.sum();
    const int target = tokens[static_cast<std::size_t>(t + 1)];
    total += std::log(z) + m - logits(t, target);
    if (dlogits) {
      dlogits->row(t) = (shifted / z).matrix() * (scale / count);
      (*dlogits)(t, target) -= scale / count;
    }
  }
  return scale * total / count;
}

template <typename T>
T cross_entropy(const ModelParamsT<T>& params, std::span<const int> tokens, std::span<const Hook<T>> hooks) {
  if (tokens.size() < 2) throw ValidationError("cross-entropy needs at least two tokens");
  const auto res = forward<T>(params, tokens, hooks);
  return evaluate_objective<T>(CrossEntropyObjective{}, res.logits, tokens);
}

double corpus_cross_entropy(const ModelParams& params, const std::vector<TokenSeq>& corpus,
                            std::span<const Hook<float>> hooks) {
  std::vector<double> nll(corpus.size(), 0.0);
  std::vector<std::size_t> counts(corpus.size(), 0);
  parallel_for(corpus.size(), [&](std::size_t i) {
    const auto& seq = corpus[i];
    if (seq.size() < 2) return;
    const auto res = forward<float>(params, seq, hooks);
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < res.logits.rows(); ++t) {
      const double m = res.logits.row(t).maxCoeff();
      double z = 0.0;
      for (Eigen::Index v = 0; v < res.logits.cols(); ++v) z += std::exp(static_cast<double>(res.logits(t, v)) - m);
      total += std::log(z) + m - res.logits(t, seq[static_cast<std::size_t>(t + 1)]);
    }
    nll[i] = total;
    counts[i] = seq.size() - 1;
  });
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    total += nll[i];
    count += counts[i];
  }
  if (count == 0) throw ValidationError("corpus has no predictable tokens");
  return total / static_cast<double>(count);
}

template <typename T>
Matrix<T> grad_at_layer(const ModelParamsT<T>& params, std::span<const int> tokens, int layer,
                        const ScalarObjective& objective) {
  const auto& c = params.config;
  if (layer < 0 || layer > c.n_layers) throw ValidationError("grad_at_layer: layer out of range");
  auto tr = run_trace<T>(params, tokens, {}, c.n_layers, {}, nullptr);
  Matrix<T> dlogits;
  evaluate_objective<T>(objective, tr.logits, tokens, &dlogits);
  return backward<T>(params, tokens, tr, &dlogits, -1, nullptr, layer, GradSink<T>{});
}

template <typename T>
ModelParamsT<T> grad_params(const ModelParamsT<T>& params, const std::vector<TokenSeq>& batch,
                            const ScalarObjective& objective, const std::set<std::string>& trainable, T* loss_out) {
  const auto mask = trainable_mask(params, trainable);
  auto total = zero_params<T>(params.config);
  if (batch.empty()) {
    if (loss_out) *loss_out = T(0);
    return total;
  }
  const bool any = std::any_of(mask.begin(), mask.end(), [](char m) { return m != 0; });
  std::vector<ModelParamsT<T>> per_seq(batch.size());
  std::vector<T> losses(batch.size(), T(0));
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto& seq = batch[i];
    auto tr = run_trace<T>(params, seq, {}, params.config.n_layers, {}, nullptr);
    Matrix<T> dlogits;
    losses[i] = evaluate_objective<T>(objective, tr.logits, seq, &dlogits);
    if (!any) return;
    per_seq[i] = zero_params<T>(params.config);
    backward<T>(params, seq, tr, &dlogits, -1, nullptr, 0, GradSink<T>{&per_seq[i], &mask});
  });
  const T inv = T(1) / static_cast<T>(batch.size());
  T loss = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    loss += losses[i];
    if (!any) continue;
    for (std::size_t k = 0; k < total.tensors.size(); ++k) {
      if (mask[k]) total.tensors[k] += per_seq[i].tensors[k];
    }
  }
  for (std::size_t k = 0; k < total.tensors.size(); ++k) {
    if (mask[k]) total.tensors[k] *= inv;
  }
  if (loss_out) *loss_out = loss * inv;
  return total;
}

template <typename T>
ModelParamsT<T> grad_params_from_residual(const ModelParamsT<T>& params, std::span<const int> tokens,
                                          int residual_layer, const Matrix<T>& cotangent,
                                          const std::set<std::string>& trainable) {
  const auto mask = trainable_mask(params, trainable);
  auto grads = zero_params<T>(params.config);
  auto tr = run_trace<T>(params, tokens, {}, residual_layer, {}, nullptr);
  if (cotangent.rows() != tr.x_top.rows() || cotangent.cols() != tr.x_top.cols()) {
    throw ValidationError("residual cotangent has the wrong shape");
  }
  backward<T>(params, tokens, tr, nullptr, residual_layer, &cotangent, 0, GradSink<T>{&grads, &mask});
  return grads;
}

void save_params(const ModelParams& params, const std::filesystem::path& path, const json& meta) {
  TensorFile file;
  file.header = {{"kind", "model"}, {"config", params.config}};
  if (!meta.is_null()) file.header["meta"] = meta;
  file.names = params.names;
  file.tensors = params.tensors;
  write_tensor_file(file, path);
}

ModelParams load_params(const std::filesystem::path& path, json* meta) {
  auto file = read_tensor_file(path);
  if (file.header.value("kind", "") != "model") throw ValidationError(path.string() + ": not a model weights file");
  auto p = zero_params<float>(file.header.at("config").get<ModelConfig>());
  if (file.names != p.names) throw ValidationError(path.string() + ": tensor names do not match the model config");
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (file.tensors[i].rows() != p.tensors[i].rows() || file.tensors[i].cols() != p.tensors[i].cols()) {
      throw ValidationError(path.string() + ": shape mismatch for " + p.names[i]);
    }
    p.tensors[i] = std::move(file.tensors[i]);
  }
  if (meta) *meta = file.header.value("meta", json());
  return p;
}

TrainResult train_lm(const ModelConfig& config, const std::vector<TokenSeq>& corpus, const TrainConfig& train,
                     std::uint64_t seed, const std::function<void(int, double)>& on_log) {
  config.validate();
  train.validate();
  if (corpus.empty()) throw ValidationError("train_lm: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.size() < 2 || static_cast<int>(seq.size()) > config.context_length) {
      throw ValidationError("train_lm: corpus sequence length outside [2, context_length]");
    }
  }
  TrainResult result;
  result.params = init_params(config, seed);
  auto& p = result.params;
  auto velocity = zero_params<float>(config);
  detail::Adam adam(train.learning_rate);
  std::vector<MatrixF*> slots;
  for (auto& t : p.tensors) slots.push_back(&t);
  const auto names = all_tensor_names(config);

  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<TokenSeq> batch(static_cast<std::size_t>(train.batch_size));

  for (int step = 0; step < train.steps; ++step) {
    for (auto& seq : batch) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        cursor = 0;
      }
      seq = corpus[order[cursor++]];
    }
    float loss = 0.0f;
    auto grads = grad_params<float>(p, batch, CrossEntropyObjective{}, names, &loss);
    if (!std::isfinite(loss)) {
      throw RuntimeError("train_lm: non-finite loss at step " + std::to_string(step));
    }
    double norm2 = 0.0;
    for (const auto& g : grads.tensors) norm2 += static_cast<double>(g.squaredNorm());
    const double norm = std::sqrt(norm2);
    const float clip = (train.grad_clip > 0.0 && norm > train.grad_clip) ? static_cast<float>(train.grad_clip / norm) : 1.0f;

    double lr = train.learning_rate;
    if (step < train.warmup_steps) lr *= static_cast<double>(step + 1) / train.warmup_steps;
    if (train.linear_decay) lr *= 1.0 - static_cast<double>(step) / train.steps;
    const auto wd = static_cast<float>(train.weight_decay);
    for (std::size_t k = 0; k < p.tensors.size(); ++k) {
      auto& g = grads.tensors[k];
      g *= clip;
      if (wd > 0.0f && p.tensors[k].rows() > 1) g += wd * p.tensors[k];
    }
    if (train.optimizer == Optimizer::kAdam) {
      adam.lr = lr;
      adam.step(slots, grads.tensors);
    } else {
      const auto mom = static_cast<float>(train.momentum);
      for (std::size_t k = 0; k < p.tensors.size(); ++k) {
        auto& v = velocity.tensors[k];
        v = mom * v + grads.tensors[k];
        p.tensors[k] -= static_cast<float>(lr) * v;
      }
    }
    if (train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps)) {
      result.loss_curve.emplace_back(step, loss);
      if (on_log) on_log(step, loss);
    }
    result.final_loss = loss;
  }
  return result;
}

#define UNLEARN_INSTANTIATE(T)                                                                                     \
  template struct ModelParamsT<T>;                                                                                 \
  template ModelParamsT<T> zero_params<T>(const ModelConfig&);                                                     \
  template ForwardResult<T> forward<T>(const ModelParamsT<T>&, std::span<const int>, std::span<const Hook<T>>,   \
                                       const std::set<int>&);                                                      \
  template Matrix<T> residual_at<T>(const ModelParamsT<T>&, std::span<const int>, int, std::span<const Hook<T>>); \
  template T evaluate_objective<T>(const ScalarObjective&, const Matrix<T>&, std::span<const int>, Matrix<T>*);   \
  template T cross_entropy<T>(const ModelParamsT<T>&, std::span<const int>, std::span<const Hook<T>>);           \
  template Matrix<T> grad_at_layer<T>(const ModelParamsT<T>&, std::span<const int>, int, const ScalarObjective&); \
  template ModelParamsT<T> grad_params<T>(const ModelParamsT<T>&, const std::vector<TokenSeq>&,                   \
                                          const ScalarObjective&, const std::set<std::string>&, T*);              \
  template ModelParamsT<T> grad_params_from_residual<T>(const ModelParamsT<T>&, std::span<const int>, int,       \
                                                        const Matrix<T>&, const std::set<std::string>&);

UNLEARN_INSTANTIATE(float)
UNLEARN_INSTANTIATE(double)

}  // namespace unlearn
