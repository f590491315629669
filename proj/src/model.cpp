#include "edge/model.hpp"

#include <cmath>
#include <cstdio>

#include "edge/errors.hpp"
#include "edge/kinematics.hpp"

namespace edge::denoiser {

using ag::Tensor;
using Eigen::MatrixXd;

namespace {

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int i = std::stoi(v, &used);
    if (used == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor film(const Tensor& a, const Tensor& modulation, int d, int block) {
  const auto scale = ag::slice_cols(modulation, 2 * block * d, d);
  const auto shift = ag::slice_cols(modulation, 2 * block * d + d, d);
  const auto gain = ag::add(scale, ag::constant(MatrixXd::Ones(1, d)));
  return ag::add_row(ag::mul_row(a, gain), shift);
}

}  // namespace

int ModelConfig::pose_dim() const { return kinematics::PoseLayout{joints}.dim(); }

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || model_dim < 1 || mlp_dim < 1 || cond_dim < 1 || seq_len < 1 || joints < 1)
    throw ConfigError("model sizes must all be >= 1");
  if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (model_dim % 2 != 0) throw ConfigError("model_dim must be even for sinusoidal timestep features");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) throw ConfigError("cond_dropout_prob must be in [0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must be in [0, 1]");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_fields() const {
  return {
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"model_dim", std::to_string(model_dim)},
      {"mlp_dim", std::to_string(mlp_dim)},
      {"dropout", fmt(dropout)},
      {"cond_dim", std::to_string(cond_dim)},
      {"seq_len", std::to_string(seq_len)},
      {"joints", std::to_string(joints)},
      {"cond_dropout_prob", fmt(cond_dropout_prob)},
      {"ema_decay", fmt(ema_decay)},
  };
}

ModelConfig ModelConfig::from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  ModelConfig c;
  for (const auto& [k, v] : fields) {
    if (k == "layers") c.layers = parse_int(k, v);
    else if (k == "heads") c.heads = parse_int(k, v);
    else if (k == "model_dim") c.model_dim = parse_int(k, v);
    else if (k == "mlp_dim") c.mlp_dim = parse_int(k, v);
    else if (k == "dropout") c.dropout = parse_double(k, v);
    else if (k == "cond_dim") c.cond_dim = parse_int(k, v);
    else if (k == "seq_len") c.seq_len = parse_int(k, v);
    else if (k == "joints") c.joints = parse_int(k, v);
    else if (k == "cond_dropout_prob") c.cond_dropout_prob = parse_double(k, v);
    else if (k == "ema_decay") c.ema_decay = parse_double(k, v);
  }
  c.validate();
  return c;
}

MatrixXd timestep_features(int t, int dim) {
  const int half = dim / 2;
  MatrixXd out(1, dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out(0, i) = std::sin(t * freq);
    out(0, half + i) = std::cos(t * freq);
  }
  return out;
}

DenoiserModel::DenoiserModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int d = config_.model_dim;
  const int P = config_.pose_dim();

  auto embedding = [&](const std::string& name, int rows) {
    MatrixXd m(rows, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return add_param(name, std::move(m));
  };

  in_w_ = dense("input.weight", P, d, rng);
  in_b_ = zeros("input.bias", 1, d);
  pos_ = embedding("input.position", config_.seq_len);
  cond_w_ = dense("cond.weight", config_.cond_dim, d, rng);
  cond_b_ = zeros("cond.bias", 1, d);
  cond_pos_ = embedding("cond.position", config_.seq_len);
  null_cond_ = embedding("cond.null", 1);
  time_w1_ = dense("time.mlp1.weight", d, d, rng);
  time_b1_ = zeros("time.mlp1.bias", 1, d);
  time_w2_ = dense("time.mlp2.weight", d, d, rng);
  time_b2_ = zeros("time.mlp2.bias", 1, d);
  token_w_ = dense("time.token.weight", d, d, rng);
  token_b_ = zeros("time.token.bias", 1, d);

  for (int l = 0; l < config_.layers; ++l) {
    const auto p = "layer" + std::to_string(l) + ".";
    Layer layer;
    layer.ln1_g = ones(p + "norm1.gain", 1, d);
    layer.ln1_b = zeros(p + "norm1.bias", 1, d);
    layer.self_attn = {dense(p + "self.q", d, d, rng), dense(p + "self.k", d, d, rng), dense(p + "self.v", d, d, rng),
                       dense(p + "self.out", d, d, rng), zeros(p + "self.out_bias", 1, d)};
    layer.ln2_g = ones(p + "norm2.gain", 1, d);
    layer.ln2_b = zeros(p + "norm2.bias", 1, d);
    layer.cross_attn = {dense(p + "cross.q", d, d, rng), dense(p + "cross.k", d, d, rng),
                        dense(p + "cross.v", d, d, rng), dense(p + "cross.out", d, d, rng),
                        zeros(p + "cross.out_bias", 1, d)};
    layer.ln3_g = ones(p + "norm3.gain", 1, d);
    layer.ln3_b = zeros(p + "norm3.bias", 1, d);
    layer.ff_w1 = dense(p + "ff1.weight", d, config_.mlp_dim, rng);
    layer.ff_b1 = zeros(p + "ff1.bias", 1, config_.mlp_dim);
    layer.ff_w2 = dense(p + "ff2.weight", config_.mlp_dim, d, rng);
    layer.ff_b2 = zeros(p + "ff2.bias", 1, d);
    // zero-initialised modulation: every block starts as identity FiLM
    layer.film_w = zeros(p + "film.weight", d, 6 * d);
    layer.film_b = zeros(p + "film.bias", 1, 6 * d);
    layers_.push_back(std::move(layer));
  }
  final_g_ = ones("final.norm.gain", 1, d);
  final_b_ = zeros("final.norm.bias", 1, d);
  out_w_ = dense("output.weight", d, P, rng);
  out_b_ = zeros("output.bias", 1, P);
}

Tensor DenoiserModel::add_param(const std::string& name, MatrixXd init) {
  names_.push_back(name);
  params_.emplace_back(std::move(init), true);
  return params_.back();
}

Tensor DenoiserModel::dense(const std::string& name, int in, int out, Rng& rng) {
  const double a = std::sqrt(6.0 / (in + out));
  MatrixXd w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
  return add_param(name, std::move(w));
}

Tensor DenoiserModel::zeros(const std::string& name, int rows, int cols) {
  return add_param(name, MatrixXd::Zero(rows, cols));
}

Tensor DenoiserModel::ones(const std::string& name, int rows, int cols) {
  return add_param(name, MatrixXd::Ones(rows, cols));
}

Tensor DenoiserModel::attend(const Attention& a, const Tensor& queries, const Tensor& context) const {
  const auto q = ag::matmul(queries, a.wq);
  const auto k = ag::matmul(context, a.wk);
  const auto v = ag::matmul(context, a.wv);
  return ag::add_row(ag::matmul(ag::attention(q, k, v, config_.heads), a.wo), a.bo);
}

Tensor DenoiserModel::residual_dropout(const Tensor& a, Rng* rng) const {
  if (!rng || config_.dropout <= 0.0) return a;
  const double keep = 1.0 - config_.dropout;
  MatrixXd mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return ag::mask_mul(a, mask);
}

Tensor DenoiserModel::forward(const MatrixXd& z, int t, const MatrixXd* cond, Rng* dropout_rng) const {
  const auto N = z.rows();
  const int d = config_.model_dim;
  if (z.cols() != config_.pose_dim())
    throw ShapeMismatch("denoiser expects " + std::to_string(config_.pose_dim()) + " pose channels, got " +
                        std::to_string(z.cols()));
  if (N < 1 || N > config_.seq_len)
    throw ShapeMismatch("sequence length " + std::to_string(N) + " outside [1, " + std::to_string(config_.seq_len) +
                        "]");
  if (cond && (cond->rows() != N || cond->cols() != config_.cond_dim))
    throw ShapeMismatch("conditioning must be " + std::to_string(N) + "x" + std::to_string(config_.cond_dim) +
                        ", got " + std::to_string(cond->rows()) + "x" + std::to_string(cond->cols()));

  auto x = ag::add(ag::add_row(ag::matmul(ag::constant(z), in_w_), in_b_), ag::slice_rows(pos_, 0, N));

  const auto t_hidden = ag::silu(ag::add_row(ag::matmul(ag::constant(timestep_features(t, d)), time_w1_), time_b1_));
  const auto t_emb = ag::add_row(ag::matmul(t_hidden, time_w2_), time_b2_);
  const auto t_act = ag::silu(t_emb);
  const auto token = ag::add_row(ag::matmul(t_emb, token_w_), token_b_);

  const auto music = cond ? ag::add_row(ag::matmul(ag::constant(*cond), cond_w_), cond_b_)
                          : ag::broadcast_rows(null_cond_, N);
  const auto context = ag::concat_rows(token, ag::add(music, ag::slice_rows(cond_pos_, 0, N)));

  for (const auto& layer : layers_) {
    const auto modulation = ag::add_row(ag::matmul(t_act, layer.film_w), layer.film_b);

    auto h = ag::layer_norm(x, layer.ln1_g, layer.ln1_b);
    auto a = residual_dropout(attend(layer.self_attn, h, h), dropout_rng);
    x = ag::add(x, film(a, modulation, d, 0));

    h = ag::layer_norm(x, layer.ln2_g, layer.ln2_b);
    a = residual_dropout(attend(layer.cross_attn, h, context), dropout_rng);
    x = ag::add(x, film(a, modulation, d, 1));

    h = ag::layer_norm(x, layer.ln3_g, layer.ln3_b);
    a = ag::add_row(ag::matmul(ag::gelu(ag::add_row(ag::matmul(h, layer.ff_w1), layer.ff_b1)), layer.ff_w2),
                    layer.ff_b2);
    a = residual_dropout(a, dropout_rng);
    x = ag::add(x, film(a, modulation, d, 2));
  }
  return ag::add_row(ag::matmul(ag::layer_norm(x, final_g_, final_b_), out_w_), out_b_);
}

MatrixXd DenoiserModel::denoise(const MatrixXd& z, int t, const MatrixXd* cond) const {
  ag::NoGradGuard guard;
  MatrixXd out = forward(z, t, cond, nullptr).value();
  if (!out.allFinite()) throw NonFiniteActivation("denoiser output is not finite at t=" + std::to_string(t));
  return out;
}

DenoiserModel DenoiserModel::clone() const {
  DenoiserModel out(config_, 0);
  out.set_parameter_values(parameter_values());
  return out;
}

std::vector<MatrixXd> DenoiserModel::parameter_values() const {
  std::vector<MatrixXd> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value());
  return out;
}

void DenoiserModel::set_parameter_values(const std::vector<MatrixXd>& values) {
  if (values.size() != params_.size()) throw ShapeMismatch("parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].rows() != params_[i].rows() || values[i].cols() != params_[i].cols())
      throw ShapeMismatch("parameter '" + names_[i] + "' has the wrong shape");
    params_[i].mutable_value() = values[i];
  }
}

std::size_t DenoiserModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value().size());
  return n;
}

}  // namespace edge::denoiser
