#include "edge/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "edge/container.hpp"
#include "edge/errors.hpp"

namespace edge::denoiser {

using Eigen::MatrixXd;

namespace {

constexpr const char* kCheckpointMagic = "EDGECHECKPOINT";

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
}

class Adan final : public Optimizer {
 public:
  Adan(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
      v_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
      n_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
      prev_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
    }
  }

  void step(std::vector<ag::Tensor>& params, const std::vector<MatrixXd>& grads) override {
    ++t_;
    const double lr = cfg_.lr_at(t_);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, b3 = cfg_.beta3;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double bc3 = 1.0 - std::pow(b3, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const MatrixXd& g = grads[i];
      // the first step has no previous gradient, so the difference term is zero
      const MatrixXd diff = t_ == 1 ? MatrixXd::Zero(g.rows(), g.cols()) : MatrixXd(g - prev_[i]);
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * diff;
      const MatrixXd u = g + b2 * diff;
      n_[i] = b3 * n_[i] + (1.0 - b3) * u.cwiseProduct(u);
      const MatrixXd denom = ((n_[i] / bc3).cwiseSqrt().array() + cfg_.eps).matrix();
      const MatrixXd update = ((m_[i] / bc1 + b2 * v_[i] / bc2).array() / denom.array()).matrix();
      MatrixXd& theta = params[i].mutable_value();
      theta = (theta - lr * update) / (1.0 + lr * cfg_.weight_decay);
      prev_[i] = g;
    }
  }

  std::vector<std::pair<std::string, MatrixXd>> state() const override {
    std::vector<std::pair<std::string, MatrixXd>> out;
    out.emplace_back("t", MatrixXd::Constant(1, 1, static_cast<double>(t_)));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      const auto s = std::to_string(i);
      out.emplace_back("m/" + s, m_[i]);
      out.emplace_back("v/" + s, v_[i]);
      out.emplace_back("n/" + s, n_[i]);
      out.emplace_back("prev/" + s, prev_[i]);
    }
    return out;
  }

  void load_state(const std::vector<std::pair<std::string, MatrixXd>>& state) override {
    if (state.size() != 1 + 4 * m_.size()) throw BadHeader("optimizer state does not match the model");
    t_ = std::llround(state[0].second(0, 0));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      m_[i] = state[1 + 4 * i].second;
      v_[i] = state[2 + 4 * i].second;
      n_[i] = state[3 + 4 * i].second;
      prev_[i] = state[4 + 4 * i].second;
    }
  }

  long long steps_taken() const override { return t_; }

 private:
  OptimizerConfig cfg_;
  long long t_ = 0;
  std::vector<MatrixXd> m_, v_, n_, prev_;
};

class Adam final : public Optimizer {
 public:
  Adam(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
      v_.push_back(MatrixXd::Zero(p.rows(), p.cols()));
    }
  }

  void step(std::vector<ag::Tensor>& params, const std::vector<MatrixXd>& grads) override {
    ++t_;
    const double lr = cfg_.lr_at(t_);
    const double b1 = cfg_.beta1, b2 = cfg_.beta3;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const MatrixXd& g = grads[i];
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
      const MatrixXd denom = ((v_[i] / bc2).cwiseSqrt().array() + cfg_.eps).matrix();
      MatrixXd& theta = params[i].mutable_value();
      theta *= 1.0 - lr * cfg_.weight_decay;
      theta -= lr * ((m_[i] / bc1).array() / denom.array()).matrix();
    }
  }

  std::vector<std::pair<std::string, MatrixXd>> state() const override {
    std::vector<std::pair<std::string, MatrixXd>> out;
    out.emplace_back("t", MatrixXd::Constant(1, 1, static_cast<double>(t_)));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      out.emplace_back("m/" + std::to_string(i), m_[i]);
      out.emplace_back("v/" + std::to_string(i), v_[i]);
    }
    return out;
  }

  void load_state(const std::vector<std::pair<std::string, MatrixXd>>& state) override {
    if (state.size() != 1 + 2 * m_.size()) throw BadHeader("optimizer state does not match the model");
    t_ = std::llround(state[0].second(0, 0));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      m_[i] = state[1 + 2 * i].second;
      v_[i] = state[2 + 2 * i].second;
    }
  }

  long long steps_taken() const override { return t_; }

 private:
  OptimizerConfig cfg_;
  long long t_ = 0;
  std::vector<MatrixXd> m_, v_;
};

}  // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Adan ? "adan" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "adan") return OptimizerKind::Adan;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected adan or adam)");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  for (double b : {beta1, beta2, beta3})
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("optimizer betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  if (decay_steps < 0) throw ConfigError("decay_steps must be >= 0");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) throw ConfigError("min_lr_ratio must be in [0, 1]");
}

double OptimizerConfig::lr_at(long long step) const {
  if (decay_steps <= 0) return lr;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(decay_steps));
  return lr * (min_lr_ratio + (1.0 - min_lr_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

std::vector<std::pair<std::string, std::string>> OptimizerConfig::to_fields() const {
  return {{"optimizer", to_string(kind)}, {"lr", fmt(lr)},       {"beta1", fmt(beta1)},
          {"beta2", fmt(beta2)},          {"beta3", fmt(beta3)}, {"eps", fmt(eps)},
          {"weight_decay", fmt(weight_decay)}, {"clip_norm", fmt(clip_norm)},
          {"decay_steps", std::to_string(decay_steps)}, {"min_lr_ratio", fmt(min_lr_ratio)}};
}

OptimizerConfig OptimizerConfig::from_fields(const std::vector<std::pair<std::string, std::string>>& fields) {
  OptimizerConfig c;
  for (const auto& [k, v] : fields) {
    if (k == "optimizer") c.kind = parse_optimizer_kind(v);
    else if (k == "lr") c.lr = to_double(k, v);
    else if (k == "beta1") c.beta1 = to_double(k, v);
    else if (k == "beta2") c.beta2 = to_double(k, v);
    else if (k == "beta3") c.beta3 = to_double(k, v);
    else if (k == "eps") c.eps = to_double(k, v);
    else if (k == "weight_decay") c.weight_decay = to_double(k, v);
    else if (k == "clip_norm") c.clip_norm = to_double(k, v);
    else if (k == "decay_steps") c.decay_steps = std::llround(to_double(k, v));
    else if (k == "min_lr_ratio") c.min_lr_ratio = to_double(k, v);
  }
  c.validate();
  return c;
}

std::unique_ptr<Optimizer> make_adan(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params) {
  cfg.validate();
  return std::make_unique<Adan>(cfg, params);
}

std::unique_ptr<Optimizer> make_adam(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params) {
  cfg.validate();
  return std::make_unique<Adam>(cfg, params);
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& cfg, const std::vector<ag::Tensor>& params) {
  return cfg.kind == OptimizerKind::Adan ? make_adan(cfg, params) : make_adam(cfg, params);
}

TrainState::TrainState(const ModelConfig& model_cfg, const OptimizerConfig& opt_cfg, std::uint64_t seed_)
    : model(model_cfg, seed_), ema(model.parameter_values()), optimizer_config(opt_cfg),
      optimizer(make_optimizer(opt_cfg, model.parameters())), seed(seed_) {}

DenoiserModel TrainState::ema_model() const {
  DenoiserModel out = model.clone();
  out.set_parameter_values(ema);
  return out;
}

void TrainState::ema_update() {
  const double decay = model.config().ema_decay;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * params[i].value();
}

StepStats train_step(TrainState& state, std::span<const TrainingExample> batch, const diffusion::NoiseSchedule& sched,
                     const kinematics::Skeleton& skel, const TrainSettings& settings, Rng& rng) {
  if (batch.empty()) throw ShapeMismatch("train_step needs at least one clip");
  settings.weights.validate();
  const auto& cfg = state.model.config();
  const auto frames = batch[0].motion.rows();
  for (const auto& ex : batch) {
    if (ex.motion.rows() != frames) throw ShapeMismatch("batch clips must share the same length");
    if (ex.motion.cols() != cfg.pose_dim()) throw ShapeMismatch("training motion has the wrong pose dimension");
    if (ex.cond.rows() != frames || ex.cond.cols() != cfg.cond_dim)
      throw ShapeMismatch("training conditioning does not match its motion");
  }

  auto& params = state.model.parameters();
  for (auto& p : params) p.zero_grad();

  const Rng base(rng.next_u64());
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  StepStats stats;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    Rng clip = base.split(k);
    const int t = static_cast<int>(clip.uniform_int(1, sched.steps));
    const MatrixXd noise = clip.normal_matrix(frames, cfg.pose_dim());
    const MatrixXd z = diffusion::forward_diffuse(batch[k].motion, t, sched, noise);
    const bool drop = clip.bernoulli(cfg.cond_dropout_prob);
    if (drop) ++stats.unconditional_clips;
    Rng dropout_rng = clip.split(1);

    const auto x_hat = state.model.forward(z, t, drop ? nullptr : &batch[k].cond, &dropout_rng);
    // FK would reject non-finite rotations before the loss could be inspected
    if (!x_hat.value().allFinite() || !batch[k].motion.allFinite()) {
      for (auto& p : params) p.zero_grad();
      throw NonFiniteLoss("non-finite prediction or target at step " + std::to_string(state.step) + " (clip " +
                          std::to_string(k) + ", t=" + std::to_string(t) + ")");
    }
    const auto loss = total_loss(ag::constant(batch[k].motion), x_hat, skel, settings.weights, settings.activation);
    const double value = loss.total.item();
    if (!std::isfinite(value)) {
      for (auto& p : params) p.zero_grad();
      std::ostringstream msg;
      msg << "non-finite loss at step " << state.step << " (clip " << k << ", t=" << t << "): simple=" << loss.simple
          << " joint=" << loss.joint << " vel=" << loss.vel << " contact=" << loss.contact;
      throw NonFiniteLoss(msg.str());
    }
    loss.total.backward(inv_batch);
    stats.loss += value * inv_batch;
    stats.simple += loss.simple * inv_batch;
    stats.joint += loss.joint * inv_batch;
    stats.vel += loss.vel * inv_batch;
    stats.contact += loss.contact * inv_batch;
  }

  std::vector<MatrixXd> grads;
  grads.reserve(params.size());
  double norm2 = 0.0;
  for (auto& p : params) {
    grads.push_back(p.grad());
    norm2 += grads.back().squaredNorm();
    p.zero_grad();
  }
  if (!std::isfinite(norm2)) throw NonFiniteLoss("non-finite gradient at step " + std::to_string(state.step));
  const double clip_norm = state.optimizer_config.clip_norm;
  if (clip_norm > 0.0 && norm2 > clip_norm * clip_norm) {
    const double s = clip_norm / std::sqrt(norm2);
    for (auto& g : grads) g *= s;
  }
  state.optimizer->step(params, grads);
  state.ema_update();
  ++state.step;
  return stats;
}

namespace {

void append_tensor(Container& c, long long& index, const std::string& name, const MatrixXd& m) {
  c.set("tensor." + std::to_string(index++), name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index col = 0; col < m.cols(); ++col) c.payload.push_back(static_cast<float>(m(r, col)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const std::vector<std::pair<std::string, std::string>>& extra) {
  Container c;
  c.magic = kCheckpointMagic;
  c.version = 1;
  c.set("step", std::to_string(state.step));
  c.set("seed", std::to_string(state.seed));
  for (const auto& [k, v] : state.model.config().to_fields()) c.set("model." + k, v);
  for (const auto& [k, v] : state.optimizer_config.to_fields()) c.set("opt." + k, v);
  for (const auto& [k, v] : extra) c.set(k, v);

  const auto& names = state.model.parameter_names();
  const auto& params = state.model.parameters();
  const auto opt_state = state.optimizer->state();
  c.set("tensors", std::to_string(2 * params.size() + opt_state.size()));
  long long index = 0;
  for (std::size_t i = 0; i < params.size(); ++i) append_tensor(c, index, names[i], params[i].value());
  for (std::size_t i = 0; i < params.size(); ++i) append_tensor(c, index, "ema/" + names[i], state.ema[i]);
  for (const auto& [name, m] : opt_state) append_tensor(c, index, "opt/" + name, m);
  write_container(path, c);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Container header = read_container_header(path, kCheckpointMagic);
  const long long count = header.get_int("tensors");

  struct Entry {
    std::string name;
    long long rows, cols, offset;
  };
  std::vector<Entry> entries;
  long long total = 0;
  for (long long i = 0; i < count; ++i) {
    std::istringstream in(header.get("tensor." + std::to_string(i)));
    Entry e;
    if (!(in >> e.name >> e.rows >> e.cols) || e.rows < 0 || e.cols < 0)
      throw BadHeader("malformed tensor entry " + std::to_string(i) + " in " + path.string());
    e.offset = total;
    total += e.rows * e.cols;
    entries.push_back(e);
  }
  const Container c = read_container(path, kCheckpointMagic, total);

  std::vector<std::pair<std::string, std::string>> model_fields, opt_fields, rest;
  for (const auto& [k, v] : c.fields) {
    if (k.rfind("model.", 0) == 0) model_fields.emplace_back(k.substr(6), v);
    else if (k.rfind("opt.", 0) == 0) opt_fields.emplace_back(k.substr(4), v);
    else if (k.rfind("tensor", 0) != 0) rest.emplace_back(k, v);
  }
  const auto model_cfg = ModelConfig::from_fields(model_fields);
  const auto opt_cfg = OptimizerConfig::from_fields(opt_fields);
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  auto state = std::make_unique<TrainState>(model_cfg, opt_cfg, seed);
  state->step = c.get_int("step");

  auto matrix = [&](const Entry& e) {
    MatrixXd m(e.rows, e.cols);
    for (long long r = 0; r < e.rows; ++r)
      for (long long col = 0; col < e.cols; ++col)
        m(r, col) = c.payload[static_cast<std::size_t>(e.offset + r * e.cols + col)];
    return m;
  };

  const auto& names = state->model.parameter_names();
  const std::size_t P = names.size();
  if (entries.size() < 2 * P) throw BadHeader("checkpoint has too few tensors for its model config");
  std::vector<MatrixXd> values, ema;
  for (std::size_t i = 0; i < P; ++i) {
    if (entries[i].name != names[i] || entries[P + i].name != "ema/" + names[i])
      throw BadHeader("checkpoint tensor '" + entries[i].name + "' does not match parameter '" + names[i] + "'");
    values.push_back(matrix(entries[i]));
    ema.push_back(matrix(entries[P + i]));
  }
  state->model.set_parameter_values(values);
  for (std::size_t i = 0; i < P; ++i) {
    if (ema[i].rows() != values[i].rows() || ema[i].cols() != values[i].cols())
      throw BadHeader("EMA tensor '" + names[i] + "' has the wrong shape");
  }
  state->ema = std::move(ema);

  std::vector<std::pair<std::string, MatrixXd>> opt_state;
  for (std::size_t i = 2 * P; i < entries.size(); ++i) {
    if (entries[i].name.rfind("opt/", 0) != 0) throw BadHeader("unexpected tensor '" + entries[i].name + "'");
    opt_state.emplace_back(entries[i].name.substr(4), matrix(entries[i]));
  }
  state->optimizer->load_state(opt_state);
  return {std::move(state), std::move(rest)};
}

}  // namespace edge::denoiser
