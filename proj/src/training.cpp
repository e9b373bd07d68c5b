#include "xdc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>
#include <thread>

#include "xdc/error.hpp"

namespace xdc {

using namespace ops;

void LossWeights::validate() const {
  for (double v : {alpha_amp, lambda_shape, beta_geo, lambda_geo, lambda_act, lambda_mix, lambda_shape_pre, lambda_geo_pre})
    if (!(v >= 0)) fail(Errc::InvalidConfig, "loss weights must be non-negative");
}

// ---- loss terms -------------------------------------------------------------------

namespace {

void same_length(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) fail(Errc::LengthMismatch, "prediction and target lengths differ");
}

Tensor as_row(const Tensor& t) { return t.rank() == 2 && t.dim(0) == 1 ? t : reshape(t, {1, t.size()}); }

constexpr double kSqrtEps = 1e-6;

}  // namespace

Tensor amplitude_loss(const Tensor& pred, const Tensor& target, double alpha) {
  same_length(pred, target);
  const Tensor weight = add_scalar(scale(target.detach(), alpha), 1.0);
  return mean(mul(abs(sub(pred, target)), weight));
}

Tensor si_sdr(const Tensor& pred, const Tensor& target) {
  same_length(pred, target);
  const Tensor yy = sum(mul(target, target));
  const Tensor a = div(sum(mul(pred, target)), add_scalar(yy, kSdrEps));
  const Tensor s = mul(a, target);
  const Tensor e = sub(s, pred);
  const Tensor ratio = div(add_scalar(sum(mul(s, s)), kSdrEps), add_scalar(sum(mul(e, e)), kSdrEps));
  return scale(log(minimum(ratio, kSdrRatioCap)), 10.0 / std::numbers::ln10);
}

Tensor geometry_loss(const Tensor& pred, const Tensor& target, double beta) {
  same_length(pred, target);
  const std::size_t n = pred.size();
  if (n < 3) return Tensor::scalar(0.0);
  const Tensor d = sub(safe_sqrt(as_row(pred), kSqrtEps), safe_sqrt(as_row(target), kSqrtEps));
  const Tensor d1 = sub(slice(d, 1, 1, n - 1), slice(d, 1, 0, n - 1));
  const Tensor d2 = sub(slice(d1, 1, 1, n - 2), slice(d1, 1, 0, n - 2));
  return add(mean(abs(d1)), scale(mean(abs(d2)), beta));
}

Tensor separation_loss(const Tensor& pred, const Tensor& target, const LossWeights& w) {
  Tensor l = amplitude_loss(pred, target, w.alpha_amp);
  if (w.lambda_shape > 0) l = add(l, scale(si_sdr(pred, target), -w.lambda_shape));
  if (w.lambda_geo > 0) l = add(l, scale(geometry_loss(pred, target, w.beta_geo), w.lambda_geo));
  return l;
}

double si_sdr_value(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) fail(Errc::LengthMismatch, "prediction and target lengths differ");
  double yy = 0, py = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    yy += target[i] * target[i];
    py += pred[i] * target[i];
  }
  const double a = py / (yy + kSdrEps);
  double ss = 0, ee = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double s = a * target[i];
    ss += s * s;
    ee += (s - pred[i]) * (s - pred[i]);
  }
  return 10.0 * std::log10(std::min((ss + kSdrEps) / (ee + kSdrEps), kSdrRatioCap));
}

double separation_cost(std::span<const double> pred, std::span<const double> target, const LossWeights& w) {
  if (pred.size() != target.size()) fail(Errc::LengthMismatch, "prediction and target lengths differ");
  const std::size_t n = pred.size();
  double amp = 0;
  for (std::size_t i = 0; i < n; ++i) amp += std::abs(pred[i] - target[i]) * (1.0 + w.alpha_amp * target[i]);
  double cost = amp / static_cast<double>(n);
  if (w.lambda_shape > 0) cost -= w.lambda_shape * si_sdr_value(pred, target);
  if (w.lambda_geo > 0 && n >= 3) {
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i)
      d[i] = std::sqrt(std::max(pred[i], 0.0) + kSqrtEps) - std::sqrt(std::max(target[i], 0.0) + kSqrtEps);
    double g1 = 0, g2 = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) g1 += std::abs(d[i + 1] - d[i]);
    for (std::size_t i = 0; i + 2 < n; ++i) g2 += std::abs(d[i + 2] - 2 * d[i + 1] + d[i]);
    cost += w.lambda_geo * (g1 / static_cast<double>(n - 1) + w.beta_geo * g2 / static_cast<double>(n - 2));
  }
  return cost;
}

// ---- matching ------------------------------------------------------------------------

PitResult pit_match(const std::vector<std::vector<double>>& cost, std::size_t k_max) {
  const std::size_t k = cost.size();
  if (k > k_max) fail(Errc::KExceedsKmax, std::to_string(k) + " targets exceed " + std::to_string(k_max) + " slots");
  for (const auto& row : cost)
    if (row.size() != k_max) fail(Errc::LengthMismatch, "cost matrix needs one column per slot");
  PitResult best;
  best.cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> cur(k);
  std::vector<bool> used(k_max, false);
  // depth-first in increasing slot order; strict improvement keeps the first optimum
  std::function<void(std::size_t, double)> rec = [&](std::size_t t, double acc) {
    if (t == k) {
      if (acc < best.cost) {
        best.cost = acc;
        best.slot_of_target = cur;
      }
      return;
    }
    for (std::size_t s = 0; s < k_max; ++s) {
      if (used[s]) continue;
      used[s] = true;
      cur[t] = s;
      rec(t + 1, acc + cost[t][s]);
      used[s] = false;
    }
  };
  rec(0, 0.0);
  if (k == 0) best.cost = 0;
  best.labels.assign(k_max, 0.0);
  for (auto s : best.slot_of_target) best.labels[s] = 1.0;
  return best;
}

PitResult pit_match(const std::vector<std::vector<double>>& preds, const std::vector<std::vector<double>>& targets,
                    const LossWeights& w) {
  std::vector<std::vector<double>> cost(targets.size(), std::vector<double>(preds.size()));
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t s = 0; s < preds.size(); ++s) cost[t][s] = separation_cost(preds[s], targets[t], w);
  return pit_match(cost, preds.size());
}

Tensor total_loss(const ForwardResult& out, const Tensor& x, const std::vector<std::vector<double>>& targets,
                  const LossWeights& w, LossTerms* terms, PitResult* match) {
  const std::size_t k_max = out.components.dim(0), L = out.components.dim(1);
  std::vector<std::vector<double>> preds(k_max);
  for (std::size_t s = 0; s < k_max; ++s)
    preds[s].assign(out.components.data().begin() + static_cast<long>(s * L),
                    out.components.data().begin() + static_cast<long>((s + 1) * L));
  const PitResult pit = pit_match(preds, targets, w);

  Tensor sep = Tensor::scalar(0.0);
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Tensor pred = slice(out.components, 0, pit.slot_of_target[t], 1);
    sep = add(sep, separation_loss(pred, Tensor::from({1, L}, targets[t]), w));
  }
  const Tensor act = mean(bce_with_logits(out.slots.logits, Tensor::from({k_max, 1}, pit.labels)));
  const Tensor mix = mean(abs(sub(out.recon, x)));
  const Tensor total = add(add(sep, scale(act, w.lambda_act)), scale(mix, w.lambda_mix));
  if (terms) {
    terms->separation = sep.item();
    terms->activity = act.item();
    terms->mixture = mix.item();
    terms->total = total.item();
  }
  if (match) *match = pit;
  return total;
}

Tensor pretrain_loss(const PretrainResult& r, const Tensor& x, const LossWeights& w, std::size_t patch_size,
                     std::size_t patch_stride, bool masked_only) {
  LossWeights pw = w;
  pw.lambda_shape = w.lambda_shape_pre;
  pw.lambda_geo = w.lambda_geo_pre;
  const Tensor target = slice(x, 1, 0, r.covered);
  if (!masked_only || r.masked.empty()) return separation_loss(r.recon, target, pw);
  Tensor acc = Tensor::scalar(0.0);
  for (auto p : r.masked)
    acc = add(acc, separation_loss(slice(r.recon, 1, p * patch_stride, patch_size),
                                   slice(target, 1, p * patch_stride, patch_size), pw));
  return scale(acc, 1.0 / static_cast<double>(r.masked.size()));
}

// ---- optimization ----------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0)) fail(Errc::InvalidConfig, "lr must be positive");
  if (epochs == 0 || batch_size == 0 || samples_per_epoch == 0)
    fail(Errc::InvalidConfig, "epochs, batch_size and samples_per_epoch must be positive");
  if (warmup_epochs >= epochs) fail(Errc::InvalidConfig, "warmup_epochs must be below epochs");
  if (!(ema_decay > 0 && ema_decay < 1)) fail(Errc::InvalidConfig, "ema_decay must lie in (0, 1)");
  if (threads < 1) fail(Errc::InvalidConfig, "threads must be >= 1");
}

double learning_rate(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch) {
  const double warm = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(cfg.epochs * steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.lr * (s + 1) / warm;
  const double prog = total > warm ? (s - warm) / (total - warm) : 1.0;
  const double floor = cfg.min_lr_ratio;
  return cfg.lr * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * std::min(prog, 1.0))));
}

void AdamW::step(std::vector<Parameter>& params, const std::vector<std::vector<double>>& grads,
                 const std::vector<bool>& trainable, double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable[i]) continue;
    auto& v = params[i].value.data();
    const auto& g = grads[i];
    if (m_[i].empty()) {
      m_[i].assign(v.size(), 0.0);
      v_[i].assign(v.size(), 0.0);
    }
    const double decay = params[i].decay ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      m_[i][j] = b1 * m_[i][j] + (1 - b1) * g[j];
      v_[i][j] = b2 * v_[i][j] + (1 - b2) * g[j] * g[j];
      const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
      v[j] -= lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + decay * v[j]);
    }
  }
}

std::vector<bool> trainable_mask(const Model& model, int stage, const TrainConfig& cfg) {
  std::vector<bool> m;
  for (const auto& p : model.parameters()) {
    bool on = false;
    if (stage == 1) {
      on = p.group == ParamGroup::Pretrain || p.group == ParamGroup::Global || p.group == ParamGroup::GlobalInput;
    } else {
      on = p.group != ParamGroup::Pretrain;
      if (cfg.freeze_global && p.group == ParamGroup::Global) on = false;
      if (cfg.freeze_global && cfg.freeze_input_projection && p.group == ParamGroup::GlobalInput) on = false;
    }
    m.push_back(on);
  }
  return m;
}

std::string format_log(const std::string& stage, const EpochLog& e) {
  char val[32] = "none";
  if (e.val_loss) std::snprintf(val, sizeof val, "%.9g", *e.val_loss);
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "stage=%s epoch=%zu step=%zu loss=%.9g sep=%.9g act=%.9g mix=%.9g val=%s lr=%.6g wall=%.3f",
                stage.c_str(), e.epoch, e.step, e.loss, e.separation, e.activity, e.mixture, val, e.lr, e.seconds);
  return buf;
}

namespace {

struct SampleLoss {
  Tensor loss;
  LossTerms terms;
};

using SampleFn = std::function<SampleLoss(const Model&, std::uint64_t epoch, std::uint64_t index)>;
using ValFn = std::function<double(const Model&, std::uint64_t index)>;

Model frozen_view(const Model& m) {
  Model v = m.clone();
  for (auto& p : v.parameters()) p.value.set_requires_grad(false);
  return v;
}

// Shared loop for both stages.
TrainReport train_loop(Model& model, int stage, const SampleFn& sample, const ValFn* val, const TrainConfig& cfg,
                       const std::string& checkpoint_path, const LogSink& log) {
  cfg.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  const std::vector<bool> trainable = trainable_mask(model, stage, cfg);
  auto& params = model.parameters();
  TrainReport rep;
  rep.total_params = model.parameter_count();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (trainable[i]) rep.trainable_params += params[i].value.size();
  if (log)
    log("stage=" + std::to_string(stage) + " trainable_params=" + std::to_string(rep.trainable_params) +
        " total_params=" + std::to_string(rep.total_params));

  const std::size_t n = cfg.samples_per_epoch;
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t warm_steps = cfg.warmup_epochs * steps_per_epoch;
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), cfg.batch_size);
  std::vector<Model> replicas;
  for (std::size_t w = 0; w < workers; ++w) {
    replicas.push_back(model.clone());
    for (std::size_t i = 0; i < params.size(); ++i) replicas[w].parameters()[i].value.set_requires_grad(trainable[i]);
  }
  for (auto& e : params) e.value.set_requires_grad(false);

  rep.ema.clear();
  for (const auto& p : params) rep.ema.push_back(Tensor::from(p.value.shape(), p.value.data()));

  AdamW opt(cfg, params.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::uint64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuf(derive_seed(cfg.seed, 0xE90C4ULL, epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuf, i)]);

    EpochLog el;
    el.epoch = epoch;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, n - b0);
      std::vector<std::vector<std::vector<double>>> per_sample(bs);
      std::vector<LossTerms> terms(bs);
      std::vector<std::exception_ptr> errors(workers);
      for (auto& r : replicas) r.copy_values_from(model);
      auto run = [&](std::size_t w) {
        try {
          Model& rep_model = replicas[w];
          for (std::size_t j = w; j < bs; j += workers) {
            SampleLoss sl = sample(rep_model, epoch, order[b0 + j]);
            sl.loss.backward();
            terms[j] = sl.terms;
            auto& dst = per_sample[j];
            dst.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
              if (!trainable[i]) continue;
              auto& t = rep_model.parameters()[i].value;
              dst[i] = t.grad();
              t.zero_grad();
            }
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      };
      if (workers == 1) {
        run(0);
      } else {
        std::vector<std::thread> th;
        for (std::size_t w = 0; w < workers; ++w) th.emplace_back(run, w);
        for (auto& t : th) t.join();
      }
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);

      // reduce in sample order so the result does not depend on the thread count
      std::vector<std::vector<double>> grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i]) continue;
        grads[i].assign(params[i].value.size(), 0.0);
        for (std::size_t j = 0; j < bs; ++j)
          for (std::size_t q = 0; q < grads[i].size(); ++q) grads[i][q] += per_sample[j][i][q];
        for (double& g : grads[i]) g /= static_cast<double>(bs);
      }
      const double lr = learning_rate(cfg, step, steps_per_epoch);
      opt.step(params, grads, trainable, lr);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable[i]) continue;
        auto& e = rep.ema[i].data();
        const auto& v = params[i].value.data();
        if (step < warm_steps) {
          e = v;
        } else {
          const double d = cfg.ema_decay;
          for (std::size_t q = 0; q < v.size(); ++q) e[q] = d * e[q] + (1 - d) * v[q];
        }
      }
      ++step;
      el.lr = lr;
      for (std::size_t j = 0; j < bs; ++j) {
        el.loss += terms[j].total / static_cast<double>(n);
        el.separation += terms[j].separation / static_cast<double>(n);
        el.activity += terms[j].activity / static_cast<double>(n);
        el.mixture += terms[j].mixture / static_cast<double>(n);
      }
    }
    el.step = step;
    if (val && cfg.val_samples > 0) {
      const Model view = frozen_view(model);
      double acc = 0;
      for (std::size_t i = 0; i < cfg.val_samples; ++i) acc += (*val)(view, i);
      el.val_loss = acc / static_cast<double>(cfg.val_samples);
    }
    el.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    rep.epochs.push_back(el);
    if (log) log(format_log(stage == 1 ? "pretrain" : "train", el));

    const bool improved = el.val_loss && (!rep.best_val || *el.val_loss < *rep.best_val);
    if (improved) rep.best_val = el.val_loss;
    const bool last = epoch + 1 == cfg.epochs;
    const bool stop = cfg.stop_when && cfg.stop_when(epoch);
    if (!checkpoint_path.empty() && (improved || ((last || stop) && !rep.best_val))) {
      std::map<std::string, std::string> meta{{"stage", std::to_string(stage)},
                                              {"epoch", std::to_string(epoch)},
                                              {"seed", std::to_string(cfg.seed)}};
      save_checkpoint(checkpoint_path, model, meta, stage == 2 ? &rep.ema : nullptr);
    }
    if (stop) break;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value.set_requires_grad(true);
  return rep;
}

}  // namespace

TrainReport run_stage1(Model& model, const PatternSource& train, const PatternSource* val, const TrainConfig& cfg,
                       const LossWeights& w, const std::string& checkpoint_path, const LogSink& log) {
  w.validate();
  const auto& mc = model.config();
  SampleFn fn = [&](const Model& m, std::uint64_t epoch, std::uint64_t index) {
    const auto x = train(epoch, index);
    const Tensor xt = Tensor::from({1, x.size()}, x);
    std::mt19937_64 rng(derive_seed(cfg.seed, epoch + 1, index));
    const auto r = m.pretrain_forward(xt, rng);
    SampleLoss sl{pretrain_loss(r, xt, w, mc.patch_size, mc.patch_stride, cfg.masked_only), {}};
    sl.terms.total = sl.terms.separation = sl.loss.item();
    return sl;
  };
  ValFn vfn = [&](const Model& m, std::uint64_t index) {
    const auto x = (*val)(0, index);
    const Tensor xt = Tensor::from({1, x.size()}, x);
    std::mt19937_64 rng(derive_seed(cfg.seed, 0xBA1ULL, index));
    return pretrain_loss(m.pretrain_forward(xt, rng), xt, w, mc.patch_size, mc.patch_stride, cfg.masked_only).item();
  };
  return train_loop(model, 1, fn, val ? &vfn : nullptr, cfg, checkpoint_path, log);
}

TrainReport run_stage2(Model& model, const MixtureSource& train, const MixtureSource* val, const TrainConfig& cfg,
                       const LossWeights& w, const std::string& checkpoint_path, const LogSink& log) {
  w.validate();
  auto targets_of = [&](const MixtureSample& s) {
    auto all = s.weighted_targets();
    if (static_cast<std::size_t>(s.active_count) > model.config().k_max)
      fail(Errc::KExceedsKmax, "sample has more phases than slots");
    all.resize(static_cast<std::size_t>(s.active_count));
    return all;
  };
  SampleFn fn = [&](const Model& m, std::uint64_t epoch, std::uint64_t index) {
    const auto s = train(epoch, index);
    const Tensor x = Tensor::from({1, s.mixed.size()}, s.mixed.intensities);
    SampleLoss sl;
    sl.loss = total_loss(m.forward(x), x, targets_of(s), w, &sl.terms);
    return sl;
  };
  ValFn vfn = [&](const Model& m, std::uint64_t index) {
    const auto s = (*val)(0, index);
    const Tensor x = Tensor::from({1, s.mixed.size()}, s.mixed.intensities);
    return total_loss(m.forward(x), x, targets_of(s), w).item();
  };
  return train_loop(model, 2, fn, val ? &vfn : nullptr, cfg, checkpoint_path, log);
}

}  // namespace xdc
