#include "marformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "marformer/autograd.hpp"
#include "marformer/mtsr.hpp"
#include "marformer/ops.hpp"
#include "marformer/rng.hpp"

namespace marformer::train {

namespace {

std::string epoch_file(std::int64_t epoch) {
  std::ostringstream os;
  os << "ckpt_epoch_" << std::setw(4) << std::setfill('0') << epoch << ".mtck";
  return os.str();
}

Tensor as_image(const Tensor& t) {
  if (t.rank() == 2) return ops::reshape(t, {1, t.dim(0), t.dim(1)});
  if (t.rank() == 3 && t.dim(0) == 1) return t;
  throw TrainingError("expected an [H,W] or [1,H,W] slice, got " + shape_str(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* who) {
  if (a.numel() != b.numel() || a.dim(a.rank() - 1) != b.dim(b.rank() - 1)) {
    throw TrainingError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

}  // namespace

void adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, const AdamHyper& hyper) {
  if (params.size() != grads.size()) throw TrainingError("adam_step: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Tensor::zeros(p.shape(), DType::f64));
      state.v.push_back(Tensor::zeros(p.shape(), DType::f64));
    }
  }
  if (state.m.size() != params.size()) throw TrainingError("adam_step: state size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, double(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    const Tensor& g = grads[k];
    if (g.shape() != p.shape() || state.m[k].shape() != p.shape()) {
      throw TrainingError("adam_step: shape mismatch for parameter " + std::to_string(k));
    }
    double* m = state.m[k].data<double>().data();
    double* v = state.v[k].data<double>().data();
    dispatch(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pd = p.data<T>();
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gi = g.get(i);
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        pd[i] = static_cast<T>(double(pd[i]) - lr * mh / (std::sqrt(vh) + hyper.eps));
      }
    });
  }
}

double cosine_lr(double fraction, double lr_max, double lr_min) {
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * fraction));
}

void TrainConfig::validate() const {
  if (!(lr_min > 0.0 && lr_min < lr_max)) throw TrainingError("train: need 0 < lr_min < lr_max");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw TrainingError("train: Adam betas must lie in [0, 1)");
  }
  if (restart_period <= 0) throw TrainingError("train: restart period must be positive");
  if (batch_size <= 0) throw TrainingError("train: batch size must be positive");
  if (epochs < 0) throw TrainingError("train: epochs must be >= 0");
  if (split != "train" && split != "test" && split != "all") {
    throw TrainingError("train: split must be train, test or all");
  }
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "beta1=" << adam.beta1 << "\nbeta2=" << adam.beta2 << "\neps=" << adam.eps
     << "\nlr_max=" << lr_max << "\nlr_min=" << lr_min << "\nrestart_period=" << restart_period
     << "\nbatch_size=" << batch_size << "\nepochs=" << epochs << "\nmax_steps=" << max_steps
     << "\nseed=" << seed << "\nsplit=" << split << "\ncheckpoint_every=" << checkpoint_every
     << "\nloss=l1\n";
  return os.str();
}

double scheduled_lr(const TrainConfig& cfg, std::int64_t step, std::int64_t steps_per_epoch) {
  // integer phase keeps every cycle bit-identical
  const std::int64_t cycle = cfg.restart_period * steps_per_epoch;
  return cosine_lr(double(step % cycle) / double(cycle), cfg.lr_max, cfg.lr_min);
}

Tensor normalize_hu(const Tensor& hu, DType dtype) {
  Tensor out(hu.shape(), dtype);
  for (std::int64_t i = 0; i < hu.numel(); ++i) out.set(i, hu.get(i) / kHuScale);
  return out;
}

std::vector<Sample> load_samples(const sim::DatasetManifest& manifest, const std::string& split,
                                 DType dtype) {
  std::vector<Sample> out;
  for (const auto& e : manifest.entries) {
    if (split != "all" && e.split != split) continue;
    const Tensor ma = mtsr::load(manifest.root / e.ma_path);
    const Tensor clean = mtsr::load(manifest.root / e.clean_path);
    if (ma.shape() != clean.shape()) {
      throw TrainingError("pair " + std::to_string(e.pair_id) + " has mismatched shapes");
    }
    out.push_back({as_image(normalize_hu(ma, dtype)), as_image(normalize_hu(clean, dtype))});
  }
  return out;
}

TrainResult train(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  TrainResult result;
  std::ofstream loss_csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    loss_csv.open(*out_dir / "loss.csv", std::ios::trunc);
    if (!loss_csv) throw TrainingError("cannot write " + (*out_dir / "loss.csv").string());
    loss_csv << "step,epoch,lr,loss\n" << std::setprecision(10);
  }
  if (cfg.epochs > 0 && samples.empty()) throw TrainingError("train: no samples in split '" + cfg.split + "'");
  for (const auto& s : samples) {
    if (s.input.dtype() != model.dtype()) throw TrainingError("train: sample dtype differs from model");
  }

  const auto params = model.parameters();
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  model.set_requires_grad(true);

  AdamState state;
  Rng rng(cfg.seed);
  const auto n = static_cast<std::int64_t>(samples.size());
  const std::int64_t steps_per_epoch = n == 0 ? 1 : (n + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::int64_t step = 0;
  bool done = cfg.max_steps == 0;

  for (std::int64_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[i] = i;
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    double epoch_sum = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::int64_t b = 0; b < n && !done; b += cfg.batch_size) {
      const std::int64_t end = std::min(n, b + cfg.batch_size);
      const double lr = scheduled_lr(cfg, step, steps_per_epoch);
      model.zero_grad();
      double loss = 0.0;
      for (std::int64_t j = b; j < end; ++j) {
        const Sample& s = samples[order[j]];
        Tensor pred = ops::add(s.input, model_residual(model, s.input));
        Tensor l = ops::scale(ops::l1_loss(pred, s.target), 1.0 / double(end - b));
        loss += l.item();
        backward(l);
      }
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                            std::to_string(epoch) + ", lr " + std::to_string(lr) + ")");
      }
      std::vector<Tensor> grads;
      for (const auto& t : tensors) grads.push_back(t.grad().defined() ? t.grad() : Tensor::zeros(t.shape(), t.dtype()));
      adam_step(tensors, grads, state, lr, cfg.adam);

      const StepLog log{step, epoch, lr, loss};
      result.steps.push_back(log);
      if (loss_csv.is_open()) loss_csv << log.step << ',' << log.epoch << ',' << log.lr << ',' << log.loss << '\n';
      if (on_step) on_step(log);
      epoch_sum += loss;
      ++epoch_steps;
      ++step;
      if (cfg.max_steps >= 0 && step >= cfg.max_steps) done = true;
    }
    result.epoch_loss.push_back(epoch_sum / double(std::max<std::int64_t>(epoch_steps, 1)));
    if (out_dir && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(model, *out_dir / epoch_file(epoch + 1));
    }
  }
  model.zero_grad();
  model.set_requires_grad(false);
  if (out_dir) save_checkpoint(model, *out_dir / "final.mtck");
  return result;
}

Tensor restore(const Model& model, const Tensor& ma_hu) {
  NoGradGuard no_grad;
  const Tensor hu = as_image(ma_hu);
  const Tensor r = model_residual(model, normalize_hu(hu, model.dtype()));
  Tensor out(ma_hu.shape(), ma_hu.dtype());
  for (std::int64_t i = 0; i < out.numel(); ++i) out.set(i, hu.get(i) + r.get(i) * kHuScale);
  return out;
}

double psnr(const Tensor& a, const Tensor& b, double data_range) {
  require_same(a, b, "psnr");
  if (!(data_range > 0.0)) throw TrainingError("psnr: data_range must be positive");
  double se = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = a.get(i) - b.get(i);
    se += d * d;
  }
  const double mse = se / double(a.numel());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

double ssim(const Tensor& a, const Tensor& b, double data_range) {
  require_same(a, b, "ssim");
  if (!(data_range > 0.0)) throw TrainingError("ssim: data_range must be positive");
  const std::int64_t w = a.dim(a.rank() - 1), h = a.numel() / w;
  constexpr int kWin = 11;
  if (h < kWin || w < kWin) throw TrainingError("ssim: images must be at least 11x11");
  double g[kWin], gs = 0.0;
  for (int i = 0; i < kWin; ++i) gs += g[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
  for (double& v : g) v /= gs;

  const std::int64_t oh = h - kWin + 1, ow = w - kWin + 1;
  const auto av = a.to_vector(), bv = b.to_vector();
  // five filtered maps: x, y, xx, yy, xy; horizontal pass then vertical
  std::vector<double> tmp(5 * static_cast<std::size_t>(h * ow));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < kWin; ++k) {
        const double p = av[y * w + x + k], q = bv[y * w + x + k];
        s[0] += g[k] * p;
        s[1] += g[k] * q;
        s[2] += g[k] * p * p;
        s[3] += g[k] * q * q;
        s[4] += g[k] * p * q;
      }
      for (int c = 0; c < 5; ++c) tmp[c * h * ow + y * ow + x] = s[c];
    }
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  double total = 0.0;
  for (std::int64_t y = 0; y < oh; ++y)
    for (std::int64_t x = 0; x < ow; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < kWin; ++k)
        for (int c = 0; c < 5; ++c) s[c] += g[k] * tmp[c * h * ow + (y + k) * ow + x];
      const double mx = s[0], my = s[1];
      const double vx = s[2] - mx * mx, vy = s[3] - my * my, cxy = s[4] - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / double(oh * ow);
}

EvalReport evaluate(const Model& model, const sim::DatasetManifest& manifest, const std::string& split) {
  EvalReport rep;
  for (const auto& e : manifest.entries) {
    if (split != "all" && e.split != split) continue;
    const Tensor ma = mtsr::load(manifest.root / e.ma_path);
    const Tensor clean = mtsr::load(manifest.root / e.clean_path);
    const Tensor out = restore(model, ma);
    rep.images.push_back({e.pair_id, psnr(out, clean, kHuRange), ssim(out, clean, kHuRange),
                          psnr(ma, clean, kHuRange), ssim(ma, clean, kHuRange)});
  }
  if (rep.images.empty()) throw TrainingError("evaluate: no pairs in split '" + split + "'");
  for (const auto& m : rep.images) {
    rep.mean_psnr += m.psnr;
    rep.mean_ssim += m.ssim;
    rep.mean_ma_psnr += m.ma_psnr;
    rep.mean_ma_ssim += m.ma_ssim;
  }
  const double k = double(rep.images.size());
  rep.mean_psnr /= k;
  rep.mean_ssim /= k;
  rep.mean_ma_psnr /= k;
  rep.mean_ma_ssim /= k;
  return rep;
}

void write_eval_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw TrainingError("cannot write " + path.string());
  os << std::setprecision(10) << "image_id,psnr,ssim,ma_psnr,ma_ssim\n";
  for (const auto& m : report.images) {
    os << m.image_id << ',' << m.psnr << ',' << m.ssim << ',' << m.ma_psnr << ',' << m.ma_ssim << '\n';
  }
  os << "mean," << report.mean_psnr << ',' << report.mean_ssim << ',' << report.mean_ma_psnr << ','
     << report.mean_ma_ssim << '\n';
}

}  // namespace marformer::train
