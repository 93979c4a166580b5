#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "marformer/model.hpp"
#include "marformer/simulator.hpp"
#include "marformer/tensor.hpp"

namespace marformer::train {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Network inputs are HU / kHuScale; PSNR uses the full clip window.
inline constexpr double kHuScale = 1000.0;
inline constexpr double kHuRange = 3800.0;

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of every params[i] using grads[i]. State
/// moments are created on first use.
void adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               double lr, const AdamHyper& hyper = {});

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * fraction)) / 2.
double cosine_lr(double fraction, double lr_max = 1e-3, double lr_min = 1e-7);

struct TrainConfig {
  AdamHyper adam;
  double lr_max = 1e-3;
  double lr_min = 1e-7;
  std::int64_t restart_period = 30;  // epochs
  std::int64_t batch_size = 8;
  std::int64_t epochs = 1;
  std::int64_t max_steps = -1;  // stop early when >= 0
  std::uint64_t seed = 0;
  std::string split = "train";  // "train", "test" or "all"
  std::int64_t checkpoint_every = 0;  // epochs; 0 keeps only the final one

  void validate() const;
  std::string to_text() const;
};

/// Warm-restart schedule: fraction = ((step / steps_per_epoch) mod period) / period.
double scheduled_lr(const TrainConfig& cfg, std::int64_t step, std::int64_t steps_per_epoch);

struct StepLog {
  std::int64_t step;
  std::int64_t epoch;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<double> epoch_loss;  // mean step loss per epoch
};

struct Sample {
  Tensor input;   // [1, H, W] normalised MA slice
  Tensor target;  // [1, H, W] normalised clean slice
};

Tensor normalize_hu(const Tensor& hu, DType dtype);

/// Loads pairs of `split` ("all" for every pair) from a dataset directory.
std::vector<Sample> load_samples(const sim::DatasetManifest& manifest, const std::string& split,
                                 DType dtype);

/// Trains in place. When `out_dir` is set, writes loss.csv and checkpoints
/// (ckpt_epoch_NNNN.mtck every checkpoint_every epochs, final.mtck).
TrainResult train(Model& model, const std::vector<Sample>& samples, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const StepLog&)>& on_step = {});

/// Restored HU slice for a HU input of shape [H, W] or [1, H, W]:
/// I + R(I / 1000) * 1000.
Tensor restore(const Model& model, const Tensor& ma_hu);

double psnr(const Tensor& a, const Tensor& b, double data_range);
double ssim(const Tensor& a, const Tensor& b, double data_range);
inline constexpr double kPsnrCap = 100.0;

struct ImageMetrics {
  std::int64_t image_id;
  double psnr, ssim;
  double ma_psnr, ma_ssim;  // of the unrestored input
};

struct EvalReport {
  std::vector<ImageMetrics> images;
  double mean_psnr = 0, mean_ssim = 0, mean_ma_psnr = 0, mean_ma_ssim = 0;
};

EvalReport evaluate(const Model& model, const sim::DatasetManifest& manifest, const std::string& split);
void write_eval_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace marformer::train
