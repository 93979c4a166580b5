#include "marformer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "marformer/complexity.hpp"
#include "marformer/model.hpp"
#include "marformer/mtsr.hpp"
#include "marformer/runtime.hpp"
#include "marformer/selfcheck.hpp"
#include "marformer/simulator.hpp"
#include "marformer/train.hpp"

namespace marformer::cli {

namespace fs = std::filesystem;

namespace {

// Every numeric default of the tool. Values taken from the library structs
// stay in sync with the library; the rest are tool-level choices.
namespace defaults {
inline constexpr std::int64_t kPairs = 16;
inline constexpr std::int64_t kSize = 64;
inline constexpr std::uint64_t kSeed = 0;
inline const sim::SimParams kSim{};
inline const train::TrainConfig kTrain{};
inline constexpr std::int64_t kEpochs = 300;
inline constexpr const char* kPreset = "L";
inline constexpr std::int64_t kResolution = 400;
inline constexpr std::int64_t kGradSamples = 50;
inline constexpr double kGradTolerance = 1e-4;
}  // namespace defaults

constexpr const char* kPublished = " (published setting)";

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthArgs {
  std::int64_t pairs = defaults::kPairs;
  std::int64_t size = defaults::kSize;
  std::uint64_t seed = defaults::kSeed;
  std::string out;
  std::int64_t angles = defaults::kSim.n_angles;
  double beam_hardening = defaults::kSim.beam_hardening;
  double metal_hu = defaults::kSim.metal_hu;
};

struct TrainArgs {
  std::string data;
  std::string preset = defaults::kPreset;
  std::string config;
  std::int64_t epochs = defaults::kEpochs;
  std::int64_t batch = defaults::kTrain.batch_size;
  std::uint64_t seed = defaults::kSeed;
  std::string out;
  double lr_max = defaults::kTrain.lr_max;
  double lr_min = defaults::kTrain.lr_min;
  std::int64_t restart = defaults::kTrain.restart_period;
  std::int64_t max_steps = defaults::kTrain.max_steps;
  std::int64_t checkpoint_every = defaults::kTrain.checkpoint_every;
  std::string split = defaults::kTrain.split;
};

struct InferArgs {
  std::string ckpt, input, output;
};

struct EvalArgs {
  std::string ckpt, data, split = "test", csv;
};

struct CountArgs {
  std::string preset, config, ablation, csv;
  std::int64_t res = defaults::kResolution;
};

struct GradArgs {
  std::uint64_t seed = defaults::kSeed;
  std::int64_t samples = defaults::kGradSamples;
};

void print_header(std::ostream& out, const std::string& command, int threads) {
  out << "command=" << command << "\nthreads=" << threads << '\n';
}

void print_model_config(std::ostream& out, const MARformerConfig& c) {
  std::istringstream is(c.to_text());
  for (std::string line; std::getline(is, line);) out << "model." << line << '\n';
}

MARformerConfig resolve_model(const std::string& preset_name, const std::string& config_path) {
  if (config_path.empty()) return preset(preset_name);
  std::ifstream is(config_path);
  if (!is) throw CommandError("cannot read config file " + config_path);
  std::stringstream ss;
  ss << is.rdbuf();
  MARformerConfig c = MARformerConfig::from_text(ss.str());
  c.validate();
  return c;
}

int do_synth(const SynthArgs& a, std::ostream& out) {
  sim::SimParams p;
  p.n_angles = a.angles;
  p.beam_hardening = a.beam_hardening;
  p.metal_hu = a.metal_hu;
  p.validate();
  out << "pairs=" << a.pairs << "\nsize=" << a.size << "\nseed=" << a.seed << "\nout=" << a.out
      << "\nangles=" << p.n_angles << "\ndetectors=" << p.detectors_for(a.size)
      << "\nbeam_hardening=" << p.beam_hardening << "\nmetal_hu=" << p.metal_hu
      << "\nmetal_threshold=" << p.metal_threshold << '\n';
  const auto manifest = sim::make_dataset(a.pairs, a.size, a.seed, a.out, p);
  std::int64_t test = 0;
  for (const auto& e : manifest.entries) test += e.split == "test";
  out << "wrote " << manifest.entries.size() << " pairs (" << test << " test) to "
      << (fs::path(a.out) / sim::kManifestName).string() << '\n';
  return 0;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  const MARformerConfig mc = resolve_model(a.preset, a.config);
  train::TrainConfig tc;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch;
  tc.seed = a.seed;
  tc.lr_max = a.lr_max;
  tc.lr_min = a.lr_min;
  tc.restart_period = a.restart;
  tc.max_steps = a.max_steps;
  tc.checkpoint_every = a.checkpoint_every;
  tc.split = a.split;
  tc.validate();
  out << "data=" << a.data << "\nout=" << a.out << '\n';
  print_model_config(out, mc);
  std::istringstream is(tc.to_text());
  for (std::string line; std::getline(is, line);) out << "train." << line << '\n';

  const auto manifest = sim::read_manifest(a.data);
  const auto samples = train::load_samples(manifest, tc.split, DType::f32);
  if (samples.empty()) throw CommandError("no samples in split '" + tc.split + "'");
  Model model = build_model(mc, a.seed);
  out << "params=" << count_params(model) << "\nsamples=" << samples.size() << '\n';
  const auto result = train::train(model, samples, tc, fs::path(a.out),
                                   [&](const train::StepLog& s) {
                                     if (s.step % 50 == 0) {
                                       out << "step " << s.step << " epoch " << s.epoch << " lr "
                                           << s.lr << " loss " << s.loss << '\n';
                                     }
                                   });
  if (!result.epoch_loss.empty()) out << "final epoch loss " << result.epoch_loss.back() << '\n';
  out << "checkpoint " << (fs::path(a.out) / "final.mtck").string() << '\n';
  return 0;
}

int do_infer(const InferArgs& a, std::ostream& out) {
  out << "ckpt=" << a.ckpt << "\ninput=" << a.input << "\noutput=" << a.output << '\n';
  const Model model = load_checkpoint(a.ckpt);
  print_model_config(out, model.config);
  const Tensor in = mtsr::load(a.input);
  Tensor restored = train::restore(model, in.dtype() == model.dtype() ? in : in.to(model.dtype()));
  restored = restored.to(in.dtype());
  mtsr::save(a.output, restored);
  out << "wrote " << a.output << '\n';
  return 0;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  const fs::path csv = a.csv.empty() ? fs::path(a.data) / ("eval_" + a.split + ".csv") : fs::path(a.csv);
  out << "ckpt=" << a.ckpt << "\ndata=" << a.data << "\nsplit=" << a.split << "\ncsv=" << csv.string()
      << "\npsnr_range=" << train::kHuRange << '\n';
  const Model model = load_checkpoint(a.ckpt);
  print_model_config(out, model.config);
  const auto report = train::evaluate(model, sim::read_manifest(a.data), a.split);
  train::write_eval_csv(report, csv);
  out << std::fixed << std::setprecision(4) << "images " << report.images.size() << "\nmean psnr "
      << report.mean_psnr << " ssim " << report.mean_ssim << "\ninput psnr " << report.mean_ma_psnr
      << " ssim " << report.mean_ma_ssim << '\n';
  return 0;
}

std::string fmt(std::optional<double> v, int prec) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << *v;
  return os.str();
}

int do_count(const CountArgs& a, std::ostream& out) {
  std::vector<AblationRow> rows;
  if (!a.ablation.empty()) {
    rows = ablation_rows(a.ablation);
  } else {
    const std::string name = a.preset.empty() ? defaults::kPreset : a.preset;
    rows.push_back({a.config.empty() ? "MARformer-" + name : a.config, resolve_model(name, a.config),
                    std::nullopt, std::nullopt});
  }
  out << "resolution=" << a.res << "x" << a.res << '\n';
  if (!a.ablation.empty()) out << "ablation=" << a.ablation << '\n';
  if (rows.size() == 1 && rows[0].config) print_model_config(out, *rows[0].config);
  out << "flops are multiply-accumulates\n";

  std::ostringstream csv;
  csv << "label,params,mparams,gflops,published_mparams,published_gflops\n";
  out << std::left << std::setw(24) << "variant" << std::right << std::setw(12) << "params(M)"
      << std::setw(12) << "GFLOPs" << std::setw(16) << "published(M)" << std::setw(16) << "published(G)" << '\n';
  for (const auto& r : rows) {
    std::optional<double> mp, gf;
    std::int64_t params = 0;
    if (r.config) {
      const CostReport cost = estimate_flops(*r.config, a.res, a.res);
      params = cost.params;
      mp = cost.mparams();
      gf = cost.gflops();
    }
    out << std::left << std::setw(24) << r.label << std::right << std::setw(12) << fmt(mp, 2)
        << std::setw(12) << fmt(gf, 2) << std::setw(16) << fmt(r.published_mparams, 2)
        << std::setw(16) << fmt(r.published_gflops, 2) << '\n';
    csv << r.label << ',' << (r.config ? std::to_string(params) : "") << ',' << fmt(mp, 4) << ','
        << fmt(gf, 4) << ',' << fmt(r.published_mparams, 2) << ',' << fmt(r.published_gflops, 2)
        << '\n';
  }
  if (!a.csv.empty()) {
    std::ofstream os(a.csv);
    if (!os) throw CommandError("cannot write " + a.csv);
    os << csv.str();
    out << "wrote " << a.csv << '\n';
  }
  return 0;
}

int do_gradcheck(const GradArgs& a, std::ostream& out) {
  out << "seed=" << a.seed << "\nsamples=" << a.samples << "\ntolerance=" << defaults::kGradTolerance
      << '\n';
  print_model_config(out, reduced_config());
  double worst = 0.0;
  out << std::scientific << std::setprecision(3);
  for (const auto& r : op_gradchecks(a.seed)) {
    out << std::left << std::setw(30) << r.name << " checked " << std::setw(5) << r.checked
        << " max rel err " << r.max_rel_error << '\n';
    worst = std::max(worst, r.max_rel_error);
  }
  const auto m = model_gradcheck(a.seed, a.samples);
  out << std::left << std::setw(30) << "reduced model" << " checked " << std::setw(5) << m.checked
      << " max rel err " << m.max_rel_error << " at " << m.worst_parameter << '\n';
  worst = std::max(worst, m.max_rel_error);
  out << "max relative error " << worst << '\n';
  if (worst >= defaults::kGradTolerance) throw CommandError("gradient check exceeded tolerance");
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Metal artifact reduction transformer: data synthesis, training and analysis",
               "marformer"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a simulated MA/clean dataset");
  synth->add_option("--pairs", sa.pairs, "Number of slice pairs")->check(CLI::PositiveNumber);
  synth->add_option("--size", sa.size, "Slice size in pixels (multiple of 8)")->check(CLI::PositiveNumber);
  synth->add_option("--seed", sa.seed, "Dataset seed");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--angles", sa.angles, "Projection angles over 180 degrees");
  synth->add_option("--beam-hardening", sa.beam_hardening, "Quadratic hardening strength");
  synth->add_option("--metal-hu", sa.metal_hu, "HU value inserted at metal before projection");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a synthesized dataset");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  auto* preset_opt = tr->add_option("--preset", ta.preset, std::string("Model preset") + kPublished)
                         ->check(CLI::IsMember({"L", "B", "T"}));
  tr->add_option("--config", ta.config, "Model config file (key=value lines)")->excludes(preset_opt);
  tr->add_option("--epochs", ta.epochs, std::string("Training epochs") + kPublished);
  tr->add_option("--batch", ta.batch, std::string("Batch size") + kPublished)->check(CLI::PositiveNumber);
  tr->add_option("--seed", ta.seed, "Initialisation and shuffling seed");
  tr->add_option("--out", ta.out, "Output directory for checkpoints and loss.csv")->required();
  tr->add_option("--lr-max", ta.lr_max, std::string("Peak learning rate") + kPublished);
  tr->add_option("--lr-min", ta.lr_min, std::string("Floor learning rate") + kPublished);
  tr->add_option("--restart", ta.restart, std::string("Warm-restart period in epochs") + kPublished);
  tr->add_option("--max-steps", ta.max_steps, "Stop after this many steps (-1: no limit)");
  tr->add_option("--checkpoint-every", ta.checkpoint_every, "Epochs between checkpoints (0: final only)");
  tr->add_option("--split", ta.split, "Training split")->check(CLI::IsMember({"train", "test", "all"}));

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Restore one HU slice stored as an MTSR tensor");
  inf->add_option("--ckpt", ia.ckpt, "Checkpoint file")->required();
  inf->add_option("--input", ia.input, "Input MTSR tensor, [H,W] or [1,H,W] in HU")->required();
  inf->add_option("--output", ia.output, "Output MTSR tensor")->required();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM of a checkpoint on a dataset split");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "Split to evaluate")->check(CLI::IsMember({"train", "test", "all"}));
  ev->add_option("--csv", ea.csv, "Metrics CSV (default: <data>/eval_<split>.csv)");

  CountArgs ca;
  auto* cnt = app.add_subcommand("count", "Parameter and FLOP report");
  auto* cp = cnt->add_option("--preset", ca.preset, "Model preset")->check(CLI::IsMember({"L", "B", "T"}));
  auto* cc = cnt->add_option("--config", ca.config, "Model config file")->excludes(cp);
  cnt->add_option("--ablation", ca.ablation, "Ablation table")
      ->check(CLI::IsMember({"table1", "table2", "table3a", "table3b"}))
      ->excludes(cp)
      ->excludes(cc);
  cnt->add_option("--res", ca.res, std::string("Square input resolution") + kPublished)
      ->check(CLI::PositiveNumber);
  cnt->add_option("--csv", ca.csv, "Also write the table as CSV");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--seed", ga.seed, "Seed for weights, inputs and sampling");
  gc->add_option("--samples", ga.samples, "Model parameters to sample")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    const int threads = runtime::configure_threads_from_env();
    if (synth->parsed()) {
      print_header(out, "synth", threads);
      return do_synth(sa, out);
    }
    if (tr->parsed()) {
      print_header(out, "train", threads);
      return do_train(ta, out);
    }
    if (inf->parsed()) {
      print_header(out, "infer", threads);
      return do_infer(ia, out);
    }
    if (ev->parsed()) {
      print_header(out, "eval", threads);
      return do_eval(ea, out);
    }
    if (cnt->parsed()) {
      print_header(out, "count", threads);
      return do_count(ca, out);
    }
    print_header(out, "gradcheck", threads);
    return do_gradcheck(ga, out);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace marformer::cli
