// Command line front end for the layercollapse library.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "layercollapse/arch.hpp"
#include "layercollapse/bound.hpp"
#include "layercollapse/collapse.hpp"
#include "layercollapse/common.hpp"
#include "layercollapse/data.hpp"
#include "layercollapse/layers.hpp"
#include "layercollapse/loss.hpp"
#include "layercollapse/serialize.hpp"
#include "layercollapse/train.hpp"

namespace {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("LC_LOG_LEVEL");
  if (!env) return LogLevel::kInfo;
  const std::string v(env);
  if (v == "quiet" || v == "error") return LogLevel::kQuiet;
  if (v == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

void info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::cout << msg << "\n";
}

void debug(const std::string& msg) {
  if (log_level() >= LogLevel::kDebug) std::cout << "[debug] " << msg << "\n";
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> lc_strength;
  std::optional<double> tau;
  std::optional<std::size_t> epochs;
  std::optional<std::string> out;
};

void apply(lc::RunConfig& rc, const Overrides& ov) {
  if (ov.seed) {
    rc.train.seed = *ov.seed;
    rc.model.seed = *ov.seed;
    rc.data.seed = *ov.seed;
  }
  if (ov.lc_strength) rc.train.reg.lc = *ov.lc_strength;
  if (ov.tau) {
    rc.collapse.tau = *ov.tau;
    rc.train.tau = *ov.tau;
  }
  if (ov.epochs) rc.train.epochs = *ov.epochs;
  if (ov.out) rc.output = *ov.out;
}

lc::Dataset make_dataset(const lc::DataConfig& dc) {
  if (dc.generator == "blobs")
    return lc::gen_blobs(dc.seed, dc.n, dc.classes, dc.spread);
  if (dc.generator == "spirals")
    return lc::gen_two_spirals(dc.seed, dc.n, dc.spread);
  if (dc.generator == "regression") {
    lc::RegressionShape shape;
    if (dc.shape == "sine")
      shape = lc::RegressionShape::kSine;
    else if (dc.shape == "piecewise")
      shape = lc::RegressionShape::kPiecewise;
    else
      throw lc::ConfigError("data: unknown regression shape '" + dc.shape +
                            "'");
    return lc::gen_regression_1d(dc.seed, dc.n, dc.noise_std, shape);
  }
  if (dc.generator == "idx") {
    if (dc.images.empty() || dc.labels.empty())
      throw lc::ConfigError("data: idx generator needs images and labels paths");
    return lc::load_idx_dataset(dc.images, dc.labels, dc.seed);
  }
  throw lc::ConfigError("data: unknown generator '" + dc.generator + "'");
}

lc::ModelGraph make_model(const lc::RunConfig& rc) {
  if (!rc.model.checkpoint.empty()) {
    debug("loading checkpoint " + rc.model.checkpoint);
    return lc::load_checkpoint(rc.model.checkpoint);
  }
  if (rc.model.blocks.empty())
    throw lc::ConfigError("model: need either blocks or a checkpoint");
  lc::ModelSpec spec{rc.model.blocks};
  return lc::init_model(spec, rc.model.seed, rc.model.retrofit);
}

void write_train_log(const lc::TrainLog& log, const std::string& path) {
  lc::CsvWriter csv({"epoch", "split", "total", "ce", "kl", "reg", "metric",
                     "alphas"});
  for (const auto& r : log.rows) {
    std::string alphas;
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      if (i) alphas += ';';
      alphas += lc::csv_num(r.alphas[i].second);
    }
    csv.append_row({std::to_string(r.epoch), r.split, lc::csv_num(r.total),
                    lc::csv_num(r.ce_term), lc::csv_num(r.kl_term),
                    lc::csv_num(r.reg_term), lc::csv_num(r.metric), alphas});
  }
  csv.write(path);
}

void write_collapse_report(const std::vector<lc::CollapseReport>& reports,
                           const std::string& path) {
  lc::CsvWriter csv({"layer", "alpha", "collapsed", "params_before",
                     "params_after", "gain_fraction", "macs_before",
                     "macs_after"});
  for (const auto& r : reports)
    csv.append_row({r.layer_name, lc::csv_num(r.alpha_at_collapse),
                    r.collapsed ? "1" : "0", std::to_string(r.params_before),
                    std::to_string(r.params_after),
                    lc::csv_num(r.gain_fraction),
                    std::to_string(r.macs_before),
                    std::to_string(r.macs_after)});
  csv.write(path);
}

int run_train(const lc::RunConfig& rc, bool with_teacher) {
  std::filesystem::create_directories(rc.output);
  lc::Dataset data = make_dataset(rc.data);
  lc::ModelGraph m = make_model(rc);
  std::optional<lc::Tensor> teacher_probs;
  if (with_teacher) {
    if (rc.model.checkpoint.empty())
      throw lc::ConfigError("finetune: model.checkpoint is required");
    lc::ModelGraph teacher = m.clone();
    teacher_probs = lc::teacher_probabilities(teacher, data.inputs);
    debug("froze teacher probabilities for " +
          std::to_string(data.size()) + " samples");
  }
  lc::TrainLog log = lc::train(m, data, rc.train, teacher_probs);
  write_train_log(log, rc.output + "/train_log.csv");
  lc::save_checkpoint(m, rc.output + "/model.lckp");
  if (log.diverged) {
    info("training diverged; parameters restored from the last stable epoch");
  }
  const double metric = lc::evaluate(m, data, data.val_idx);
  info(std::string(data.classification ? "val_accuracy=" : "val_mse=") +
       lc::csv_num(metric));
  info("wrote " + rc.output + "/train_log.csv and " + rc.output +
       "/model.lckp");
  return 0;
}

int run_collapse(const lc::RunConfig& rc) {
  if (rc.model.checkpoint.empty())
    throw lc::ConfigError("collapse: model.checkpoint is required");
  std::filesystem::create_directories(rc.output);
  lc::ModelGraph m = lc::load_checkpoint(rc.model.checkpoint);
  const std::uint64_t params_before = lc::count_params(m);
  auto reports = lc::collapse_model(m, rc.collapse);
  const std::uint64_t params_after = lc::count_params(m);
  write_collapse_report(reports, rc.output + "/collapse_report.csv");
  lc::save_checkpoint(m, rc.output + "/model.lckp");
  std::size_t fused = 0;
  for (const auto& r : reports)
    if (r.collapsed) ++fused;
  info("collapsed " + std::to_string(fused) + "/" +
       std::to_string(reports.size()) + " blocks, params " +
       std::to_string(params_before) + " -> " + std::to_string(params_after));
  info("wrote " + rc.output + "/collapse_report.csv and " + rc.output +
       "/model.lckp");
  return 0;
}

int run_eval(const lc::RunConfig& rc) {
  if (rc.model.checkpoint.empty())
    throw lc::ConfigError("eval: model.checkpoint is required");
  lc::Dataset data = make_dataset(rc.data);
  lc::ModelGraph m = lc::load_checkpoint(rc.model.checkpoint);
  const double train_metric = lc::evaluate(m, data, data.train_idx);
  const double val_metric = lc::evaluate(m, data, data.val_idx);
  const char* name = data.classification ? "accuracy" : "mse";
  std::cout << "train_" << name << "=" << lc::csv_num(train_metric) << "\n";
  std::cout << "val_" << name << "=" << lc::csv_num(val_metric) << "\n";
  std::cout << "params=" << lc::count_params(m) << "\n";
  std::cout << "macs=" << lc::count_macs(m) << "\n";
  return 0;
}

int run_gain_report(const std::string& family, std::uint64_t n_in,
                    std::uint64_t n_hidden, std::uint64_t n_out,
                    const std::string& out_path) {
  if (!family.empty()) {
    lc::ArchDescriptor d = lc::describe(family);
    lc::CsvWriter csv({"step", "site", "params_removed", "macs_removed",
                       "params_total", "macs_total"});
    csv.append_row({"baseline", "", "0", "0", std::to_string(d.total_params),
                    std::to_string(d.total_macs)});
    for (std::size_t i = 0; i < d.steps.size(); ++i) {
      auto [p, mcs] = lc::collapse_accounting(d, i + 1);
      std::string sites;
      for (std::size_t s = 0; s < d.steps[i].sites.size(); ++s) {
        if (s) sites += ';';
        sites += d.steps[i].sites[s].name;
      }
      csv.append_row({std::to_string(i + 1), sites,
                      std::to_string(d.steps[i].params_removed),
                      std::to_string(d.steps[i].macs_removed),
                      std::to_string(p), std::to_string(mcs)});
    }
    auto [ps, ms] = lc::mlp_share(d);
    info(family + ": params=" + std::to_string(d.total_params) +
         " macs=" + std::to_string(d.total_macs) +
         " collapsible_param_share=" + lc::csv_num(ps) +
         " collapsible_mac_share=" + lc::csv_num(ms));
    if (!out_path.empty()) {
      csv.write(out_path);
      info("wrote " + out_path);
    } else {
      std::cout << csv.str();
    }
    return 0;
  }
  if (n_in == 0 || n_hidden == 0 || n_out == 0)
    throw lc::ConfigError(
        "gain-report: give --family or all of --n-in --n-hidden --n-out");
  const double g = lc::dense_gain({n_in, n_hidden, n_out});
  std::cout << "dense_gain=" << lc::csv_num(g) << "\n";
  return 0;
}

int run_bound_check(std::uint64_t seed, std::size_t n_in, std::size_t hidden,
                    std::size_t n_out, double alpha, double delta,
                    std::size_t samples) {
  lc::Rng rng(seed);
  lc::CollapsibleBlock blk;
  blk.fc1 = lc::LinearLayer(lc::uniform_init({hidden, n_in}, n_in, rng),
                            lc::uniform_init({hidden}, n_in, rng));
  blk.act = lc::PReLULayer(alpha);
  blk.fc2 = lc::LinearLayer(lc::uniform_init({n_out, hidden}, hidden, rng),
                            lc::uniform_init({n_out}, hidden, rng));
  lc::Tensor x({samples, n_in});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
  lc::BoundReport r = lc::verify_bound(blk, x, delta, seed);
  std::cout << "delta=" << lc::csv_num(r.delta)
            << " alpha=" << lc::csv_num(r.alpha)
            << " x_delta=" << lc::csv_num(r.x_delta_norm)
            << " sigma_max=" << lc::csv_num(r.sigma_max)
            << " C=" << lc::csv_num(r.c_constant)
            << " violation_rate=" << lc::csv_num(r.violation_rate)
            << " n_eval=" << r.n_eval << "\n";
  if (r.violation_rate > r.delta)
    info("violation rate exceeds delta on this sample");
  return 0;
}

int run_sensitivity(const lc::RunConfig& rc) {
  std::filesystem::create_directories(rc.output);
  lc::Dataset data = make_dataset(rc.data);
  lc::ModelGraph m = make_model(rc);
  std::optional<lc::Tensor> teacher_probs;
  if (!rc.model.checkpoint.empty() && data.classification) {
    lc::ModelGraph teacher = m.clone();
    teacher_probs = lc::teacher_probabilities(teacher, data.inputs);
  }
  auto rows = lc::sensitivity_sweep(m, data, rc.train, teacher_probs);
  lc::CsvWriter csv({"layers_collapsed", "val_metric", "params"});
  for (const auto& r : rows)
    csv.append_row({std::to_string(r.layers_collapsed),
                    lc::csv_num(r.val_metric), std::to_string(r.params)});
  csv.write(rc.output + "/sensitivity.csv");
  lc::save_checkpoint(m, rc.output + "/model.lckp");
  info("wrote " + rc.output + "/sensitivity.csv");
  return 0;
}

int run_demo_fig1(std::uint64_t seed, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  lc::Fig1Config cfg;
  cfg.seed = seed;
  lc::Fig1Result res = lc::demo_fig1(cfg);
  lc::CsvWriter summary({"setting", "final_alpha", "train_mse", "val_mse"});
  for (const auto& s : res.settings)
    summary.append_row({s.name, lc::csv_num(s.final_alpha),
                        lc::csv_num(s.train_mse), lc::csv_num(s.val_mse)});
  summary.write(out_dir + "/fig1_summary.csv");
  std::vector<std::string> header{"x"};
  for (const auto& s : res.settings) header.push_back(s.name);
  lc::CsvWriter fits(header);
  for (std::size_t i = 0; i < res.grid.size(); ++i) {
    std::vector<std::string> row{lc::csv_num(res.grid[i])};
    for (const auto& s : res.settings) row.push_back(lc::csv_num(s.fit[i]));
    fits.append_row(row);
  }
  fits.write(out_dir + "/fig1_fits.csv");
  for (const auto& s : res.settings)
    info(s.name + ": alpha=" + lc::csv_num(s.final_alpha) +
         " train_mse=" + lc::csv_num(s.train_mse) +
         " val_mse=" + lc::csv_num(s.val_mse));
  info("wrote " + out_dir + "/fig1_summary.csv and " + out_dir +
       "/fig1_fits.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train, regularize, and collapse dense PReLU networks"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::uint64_t seed_flag = 0;
  double lc_flag = 0.0, tau_flag = 0.0;
  std::size_t epochs_flag = 0;
  std::string out_flag;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", config_path, "JSON run config");
    if (needs_config) c->required();
    sub->add_option("--seed", seed_flag, "override every seed in the config")
        ->each([&](const std::string&) { ov.seed = seed_flag; });
    sub->add_option("--lc", lc_flag, "override the regularization strength")
        ->each([&](const std::string&) { ov.lc_strength = lc_flag; });
    sub->add_option("--tau", tau_flag, "override the collapse tolerance")
        ->each([&](const std::string&) { ov.tau = tau_flag; });
    sub->add_option("--epochs", epochs_flag, "override the epoch count")
        ->each([&](const std::string&) { ov.epochs = epochs_flag; });
    sub->add_option("--out", out_flag, "override the output directory")
        ->each([&](const std::string&) { ov.out = out_flag; });
  };

  auto* train_cmd = app.add_subcommand("train", "train from scratch");
  add_common(train_cmd, true);
  auto* finetune_cmd = app.add_subcommand(
      "finetune", "fine-tune a checkpoint with distillation and the "
                  "linearity regularizer");
  add_common(finetune_cmd, true);
  auto* collapse_cmd =
      app.add_subcommand("collapse", "fuse every block within tolerance");
  add_common(collapse_cmd, true);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, true);
  auto* sens_cmd = app.add_subcommand(
      "sensitivity", "layer-by-layer collapse sweep with accuracy per stage");
  add_common(sens_cmd, true);

  auto* gain_cmd =
      app.add_subcommand("gain-report", "parameter/MAC reduction accounting");
  std::string family;
  std::uint64_t gr_in = 0, gr_hidden = 0, gr_out = 0;
  std::string gain_out;
  gain_cmd->add_option("--family", family,
                       "architecture family (vgg16, vit-t16, mixer-b16, ...)");
  gain_cmd->add_option("--n-in", gr_in, "block input width");
  gain_cmd->add_option("--n-hidden", gr_hidden, "block hidden width");
  gain_cmd->add_option("--n-out", gr_out, "block output width");
  gain_cmd->add_option("--out", gain_out, "CSV output path");

  auto* bound_cmd = app.add_subcommand(
      "bound-check", "empirical check of the collapse error bound");
  std::uint64_t b_seed = 0;
  std::size_t b_in = 8, b_hidden = 16, b_out = 4, b_samples = 10000;
  double b_alpha = 0.9, b_delta = 0.1;
  bound_cmd->add_option("--seed", b_seed, "seed for the block and the samples");
  bound_cmd->add_option("--n-in", b_in, "block input width");
  bound_cmd->add_option("--n-hidden", b_hidden, "block hidden width");
  bound_cmd->add_option("--n-out", b_out, "block output width");
  bound_cmd->add_option("--alpha", b_alpha, "PReLU slope");
  bound_cmd->add_option("--delta", b_delta, "bound confidence level");
  bound_cmd->add_option("--samples", b_samples, "number of input samples");

  auto* fig1_cmd = app.add_subcommand(
      "demo-fig1", "1-D regression demo over four PReLU slopes");
  std::uint64_t f_seed = 7;
  std::string f_out = "out";
  fig1_cmd->add_option("--seed", f_seed, "data and init seed");
  fig1_cmd->add_option("--out", f_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gain_cmd->parsed())
      return run_gain_report(family, gr_in, gr_hidden, gr_out, gain_out);
    if (bound_cmd->parsed())
      return run_bound_check(b_seed, b_in, b_hidden, b_out, b_alpha, b_delta,
                             b_samples);
    if (fig1_cmd->parsed()) return run_demo_fig1(f_seed, f_out);

    lc::RunConfig rc = lc::load_run_config(config_path);
    apply(rc, ov);
    if (train_cmd->parsed()) return run_train(rc, false);
    if (finetune_cmd->parsed()) return run_train(rc, true);
    if (collapse_cmd->parsed()) return run_collapse(rc);
    if (eval_cmd->parsed()) return run_eval(rc);
    if (sens_cmd->parsed()) return run_sensitivity(rc);
  } catch (const lc::Error& e) {
    std::cerr << e.category() << " error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
