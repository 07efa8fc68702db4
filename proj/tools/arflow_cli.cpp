// arflow: train, run and evaluate the coarse-to-fine flow deblurring model.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arflow/arflow.hpp"

namespace fs = std::filesystem;
using namespace arflow;

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,       // unknown flag or malformed argument
  kData = 3,        // unreadable or unusable input path
  kCheckpoint = 4,  // missing or corrupt checkpoint
  kVersion = 5,     // checkpoint written by another format version
  kInvalid = 6,     // configuration or argument rejected by a contract check
};

struct InferOptions {
  std::optional<std::size_t> down;
  std::optional<double> alpha;
  std::string steps;
  std::optional<std::uint64_t> seed;
  bool raw_weights = false;
};

void add_infer_options(CLI::App* cmd, InferOptions& o) {
  cmd->add_option("--down", o.down, "downsample factor d (default 1; 2 suggested for >= 2160p)");
  cmd->add_option("--alpha", o.alpha, "detail-layer weight in [0, 2]");
  cmd->add_option("--steps", o.steps, "comma-separated per-scale step counts, e.g. 4,2,1");
  cmd->add_option("--seed", o.seed, "noise seed");
  cmd->add_flag("--raw-weights", o.raw_weights, "use the live weights instead of the EMA shadow");
}

InferenceConfig make_inference_config(const InferOptions& o) {
  InferenceConfig cfg;
  if (o.down) cfg.down = *o.down;
  if (o.alpha) cfg.alpha = *o.alpha;
  if (!o.steps.empty()) cfg.schedule = parse_int_list("--steps", o.steps);
  if (o.seed) cfg.seed = *o.seed;
  cfg.ema_weights = !o.raw_weights;
  cfg.validate();
  return cfg;
}

/// Loads the weights selected by the inference config into a standalone net.
VFieldNet<float> load_net(const fs::path& ckpt, const InferenceConfig& cfg) {
  TrainState<float> st = load_checkpoint(ckpt);
  VFieldNet<float> net(st.cfg.net);
  net.copy_values_from(cfg.ema_weights ? st.ema : st.net);
  return net;
}

void require_dir_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw DataError(dir.string() + ": cannot create output directory");
}

std::string format_log(const StepResult& r) {
  char buf[256];
  auto part = [](bool on, double v) {
    char b[32];
    if (on) std::snprintf(b, sizeof b, "%.6g", v);
    else std::snprintf(b, sizeof b, "off");
    return std::string(b);
  };
  std::snprintf(buf, sizeof buf, "%.6g,%.6g,%s,%s,%.6g,%.6g,%d", r.log.flow, r.log.final,
                part(r.log.cons_enabled, r.log.cons).c_str(), part(r.log.cond_enabled, r.log.cond).c_str(),
                r.log.total, r.grad_norm, r.aborted ? 1 : 0);
  return buf;
}

int cmd_train(const fs::path& config, const fs::path& data, const fs::path& out) {
  if (!fs::exists(config)) throw DataError(config.string() + ": config file not found");
  const TrainConfig cfg = load_train_config(config);
  const auto pairs = load_pairs(DatasetIndex::scan(data));
  require_dir_writable(out);

  TrainState<float> st(cfg);
  const std::size_t total = planned_steps(cfg, pairs.size());
  std::ofstream log(out / "train_log.csv");
  if (!log) throw DataError((out / "train_log.csv").string() + ": cannot open for writing");
  log << "step,flow,final,cons,cond,total,grad_norm,aborted\n";
  std::cout << "training " << total << " steps on " << pairs.size() << " pairs, " << st.net.parameter_count()
            << " parameters\n";

  const auto t0 = std::chrono::steady_clock::now();
  train_loop(st, pairs, total, [&](std::size_t i, const StepResult& r) {
    log << i + 1 << ',' << format_log(r) << '\n';
    if (r.aborted) std::cerr << "warning: step " << i + 1 << " skipped, non-finite loss\n";
    if (cfg.log_every && ((i + 1) % cfg.log_every == 0 || i + 1 == total)) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("step %zu/%zu  flow %.4f  final %.4f  cons %.4f  cond %.4f  total %.4f  (%.0fs)\n", i + 1, total,
                  r.log.flow, r.log.final, r.log.cons, r.log.cond, r.log.total, sec);
      std::fflush(stdout);
    }
    if (cfg.save_every && (i + 1) % cfg.save_every == 0) save_checkpoint(st, out / "model.ckpt");
  });
  save_checkpoint(st, out / "model.ckpt");
  std::cout << "wrote " << (out / "model.ckpt").string() << "\n";
  return kOk;
}

int cmd_infer(const fs::path& ckpt, const fs::path& in, const fs::path& out, const InferOptions& opt) {
  const InferenceConfig cfg = make_inference_config(opt);
  if (!fs::exists(in)) throw DataError(in.string() + ": input not found");
  const VFieldNet<float> net = load_net(ckpt, cfg);
  require_dir_writable(out);

  std::vector<std::pair<fs::path, fs::path>> jobs;  // source, destination
  if (fs::is_directory(in)) {
    for (const auto& e : fs::recursive_directory_iterator(in))
      if (e.is_regular_file() && is_image_path(e.path())) jobs.emplace_back(e.path(), out / fs::relative(e.path(), in));
    std::sort(jobs.begin(), jobs.end());
  } else {
    jobs.emplace_back(in, out / in.filename());
  }
  for (const auto& [src, dst] : jobs) {
    const Image blur = read_image(src);
    fs::create_directories(dst.parent_path());
    DeblurStats stats;
    write_image(deblur_image(blur, net, cfg, &stats), dst);
    std::cout << src.string() << " -> " << dst.string() << " (" << stats.scales << " scales, "
              << stats.field_evaluations << " field evaluations)\n";
  }
  return kOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data, const fs::path& report, const InferOptions& opt) {
  const InferenceConfig cfg = make_inference_config(opt);
  const auto index = DatasetIndex::scan(data);
  const VFieldNet<float> net = load_net(ckpt, cfg);
  if (report.has_parent_path()) require_dir_writable(report.parent_path());
  std::ofstream csv(report);
  if (!csv) throw DataError(report.string() + ": cannot open for writing");
  csv << "file,psnr,ssim,ms\n";

  double sum_psnr = 0, sum_ssim = 0, sum_blur = 0;
  for (const auto& p : index.pairs) {
    const Image blur = read_image(p.blur), sharp = read_image(p.sharp);
    if (blur.width != sharp.width || blur.height != sharp.height)
      throw DataError(p.blur.string() + ": blur and sharp differ in size");
    const auto t0 = std::chrono::steady_clock::now();
    const Image restored = deblur_image(blur, net, cfg);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const double ps = capped_psnr(psnr(restored, sharp)), ss = ssim(restored, sharp);
    sum_psnr += ps;
    sum_ssim += ss;
    sum_blur += capped_psnr(psnr(blur, sharp));
    char row[512];
    std::snprintf(row, sizeof row, "%s,%.6f,%.6f,%.3f\n", p.blur.filename().string().c_str(), ps, ss, ms);
    csv << row;
  }
  const double n = static_cast<double>(index.pairs.size());
  std::printf("%zu images  psnr %.4f dB (blurry %.4f dB)  ssim %.4f\n", index.pairs.size(), sum_psnr / n,
              sum_blur / n, sum_ssim / n);
  return kOk;
}

int cmd_synth(const fs::path& out, const SynthConfig& cfg) {
  write_synthetic_dataset(out, cfg);
  std::cout << "wrote " << cfg.count << " pairs to " << out.string() << "\n";
  return kOk;
}

int fail(int code, const std::string& kind, const std::string& what) {
  std::cerr << "arflow: " << kind << ": " << what << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine flow-matching image deblurring"};
  app.set_version_flag("--version", "arflow checkpoint format " + std::to_string(kCheckpointVersion));
  app.require_subcommand(1);

  std::string config, data, out, ckpt, in, report;
  InferOptions infer_opt, eval_opt;
  SynthConfig synth;

  auto* train = app.add_subcommand("train", "train a model on a paired dataset");
  train->add_option("--config", config, "key = value training config")->required();
  train->add_option("--data", data, "dataset root with blur/ and sharp/")->required();
  train->add_option("--out", out, "checkpoint directory")->required();

  auto* infer = app.add_subcommand("infer", "deblur an image or a directory tree");
  infer->add_option("--ckpt", ckpt, "checkpoint file")->required();
  infer->add_option("--in", in, "input image or directory")->required();
  infer->add_option("--out", out, "output directory")->required();
  add_infer_options(infer, infer_opt);

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a paired dataset");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--data", data, "dataset root with blur/ and sharp/")->required();
  eval->add_option("--report", report, "CSV output (file,psnr,ssim,ms)")->required();
  add_infer_options(eval, eval_opt);

  auto* syn = app.add_subcommand("synth", "generate a synthetic blur/sharp dataset");
  syn->add_option("--out", out, "dataset root")->required();
  syn->add_option("--count", synth.count, "number of pairs")->required();
  syn->add_option("--size", synth.size, "square image side")->required();
  syn->add_option("--blur-sigma", synth.blur_sigma, "Gaussian blur sigma")->required();
  syn->add_option("--seed", synth.seed, "generator seed");
  syn->add_option("--shapes", synth.shapes, "shapes per image");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ExtrasError& e) {
    return fail(kUsage, "unknown flag", e.what());
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    if (train->parsed()) return cmd_train(config, data, out);
    if (infer->parsed()) return cmd_infer(ckpt, in, out, infer_opt);
    if (eval->parsed()) return cmd_eval(ckpt, data, report, eval_opt);
    if (syn->parsed()) return cmd_synth(out, synth);
  } catch (const CheckpointVersionError& e) {
    return fail(kVersion, "checkpoint version mismatch", e.what());
  } catch (const CheckpointError& e) {
    return fail(kCheckpoint, "bad checkpoint", e.what());
  } catch (const DataError& e) {
    return fail(kData, "unreadable input", e.what());
  } catch (const ContractError& e) {
    return fail(kInvalid, "invalid argument", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "error", e.what());
  }
  return kFailure;
}
