// lvfsr: synthetic data, training, inference, evaluation, gradient checks and
// ablation sweeps from one binary. Errors go to stderr as a single line
// `error: <kind>: <message>` with a nonzero exit code.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lvfsr/lvfsr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lvfsr;

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;

void print_config(const std::string& command, const json& resolved) {
  std::cout << "config " << command << " " << resolved.dump() << "\n" << std::flush;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t count = 8;
  std::size_t hr_size = 64;
  std::size_t scale = 8;
  std::uint64_t seed = 0;
  bool informative = true;
  std::size_t tokens = 16;
  bool write_lr = false;
};

void run_synth(const SynthArgs& a) {
  SynthDataConfig cfg;
  cfg.count = a.count;
  cfg.hr_size = a.hr_size;
  cfg.scale = a.scale;
  cfg.seed = a.seed;
  cfg.informative = a.informative;
  cfg.priors.description_tokens = a.tokens;
  print_config("synth-data", {{"out", a.out},
                              {"count", a.count},
                              {"hr_size", a.hr_size},
                              {"scale", a.scale},
                              {"seed", a.seed},
                              {"informative", a.informative},
                              {"tokens", a.tokens},
                              {"write_lr", a.write_lr}});
  write_synthetic_dataset(a.out, cfg);
  if (a.write_lr) {
    // Bicubic LR copies under <out>/lr/<split>/ for single-image inference.
    for (const std::string split : {"train", "test"}) {
      const fs::path dir = fs::path(a.out) / "lr" / split;
      fs::create_directories(dir);
      for (const auto& id : read_manifest(fs::path(a.out) / (split + ".txt")))
        save_ppm(dir / (id + ".ppm"), degrade(load_ppm(fs::path(a.out) / "hr" / split / (id + ".ppm")), a.scale));
    }
  }
  std::cout << "wrote " << a.count << " train and " << a.count << " test images to " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string resume;
};

void run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (!a.data.empty()) cfg.data_root = a.data;
  if (a.seed) cfg.seed = *a.seed;
  if (a.steps) cfg.max_steps = *a.steps;
  cfg.validate();
  json resolved = to_json(cfg);
  resolved["out"] = a.out;
  if (!a.resume.empty()) resolved["resume"] = a.resume;
  print_config("train", resolved);

  TrainOptions options;
  options.out_dir = a.out;
  if (!a.resume.empty()) options.resume = fs::path(a.resume);
  const auto samples = load_split(cfg.data_root, "train", cfg.scale, cfg.network.mask_classes);
  const TrainResult r = train_loop(cfg, samples, options);
  std::cout << "steps " << r.checkpoint.step << " (" << r.steps_per_epoch << " per epoch)\n";
  if (!r.losses.empty()) std::cout << "final_loss " << format_loss(r.losses.back()) << "\n";
  std::cout << "checkpoint " << (fs::path(a.out) / "final.lvck").string() << "\n";
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint;
  std::string lr_image;
  std::string priors;
  std::string id;
  std::string data;
  std::string split = "test";
  std::string out;
  std::uint64_t seed = 0;
};

Tensor<float> super_resolve(const Network<float>& net, const Tensor<float>& lr, const PriorBundle& bundle) {
  NoGradGuard no_grad;
  return net.forward(lr, bundle);
}

void run_infer(const InferArgs& a) {
  const bool single = !a.lr_image.empty();
  require(single != !a.data.empty(), ErrorKind::usage, "infer needs exactly one of --lr-image or --data");
  if (single) require(!a.priors.empty(), ErrorKind::usage, "--lr-image needs --priors <dir>");
  print_config("infer", {{"checkpoint", a.checkpoint},
                         {"lr_image", a.lr_image},
                         {"priors", a.priors},
                         {"id", a.id},
                         {"data", a.data},
                         {"split", a.split},
                         {"out", a.out},
                         {"seed", a.seed}});
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  Network<float> net(ckpt.config, ckpt.seed);
  restore_checkpoint(ckpt, net);
  const PriorLoadOptions load{ckpt.config.mask_classes, ckpt.config.lr_height, ckpt.config.lr_width};

  if (single) {
    const std::string id = a.id.empty() ? fs::path(a.lr_image).stem().string() : a.id;
    const Tensor<float> lr = load_ppm(a.lr_image);
    const PriorBundle bundle = load_prior_bundle(a.priors, id, load);
    save_ppm(a.out, super_resolve(net, lr, bundle));
    std::cout << "wrote " << a.out << "\n";
    return;
  }
  // Batch mode: LR inputs are degraded from the split's HR images.
  const fs::path root = a.data;
  std::error_code ec;
  fs::create_directories(a.out, ec);
  require(fs::is_directory(a.out), ErrorKind::io, "cannot create output directory " + a.out);
  const auto ids = read_manifest(root / (a.split + ".txt"));
  require(!ids.empty(), ErrorKind::io, "split '" + a.split + "' is empty");
  for (const auto& id : ids) {
    const Tensor<float> lr = degrade(load_ppm(root / "hr" / a.split / (id + ".ppm")), ckpt.config.scale);
    const PriorBundle bundle = load_prior_bundle(root / "priors" / a.split, id, load);
    save_ppm(fs::path(a.out) / (id + ".ppm"), super_resolve(net, lr, bundle));
  }
  std::cout << "wrote " << ids.size() << " images to " << a.out << "\n";
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string report;
  std::uint64_t seed = 0;
};

void run_eval(const EvalArgs& a) {
  print_config("eval", {{"pred", a.pred}, {"gt", a.gt}, {"report", a.report}, {"seed", a.seed},
                        {"threads", worker_count()}});
  const MetricReport report = eval_dir(a.pred, a.gt);
  if (!a.report.empty()) save_report(a.report, report);
  std::cout << "images " << report.records.size() << "\n";
  std::cout << "mean_psnr " << format_fixed(report.mean_psnr) << "\n";
  std::cout << "mean_ssim " << format_fixed(report.mean_ssim) << "\n";
}

// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::string target = "lvpfb";
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  std::size_t max_entries = 0;
};

void run_gradcheck(const GradCheckArgs& a) {
  print_config("gradcheck", {{"target", a.target}, {"seed", a.seed}, {"tolerance", a.tolerance}, {"eps", 1e-4},
                              {"max_entries", a.max_entries}});
  double worst = 0.0;
  auto report = [&](const std::string& name, const GradCheckResult& r) {
    std::printf("%-20s max_rel_err %.3e  (%zu entries, worst %s[%zu])\n", name.c_str(), r.max_rel_err, r.entries,
                r.worst_parameter.c_str(), r.worst_index);
    worst = std::max(worst, r.max_rel_err);
  };
  if (a.target == "op") {
    for (const auto& c : op_gradchecks(a.seed)) report(c.name, c.result);
  } else if (a.target == "lvpfb") {
    report("lvpfb", lvpfb_gradcheck(a.seed));
  } else if (a.target == "network") {
    report("network", network_gradcheck(a.seed, gradcheck_network_config(), 2, a.max_entries));
  } else {
    fail(ErrorKind::usage, "--target must be op, lvpfb or network, got '" + a.target + "'");
  }
  std::printf("max_rel_err %.6e\n", worst);
  std::fflush(stdout);
  require(worst < a.tolerance, ErrorKind::numeric,
          "gradient check failed: max_rel_err " + std::to_string(worst) + " >= " + std::to_string(a.tolerance));
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string variants = "model1_no_prior,model2_concat,full";
  std::size_t steps = 300;
  std::size_t seeds = 3;
  std::uint64_t seed = 0;
  std::string report;
  std::string data;
  std::string config;
  std::string work;
};

void run_ablate(const AblateArgs& a) {
  TrainConfig cfg = a.config.empty() ? ablation_train_config() : load_train_config(a.config);
  AblationOptions opt;
  opt.variants = split_list(a.variants);
  for (auto& v : opt.variants) v = to_string(parse_variant(v));
  opt.steps = a.steps;
  opt.seeds = a.seeds;
  opt.base_seed = a.seed;
  const fs::path work = a.work.empty() ? fs::path(a.report).parent_path() / "ablation_runs" : fs::path(a.work);
  opt.work_dir = work;
  fs::path data = a.data;
  json resolved = to_json(cfg);
  resolved["variants"] = opt.variants;
  resolved["steps"] = a.steps;
  resolved["seeds"] = a.seeds;
  resolved["base_seed"] = a.seed;
  resolved["report"] = a.report;
  resolved["work"] = work.string();
  if (data.empty()) {
    data = work / "data";
    resolved["data"] = "generated at " + data.string();
  } else {
    resolved["data"] = data.string();
  }
  print_config("ablate", resolved);
  if (a.data.empty()) write_synthetic_dataset(data, ablation_data_config());
  const auto samples = load_split(data, "train", cfg.scale, cfg.network.mask_classes);
  opt.on_row = [](const AblationRow& r) {
    std::printf("%-16s seed %llu  train_l1 %.6f  train_psnr %.4f\n", r.variant.c_str(),
                static_cast<unsigned long long>(r.seed), r.final_loss, r.train_psnr);
    std::fflush(stdout);
  };
  const AblationResult result = run_ablation(cfg, samples, opt);
  const std::string table = encode_ablation(result);
  io::write_bytes_atomic(a.report, table);
  std::cout << table;
}

[[noreturn]] void die(ErrorKind kind, const std::string& message) {
  std::cerr << "error: " << to_string(kind) << ": " << message << "\n";
  std::exit(kind == ErrorKind::usage ? kExitUsage : kExitError);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prior-guided face super-resolution toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "Generate a synthetic face dataset with priors");
  s->add_option("--out", synth.out, "Dataset root to create")->required();
  s->add_option("--count", synth.count, "Images per split")->check(CLI::PositiveNumber);
  s->add_option("--hr-size", synth.hr_size, "HR image side in pixels")->check(CLI::PositiveNumber);
  s->add_option("--scale", synth.scale, "Downsampling factor")->check(CLI::IsMember({8, 16}));
  s->add_option("--seed", synth.seed, "Generator seed");
  s->add_option("--informative", synth.informative, "Description tokens carry HR patch content (true) or noise (false)");
  s->add_option("--tokens", synth.tokens, "Description tokens per image (a perfect square)")->check(CLI::Range(1, 77));
  s->add_flag("--write-lr", synth.write_lr, "Also write bicubic LR images under <out>/lr/<split>/");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a network");
  t->add_option("--config", train.config, "JSON training config (defaults: lr 2e-4, betas 0.9/0.99, eps 1e-8, 30 epochs, batch 4)");
  t->add_option("--data", train.data, "Dataset root (overrides data_root)");
  t->add_option("--out", train.out, "Output directory for logs and checkpoints")->required();
  t->add_option("--seed", train.seed, "Seed (overrides the config seed, default 0)");
  t->add_option("--steps", train.steps, "Stop after this many steps (overrides epochs)");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Super-resolve one image or a whole split");
  i->add_option("--checkpoint", infer.checkpoint, "Trained checkpoint (.lvck)")->required();
  i->add_option("--lr-image", infer.lr_image, "Single LR image (.ppm)");
  i->add_option("--priors", infer.priors, "Prior directory holding <id>.{mask,depth,cap,desc}.ten");
  i->add_option("--id", infer.id, "Image id for prior lookup (default: LR file stem)");
  i->add_option("--data", infer.data, "Dataset root for batch mode");
  i->add_option("--split", infer.split, "Split for batch mode");
  i->add_option("--out", infer.out, "Output .ppm (single) or directory (batch)")->required();
  i->add_option("--seed", infer.seed, "Accepted for uniformity; inference is deterministic");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score predictions against ground truth (PSNR, SSIM)");
  e->add_option("--pred", eval.pred, "Directory of predicted <id>.ppm")->required();
  e->add_option("--gt", eval.gt, "Directory of ground-truth <id>.ppm")->required();
  e->add_option("--report", eval.report, "Report file to write");
  e->add_option("--seed", eval.seed, "Accepted for uniformity; evaluation is deterministic");

  GradCheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient check in double precision");
  g->add_option("--target", gc.target, "op, lvpfb or network")->check(CLI::IsMember({"op", "lvpfb", "network"}));
  g->add_option("--seed", gc.seed, "Seed for parameters and inputs");
  g->add_option("--tolerance", gc.tolerance, "Maximum accepted relative error");
  g->add_option("--max-entries", gc.max_entries, "Network target: entries checked per parameter tensor (0 = all)");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "Train variants over several seeds and tabulate their losses");
  b->add_option("--variants", ab.variants, "Comma-separated variant tags");
  b->add_option("--steps", ab.steps, "Training steps per run")->check(CLI::PositiveNumber);
  b->add_option("--seeds", ab.seeds, "Seeds per variant")->check(CLI::PositiveNumber);
  b->add_option("--seed", ab.seed, "First seed");
  b->add_option("--report", ab.report, "Comparison table to write")->required();
  b->add_option("--data", ab.data, "Dataset root (default: generate informative synthetic data)");
  b->add_option("--config", ab.config, "JSON training config (default: the built-in ablation recipe)");
  b->add_option("--work", ab.work, "Directory for per-run logs (default: next to the report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& err) {
    std::string msg = err.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    die(ErrorKind::usage, msg);
  }

  try {
    if (*s) run_synth(synth);
    if (*t) run_train(train);
    if (*i) run_infer(infer);
    if (*e) run_eval(eval);
    if (*g) run_gradcheck(gc);
    if (*b) run_ablate(ab);
  } catch (const Error& err) {
    die(err.kind(), err.what());
  } catch (const std::exception& err) {
    die(ErrorKind::io, err.what());
  }
  return 0;
}
