#pragma once

// Command-line front end. Every command writes machine-readable results to
// `out` and human diagnostics to `err`, and returns an ExitStatus.

#include <cstdint>
#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusionop/dsl.hpp"
#include "fusionop/graph.hpp"
#include "fusionop/oracle.hpp"
#include "fusionop/search.hpp"
#include "fusionop/trainer.hpp"

namespace fusionop::cli {

enum class ExitStatus : int { ok = 0, check_failed = 1, usage = 2, io = 3 };

inline constexpr double kEquivalenceTolerance = 1e-10;
inline constexpr double kGradientTolerance = 1e-4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A spec given either as a file path or as a preset name.
struct SpecSource {
  std::string path;
  std::string preset;
};

inline FusionSpec load_spec(const SpecSource& src) {
  if (!src.preset.empty() && !src.path.empty()) throw UsageError("give either a spec path or --preset, not both");
  if (!src.preset.empty()) {
    const auto presets = builtin_presets();
    auto it = presets.find(src.preset);
    if (it == presets.end()) throw UsageError("unknown preset '" + src.preset + "'");
    return it->second;
  }
  if (src.path.empty()) throw UsageError("a spec path or --preset is required");
  const std::string text = read_file(src.path);
  try {
    return parse_spec(text);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.column(), e.length(), src.path + ": " + e.message());
  }
}

/// Maps an in-flight exception to an exit status, reporting it on `err`.
inline ExitStatus report(std::ostream& err) {
  try {
    throw;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return ExitStatus::usage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return ExitStatus::io;
  } catch (const ParseError& e) {
    err << "error: " << e.line() << ':' << e.column() << ": " << e.message() << '\n';
    return ExitStatus::check_failed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return ExitStatus::check_failed;
  }
}

// --- validate ---------------------------------------------------------------

inline ExitStatus cmd_validate(const SpecSource& src, std::ostream&, std::ostream& err) {
  try {
    const FusionSpec spec = load_spec(src);
    const auto violations = validate_spec(spec);
    for (const auto& v : violations) err << v.location << ": " << v.message << '\n';
    return violations.empty() ? ExitStatus::ok : ExitStatus::check_failed;
  } catch (...) {
    return report(err);
  }
}

// --- presets ----------------------------------------------------------------

inline ExitStatus cmd_presets(const std::string& name, std::ostream& out, std::ostream& err) {
  const auto presets = builtin_presets();
  if (!name.empty()) {
    auto it = presets.find(name);
    if (it == presets.end()) {
      err << "error: unknown preset '" << name << "'\n";
      return ExitStatus::usage;
    }
    out << serialize_spec(it->second);
    return ExitStatus::ok;
  }
  for (const auto& [n, spec] : presets) {
    nlohmann::ordered_json j;
    j["name"] = n;
    j["spec"] = serialize_spec(spec);
    out << j.dump() << '\n';
  }
  return ExitStatus::ok;
}

// --- oracle-check -----------------------------------------------------------

struct OracleCheckOptions {
  SpecSource spec;
  std::size_t seeds = 100;
  std::string dims = "small";
  bool force_identity = false;
  std::uint64_t seed = 0;
  bool corrupt_n2 = false;  // negative control
};

inline ExitStatus cmd_oracle_check(const OracleCheckOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.seeds == 0) throw UsageError("--seeds must be >= 1");
    if (opt.dims != "small" && opt.dims != "spec") throw UsageError("--dims must be 'small' or 'spec'");
    FusionSpec spec = load_spec(opt.spec);
    if (!oracle::is_identity_form(spec)) {
      if (!opt.force_identity) {
        throw UsageError("spec is not in plain Hadamard form (identity activations, no post-fusion network, "
                         "one sum step); pass --force-identity to check its identity form");
      }
      spec = oracle::identity_form(spec);
    }
    std::function<void(ParamStore&)> tamper;
    if (opt.corrupt_n2) {
      const std::string name = param_names::N(std::min<std::size_t>(2, spec.rank()));
      tamper = [name](ParamStore& p) { p.at(name)[0] += 0.5; };
    }
    const auto rep = oracle::equivalence_check(spec, opt.seeds, opt.seed, opt.dims == "small", tamper);
    const bool pass = rep.max_rel_err <= kEquivalenceTolerance;
    nlohmann::ordered_json j;
    j["check"] = "tucker_equivalence";
    j["seeds"] = rep.seeds;
    j["max_rel_err"] = rep.max_rel_err;
    j["tolerance"] = kEquivalenceTolerance;
    j["pass"] = pass;
    out << j.dump() << '\n';
    if (!pass) err << "hadamard form disagrees with the core-tensor contraction: max relative error " << rep.max_rel_err << '\n';
    return pass ? ExitStatus::ok : ExitStatus::check_failed;
  } catch (...) {
    return report(err);
  }
}

// --- grad-check -------------------------------------------------------------

struct GradCheckOptions {
  SpecSource spec;
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
  bool inject_sign_error = false;  // negative control
};

inline ExitStatus cmd_grad_check(const GradCheckOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.seeds == 0) throw UsageError("--seeds must be >= 1");
    const FusionSpec spec = load_spec(opt.spec);
    std::function<void(GradStore&)> tamper;
    if (opt.inject_sign_error) {
      tamper = [](GradStore& g) {
        for (auto& x : g.at("M_1").data()) x = -x;
      };
    }
    const auto rep = oracle::grad_check(spec, opt.seeds, opt.seed, {}, tamper);
    const bool pass = rep.max_rel_err <= kGradientTolerance;
    nlohmann::ordered_json j;
    j["check"] = "gradient";
    j["instances"] = rep.instances;
    j["coordinates"] = rep.coordinates;
    j["max_rel_err"] = rep.max_rel_err;
    j["tolerance"] = kGradientTolerance;
    j["pass"] = pass;
    j["worst"] = {{"param", rep.worst_param}, {"index", rep.worst_index}, {"instance", rep.worst_instance}};
    out << j.dump() << '\n';
    if (!pass) {
      err << "gradient mismatch: worst coordinate " << rep.worst_param << '[' << rep.worst_index
          << "] (instance " << rep.worst_instance << ") relative error " << rep.max_rel_err << '\n';
    }
    return pass ? ExitStatus::ok : ExitStatus::check_failed;
  } catch (...) {
    return report(err);
  }
}

// --- gen-data ---------------------------------------------------------------

struct GenDataOptions {
  SpecSource spec;
  std::uint64_t teacher_seed = 0;
  std::size_t n = 0;
  double scale = 1.0;
  std::uint64_t seed = 0;
  std::string out_path;
};

inline ExitStatus cmd_gen_data(const GenDataOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.n == 0) throw UsageError("--n must be >= 1");
    if (!(opt.scale > 0)) throw UsageError("--scale must be > 0");
    if (opt.out_path.empty()) throw UsageError("--out is required");
    const FusionSpec teacher = load_spec(opt.spec);
    const Dataset ds = generate_synthetic_dataset(teacher, opt.teacher_seed, opt.n, opt.scale, opt.seed);
    write_dataset(opt.out_path, ds);
    std::vector<std::size_t> hist(ds.n_classes, 0);
    for (const auto& ex : ds.examples) ++hist[ex.label];
    nlohmann::ordered_json j;
    j["examples"] = ds.size();
    j["classes_present"] = std::count_if(hist.begin(), hist.end(), [](std::size_t c) { return c > 0; });
    j["histogram"] = hist;
    out << j.dump() << '\n';
    return ExitStatus::ok;
  } catch (...) {
    return report(err);
  }
}

// --- train ------------------------------------------------------------------

struct TrainOptions {
  SpecSource spec;
  std::string train_path;
  std::string val_path;
  TrainConfig cfg;
  std::string out_path;  // metrics JSON-lines
};

inline ExitStatus cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.train_path.empty() || opt.val_path.empty()) throw UsageError("--train and --val are required");
    const FusionSpec spec = load_spec(opt.spec);
    const Dataset train_set = read_dataset(opt.train_path);
    const Dataset val_set = read_dataset(opt.val_path);
    const auto result = train(spec, train_set, val_set, opt.cfg);
    const std::string lines = metrics_jsonl(result.metrics);
    if (!opt.out_path.empty()) write_file(opt.out_path, lines);
    nlohmann::ordered_json j;
    j["epochs_run"] = result.metrics.epochs.size();
    j["best_epoch"] = result.metrics.best_epoch;
    j["val_acc"] = result.metrics.best_val_acc();
    out << j.dump() << '\n';
    err << "trained " << result.metrics.epochs.size() << " epochs in " << result.metrics.wall_time_s << " s\n";
    return ExitStatus::ok;
  } catch (...) {
    return report(err);
  }
}

// --- search -----------------------------------------------------------------

struct SearchOptions {
  SpecSource spec;  // base spec for --grid
  bool grid = false;
  bool random = false;
  std::size_t probe = 0;
  std::size_t budget = 10;
  SearchSpace space;
  std::string train_path;
  std::string val_path;
  SearchConfig cfg;
  std::string out_path;  // results JSON-lines
};

inline ExitStatus cmd_search(const SearchOptions& opt, std::ostream& out, std::ostream& err) {
  try {
    if (opt.grid == opt.random) throw UsageError("choose exactly one of --grid or --random");
    if (opt.train_path.empty() || opt.val_path.empty()) throw UsageError("--train and --val are required");
    const Dataset train_set = read_dataset(opt.train_path);
    const Dataset val_set = read_dataset(opt.val_path);
    std::vector<FusionSpec> candidates;
    if (opt.grid) {
      const FusionSpec base = load_spec(opt.spec);
      check_dims(base, train_set, "training set");
      if (opt.probe >= base.rank()) throw UsageError("--probe is out of range for the base spec");
      candidates = grid_nonlinearity_pairs(base, opt.probe);
    } else {
      SearchSpace space = opt.space;
      space.d_q = train_set.d_q;
      space.d_v = train_set.d_v;
      space.n_classes = train_set.n_classes;
      if (opt.budget == 0) throw UsageError("--budget must be >= 1");
      candidates = random_search(space, opt.cfg.train.seed, opt.budget);
    }
    const auto results = run_search(candidates, train_set, val_set, opt.cfg);
    const std::string lines = results_jsonl(results);
    if (!opt.out_path.empty()) write_file(opt.out_path, lines);
    std::size_t failed = 0;
    for (const auto& r : results) {
      if (r.failed()) {
        ++failed;
        err << "candidate " << r.candidate_index << " failed: " << r.error << '\n';
      }
    }
    nlohmann::ordered_json j;
    j["candidates"] = results.size();
    j["failed"] = failed;
    if (results.front().failed()) {
      j["best_val_acc"] = nullptr;
    } else {
      j["best_val_acc"] = results.front().val_accuracy;
    }
    out << j.dump() << '\n';
    return ExitStatus::ok;
  } catch (...) {
    return report(err);
  }
}

// --- argument parsing -------------------------------------------------------

/// Parses `args` (without the program name) and runs the chosen command.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multimodal fusion operator toolkit: specs, checks, training and search", "fusionop"};
  app.require_subcommand(1);

  SpecSource validate_src;
  auto* validate = app.add_subcommand("validate", "Parse and validate a spec file");
  validate->add_option("spec", validate_src.path, "Spec file");
  validate->add_option("--preset", validate_src.preset, "Built-in preset name");

  std::string preset_name;
  auto* presets = app.add_subcommand("presets", "List built-in presets with their canonical text");
  presets->add_option("--preset,--name", preset_name, "Print only this preset's canonical text");

  OracleCheckOptions oc;
  auto* oracle_check = app.add_subcommand("oracle-check", "Hadamard form vs. explicit core-tensor contraction");
  oracle_check->add_option("spec", oc.spec.path, "Spec file");
  oracle_check->add_option("--preset", oc.spec.preset, "Built-in preset name");
  oracle_check->add_option("--seeds", oc.seeds, "Number of random instances")->capture_default_str();
  oracle_check->add_option("--dims", oc.dims, "small: random small dims; spec: the spec's own dims")
      ->capture_default_str();
  oracle_check->add_flag("--force-identity", oc.force_identity, "Check the identity form of a non-identity spec");
  oracle_check->add_option("--seed", oc.seed, "Base seed")->capture_default_str();
  oracle_check->add_flag("--corrupt-n2", oc.corrupt_n2, "Negative control: perturb N_2 on the engine side")
      ->group("");

  GradCheckOptions gc;
  auto* grad_check = app.add_subcommand("grad-check", "Reverse-mode gradients vs. central finite differences");
  grad_check->add_option("spec", gc.spec.path, "Spec file");
  grad_check->add_option("--preset", gc.spec.preset, "Built-in preset name");
  grad_check->add_option("--seeds", gc.seeds, "Number of random small instances")->capture_default_str();
  grad_check->add_option("--seed", gc.seed, "Base seed")->capture_default_str();
  grad_check->add_flag("--inject-sign-error", gc.inject_sign_error, "Negative control: negate dL/dM_1")->group("");

  GenDataOptions gd;
  auto* gen_data = app.add_subcommand("gen-data", "Write a teacher-labelled synthetic dataset");
  gen_data->add_option("spec", gd.spec.path, "Teacher spec file");
  gen_data->add_option("--preset", gd.spec.preset, "Built-in preset name");
  gen_data->add_option("--teacher-seed", gd.teacher_seed, "Teacher parameter seed")->capture_default_str();
  gen_data->add_option("--n", gd.n, "Number of examples")->required();
  gen_data->add_option("--scale", gd.scale, "Input standard deviation")->capture_default_str();
  gen_data->add_option("--seed", gd.seed, "Input sampling seed")->capture_default_str();
  gen_data->add_option("--out", gd.out_path, "Output dataset file")->required();

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a spec with Adam, keeping the best-validation epoch");
  train_cmd->add_option("spec", tr.spec.path, "Spec file");
  train_cmd->add_option("--preset", tr.spec.preset, "Built-in preset name");
  train_cmd->add_option("--train", tr.train_path, "Training dataset")->required();
  train_cmd->add_option("--val", tr.val_path, "Validation dataset")->required();
  train_cmd->add_option("--lr", tr.cfg.lr, "Learning rate")->capture_default_str();
  train_cmd->add_option("--batch", tr.cfg.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--epochs", tr.cfg.max_epochs, "Maximum epochs")->capture_default_str();
  train_cmd->add_option("--patience", tr.cfg.patience, "Stop after this many epochs without improvement (0: never)")
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.cfg.seed, "Initialisation, shuffle and dropout seed")->capture_default_str();
  train_cmd->add_option("--out", tr.out_path, "Metrics JSON-lines file");

  SearchOptions so;
  auto* search = app.add_subcommand("search", "Screen candidate specs with a short training budget");
  search->add_option("spec", so.spec.path, "Base spec file (--grid)");
  search->add_option("--preset", so.spec.preset, "Built-in preset name (--grid)");
  search->add_flag("--grid", so.grid, "Grid over the 25 nonlinearity pairs of the probe branch");
  search->add_flag("--random", so.random, "Random samples from the design space");
  search->add_option("--probe", so.probe, "Probe branch index (0-based) for --grid")->capture_default_str();
  search->add_option("--budget", so.budget, "Number of random candidates")->capture_default_str();
  search->add_option("--t-min", so.space.t_min, "Smallest t_q/t_v/t_o (--random)")->capture_default_str();
  search->add_option("--t-max", so.space.t_max, "Largest t_q/t_v/t_o (--random)")->capture_default_str();
  search->add_option("--r-min", so.space.r_min, "Fewest branches (--random)")->capture_default_str();
  search->add_option("--r-max", so.space.r_max, "Most branches (--random)")->capture_default_str();
  search->add_option("--train", so.train_path, "Training dataset")->required();
  search->add_option("--val", so.val_path, "Validation dataset")->required();
  search->add_option("--epochs", so.cfg.train.max_epochs, "Epochs per candidate")->capture_default_str();
  search->add_option("--lr", so.cfg.train.lr, "Learning rate")->capture_default_str();
  search->add_option("--batch", so.cfg.train.batch_size, "Batch size")->capture_default_str();
  search->add_option("--subsample", so.cfg.subsample, "Training examples per candidate (0: all)")
      ->capture_default_str();
  search->add_option("--seed", so.cfg.train.seed, "Training and sampling seed")->capture_default_str();
  search->add_option("--threads", so.cfg.threads, "Worker threads")->capture_default_str();
  search->add_option("--out", so.out_path, "Results JSON-lines file");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return static_cast<int>(ExitStatus::usage);
  }

  ExitStatus status = ExitStatus::usage;
  if (*validate) status = cmd_validate(validate_src, out, err);
  else if (*presets) status = cmd_presets(preset_name, out, err);
  else if (*oracle_check) status = cmd_oracle_check(oc, out, err);
  else if (*grad_check) status = cmd_grad_check(gc, out, err);
  else if (*gen_data) status = cmd_gen_data(gd, out, err);
  else if (*train_cmd) status = cmd_train(tr, out, err);
  else if (*search) status = cmd_search(so, out, err);
  return static_cast<int>(status);
}

}  // namespace fusionop::cli
