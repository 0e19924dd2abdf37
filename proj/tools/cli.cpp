#include "mdd/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "mdd/checkpoint.hpp"
#include "mdd/dataset.hpp"
#include "mdd/eval.hpp"
#include "mdd/sampler.hpp"
#include "mdd/trainer.hpp"

namespace fs = std::filesystem;

namespace mdd {

namespace {

// Thrown for inputs that parse but make no sense together.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

fs::path default_output(const std::string& leaf) {
  const char* root = std::getenv(kOutputRootEnv);
  return (root && *root ? fs::path(root) : fs::path("runs")) / leaf;
}

fs::path resolve_out(const std::string& out, const std::string& leaf) {
  return out.empty() ? default_output(leaf) : fs::path(out);
}

template <typename T>
std::vector<T> parse_list(const std::string& text, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse(item));
  }
  if (out.empty()) throw ConfigError("empty list '" + text + "'");
  return out;
}

double to_double(const std::string& s) { return parse_double(s); }
std::uint64_t to_u64(const std::string& s) { return std::stoull(s); }
int to_int(const std::string& s) { return std::stoi(s); }
std::string to_string(const std::string& s) { return s; }

void write_config(const CLI::App& sub, const fs::path& path) {
  std::string text = "# mdd " + sub.get_name() + "\n" + sub.config_to_str(true, false);
  write_file(path, text);
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  const auto last = s.find_last_not_of(" \t\r");
  s = first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) s = s.substr(1, s.size() - 2);
  return s;
}

// Sets the entries of a flat key=value file as option defaults of `sub`, so
// flags given on the command line still take precedence.
void apply_config_file(CLI::App* sub, const std::string& path) {
  const KeyValues kv = key_values_from_text(read_file(path));
  for (const auto& [raw_key, raw_value] : kv) {
    const std::string key = trim(raw_key);
    CLI::Option* opt = key == "config" ? nullptr : sub->get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError("unknown key '" + key + "' in " + path);
    opt->default_val(trim(raw_value));
  }
}

// The --config value that follows the subcommand, if any.
std::optional<std::pair<std::string, std::string>> find_config_arg(const CLI::App& app,
                                                                    const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (app.get_subcommand_no_throw(args[i]) == nullptr) continue;
    for (std::size_t j = i + 1; j < args.size(); ++j) {
      if (args[j] == "--config" && j + 1 < args.size()) return std::make_pair(args[i], args[j + 1]);
      if (args[j].starts_with("--config=")) return std::make_pair(args[i], args[j].substr(9));
    }
    return std::nullopt;
  }
  return std::nullopt;
}

std::vector<std::uint8_t> parse_cond(const std::string& letters) {
  std::vector<std::uint8_t> mask(kTriShapeDomains, 0);
  for (char ch : letters) mask[static_cast<std::size_t>(parse_domain(ch))] = 1;
  return mask;
}

struct DataArgs {
  int n = 4000;
  int size = 32;
  double sup = 1.0;
  std::string pairs = "equal";
  std::uint64_t seed = 0;
  std::string mode = "image";

  void add(CLI::App* app) {
    app->add_option("--n", n, "number of data points")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--size", size, "image side in pixels")->check(CLI::Range(16, 1024))->capture_default_str();
    app->add_option("--mode", mode, "image or vector views")->check(CLI::IsMember({"image", "vector"}))->capture_default_str();
  }
  DatasetSpec spec() const {
    DatasetSpec s;
    s.n_points = n;
    s.size = size;
    s.sup_fraction = sup;
    s.pairs = parse_pair_policy(pairs);
    s.seed = seed;
    s.mode = parse_view_mode(mode);
    return s;
  }
};

struct TrainArgs {
  std::string scheme = "mdd";
  std::string fill = "noise";
  std::string loss_scope = "auto";
  int epochs = 0;
  long steps = 0;
  int batch = 32;
  double lr = 2e-5;
  int patience = 10;
  double factor = 0.5;
  int T = kDefaultSteps;
  double beta_start = kDefaultBetaStart;
  double beta_end = kDefaultBetaEnd;
  int width = 0;
  std::string mults = "auto";
  int blocks = 1;
  int groups = 8;
  int temb = 128;
  double val_fraction = 0.05;

  void add(CLI::App* app, bool with_scheme) {
    if (with_scheme) {
      app->add_option("--scheme", scheme)->check(CLI::IsMember({"mdd", "ummcsgm", "noisycond"}))->capture_default_str();
      app->add_option("--fill", fill, "missing-view fill for baselines")->check(CLI::IsMember({"noise", "minus_one"}))->capture_default_str();
      app->add_option("--loss-scope", loss_scope)->check(CLI::IsMember({"auto", "all", "supervised"}))->capture_default_str();
    }
    app->add_option("--epochs", epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--steps", steps, "optimizer steps; 0 runs whole epochs only")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--batch", batch)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--lr", lr)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--patience", patience)->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--factor", factor)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    app->add_option("--T", T, "diffusion steps")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--beta-start", beta_start)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--beta-end", beta_end)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--width", width, "base channel width; 0 picks the mode default")->check(CLI::NonNegativeNumber)->capture_default_str();
    app->add_option("--mults", mults, "comma-separated level multipliers or auto")->capture_default_str();
    app->add_option("--blocks", blocks, "residual blocks per level")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--groups", groups, "group-norm groups")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--temb", temb, "time embedding width")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--val-fraction", val_fraction)->check(CLI::Range(0.0, 0.5))->capture_default_str();
  }

  TrainingScheme training_scheme() const {
    const SchemeKind kind = parse_scheme_kind(scheme);
    TrainingScheme s;
    const FillPolicy f = parse_fill_policy(fill);
    if (kind == SchemeKind::kMdd) {
      if (f != FillPolicy::kPureNoise) throw ConfigError("MDD only supports --fill noise");
      s = TrainingScheme::mdd();
    } else {
      s = kind == SchemeKind::kUmmCsgm ? TrainingScheme::umm_csgm(f) : TrainingScheme::noisy_cond(f);
    }
    if (loss_scope != "auto") s.loss_scope = parse_loss_scope(loss_scope);
    return s;
  }

  ModelConfig arch(const Shape& view) const {
    ModelConfig c = view[1] > 1 ? ModelConfig::image_defaults(kTriShapeDomains, view[1])
                                : ModelConfig::vector_defaults(kTriShapeDomains, view[0]);
    c.channels = view[0];
    c.height = view[1];
    c.width = view[2];
    if (width > 0) c.base_width = width;
    if (mults != "auto") c.channel_mults = parse_list<int>(mults, to_int);
    c.blocks_per_level = blocks;
    c.groups = groups;
    c.time_embed_dim = temb;
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    if (epochs == 0 && steps == 0) throw ConfigError("set --epochs or --steps");
    TrainConfig t;
    t.scheme = training_scheme();
    t.epochs = epochs;
    t.max_steps = steps;
    t.batch_size = batch;
    t.adam.lr = lr;
    t.patience = patience;
    t.factor = factor;
    t.validation_fraction = val_fraction;
    return t;
  }

  NoiseSchedule schedule() const { return NoiseSchedule(T, beta_start, beta_end); }
};

struct ProtocolArgs {
  std::string protocol = "supervision";
  int eval_points = 200;
  std::uint64_t eval_seed = 777;
  std::string sampler = "ddim";
  int steps = 100;
  std::string seeds = "0,1,2";
  std::uint64_t sample_seed = 0;
  int batch = 256;
  std::string schemes = "MDD,UMM-CSGM-N,UMM-CSGM-O,NoisyCond-N,NoisyCond-O";
  std::string sups = "1,0.7,0.4,0.3";
  std::string phi = "native";
  double c = 0.0;
  double sup = 0.0;
  std::string pairs = "bridge";
  std::string families = "skip,constant,constant_fading";
  std::string cs = "0,0.1,0.2,0.4,0.6,0.8,1";
  int snapshots = 10;
  int grid_samples = 4;

  void add(CLI::App* app) {
    app->add_option("--protocol", protocol)->check(CLI::IsMember({"supervision", "bridge", "phi"}))->capture_default_str();
    app->add_option("--eval-points", eval_points)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--eval-seed", eval_seed)->capture_default_str();
    app->add_option("--sampler", sampler)->check(CLI::IsMember({"ddim", "ddpm"}))->capture_default_str();
    app->add_option("--sample-steps", steps, "DDIM steps")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--seeds", seeds, "comma-separated training seeds")->capture_default_str();
    app->add_option("--sample-seed", sample_seed)->capture_default_str();
    app->add_option("--eval-batch", batch)->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--schemes", schemes, "supervision: scheme labels")->capture_default_str();
    app->add_option("--sups", sups, "supervision: supervised fractions")->capture_default_str();
    app->add_option("--phi", phi, "supervision/bridge: native or a phi family")->capture_default_str();
    app->add_option("--c", c, "condition-noise fraction for --phi")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    app->add_option("--sup", sup, "phi: supervised fraction of the trained cell")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    app->add_option("--pairs", pairs, "phi: pair policy of the trained cell")->check(CLI::IsMember({"equal", "bridge"}))->capture_default_str();
    app->add_option("--families", families, "phi: families besides vanilla")->capture_default_str();
    app->add_option("--cs", cs, "phi: c grid")->capture_default_str();
    app->add_option("--snapshots", snapshots, "bridge: reverse steps to snapshot")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--grid-samples", grid_samples, "bridge: samples per snapshot grid")->check(CLI::PositiveNumber)->capture_default_str();
  }

  ProtocolCommon common(ViewMode mode, int size, const std::string& config_hash) const {
    ProtocolCommon p;
    p.mode = mode;
    p.size = size;
    p.eval_points = eval_points;
    p.eval_seed = eval_seed;
    p.sampler = parse_sampler_kind(sampler);
    p.steps = steps;
    p.seeds = parse_list<std::uint64_t>(seeds, to_u64);
    p.sample_seed = sample_seed;
    p.batch_size = batch;
    p.config_hash = config_hash;
    return p;
  }

  std::optional<PhiSchedule> phi_override() const {
    if (phi == "native") return std::nullopt;
    PhiSchedule s{parse_phi_family(phi), c};
    s.validate();
    return s;
  }
};

int run_protocol(const ProtocolArgs& args, ViewMode mode, int size, const CheckpointProvider& provider,
                 const fs::path& out_dir, const std::string& config_hash, std::ostream& out, std::ostream& err) {
  const ProtocolCommon common = args.common(mode, size, config_hash);
  ExperimentResult result;
  if (args.protocol == "supervision") {
    SupervisionSweepConfig cfg;
    cfg.common = common;
    cfg.schemes = parse_list<std::string>(args.schemes, to_string);
    for (const auto& s : cfg.schemes) parse_scheme_label(s);
    cfg.sup_levels = parse_list<double>(args.sups, to_double);
    cfg.phi = args.phi_override();
    result = run_supervision_sweep(cfg, provider);
  } else if (args.protocol == "bridge") {
    BridgeConfig cfg;
    cfg.common = common;
    cfg.phi = args.phi_override().value_or(PhiSchedule::constant(0.0));
    cfg.snapshots = args.snapshots;
    cfg.grid_samples = args.grid_samples;
    BridgeResult bridge = run_bridge(cfg, provider);
    result = std::move(bridge.result);
    write_file(out_dir / "snapshots.csv", bridge_snapshots_csv(bridge.snapshots));
    for (const auto& s : bridge.snapshots) {
      if (s.grid.empty()) continue;
      write_file(out_dir / ("bridge_s" + std::to_string(s.seed) + "_step" + std::to_string(s.index) + ".ppm"),
                 encode_ppm(s.grid));
    }
  } else {
    PhiSweepConfig cfg;
    cfg.common = common;
    cfg.sup = args.sup;
    cfg.pairs = parse_pair_policy(args.pairs);
    cfg.families = parse_list<PhiFamily>(args.families, parse_phi_family);
    cfg.c_grid = parse_list<double>(args.cs, to_double);
    result = run_phi_sweep(cfg, provider);
    write_file(out_dir / "phi_long.csv", phi_long_csv(result));
    write_file(out_dir / "phi_sweep.svg", phi_sweep_svg(result, random_pair_mae_floor(mode, size)));
  }
  write_file(out_dir / "results.csv", results_csv(result));
  const auto summary = summarize(result);
  write_file(out_dir / "summary.csv", summary_csv(summary));
  for (const auto& id : result.missing) err << "missing checkpoint cell " << id << '\n';
  for (const auto& s : summary) {
    out << s.protocol << ' ' << s.scheme << " N=" << format_double(s.sup) << ' ' << s.phi_family
        << (s.phi_family == "vanilla" ? std::string() : "(" + format_double(s.c) + ")") << ' ' << s.source_set << "->"
        << s.target_set << " mae " << format_double(s.mean) << " sd " << format_double(s.sd) << " n " << s.seeds << '\n';
  }
  out << "wrote " << (out_dir / "results.csv").string() << '\n';
  const bool any_ok = std::any_of(result.rows.begin(), result.rows.end(), [](const auto& r) { return r.status == "ok"; });
  return any_ok ? kExitOk : kExitRuntime;
}

ViewMode checkpoint_mode(const Checkpoint& ck) {
  return ck.model.config().image_mode() ? ViewMode::kImage : ViewMode::kVector;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-domain diffusion: data, training, generation and evaluation", "mdd"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&config_path](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key=value file; command-line flags take precedence")
        ->configurable(false);
  };

  // dataset
  DataArgs data;
  std::string data_out;
  auto* c_data = app.add_subcommand("dataset", "generate a TriShape dataset file");
  add_config(c_data);
  data.add(c_data);
  c_data->add_option("--sup", data.sup, "fully supervised fraction")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c_data->add_option("--pairs", data.pairs)->check(CLI::IsMember({"equal", "bridge"}))->capture_default_str();
  c_data->add_option("--seed", data.seed)->capture_default_str();
  c_data->add_option("--out", data_out, "dataset file");

  // train
  TrainArgs train_args;
  std::string train_data;
  std::string train_out;
  std::uint64_t train_seed = 0;
  auto* c_train = app.add_subcommand("train", "train a denoiser on a dataset file");
  add_config(c_train);
  c_train->add_option("--data", train_data, "dataset file (required)");
  train_args.add(c_train, true);
  c_train->add_option("--seed", train_seed)->capture_default_str();
  c_train->add_option("--out", train_out, "output directory");

  // sample
  std::string ck_path;
  std::string cond = "A";
  std::string phi_name = "constant";
  double phi_c = 0.2;
  std::string sampler = "ddim";
  int sample_steps = 100;
  std::uint64_t sample_seed = 0;
  int sample_n = 8;
  std::uint64_t sample_eval_seed = 777;
  std::string sigma = "posterior";
  bool literal_update = false;
  std::string sample_out;
  auto* c_sample = app.add_subcommand("sample", "translate held-out views with a checkpoint");
  add_config(c_sample);
  c_sample->add_option("--ck", ck_path, "checkpoint file (required)");
  c_sample->add_option("--cond", cond, "condition domains, e.g. A or AB")->capture_default_str();
  c_sample->add_option("--phi", phi_name)->check(CLI::IsMember({"vanilla", "skip", "constant", "constant_fading"}))->capture_default_str();
  c_sample->add_option("--c", phi_c)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c_sample->add_option("--sampler", sampler)->check(CLI::IsMember({"ddim", "ddpm"}))->capture_default_str();
  c_sample->add_option("--steps", sample_steps, "DDIM steps")->check(CLI::PositiveNumber)->capture_default_str();
  c_sample->add_option("--seed", sample_seed)->capture_default_str();
  c_sample->add_option("--n", sample_n, "number of held-out points")->check(CLI::PositiveNumber)->capture_default_str();
  c_sample->add_option("--eval-seed", sample_eval_seed, "seed of the held-out factors")->capture_default_str();
  c_sample->add_option("--sigma", sigma, "DDPM noise scale")->check(CLI::IsMember({"posterior", "beta"}))->capture_default_str();
  c_sample->add_flag("--literal-update", literal_update, "DDPM mean with 1/sqrt(alpha_bar_t)");
  c_sample->add_option("--out", sample_out, "output directory");

  // eval
  ProtocolArgs eval_args;
  std::string ck_root;
  std::string eval_out;
  auto* c_eval = app.add_subcommand("eval", "run a protocol over trained checkpoint cells");
  add_config(c_eval);
  eval_args.add(c_eval);
  c_eval->add_option("--ck-root", ck_root, "directory holding <cell>/best.mddc (required)");
  c_eval->add_option("--out", eval_out, "output directory");

  // sweep
  ProtocolArgs sweep_args;
  TrainArgs sweep_train;
  DataArgs sweep_data;
  std::string sweep_out;
  auto* c_sweep = app.add_subcommand("sweep", "train missing cells, then run a protocol");
  add_config(c_sweep);
  sweep_args.add(c_sweep);
  sweep_data.add(c_sweep);
  c_sweep->add_option("--data-seed", sweep_data.seed, "base seed of the per-cell datasets")->capture_default_str();
  sweep_train.add(c_sweep, false);
  c_sweep->add_option("--out", sweep_out, "output directory; cells are cached under <out>/cells");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    if (const auto config = find_config_arg(app, args)) {
      apply_config_file(app.get_subcommand(config->first), config->second);
    }
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (e.get_name() == "CallForAllHelp" ? app.help("", CLI::AppFormatMode::All)
                                                : (app.get_subcommands().empty() ? app.help()
                                                                                 : app.get_subcommands().front()->help()));
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (c_data->parsed()) {
      const DatasetSpec spec = data.spec();
      const fs::path path = resolve_out(data_out, "dataset.mdds");
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      const Dataset ds = generate_dataset(spec);
      const std::string bytes = encode_dataset(ds);
      write_file(path, bytes);
      KeyValues manifest = dataset_manifest(ds);
      manifest["file.sha256"] = sha256_hex(bytes);
      fs::path manifest_path = path;
      manifest_path += ".manifest";
      write_file(manifest_path, key_values_to_text(manifest));
      fs::path config_path = path;
      config_path += ".config";
      write_config(*c_data, config_path);
      const SplitCounts counts = split_counts(spec.n_points, spec.sup_fraction, spec.pairs);
      out << "wrote " << path.string() << " (" << counts.full << " full, " << counts.pair_ab << " AB, " << counts.pair_bc
          << " BC, " << counts.pair_ac << " AC)\n";
      return kExitOk;
    }

    auto require = [](const std::string& value, const char* flag) {
      if (value.empty()) throw ConfigError(std::string(flag) + " is required");
    };
    if (c_train->parsed()) {
      require(train_data, "--data");
      TrainConfig tc = train_args.train_config();
      tc.seed = train_seed;
      const std::string data_bytes = read_file(train_data);
      const Dataset ds = decode_dataset(data_bytes);
      ModelConfig arch = train_args.arch(ds.view_shape());
      arch.condition_code = tc.scheme.uses_condition_code();
      const NoiseSchedule schedule = train_args.schedule();
      const fs::path dir = resolve_out(train_out, "train");
      fs::create_directories(dir);
      write_config(*c_train, dir / "config.ini");

      DenoiserModel<float> model(arch, derive_seed(train_seed, 0x696e6974ULL), schedule.steps());
      out << "training " << tc.scheme.label() << " with " << model.parameter_count() << " parameters on "
          << ds.points.size() << " points\n";
      const auto t0 = std::chrono::steady_clock::now();
      TrainResult result = train(tc, ds, model, schedule, [&](const LossRecord& r) {
        if (r.split == "validation") {
          out << "epoch " << r.epoch << " step " << r.step << " validation " << format_double(r.loss) << " lr "
              << format_double(r.lr) << '\n';
        }
      });
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      KeyValues meta;
      meta["run.scheme"] = tc.scheme.label();
      meta["run.loss_scope"] = loss_scope_name(tc.scheme.loss_scope);
      meta["run.seed"] = std::to_string(train_seed);
      meta["run.steps"] = std::to_string(result.steps);
      meta["run.best_validation_loss"] = format_double(result.best_loss);
      meta["data.sha256"] = sha256_hex(data_bytes);
      for (const auto& [k, v] : dataset_manifest(ds)) {
        if (!k.starts_with("point.")) meta["data." + k] = v;
      }
      save_checkpoint(dir / "best.mddc", Checkpoint{std::move(result.best), schedule, meta});
      save_checkpoint(dir / "last.mddc", Checkpoint{model, schedule, meta});
      write_file(dir / "loss.csv", loss_curve_csv(result.curve, tc.scheme.label()));
      write_file(dir / "timing.txt", key_values_to_text({{"train.seconds", format_double(seconds)}}));
      out << "wrote " << (dir / "best.mddc").string() << " after " << result.steps << " steps\n";
      return kExitOk;
    }

    if (c_sample->parsed()) {
      require(ck_path, "--ck");
      const std::string ck_bytes = read_file(ck_path);
      const Checkpoint ck = decode_checkpoint(ck_bytes);
      const ViewMode mode = checkpoint_mode(ck);
      const int size = ck.model.config().height;
      const EvalSet set = make_eval_set(mode, size, sample_n, sample_eval_seed);
      TranslationOptions opts;
      opts.cond_mask = parse_cond(cond);
      opts.phi = PhiSchedule{parse_phi_family(phi_name), phi_c};
      opts.sampler = parse_sampler_kind(sampler);
      opts.steps = sample_steps;
      opts.seed = sample_seed;
      opts.sigma = sigma == "beta" ? SigmaChoice::kBeta : SigmaChoice::kPosterior;
      opts.literal_update = literal_update;
      const TranslationOutcome outcome = evaluate_translation(DenoiserEpsilon(ck.model), ck.schedule, set, opts);
      const DomainArrays<float>& generated = outcome.generated;
      const std::vector<double>& domain_mae = outcome.domain_mae;
      GenerationRequest probe;
      probe.cond_mask = opts.cond_mask;
      probe.phi = opts.phi;
      probe.sampler = opts.sampler;
      probe.ddim_steps = opts.steps;
      probe.seed = opts.seed;
      probe.sigma = opts.sigma;
      probe.literal_update = literal_update;

      const fs::path dir = resolve_out(sample_out, "sample");
      fs::create_directories(dir);
      write_config(*c_sample, dir / "config.ini");
      KeyValues meta = generation_metadata(probe);
      meta["checkpoint.path"] = ck_path;
      meta["checkpoint.sha256"] = sha256_hex(ck_bytes);
      for (const auto& [k, v] : ck.metadata) meta["checkpoint." + k] = v;
      meta["eval.points"] = std::to_string(sample_n);
      meta["eval.seed"] = std::to_string(sample_eval_seed);
      for (int d = 0; d < kTriShapeDomains; ++d) {
        if (!std::isnan(domain_mae[static_cast<std::size_t>(d)])) {
          meta[std::string("mae.") + domain_name(d)] = format_double(domain_mae[static_cast<std::size_t>(d)]);
          out << domain_name(d) << " mae " << format_double(domain_mae[static_cast<std::size_t>(d)]) << '\n';
        }
      }
      write_file(dir / "metadata.txt", key_values_to_text(meta));

      if (mode == ViewMode::kImage) {
        // One row per point: every domain's view, then ground truth of the targets.
        std::vector<Tensor<float>> tiles;
        int columns = 0;
        for (int n = 0; n < sample_n; ++n) {
          int col = 0;
          for (int d = 0; d < kTriShapeDomains; ++d, ++col) {
            tiles.push_back(take_sample(generated[static_cast<std::size_t>(d)], n).reshaped(view_shape(mode, size)));
          }
          for (int d = 0; d < kTriShapeDomains; ++d) {
            if (opts.cond_mask[static_cast<std::size_t>(d)]) continue;
            tiles.push_back(take_sample(set.views[static_cast<std::size_t>(d)], n).reshaped(view_shape(mode, size)));
            ++col;
          }
          columns = col;
        }
        write_file(dir / "grid.ppm", encode_ppm(tile_images(tiles, columns)));
        out << "wrote " << (dir / "grid.ppm").string() << '\n';
      } else {
        std::ostringstream csv;
        csv << "point,domain,kind";
        for (int f = 0; f < kVectorFeatures; ++f) csv << ",f" << f;
        csv << '\n';
        for (int n = 0; n < sample_n; ++n) {
          for (int d = 0; d < kTriShapeDomains; ++d) {
            const bool is_cond = opts.cond_mask[static_cast<std::size_t>(d)] != 0;
            for (int kind = 0; kind < (is_cond ? 1 : 2); ++kind) {
              const auto& src = kind == 0 ? generated[static_cast<std::size_t>(d)] : set.views[static_cast<std::size_t>(d)];
              csv << n << ',' << domain_name(d) << ',' << (is_cond ? "condition" : kind == 0 ? "generated" : "truth");
              for (int f = 0; f < kVectorFeatures; ++f) csv << ',' << format_double(src[static_cast<std::size_t>(n * kVectorFeatures + f)]);
              csv << '\n';
            }
          }
        }
        write_file(dir / "samples.csv", csv.str());
        out << "wrote " << (dir / "samples.csv").string() << '\n';
      }
      return kExitOk;
    }

    if (c_eval->parsed()) {
      require(ck_root, "--ck-root");
      const fs::path dir = resolve_out(eval_out, "eval_" + eval_args.protocol);
      fs::create_directories(dir);
      write_config(*c_eval, dir / "config.ini");
      const std::string config_hash = sha256_hex(read_file(dir / "config.ini"));
      // The view geometry comes from any available cell.
      std::optional<Checkpoint> probe;
      for (const auto& entry : fs::directory_iterator(ck_root)) {
        if (fs::exists(entry.path() / "best.mddc")) {
          probe = load_checkpoint(entry.path() / "best.mddc");
          break;
        }
      }
      if (!probe) throw std::runtime_error("no <cell>/best.mddc under " + ck_root);
      return run_protocol(eval_args, checkpoint_mode(*probe), probe->model.config().height, directory_provider(ck_root),
                          dir, config_hash, out, err);
    }

    if (c_sweep->parsed()) {
      const fs::path dir = resolve_out(sweep_out, "sweep_" + sweep_args.protocol);
      fs::create_directories(dir);
      write_config(*c_sweep, dir / "config.ini");
      const std::string config_hash = sha256_hex(read_file(dir / "config.ini"));
      CellTrainingPlan plan;
      plan.data = sweep_data.spec();
      plan.data_seed = sweep_data.seed;
      plan.arch = sweep_train.arch(view_shape(plan.data.mode, plan.data.size));
      if (sweep_train.epochs == 0 && sweep_train.steps == 0) throw ConfigError("set --epochs or --steps");
      plan.train.epochs = sweep_train.epochs;
      plan.train.max_steps = sweep_train.steps;
      plan.train.batch_size = sweep_train.batch;
      plan.train.adam.lr = sweep_train.lr;
      plan.train.patience = sweep_train.patience;
      plan.train.factor = sweep_train.factor;
      plan.train.validation_fraction = sweep_train.val_fraction;
      plan.steps = sweep_train.T;
      plan.beta_start = sweep_train.beta_start;
      plan.beta_end = sweep_train.beta_end;
      plan.cache_dir = dir / "cells";
      plan.log = [&out](const std::string& line) { out << line << '\n'; };
      return run_protocol(sweep_args, plan.data.mode, plan.data.size, training_provider(plan), dir, config_hash, out,
                          err);
    }
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::out_of_range& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace mdd
