#include "heros/cli.hpp"

#include "heros/checkpoint.hpp"
#include "heros/error.hpp"
#include "heros/metrics.hpp"
#include "heros/rng.hpp"
#include "heros/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>

namespace heros {

using nlohmann::json;
namespace fs = std::filesystem;

Episode make_episode(const RunConfig& cfg, int index) {
  if (index < 0) throw ValidationError("episode index must be >= 0");
  Rng seeds = Rng::derive(cfg.dataset.seed, static_cast<std::uint64_t>(index));
  Episode e;
  char name[32];
  std::snprintf(name, sizeof(name), "ep_%04d", index);
  e.name = name;
  e.motion_seed = seeds.next_u64();
  e.noise_seed = seeds.next_u64();
  MotionSpec motion = cfg.motion;
  motion.seed = e.motion_seed;
  e.high = synth_motion(motion, cfg.dataset.axes, cfg.dataset.dt);
  e.high.label = e.name;
  e.low = degrade(e.high, cfg.noise, e.noise_seed);
  e.low.label = e.name;
  return e;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

json generate_dataset(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  make_dirs(out_dir / "high");
  make_dirs(out_dir / "low");
  json episodes = json::array();
  for (int i = 0; i < cfg.dataset.episodes; ++i) {
    const Episode e = make_episode(cfg, i);
    save_csv(e.high, out_dir / "high" / (e.name + ".csv"));
    save_csv(e.low, out_dir / "low" / (e.name + ".csv"));
    episodes.push_back({{"name", e.name},
                        {"motion_seed", e.motion_seed},
                        {"noise_seed", e.noise_seed},
                        {"high_max_abs", e.high.samples.cwiseAbs().maxCoeff()},
                        {"low_max_abs", e.low.samples.cwiseAbs().maxCoeff()}});
  }
  json manifest = provenance(cfg);
  manifest["episodes"] = std::move(episodes);
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

std::vector<std::pair<fs::path, fs::path>> pair_signals(const fs::path& ref_dir, const fs::path& recon_dir) {
  std::map<std::string, fs::path> ref, recon;
  for (const auto& p : list_signals(ref_dir)) ref[p.filename().string()] = p;
  for (const auto& p : list_signals(recon_dir)) recon[p.filename().string()] = p;
  std::string unmatched;
  for (const auto& [name, _] : ref)
    if (!recon.count(name)) unmatched += " " + name + " (only in " + ref_dir.string() + ")";
  for (const auto& [name, _] : recon)
    if (!ref.count(name)) unmatched += " " + name + " (only in " + recon_dir.string() + ")";
  if (!unmatched.empty()) throw ValidationError("unmatched signal files:" + unmatched);
  std::vector<std::pair<fs::path, fs::path>> out;
  for (const auto& [name, path] : ref) out.emplace_back(path, recon.at(name));
  return out;
}

json evaluate_pairs(const std::vector<std::pair<fs::path, fs::path>>& pairs) {
  if (pairs.empty()) throw ValidationError("nothing to evaluate");
  json rows = json::array();
  double csre_sum = 0.0, zvre_sum = 0.0;
  for (const auto& [ref_path, recon_path] : pairs) {
    const Signal ref = load_csv(ref_path);
    const Signal recon = load_csv(recon_path);
    const double c = csre(ref, recon);
    const Eigen::VectorXd z = zvre(recon);
    csre_sum += c;
    zvre_sum += z.mean();
    rows.push_back({{"name", ref_path.filename().string()},
                    {"csre", c},
                    {"zvre", std::vector<double>(z.data(), z.data() + z.size())},
                    {"zvre_mean", z.mean()},
                    {"max_abs", recon.samples.cwiseAbs().maxCoeff()},
                    {"ref_max_abs", ref.samples.cwiseAbs().maxCoeff()}});
  }
  const double n = static_cast<double>(pairs.size());
  return {{"pairs", std::move(rows)}, {"mean_csre", csre_sum / n}, {"mean_zvre", zvre_sum / n}};
}

namespace {

// Failures while resolving options or the config file.
struct ConfigFailure : Error {
  using Error::Error;
};

RunConfig resolve_config(const std::string& path) {
  try {
    return path.empty() ? run_config_from_json(json::object()) : load_run_config(path);
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }
}

void emit_json(const json& j, const std::string& path, std::ostream& out) {
  if (path.empty())
    out << j.dump(2) << '\n';
  else
    write_text(path, j.dump(2) + "\n");
}

struct Options {
  std::string config;
  // generate
  std::string out_dir;
  std::optional<int> episodes;
  std::optional<std::uint64_t> seed;
  std::optional<double> static_seconds;
  // train
  std::string high, low, checkpoint_out, reports;
  std::optional<int> steps;
  std::optional<Index> batch;
  bool ots = false, no_ots = false, mle = false, no_mle = false, l1 = false;
  // enhance
  std::string checkpoint, in, out;
  // evaluate / allan
  std::string ref, recon, signal, report, curve;
  bool allan = false;
  std::optional<Index> axis;
};

int cmd_generate(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o.config);
  if (o.episodes) cfg.dataset.episodes = *o.episodes;
  if (o.seed) cfg.dataset.seed = *o.seed;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }
  if (o.static_seconds) {
    if (!(*o.static_seconds > 0.0)) throw ConfigFailure("--static-seconds must be > 0");
    const auto n = static_cast<Index>(std::llround(*o.static_seconds / cfg.dataset.dt));
    NoiseModel nm = cfg.noise;
    const Signal rest = Signal::make(Eigen::MatrixXd::Zero(cfg.dataset.axes, n), cfg.dataset.dt, "static");
    make_dirs(o.out_dir);
    save_csv(degrade(rest, nm, cfg.dataset.seed), fs::path(o.out_dir) / "static.csv");
    out << "wrote " << (fs::path(o.out_dir) / "static.csv").string() << '\n';
    return kExitOk;
  }
  const json manifest = generate_dataset(cfg, o.out_dir);
  out << "wrote " << manifest["episodes"].size() << " episodes to " << o.out_dir << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o.config);
  TrainConfig& t = cfg.train;
  if (!o.high.empty()) t.high_dir = o.high;
  if (!o.low.empty()) t.low_dir = o.low;
  if (!o.checkpoint_out.empty()) t.checkpoint_out = o.checkpoint_out;
  if (!o.reports.empty()) t.report_out = o.reports;
  if (o.steps) t.steps = *o.steps;
  if (o.seed) t.seed = *o.seed;
  if (o.batch) t.batch = *o.batch;
  if (o.ots && o.no_ots) throw ConfigFailure("--ots and --no-ots are contradictory");
  if (o.mle && o.no_mle) throw ConfigFailure("--mle and --no-mle are contradictory");
  if (o.l1 && o.ots) throw ConfigFailure("--l1-substitute and --ots are mutually exclusive");
  if (o.ots) t.ots_on = true;
  if (o.no_ots) t.ots_on = false;
  if (o.mle) t.mle_on = true;
  if (o.no_mle) t.mle_on = false;
  if (o.l1) {
    t.l1_substitute_on = true;
    t.ots_on = false;
  }
  if (t.high_dir.empty() || t.low_dir.empty()) throw ConfigFailure("train needs --high and --low data directories");
  if (t.checkpoint_out.empty()) throw ConfigFailure("train needs --checkpoint-out");
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }

  const TrainingData data = load_training_data(t);
  std::ofstream report_stream;
  if (!t.report_out.empty()) {
    report_stream.open(t.report_out, std::ios::binary);
    if (!report_stream) throw IoError("cannot write " + t.report_out.string());
  }
  const Checkpoint ckpt = train(t, data, report_stream.is_open() ? &report_stream : nullptr, provenance(cfg));
  out << "trained " << ckpt.step << " steps; checkpoint " << t.checkpoint_out.string() << '\n';
  return kExitOk;
}

int cmd_enhance(const Options& o, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  if (fs::is_directory(o.in)) {
    make_dirs(o.out);
    std::size_t n = 0;
    for (const auto& path : list_signals(o.in)) {
      save_csv(enhance(ckpt, load_csv(path)), fs::path(o.out) / path.filename());
      ++n;
    }
    out << "enhanced " << n << " signals into " << o.out << '\n';
  } else {
    save_csv(enhance(ckpt, load_csv(o.in)), o.out);
    out << "wrote " << o.out << '\n';
  }
  return kExitOk;
}

json allan_json(const Signal& s, const std::optional<Index>& axis, const AllanOptions& opt, std::string* curve) {
  json axes = json::array();
  const Index first = axis ? *axis : 0, last = axis ? *axis + 1 : s.axes();
  if (first < 0 || last > s.axes()) throw ValidationError("--axis out of range for this signal");
  for (Index a = first; a < last; ++a) {
    AllanReport r = allan_deviation(s, a, opt);
    fit_noise_params(r, opt);
    json j = to_json(r);
    j["axis"] = a;
    axes.push_back(std::move(j));
    if (curve && a == first) *curve = adev_csv(r);
  }
  return axes;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o.config);
  json report = provenance(cfg);
  if (!o.signal.empty()) {
    if (!o.allan) throw ConfigFailure("evaluate --signal needs --allan");
    report["allan"] = allan_json(load_csv(o.signal), o.axis, cfg.allan, nullptr);
  } else {
    if (o.ref.empty() || o.recon.empty()) throw ConfigFailure("evaluate needs --ref and --recon (or --signal)");
    std::vector<std::pair<fs::path, fs::path>> pairs;
    if (fs::is_directory(o.ref))
      pairs = pair_signals(o.ref, o.recon);
    else
      pairs.emplace_back(o.ref, o.recon);
    report["metrics"] = evaluate_pairs(pairs);
    if (o.allan) {
      json allan = json::object();
      for (const auto& [_, recon] : pairs) allan[recon.filename().string()] = allan_json(load_csv(recon), o.axis, cfg.allan, nullptr);
      report["allan"] = std::move(allan);
    }
  }
  emit_json(report, o.report, out);
  return kExitOk;
}

int cmd_allan(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o.config);
  json report = provenance(cfg);
  std::string curve;
  report["allan"] = allan_json(load_csv(o.in), o.axis, cfg.allan, o.curve.empty() ? nullptr : &curve);
  if (!o.curve.empty()) write_text(o.curve, curve);
  emit_json(report, o.report, out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Accelerometer range extension and denoising by unpaired GAN translation", "heros"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "write a synthetic high/low dataset");
  gen->add_option("--config", o.config, "JSON run config");
  gen->add_option("--out", o.out_dir, "output directory")->required();
  gen->add_option("--episodes", o.episodes, "episode count override");
  gen->add_option("--seed", o.seed, "dataset seed override");
  gen->add_option("--static-seconds", o.static_seconds, "write one static noise recording of this length instead");

  auto* tr = app.add_subcommand("train", "train the translation networks");
  tr->add_option("--config", o.config, "JSON run config");
  tr->add_option("--high", o.high, "directory of high-cost signals");
  tr->add_option("--low", o.low, "directory of low-cost signals");
  tr->add_option("--checkpoint-out", o.checkpoint_out, "checkpoint path");
  tr->add_option("--reports", o.reports, "JSON-lines step report path");
  tr->add_option("--steps", o.steps, "training steps override");
  tr->add_option("--seed", o.seed, "seed override");
  tr->add_option("--batch", o.batch, "batch size override");
  tr->add_flag("--ots", o.ots, "enable optimal transport supervision");
  tr->add_flag("--no-ots", o.no_ots, "disable optimal transport supervision");
  tr->add_flag("--mle", o.mle, "enable the modulated Laplace energy term");
  tr->add_flag("--no-mle", o.no_mle, "disable the modulated Laplace energy term");
  tr->add_flag("--l1-substitute", o.l1, "replace OT supervision with a direct feature distance");

  auto* en = app.add_subcommand("enhance", "apply a checkpoint to a signal file or directory");
  en->add_option("--checkpoint", o.checkpoint, "checkpoint path")->required();
  en->add_option("--in", o.in, "input CSV or directory")->required();
  en->add_option("--out", o.out, "output CSV or directory")->required();

  auto* ev = app.add_subcommand("evaluate", "CSRE / ZVRE (and optionally Allan) report");
  ev->add_option("--config", o.config, "JSON run config");
  ev->add_option("--ref", o.ref, "reference CSV or directory");
  ev->add_option("--recon", o.recon, "reconstruction CSV or directory");
  ev->add_option("--signal", o.signal, "single signal for --allan");
  ev->add_flag("--allan", o.allan, "include Allan deviation analysis");
  ev->add_option("--axis", o.axis, "restrict Allan analysis to one axis");
  ev->add_option("--report", o.report, "write the JSON report here instead of stdout");

  auto* al = app.add_subcommand("allan", "Allan deviation and noise coefficients of a static recording");
  al->add_option("--config", o.config, "JSON run config");
  al->add_option("--in", o.in, "input CSV")->required();
  al->add_option("--axis", o.axis, "single axis (default: all)");
  al->add_option("--report", o.report, "write the JSON report here instead of stdout");
  al->add_option("--curve", o.curve, "write the tau,adev curve as CSV");

  std::vector<std::string> argv_store{"heros"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (tr->parsed()) return cmd_train(o, out);
    if (en->parsed()) return cmd_enhance(o, out);
    if (ev->parsed()) return cmd_evaluate(o, out);
    if (al->parsed()) return cmd_allan(o, out);
  } catch (const ConfigFailure& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace heros
