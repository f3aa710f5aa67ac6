#include "heros/config.hpp"

#include "heros/error.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace heros {

using nlohmann::json;

void DatasetSpec::validate() const {
  if (episodes < 1) throw ValidationError("dataset.episodes must be >= 1");
  if (axes < 1 || axes > 3) throw ValidationError("dataset.axes must be 1, 2 or 3");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dataset.dt must be > 0");
}

void RunConfig::validate() const {
  dataset.validate();
  motion.validate();
  noise.validate();
  train.validate();
  if (allan.points < 10) throw ValidationError("allan.points must be >= 10");
  if (!(allan.slope_tol > 0.0)) throw ValidationError("allan.slope_tol must be > 0");
  if (!(allan.min_span_decades > 0.0)) throw ValidationError("allan.min_span_decades must be > 0");
}

namespace {

// Walks one JSON object, remembering which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + " must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    const json* v = take(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v->is_boolean()) throw ValidationError("");
        out = v->get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!v->is_number_integer()) throw ValidationError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0) {
            out = v->get<T>();
            return;
          }
          throw ValidationError("");
        } else {
          out = v->get<T>();
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v->is_number()) throw ValidationError("");
        out = v->get<T>();
      } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
        if (!v->is_string()) throw ValidationError("");
        out = v->get<std::string>();
      }
    } catch (const ValidationError&) {
      throw ValidationError(where(key) + " has the wrong type (" + std::string(v->type_name()) + ")");
    }
  }

  /// Like get() for doubles, but `null` and the string "inf" mean +infinity.
  void get_limit(const char* key, double& out) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_null() || (v->is_string() && v->get<std::string>() == "inf")) {
      out = std::numeric_limits<double>::infinity();
    } else if (v->is_number()) {
      out = v->get<double>();
    } else {
      throw ValidationError(where(key) + " must be a number, null or \"inf\"");
    }
  }

  template <typename F>
  void section(const char* key, F&& read) {
    const json* v = take(key);
    if (!v) return;
    Reader child(*v, where(key));
    read(child);
    child.finish();
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ValidationError("unknown config key '" + where(key.c_str()) + "'");
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    if (!key) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? std::string(key) : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json limit_json(double v) { return std::isinf(v) ? json(nullptr) : json(v); }

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Reader root(j, "");
  root.section("dataset", [&](Reader& r) {
    r.get("episodes", c.dataset.episodes);
    r.get("axes", c.dataset.axes);
    r.get("dt", c.dataset.dt);
    r.get("seed", c.dataset.seed);
  });
  root.section("motion", [&](Reader& r) {
    r.get("rest_s", c.motion.rest_s);
    r.get("shake_s", c.motion.shake_s);
    r.get("peak_g", c.motion.peak_g);
    r.get("n_bursts", c.motion.n_bursts);
  });
  root.section("noise", [&](Reader& r) {
    r.get("white_sigma", c.noise.white_sigma);
    r.get("bias_rw_sigma", c.noise.bias_rw_sigma);
    r.get("quant_step", c.noise.quant_step);
    r.get_limit("clip_level", c.noise.clip_level);
  });
  root.section("train", [&](Reader& r) {
    TrainConfig& t = c.train;
    r.get("window", t.arch.window);
    r.get("gen_channels", t.arch.gen_channels);
    r.get("disc_channels", t.arch.disc_channels);
    r.get("batch", t.batch);
    r.get("stride", t.stride);
    r.get("steps", t.steps);
    r.get("lr_g", t.lr_g);
    r.get("lr_d", t.lr_d);
    r.section("weights", [&](Reader& w) {
      w.get("adv", t.weights.adv);
      w.get("cyc", t.weights.cyc);
      w.get("id", t.weights.id);
      w.get("ots", t.weights.ots);
      w.get("mle", t.weights.mle);
    });
    r.get("ots", t.ots_on);
    r.get("mle", t.mle_on);
    r.get("l1_substitute", t.l1_substitute_on);
    r.get("seed", t.seed);
    r.section("sinkhorn", [&](Reader& s) {
      s.get("eps", t.sinkhorn.eps);
      s.get("tol", t.sinkhorn.tol);
      s.get("max_iter", t.sinkhorn.max_iter);
    });
    r.section("mle_options", [&](Reader& m) {
      m.get("kappa_min", t.mle.kappa_min);
      m.get("kappa_max", t.mle.kappa_max);
      m.get("energy_prescale", t.mle.energy_prescale);
    });
    r.get("checkpoint_every", t.checkpoint_every);
    r.get("ema_decay", t.ema_decay);
    r.get("high_dir", t.high_dir);
    r.get("low_dir", t.low_dir);
    r.get("checkpoint_out", t.checkpoint_out);
    r.get("report_out", t.report_out);
  });
  root.section("allan", [&](Reader& r) {
    r.get("points", c.allan.points);
    r.get("slope_tol", c.allan.slope_tol);
    r.get("min_span_decades", c.allan.min_span_decades);
  });
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  try {
    j = json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what(), 0);
  }
  return run_config_from_json(j);
}

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  return {
      {"dataset", {{"episodes", c.dataset.episodes}, {"axes", c.dataset.axes}, {"dt", c.dataset.dt}, {"seed", c.dataset.seed}}},
      {"motion",
       {{"rest_s", c.motion.rest_s},
        {"shake_s", c.motion.shake_s},
        {"peak_g", c.motion.peak_g},
        {"n_bursts", c.motion.n_bursts}}},
      {"noise",
       {{"white_sigma", c.noise.white_sigma},
        {"bias_rw_sigma", c.noise.bias_rw_sigma},
        {"quant_step", c.noise.quant_step},
        {"clip_level", limit_json(c.noise.clip_level)}}},
      {"train",
       {{"window", t.arch.window},
        {"gen_channels", t.arch.gen_channels},
        {"disc_channels", t.arch.disc_channels},
        {"batch", t.batch},
        {"stride", t.stride},
        {"steps", t.steps},
        {"lr_g", t.lr_g},
        {"lr_d", t.lr_d},
        {"weights",
         {{"adv", t.weights.adv},
          {"cyc", t.weights.cyc},
          {"id", t.weights.id},
          {"ots", t.weights.ots},
          {"mle", t.weights.mle}}},
        {"ots", t.ots_on},
        {"mle", t.mle_on},
        {"l1_substitute", t.l1_substitute_on},
        {"seed", t.seed},
        {"sinkhorn", {{"eps", t.sinkhorn.eps}, {"tol", t.sinkhorn.tol}, {"max_iter", t.sinkhorn.max_iter}}},
        {"mle_options",
         {{"kappa_min", t.mle.kappa_min},
          {"kappa_max", t.mle.kappa_max},
          {"energy_prescale", t.mle.energy_prescale}}},
        {"checkpoint_every", t.checkpoint_every},
        {"ema_decay", t.ema_decay},
        {"high_dir", t.high_dir.string()},
        {"low_dir", t.low_dir.string()},
        {"checkpoint_out", t.checkpoint_out.string()},
        {"report_out", t.report_out.string()}}},
      {"allan", {{"points", c.allan.points}, {"slope_tol", c.allan.slope_tol}, {"min_span_decades", c.allan.min_span_decades}}},
  };
}

json provenance(const RunConfig& cfg) {
  return {{"tool", "heros"}, {"version", std::string(kVersion)}, {"config", to_json(cfg)}};
}

}  // namespace heros
