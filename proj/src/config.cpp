#include "dos/config.hpp"

#include "dos/errors.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace dos {

namespace {

/// Reads keys from one JSON object, recording type errors and unknown keys.
class Section {
 public:
  Section(const json& j, std::string path, std::vector<std::pair<std::string, std::string>>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.emplace_back(path_, "expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      errors_.emplace_back(path_ + "/" + key, "wrong type");
    }
  }

  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void mark(const char* key) { seen_.insert(key); }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) errors_.emplace_back(path_ + "/" + k, "unknown key");
  }

  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::pair<std::string, std::string>>& errors_;
  std::set<std::string> seen_;
};

[[noreturn]] void raise(const std::vector<std::pair<std::string, std::string>>& errors) {
  std::string msg = "invalid configuration:";
  for (const auto& [p, m] : errors) msg += "\n  " + p + ": " + m;
  throw ConfigError(msg, errors.front().first);
}

const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Box: return "box";
    case ShapeKind::Cylinder: return "cylinder";
    case ShapeKind::Sphere: return "sphere";
  }
  return "box";
}

void read_scene(Section& s, SceneConfig& c, std::vector<std::pair<std::string, std::string>>& errors) {
  s.get("num_classes", c.num_classes);
  s.get("frequency_exponent", c.frequency_exponent);
  s.get("num_points", c.num_points);
  s.get("feature_dim", c.feature_dim);
  s.get("extent", c.extent);
  s.get("feature_noise", c.feature_noise);
  s.get("feature_scale", c.feature_scale);
  s.get("appearance_variants", c.appearance_variants);
  s.get("seed", c.seed);
  if (s.has("palette")) {
    const json& p = s.at("palette");
    if (!p.is_array()) {
      errors.emplace_back(s.path() + "/palette", "expected an array");
    } else {
      c.palette.clear();
      for (std::size_t i = 0; i < p.size(); ++i) {
        Section e(p[i], s.path() + "/palette/" + std::to_string(i), errors);
        ClassShape shape;
        std::string kind = "box";
        e.get("kind", kind);
        if (kind == "box") shape.kind = ShapeKind::Box;
        else if (kind == "cylinder") shape.kind = ShapeKind::Cylinder;
        else if (kind == "sphere") shape.kind = ShapeKind::Sphere;
        else errors.emplace_back(e.path() + "/kind", "unknown shape '" + kind + "'");
        e.get("min_size", shape.min_size);
        e.get("max_size", shape.max_size);
        e.get("min_height", shape.min_height);
        e.get("max_height", shape.max_height);
        e.get("instances", shape.instances);
        e.finish();
        c.palette.push_back(shape);
      }
    }
  } else {
    s.mark("palette");
  }
}

void read_train_sections(const json& j, TrainConfig& c, std::vector<std::pair<std::string, std::string>>& errors,
                         std::set<std::string>& consumed) {
  auto section = [&](const char* name, auto&& fn) {
    consumed.insert(name);
    if (!j.contains(name)) return;
    Section s(j.at(name), std::string("/") + name, errors);
    fn(s);
    s.finish();
  };
  section("views", [&](Section& s) {
    s.get("crop_fraction", c.views.crop_fraction);
    s.get("min_points", c.views.min_points);
    s.get("rotation_max", c.views.rotation_max);
    s.get("scale_range", c.views.scale_range);
    s.get("position_jitter", c.views.position_jitter);
    s.get("feature_jitter", c.views.feature_jitter);
  });
  section("mask", [&](Section& s) {
    s.get("ratio", c.mask_ratio);
    s.get("block_size", c.block_size);
    std::string sup = to_string(c.supervision);
    s.get("supervision", sup);
    try {
      c.supervision = supervision_mode_from_string(sup);
    } catch (const ConfigError& e) {
      errors.emplace_back("/mask/supervision", "unknown supervision mode '" + sup + "'");
    }
    s.get("token_jitter", c.token_jitter);
  });
  section("encoder", [&](Section& s) {
    int input_width = -1;
    s.get("input_width", input_width);
    if (input_width >= 0) c.encoder.input_width = input_width;
    s.get("hidden", c.encoder.hidden);
    s.get("embed", c.encoder.embed);
    s.get("radius", c.encoder.radius);
    s.get("pool_factor", c.encoder.pool_factor);
    s.get("layers", c.encoder.layers);
  });
  section("objective", [&](Section& s) {
    std::string mode = to_string(c.objective);
    s.get("mode", mode);
    try {
      c.objective = objective_mode_from_string(mode);
    } catch (const ConfigError&) {
      errors.emplace_back("/objective/mode", "unknown objective mode '" + mode + "'");
    }
    s.get("prototypes", c.prototypes);
    s.get("tau_student", c.tau_student);
    s.get("tau_teacher", c.tau_teacher);
    s.get("cross_view", c.cross_view);
  });
  section("transport", [&](Section& s) {
    s.get("iterations", c.transport.iterations);
    s.get("alpha", c.transport.alpha);
    s.get("alpha_schedule", c.transport.alpha_schedule);
    s.get("alpha_final", c.transport.alpha_final);
    s.get("tolerance", c.transport.tolerance);
  });
  section("train", [&](Section& s) {
    s.get("epochs", c.epochs);
    s.get("batch_size", c.batch_size);
    s.get("lr", c.optimizer.lr);
    s.get("weight_decay", c.optimizer.weight_decay);
    s.get("beta1", c.optimizer.beta1);
    s.get("beta2", c.optimizer.beta2);
    s.get("adam_eps", c.optimizer.eps);
    s.get("ema_base", c.ema_base);
    s.get("ema_final", c.ema_final);
    s.get("voxel_size", c.voxel_size);
    s.get("seed", c.seed);
    s.get("checkpoint_every", c.checkpoint_every);
  });
}

void collect_validation(const std::function<void()>& fn, std::vector<std::pair<std::string, std::string>>& errors) {
  try {
    fn();
  } catch (const ConfigError& e) {
    errors.emplace_back(e.path().empty() ? "/" : e.path(), e.what());
  }
}

}  // namespace

json scene_config_to_json(const SceneConfig& c) {
  json palette = json::array();
  for (const auto& p : c.palette)
    palette.push_back({{"kind", shape_name(p.kind)},
                       {"min_size", p.min_size},
                       {"max_size", p.max_size},
                       {"min_height", p.min_height},
                       {"max_height", p.max_height},
                       {"instances", p.instances}});
  return {{"num_classes", c.num_classes}, {"frequency_exponent", c.frequency_exponent},
          {"num_points", c.num_points},   {"feature_dim", c.feature_dim},
          {"extent", c.extent},           {"feature_noise", c.feature_noise},
          {"feature_scale", c.feature_scale}, {"appearance_variants", c.appearance_variants},
          {"palette", palette},
          {"seed", c.seed}};
}

SceneConfig scene_config_from_json(const json& j, const std::string& path) {
  std::vector<std::pair<std::string, std::string>> errors;
  SceneConfig c;
  Section s(j, path, errors);
  read_scene(s, c, errors);
  s.finish();
  if (!errors.empty()) raise(errors);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return {
      {"views",
       {{"crop_fraction", c.views.crop_fraction},
        {"min_points", c.views.min_points},
        {"rotation_max", c.views.rotation_max},
        {"scale_range", c.views.scale_range},
        {"position_jitter", c.views.position_jitter},
        {"feature_jitter", c.views.feature_jitter}}},
      {"mask",
       {{"ratio", c.mask_ratio},
        {"block_size", c.block_size},
        {"supervision", to_string(c.supervision)},
        {"token_jitter", c.token_jitter}}},
      {"encoder",
       {{"input_width", c.encoder.input_width},
        {"hidden", c.encoder.hidden},
        {"embed", c.encoder.embed},
        {"radius", c.encoder.radius},
        {"pool_factor", c.encoder.pool_factor},
        {"layers", c.encoder.layers}}},
      {"objective",
       {{"mode", to_string(c.objective)},
        {"prototypes", c.prototypes},
        {"tau_student", c.tau_student},
        {"tau_teacher", c.tau_teacher},
        {"cross_view", c.cross_view}}},
      {"transport",
       {{"iterations", c.transport.iterations},
        {"alpha", c.transport.alpha},
        {"alpha_schedule", c.transport.alpha_schedule},
        {"alpha_final", c.transport.alpha_final},
        {"tolerance", c.transport.tolerance}}},
      {"train",
       {{"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"lr", c.optimizer.lr},
        {"weight_decay", c.optimizer.weight_decay},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"adam_eps", c.optimizer.eps},
        {"ema_base", c.ema_base},
        {"ema_final", c.ema_final},
        {"voxel_size", c.voxel_size},
        {"seed", c.seed},
        {"checkpoint_every", c.checkpoint_every}}},
  };
}

TrainConfig train_config_from_json(const json& j) {
  std::vector<std::pair<std::string, std::string>> errors;
  TrainConfig c;
  std::set<std::string> consumed;
  read_train_sections(j, c, errors, consumed);
  if (!j.is_object()) errors.emplace_back("/", "expected an object");
  else
    for (const auto& [k, v] : j.items())
      if (!consumed.count(k)) errors.emplace_back("/" + k, "unknown key");
  if (!errors.empty()) raise(errors);
  return c;
}

void RunConfig::validate() const {
  scene.validate();
  if (num_scenes < 2) throw ConfigError("num_scenes must be >= 2", "/scene/num_scenes");
  train.validate();
  if (train.encoder.input_width != scene.feature_dim + 3)
    throw ConfigError("input_width must equal feature_dim + 3", "/encoder/input_width");
  probe.validate();
}

RunConfig run_config_from_json(const json& j) {
  std::vector<std::pair<std::string, std::string>> errors;
  RunConfig c;
  std::set<std::string> consumed{"scene", "probe"};
  if (!j.is_object()) {
    errors.emplace_back("/", "expected an object");
    raise(errors);
  }
  if (j.contains("scene")) {
    Section s(j.at("scene"), "/scene", errors);
    s.get("num_scenes", c.num_scenes);
    read_scene(s, c.scene, errors);
    s.finish();
  }
  read_train_sections(j, c.train, errors, consumed);
  bool explicit_width = j.contains("encoder") && j.at("encoder").is_object() && j.at("encoder").contains("input_width");
  if (!explicit_width) c.train.encoder.input_width = c.scene.feature_dim + 3;
  if (j.contains("probe")) {
    Section s(j.at("probe"), "/probe", errors);
    s.get("train_fraction", c.probe.train_fraction);
    s.get("iterations", c.probe.iterations);
    s.get("l2", c.probe.l2);
    s.get("max_points", c.probe.max_points);
    s.get("seed", c.probe.seed);
    s.get("params", c.probe.params);
    s.finish();
  }
  for (const auto& [k, v] : j.items())
    if (!consumed.count(k)) errors.emplace_back("/" + k, "unknown key");
  if (errors.empty()) collect_validation([&] { c.validate(); }, errors);
  if (!errors.empty()) raise(errors);
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j = train_config_to_json(c.train);
  j["scene"] = scene_config_to_json(c.scene);
  j["scene"]["num_scenes"] = c.num_scenes;
  j["probe"] = {{"train_fraction", c.probe.train_fraction}, {"iterations", c.probe.iterations},
                {"l2", c.probe.l2},                         {"max_points", c.probe.max_points},
                {"seed", c.probe.seed},                     {"params", c.probe.params}};
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string(), "/");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what(), "/");
  }
  return run_config_from_json(j);
}

std::string config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dos
