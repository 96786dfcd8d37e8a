#include "dos/scenegen.hpp"

#include "dos/config.hpp"
#include "dos/errors.hpp"
#include "dos/transport.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dos {

namespace {

constexpr double kPi = std::numbers::pi;

struct Instance {
  ShapeKind kind;
  double cx, cy;
  double sx, sy;  // box half sides, or radius in sx
  double height;
  double yaw;
  double footprint;  // bounding radius
  int variant;
};

Instance sample_instance(const ClassShape& shape, double extent, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto lerp = [&](double a, double b) { return a + (b - a) * u01(rng); };
  Instance in{};
  in.kind = shape.kind;
  switch (shape.kind) {
    case ShapeKind::Box:
      in.sx = 0.5 * lerp(shape.min_size, shape.max_size);
      in.sy = 0.5 * lerp(shape.min_size, shape.max_size);
      in.height = lerp(shape.min_height, shape.max_height);
      in.yaw = lerp(0.0, kPi);
      in.footprint = std::hypot(in.sx, in.sy);
      break;
    case ShapeKind::Cylinder:
      in.sx = in.sy = 0.5 * lerp(shape.min_size, shape.max_size);
      in.height = lerp(shape.min_height, shape.max_height);
      in.footprint = in.sx;
      break;
    case ShapeKind::Sphere:
      in.sx = in.sy = 0.5 * lerp(shape.min_size, shape.max_size);
      in.height = 2.0 * in.sx;
      in.footprint = in.sx;
      break;
  }
  const double margin = std::min(in.footprint, 0.5 * extent);
  in.cx = lerp(-0.5 * extent + margin, 0.5 * extent - margin);
  in.cy = lerp(-0.5 * extent + margin, 0.5 * extent - margin);
  return in;
}

std::array<double, 3> sample_surface(const Instance& in, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  switch (in.kind) {
    case ShapeKind::Box: {
      // Four sides plus top, area weighted; the bottom rests on the ground.
      const double ax = 2 * in.sx, ay = 2 * in.sy, h = in.height;
      const double areas[5] = {ax * h, ax * h, ay * h, ay * h, ax * ay};
      const double total = areas[0] + areas[1] + areas[2] + areas[3] + areas[4];
      double r = u01(rng) * total;
      int face = 0;
      while (face < 4 && r >= areas[face]) r -= areas[face++];
      double lx = 0, ly = 0, z = 0;
      const double a = u01(rng), b = u01(rng);
      switch (face) {
        case 0: lx = (a - 0.5) * ax; ly = -in.sy; z = b * h; break;
        case 1: lx = (a - 0.5) * ax; ly = in.sy; z = b * h; break;
        case 2: lx = -in.sx; ly = (a - 0.5) * ay; z = b * h; break;
        case 3: lx = in.sx; ly = (a - 0.5) * ay; z = b * h; break;
        default: lx = (a - 0.5) * ax; ly = (b - 0.5) * ay; z = h; break;
      }
      const double c = std::cos(in.yaw), s = std::sin(in.yaw);
      return {in.cx + c * lx - s * ly, in.cy + s * lx + c * ly, z};
    }
    case ShapeKind::Cylinder: {
      const double r = in.sx, h = in.height;
      const double side = 2 * kPi * r * h, top = kPi * r * r;
      const double theta = 2 * kPi * u01(rng);
      if (u01(rng) * (side + top) < side)
        return {in.cx + r * std::cos(theta), in.cy + r * std::sin(theta), h * u01(rng)};
      const double rad = r * std::sqrt(u01(rng));
      return {in.cx + rad * std::cos(theta), in.cy + rad * std::sin(theta), h};
    }
    case ShapeKind::Sphere: {
      const double z = 2 * u01(rng) - 1;
      const double theta = 2 * kPi * u01(rng);
      const double rho = std::sqrt(std::max(0.0, 1 - z * z));
      const double r = in.sx;
      return {in.cx + r * rho * std::cos(theta), in.cy + r * rho * std::sin(theta), r + r * z};
    }
  }
  return {0, 0, 0};
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void SceneConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2", "/scene/num_classes");
  if (num_points < num_classes) throw ConfigError("num_points must be >= num_classes", "/scene/num_points");
  if (!(frequency_exponent >= 0.0)) throw ConfigError("frequency_exponent must be >= 0", "/scene/frequency_exponent");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1", "/scene/feature_dim");
  if (!(extent > 0.0)) throw ConfigError("extent must be positive", "/scene/extent");
  if (!(feature_noise >= 0.0)) throw ConfigError("feature_noise must be >= 0", "/scene/feature_noise");
  if (appearance_variants < 1)
    throw ConfigError("appearance_variants must be >= 1", "/scene/appearance_variants");
  if (!palette.empty() && static_cast<int>(palette.size()) != num_classes - 1)
    throw ConfigError("palette must list num_classes - 1 object classes", "/scene/palette");
  for (std::size_t i = 0; i < palette.size(); ++i) {
    const auto& p = palette[i];
    const std::string path = "/scene/palette/" + std::to_string(i);
    if (!(p.min_size > 0 && p.max_size >= p.min_size)) throw ConfigError("invalid size range", path);
    if (!(p.min_height > 0 && p.max_height >= p.min_height)) throw ConfigError("invalid height range", path);
    if (p.instances < 1) throw ConfigError("instances must be >= 1", path);
  }
}

std::vector<ClassShape> default_palette(int num_classes) {
  std::vector<ClassShape> out;
  for (int c = 1; c < num_classes; ++c) {
    ClassShape s;
    s.kind = static_cast<ShapeKind>((c - 1) % 3);
    // Frequent classes are large structures, rare ones small props.
    const double shrink = 1.0 / (1.0 + 0.25 * (c - 1));
    s.min_size = 1.2 * shrink;
    s.max_size = 2.4 * shrink;
    s.min_height = ((c - 1) % 2 == 0 ? 0.8 : 1.6) * shrink + 0.2;
    s.max_height = s.min_height * 1.6;
    s.instances = c <= 2 ? 3 : 2;
    out.push_back(s);
  }
  return out;
}

Mat class_prototypes(const SceneConfig& config) {
  Rng rng(derive_seed(config.seed, {0x70726f746fULL}));
  std::normal_distribution<double> n01(0.0, 1.0);
  Mat protos(config.num_classes * config.appearance_variants, config.feature_dim);
  for (Eigen::Index i = 0; i < protos.size(); ++i) protos.data()[i] = config.feature_scale * n01(rng);
  return protos;
}

LabeledCloud generate_scene(const SceneConfig& config, std::uint64_t seed) {
  config.validate();
  const int C = config.num_classes;
  const int N = config.num_points;
  const auto palette = config.palette.empty() ? default_palette(C) : config.palette;
  const Mat protos = class_prototypes(config);
  const ZipfPrior prior = zipf_prior(C, config.frequency_exponent);

  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);

  // Object placement: footprints must not overlap.
  std::vector<std::vector<Instance>> instances(C);
  std::vector<Instance> placed;
  for (int c = 1; c < C; ++c) {
    const auto& shape = palette[c - 1];
    for (int k = 0; k < shape.instances; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
        Instance in = sample_instance(shape, config.extent, rng);
        in.variant = static_cast<int>(rng() % static_cast<std::uint64_t>(config.appearance_variants));
        ok = std::none_of(placed.begin(), placed.end(), [&](const Instance& o) {
          return std::hypot(in.cx - o.cx, in.cy - o.cy) < in.footprint + o.footprint + 0.1;
        });
        if (ok) {
          placed.push_back(in);
          instances[c].push_back(in);
        }
      }
      if (!ok)
        throw GeometryError("generate_scene: could not place an instance of class " + std::to_string(c) +
                            " after 200 attempts");
    }
  }

  const int V = config.appearance_variants;
  const int ground_variant = static_cast<int>(rng() % static_cast<std::uint64_t>(V));

  // Labels are i.i.d. draws from the class prior.
  std::discrete_distribution<int> label_dist(prior.weights.begin(), prior.weights.end());
  LabeledCloud cloud;
  cloud.positions.resize(N, 3);
  cloud.features.resize(N, config.feature_dim);
  cloud.labels.resize(N);
  for (int i = 0; i < N; ++i) cloud.labels[i] = label_dist(rng);

  for (int i = 0; i < N; ++i) {
    const int c = cloud.labels[i];
    std::array<double, 3> p{};
    int row = c * V + ground_variant;
    if (c == 0) {
      for (int attempt = 0; attempt < 1000; ++attempt) {
        p = {(u01(rng) - 0.5) * config.extent, (u01(rng) - 0.5) * config.extent, 0.0};
        const bool covered = std::any_of(placed.begin(), placed.end(), [&](const Instance& o) {
          return std::hypot(p[0] - o.cx, p[1] - o.cy) < o.footprint;
        });
        if (!covered) break;
      }
    } else {
      const auto& list = instances[c];
      const auto pick = static_cast<std::size_t>(u01(rng) * static_cast<double>(list.size()));
      const Instance& in = list[std::min(pick, list.size() - 1)];
      p = sample_surface(in, rng);
      row = c * V + in.variant;
    }
    cloud.positions.row(i) << p[0], p[1], p[2];
    for (int j = 0; j < config.feature_dim; ++j) {
      const double noise = config.feature_noise > 0.0 ? config.feature_noise * n01(rng) : 0.0;
      cloud.features(i, j) = protos(row, j) + noise;
    }
  }
  return cloud;
}

Dataset generate_dataset(const SceneConfig& config, int count) {
  Dataset ds;
  ds.config = config;
  ds.scenes.reserve(count);
  for (int i = 0; i < count; ++i)
    ds.scenes.push_back(generate_scene(config, derive_seed(config.seed, {static_cast<std::uint64_t>(i)})));
  return ds;
}

std::vector<std::pair<int, std::size_t>> class_frequency_profile(const std::vector<LabeledCloud>& scenes,
                                                                 int num_classes) {
  if (scenes.empty()) throw Error("class_frequency_profile: empty dataset");
  std::vector<std::pair<int, std::size_t>> counts(num_classes);
  for (int c = 0; c < num_classes; ++c) counts[c] = {c, 0};
  for (const auto& s : scenes)
    for (int l : s.labels) {
      if (l < 0 || l >= num_classes) throw Error("class_frequency_profile: label out of range");
      ++counts[l].second;
    }
  std::stable_sort(counts.begin(), counts.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return counts;
}

double loglog_slope(const std::vector<std::size_t>& sorted_counts) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t r = 0; r < sorted_counts.size(); ++r) {
    if (sorted_counts[r] == 0) continue;
    const double x = std::log(static_cast<double>(r + 1));
    const double y = std::log(static_cast<double>(sorted_counts[r]));
    sx += x; sy += y; sxx += x * x; sxy += x * y;
    ++n;
  }
  if (n < 2) return 0.0;
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::vector<int> frequency_groups(const std::vector<std::pair<int, std::size_t>>& profile, int num_classes) {
  const int third = num_classes / 3;
  std::vector<int> group(num_classes, 1);
  for (int r = 0; r < static_cast<int>(profile.size()); ++r) {
    const int c = profile[r].first;
    if (r < third) group[c] = 0;
    else if (r >= num_classes - third) group[c] = 2;
  }
  return group;
}

void export_scenes(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const auto& cfg = dataset.config;
  nlohmann::json manifest = {
      {"version", 1},
      {"num_scenes", dataset.scenes.size()},
      {"C", cfg.num_classes},
      {"d", cfg.feature_dim},
      {"N", cfg.num_points},
      {"generator", scene_config_to_json(cfg)},
      {"master_seed", cfg.seed},
  };
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw Error("export_scenes: cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
  }
  for (std::size_t s = 0; s < dataset.scenes.size(); ++s) {
    const auto& sc = dataset.scenes[s];
    const auto path = dir / ("scene_" + std::to_string(s) + ".csv");
    std::ofstream out(path);
    if (!out) throw Error("export_scenes: cannot write " + path.string());
    out << "x,y,z";
    for (Eigen::Index j = 0; j < sc.features.cols(); ++j) out << ",f" << j;
    out << ",label\n";
    for (std::size_t i = 0; i < sc.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      out << format_double(sc.positions(r, 0)) << ',' << format_double(sc.positions(r, 1)) << ','
          << format_double(sc.positions(r, 2));
      for (Eigen::Index j = 0; j < sc.features.cols(); ++j) out << ',' << format_double(sc.features(r, j));
      out << ',' << sc.labels[i] << '\n';
    }
  }
}

namespace {

LabeledCloud read_scene_csv(const std::filesystem::path& path, int d, int num_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open scene file");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "missing header");
  std::string expected = "x,y,z";
  for (int j = 0; j < d; ++j) expected += ",f" + std::to_string(j);
  expected += ",label";
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected) throw ParseError(path.string(), 1, "header does not match manifest d=" + std::to_string(d));

  std::vector<double> pos, feat;
  std::vector<int> labels;
  const std::size_t width = static_cast<std::size_t>(d) + 4;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != width)
      throw ParseError(path.string(), lineno,
                       "expected " + std::to_string(width) + " fields, got " + std::to_string(fields.size()));
    try {
      for (std::size_t j = 0; j < width - 1; ++j) {
        std::size_t used = 0;
        const double v = std::stod(fields[j], &used);
        if (used != fields[j].size() || !std::isfinite(v)) throw std::invalid_argument("bad");
        (j < 3 ? pos : feat).push_back(v);
      }
      std::size_t used = 0;
      const int label = std::stoi(fields.back(), &used);
      if (used != fields.back().size() || label < 0 || label >= num_classes) throw std::invalid_argument("bad");
      labels.push_back(label);
    } catch (const std::exception&) {
      throw ParseError(path.string(), lineno, "malformed value");
    }
  }
  LabeledCloud c;
  const auto n = static_cast<Eigen::Index>(labels.size());
  c.positions = Eigen::Map<Mat>(pos.data(), n, 3);
  c.features = Eigen::Map<Mat>(feat.data(), n, d);
  c.labels = std::move(labels);
  return c;
}

}  // namespace

Dataset import_scenes(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw ParseError(dir.string(), 0, "no manifest");
  std::ifstream in(mpath);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(mpath.string(), 0, e.what());
  }
  Dataset ds;
  int num_scenes = 0, C = 0, d = 0;
  try {
    if (manifest.at("version").get<int>() != 1) throw ParseError(mpath.string(), 0, "unsupported manifest version");
    num_scenes = manifest.at("num_scenes").get<int>();
    C = manifest.at("C").get<int>();
    d = manifest.at("d").get<int>();
    ds.config = scene_config_from_json(manifest.at("generator"), "/generator");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(mpath.string(), 0, e.what());
  }
  if (ds.config.feature_dim != d || ds.config.num_classes != C)
    throw ParseError(mpath.string(), 0, "manifest fields disagree with generator config");
  for (int s = 0; s < num_scenes; ++s)
    ds.scenes.push_back(read_scene_csv(dir / ("scene_" + std::to_string(s) + ".csv"), d, C));
  return ds;
}

}  // namespace dos
