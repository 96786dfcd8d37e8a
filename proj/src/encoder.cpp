#include "dos/encoder.hpp"

#include "dos/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace dos {

void EncoderConfig::validate() const {
  if (input_width < 1) throw ConfigError("input_width must be >= 1", "/encoder/input_width");
  if (hidden < 4) throw ConfigError("hidden must be >= 4", "/encoder/hidden");
  if (embed < 4) throw ConfigError("embed must be >= 4", "/encoder/embed");
  if (layers < 1) throw ConfigError("layers must be >= 1", "/encoder/layers");
  if (pool_factor < 2) throw ConfigError("pool_factor must be >= 2", "/encoder/pool_factor");
  if (radius < 0) throw ConfigError("radius must be >= 0", "/encoder/radius");
}

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

Adjacency neighbors(const std::vector<VoxelCoord>& sorted_coords, int radius) {
  Adjacency adj;
  adj.offsets.reserve(sorted_coords.size() + 1);
  adj.offsets.push_back(0);
  for (const auto& c : sorted_coords) {
    for (int dx = -radius; dx <= radius; ++dx)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dz = -radius; dz <= radius; ++dz) {
          const VoxelCoord q{c[0] + dx, c[1] + dy, c[2] + dz};
          auto it = std::lower_bound(sorted_coords.begin(), sorted_coords.end(), q);
          if (it != sorted_coords.end() && *it == q)
            adj.indices.push_back(static_cast<int>(it - sorted_coords.begin()));
        }
    adj.offsets.push_back(static_cast<int>(adj.indices.size()));
  }
  return adj;
}

// out_i = mean_{j in N(i)} in_j
Mat aggregate(const Adjacency& adj, const Mat& in) {
  const auto V = static_cast<Eigen::Index>(adj.offsets.size()) - 1;
  Mat out = Mat::Zero(V, in.cols());
  for (Eigen::Index v = 0; v < V; ++v) {
    for (int e = adj.offsets[v]; e < adj.offsets[v + 1]; ++e) out.row(v) += in.row(adj.indices[e]);
    out.row(v) /= static_cast<double>(adj.degree(static_cast<int>(v)));
  }
  return out;
}

Mat aggregate_transpose(const Adjacency& adj, const Mat& d_out) {
  Mat d_in = Mat::Zero(d_out.rows(), d_out.cols());
  const auto V = static_cast<Eigen::Index>(adj.offsets.size()) - 1;
  for (Eigen::Index v = 0; v < V; ++v) {
    const double inv = 1.0 / static_cast<double>(adj.degree(static_cast<int>(v)));
    for (int e = adj.offsets[v]; e < adj.offsets[v + 1]; ++e) d_in.row(adj.indices[e]) += inv * d_out.row(v);
  }
  return d_in;
}

Mat silu_of(const Mat& x) { return x.unaryExpr([](double v) { return silu(v); }); }
Mat silu_grad_of(const Mat& x) { return x.unaryExpr([](double v) { return silu_grad(v); }); }

std::string fine_name(int l, const char* what) { return "fine" + std::to_string(l) + "." + what; }

}  // namespace

EncoderGraph build_graph(const std::vector<VoxelCoord>& coords, const EncoderConfig& config) {
  EncoderGraph g;
  g.fine = neighbors(coords, config.radius);
  VoxelCoord lo{0, 0, 0};
  if (!coords.empty()) {
    lo = coords.front();
    for (const auto& c : coords)
      for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], c[a]);
  }
  std::map<VoxelCoord, int> coarse_index;
  std::vector<VoxelCoord> fine_to_coarse(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) {
    for (int a = 0; a < 3; ++a) fine_to_coarse[i][a] = floor_div(coords[i][a] - lo[a], config.pool_factor);
    coarse_index.emplace(fine_to_coarse[i], 0);
  }
  std::vector<VoxelCoord> coarse_coords;
  for (auto& [c, idx] : coarse_index) {
    idx = static_cast<int>(coarse_coords.size());
    coarse_coords.push_back(c);
  }
  g.coarse_of.resize(coords.size());
  g.coarse_count.assign(coarse_coords.size(), 0);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    g.coarse_of[i] = coarse_index[fine_to_coarse[i]];
    ++g.coarse_count[g.coarse_of[i]];
  }
  g.coarse = neighbors(coarse_coords, 1);
  return g;
}

void init_encoder_params(ParamStore& store, const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto weight = [&](const std::string& name, int fan_in, int fan_out) {
    Mat& w = store.add(name, fan_in, fan_out, true);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * n01(rng);
  };
  const int H = config.hidden;
  weight("in.W", config.input_width, H);
  store.add("in.b", 1, H, false);
  for (int l = 0; l < config.layers; ++l) {
    weight(fine_name(l, "W"), H, H);
    store.add(fine_name(l, "b"), 1, H, false);
  }
  weight("coarse.W", H, H);
  store.add("coarse.b", 1, H, false);
  weight("out.W", 2 * H, config.embed);
  store.add("out.b", 1, config.embed, false);
}

ParamStore init_params(const EncoderConfig& config, std::uint64_t seed) {
  ParamStore store;
  init_encoder_params(store, config, seed);
  return store;
}

Mat encode(const ParamStore& params, const EncoderGraph& graph, const Mat& input, const EncoderConfig& config,
           EncoderCache* cache) {
  if (input.rows() == 0) throw Error("encode: empty voxel grid");
  if (static_cast<std::size_t>(input.rows()) != graph.num_fine()) throw Error("encode: input rows do not match graph");
  if (input.cols() != config.input_width) throw Error("encode: input width does not match encoder config");

  Mat h = (input * params.value("in.W")).rowwise() + RowVec(params.value("in.b"));
  if (cache) {
    cache->input = input;
    cache->hidden.assign(1, h);
    cache->preact.clear();
  }
  for (int l = 0; l < config.layers; ++l) {
    Mat pre = (h * params.value(fine_name(l, "W"))).rowwise() + RowVec(params.value(fine_name(l, "b")));
    h += aggregate(graph.fine, silu_of(pre));
    if (cache) {
      cache->preact.push_back(std::move(pre));
      cache->hidden.push_back(h);
    }
  }

  const auto Vc = static_cast<Eigen::Index>(graph.num_coarse());
  Mat c0 = Mat::Zero(Vc, h.cols());
  for (std::size_t i = 0; i < graph.num_fine(); ++i) c0.row(graph.coarse_of[i]) += h.row(static_cast<Eigen::Index>(i));
  for (Eigen::Index c = 0; c < Vc; ++c) c0.row(c) /= static_cast<double>(graph.coarse_count[c]);
  Mat cpre = (c0 * params.value("coarse.W")).rowwise() + RowVec(params.value("coarse.b"));
  const Mat c1 = c0 + aggregate(graph.coarse, silu_of(cpre));

  Mat concat(h.rows(), 2 * h.cols());
  concat.leftCols(h.cols()) = h;
  for (std::size_t i = 0; i < graph.num_fine(); ++i)
    concat.row(static_cast<Eigen::Index>(i)).tail(h.cols()) = c1.row(graph.coarse_of[i]);
  Mat out = (concat * params.value("out.W")).rowwise() + RowVec(params.value("out.b"));
  if (cache) {
    cache->coarse_in = std::move(c0);
    cache->coarse_preact = std::move(cpre);
    cache->concat = std::move(concat);
  }
  return out;
}

Mat encode_backward(ParamStore& params, const EncoderGraph& graph, const EncoderCache& cache, const Mat& d_out,
                    const EncoderConfig& config) {
  const auto H = static_cast<Eigen::Index>(config.hidden);
  params.grad("out.W").noalias() += cache.concat.transpose() * d_out;
  params.grad("out.b") += d_out.colwise().sum();
  const Mat d_concat = d_out * params.value("out.W").transpose();

  Mat dh = d_concat.leftCols(H);
  const auto Vc = static_cast<Eigen::Index>(graph.num_coarse());
  Mat dc1 = Mat::Zero(Vc, H);
  for (std::size_t i = 0; i < graph.num_fine(); ++i)
    dc1.row(graph.coarse_of[i]) += d_concat.row(static_cast<Eigen::Index>(i)).tail(H);

  const Mat d_cpre = aggregate_transpose(graph.coarse, dc1).cwiseProduct(silu_grad_of(cache.coarse_preact));
  params.grad("coarse.W").noalias() += cache.coarse_in.transpose() * d_cpre;
  params.grad("coarse.b") += d_cpre.colwise().sum();
  const Mat dc0 = dc1 + d_cpre * params.value("coarse.W").transpose();
  for (std::size_t i = 0; i < graph.num_fine(); ++i) {
    const int c = graph.coarse_of[i];
    dh.row(static_cast<Eigen::Index>(i)) += dc0.row(c) / static_cast<double>(graph.coarse_count[c]);
  }

  for (int l = config.layers - 1; l >= 0; --l) {
    const Mat d_pre = aggregate_transpose(graph.fine, dh).cwiseProduct(silu_grad_of(cache.preact[l]));
    params.grad(fine_name(l, "W")).noalias() += cache.hidden[l].transpose() * d_pre;
    params.grad(fine_name(l, "b")) += d_pre.colwise().sum();
    dh.noalias() += d_pre * params.value(fine_name(l, "W")).transpose();
  }
  params.grad("in.W").noalias() += cache.input.transpose() * dh;
  params.grad("in.b") += dh.colwise().sum();
  return dh * params.value("in.W").transpose();
}

void ema_update(ParamStore& teacher, const ParamStore& student, double momentum) {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("ema momentum must be in [0, 1]");
  const std::string bad = teacher.layout_mismatch(student);
  if (!bad.empty()) throw Error("ema_update: layout mismatch at '" + bad + "'");
  auto t = teacher.arrays();
  auto s = student.arrays();
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i].value = (momentum * t[i].value.array() + (1.0 - momentum) * s[i].value.array()).matrix();
}

}  // namespace dos
