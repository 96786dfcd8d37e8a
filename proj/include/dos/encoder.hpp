#pragma once

#include "dos/cloudops.hpp"
#include "dos/numerics.hpp"

#include <cstdint>
#include <vector>

namespace dos {

struct EncoderConfig {
  int input_width = 9;  ///< feature dim + 3 offset channels
  int hidden = 64;
  int embed = 32;
  int radius = 1;       ///< fine neighborhood, Chebyshev voxel units
  int pool_factor = 2;  ///< coarse voxel = fine voxel coordinate / factor
  int layers = 2;

  void validate() const;
};

/// Compressed neighbor lists.
struct Adjacency {
  std::vector<int> offsets;  ///< size V + 1
  std::vector<int> indices;

  int degree(int v) const { return offsets[v + 1] - offsets[v]; }
};

/// Voxel connectivity used by the encoder. Built once per grid.
struct EncoderGraph {
  Adjacency fine;
  std::vector<int> coarse_of;          ///< fine voxel -> coarse voxel
  std::vector<int> coarse_count;       ///< fine voxels per coarse voxel
  Adjacency coarse;                    ///< coarse neighborhoods (radius 1)
  std::size_t num_fine() const { return coarse_of.size(); }
  std::size_t num_coarse() const { return coarse_count.size(); }
};

/// Coarse cells are taken relative to the grid's minimum voxel coordinate, so
/// the graph is unchanged when the whole cloud shifts by whole voxels.
EncoderGraph build_graph(const std::vector<VoxelCoord>& coords, const EncoderConfig& config);

/// Activations retained by the forward pass for the backward pass.
struct EncoderCache {
  Mat input;
  std::vector<Mat> hidden;    ///< H_0 .. H_L
  std::vector<Mat> preact;    ///< per fine block
  Mat coarse_in;              ///< pooled H_L per coarse voxel
  Mat coarse_preact;
  Mat concat;                 ///< [H_L, upcast coarse]
};

/// Adds the encoder arrays (in.*, fine<l>.*, coarse.*, out.*) to `store` with
/// N(0, 1/fan_in) weights and zero biases.
void init_encoder_params(ParamStore& store, const EncoderConfig& config, std::uint64_t seed);

ParamStore init_params(const EncoderConfig& config, std::uint64_t seed);

/// Per-voxel embeddings (V x embed) for input rows aligned with the graph.
/// `cache` may be null when no backward pass follows.
Mat encode(const ParamStore& params, const EncoderGraph& graph, const Mat& input, const EncoderConfig& config,
           EncoderCache* cache = nullptr);

inline Mat encode(const ParamStore& params, const VoxelGrid& grid, const EncoderConfig& config) {
  return encode(params, build_graph(grid.coords, config), grid.pooled, config);
}

/// Accumulates parameter gradients for upstream gradient `d_out` and returns
/// the gradient with respect to the input rows.
Mat encode_backward(ParamStore& params, const EncoderGraph& graph, const EncoderCache& cache, const Mat& d_out,
                    const EncoderConfig& config);

/// teacher <- m * teacher + (1 - m) * student, array by array.
void ema_update(ParamStore& teacher, const ParamStore& student, double momentum);

}  // namespace dos
