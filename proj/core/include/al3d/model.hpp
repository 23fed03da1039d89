#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "al3d/autodiff.hpp"
#include "al3d/losses.hpp"

namespace al3d {

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

/// Permutation-invariant point encoder with pose and per-point variance
/// heads. Points are centred on their per-axis median before encoding; the
/// translation head predicts a residual that is added back to the median.
struct ModelConfig {
  std::vector<int> encoder_widths{64, 128, 256};
  int variance_hidden = 64;
  int n_bins = 64;
  /// When false the variance head gets its own encoder of the same widths.
  bool shared_encoder = true;
  YawMode yaw_mode = YawMode::Bins;

  int yaw_head_outputs() const { return yaw_mode == YawMode::Bins ? n_bins : 2; }
  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  ModelConfig config;
  std::vector<ad::Mat> tensors;  // serialization order; see init_params

  size_t scalar_count() const;
};

/// Deterministic initialization: weights uniform in +-sqrt(6/(fan_in+fan_out)),
/// biases zero. Tensor order: encoder (W,b per layer), translation head,
/// yaw head, variance head (two layers), then the separate variance encoder
/// when not shared.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

/// Log-variance outputs are clamped to this symmetric range.
constexpr double kLogVarClamp = 10.0;

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Plain forward pass. Throws std::invalid_argument on an empty cloud.
Prediction forward(const ModelParams& params, const PointCloud& points);

/// Forward pass with the two-output arctan yaw head; requires
/// config.yaw_mode == Arctan.
Prediction forward_arctan(const ModelParams& params, const PointCloud& points);

Pose4DoF decode_pose(const Prediction& pred, const YawBins& bins,
                     YawMode mode = YawMode::Bins);

// ---------------------------------------------------------------------------
// Differentiable loss graph
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 3e-3;
  double lr_decay_factor = 0.3;
  int lr_decay_every_epochs = 30;
  int epochs = 150;
  int batch_size = 64;
  uint64_t seed = 0;
  LossWeights loss_weights;
  /// When false the per-point variances are pinned to 1 (plain alignment).
  bool outlier_aware = true;
  int consistency_horizon = 5;
  /// Worker threads for batch evaluation; 0 picks the hardware concurrency.
  /// Runs are bitwise reproducible for a fixed thread count.
  int threads = 0;
  ModelConfig model;

  int n_bins() const { return model.n_bins; }
};

/// Full training objective built on a tape: per-instance alignment at the
/// best yaw bin (fixed-correspondence residuals), yaw cross-entropy against
/// that bin, and keypoint consistency over tracks. The argmin bin and the
/// closest-point correspondences are constants of the graph; gradients flow
/// through translation, logits and log variances.
struct BatchLossGraph {
  ad::Tape tape;
  ad::ValueId total;
  std::vector<ad::ValueId> params;           // one per params.tensors entry
  std::vector<ad::ValueId> instance_points;  // per instance; valid when requested
  // Raw sums for logging and for external normalization.
  double align_sum = 0.0;
  double ce_sum = 0.0;
  double centre_sum = 0.0;
  double front_sum = 0.0;
  size_t n_instances = 0;
  size_t n_pairs = 0;
  std::vector<double> per_instance_alignment;
};

/// norm_instances / norm_pairs override the denominators (used when a batch
/// is split into independently differentiated groups); -1 uses the counts of
/// the given span.
BatchLossGraph build_loss_graph(const ModelParams& params,
                                std::span<const MaskedDetection> instances,
                                std::span<const std::vector<int>> tracks,
                                std::span<const EgoMotion> ego_world,
                                const TemplateMesh& mesh, const TrainConfig& cfg,
                                bool points_require_grad = false,
                                long norm_instances = -1, long norm_pairs = -1);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  LossBreakdown mean;
  double lr = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
  int epochs_completed = 0;  // global epoch count including resumed history
};

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over shuffled batches. Batches
/// group whole tracks so the consistency pairs stay intact. The learning
/// rate decays by lr_decay_factor every lr_decay_every_epochs epochs,
/// counted globally so resumed runs continue the schedule. Deterministic
/// given seed and thread count. Throws std::runtime_error naming the
/// offending instance when the loss turns non-finite.
TrainResult train(std::span<const MaskedDetection> instances,
                  std::span<const std::vector<int>> tracks,
                  std::span<const EgoMotion> ego_world, const TemplateMesh& mesh,
                  const TrainConfig& config, const ModelParams* resume_from = nullptr,
                  int start_epoch = 0);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned binary: magic "AL3D", format version, architecture echo,
/// completed-epoch count, then the parameter tensors as little-endian
/// 64-bit floats in declared order. A JSON sidecar (path + ".json") carries
/// the TrainConfig.
void save_checkpoint(const std::string& path, const ModelParams& params,
                     const TrainConfig& config, int epochs_completed);

struct Checkpoint {
  ModelParams params;
  TrainConfig config;
  int epochs_completed = 0;
};
Checkpoint load_checkpoint(const std::string& path);

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

}  // namespace al3d
