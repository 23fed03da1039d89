#include "al3d/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace al3d {

using ad::Mat;
using ad::Tape;
using ad::ValueId;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

std::vector<std::pair<int, int>> tensor_shapes(const ModelConfig& c) {
  std::vector<std::pair<int, int>> shapes;
  auto push_mlp = [&shapes](const std::vector<int>& widths) {
    int in = 3;
    for (int w : widths) {
      shapes.emplace_back(in, w);
      shapes.emplace_back(1, w);
      in = w;
    }
  };
  push_mlp(c.encoder_widths);
  const int feat = c.encoder_widths.back();
  shapes.emplace_back(feat, 3);
  shapes.emplace_back(1, 3);
  shapes.emplace_back(feat, c.yaw_head_outputs());
  shapes.emplace_back(1, c.yaw_head_outputs());
  shapes.emplace_back(2 * feat, c.variance_hidden);
  shapes.emplace_back(1, c.variance_hidden);
  shapes.emplace_back(c.variance_hidden, 1);
  shapes.emplace_back(1, 1);
  if (!c.shared_encoder) push_mlp(c.encoder_widths);
  return shapes;
}

void validate_config(const ModelConfig& c) {
  if (c.encoder_widths.empty()) {
    throw std::invalid_argument("ModelConfig: encoder needs at least one layer");
  }
  for (int w : c.encoder_widths) {
    if (w < 1) throw std::invalid_argument("ModelConfig: non-positive encoder width");
  }
  if (c.variance_hidden < 1) throw std::invalid_argument("ModelConfig: variance_hidden < 1");
  if (c.n_bins < 2) throw std::invalid_argument("ModelConfig: n_bins < 2");
}

// Indices of the head tensors relative to the encoder length.
struct Layout {
  int w_t, b_t, w_yaw, b_yaw, w_v1, b_v1, w_v2, b_v2, psi_begin;
  explicit Layout(const ModelConfig& c) {
    const int base = 2 * static_cast<int>(c.encoder_widths.size());
    w_t = base;
    b_t = base + 1;
    w_yaw = base + 2;
    b_yaw = base + 3;
    w_v1 = base + 4;
    b_v1 = base + 5;
    w_v2 = base + 6;
    b_v2 = base + 7;
    psi_begin = base + 8;
  }
};

}  // namespace

size_t ModelParams::scalar_count() const {
  size_t n = 0;
  for (const Mat& t : tensors) n += static_cast<size_t>(t.size());
  return n;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  validate_config(config);
  ModelParams params;
  params.config = config;
  std::mt19937_64 rng(seed);
  for (const auto& [rows, cols] : tensor_shapes(config)) {
    Mat t(rows, cols);
    if (rows == 1) {
      t.setZero();  // biases
    } else {
      const double lim = std::sqrt(6.0 / (rows + cols));
      std::uniform_real_distribution<double> dist(-lim, lim);
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) t(i, j) = dist(rng);
      }
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Plain forward
// ---------------------------------------------------------------------------

namespace {

Eigen::RowVector3d per_axis_median(const Mat& points) {
  Eigen::RowVector3d med;
  std::vector<double> col(points.rows());
  for (int j = 0; j < 3; ++j) {
    for (Eigen::Index i = 0; i < points.rows(); ++i) col[i] = points(i, j);
    std::sort(col.begin(), col.end());
    const size_t hi = col.size() / 2;
    const size_t lo = (col.size() % 2 == 0) ? hi - 1 : hi;
    med(j) = 0.5 * (col[lo] + col[hi]);
  }
  return med;
}

Mat points_matrix(const PointCloud& cloud) {
  Mat p(cloud.size(), 3);
  for (size_t i = 0; i < cloud.size(); ++i) p.row(i) = cloud.points[i].transpose();
  return p;
}

Mat run_mlp(const ModelParams& params, int first_tensor, const Mat& input) {
  Mat h = input;
  for (size_t layer = 0; layer < params.config.encoder_widths.size(); ++layer) {
    const Mat& w = params.tensors[first_tensor + 2 * layer];
    const Mat& b = params.tensors[first_tensor + 2 * layer + 1];
    h = (h * w + b.replicate(h.rows(), 1)).cwiseMax(0.0);
  }
  return h;
}

}  // namespace

Prediction forward(const ModelParams& params, const PointCloud& points) {
  if (points.empty()) throw std::invalid_argument("forward: empty point cloud");
  const Layout at(params.config);
  const Mat p = points_matrix(points);
  const Eigen::Index n = p.rows();
  const Eigen::RowVector3d med = per_axis_median(p);
  const Mat centred = p - med.replicate(n, 1);

  const Mat feat = run_mlp(params, 0, centred);
  const Mat global = feat.colwise().maxCoeff();

  Prediction pred;
  const Mat t_res = global * params.tensors[at.w_t] + params.tensors[at.b_t];
  pred.translation = (med + t_res.row(0)).transpose();
  pred.yaw_logits = (global * params.tensors[at.w_yaw] + params.tensors[at.b_yaw]).row(0);

  const Mat& vfeat = params.config.shared_encoder
                         ? feat
                         : run_mlp(params, at.psi_begin, centred);
  const Mat vglobal = params.config.shared_encoder
                          ? global
                          : Mat(vfeat.colwise().maxCoeff());
  Mat vin(n, 2 * vfeat.cols());
  vin << vfeat, vglobal.replicate(n, 1);
  const Mat hidden =
      (vin * params.tensors[at.w_v1] + params.tensors[at.b_v1].replicate(n, 1)).cwiseMax(0.0);
  const Mat raw = hidden * params.tensors[at.w_v2] + params.tensors[at.b_v2].replicate(n, 1);
  pred.log_var = raw.col(0).cwiseMax(-kLogVarClamp).cwiseMin(kLogVarClamp);
  return pred;
}

Prediction forward_arctan(const ModelParams& params, const PointCloud& points) {
  if (params.config.yaw_mode != YawMode::Arctan) {
    throw std::invalid_argument("forward_arctan: model is not configured with the arctan head");
  }
  return forward(params, points);
}

Pose4DoF decode_pose(const Prediction& pred, const YawBins& bins, YawMode mode) {
  return Pose4DoF::make(decode_yaw(pred, bins, mode), pred.translation);
}

// ---------------------------------------------------------------------------
// Loss graph
// ---------------------------------------------------------------------------

namespace {

struct ForwardIds {
  ValueId points;
  ValueId translation;  // 1x3
  ValueId logits;       // 1xK
  ValueId log_var;      // nx1
};

ForwardIds build_forward(Tape& tape, const std::vector<ValueId>& param_ids,
                         const ModelConfig& cfg, const Mat& points,
                         bool points_require_grad) {
  const Layout at(cfg);
  const int n = static_cast<int>(points.rows());
  ForwardIds ids;
  ids.points = points_require_grad ? tape.leaf(points) : tape.constant(points);

  const ValueId med = tape.row_median(ids.points);
  const ValueId centred = tape.sub(ids.points, tape.broadcast_row(med, n));

  auto mlp = [&](int first_tensor) {
    ValueId h = centred;
    for (size_t layer = 0; layer < cfg.encoder_widths.size(); ++layer) {
      h = tape.relu(tape.add(tape.matmul(h, param_ids[first_tensor + 2 * layer]),
                             param_ids[first_tensor + 2 * layer + 1]));
    }
    return h;
  };

  const ValueId feat = mlp(0);
  const ValueId global = tape.colwise_max(feat);
  ids.translation =
      tape.add(med, tape.add(tape.matmul(global, param_ids[at.w_t]), param_ids[at.b_t]));
  ids.logits = tape.add(tape.matmul(global, param_ids[at.w_yaw]), param_ids[at.b_yaw]);

  ValueId vfeat = feat;
  ValueId vglobal = global;
  if (!cfg.shared_encoder) {
    vfeat = mlp(at.psi_begin);
    vglobal = tape.colwise_max(vfeat);
  }
  const ValueId vin = tape.concat_cols(vfeat, tape.broadcast_row(vglobal, n));
  const ValueId hidden =
      tape.relu(tape.add(tape.matmul(vin, param_ids[at.w_v1]), param_ids[at.b_v1]));
  const ValueId raw = tape.add(tape.matmul(hidden, param_ids[at.w_v2]), param_ids[at.b_v2]);
  ids.log_var = tape.clamp(raw, -kLogVarClamp, kLogVarClamp);
  return ids;
}

// 1x3 row node for a keypoint carried by a differentiable pose. In Bins mode
// the rotation is the hard-decoded bin angle, a constant of the graph.
ValueId keypoint_row(Tape& tape, const Vec3& keypoint, const ForwardIds& fwd, YawMode mode,
                     double decoded_yaw) {
  if (mode == YawMode::Bins) {
    const Vec3 rotated = yaw_rotation(decoded_yaw) * keypoint;
    return tape.add(tape.constant(rotated.transpose()), fwd.translation);
  }
  const ValueId y = tape.select(fwd.logits, 0, 0);
  const ValueId x = tape.select(fwd.logits, 0, 1);
  const ValueId theta = tape.atan2(y, x);
  const ValueId s = tape.sin(theta);
  const ValueId c = tape.cos(theta);
  const ValueId px = tape.add(tape.mul(tape.constant(Mat::Constant(1, 1, keypoint.x())), c),
                              tape.mul(tape.constant(Mat::Constant(1, 1, keypoint.z())), s));
  const ValueId pz = tape.sub(tape.mul(tape.constant(Mat::Constant(1, 1, keypoint.z())), c),
                              tape.mul(tape.constant(Mat::Constant(1, 1, keypoint.x())), s));
  const ValueId py = tape.constant(Mat::Constant(1, 1, keypoint.y()));
  return tape.add(tape.concat_cols(tape.concat_cols(px, py), pz), fwd.translation);
}

size_t track_pair_count(size_t len, int horizon) {
  size_t pairs = 0;
  for (size_t a = 0; a < len; ++a) {
    pairs += std::min<size_t>(horizon, len - 1 - a);
  }
  return pairs;
}

}  // namespace

BatchLossGraph build_loss_graph(const ModelParams& params,
                                std::span<const MaskedDetection> instances,
                                std::span<const std::vector<int>> tracks,
                                std::span<const EgoMotion> ego_world,
                                const TemplateMesh& mesh, const TrainConfig& cfg,
                                bool points_require_grad, long norm_instances,
                                long norm_pairs) {
  if (instances.empty()) throw std::invalid_argument("build_loss_graph: empty batch");
  const YawBins bins = YawBins::make(params.config.n_bins);
  const YawMode mode = params.config.yaw_mode;

  BatchLossGraph graph;
  graph.tape.reserve(instances.size() * 96 + 64);
  Tape& tape = graph.tape;
  for (const Mat& t : params.tensors) graph.params.push_back(tape.leaf(t));

  graph.n_instances = instances.size();
  std::vector<ForwardIds> fwd(instances.size());
  std::vector<double> decoded_yaws(instances.size());
  ValueId align_acc, ce_acc;

  for (size_t m = 0; m < instances.size(); ++m) {
    const MaskedDetection& inst = instances[m];
    if (inst.points.empty()) {
      throw std::invalid_argument("build_loss_graph: instance with empty point cloud");
    }
    const Mat p = points_matrix(inst.points);
    fwd[m] = build_forward(tape, graph.params, params.config, p, points_require_grad);
    if (points_require_grad) graph.instance_points.push_back(fwd[m].points);

    const Vec3 t_pred = tape.value(fwd[m].translation).row(0).transpose();
    const Eigen::VectorXd logits = tape.value(fwd[m].logits).row(0);
    const Eigen::VectorXd log_var_val = tape.value(fwd[m].log_var).col(0);
    const PerPointVariance lv_for_search =
        cfg.outlier_aware ? log_var_val : PerPointVariance(PerPointVariance::Zero(p.rows()));

    // Pose at which the fixed correspondences are extracted.
    double align_yaw;
    int best_bin = -1;
    if (mode == YawMode::Bins) {
      const YawBinSearchResult search =
          yaw_bin_search(t_pred, mesh, inst.points, lv_for_search, bins);
      best_bin = search.best_bin;
      align_yaw = bins.centre(best_bin);
      Prediction tmp;
      tmp.yaw_logits = logits;
      decoded_yaws[m] = decode_yaw(tmp, bins, mode);
    } else {
      Prediction tmp;
      tmp.yaw_logits = logits;
      decoded_yaws[m] = decode_yaw(tmp, bins, mode);
      align_yaw = decoded_yaws[m];
    }
    const Pose4DoF align_pose = Pose4DoF::make(align_yaw, t_pred);
    const std::vector<Vec3> closest = closest_points_canonical(align_pose, mesh, inst.points);

    // Residuals r_i = || R y_i + T - x_i ||^2 with y_i held fixed.
    ValueId posed_template;
    if (mode == YawMode::Bins) {
      Mat rotated(p.rows(), 3);
      const Mat3 r = yaw_rotation(align_yaw);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        rotated.row(i) = (r * closest[i]).transpose();
      }
      posed_template = tape.constant(std::move(rotated));
    } else {
      Mat yx(p.rows(), 1), yy(p.rows(), 1), yz(p.rows(), 1);
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        yx(i, 0) = closest[i].x();
        yy(i, 0) = closest[i].y();
        yz(i, 0) = closest[i].z();
      }
      const ValueId sy = tape.select(fwd[m].logits, 0, 0);
      const ValueId cx = tape.select(fwd[m].logits, 0, 1);
      const ValueId theta = tape.atan2(sy, cx);
      const ValueId s = tape.sin(theta);
      const ValueId c = tape.cos(theta);
      const ValueId cyx = tape.constant(std::move(yx));
      const ValueId cyz = tape.constant(std::move(yz));
      const ValueId ax = tape.add(tape.mul(cyx, c), tape.mul(cyz, s));
      const ValueId az = tape.sub(tape.mul(cyz, c), tape.mul(cyx, s));
      posed_template = tape.concat_cols(tape.concat_cols(ax, tape.constant(std::move(yy))), az);
    }
    const ValueId diff = tape.sub(
        tape.add(posed_template,
                 tape.broadcast_row(fwd[m].translation, static_cast<int>(p.rows()))),
        fwd[m].points);
    const ValueId r2 = tape.rowwise_sum(tape.square(diff));

    ValueId align_m;
    if (cfg.outlier_aware) {
      const ValueId weighted =
          tape.add(tape.mul(r2, tape.exp(tape.neg(fwd[m].log_var))), fwd[m].log_var);
      align_m = tape.mean(weighted);
    } else {
      align_m = tape.mean(r2);
    }
    graph.per_instance_alignment.push_back(tape.scalar(align_m));
    graph.align_sum += tape.scalar(align_m);
    align_acc = align_acc.valid() ? tape.add(align_acc, align_m) : align_m;

    if (mode == YawMode::Bins) {
      const ValueId ce_m = tape.softmax_cross_entropy(fwd[m].logits, best_bin);
      graph.ce_sum += tape.scalar(ce_m);
      ce_acc = ce_acc.valid() ? tape.add(ce_acc, ce_m) : ce_m;
    }
  }

  // Keypoint consistency over the provided tracks.
  ValueId cons_acc;
  for (const std::vector<int>& track : tracks) {
    for (int idx : track) {
      if (idx < 0 || idx >= static_cast<int>(instances.size())) {
        throw std::invalid_argument("build_loss_graph: track index outside the batch");
      }
    }
    for (size_t a = 0; a < track.size(); ++a) {
      for (size_t j = 1;
           j <= static_cast<size_t>(cfg.consistency_horizon) && a + j < track.size(); ++j) {
        const int ia = track[a];
        const int ib = track[a + j];
        const EgoMotion g =
            relative_ego(ego_world, instances[ia].frame_id, instances[ib].frame_id);
        const ValueId rot = tape.constant(g.rotation.transpose());
        const ValueId off = tape.constant(g.translation.transpose());
        const std::array<Vec3, 2> keypoints = {mesh.keypoint_centre, mesh.keypoint_front};
        for (size_t kp = 0; kp < keypoints.size(); ++kp) {
          const ValueId pa =
              keypoint_row(tape, keypoints[kp], fwd[ia], mode, decoded_yaws[ia]);
          const ValueId pb =
              keypoint_row(tape, keypoints[kp], fwd[ib], mode, decoded_yaws[ib]);
          const ValueId carried = tape.add(tape.matmul(pb, rot), off);
          const ValueId sq = tape.sum(tape.square(tape.sub(carried, pa)));
          (kp == 0 ? graph.centre_sum : graph.front_sum) += tape.scalar(sq);
          cons_acc = cons_acc.valid() ? tape.add(cons_acc, sq) : sq;
        }
        ++graph.n_pairs;
      }
    }
  }

  const double inst_norm =
      static_cast<double>(norm_instances >= 0 ? norm_instances : graph.n_instances);
  const double pair_norm =
      static_cast<double>(norm_pairs >= 0 ? norm_pairs : graph.n_pairs);

  ValueId total = tape.mul(tape.constant(Mat::Constant(1, 1, cfg.loss_weights.alignment / inst_norm)),
                           align_acc);
  if (ce_acc.valid()) {
    total = tape.add(
        total, tape.mul(tape.constant(Mat::Constant(1, 1, cfg.loss_weights.yaw_ce / inst_norm)),
                        ce_acc));
  }
  if (cons_acc.valid() && pair_norm > 0.0) {
    total = tape.add(
        total,
        tape.mul(tape.constant(Mat::Constant(1, 1, cfg.loss_weights.consistency / pair_norm)),
                 cons_acc));
  }
  graph.total = total;
  return graph;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  long t = 0;

  explicit AdamState(const ModelParams& params) {
    for (const Mat& p : params.tensors) {
      m.push_back(Mat::Zero(p.rows(), p.cols()));
      v.push_back(Mat::Zero(p.rows(), p.cols()));
    }
  }

  void step(ModelParams& params, const std::vector<Mat>& grads, double lr) {
    constexpr double beta1 = 0.9;
    constexpr double beta2 = 0.999;
    constexpr double eps = 1e-8;
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t k = 0; k < params.tensors.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * grads[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * grads[k].cwiseProduct(grads[k]);
      const Mat mhat = m[k] / bc1;
      const Mat vhat = v[k] / bc2;
      params.tensors[k] -=
          lr * mhat.cwiseQuotient(vhat.cwiseSqrt() + Mat::Constant(vhat.rows(), vhat.cols(), eps));
    }
  }
};

struct GroupResult {
  std::vector<Mat> grads;
  double align_sum = 0.0;
  double ce_sum = 0.0;
  double centre_sum = 0.0;
  double front_sum = 0.0;
  size_t pairs = 0;
};

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

}  // namespace

TrainResult train(std::span<const MaskedDetection> instances,
                  std::span<const std::vector<int>> tracks,
                  std::span<const EgoMotion> ego_world, const TemplateMesh& mesh,
                  const TrainConfig& config, const ModelParams* resume_from,
                  int start_epoch) {
  if (instances.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (config.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");

  ModelParams params =
      resume_from ? *resume_from : init_params(config.model, config.seed);
  if (resume_from && !(resume_from->config == config.model)) {
    throw std::invalid_argument("train: resume checkpoint architecture differs from config");
  }

  // Groups keep a track's instances together so its consistency pairs stay
  // inside one batch; untracked instances become singleton groups.
  std::vector<std::vector<int>> groups;
  std::vector<char> covered(instances.size(), 0);
  for (const std::vector<int>& track : tracks) {
    for (int idx : track) {
      if (idx < 0 || idx >= static_cast<int>(instances.size())) {
        throw std::invalid_argument("train: track references an unknown instance");
      }
      if (covered[idx]) throw std::invalid_argument("train: tracks are not disjoint");
      covered[idx] = 1;
    }
    if (!track.empty()) groups.push_back(track);
  }
  for (size_t i = 0; i < instances.size(); ++i) {
    if (!covered[i]) groups.push_back({static_cast<int>(i)});
  }

  const int n_threads = config.threads > 0
                            ? config.threads
                            : std::max(1u, std::thread::hardware_concurrency());

  AdamState adam(params);
  TrainResult result;
  std::vector<int> order(groups.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int e = 0; e < config.epochs; ++e) {
    const int global_epoch = start_epoch + e;
    const double lr =
        config.learning_rate *
        std::pow(config.lr_decay_factor, global_epoch / config.lr_decay_every_epochs);

    std::mt19937_64 rng(mix_seed(config.seed, static_cast<uint64_t>(global_epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    double ep_align = 0.0, ep_ce = 0.0, ep_centre = 0.0, ep_front = 0.0;
    size_t ep_inst = 0, ep_pairs = 0;

    size_t cursor = 0;
    while (cursor < order.size()) {
      // Pack whole groups until the batch holds at least batch_size instances.
      std::vector<int> batch_groups;
      size_t batch_instances = 0;
      size_t batch_pairs = 0;
      while (cursor < order.size() &&
             (batch_instances < static_cast<size_t>(config.batch_size))) {
        const std::vector<int>& g = groups[order[cursor]];
        batch_groups.push_back(order[cursor]);
        batch_instances += g.size();
        batch_pairs += track_pair_count(g.size(), config.consistency_horizon);
        ++cursor;
      }

      std::vector<GroupResult> chunk_results(
          std::min<size_t>(n_threads, batch_groups.size()));
      std::vector<std::exception_ptr> errors(chunk_results.size());
      const size_t chunks = chunk_results.size();
      const size_t per_chunk = (batch_groups.size() + chunks - 1) / chunks;

      auto work = [&](size_t chunk) {
        try {
          GroupResult& acc = chunk_results[chunk];
          for (const Mat& t : params.tensors) acc.grads.push_back(Mat::Zero(t.rows(), t.cols()));
          const size_t begin = chunk * per_chunk;
          const size_t end = std::min(batch_groups.size(), begin + per_chunk);
          for (size_t gi = begin; gi < end; ++gi) {
            const std::vector<int>& group = groups[batch_groups[gi]];
            std::vector<MaskedDetection> gathered;
            gathered.reserve(group.size());
            for (int idx : group) gathered.push_back(instances[idx]);
            std::vector<std::vector<int>> local_tracks;
            if (group.size() > 1) {
              std::vector<int> local(group.size());
              for (size_t i = 0; i < group.size(); ++i) local[i] = static_cast<int>(i);
              local_tracks.push_back(std::move(local));
            }
            BatchLossGraph graph = build_loss_graph(
                params, gathered, local_tracks, ego_world, mesh, config, false,
                static_cast<long>(batch_instances), static_cast<long>(batch_pairs));
            const double loss = graph.tape.scalar(graph.total);
            if (!std::isfinite(loss)) {
              for (size_t i = 0; i < gathered.size(); ++i) {
                if (!std::isfinite(graph.per_instance_alignment[i])) {
                  throw std::runtime_error(
                      "train: non-finite loss at instance frame " +
                      std::to_string(gathered[i].frame_id) + " det " +
                      std::to_string(gathered[i].det_id));
                }
              }
              throw std::runtime_error("train: non-finite batch loss");
            }
            graph.tape.backward(graph.total);
            for (size_t k = 0; k < acc.grads.size(); ++k) {
              acc.grads[k] += graph.tape.gradient(graph.params[k]);
            }
            acc.align_sum += graph.align_sum;
            acc.ce_sum += graph.ce_sum;
            acc.centre_sum += graph.centre_sum;
            acc.front_sum += graph.front_sum;
            acc.pairs += graph.n_pairs;
          }
        } catch (...) {
          errors[chunk] = std::current_exception();
        }
      };

      if (chunks == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (size_t c = 0; c < chunks; ++c) pool.emplace_back(work, c);
        for (std::thread& t : pool) t.join();
      }
      for (const std::exception_ptr& err : errors) {
        if (err) std::rethrow_exception(err);
      }

      // Fixed-order reduction keeps batches bitwise reproducible.
      std::vector<Mat> grads;
      for (const Mat& t : params.tensors) grads.push_back(Mat::Zero(t.rows(), t.cols()));
      for (const GroupResult& r : chunk_results) {
        for (size_t k = 0; k < grads.size(); ++k) grads[k] += r.grads[k];
        ep_align += r.align_sum;
        ep_ce += r.ce_sum;
        ep_centre += r.centre_sum;
        ep_front += r.front_sum;
        ep_pairs += r.pairs;
      }
      ep_inst += batch_instances;
      adam.step(params, grads, lr);
    }

    EpochLog log;
    log.epoch = global_epoch;
    log.lr = lr;
    log.mean.alignment = ep_align / static_cast<double>(ep_inst);
    log.mean.yaw_ce = ep_ce / static_cast<double>(ep_inst);
    log.mean.consistency_centre = ep_pairs ? ep_centre / static_cast<double>(ep_pairs) : 0.0;
    log.mean.consistency_front = ep_pairs ? ep_front / static_cast<double>(ep_pairs) : 0.0;
    log.mean.total = config.loss_weights.alignment * log.mean.alignment +
                     config.loss_weights.yaw_ce * log.mean.yaw_ce +
                     config.loss_weights.consistency *
                         (log.mean.consistency_centre + log.mean.consistency_front);
    result.log.push_back(log);
  }

  result.params = std::move(params);
  result.epochs_completed = start_epoch + config.epochs;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'L', '3', 'D'};
constexpr uint32_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const TrainConfig& config, int epochs_completed) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, 4);
  write_pod<uint32_t>(out, kFormatVersion);
  const ModelConfig& mc = params.config;
  write_pod<uint32_t>(out, static_cast<uint32_t>(mc.n_bins));
  write_pod<uint32_t>(out, mc.yaw_mode == YawMode::Bins ? 0u : 1u);
  write_pod<uint32_t>(out, mc.shared_encoder ? 1u : 0u);
  write_pod<uint32_t>(out, static_cast<uint32_t>(mc.encoder_widths.size()));
  for (int w : mc.encoder_widths) write_pod<uint32_t>(out, static_cast<uint32_t>(w));
  write_pod<uint32_t>(out, static_cast<uint32_t>(mc.variance_hidden));
  write_pod<uint32_t>(out, static_cast<uint32_t>(epochs_completed));
  write_pod<uint64_t>(out, static_cast<uint64_t>(params.tensors.size()));
  for (const Mat& t : params.tensors) {
    write_pod<uint64_t>(out, static_cast<uint64_t>(t.rows()));
    write_pod<uint64_t>(out, static_cast<uint64_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) write_pod<double>(out, t(i, j));
    }
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
  out.close();

  std::ofstream sidecar(path + ".json", std::ios::trunc);
  if (!sidecar) throw std::runtime_error("save_checkpoint: cannot open " + path + ".json");
  TrainConfig echoed = config;
  echoed.model = params.config;
  sidecar << train_config_to_json(echoed) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<uint32_t>(in, path);
  if (version != kFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version) + " in " + path);
  }
  Checkpoint ckpt;
  ModelConfig mc;
  mc.n_bins = static_cast<int>(read_pod<uint32_t>(in, path));
  mc.yaw_mode = read_pod<uint32_t>(in, path) == 0 ? YawMode::Bins : YawMode::Arctan;
  mc.shared_encoder = read_pod<uint32_t>(in, path) != 0;
  const auto depth = read_pod<uint32_t>(in, path);
  mc.encoder_widths.clear();
  for (uint32_t i = 0; i < depth; ++i) {
    mc.encoder_widths.push_back(static_cast<int>(read_pod<uint32_t>(in, path)));
  }
  mc.variance_hidden = static_cast<int>(read_pod<uint32_t>(in, path));
  ckpt.epochs_completed = static_cast<int>(read_pod<uint32_t>(in, path));

  const auto n_tensors = read_pod<uint64_t>(in, path);
  const auto shapes = tensor_shapes(mc);
  if (n_tensors != shapes.size()) {
    throw std::runtime_error("load_checkpoint: tensor count mismatch in " + path);
  }
  ckpt.params.config = mc;
  for (const auto& [rows, cols] : shapes) {
    const auto r = read_pod<uint64_t>(in, path);
    const auto c = read_pod<uint64_t>(in, path);
    if (r != static_cast<uint64_t>(rows) || c != static_cast<uint64_t>(cols)) {
      throw std::runtime_error("load_checkpoint: tensor shape mismatch in " + path);
    }
    Mat t(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) t(i, j) = read_pod<double>(in, path);
    }
    ckpt.params.tensors.push_back(std::move(t));
  }

  std::ifstream sidecar(path + ".json");
  if (sidecar) {
    std::ostringstream buf;
    buf << sidecar.rdbuf();
    ckpt.config = train_config_from_json(buf.str());
  }
  ckpt.config.model = mc;
  return ckpt;
}

// ---------------------------------------------------------------------------
// TrainConfig JSON
// ---------------------------------------------------------------------------

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["learning_rate"] = c.learning_rate;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["lr_decay_every_epochs"] = c.lr_decay_every_epochs;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["n_bins"] = c.model.n_bins;
  j["seed"] = c.seed;
  j["loss_weights"] = {{"alignment", c.loss_weights.alignment},
                       {"yaw_ce", c.loss_weights.yaw_ce},
                       {"consistency", c.loss_weights.consistency}};
  j["outlier_aware"] = c.outlier_aware;
  j["consistency_horizon"] = c.consistency_horizon;
  j["threads"] = c.threads;
  j["model"] = {{"encoder_widths", c.model.encoder_widths},
                {"variance_hidden", c.model.variance_hidden},
                {"shared_encoder", c.model.shared_encoder},
                {"yaw_mode", c.model.yaw_mode == YawMode::Bins ? "bins" : "arctan"}};
  return j.dump(2);
}

namespace {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                         const std::string& scope) {
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(known.begin(), known.end(),
                     [&key](const char* k) { return key == k; }) == known.end()) {
      throw std::runtime_error("config: unknown key '" + scope + key + "'");
    }
  }
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  reject_unknown_keys(j,
                      {"learning_rate", "lr_decay_factor", "lr_decay_every_epochs", "epochs",
                       "batch_size", "n_bins", "seed", "loss_weights", "outlier_aware",
                       "consistency_horizon", "threads", "model"},
                      "");
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lr_decay_every_epochs = j.value("lr_decay_every_epochs", c.lr_decay_every_epochs);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    reject_unknown_keys(w, {"alignment", "yaw_ce", "consistency"}, "loss_weights.");
    c.loss_weights.alignment = w.value("alignment", c.loss_weights.alignment);
    c.loss_weights.yaw_ce = w.value("yaw_ce", c.loss_weights.yaw_ce);
    c.loss_weights.consistency = w.value("consistency", c.loss_weights.consistency);
  }
  c.outlier_aware = j.value("outlier_aware", c.outlier_aware);
  c.consistency_horizon = j.value("consistency_horizon", c.consistency_horizon);
  c.threads = j.value("threads", c.threads);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown_keys(m, {"encoder_widths", "variance_hidden", "shared_encoder", "yaw_mode"},
                        "model.");
    c.model.encoder_widths =
        m.value("encoder_widths", c.model.encoder_widths);
    c.model.variance_hidden = m.value("variance_hidden", c.model.variance_hidden);
    c.model.shared_encoder = m.value("shared_encoder", c.model.shared_encoder);
    const std::string mode = m.value("yaw_mode", std::string("bins"));
    if (mode == "bins") {
      c.model.yaw_mode = YawMode::Bins;
    } else if (mode == "arctan") {
      c.model.yaw_mode = YawMode::Arctan;
    } else {
      throw std::runtime_error("config: yaw_mode must be 'bins' or 'arctan'");
    }
  }
  c.model.n_bins = j.value("n_bins", c.model.n_bins);
  return c;
}

}  // namespace al3d
