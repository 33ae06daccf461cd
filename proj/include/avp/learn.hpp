#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "avp/chunk.hpp"
#include "avp/errors.hpp"
#include "avp/primitive.hpp"
#include "avp/raster.hpp"
#include "avp/render.hpp"
#include "avp/rng.hpp"
#include "avp/sim.hpp"
#include "avp/supervision.hpp"
#include "avp/trajio.hpp"

namespace avp::learn {

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& m) : Error(m) {}
};

// What the action expert is conditioned on. NoPrimitive feeds it the raw
// image plus the instruction encoding directly. The primitive modes withhold
// the instruction from the expert: spatial intent reaches it only through the
// rendered marker (ground-truth at training time for PrimitiveGT, decoder
// argmax for PrimitivePredicted).
enum class ConditioningMode { NoPrimitive, PrimitiveGT, PrimitivePredicted };

std::string mode_name(ConditioningMode m);

struct TrainConfig {
  double lambda = 1.0;  // weight of the primitive-decoder loss
  double lr = 3e-3;          // expert (flow field) learning rate
  double decoder_lr = 1e-3;  // primitive decoder learning rate
  // Peak rates hold for this fraction of the run, then cosine-decay to zero.
  // 1.0 keeps them constant.
  double lr_hold = 0.7;
  int batch_size = 32;
  int train_steps = 5000;
  int flow_steps = 10;  // Euler steps when sampling action chunks
  int expert_hidden = 256;
  int decoder_hidden = 128;
  int horizon = 8;
  std::uint64_t seed = 1;
  ConditioningMode mode = ConditioningMode::PrimitiveGT;
  // Per-dimension affine normalization of action chunks inside the flow ops:
  // the network sees (a - offset) / scale. Identity by default.
  double action_scale[4] = {1.0, 1.0, 1.0, 1.0};
  double action_offset[4] = {0.0, 0.0, 0.0, 0.0};
  // Sampled chunks are clamped once at the end: position deltas to
  // [-delta_clamp, delta_clamp] (0 disables), gripper to [0, 1].
  double delta_clamp = 0.015;
  bool clamp_gripper = true;
};

// ---------------------------------------------------------------------------
// Networks: plain fully connected stacks, tanh on every layer but the last.

struct Linear {
  int in_dim = 0;
  int out_dim = 0;
  std::vector<double> w;  // row-major, out_dim x in_dim
  std::vector<double> b;  // out_dim
};

struct Mlp {
  std::vector<Linear> layers;
  int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
  int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }
};

// Post-activation value of every layer; acts[0] is the input itself.
struct MlpCache {
  std::vector<std::vector<double>> acts;
};

// Weights N(0, 1/sqrt(fan_in)), biases zero.
Mlp mlp_init(const std::vector<int>& dims, Rng& rng);
Mlp mlp_zeros_like(const Mlp& net);

std::vector<double> mlp_forward(const Mlp& net, const std::vector<double>& input,
                                MlpCache* cache = nullptr);

// Accumulates parameter gradients into `grads` (same shapes as `net`) and
// returns the gradient with respect to the input.
std::vector<double> mlp_backward(const Mlp& net, const MlpCache& cache,
                                 const std::vector<double>& grad_out, Mlp& grads);

// ---------------------------------------------------------------------------
// Optimizer: standard Adam, beta (0.9, 0.999), eps 1e-8, bias-corrected.

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
};

void adam_update(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
                 double lr);

// ---------------------------------------------------------------------------
// Observation encoding.

// Table extent used to normalize end-effector positions to roughly [-1, 1].
struct ProprioNorm {
  geometry::Point3 center{0.25, 0.0, 0.15};
  geometry::Point3 half{0.25, 0.25, 0.15};
};

struct ConditioningBundle {
  std::vector<double> obs_feat;      // pooled image, channels x 16 x 16
  std::vector<double> proprio_feat;  // normalized ee position + both gripper values
  std::vector<double> instr_feat;    // empty unless the expert may see the instruction

  std::vector<double> flat() const;
};

// 4x4 average pooling per channel plus normalized proprioception. instr_feat
// is left empty; callers running the NoPrimitive baseline fill it in.
ConditioningBundle encode_observation(const render::RasterImage& img,
                                      const trajio::ProprioState& s,
                                      const ProprioNorm& norm = {});

// Gradient of the pooled features back to pixel space (transpose of the
// pooling map); exposed so the encoding stays finite-difference-checkable.
render::RasterImage encode_pool_backward(const std::vector<double>& grad_obs_feat,
                                         const render::RasterImage& like);

// ---------------------------------------------------------------------------
// Flow matching with linear interpolation paths.

// x <- x + (1/steps) * field(x, k/steps) for k = 0..steps-1.
std::vector<double> euler_integrate(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& field,
    std::vector<double> x0, int steps);

// Draws x0 ~ N(0,1) and tau ~ U(0,1) from `rng`, forms x_tau on the line from
// x0 to the normalized chunk, and returns |v(x_tau, tau, cond) - (a - x0)|^2.
// When `grads` is non-null the exact parameter gradients for the sampled
// (x0, tau) are accumulated into it, scaled by `grad_scale`.
double fm_loss(const Mlp& expert, const ConditioningBundle& cond, const ActionChunk& a,
               const TrainConfig& cfg, Rng& rng, Mlp* grads = nullptr, double grad_scale = 1.0);

// Integrates the learned field from Gaussian noise over tau in [0,1], then
// denormalizes and clamps once.
ActionChunk fm_sample(const Mlp& expert, const ConditioningBundle& cond, int steps,
                      const TrainConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Primitive decoder: three factorized heads over one shared trunk.

struct DecoderLogits {
  std::vector<double> stage;  // 2
  std::vector<double> u;      // grid_u
  std::vector<double> v;      // grid_v
};

struct ModelDims {
  int n_board_cells = 90;
  int grid_u = 32;
  int grid_v = 32;
  int obs_feat = 768;  // 3 channels x 16 x 16 pooled
  int proprio = 5;
  int horizon = 8;
};

DecoderLogits decoder_forward(const Mlp& decoder, const InstructionEncoding& instr,
                              const std::vector<double>& raw_obs_feat, const ModelDims& dims,
                              MlpCache* cache = nullptr);

// Summed softmax cross-entropy over the three heads; grad = softmax - onehot.
double ce_loss(const DecoderLogits& logits, const supervision::PrimitiveLabel& label,
               DecoderLogits* grad = nullptr);

// Head-wise argmax (first index on ties) turned back into a label whose anchor
// sits at the predicted cell's pixel center.
supervision::PrimitiveLabel decoder_argmax(const DecoderLogits& logits,
                                           const trajio::CameraModel& cam,
                                           const supervision::SupervisionConfig& sup);

// ---------------------------------------------------------------------------
// Model bundle and training.

struct ModelParams {
  Mlp expert;
  Mlp decoder;
  ConditioningMode mode = ConditioningMode::PrimitiveGT;
  ModelDims dims;
  // One Adam slot per tensor: expert w,b per layer, then decoder w,b per layer.
  std::vector<AdamState> opt;
};

ModelParams make_model(const TrainConfig& cfg, const ModelDims& dims, Rng& rng);

struct TrainMetrics {
  double l_act = 0.0;
  double l_vp = 0.0;
  double total = 0.0;
};

// Everything train_step and policy_rollout need besides the networks.
struct TrainSetup {
  TrainConfig train;
  render::RenderConfig render;
  supervision::SupervisionConfig sup;
  ProprioNorm norm;
  trajio::CameraModel camera;
};

// One minibatch update of both networks. Per-sample noise draws are keyed by
// sample content, so the batch mean is invariant under reordering.
TrainMetrics train_step(ModelParams& params, const std::vector<const trajio::LabeledSample*>& batch,
                        const TrainSetup& setup, Rng& rng);

// ---------------------------------------------------------------------------
// Checkpoints: magic "AVPC", config echo, float64 parameters and Adam state,
// trailing checksum. Byte-exact round trip.

void save_checkpoint(std::ostream& out, const ModelParams& params, const std::string& config_echo);

struct Checkpoint {
  ModelParams params;
  std::string config_echo;
};

Checkpoint load_checkpoint(std::istream& in);

// ---------------------------------------------------------------------------
// Closed-loop evaluation.

struct RolloutConfig {
  sim::SimConfig sim;
  TrainSetup setup;
  int budget = 260;  // environment steps
};

// Alternates decoder prediction, primitive rendering, chunk sampling, and
// simulator execution until the budget runs out; primitives are re-predicted
// at every chunk boundary and pushed into render history when the predicted
// cell changes.
sim::EpisodeResult policy_rollout(const ModelParams& params, const sim::SceneState& scene,
                                  const sim::TaskSpec& task, const RolloutConfig& cfg, Rng& rng);

}  // namespace avp::learn
