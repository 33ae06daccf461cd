#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "avp/learn.hpp"
#include "avp/metrics.hpp"
#include "avp/render.hpp"
#include "avp/sim.hpp"
#include "avp/supervision.hpp"
#include "avp/trajio.hpp"

namespace avp::harness {

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(m) {}
};

struct CountsConfig {
  int train_episodes = 400;
  int eval_tasks = 50;
  int n_pieces = 8;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::uint64_t data_seed = 7;
  int eval_budget = 260;  // environment steps per evaluation rollout
};

// Overrides for the ablation sweep; zero/empty means inherit the main values.
struct AblateConfig {
  int train_steps = 0;
  std::vector<std::uint64_t> seeds;
};

struct ExperimentConfig {
  sim::SimConfig sim;
  supervision::SupervisionConfig sup;
  render::RenderConfig render;
  learn::TrainConfig train;
  CountsConfig counts;
  AblateConfig ablate;
  std::string out_dir = "out";
};

ExperimentConfig default_config();

// One `section.key = value` per line, '#' comments, unknown keys rejected.
// Setting sim.spacing without the matching tolerance keys rescales
// sim.grasp_tol (0.4x) and sim.place_tol (0.5x) with it.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

// Canonical serialization of every key in a fixed order. Parsing the echo
// reproduces the config exactly; it is embedded in every artifact.
std::string config_echo(const ExperimentConfig& cfg);

// Derived pieces shared by training and evaluation.
learn::ModelDims model_dims(const ExperimentConfig& cfg);
learn::TrainSetup make_train_setup(const ExperimentConfig& cfg);

// Learning rate at a 1-based step: peak through the hold fraction of the run,
// cosine to zero after.
double scheduled_lr(const learn::TrainConfig& tc, int step);

// ---------------------------------------------------------------------------
// Observation containers: per-episode frame stacks referenced by trajectory
// logs. "AVPO", run-length coded float32 planes (renders are flat-shaded, so
// runs are long), trailing checksum. Lossless for any float image.

void write_obs_container(const std::vector<render::RasterImage>& frames, std::ostream& out);
std::vector<render::RasterImage> read_obs_container(std::istream& in);

// In-memory run-length image used to keep tens of thousands of frames
// resident without tens of gigabytes.
struct RleImage {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;
  std::vector<float> values;
};

RleImage rle_encode(const render::RasterImage& img);
render::RasterImage rle_decode(const RleImage& rle);

// ---------------------------------------------------------------------------
// Dataset artifacts.

struct EpisodeEntry {
  std::string id;
  int source = 0;
  int target = 0;
  int via = 0;
  int steps = 0;
  std::string log_path;  // relative to the manifest's directory
  std::string obs_path;
};

struct Manifest {
  std::vector<EpisodeEntry> episodes;
  std::vector<std::pair<int, int>> train_pairs;        // unique, sorted
  std::vector<std::pair<int, int>> eval_direct_pairs;  // disjoint from train_pairs
  std::string config_echo;
};

void write_manifest(const Manifest& m, std::ostream& out);
Manifest read_manifest(std::istream& in);

// Per-step training targets shared by supervision building and the ablation
// sweep: the next-keyframe label, the labels of already-completed stages
// (render history), and the expert's next `horizon` actions.
struct StepTargets {
  int step = 0;
  int stage_index = 0;
  supervision::PrimitiveLabel label;
  std::vector<supervision::PrimitiveLabel> history;
  trajio::ProprioState proprio;
  learn::ActionChunk chunk;
};

// One entry per step in [0, steps - horizon).
std::vector<StepTargets> episode_step_targets(const trajio::Trajectory& traj,
                                              const supervision::SupervisionResult& sup,
                                              int horizon);

// ---------------------------------------------------------------------------
// Commands. Artifacts live under cfg.out_dir:
//   camera.calib, manifest.json, logs/<ep>.jsonl, obs/<ep>.avpo,
//   dataset.avpd, supervision_report.json,
//   ckpt_<mode>_seed<N>.avpc, curve_<mode>_seed<N>.json,
//   metrics_<mode>_<evalmode>_seed<N>.json, ablation.json.

enum class EvalMode { Seen, UnseenDirect };

std::string eval_mode_name(EvalMode m);

// Scripted TwoStage demonstrations over uniformly drawn source/target pairs,
// plus the frozen direct-pair evaluation split.
void cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);

// Logs + observations -> labeled shard, composing prompts per cfg.render.
void cmd_make_supervision(const ExperimentConfig& cfg, std::ostream& log);

// Shard -> checkpoint + training curve for cfg.train.{mode,seed}.
void cmd_train(const ExperimentConfig& cfg, std::ostream& log);

// Rolls out one checkpoint on the seen or the held-out direct task set.
// The checkpoint's embedded config echo must match cfg.
MetricsTable cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path, EvalMode mode,
                      std::ostream& log);

// Scripted-expert reference rates through the same task plumbing; no model.
MetricsTable cmd_eval_oracle(const ExperimentConfig& cfg, EvalMode mode, std::ostream& log);

// Full prompt-design grid: {none, point, box, boxmask} x alpha {0, 0.7, 0.9}
// x memory {0, 1}. Behaviorally identical rows are trained once and shared.
MetricsTable cmd_ablate(const ExperimentConfig& cfg, std::ostream& log);

// First `limit` samples of a shard as PPM pairs (composed + raw).
void cmd_render_prompts(const std::string& dataset_path, const std::string& out_dir, int limit,
                        std::ostream& log);

// Runs the invariant suite, one line per property; returns the failure count.
// `inject_gradient_fault` corrupts one analytic gradient on purpose so the
// suite's own failure path stays tested.
int cmd_selftest(std::ostream& out, bool inject_gradient_fault = false);

}  // namespace avp::harness
