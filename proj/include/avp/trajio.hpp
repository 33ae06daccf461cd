#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "avp/chunk.hpp"
#include "avp/errors.hpp"
#include "avp/geometry.hpp"
#include "avp/metrics.hpp"
#include "avp/primitive.hpp"
#include "avp/raster.hpp"
#include "avp/task.hpp"

namespace avp::trajio {

struct SchemaMismatch : Error {
  explicit SchemaMismatch(const std::string& m) : Error(m) {}
};
struct MalformedRecord : Error {
  explicit MalformedRecord(const std::string& m) : Error(m) {}
};
struct NonMonotonicTime : Error {
  explicit NonMonotonicTime(const std::string& m) : Error(m) {}
};
struct BadRotation : Error {
  explicit BadRotation(const std::string& m) : Error(m) {}
};
struct MissingField : Error {
  explicit MissingField(const std::string& m) : Error(m) {}
};
struct TruncatedFile : Error {
  explicit TruncatedFile(const std::string& m) : Error(m) {}
};
struct ChecksumMismatch : Error {
  explicit ChecksumMismatch(const std::string& m) : Error(m) {}
};

struct ProprioState {
  geometry::Point3 ee_pos;
  double gripper_cmd = 1.0;
  double gripper_meas = 1.0;
};

struct TrajectoryStep {
  double timestamp = 0.0;
  ProprioState proprio;
  std::string obs_ref;  // "relative/path.avpo#frame" or empty
  std::shared_ptr<const render::RasterImage> obs;  // set when inline or resolved
};

struct Trajectory {
  std::string episode_id;
  std::string camera_id;
  sim::TaskSpec task;  // instruction_id not carried by the log; 0 until recomputed
  std::vector<TrajectoryStep> steps;
};

struct CameraModel {
  std::string camera_id;
  geometry::CameraIntrinsics intrinsics;
  geometry::RigidTransform extrinsic;  // base -> camera
  int image_width = 0;
  int image_height = 0;
};

// One training example. `observation` is the prompt-composed image the action
// expert consumes; `raw_observation` is the unprompted render the primitive
// decoder consumes (the decoder predicts the primitive, so it must not see it).
struct LabeledSample {
  render::RasterImage observation;
  render::RasterImage raw_observation;
  ProprioState proprio;
  learn::InstructionEncoding instruction;
  supervision::PrimitiveLabel primitive_gt;
  learn::ActionChunk action_chunk;
  int stage_index = 0;
};

inline constexpr int kTrajectoryLogSchemaVersion = 1;

// JSON-lines trajectory log. First line is a header object carrying
// schema_version; each further line is one step record.
std::vector<Trajectory> read_trajectory_log(std::istream& in);
void write_trajectory_log(const std::vector<Trajectory>& trajs, std::ostream& out);

// key = value calibration text with a 16-float row-major 4x4 extrinsic.
CameraModel read_calibration(std::istream& in);
void write_calibration(const CameraModel& cam, std::ostream& out);

// Binary sample shard: "AVPD", u32 version, u64 count, packed samples,
// trailing u64 FNV-1a checksum. Bit-exact round trip, images as raw f32
// little-endian planes.
void write_dataset(const std::vector<LabeledSample>& samples, std::ostream& out);
std::vector<LabeledSample> read_dataset(std::istream& in);
// Streaming variant; the checksum is verified after the last sample.
void read_dataset_stream(std::istream& in, const std::function<void(LabeledSample&&)>& fn);

// Streaming shard writer for datasets too large to assemble in memory. The
// sample count is part of the header, so it must be declared up front;
// finish() rejects a mismatched count and appends the checksum.
class DatasetWriter {
 public:
  DatasetWriter(std::ostream& out, std::uint64_t count);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;
  void add(const LabeledSample& s);
  void finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Metrics report as one JSON document with fixed key order and 2-decimal rates.
void write_metrics_report(const harness::MetricsTable& metrics, std::ostream& out);

}  // namespace avp::trajio
