#pragma once

#include <string>
#include <vector>

#include "avp/primitive.hpp"

namespace avp::harness {

// Success rates in [0, 100].
struct SeedRates {
  std::uint64_t seed = 0;
  double instr_rate = 0.0;
  double pick_rate = 0.0;
  double place_rate = 0.0;
  double avg_rate = 0.0;
};

struct MetricsRow {
  std::string config_name;
  double instr_rate = 0.0;
  double pick_rate = 0.0;
  double place_rate = 0.0;
  double avg_rate = 0.0;  // mean of the three rates
  std::vector<SeedRates> seeds;
};

struct MetricsTable {
  std::vector<MetricsRow> rows;
  std::vector<supervision::DropEvent> supervision_drops;
  std::string config_echo;
};

}  // namespace avp::harness
