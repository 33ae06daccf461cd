#pragma once

#include <cstddef>
#include <vector>

#include "avp/errors.hpp"

namespace avp::learn {

// Compact (source, target) cell pair; expand() yields the concatenated
// source/target one-hot vector of length 2*n_cells the networks consume.
struct InstructionEncoding {
  int n_cells = 0;
  int source = 0;
  int target = 0;

  std::vector<double> expand() const {
    std::vector<double> v(static_cast<std::size_t>(2) * n_cells, 0.0);
    v[static_cast<std::size_t>(source)] = 1.0;
    v[static_cast<std::size_t>(n_cells) + target] = 1.0;
    return v;
  }
};

inline bool operator==(const InstructionEncoding& a, const InstructionEncoding& b) {
  return a.n_cells == b.n_cells && a.source == b.source && a.target == b.target;
}

// h consecutive actions, flattened as (dx, dy, dz, gripper) per step.
struct ActionChunk {
  int horizon = 0;
  std::vector<double> a;  // length horizon*4

  double& at(int step, int dim) { return a[static_cast<std::size_t>(step) * 4 + dim]; }
  double at(int step, int dim) const { return a[static_cast<std::size_t>(step) * 4 + dim]; }

  static ActionChunk zeros(int h) {
    ActionChunk c;
    c.horizon = h;
    c.a.assign(static_cast<std::size_t>(h) * 4, 0.0);
    return c;
  }
};

inline bool operator==(const ActionChunk& a, const ActionChunk& b) {
  return a.horizon == b.horizon && a.a == b.a;
}

}  // namespace avp::learn
