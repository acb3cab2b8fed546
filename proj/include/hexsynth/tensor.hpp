#pragma once

#include <Eigen/Dense>

namespace hexsynth {

// Row-major dense matrix. Per-string tensors of shape (strings, frames, d)
// are stored as (strings * frames, d) with row index string * frames + frame.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline Eigen::Index row_of(Eigen::Index string, Eigen::Index frame, Eigen::Index n_frames) {
  return string * n_frames + frame;
}

}  // namespace hexsynth
