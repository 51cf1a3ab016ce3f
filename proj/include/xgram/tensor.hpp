#pragma once

#include <Eigen/Dense>

namespace xgram {

// Row-major so that a matrix row is one token's feature vector.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

}  // namespace xgram
