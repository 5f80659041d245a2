#pragma once

#include <Eigen/Dense>

#include <vector>

namespace rcisysid {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MatList = std::vector<Mat>;

}  // namespace rcisysid
