#pragma once

#include <Eigen/Dense>

#include "vmclamp/network.hpp"

namespace vmclamp {

/// Named entry conditions of one three-stage leg at a state boundary.
/// For other stage counts work with raw Eigen vectors and NetworkLayout.
struct StateVector {
    double i_la = 0.0;
    double i_lra = 0.0;
    double v_cra = 0.0;
    double v_cc = 0.0;
    double v_ca1 = 0.0;
    double v_ca2 = 0.0;
    double v_cout1 = 0.0;
    double v_cout2 = 0.0;
    double v_cout3 = 0.0;
    double v_cp = 0.0;

    static StateVector from_eigen(const NetworkLayout& lay, const Eigen::VectorXd& x,
                                  int leg = 0);
    Eigen::VectorXd to_eigen(const NetworkLayout& lay, int leg = 0) const;
};

} // namespace vmclamp
