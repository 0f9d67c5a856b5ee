#include "vmclamp/state_vector.hpp"

namespace vmclamp {

StateVector StateVector::from_eigen(const NetworkLayout& lay, const Eigen::VectorXd& x,
                                    int leg) {
    StateVector s;
    s.i_la = x(lay.i_la(leg));
    s.i_lra = x(lay.i_lra(leg));
    s.v_cra = x(lay.v_cra(leg));
    s.v_cc = x(lay.v_cc(leg));
    s.v_ca1 = x(lay.v_ca(leg, 1));
    if (lay.m >= 3) s.v_ca2 = x(lay.v_ca(leg, 2));
    s.v_cout1 = x(lay.v_cout(1));
    s.v_cout2 = x(lay.v_cout(2));
    if (lay.m >= 3) s.v_cout3 = x(lay.v_cout(3));
    s.v_cp = x(lay.v_cp(leg));
    return s;
}

Eigen::VectorXd StateVector::to_eigen(const NetworkLayout& lay, int leg) const {
    Eigen::VectorXd x = Eigen::VectorXd::Zero(lay.dim());
    x(lay.i_la(leg)) = i_la;
    x(lay.i_lra(leg)) = i_lra;
    x(lay.v_cra(leg)) = v_cra;
    x(lay.v_cc(leg)) = v_cc;
    x(lay.v_ca(leg, 1)) = v_ca1;
    if (lay.m >= 3) x(lay.v_ca(leg, 2)) = v_ca2;
    x(lay.v_cout(1)) = v_cout1;
    x(lay.v_cout(2)) = v_cout2;
    if (lay.m >= 3) x(lay.v_cout(3)) = v_cout3;
    x(lay.v_cp(leg)) = v_cp;
    return x;
}

} // namespace vmclamp
