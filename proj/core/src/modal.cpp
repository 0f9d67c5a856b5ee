#include "vmclamp/modal.hpp"

#include <cmath>

namespace vmclamp {

namespace {

/// Value of one mode p cos(w t) + (q/w) sin(w t), or the ramp p + q t when
/// the mode frequency is zero.
double mode_value(double p, double q, double omega, double tau) {
    if (omega == 0.0) return p + q * tau;
    return p * std::cos(omega * tau) + (q / omega) * std::sin(omega * tau);
}

/// Integral of the mode from 0 to tau.
double mode_integral(double p, double q, double omega, double tau) {
    if (omega == 0.0) return p * tau + 0.5 * q * tau * tau;
    const double s = std::sin(omega * tau);
    const double c = std::cos(omega * tau);
    return (p / omega) * s + (q / (omega * omega)) * (1.0 - c);
}

/// Double integral of the mode: int_0^tau int_0^s mode(r) dr ds.
double mode_double_integral(double p, double q, double omega, double tau) {
    if (omega == 0.0) return 0.5 * p * tau * tau + q * tau * tau * tau / 6.0;
    const double s = std::sin(omega * tau);
    const double c = std::cos(omega * tau);
    const double w2 = omega * omega;
    return (p / w2) * (1.0 - c) + (q / w2) * (tau - s / omega);
}

/// Splits N(s) = n3 s^3 + n2 s^2 + n1 s + n0 over (s^2+w1^2)(s^2+w2^2)
/// into per-mode residue pairs. Valid for w2 = 0 (slow mode becomes the
/// polynomial part p2 + q2 t of N(s)/s^2).
ModalCoefficients::TwoMode split_modes(double n3, double n2, double n1, double n0,
                                       double w1sq, double w2sq) {
    ModalCoefficients::TwoMode tm;
    const double dw = w1sq - w2sq;
    tm.p1 = (n3 * w1sq - n1) / dw;
    tm.q1 = (n2 * w1sq - n0) / dw;
    tm.p2 = (n1 - n3 * w2sq) / dw;
    tm.q2 = (n0 - n2 * w2sq) / dw;
    return tm;
}

} // namespace

double ModalCoefficients::phase(double p, double q, double omega) {
    if (omega == 0.0) return 0.0;
    return std::atan2(p, q / omega);
}

bool pinned_common_node_voltage(OperationalState state, const StateVector& entry,
                                double* v_x) {
    switch (state) {
    case OperationalState::s1:
    case OperationalState::s8:
        *v_x = entry.v_cout1;
        return true;
    case OperationalState::s2:
        *v_x = entry.v_cout1 + entry.v_cout2 - entry.v_ca1 - entry.v_ca2;
        return true;
    case OperationalState::s3:
        *v_x = entry.v_cout1 - entry.v_ca1;
        return true;
    case OperationalState::s6:
        *v_x = entry.v_cout1 + entry.v_cout2 + entry.v_cout3 - entry.v_ca1 - entry.v_ca2;
        return true;
    case OperationalState::s7:
        *v_x = entry.v_cout1 + entry.v_cout2 - entry.v_ca1;
        return true;
    case OperationalState::s4:
    case OperationalState::s5:
        return false;
    }
    return false;
}

ModalCoefficients state_coefficients(OperationalState state,
                                     const ConverterConfig& cfg,
                                     const StateVector& entry) {
    ModalCoefficients mc;
    mc.state = state;
    mc.entry_i_la = entry.i_la;
    mc.entry_i_lra = entry.i_lra;
    mc.entry_v_cra = entry.v_cra;

    const auto [u, w] = equivalent_capacitances(state, cfg);
    mc.inv_c12 = u;
    mc.inv_c22 = w;
    mc.c_ds = u > 0.0 ? 1.0 / u : 0.0;

    const double la = cfg.l_a;
    const double lra = cfg.l_ra;

    // natural frequencies of the reduced loop
    mc.big_omega2 = 0.5 * (w / lra + (w - u) / la);
    mc.zeta4 = u * (w - u) / (la * lra);
    const double disc = mc.big_omega2 * mc.big_omega2 - mc.zeta4;
    if (disc < 0.0)
        throw ModeError("complex mode split in operational state " +
                        std::to_string(static_cast<int>(state)));
    const double root = std::sqrt(disc);
    double w1sq = mc.big_omega2 + root;
    double w2sq = mc.big_omega2 - root;
    if (w2sq < 1e-12 * w1sq) w2sq = 0.0; // exact zero mode (open return path)
    mc.omega1 = std::sqrt(std::max(w1sq, 0.0));
    mc.omega2 = std::sqrt(std::max(w2sq, 0.0));

    // loop source terms
    mc.src_p = cfg.v_in - entry.v_cra;
    mc.src_q = la * entry.i_la + lra * entry.i_lra;
    mc.src_d = lra * entry.i_lra;

    // ladder-path drive: signed combination of the capacitor voltages the
    // conducting loop passes through
    const GammaMatrix g = gamma_matrix(cfg.m_stages);
    const Eigen::RowVectorXd row = g.row(state);
    Eigen::VectorXd caps(2 * cfg.m_stages + 1);
    caps << entry.v_cout1, entry.v_cout2, entry.v_cout3, entry.v_cra, entry.v_cp,
        entry.v_ca1, entry.v_ca2;
    mc.src_c = row.dot(caps);

    if (w1sq == 0.0) {
        // fully open return path and no ladder capacitance: both currents ramp
        mc.linear = true;
        mc.la = {0.0, 0.0, entry.i_la, (mc.src_p - mc.src_c) / la};
        mc.lra = {0.0, 0.0, entry.i_lra, mc.src_c / lra};
        return mc;
    }

    // exact numerators of the Laplace solutions, normalized by L_a L_ra
    const double P = mc.src_p, Q = mc.src_q, c = mc.src_c, d = mc.src_d;
    mc.la = split_modes(entry.i_la, (P - c) / la, (w * Q - u * d) / (la * lra),
                        (w * P - u * c) / (la * lra), w1sq, w2sq);
    mc.lra = split_modes(entry.i_lra, c / lra, (w - u) * Q / (la * lra),
                         (w - u) * P / (la * lra), w1sq, w2sq);
    mc.linear = false;
    return mc;
}

std::pair<double, double> inductor_currents(const ModalCoefficients& mc, double tau) {
    const double ila = mode_value(mc.la.p1, mc.la.q1, mc.omega1, tau) +
                       mode_value(mc.la.p2, mc.la.q2, mc.omega2, tau);
    const double ilra = mode_value(mc.lra.p1, mc.lra.q1, mc.omega1, tau) +
                        mode_value(mc.lra.p2, mc.lra.q2, mc.omega2, tau);
    return {ila, ilra};
}

ChargeIntegrals charge_integrals(const ModalCoefficients& mc, double tau) {
    ChargeIntegrals q;
    q.q_la = mode_integral(mc.la.p1, mc.la.q1, mc.omega1, tau) +
             mode_integral(mc.la.p2, mc.la.q2, mc.omega2, tau);
    q.q_lra = mode_integral(mc.lra.p1, mc.lra.q1, mc.omega1, tau) +
              mode_integral(mc.lra.p2, mc.lra.q2, mc.omega2, tau);
    return q;
}

double resonant_charge_area(const ModalCoefficients& mc, double tau) {
    return mode_double_integral(mc.lra.p1, mc.lra.q1, mc.omega1, tau) +
           mode_double_integral(mc.lra.p2, mc.lra.q2, mc.omega2, tau);
}

double clamp_node_voltage(const ModalCoefficients& mc, double tau) {
    if (mc.inv_c12 == 0.0) return 0.0; // switch node shorted by the main device
    return mc.entry_v_cra + mc.inv_c12 * charge_integrals(mc, tau).q_lra;
}

} // namespace vmclamp
