#pragma once

#include "vmclamp/state_vector.hpp"
#include "vmclamp/topology.hpp"

namespace vmclamp {

/// Closed-form description of both inductor currents during one operational
/// state, obtained by solving the reduced two-loop system exactly.
///
/// Each current is the sum of two modes at the loop's natural frequencies:
///
///   i(tau) = mode1(tau) + mode2(tau)
///   mode(tau) = p cos(omega tau) + (q / omega) sin(omega tau)   (omega > 0)
///   mode(tau) = p + q tau                                       (omega = 0)
///
/// The (p, q) pairs are the partial-fraction residues of the exact Laplace
/// solution, so the representation stays well defined when a mode frequency
/// collapses to zero (linear-ramp states) or when an entry current vanishes.
/// The conventional amplitude/phase parameters (k, theta) are exposed as
/// derived views for reporting and for the interval-duration formulas.
struct ModalCoefficients {
    OperationalState state;

    // natural frequencies of the reduced loop, omega1 >= omega2 >= 0 [rad/s]
    double omega1 = 0.0;
    double omega2 = 0.0;
    double big_omega2 = 0.0; ///< Omega^2, half the sum of squared frequencies
    double zeta4 = 0.0;      ///< product of squared frequencies

    /// One current's two-mode decomposition.
    struct TwoMode {
        double p1 = 0.0, q1 = 0.0; ///< fast mode (omega1)
        double p2 = 0.0, q2 = 0.0; ///< slow mode (omega2), ramp when omega2 = 0
    };
    TwoMode la;  ///< input-inductor current i_La
    TwoMode lra; ///< resonant-inductor current i_Lra

    // reduced-loop equivalent inverse capacitances and source terms
    double inv_c12 = 0.0; ///< 1/C_12: resonant-inductor return-path capacitance
    double inv_c22 = 0.0; ///< 1/C_22: capacitance seen by the resonant inductor
    double c_ds = 0.0;    ///< capacitance carrying i_Lra at the switch node (0 when shorted)
    double src_p = 0.0;   ///< loop-1 constant drive: v_in - v_cra(t_i) [V]
    double src_q = 0.0;   ///< loop-1 initial flux: L_a i_La(t_i) + L_ra i_Lra(t_i) [V s]
    double src_c = 0.0;   ///< loop-2 constant drive from the ladder path [V]
    double src_d = 0.0;   ///< loop-2 initial flux: L_ra i_Lra(t_i) [V s]

    double entry_i_la = 0.0;
    double entry_i_lra = 0.0;
    double entry_v_cra = 0.0;

    /// True when both modes of both currents are pure ramps (zero-frequency),
    /// i.e. the state reduces to linear inductor charging.
    bool linear = false;

    // -- derived amplitude/phase views ------------------------------------
    double lambda_omega() const { return omega1 > 0.0 ? omega2 / omega1 : 0.0; }
    /// k = p of the mode; theta = atan2(p, q/omega) in (-pi, pi].
    double k1() const { return la.p1; }
    double k2() const { return la.p2; }
    double k3() const { return lra.p1; }
    double k4() const { return lra.p2; }
    double theta1() const { return phase(la.p1, la.q1, omega1); }
    double theta2() const { return phase(la.p2, la.q2, omega2); }
    double theta3() const { return phase(lra.p1, lra.q1, omega1); }
    double theta4() const { return phase(lra.p2, lra.q2, omega2); }

    static double phase(double p, double q, double omega);
};

/// Builds the exact modal decomposition of one state from its entry
/// conditions. Output-stack and clamp voltages are taken from `entry` and
/// held constant over the state (they drift negligibly within a segment).
ModalCoefficients state_coefficients(OperationalState state,
                                     const ConverterConfig& cfg,
                                     const StateVector& entry);

/// Both inductor currents at local time tau since state entry.
std::pair<double, double> inductor_currents(const ModalCoefficients& mc, double tau);

/// Running integrals from 0 to tau of i_La, i_Lra, and their difference
/// i_La - i_Lra (the ladder injection current) [A s].
struct ChargeIntegrals {
    double q_la = 0.0;
    double q_lra = 0.0;
    double q_delta() const { return q_la - q_lra; }
};
ChargeIntegrals charge_integrals(const ModalCoefficients& mc, double tau);

/// Time integral from 0 to tau of the resonant inductor's running charge
/// integral [A s^2]; the snubber voltage-time area over a segment is
/// entry_v_cra * tau + this / C_DS.
double resonant_charge_area(const ModalCoefficients& mc, double tau);

/// Snubber (main-switch drain-source) voltage at local time tau: zero while
/// the main device conducts, otherwise the entry value plus the resonant
/// capacitor's charge integral.
double clamp_node_voltage(const ModalCoefficients& mc, double tau);

/// Potential of the inductors' common node as pinned by the conducting
/// ladder path of `state`; used to keep the parasitic node voltage
/// consistent across state boundaries. Returns false when the node floats
/// (no ladder diode conducting).
bool pinned_common_node_voltage(OperationalState state, const StateVector& entry,
                                double* v_x);

} // namespace vmclamp
