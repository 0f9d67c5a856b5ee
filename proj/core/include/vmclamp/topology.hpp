#pragma once

#include <utility>

#include "vmclamp/network.hpp"

namespace vmclamp {

/// The eight leg-local operational states, in the order they occur over one
/// switching period starting at main-switch turn-on.
enum class OperationalState : int {
    s1 = 1, ///< main body diode then channel, first odd diode: resonant current ramp-up
    s2 = 2, ///< main on, last even diode: multiplier chain charge transfer
    s3 = 3, ///< main on, second diode: first-stage transfer
    s4 = 4, ///< main on only: linear ramp through both inductors
    s5 = 5, ///< dead time, all devices off: snubber charges to the clamp level
    s6 = 6, ///< clamp body diode then channel, last odd diode: clamp absorption
    s7 = 7, ///< clamp on, third diode: clamp returns energy
    s8 = 8  ///< dead time, first diode: snubber discharges to zero
};

inline constexpr int kStateCount = 8;

/// All eight states in temporal order.
const OperationalState* all_states();

/// Which devices conduct in a state (leg-local).
struct ConductionSet {
    bool main_switch = false; ///< M_a channel gated on
    bool main_body = false;   ///< M_a body diode
    bool clamp_switch = false;
    bool clamp_body = false;
    std::vector<int> diodes;  ///< conducting ladder diodes, 1-based

    std::vector<std::string> names() const;
};

/// Device set of `state` for an m-stage leg.
ConductionSet conduction_set(OperationalState state, int m_stages = 3);

/// Expands a ConductionSet into a full ConductionPattern with the given leg
/// active and all other legs idle.
ConductionPattern pattern_for(OperationalState state, int m_stages, int n_legs = 1,
                              int leg = 0);

/// The 8 x (2m+1) selector matrix that forms the constant capacitor-voltage
/// combination c_i of each state's reduced inductor loop. Columns are ordered
/// (v_cout1..m, v_cra, v_cp, v_ca1..m-1); +1 entries are the pass-through
/// slots, -1 entries negated initial values.
struct GammaMatrix {
    int m;
    Eigen::MatrixXd entries; // 8 x (2m+1), values in {+1, 0, -1}

    Eigen::RowVectorXd row(OperationalState state) const {
        return entries.row(static_cast<int>(state) - 1);
    }
};

GammaMatrix gamma_matrix(int m_stages);

/// Per-state equivalent inverse capacitances (1/C_12, 1/C_22) of the reduced
/// two-inductor loop model.
std::pair<double, double> equivalent_capacitances(OperationalState state,
                                                  const ConverterConfig& cfg);

/// One state's LTI system for a single unloaded leg, with device read-outs
/// for consistency checking.
struct LTISystem {
    OperationalState state;
    NetworkLayout layout;
    ConductionPattern pattern;
    Eigen::MatrixXd A;
    Eigen::VectorXd B; // input column, driven by v_in
    // linear read-outs over the state vector
    Eigen::MatrixXd diode_current;  // (2m-1) rows, zero when blocking
    Eigen::MatrixXd diode_voltage;  // (2m-1) rows, anode-cathode
    Eigen::RowVectorXd main_switch_voltage;
    Eigen::RowVectorXd clamp_switch_voltage;

    /// Device consistency: conducting diodes carry non-negative current,
    /// blocking diodes see non-positive voltage (within tolerances).
    bool consistent(const Eigen::VectorXd& x, double tol_i, double tol_v) const;
};

LTISystem state_matrices(OperationalState state, const ConverterConfig& cfg);

} // namespace vmclamp
