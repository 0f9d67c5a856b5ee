#pragma once

#include <array>

#include "vmclamp/modal.hpp"

namespace vmclamp {

/// Solved sub-interval durations of one switching period.
struct IntervalDurations {
    std::array<double, kStateCount> d{}; ///< seconds, states 1..8 at indices 0..7
    double T_s = 0.0;

    double t_s() const { return d[0]; } ///< first-diode rampdown interval
    double t_r() const { return d[4]; } ///< snubber charge transition
    double t_f() const { return d[7]; } ///< snubber discharge transition
    double sum() const;
};

/// Converged periodic solution of the piecewise closed-form cycle model for
/// a three-stage leg (all legs identical up to phase).
struct SteadyStateSolution {
    ConverterConfig cfg;
    OperatingPoint op;

    StateVector boundary;   ///< state at the cycle origin (main turn-on, v_cra = 0)
    IntervalDurations durations;
    double duty_mca = 0.0;  ///< clamp-switch conduction duty
    double v_cc = 0.0;      ///< clamp capacitor voltage at clamp turn-on
    double v_cc_max = 0.0;  ///< peak clamp voltage (at the resonant current zero)
    double t_x = 0.0;       ///< clamp-current zero crossing, seconds after clamp-on
    double v_out = 0.0;     ///< sum of the output-stack voltages
    double i_out = 0.0;     ///< dc load current

    std::array<StateVector, kStateCount> entries;        ///< per-state entry conditions
    std::array<ModalCoefficients, kStateCount> coeffs;   ///< per-state closed forms
    std::array<double, kStateCount> ladder_charge{};     ///< per-state ladder charge [A s]

    double residual = 0.0;  ///< final scaled residual norm
    int iterations = 0;

    /// Leg-0 state sampled at time t in [0, T_s) past the cycle origin.
    StateVector at(double t) const;
    /// Index (0-based) of the state containing time t and its local offset.
    std::pair<int, double> locate(double t) const;
};

struct SteadyStateOptions {
    double tol = 1e-10;      ///< scaled residual tolerance
    int max_iterations = 80;
    bool full_clamp_average = false; ///< keep the clamp-interval snubber ripple
                                     ///< terms in the reported average check
};

/// Durations of all 8 states for given cycle-origin conditions and clamp
/// level, found by the defining events (current match, multiplier handover,
/// snubber rail crossings, gate edges).
IntervalDurations interval_durations(const ConverterConfig& cfg, const OperatingPoint& op,
                                     const StateVector& entry, double v_cc);

/// Clamp capacitor voltage consistent with the snubber's period average
/// equaling the input voltage, plus the clamp peak found from the resonant
/// current zero crossing. Uses the converged solution's closed forms.
struct ClampVoltageReport {
    double v_cc = 0.0;
    double v_cc_max = 0.0;
    double t_x = 0.0;
    double ideal = 0.0; ///< zero-transition-time limit v_in / (1 - duty)
};
ClampVoltageReport clamp_voltage(const SteadyStateSolution& sol);

/// Finds the periodic cycle: boundary state, durations, and clamp voltage
/// such that both inductor currents, every capacitor charge, and the snubber
/// voltage close over one period.
SteadyStateSolution solve_steady_state(const ConverterConfig& cfg, const OperatingPoint& op,
                                       const SteadyStateOptions& opts = {});

} // namespace vmclamp
