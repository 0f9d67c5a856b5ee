#pragma once

#include <optional>
#include <unordered_map>

#include "vmclamp/state_vector.hpp"
#include "vmclamp/topology.hpp"

namespace vmclamp {

enum class EventKind {
    gate_on,
    gate_off,
    diode_on,       ///< blocking diode's forward voltage crossed zero
    diode_off,      ///< conducting diode's current crossed zero
    body_on,        ///< switch body diode forward-biased (snubber hit a rail)
    body_off,       ///< body diode current returned to zero with gate off
    snubber_zero,   ///< v_Cra reached 0
    snubber_clamp,  ///< v_Cra reached the clamp level
    current_match,  ///< i_Lra = i_La crossing
    horizon         ///< no condition fired within the window
};

struct Event {
    EventKind kind = EventKind::horizon;
    int leg = 0;
    int device = -1; ///< ladder diode 1..2m-1, 0 = main, -1 = clamp/none
    double time = 0.0;
};

/// Exact LTI propagation x(dt) = e^{A dt} x0 + integral term, evaluated via
/// the augmented-matrix exponential so singular A needs no special casing.
Eigen::VectorXd integrate_lti(const Eigen::MatrixXd& A, const Eigen::VectorXd& B,
                              double v_in, const Eigen::VectorXd& x0, double dt);

Eigen::VectorXd integrate_segment(const LTISystem& system, const Eigen::VectorXd& x0,
                                  double v_in, double dt);
StateVector integrate_segment(const LTISystem& system, const StateVector& x0,
                              double v_in, double dt);

struct EventResult {
    Event event;
    Eigen::VectorXd x; ///< state at the event instant
};

/// Locates the earliest requested condition crossing on the exact segment
/// solution; bisected to 1e-13 s. Returns kind horizon when none fires.
EventResult detect_event(const LTISystem& system, const Eigen::VectorXd& x0,
                         double v_in, double horizon,
                         const std::vector<EventKind>& conditions);

struct LegMetrics {
    double v_la_avg = 0.0;   ///< average input-inductor voltage
    double v_lra_avg = 0.0;
    double v_cra_avg = 0.0;
    double i_la_avg = 0.0;
    bool zvs_main = false;   ///< snubber fully discharged before the main gate edge
    bool zvs_clamp = false;  ///< snubber reached the clamp level before the clamp edge
    double main_turn_on_voltage = 0.0; ///< residual v_Cra at the main gate edge
    double clamp_turn_on_voltage = 0.0;
};

struct OracleSolution {
    ConverterConfig cfg;
    OperatingPoint op;
    NetworkLayout layout;

    Eigen::VectorXd x0;       ///< periodic boundary state at t_start
    double t_start = 0.0;     ///< window origin, mid leg-0 main on-interval
    double gate_duty = 0.0;   ///< calibrated gate duty realizing op.duty_ma conduction
    double residual = 0.0;    ///< ||x(T_s) - x(0)|| / ||x(0)||

    std::vector<double> sample_t;
    Eigen::MatrixXd samples;  ///< dim x N trajectory

    std::vector<Event> events;
    std::vector<int> state_sequence;       ///< classified leg-0 states in order
    std::vector<double> state_durations;   ///< leg-0, seconds, aligned with sequence

    Eigen::VectorXd cap_current_avg;       ///< indexed like the state vector
    Eigen::VectorXd ripple;                ///< max - min per state entry
    Eigen::MatrixXd diode_current_avg;     ///< n x (2m-1)
    std::vector<LegMetrics> legs;

    double v_out_avg = 0.0;
    double i_out_avg = 0.0;
    double p_in = 0.0;
    double p_out = 0.0;
};

struct OracleOptions {
    double tol = 1e-9;             ///< periodicity tolerance, relative
    int max_iterations = 60;       ///< Newton iterations on the period map
    int samples_per_period = 8192;
    bool strict_sequence = true;   ///< reject state orders other than the CCM cycle
    std::optional<Eigen::VectorXd> initial_state;
};

/// Device-resolved piecewise-LTI simulation of the full n-leg network with
/// shooting to the periodic orbit, measuring every reported metric.
OracleSolution run_periodic_steady_state(const ConverterConfig& cfg,
                                         const OperatingPoint& op,
                                         const OracleOptions& opts = {});

} // namespace vmclamp
