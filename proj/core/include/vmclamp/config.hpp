#pragma once

#include <stdexcept>
#include <string>

namespace vmclamp {

/// Thrown when a configuration value violates its physical constraints.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a solver fails to converge to the requested tolerance.
class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(std::string msg, double residual)
        : std::runtime_error(std::move(msg)), final_residual(residual) {}
    double final_residual;
};

/// Thrown when the assumed CCM state sequence cannot be realized
/// (missing event, arccos domain violation, negative interval, ...).
class ModeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Physical parameters of one interleaved high step-up converter build.
///
/// All legs are identical and fed from the common source; the voltage
/// multiplier capacitors of each leg share one value, as do the output
/// capacitors.
struct ConverterConfig {
    int m_stages = 3;      ///< multiplier stage count (>= 2)
    int n_legs = 2;        ///< interleaved leg count (>= 1)

    double v_in = 120.0;   ///< input voltage [V]
    double l_a = 50e-6;    ///< input inductor per leg [H]
    double l_ra = 5e-6;    ///< resonant inductor per leg [H]
    double c_ra = 3.3e-9;  ///< resonant/snubber capacitor across the main switch [F]
    double c_c = 200e-9;   ///< clamp capacitor [F]
    double c_a = 330e-9;   ///< multiplier capacitors (all equal) [F]
    double c_out = 100e-6; ///< output capacitors (all equal) [F]
    double c_p = 10e-12;   ///< parasitic capacitance, inductor node to output [F]
    double r_load = 769.2; ///< load resistance [Ohm]
    double f_s = 100e3;    ///< switching frequency [Hz]
    double dead_time = 350e-9; ///< gate dead time [s]
    double diode_drop = 0.0;   ///< constant diode forward drop [V]

    double period() const { return 1.0 / f_s; }

    /// Validates all invariants; throws ConfigError naming the offending field.
    void validate() const;
};

/// Base quantities and dimensionless ratios of the resonant L_ra-C_ra loop.
struct NormalizedParams {
    double omega_r;  ///< 1/sqrt(L_ra*C_ra) [rad/s]
    double z_r;      ///< sqrt(L_ra/C_ra) [Ohm]
    double f_r;      ///< omega_r / 2*pi [Hz]
    double lambda_l; ///< L_ra / L_a
    double lambda_c; ///< 1 / (1 + C_ra/C_c)
    double f_n;      ///< f_s / f_r
    double r_n;      ///< R_L / Z_r
};

/// One operating point: main-switch duty plus the inputs it modulates.
struct OperatingPoint {
    double duty_ma;            ///< main switch duty cycle, in (0,1)
    double v_in;               ///< input voltage [V]
    double r_load;             ///< load resistance [Ohm]
    double phase_shift;        ///< per-leg gate phase shift [rad]

    static OperatingPoint from_config(const ConverterConfig& cfg, double duty);
};

/// Computes the resonant base and all dimensionless ratios.
/// Pure; rejects non-positive parameters via ConverterConfig::validate.
NormalizedParams normalize(const ConverterConfig& cfg);

} // namespace vmclamp
