#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vmclamp/config.hpp"

namespace vmclamp {

/// Index bookkeeping for the switched-capacitor network of an m-stage,
/// n-leg build.
///
/// State ordering: per-leg blocks
///   (i_La, i_Lra, v_Cra, v_Cc, v_Ca1..v_Ca(m-1), v_Cp)
/// followed by the shared output-capacitor voltages v_Cout1..v_Coutm.
struct NetworkLayout {
    int m = 3;
    int n = 1;

    int leg_block() const { return m + 4; }
    int dim() const { return n * leg_block() + m; }

    int i_la(int leg) const { return leg * leg_block() + 0; }
    int i_lra(int leg) const { return leg * leg_block() + 1; }
    int v_cra(int leg) const { return leg * leg_block() + 2; }
    int v_cc(int leg) const { return leg * leg_block() + 3; }
    int v_ca(int leg, int k) const { return leg * leg_block() + 3 + k; } // k in 1..m-1
    int v_cp(int leg) const { return leg * leg_block() + 3 + m; }
    int v_cout(int k) const { return n * leg_block() + (k - 1); }        // k in 1..m

    // Circuit nodes (ground is implicit, index -1).
    // Per leg: X, Y, Zc, P1..P(m-1); shared: N1..Nm.
    int leg_nodes() const { return m + 2; }
    int node_count() const { return n * leg_nodes() + m; }
    int node_x(int leg) const { return leg * leg_nodes() + 0; }
    int node_y(int leg) const { return leg * leg_nodes() + 1; }
    int node_zc(int leg) const { return leg * leg_nodes() + 2; }
    int node_p(int leg, int k) const { return leg * leg_nodes() + 2 + k; } // k in 1..m-1
    int node_n(int k) const { return n * leg_nodes() + (k - 1); }          // k in 1..m

    std::vector<std::string> state_names() const;
};

/// Which devices conduct. Switches count as closed whether the channel or
/// the body diode carries the current; `*_body` marks body-diode conduction
/// (current direction is then monitored for turn-off).
struct ConductionPattern {
    // one entry per leg
    std::vector<uint8_t> main_closed;
    std::vector<uint8_t> main_body;
    std::vector<uint8_t> clamp_closed;
    std::vector<uint8_t> clamp_body;
    std::vector<std::vector<uint8_t>> diode_on; // [leg][j], j in 0..2m-2 for D_{j+1}

    static ConductionPattern all_off(int n_legs, int m_stages);
    uint64_t key() const;
    bool operator==(const ConductionPattern&) const = default;
};

/// A concrete LTI realization of one conduction pattern:
///   dx/dt = A x + B v_in
/// plus linear read-outs for every device current.
struct NetworkRealization {
    Eigen::MatrixXd A;
    Eigen::VectorXd B;
    // current through the main/clamp short of each leg (row * x), positive
    // flowing node -> ground (main) and Y -> Zc (clamp); zero rows when open
    Eigen::MatrixXd switch_current;  // 2n rows: [main leg0, clamp leg0, main leg1, ...]
    Eigen::MatrixXd diode_current;   // n*(2m-1) rows, anode -> cathode positive
    // node potentials and diode anode-cathode voltages as linear forms over
    // the state; pattern dependent when the parasitic branch is damped
    Eigen::MatrixXd node_voltage;    // node_count rows
    Eigen::MatrixXd diode_voltage;   // n*(2m-1) rows
};

/// Assembles per-pattern state-space systems for the converter network by
/// nodal analysis: capacitors stamped as capacitances, inductors as known
/// current injections, conducting devices as voltage constraints.
class SwitchedNetwork {
public:
    /// `parasitic_damping` adds a series resistance to each leg's parasitic
    /// node capacitance. Zero keeps the ideal network; a nonzero value damps
    /// the otherwise lossless parasitic ringing, which the time-domain
    /// simulator needs for well-separated conduction events.
    SwitchedNetwork(const ConverterConfig& cfg, int n_legs, bool with_load,
                    double parasitic_damping = 0.0);

    const NetworkLayout& layout() const { return layout_; }
    const ConverterConfig& config() const { return cfg_; }

    NetworkRealization realize(const ConductionPattern& p) const;

    /// Node potential as a linear form over the state vector (ground = 0).
    Eigen::RowVectorXd node_voltage_row(int node) const;

    /// Anode-cathode voltage of diode j (0-based, leg-local) as a linear form.
    Eigen::RowVectorXd diode_voltage_row(int leg, int j) const;
    /// Drain-source voltage rows for the switches.
    Eigen::RowVectorXd main_switch_voltage_row(int leg) const;  // V(Y)
    Eigen::RowVectorXd clamp_switch_voltage_row(int leg) const; // V(Y) - V(Zc)

    int diode_count_per_leg() const { return 2 * layout_.m - 1; }

private:
    ConverterConfig cfg_;
    NetworkLayout layout_;
    bool with_load_;

    struct CapBranch {
        int np, nn;     // v = V(np) - V(nn), nn == -1 means ground
        double c;
        int state_index;
        bool parasitic = false;
    };
    std::vector<CapBranch> caps_;
    Eigen::MatrixXd node_voltage_; // node_count x dim
    double r_p_ = 0.0;
};

} // namespace vmclamp
