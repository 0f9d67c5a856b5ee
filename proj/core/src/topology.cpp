#include "vmclamp/topology.hpp"

namespace vmclamp {

const OperationalState* all_states() {
    static const OperationalState seq[kStateCount] = {
        OperationalState::s1, OperationalState::s2, OperationalState::s3,
        OperationalState::s4, OperationalState::s5, OperationalState::s6,
        OperationalState::s7, OperationalState::s8};
    return seq;
}

std::vector<std::string> ConductionSet::names() const {
    std::vector<std::string> out;
    if (main_body) out.push_back("D_Ma");
    if (main_switch) out.push_back("M_a");
    if (clamp_body) out.push_back("D_Mca");
    if (clamp_switch) out.push_back("M_ca");
    for (int d : diodes) out.push_back("D_a" + std::to_string(d));
    return out;
}

ConductionSet conduction_set(OperationalState state, int m_stages) {
    if (m_stages < 2) throw ConfigError("m_stages must be >= 2");
    const int m = m_stages;
    ConductionSet cs;
    switch (state) {
    case OperationalState::s1:
        cs.main_switch = cs.main_body = true;
        cs.diodes = {1};
        break;
    case OperationalState::s2:
        cs.main_switch = true;
        cs.diodes = {2 * (m - 1)};
        break;
    case OperationalState::s3:
        cs.main_switch = true;
        cs.diodes = {2};
        break;
    case OperationalState::s4:
        cs.main_switch = true;
        break;
    case OperationalState::s5:
        break;
    case OperationalState::s6:
        cs.clamp_switch = cs.clamp_body = true;
        cs.diodes = {2 * m - 1};
        break;
    case OperationalState::s7:
        cs.clamp_switch = true;
        cs.diodes = {3};
        break;
    case OperationalState::s8:
        cs.diodes = {1};
        break;
    }
    return cs;
}

ConductionPattern pattern_for(OperationalState state, int m_stages, int n_legs, int leg) {
    const ConductionSet cs = conduction_set(state, m_stages);
    ConductionPattern p = ConductionPattern::all_off(n_legs, m_stages);
    const auto l = static_cast<size_t>(leg);
    p.main_closed[l] = cs.main_switch || cs.main_body;
    p.main_body[l] = cs.main_body;
    p.clamp_closed[l] = cs.clamp_switch || cs.clamp_body;
    p.clamp_body[l] = cs.clamp_body;
    for (int d : cs.diodes) p.diode_on[l][static_cast<size_t>(d - 1)] = 1;
    return p;
}

GammaMatrix gamma_matrix(int m_stages) {
    if (m_stages < 2) throw ConfigError("m_stages must be >= 2");
    const int m = m_stages;
    GammaMatrix g;
    g.m = m;
    g.entries = Eigen::MatrixXd::Zero(kStateCount, 2 * m + 1);
    const int col_cra = m;
    const int col_cp = m + 1;
    auto col_ca = [m](int k) { return m + 1 + k; }; // k in 1..m-1
    auto& e = g.entries;

    e(0, 0) = 1.0;

    for (int k = 1; k <= m - 1; ++k) e(1, k - 1) = 1.0;
    for (int k = 1; k <= m - 1; ++k) e(1, col_ca(k)) = -1.0;

    e(2, 0) = 1.0;
    e(2, col_ca(1)) = -1.0;

    for (int k = 1; k <= m; ++k) e(3, k - 1) = 1.0;
    e(3, col_cp) = -1.0;

    e.row(4) = e.row(3);
    e(4, col_cra) = -1.0;

    for (int k = 1; k <= m; ++k) e(5, k - 1) = 1.0;
    e(5, col_cra) = -1.0;
    for (int k = 1; k <= m - 1; ++k) e(5, col_ca(k)) = -1.0;

    e(6, 0) = 1.0;
    e(6, 1) = 1.0;
    e(6, col_cra) = -1.0;
    e(6, col_ca(1)) = -1.0;

    e(7, 0) = 1.0;
    e(7, col_cra) = -1.0;

    return g;
}

std::pair<double, double> equivalent_capacitances(OperationalState state,
                                                  const ConverterConfig& cfg) {
    cfg.validate();
    const int m = cfg.m_stages;
    const double inv_clamp = 1.0 / (cfg.c_ra + cfg.c_c); // lambda_c / c_c
    switch (state) {
    case OperationalState::s1: return {0.0, 0.0};
    case OperationalState::s2: return {0.0, (m - 1) / cfg.c_a};
    case OperationalState::s3: return {0.0, 1.0 / cfg.c_a};
    case OperationalState::s4: return {0.0, 1.0 / cfg.c_p};
    case OperationalState::s5: return {1.0 / cfg.c_ra, 1.0 / cfg.c_ra + 1.0 / cfg.c_p};
    case OperationalState::s6: return {inv_clamp, inv_clamp + (m - 1) / cfg.c_a};
    case OperationalState::s7: return {inv_clamp, inv_clamp + 1.0 / cfg.c_a};
    case OperationalState::s8: return {1.0 / cfg.c_ra, 1.0 / cfg.c_ra};
    }
    throw ConfigError("invalid operational state");
}

bool LTISystem::consistent(const Eigen::VectorXd& x, double tol_i, double tol_v) const {
    const int nd = static_cast<int>(diode_current.rows());
    for (int j = 0; j < nd; ++j) {
        if (pattern.diode_on[0][static_cast<size_t>(j)]) {
            if (diode_current.row(j).dot(x) < -tol_i) return false;
        } else {
            if (diode_voltage.row(j).dot(x) > tol_v) return false;
        }
    }
    if (!pattern.main_closed[0] && main_switch_voltage.dot(x) < -tol_v) return false;
    if (!pattern.clamp_closed[0] && clamp_switch_voltage.dot(x) < -tol_v) return false;
    return true;
}

LTISystem state_matrices(OperationalState state, const ConverterConfig& cfg) {
    SwitchedNetwork net(cfg, 1, /*with_load=*/false);
    LTISystem sys;
    sys.state = state;
    sys.layout = net.layout();
    sys.pattern = pattern_for(state, cfg.m_stages, 1, 0);
    NetworkRealization r = net.realize(sys.pattern);
    sys.A = std::move(r.A);
    sys.B = std::move(r.B);
    sys.diode_current = std::move(r.diode_current);
    const int nd = net.diode_count_per_leg();
    sys.diode_voltage = Eigen::MatrixXd::Zero(nd, sys.layout.dim());
    for (int j = 0; j < nd; ++j) sys.diode_voltage.row(j) = net.diode_voltage_row(0, j);
    sys.main_switch_voltage = net.main_switch_voltage_row(0);
    sys.clamp_switch_voltage = net.clamp_switch_voltage_row(0);
    return sys;
}

} // namespace vmclamp
