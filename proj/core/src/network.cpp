#include "vmclamp/network.hpp"

#include <cassert>

namespace vmclamp {

std::vector<std::string> NetworkLayout::state_names() const {
    std::vector<std::string> names;
    names.reserve(static_cast<size_t>(dim()));
    for (int l = 0; l < n; ++l) {
        const std::string s = n > 1 ? "_" + std::string(1, char('a' + l)) : "";
        names.push_back("i_la" + s);
        names.push_back("i_lra" + s);
        names.push_back("v_cra" + s);
        names.push_back("v_cc" + s);
        for (int k = 1; k < m; ++k) names.push_back("v_ca" + std::to_string(k) + s);
        names.push_back("v_cp" + s);
    }
    for (int k = 1; k <= m; ++k) names.push_back("v_cout" + std::to_string(k));
    return names;
}

ConductionPattern ConductionPattern::all_off(int n_legs, int m_stages) {
    ConductionPattern p;
    p.main_closed.assign(static_cast<size_t>(n_legs), 0);
    p.main_body.assign(static_cast<size_t>(n_legs), 0);
    p.clamp_closed.assign(static_cast<size_t>(n_legs), 0);
    p.clamp_body.assign(static_cast<size_t>(n_legs), 0);
    p.diode_on.assign(static_cast<size_t>(n_legs),
                      std::vector<uint8_t>(static_cast<size_t>(2 * m_stages - 1), 0));
    return p;
}

uint64_t ConductionPattern::key() const {
    uint64_t k = 0;
    int bit = 0;
    auto push = [&](bool b) {
        assert(bit < 64);
        if (b) k |= (uint64_t{1} << bit);
        ++bit;
    };
    for (size_t l = 0; l < main_closed.size(); ++l) {
        push(main_closed[l]);
        push(clamp_closed[l]);
        for (uint8_t d : diode_on[l]) push(d);
    }
    return k;
}

SwitchedNetwork::SwitchedNetwork(const ConverterConfig& cfg, int n_legs, bool with_load,
                                 double parasitic_damping)
    : cfg_(cfg), with_load_(with_load), r_p_(parasitic_damping) {
    if (r_p_ < 0.0) throw ConfigError("parasitic damping must be non-negative");
    cfg_.validate();
    layout_.m = cfg.m_stages;
    layout_.n = n_legs;
    const int m = layout_.m;

    for (int l = 0; l < n_legs; ++l) {
        caps_.push_back({layout_.node_y(l), -1, cfg.c_ra, layout_.v_cra(l)});
        caps_.push_back({layout_.node_zc(l), -1, cfg.c_c, layout_.v_cc(l)});
        for (int k = 1; k < m; ++k) {
            const int prev = (k == 1) ? layout_.node_x(l) : layout_.node_p(l, k - 1);
            caps_.push_back({layout_.node_p(l, k), prev, cfg.c_a, layout_.v_ca(l, k)});
        }
        caps_.push_back({layout_.node_n(m), layout_.node_x(l), cfg.c_p, layout_.v_cp(l), true});
    }
    for (int k = 1; k <= m; ++k) {
        const int below = (k == 1) ? -1 : layout_.node_n(k - 1);
        caps_.push_back({layout_.node_n(k), below, cfg.c_out, layout_.v_cout(k)});
    }

    // Every node potential is an explicit linear form over the capacitor
    // voltages: the ladder is reached from ground through C_out1..k, X
    // through C_p, and the pump nodes through the C_a chain.
    node_voltage_ = Eigen::MatrixXd::Zero(layout_.node_count(), layout_.dim());
    Eigen::RowVectorXd v_top = Eigen::RowVectorXd::Zero(layout_.dim());
    for (int k = 1; k <= m; ++k) {
        v_top(layout_.v_cout(k)) = 1.0;
        node_voltage_.row(layout_.node_n(k)) = v_top;
    }
    for (int l = 0; l < n_legs; ++l) {
        node_voltage_(layout_.node_y(l), layout_.v_cra(l)) = 1.0;
        node_voltage_(layout_.node_zc(l), layout_.v_cc(l)) = 1.0;
        Eigen::RowVectorXd v_x = v_top;
        v_x(layout_.v_cp(l)) -= 1.0;
        node_voltage_.row(layout_.node_x(l)) = v_x;
        Eigen::RowVectorXd v_p = v_x;
        for (int k = 1; k < m; ++k) {
            v_p(layout_.v_ca(l, k)) += 1.0;
            node_voltage_.row(layout_.node_p(l, k)) = v_p;
        }
    }
}

Eigen::RowVectorXd SwitchedNetwork::node_voltage_row(int node) const {
    if (node < 0) return Eigen::RowVectorXd::Zero(layout_.dim());
    return node_voltage_.row(node);
}

namespace {
struct Branch {
    int a, b; // current positive a -> b; -1 is ground
};
} // namespace

static Branch diode_branch(const NetworkLayout& lay, int leg, int j) {
    const int dj = j + 1; // 1-based diode number
    if (dj % 2 == 1) {
        const int k = (dj + 1) / 2; // D_{2k-1}: P_{k-1} -> N_k
        const int anode = (k == 1) ? lay.node_x(leg) : lay.node_p(leg, k - 1);
        return {anode, lay.node_n(k)};
    }
    const int k = dj / 2; // D_{2k}: N_k -> P_k
    return {lay.node_n(k), lay.node_p(leg, k)};
}

Eigen::RowVectorXd SwitchedNetwork::diode_voltage_row(int leg, int j) const {
    const Branch br = diode_branch(layout_, leg, j);
    return node_voltage_row(br.a) - node_voltage_row(br.b);
}

Eigen::RowVectorXd SwitchedNetwork::main_switch_voltage_row(int leg) const {
    return node_voltage_row(layout_.node_y(leg));
}

Eigen::RowVectorXd SwitchedNetwork::clamp_switch_voltage_row(int leg) const {
    return node_voltage_row(layout_.node_y(leg)) - node_voltage_row(layout_.node_zc(leg));
}

NetworkRealization SwitchedNetwork::realize(const ConductionPattern& p) const {
    const NetworkLayout& lay = layout_;
    const int m = lay.m;
    const int n = lay.n;
    const int nn = lay.node_count();
    const int dim = lay.dim();

    // Collect conducting shorts (switch channel or body diode counts the same).
    struct Short {
        Branch br;
        int kind;  // 0 = main, 1 = clamp, 2 = diode
        int leg, j;
    };
    std::vector<Short> shorts;
    for (int l = 0; l < n; ++l) {
        if (p.main_closed[static_cast<size_t>(l)])
            shorts.push_back({{lay.node_y(l), -1}, 0, l, 0});
        if (p.clamp_closed[static_cast<size_t>(l)])
            shorts.push_back({{lay.node_y(l), lay.node_zc(l)}, 1, l, 0});
        for (int j = 0; j < 2 * m - 1; ++j) {
            if (p.diode_on[static_cast<size_t>(l)][static_cast<size_t>(j)])
                shorts.push_back({diode_branch(lay, l, j), 2, l, j});
        }
    }
    const int nd = static_cast<int>(shorts.size());

    // With parasitic damping the ladder island's potential comes from the
    // first conducting multiplier diode, or, when all of them block, from the
    // resistive branch carrying the inductor current mismatch.
    Eigen::MatrixXd N = node_voltage_;
    std::vector<bool> floating(static_cast<size_t>(n), false);
    if (r_p_ > 0.0) {
        for (int l = 0; l < n; ++l) {
            int aj = -1;
            for (int j = 0; j < 2 * m - 1 && aj < 0; ++j) {
                if (p.diode_on[static_cast<size_t>(l)][static_cast<size_t>(j)]) aj = j;
            }
            Eigen::RowVectorXd vx;
            if (aj >= 0) {
                const int dj = aj + 1;
                const int k = (dj % 2 == 1) ? (dj + 1) / 2 : dj / 2;
                const int chain = (dj % 2 == 1) ? k - 1 : k;
                vx = N.row(lay.node_n(k));
                for (int i = 1; i <= chain; ++i) vx(lay.v_ca(l, i)) -= 1.0;
            } else {
                floating[static_cast<size_t>(l)] = true;
                vx = N.row(lay.node_n(m));
                vx(lay.v_cp(l)) -= 1.0;
                vx(lay.i_lra(l)) -= r_p_;
                vx(lay.i_la(l)) += r_p_;
            }
            N.row(lay.node_x(l)) = vx;
            Eigen::RowVectorXd vp = vx;
            for (int k = 1; k < m; ++k) {
                vp(lay.v_ca(l, k)) += 1.0;
                N.row(lay.node_p(l, k)) = vp;
            }
        }
    }
    auto island_node = [&](int node) {
        for (int l = 0; l < n; ++l) {
            if (!floating[static_cast<size_t>(l)]) continue;
            if (node == lay.node_x(l)) return true;
            for (int k = 1; k < m; ++k)
                if (node == lay.node_p(l, k)) return true;
        }
        return false;
    };

    // Nodal system in derivative form: unknowns are the node-potential
    // derivatives plus one current per conducting short. Floating-island
    // nodes get placeholder rows; their capacitor currents are identically
    // zero and their potentials come from N.
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(nn + nd, nn + nd);
    for (const CapBranch& cb : caps_) {
        if (cb.parasitic && r_p_ > 0.0) continue;
        if ((cb.np >= 0 && island_node(cb.np)) || (cb.nn >= 0 && island_node(cb.nn)))
            continue;
        if (cb.np >= 0) M(cb.np, cb.np) += cb.c;
        if (cb.nn >= 0) M(cb.nn, cb.nn) += cb.c;
        if (cb.np >= 0 && cb.nn >= 0) {
            M(cb.np, cb.nn) -= cb.c;
            M(cb.nn, cb.np) -= cb.c;
        }
    }
    for (int i = 0; i < nn; ++i) {
        if (island_node(i)) M(i, i) = 1.0;
    }
    for (int d = 0; d < nd; ++d) {
        const Branch& br = shorts[static_cast<size_t>(d)].br;
        if (br.a >= 0) {
            M(br.a, nn + d) += 1.0;
            M(nn + d, br.a) += 1.0;
        }
        if (br.b >= 0) {
            M(br.b, nn + d) -= 1.0;
            M(nn + d, br.b) -= 1.0;
        }
    }

    // Right-hand side as a linear map of the state vector: inductor
    // injections, the damped parasitic branch current, and, when modeled,
    // the load current at the output node.
    Eigen::MatrixXd R = Eigen::MatrixXd::Zero(nn + nd, dim);
    std::vector<Eigen::RowVectorXd> chg(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l) {
        const bool fl = floating[static_cast<size_t>(l)];
        if (!fl) {
            R(lay.node_x(l), lay.i_la(l)) += 1.0;
            R(lay.node_x(l), lay.i_lra(l)) -= 1.0;
        }
        R(lay.node_y(l), lay.i_lra(l)) += 1.0;
        if (r_p_ > 0.0) {
            // current flowing from the output node into the branch toward X
            Eigen::RowVectorXd ic =
                (N.row(lay.node_n(m)) - N.row(lay.node_x(l))) / r_p_;
            ic(lay.v_cp(l)) -= 1.0 / r_p_;
            chg[static_cast<size_t>(l)] = ic;
            // for a floating leg ic reduces to i_lra - i_la: the inductor
            // mismatch passes straight through the branch to the output node
            if (!fl) R.row(lay.node_x(l)) += ic;
            R.row(lay.node_n(m)) -= ic;
        }
    }
    if (with_load_) {
        R.row(lay.node_n(m)) -= (1.0 / cfg_.r_load) * node_voltage_.row(lay.node_n(m));
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
    if (!lu.isInvertible()) {
        throw ModeError("singular network realization (conduction pattern key " +
                        std::to_string(p.key()) + ")");
    }
    const Eigen::MatrixXd W = lu.solve(R);

    NetworkRealization out;
    out.A = Eigen::MatrixXd::Zero(dim, dim);
    out.B = Eigen::VectorXd::Zero(dim);
    for (const CapBranch& cb : caps_) {
        if (cb.parasitic && r_p_ > 0.0) {
            const int l = (cb.state_index - lay.v_cp(0)) / lay.leg_block();
            out.A.row(cb.state_index) = chg[static_cast<size_t>(l)] / cb.c;
            continue;
        }
        if ((cb.np >= 0 && island_node(cb.np)) || (cb.nn >= 0 && island_node(cb.nn))) {
            continue; // chain current is identically zero
        }
        Eigen::RowVectorXd dv = Eigen::RowVectorXd::Zero(dim);
        if (cb.np >= 0) dv += W.row(cb.np);
        if (cb.nn >= 0) dv -= W.row(cb.nn);
        out.A.row(cb.state_index) = dv;
    }
    for (int l = 0; l < n; ++l) {
        out.A.row(lay.i_la(l)) = -N.row(lay.node_x(l)) / cfg_.l_a;
        out.B(lay.i_la(l)) = 1.0 / cfg_.l_a;
        out.A.row(lay.i_lra(l)) =
            (N.row(lay.node_x(l)) - N.row(lay.node_y(l))) / cfg_.l_ra;
    }
    out.node_voltage = N;
    out.diode_voltage = Eigen::MatrixXd::Zero(n * (2 * m - 1), dim);
    for (int l = 0; l < n; ++l) {
        for (int j = 0; j < 2 * m - 1; ++j) {
            const Branch br = diode_branch(lay, l, j);
            Eigen::RowVectorXd row = N.row(br.a);
            if (br.b >= 0) row -= N.row(br.b);
            out.diode_voltage.row(l * (2 * m - 1) + j) = row;
        }
    }

    out.switch_current = Eigen::MatrixXd::Zero(2 * n, dim);
    out.diode_current = Eigen::MatrixXd::Zero(n * (2 * m - 1), dim);
    for (int d = 0; d < nd; ++d) {
        const Short& s = shorts[static_cast<size_t>(d)];
        if (s.kind == 0) {
            out.switch_current.row(2 * s.leg + 0) = W.row(nn + d);
        } else if (s.kind == 1) {
            out.switch_current.row(2 * s.leg + 1) = W.row(nn + d);
        } else {
            out.diode_current.row(s.leg * (2 * m - 1) + s.j) = W.row(nn + d);
        }
    }
    return out;
}

} // namespace vmclamp
