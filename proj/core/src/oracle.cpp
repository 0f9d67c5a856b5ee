#include "vmclamp/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <cstdio>
#include <cstdlib>

#include <unsupported/Eigen/MatrixFunctions>

namespace vmclamp {

namespace {

// exp of the (d+1)-augmented system; maps (x,1) across dt
Eigen::MatrixXd phi_small(const Eigen::MatrixXd& A, const Eigen::VectorXd& Bv, double dt) {
    const int d = static_cast<int>(A.rows());
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(d + 1, d + 1);
    M.topLeftCorner(d, d) = A * dt;
    M.topRightCorner(d, 1) = Bv * dt;
    return M.exp();
}

// exp of the (2d+1)-augmented system; additionally yields the running
// integral of x across the step
Eigen::MatrixXd phi_big(const Eigen::MatrixXd& A, const Eigen::VectorXd& Bv, double dt) {
    const int d = static_cast<int>(A.rows());
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(2 * d + 1, 2 * d + 1);
    M.topLeftCorner(d, d) = A * dt;
    M.block(0, d, d, 1) = Bv * dt;
    M.block(d + 1, 0, d, d) = Eigen::MatrixXd::Identity(d, d) * dt;
    return M.exp();
}

Eigen::VectorXd propagate(const Eigen::MatrixXd& A, const Eigen::VectorXd& Bv,
                          const Eigen::VectorXd& x0, double dt) {
    const int d = static_cast<int>(x0.size());
    const Eigen::MatrixXd E = phi_small(A, Bv, dt);
    return E.topLeftCorner(d, d) * x0 + E.topRightCorner(d, 1);
}

// Bisection plus Newton polish of row.(x(t)) + level = 0 on an exact segment.
double locate_root(const Eigen::MatrixXd& A, const Eigen::VectorXd& Bv,
                   const Eigen::VectorXd& x0, const Eigen::RowVectorXd& row,
                   double lo, double hi, double g_lo) {
    auto g = [&](double t) { return row.dot(propagate(A, Bv, x0, t)); };
    double a = lo, b = hi, ga = g_lo;
    for (int it = 0; it < 40 && (b - a) > 1e-16; ++it) {
        const double mid = 0.5 * (a + b);
        const double gm = g(mid);
        if ((ga <= 0.0) == (gm <= 0.0)) {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
    }
    double t = 0.5 * (a + b);
    for (int it = 0; it < 3; ++it) {
        const Eigen::VectorXd xt = propagate(A, Bv, x0, t);
        const double gt = row.dot(xt);
        const double dgt = row.dot(A * xt + Bv);
        if (dgt == 0.0) break;
        const double tn = t - gt / dgt;
        if (tn <= lo || tn >= hi) break;
        t = tn;
    }
    return t;
}

} // namespace

Eigen::VectorXd integrate_lti(const Eigen::MatrixXd& A, const Eigen::VectorXd& B,
                              double v_in, const Eigen::VectorXd& x0, double dt) {
    if (dt < 0.0) throw ConfigError("integration interval must be non-negative");
    if (dt == 0.0) return x0;
    Eigen::VectorXd x = propagate(A, B * v_in, x0, dt);
    if (!x.allFinite()) throw ModeError("non-finite state after segment integration");
    return x;
}

Eigen::VectorXd integrate_segment(const LTISystem& system, const Eigen::VectorXd& x0,
                                  double v_in, double dt) {
    return integrate_lti(system.A, system.B, v_in, x0, dt);
}

StateVector integrate_segment(const LTISystem& system, const StateVector& x0,
                              double v_in, double dt) {
    const Eigen::VectorXd x = integrate_segment(system, x0.to_eigen(system.layout), v_in, dt);
    return StateVector::from_eigen(system.layout, x);
}

EventResult detect_event(const LTISystem& system, const Eigen::VectorXd& x0,
                         double v_in, double horizon,
                         const std::vector<EventKind>& conditions) {
    if (!(horizon > 0.0)) throw ConfigError("event horizon must be positive");
    const NetworkLayout& lay = system.layout;
    const Eigen::VectorXd Bv = system.B * v_in;
    const int dim = lay.dim();

    struct Mon {
        Eigen::RowVectorXd row;
        int dir; // +1 fire on upward zero crossing, -1 downward, 0 either
        EventKind kind;
        int device;
    };
    std::vector<Mon> mons;
    auto wants = [&](EventKind k) {
        return std::find(conditions.begin(), conditions.end(), k) != conditions.end();
    };
    const int nd = static_cast<int>(system.diode_current.rows());
    for (int j = 0; j < nd; ++j) {
        const bool on = system.pattern.diode_on[0][static_cast<size_t>(j)] != 0;
        if (on && wants(EventKind::diode_off)) {
            mons.push_back({system.diode_current.row(j), -1, EventKind::diode_off, j + 1});
        } else if (!on && wants(EventKind::diode_on)) {
            mons.push_back({system.diode_voltage.row(j), +1, EventKind::diode_on, j + 1});
        }
    }
    if (wants(EventKind::snubber_zero)) {
        Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(dim);
        r(lay.v_cra(0)) = 1.0;
        mons.push_back({r, -1, EventKind::snubber_zero, 0});
    }
    if (wants(EventKind::snubber_clamp)) {
        Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(dim);
        r(lay.v_cra(0)) = 1.0;
        r(lay.v_cc(0)) = -1.0;
        mons.push_back({r, +1, EventKind::snubber_clamp, 0});
    }
    if (wants(EventKind::current_match)) {
        Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(dim);
        r(lay.i_lra(0)) = 1.0;
        r(lay.i_la(0)) = -1.0;
        mons.push_back({r, 0, EventKind::current_match, 0});
    }
    if (mons.empty()) throw ConfigError("no event conditions requested");

    const int nm = static_cast<int>(mons.size());
    Eigen::VectorXd prev(nm);
    for (int i = 0; i < nm; ++i) prev(i) = mons[static_cast<size_t>(i)].row.dot(x0);

    // step fine enough for the resonant loop; fast parasitic modes carry
    // negligible amplitude when entry conditions are consistent
    const double h = std::min(horizon / 64.0, 6e-9);
    double t = 0.0;
    Eigen::VectorXd x = x0;
    const Eigen::MatrixXd Estep = phi_small(system.A, Bv, h);

    while (t < horizon) {
        const double dt = std::min(h, horizon - t);
        Eigen::VectorXd xn;
        if (dt == h) {
            xn = Estep.topLeftCorner(dim, dim) * x + Estep.topRightCorner(dim, 1);
        } else {
            xn = propagate(system.A, Bv, x, dt);
        }
        double best_t = std::numeric_limits<double>::infinity();
        int best = -1;
        for (int i = 0; i < nm; ++i) {
            const Mon& mo = mons[static_cast<size_t>(i)];
            const double cur = mo.row.dot(xn);
            const bool up = prev(i) < 0.0 && cur > 0.0;
            const bool dn = prev(i) > 0.0 && cur < 0.0;
            const bool fire = (mo.dir > 0 && up) || (mo.dir < 0 && dn) || (mo.dir == 0 && (up || dn));
            if (fire) {
                const double tau = locate_root(system.A, Bv, x, mo.row, 0.0, dt, prev(i));
                if (tau < best_t) {
                    best_t = tau;
                    best = i;
                }
            }
            prev(i) = cur;
        }
        if (best >= 0) {
            EventResult res;
            res.event.kind = mons[static_cast<size_t>(best)].kind;
            res.event.device = mons[static_cast<size_t>(best)].device;
            res.event.time = t + best_t;
            res.x = propagate(system.A, Bv, x, best_t);
            return res;
        }
        x = xn;
        t += dt;
    }
    EventResult res;
    res.event.kind = EventKind::horizon;
    res.event.time = horizon;
    res.x = x;
    return res;
}

// ---------------------------------------------------------------------------
// full-network periodic simulation

namespace {

uint64_t ext_key(const ConductionPattern& p) {
    uint64_t k = 1469598103934665603ull;
    auto mix = [&](uint64_t b) { k = (k ^ b) * 1099511628211ull; };
    for (size_t l = 0; l < p.main_closed.size(); ++l) {
        mix(p.main_closed[l]);
        mix(p.main_body[l] + 2u);
        mix(p.clamp_closed[l] + 4u);
        mix(p.clamp_body[l] + 6u);
        for (uint8_t d : p.diode_on[l]) mix(d + 8u);
    }
    return k;
}

struct MonitorDesc {
    int dir;
    EventKind kind;
    int leg;
    int device; // 0 main, -1 clamp, 1..2m-1 ladder diode
};

struct GateEdge {
    double t;
    int leg;
    int type; // 0 main on, 1 main off, 2 clamp on, 3 clamp off
};

class PeriodSimulator {
public:
    // Series damping for the parasitic node capacitance, half critical for
    // the loop it forms with the two inductors in parallel. The ideal network
    // rings this loop losslessly, which lets blocking multiplier diodes graze
    // zero bias forever; a lightly damped branch decays the ring in a few
    // cycles while dissipating far below the power-balance resolution.
    static double parasitic_damping(const ConverterConfig& cfg) {
        const double l_eff = cfg.l_a * cfg.l_ra / (cfg.l_a + cfg.l_ra);
        return std::sqrt(l_eff / cfg.c_p);
    }

    PeriodSimulator(const ConverterConfig& cfg, const OperatingPoint& op,
                    const OracleOptions& opts)
        : cfg_(cfg), op_(op), opts_(opts),
          net_(cfg, cfg.n_legs, true, parasitic_damping(cfg)),
          lay_(net_.layout()) {
        n_ = lay_.n;
        m_ = lay_.m;
        dim_ = lay_.dim();
        Ts_ = cfg.period();
        dT_ = cfg.dead_time;
        if (2.0 * dT_ >= (1.0 - op.duty_ma) * Ts_) {
            throw ConfigError("dead time leaves no room for the clamp interval");
        }
        phase_.resize(static_cast<size_t>(n_));
        for (int l = 0; l < n_; ++l) {
            phase_[static_cast<size_t>(l)] = l * (op.phase_shift / (2.0 * std::numbers::pi)) * Ts_;
        }
        // Turn-on decisions use the ideal capacitive potential map: the
        // damped branch adds an IR term to the network's node potentials that
        // must not masquerade as diode bias.
        dv_rows_ = Eigen::MatrixXd::Zero(n_ * (2 * m_ - 1), dim_);
        for (int l = 0; l < n_; ++l) {
            for (int j = 0; j < 2 * m_ - 1; ++j) {
                dv_rows_.row(l * (2 * m_ - 1) + j) = net_.diode_voltage_row(l, j);
            }
        }
        vout_row_ = net_.node_voltage_row(lay_.node_n(m_));
        set_gate_duty(op.duty_ma);
        set_step(Ts_ / 2048.0);
    }

    const NetworkLayout& layout() const { return lay_; }
    double t_start() const { return t0_; }
    double gate_duty() const { return gate_duty_; }
    double leg_phase(int l) const { return phase_[static_cast<size_t>(l)]; }

    void set_gate_duty(double dg) {
        gate_duty_ = dg;
        t0_ = 0.5 * dg * Ts_;
        build_gate_schedule();
    }

    void set_step(double h) {
        h_ = h;
        cache_.clear();
    }

    Eigen::VectorXd initial_guess() const {
        const double vcc = op_.v_in / (1.0 - op_.duty_ma);
        const double vout = m_ * vcc;
        const double i_avg = vout * vout / (cfg_.r_load * n_ * op_.v_in);
        Eigen::VectorXd x = Eigen::VectorXd::Zero(dim_);
        for (int k = 1; k <= m_; ++k) x(lay_.v_cout(k)) = vcc;
        for (int l = 0; l < n_; ++l) {
            x(lay_.v_cc(l)) = vcc;
            for (int k = 1; k < m_; ++k) x(lay_.v_ca(l, k)) = vcc;
            x(lay_.v_cp(l)) = (m_ - 1) * vcc;
            const bool on = gate_main(l, t0_);
            x(lay_.v_cra(l)) = on ? 0.0 : vcc;
            x(lay_.i_la(l)) = i_avg;
            x(lay_.i_lra(l)) = on ? i_avg : -0.5 * i_avg;
        }
        return x;
    }

    struct RunResult {
        Eigen::VectorXd xT;
        // exact sensitivity of xT to the initial state: per-segment matrix
        // exponentials chained with saltation corrections at switching events
        Eigen::MatrixXd M;
        // time the main body diode of each leg starts conducting
        std::array<double, 8> t1{};
        RunResult() { t1.fill(std::numeric_limits<double>::quiet_NaN()); }
    };

    /// Integrates from the reference phase over `duration` (full period when
    /// negative).
    RunResult simulate(const Eigen::VectorXd& x_in, bool record,
                       double duration = -1.0, bool with_jacobian = false);

    // filled during record passes
    std::vector<Event> events;
    std::vector<int> state_sequence;
    std::vector<double> state_durations;
    std::vector<double> sample_t;
    Eigen::MatrixXd samples;
    Eigen::VectorXd int_x;               // integral of x over the period
    Eigen::VectorXd int_vx;              // integral of V(X) per leg
    Eigen::VectorXd x_min, x_max;
    Eigen::MatrixXd diode_int;           // n x (2m-1)
    Eigen::MatrixXd switch_int;          // n x 2
    double p_out_int = 0.0;
    std::vector<LegMetrics> leg_metrics;

private:
    struct Cache {
        NetworkRealization real;
        Eigen::MatrixXd E;
        Eigen::VectorXd f;
        bool has_big = false;
        Eigen::MatrixXd P;
        Eigen::VectorXd q;
        Eigen::MatrixXd mon_rows;
        std::vector<MonitorDesc> mons;
    };

    ConverterConfig cfg_;
    OperatingPoint op_;
    OracleOptions opts_;
    SwitchedNetwork net_;
    NetworkLayout lay_;
    int n_, m_, dim_;
    double Ts_, dT_, h_, t0_, gate_duty_;
    std::vector<double> phase_;
    std::vector<GateEdge> gates_;
    Eigen::MatrixXd dv_rows_;
    Eigen::RowVectorXd vout_row_;

    // state-jump map accumulated across the pattern/jump resolution of one
    // event; identity except where a snubber voltage is pinned or merged
    Eigen::MatrixXd jmp_;
    bool jmp_active_ = false;
    void jump_pin_zero(int i) {
        if (jmp_active_) jmp_.row(i).setZero();
    }
    void jump_copy(int dst, int src) {
        if (jmp_active_) jmp_.row(dst) = jmp_.row(src);
    }
    void jump_mix(int i1, int i2, double w1, double w2) {
        if (!jmp_active_) return;
        const Eigen::RowVectorXd r = w1 * jmp_.row(i1) + w2 * jmp_.row(i2);
        jmp_.row(i1) = r;
        jmp_.row(i2) = r;
    }

    // Blocking-diode voltage as seen by the switching logic. When another
    // diode of the leg conducts, the leg's ladder node is pinned and the
    // pattern realization gives the exact voltage. Only when the leg floats
    // does the voltage depend on the parasitic node charge, where the static
    // (capacitive) map avoids the damping resistor's IR term.
    bool leg_anchored(const ConductionPattern& p, int l) const {
        for (int j = 0; j < 2 * m_ - 1; ++j) {
            if (p.diode_on[static_cast<size_t>(l)][static_cast<size_t>(j)]) return true;
        }
        return false;
    }
    Eigen::RowVectorXd blocking_row(const Cache& c, const ConductionPattern& p,
                                    int l, int j) const {
        const int idx = l * (2 * m_ - 1) + j;
        return leg_anchored(p, l) ? Eigen::RowVectorXd(c.real.diode_voltage.row(idx))
                                  : Eigen::RowVectorXd(dv_rows_.row(idx));
    }
    std::unordered_map<uint64_t, Cache> cache_;

    static constexpr double kTolI = 1e-5;  // amps
    static constexpr double kTolV = 1e-4;  // volts
    // look-ahead horizon for complementarity decisions: a device signal is
    // judged by s + tau*ds/dt so modes that exit immediately are rejected
    static constexpr double kTauLcp = 1e-9; // seconds

    double wrap(double t) const {
        double w = std::fmod(t - t0_, Ts_);
        if (w <= 1e-18 * Ts_) w += Ts_;
        return t0_ + w;
    }

    bool gate_main(int leg, double t) const {
        double w = std::fmod(t - phase_[static_cast<size_t>(leg)], Ts_);
        if (w < 0.0) w += Ts_;
        return w < gate_duty_ * Ts_;
    }

    bool gate_clamp(int leg, double t) const {
        double w = std::fmod(t - phase_[static_cast<size_t>(leg)], Ts_);
        if (w < 0.0) w += Ts_;
        return w > gate_duty_ * Ts_ + dT_ && w < Ts_ - dT_;
    }

    void build_gate_schedule() {
        gates_.clear();
        for (int l = 0; l < n_; ++l) {
            const double ph = phase_[static_cast<size_t>(l)];
            gates_.push_back({wrap(ph), l, 0});
            gates_.push_back({wrap(ph + gate_duty_ * Ts_), l, 1});
            gates_.push_back({wrap(ph + gate_duty_ * Ts_ + dT_), l, 2});
            gates_.push_back({wrap(ph + Ts_ - dT_), l, 3});
        }
        std::sort(gates_.begin(), gates_.end(),
                  [](const GateEdge& a, const GateEdge& b) { return a.t < b.t; });
    }

    Cache& cached(const ConductionPattern& p) {
        const uint64_t key = ext_key(p);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        Cache c;
        c.real = net_.realize(p);
        const Eigen::MatrixXd E = phi_small(c.real.A, c.real.B * op_.v_in, h_);
        c.E = E.topLeftCorner(dim_, dim_);
        c.f = E.topRightCorner(dim_, 1);
        build_monitors(p, c);
        return cache_.emplace(key, std::move(c)).first->second;
    }

    void ensure_big(Cache& c) {
        if (c.has_big) return;
        const Eigen::MatrixXd E = phi_big(c.real.A, c.real.B * op_.v_in, h_);
        c.P = E.block(dim_ + 1, 0, dim_, dim_);
        c.q = E.block(dim_ + 1, dim_, dim_, 1);
        c.has_big = true;
    }

    void build_monitors(const ConductionPattern& p, Cache& c) {
        std::vector<Eigen::RowVectorXd> rows;
        for (int l = 0; l < n_; ++l) {
            const auto lu = static_cast<size_t>(l);
            if (p.main_closed[lu]) {
                if (p.main_body[lu]) {
                    rows.push_back(c.real.switch_current.row(2 * l));
                    c.mons.push_back({+1, EventKind::body_off, l, 0});
                }
            } else {
                Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(dim_);
                r(lay_.v_cra(l)) = 1.0;
                rows.push_back(r);
                c.mons.push_back({-1, EventKind::body_on, l, 0});
            }
            if (p.clamp_closed[lu]) {
                if (p.clamp_body[lu]) {
                    rows.push_back(c.real.switch_current.row(2 * l + 1));
                    c.mons.push_back({-1, EventKind::body_off, l, -1});
                }
            } else {
                Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(dim_);
                r(lay_.v_cra(l)) = 1.0;
                r(lay_.v_cc(l)) = -1.0;
                rows.push_back(r);
                c.mons.push_back({+1, EventKind::body_on, l, -1});
            }
            for (int j = 0; j < 2 * m_ - 1; ++j) {
                const int idx = l * (2 * m_ - 1) + j;
                if (p.diode_on[lu][static_cast<size_t>(j)]) {
                    rows.push_back(c.real.diode_current.row(idx));
                    c.mons.push_back({-1, EventKind::diode_off, l, j + 1});
                } else {
                    rows.push_back(blocking_row(c, p, l, j));
                    c.mons.push_back({+1, EventKind::diode_on, l, j + 1});
                }
            }
        }
        c.mon_rows = Eigen::MatrixXd::Zero(static_cast<int>(rows.size()), dim_);
        for (size_t i = 0; i < rows.size(); ++i) c.mon_rows.row(static_cast<int>(i)) = rows[i];
    }

    bool apply_monitor(const MonitorDesc& mo, ConductionPattern& p, Eigen::VectorXd& x) {
        const auto lu = static_cast<size_t>(mo.leg);
        if (mo.device > 0) {
            const bool on = mo.kind == EventKind::diode_on;
            p.diode_on[lu][static_cast<size_t>(mo.device - 1)] = on ? 1 : 0;
            if (on) {
                // a zero crossing of the blocking voltage only opens the diode
                // if the resulting mode actually carries forward current; a
                // grazing touch (transient sub-millivolt bias from the damped
                // parasitic branch) is ignored
                const int idx = mo.leg * (2 * m_ - 1) + (mo.device - 1);
                const Cache& ct = cached(p);
                const Eigen::VectorXd dxt = ct.real.A * x + ct.real.B * op_.v_in;
                const double i0 = ct.real.diode_current.row(idx).dot(x) +
                                  kTauLcp * ct.real.diode_current.row(idx).dot(dxt);
                if (i0 < -kTolI) {
                    p.diode_on[lu][static_cast<size_t>(mo.device - 1)] = 0;
                    return false;
                }
            }
        } else if (mo.device == 0) {
            if (mo.kind == EventKind::body_on) {
                p.main_closed[lu] = 1;
                p.main_body[lu] = 1;
                x(lay_.v_cra(mo.leg)) = 0.0;
                jump_pin_zero(lay_.v_cra(mo.leg));
            } else {
                p.main_closed[lu] = 0;
                p.main_body[lu] = 0;
            }
        } else {
            if (mo.kind == EventKind::body_on) {
                p.clamp_closed[lu] = 1;
                p.clamp_body[lu] = 1;
                x(lay_.v_cra(mo.leg)) = x(lay_.v_cc(mo.leg));
                jump_copy(lay_.v_cra(mo.leg), lay_.v_cc(mo.leg));
            } else {
                p.clamp_closed[lu] = 0;
                p.clamp_body[lu] = 0;
            }
        }
        return true;
    }

    // Exhaustive complementarity resolution over the diodes whose current or
    // blocking voltage is at zero: picks the on/off combination with the
    // smallest residual violation. The score is continuous in the state, so
    // the selected branch only changes at genuine mode boundaries.
    void resolve_cluster(ConductionPattern& p, const Eigen::VectorXd& x,
                         const std::vector<int>& flips,
                         const std::vector<uint8_t>& veto, std::string& trace) {
        struct Cand {
            int l, j;
            double s;
            bool forced;
        };
        std::vector<Cand> cands;
        Cache& c0 = cached(p);
        for (int l = 0; l < n_; ++l) {
            for (int j = 0; j < 2 * m_ - 1; ++j) {
                const int idx = l * (2 * m_ - 1) + j;
                double s;
                if (p.diode_on[static_cast<size_t>(l)][static_cast<size_t>(j)]) {
                    s = std::abs(c0.real.diode_current.row(idx).dot(x));
                } else {
                    s = std::abs(blocking_row(c0, p, l, j).dot(x));
                }
                const bool forced = flips[static_cast<size_t>(idx)] > 4 ||
                                    veto[static_cast<size_t>(idx)];
                if (forced || s < 2e-2) cands.push_back({l, j, s, forced});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.forced != b.forced) return a.forced;
            return a.s < b.s;
        });
        if (cands.size() > 8) cands.resize(8);
        const int k = static_cast<int>(cands.size());
        double best = std::numeric_limits<double>::infinity();
        int best_non = -1;
        uint64_t best_key = 0;
        ConductionPattern best_p = p;
        for (int mask = 0; mask < (1 << k); ++mask) {
            ConductionPattern q = p;
            for (int b = 0; b < k; ++b) {
                q.diode_on[static_cast<size_t>(cands[static_cast<size_t>(b)].l)]
                          [static_cast<size_t>(cands[static_cast<size_t>(b)].j)] =
                    static_cast<uint8_t>((mask >> b) & 1);
            }
            Cache* cq = nullptr;
            try {
                cq = &cached(q);
            } catch (const std::exception&) {
                continue; // structurally inconsistent combination
            }
            Cache& c = *cq;
            const Eigen::VectorXd dxq = c.real.A * x + c.real.B * op_.v_in;
            double pen = 0.0;
            for (int l = 0; l < n_; ++l) {
                for (int j = 0; j < 2 * m_ - 1; ++j) {
                    const int idx = l * (2 * m_ - 1) + j;
                    if (q.diode_on[static_cast<size_t>(l)][static_cast<size_t>(j)]) {
                        const double i = c.real.diode_current.row(idx).dot(x) +
                                         kTauLcp * c.real.diode_current.row(idx).dot(dxq);
                        pen += std::max(0.0, -i);
                    } else {
                        const Eigen::RowVectorXd row = blocking_row(c, q, l, j);
                        const double v = row.dot(x) + kTauLcp * row.dot(dxq);
                        // volts weighted onto the ampere scale by the resonant
                        // impedance so both violation kinds compare
                        pen += std::max(0.0, v) / 40.0;
                    }
                }
            }
            int non = 0;
            for (int b = 0; b < k; ++b) non += (mask >> b) & 1;
            const uint64_t key = q.key();
            // exact ties go to the pattern with more conducting diodes: at a
            // grazing boundary that is the limit the conducting branch
            // approaches, so the selection stays continuous across it
            if (pen < best - 1e-12 ||
                (std::abs(pen - best) <= 1e-12 &&
                 (non > best_non || (non == best_non && key < best_key)))) {
                best = pen;
                best_non = non;
                best_key = key;
                best_p = q;
            }
        }
        p = best_p;
        trace += " cluster(k=" + std::to_string(k) + ",pen=" + std::to_string(best) + ")";
    }

    // Consistency sweep after a topology or gate change: turns on
    // forward-biased devices and turns off reverse-conducting ones until the
    // pattern agrees with the state.
    void fixup(ConductionPattern& p, Eigen::VectorXd& x, double t) {
        static const bool log = std::getenv("VMCLAMP_TRACE") != nullptr;
        std::string trace;
        // a device that keeps flipping is frozen; far-from-manifold states
        // then still produce a finite (if poor) trajectory for the shooter
        std::vector<int> flips(static_cast<size_t>(n_ * (2 * m_ + 1)), 0);
        std::vector<uint8_t> veto(static_cast<size_t>(n_ * (2 * m_ - 1)), 0);
        bool denied = false;
        auto may_flip = [&](int slot) {
            if (++flips[static_cast<size_t>(slot)] <= 4) return true;
            denied = true;
            return false;
        };
        bool cluster_done = false;
        for (int pass = 0; pass < 64; ++pass) {
            Cache& c = cached(p);
            // marginal violations only count when they are still growing,
            // which resolves grazing at degenerate mode boundaries
            const Eigen::VectorXd dx = c.real.A * x + c.real.B * op_.v_in;
            bool changed = false;
            // turn-on candidates are ranked by forward voltage and attempted
            // strongest first: after a hard commutation several diodes are
            // forward biased at once and the marginal ones must not pre-empt
            // (and then veto) the decisively biased ones
            int on_l = -1, on_j = -1;
            double on_v = 0.0;
            for (int l = 0; l < n_; ++l) {
                const auto lu = static_cast<size_t>(l);
                for (int j = 0; j < 2 * m_ - 1; ++j) {
                    const int idx = l * (2 * m_ - 1) + j;
                    if (p.diode_on[lu][static_cast<size_t>(j)]) {
                        const double i = c.real.diode_current.row(idx).dot(x);
                        const double di = c.real.diode_current.row(idx).dot(dx);
                        if (i < -kTolI && (di < 0.0 || i < -100.0 * kTolI) && may_flip(idx)) {
                            p.diode_on[lu][static_cast<size_t>(j)] = 0;
                            changed = true;
                            trace += " -D" + std::to_string(l) + "." + std::to_string(j + 1) +
                                     "(i=" + std::to_string(i) + ")";
                        }
                    } else {
                        const Eigen::RowVectorXd row = blocking_row(c, p, l, j);
                        const double v = row.dot(x);
                        const double dv = row.dot(dx);
                        if (v > kTolV && (dv > 0.0 || v > 100.0 * kTolV) &&
                            !veto[static_cast<size_t>(idx)] && v > on_v) {
                            on_l = l;
                            on_j = j;
                            on_v = v;
                        }
                    }
                }
                if (!p.main_closed[lu] && x(lay_.v_cra(l)) < -kTolV &&
                    may_flip(n_ * (2 * m_ - 1) + 2 * l)) {
                    p.main_closed[lu] = 1;
                    p.main_body[lu] = !gate_main(l, t);
                    x(lay_.v_cra(l)) = 0.0;
                    jump_pin_zero(lay_.v_cra(l));
                    changed = true;
                    trace += " +M" + std::to_string(l);
                }
                if (p.main_closed[lu] && p.main_body[lu] &&
                    c.real.switch_current.row(2 * l).dot(x) > kTolI &&
                    may_flip(n_ * (2 * m_ - 1) + 2 * l)) {
                    p.main_closed[lu] = 0;
                    p.main_body[lu] = 0;
                    changed = true;
                    trace += " -M" + std::to_string(l);
                }
                if (!p.clamp_closed[lu] && x(lay_.v_cra(l)) - x(lay_.v_cc(l)) > kTolV &&
                    may_flip(n_ * (2 * m_ - 1) + 2 * l + 1)) {
                    p.clamp_closed[lu] = 1;
                    p.clamp_body[lu] = !gate_clamp(l, t);
                    x(lay_.v_cra(l)) = x(lay_.v_cc(l));
                    jump_copy(lay_.v_cra(l), lay_.v_cc(l));
                    changed = true;
                    trace += " +C" + std::to_string(l);
                }
                if (p.clamp_closed[lu] && p.clamp_body[lu] &&
                    c.real.switch_current.row(2 * l + 1).dot(x) < -kTolI &&
                    may_flip(n_ * (2 * m_ - 1) + 2 * l + 1)) {
                    p.clamp_closed[lu] = 0;
                    p.clamp_body[lu] = 0;
                    changed = true;
                    trace += " -C" + std::to_string(l);
                }
            }
            if (!changed && on_l >= 0) {
                const int idx = on_l * (2 * m_ - 1) + on_j;
                if (may_flip(idx)) {
                    p.diode_on[static_cast<size_t>(on_l)][static_cast<size_t>(on_j)] = 1;
                    // reject turn-ons whose mode cannot carry forward current
                    // (grazing bias, see apply_monitor)
                    const Cache& ct = cached(p);
                    const Eigen::VectorXd dxt = ct.real.A * x + ct.real.B * op_.v_in;
                    if (ct.real.diode_current.row(idx).dot(x) +
                            kTauLcp * ct.real.diode_current.row(idx).dot(dxt) <
                        -kTolI) {
                        p.diode_on[static_cast<size_t>(on_l)][static_cast<size_t>(on_j)] = 0;
                        veto[static_cast<size_t>(idx)] = 1;
                        continue; // other, less biased candidates may still fire
                    } else {
                        changed = true;
                        trace += " +D" + std::to_string(on_l) + "." +
                                 std::to_string(on_j + 1) + "(v=" + std::to_string(on_v) + ")";
                    }
                }
            }
            if (!changed) {
                const bool vetoed =
                    std::find(veto.begin(), veto.end(), uint8_t{1}) != veto.end();
                if ((denied || vetoed) && !cluster_done) {
                    // single-device toggling contradicted itself: several diode
                    // currents/voltages sit at zero simultaneously (the ladder
                    // hands charge off as a chain). Resolve the ambiguous
                    // cluster as a small complementarity problem by exhaustive
                    // enumeration of its on/off combinations.
                    resolve_cluster(p, x, flips, veto, trace);
                    cluster_done = true;
                    denied = false;
                    std::fill(flips.begin(), flips.end(), 0);
                    std::fill(veto.begin(), veto.end(), uint8_t{0});
                    continue;
                }
                if (log && !trace.empty())
                    std::fprintf(stderr, "fixup t=%.9g:%s\n", t, trace.c_str());
                return;
            }
        }
        throw ModeError("device conduction pattern failed to settle at t=" +
                        std::to_string(t) + ":" + trace);
    }

    ConductionPattern resolve_initial(Eigen::VectorXd& x) {
        ConductionPattern p = ConductionPattern::all_off(n_, m_);
        for (int l = 0; l < n_; ++l) {
            const auto lu = static_cast<size_t>(l);
            if (gate_main(l, t0_)) {
                p.main_closed[lu] = 1;
                x(lay_.v_cra(l)) = 0.0;
                jump_pin_zero(lay_.v_cra(l));
            }
            if (gate_clamp(l, t0_)) {
                p.clamp_closed[lu] = 1;
                const double vm = (cfg_.c_ra * x(lay_.v_cra(l)) + cfg_.c_c * x(lay_.v_cc(l))) /
                                  (cfg_.c_ra + cfg_.c_c);
                x(lay_.v_cra(l)) = vm;
                x(lay_.v_cc(l)) = vm;
                jump_mix(lay_.v_cra(l), lay_.v_cc(l), cfg_.c_ra / (cfg_.c_ra + cfg_.c_c),
                         cfg_.c_c / (cfg_.c_ra + cfg_.c_c));
            }
        }
        fixup(p, x, t0_);
        return p;
    }

    int classify(const ConductionPattern& p, int leg) const {
        for (int s = 1; s <= 8; ++s) {
            const ConductionPattern ref =
                pattern_for(static_cast<OperationalState>(s), m_, 1, 0);
            const auto lu = static_cast<size_t>(leg);
            if (p.main_closed[lu] != ref.main_closed[0]) continue;
            if (p.clamp_closed[lu] != ref.clamp_closed[0]) continue;
            if (p.diode_on[lu] != ref.diode_on[0]) continue;
            return s;
        }
        return 0;
    }

    void apply_gate(const GateEdge& ge, ConductionPattern& p, Eigen::VectorXd& x,
                    bool record, RunResult& rr) {
        const auto lu = static_cast<size_t>(ge.leg);
        switch (ge.type) {
        case 0: { // main gate on
            const double v = x(lay_.v_cra(ge.leg));
            if (!p.main_closed[lu]) {
                rr.t1[static_cast<size_t>(ge.leg)] = ge.t;
                x(lay_.v_cra(ge.leg)) = 0.0; // hard turn-on, snubber dumped
                jump_pin_zero(lay_.v_cra(ge.leg));
                p.main_closed[lu] = 1;
            }
            p.main_body[lu] = 0;
            if (record) {
                LegMetrics& lm = leg_metrics[lu];
                lm.main_turn_on_voltage = v;
                lm.zvs_main = v < 1e-3 * std::max(x(lay_.v_cc(ge.leg)), 1.0);
            }
            break;
        }
        case 1: { // main gate off
            if (p.main_closed[lu]) {
                const Cache& c = cached(p);
                if (c.real.switch_current.row(2 * ge.leg).dot(x) < -kTolI) {
                    p.main_body[lu] = 1;
                } else {
                    p.main_closed[lu] = 0;
                    p.main_body[lu] = 0;
                }
            }
            break;
        }
        case 2: { // clamp gate on
            const double v = x(lay_.v_cra(ge.leg)) - x(lay_.v_cc(ge.leg));
            const bool body_already = p.clamp_closed[lu] != 0;
            if (!p.clamp_closed[lu]) {
                const double vm = (cfg_.c_ra * x(lay_.v_cra(ge.leg)) +
                                   cfg_.c_c * x(lay_.v_cc(ge.leg))) /
                                  (cfg_.c_ra + cfg_.c_c);
                x(lay_.v_cra(ge.leg)) = vm;
                x(lay_.v_cc(ge.leg)) = vm;
                jump_mix(lay_.v_cra(ge.leg), lay_.v_cc(ge.leg),
                         cfg_.c_ra / (cfg_.c_ra + cfg_.c_c),
                         cfg_.c_c / (cfg_.c_ra + cfg_.c_c));
                p.clamp_closed[lu] = 1;
            }
            p.clamp_body[lu] = 0;
            if (record) {
                LegMetrics& lm = leg_metrics[lu];
                lm.clamp_turn_on_voltage = body_already ? 0.0 : -v;
                lm.zvs_clamp =
                    body_already || std::abs(v) < 1e-3 * std::max(x(lay_.v_cc(ge.leg)), 1.0);
            }
            break;
        }
        case 3: { // clamp gate off
            if (p.clamp_closed[lu]) {
                const Cache& c = cached(p);
                if (c.real.switch_current.row(2 * ge.leg + 1).dot(x) > kTolI) {
                    p.clamp_body[lu] = 1;
                } else {
                    p.clamp_closed[lu] = 0;
                    p.clamp_body[lu] = 0;
                }
            }
            break;
        }
        }
    }

    void accumulate(Cache& c, const Eigen::VectorXd& xa, const Eigen::VectorXd& xb,
                    double dt, bool aligned) {
        Eigen::VectorXd w;
        if (aligned) {
            ensure_big(c);
            w = c.P * xa + c.q;
        } else {
            const Eigen::MatrixXd E = phi_big(c.real.A, c.real.B * op_.v_in, dt);
            w = E.block(dim_ + 1, 0, dim_, dim_) * xa + E.block(dim_ + 1, dim_, dim_, 1);
        }
        int_x += w;
        for (int l = 0; l < n_; ++l) {
            int_vx(l) += c.real.node_voltage.row(lay_.node_x(l)).dot(w);
            for (int j = 0; j < 2 * m_ - 1; ++j) {
                diode_int(l, j) += c.real.diode_current.row(l * (2 * m_ - 1) + j).dot(w);
            }
            switch_int(l, 0) += c.real.switch_current.row(2 * l).dot(w);
            switch_int(l, 1) += c.real.switch_current.row(2 * l + 1).dot(w);
        }
        const double va = vout_row_.dot(xa);
        const double vb = vout_row_.dot(xb);
        p_out_int += 0.5 * (va * va + vb * vb) / cfg_.r_load * dt;

        x_min = x_min.cwiseMin(xb);
        x_max = x_max.cwiseMax(xb);
        // refine interior extrema of the capacitor voltages
        const Eigen::VectorXd da = c.real.A * xa + c.real.B * op_.v_in;
        const Eigen::VectorXd db = c.real.A * xb + c.real.B * op_.v_in;
        for (int i = 0; i < dim_; ++i) {
            bool is_cap = true;
            for (int l = 0; l < n_; ++l) {
                if (i == lay_.i_la(l) || i == lay_.i_lra(l)) is_cap = false;
            }
            if (!is_cap) continue;
            if (da(i) * db(i) < 0.0) {
                const Eigen::RowVectorXd drow = c.real.A.row(i);
                double lo = 0.0, hi = dt, glo = da(i);
                const double bvi = c.real.B(i) * op_.v_in;
                for (int it = 0; it < 30 && hi - lo > 1e-14; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    const Eigen::VectorXd xm =
                        propagate(c.real.A, c.real.B * op_.v_in, xa, mid);
                    const double gm = drow.dot(xm) + bvi;
                    if ((glo <= 0.0) == (gm <= 0.0)) {
                        lo = mid;
                        glo = gm;
                    } else {
                        hi = mid;
                    }
                }
                const Eigen::VectorXd xe =
                    propagate(c.real.A, c.real.B * op_.v_in, xa, 0.5 * (lo + hi));
                x_min(i) = std::min(x_min(i), xe(i));
                x_max(i) = std::max(x_max(i), xe(i));
            }
        }
    }
};

PeriodSimulator::RunResult PeriodSimulator::simulate(const Eigen::VectorXd& x_in,
                                                     bool record, double duration,
                                                     bool with_jacobian) {
    RunResult rr;
    Eigen::VectorXd x = x_in;
    Eigen::MatrixXd mono;
    if (with_jacobian) {
        jmp_ = Eigen::MatrixXd::Identity(dim_, dim_);
        jmp_active_ = true;
    }
    ConductionPattern p = resolve_initial(x);
    if (with_jacobian) {
        jmp_active_ = false;
        mono = jmp_;
    }
    Cache* cur = &cached(p);

    events.clear();
    if (record) {
        state_sequence.clear();
        state_durations.clear();
        sample_t.clear();
        const int ns = static_cast<int>(std::llround(Ts_ / h_));
        samples = Eigen::MatrixXd::Zero(dim_, ns + 1);
        sample_t.reserve(static_cast<size_t>(ns) + 1);
        int_x = Eigen::VectorXd::Zero(dim_);
        int_vx = Eigen::VectorXd::Zero(n_);
        x_min = x;
        x_max = x;
        diode_int = Eigen::MatrixXd::Zero(n_, 2 * m_ - 1);
        switch_int = Eigen::MatrixXd::Zero(n_, 2);
        p_out_int = 0.0;
        leg_metrics.assign(static_cast<size_t>(n_), LegMetrics{});
        samples.col(0) = x;
        sample_t.push_back(t0_);
    }

    const double t_end = t0_ + (duration > 0.0 ? duration : Ts_);
    const double t_eps = 1e-15 * Ts_;
    double t = t0_;
    size_t gi = 0;
    int sample_idx = 1;

    int last_class = classify(p, 0);
    double class_start = t0_;
    std::vector<std::pair<int, double>> class_intervals;
    auto reclassify = [&](double tc) {
        const int nc = classify(p, 0);
        if (nc != 0 && nc != last_class) {
            class_intervals.emplace_back(last_class, tc - class_start);
            class_start = tc;
            last_class = nc;
        }
    };

    Eigen::VectorXd prev_g = cur->mon_rows * x;
    int event_budget = 64 * 8 * n_;

    while (t < t_end - t_eps) {
        const double t_grid =
            t0_ + (std::floor((t - t0_) / h_ + 1e-9) + 1.0) * h_;
        double t_gate = std::numeric_limits<double>::infinity();
        if (gi < gates_.size()) t_gate = gates_[gi].t;
        double tn = std::min({t_grid, t_gate, t_end});
        const double dt = tn - t;
        const bool aligned = std::abs(dt - h_) < 1e-12 * h_;

        Eigen::VectorXd xn;
        Eigen::MatrixXd E_seg; // transition over [t, tn] for non-aligned steps
        if (aligned) {
            xn = cur->E * x + cur->f;
        } else {
            const Eigen::MatrixXd E = phi_small(cur->real.A, cur->real.B * op_.v_in, dt);
            E_seg = E.topLeftCorner(dim_, dim_);
            xn = E_seg * x + E.topRightCorner(dim_, 1);
        }

        // scan conduction-change monitors across the step
        const Eigen::VectorXd g = cur->mon_rows * xn;
        double best_t = std::numeric_limits<double>::infinity();
        int best = -1;
        for (int i = 0; i < g.size(); ++i) {
            const MonitorDesc& mo = cur->mons[static_cast<size_t>(i)];
            const double a = prev_g(i);
            const double b = g(i);
            const bool fire = mo.dir > 0 ? (a < 0.0 && b > 0.0) : (a > 0.0 && b < 0.0);
            if (fire) {
                Eigen::RowVectorXd row = cur->mon_rows.row(i);
                const double tau = locate_root(cur->real.A, cur->real.B * op_.v_in, x,
                                               row, 0.0, dt, a);
                if (tau < best_t) {
                    best_t = tau;
                    best = i;
                }
            }
        }

        if (best >= 0) {
            if (--event_budget < 0) {
                std::string msg = "conduction event budget exhausted; last events:";
                const size_t lo = events.size() > 12 ? events.size() - 12 : 0;
                for (size_t i = lo; i < events.size(); ++i) {
                    msg += " k" + std::to_string(static_cast<int>(events[i].kind)) + "/l" +
                           std::to_string(events[i].leg) + "/d" +
                           std::to_string(events[i].device) + "@" +
                           std::to_string(events[i].time * 1e9);
                }
                throw ModeError(msg);
            }
            const MonitorDesc mo = cur->mons[static_cast<size_t>(best)];
            const Eigen::MatrixXd Ee =
                phi_small(cur->real.A, cur->real.B * op_.v_in, best_t);
            Eigen::VectorXd xe =
                Ee.topLeftCorner(dim_, dim_) * x + Ee.topRightCorner(dim_, 1);
            if (record) accumulate(*cur, x, xe, best_t, false);
            t += best_t;
            Eigen::VectorXd f_minus, guard;
            if (with_jacobian) {
                mono = Ee.topLeftCorner(dim_, dim_) * mono;
                f_minus = cur->real.A * xe + cur->real.B * op_.v_in;
                guard = cur->mon_rows.row(best).transpose();
                jmp_ = Eigen::MatrixXd::Identity(dim_, dim_);
                jmp_active_ = true;
            }
            const bool switched = apply_monitor(mo, p, xe);
            if (switched) {
                if (mo.device == 0 && mo.kind == EventKind::body_on) {
                    rr.t1[static_cast<size_t>(mo.leg)] = t;
                }
                fixup(p, xe, t);
            }
            if (with_jacobian) {
                jmp_active_ = false;
                if (switched) {
                    // saltation: the event time varies with the initial state,
                    // so the sensitivity picks up a rank-one correction along
                    // the guard normal
                    Cache& cn = cached(p);
                    const Eigen::VectorXd f_plus =
                        cn.real.A * xe + cn.real.B * op_.v_in;
                    const double denom = guard.dot(f_minus);
                    Eigen::MatrixXd S = jmp_;
                    if (std::abs(denom) >
                        1e-14 * guard.norm() * std::max(1.0, f_minus.norm())) {
                        S += ((f_plus - jmp_ * f_minus) / denom) * guard.transpose();
                    }
                    mono = S * mono;
                }
            }
            if (switched) {
                events.push_back({mo.kind, mo.leg, mo.device, t});
                if (std::getenv("VMCLAMP_TRACE"))
                    std::fprintf(stderr, "event t=%.9g kind=%d leg=%d dev=%d\n", t,
                                 static_cast<int>(mo.kind), mo.leg, mo.device);
                reclassify(t);
                x = xe;
                cur = &cached(p);
                prev_g = cur->mon_rows * x;
            } else {
                // grazing non-event: step past the root without switching
                x = xe;
                prev_g = cur->mon_rows * x;
                prev_g(best) = std::max(prev_g(best), 0.0);
            }
            continue;
        }

        if (record) accumulate(*cur, x, xn, dt, aligned);
        x = xn;
        t = tn;
        if (with_jacobian) mono = (aligned ? cur->E : E_seg) * mono;
        bool topo_changed = false;
        if (with_jacobian && gi < gates_.size() && gates_[gi].t <= t + t_eps) {
            jmp_ = Eigen::MatrixXd::Identity(dim_, dim_);
            jmp_active_ = true;
        }
        while (gi < gates_.size() && gates_[gi].t <= t + t_eps) {
            apply_gate(gates_[gi], p, x, record, rr);
            events.push_back({gates_[gi].type == 0 || gates_[gi].type == 2
                                  ? EventKind::gate_on
                                  : EventKind::gate_off,
                              gates_[gi].leg,
                              gates_[gi].type <= 1 ? 0 : -1, t});
            topo_changed = true;
            ++gi;
        }
        if (topo_changed) {
            fixup(p, x, t);
            reclassify(t);
            cur = &cached(p);
            prev_g = cur->mon_rows * x;
        } else {
            prev_g = cur->mon_rows * x;
        }
        if (jmp_active_) {
            // gate edges happen at fixed times: only the state jump matters
            jmp_active_ = false;
            mono = jmp_ * mono;
        }
        if (record && std::abs(t - (t0_ + sample_idx * h_)) < 1e-9 * h_) {
            samples.col(sample_idx) = x;
            sample_t.push_back(t);
            ++sample_idx;
        }
    }

    if (record) {
        class_intervals.emplace_back(last_class, t_end - class_start);
        // merge the wrapped first and last intervals
        if (class_intervals.size() > 1 &&
            class_intervals.front().first == class_intervals.back().first) {
            class_intervals.front().second += class_intervals.back().second;
            class_intervals.pop_back();
        }
        // rotate so the cycle starts at state 1
        size_t start = 0;
        for (size_t i = 0; i < class_intervals.size(); ++i) {
            if (class_intervals[i].first == 1) {
                start = i;
                break;
            }
        }
        for (size_t i = 0; i < class_intervals.size(); ++i) {
            const auto& ci = class_intervals[(start + i) % class_intervals.size()];
            state_sequence.push_back(ci.first);
            state_durations.push_back(ci.second);
        }
    }
    rr.xT = x;
    if (with_jacobian) rr.M = std::move(mono);
    return rr;
}

} // namespace

OracleSolution run_periodic_steady_state(const ConverterConfig& cfg,
                                         const OperatingPoint& op,
                                         const OracleOptions& opts) {
    cfg.validate();
    PeriodSimulator sim(cfg, op, opts);
    const int dim = sim.layout().dim();

    Eigen::VectorXd x = opts.initial_state ? *opts.initial_state : sim.initial_guess();
    if (x.size() != dim) throw ConfigError("initial state has wrong dimension");

    Eigen::MatrixXd J;
    double residual = std::numeric_limits<double>::infinity();
    // fixed normalization; a moving ||x|| denominator would let divergent
    // iterates masquerade as converged
    const double xscale = std::max(1.0, x.norm());
    double lm_lambda = 1e-6;

    // With two interleaved legs the steady orbit is half-period symmetric:
    // advancing half a period and swapping the legs maps the orbit onto
    // itself. Shooting on that composed map excludes the leg-asymmetric
    // spurious branches a full-period map admits and halves the work per
    // residual evaluation.
    const int lb = sim.layout().leg_block();
    const bool half_sym = sim.layout().n == 2 && !std::getenv("VMCLAMP_FULLMAP");
    auto swap_legs = [lb](Eigen::VectorXd& y) {
        const Eigen::VectorXd a = y.segment(0, lb);
        y.segment(0, lb) = y.segment(lb, lb);
        y.segment(lb, lb) = a;
    };
    const double Ts_map = cfg.period();
    auto run_map = [&](const Eigen::VectorXd& y, bool with_jacobian) {
        PeriodSimulator::RunResult rr =
            sim.simulate(y, false, half_sym ? 0.5 * Ts_map : -1.0, with_jacobian);
        if (half_sym) {
            swap_legs(rr.xT);
            if (with_jacobian) {
                const Eigen::MatrixXd top = rr.M.middleRows(0, lb);
                rr.M.middleRows(0, lb) = rr.M.middleRows(lb, lb);
                rr.M.middleRows(lb, lb) = top;
            }
        }
        return rr;
    };

    static const bool log = std::getenv("VMCLAMP_TRACE") != nullptr;
    double t1_last = std::numeric_limits<double>::quiet_NaN();
    // conduction start relative to the firing leg's own gate phase
    auto t1_offset = [&](const PeriodSimulator::RunResult& rr) {
        const double Ts = cfg.period();
        for (int l = 0; l < sim.layout().n; ++l) {
            const double t1 = rr.t1[static_cast<size_t>(l)];
            if (std::isfinite(t1)) {
                double w = std::fmod(t1 - sim.leg_phase(l), Ts);
                if (w < 0.0) w += Ts;
                return w;
            }
        }
        return std::numeric_limits<double>::quiet_NaN();
    };
    for (int duty_round = 0; duty_round < 12; ++duty_round) {
        // shoot to the periodic orbit under the current gate schedule
        PeriodSimulator::RunResult rr = run_map(x, true);
        Eigen::VectorXd G = rr.xT - x;
        residual = G.norm() / xscale;
        t1_last = t1_offset(rr);
        // Plain forward iteration before Newton: the converter is stable, so
        // repeated period maps follow the physical transient through mode
        // re-ignitions (paths a damped Newton step would refuse to cross) and
        // settle into the basin of the true orbit. Acceptance is
        // unconditional; the transient is not monotone in the residual.
        auto signature = [&]() {
            std::vector<int> sig;
            for (const auto& ev : sim.events) {
                sig.push_back(static_cast<int>(ev.kind));
                sig.push_back(ev.leg);
                sig.push_back(ev.device);
            }
            return sig;
        };
        std::vector<int> sig_prev;
        int sig_stable = 0;
        int warm_max = 400;
        if (const char* wm = std::getenv("VMCLAMP_WARM")) warm_max = std::atoi(wm);
        for (int warm = 0; warm < warm_max && residual > 1e-4; ++warm) {
            Eigen::VectorXd xn = rr.xT;
            PeriodSimulator::RunResult rn;
            try {
                rn = run_map(xn, true);
            } catch (const std::runtime_error&) {
                break;
            }
            const double resn = (rn.xT - xn).norm() / xscale;
            std::vector<int> sig = signature();
            sig_stable = (sig == sig_prev) ? sig_stable + 1 : 0;
            sig_prev = std::move(sig);
            if (log)
                std::fprintf(stderr, "warm round=%d it=%d res=%.3e sig_stable=%d\n",
                             duty_round, warm, resn, sig_stable);
            x = xn;
            rr = rn;
            G = rr.xT - x;
            residual = resn;
            t1_last = t1_offset(rr);
            if (resn < 3e-4 && sig_stable >= 5 && !std::getenv("VMCLAMP_WARM")) break;
        }
        if (std::getenv("VMCLAMP_CHECK_JAC")) {
            for (int i = 0; i < dim; ++i) {
                const double eps = 1e-7 * std::max(1.0, std::abs(x(i)));
                Eigen::VectorXd xp = x, xm = x;
                xp(i) += eps;
                xm(i) -= eps;
                const Eigen::VectorXd fd =
                    (run_map(xp, false).xT - run_map(xm, false).xT) / (2 * eps);
                const Eigen::VectorXd an = rr.M.col(i);
                const double err = (fd - an).norm();
                std::fprintf(stderr, "jac col %-10s |fd-an|=%.3e |fd|=%.3e\n",
                             sim.layout().state_names()[static_cast<size_t>(i)].c_str(),
                             err, fd.norm());
                if (err > 1e-3 * std::max(1.0, fd.norm())) {
                    for (int r = 0; r < dim; ++r)
                        if (std::abs(fd(r) - an(r)) > 1e-3 * std::max(1.0, std::abs(fd(r))))
                            std::fprintf(stderr, "    row %-10s fd=%.6e an=%.6e\n",
                                         sim.layout().state_names()[static_cast<size_t>(r)].c_str(),
                                         fd(r), an(r));
                }
            }
        }
        double res_record = residual;
        int stagnant = 0;
        for (int it = 0; it < opts.max_iterations && residual > opts.tol; ++it) {
            // each map evaluation carries its exact Jacobian via the chained
            // segment exponentials and saltation factors
            J = rr.M - Eigen::MatrixXd::Identity(dim, dim);
            // damped (Levenberg-Marquardt) step: the monodromy of the slow
            // capacitor states is within 1e-4 of unity, so the raw Newton
            // system is ill conditioned near mode-boundary kinks
            const Eigen::MatrixXd JtJ = J.transpose() * J;
            const Eigen::VectorXd JtG = J.transpose() * G;
            const Eigen::VectorXd diag = JtJ.diagonal().cwiseMax(1e-12);
            bool accepted = false;
            // best over-tolerance trial, kept for non-monotone acceptance: the
            // exact Newton step is the only move that crosses the slow
            // capacitor transient in useful strides, and the micro-events it
            // reshuffles can raise the residual transiently
            double res_best = std::numeric_limits<double>::infinity();
            Eigen::VectorXd x_best;
            PeriodSimulator::RunResult rr_best;
            for (int ls = 0; ls < 14; ++ls) {
                const Eigen::MatrixXd Jd =
                    JtJ + lm_lambda * Eigen::MatrixXd(diag.asDiagonal());
                const Eigen::VectorXd dx = -Jd.ldlt().solve(JtG);
                const Eigen::VectorXd xc = x + dx;
                PeriodSimulator::RunResult rc;
                try {
                    rc = run_map(xc, true);
                } catch (const std::runtime_error&) {
                    lm_lambda *= 8.0;
                    continue;
                }
                const Eigen::VectorXd Gc = rc.xT - xc;
                const double res_c = Gc.norm() / xscale;
                if (log)
                    std::fprintf(stderr, "  lm=%.1e |dx|=%.3e res=%.3e\n", lm_lambda,
                                 dx.norm(), res_c);
                if (res_c < res_best) {
                    res_best = res_c;
                    x_best = xc;
                    rr_best = rc;
                }
                if (res_c < 0.7 * residual) {
                    accepted = true;
                    lm_lambda = std::max(lm_lambda / 4.0, 1e-12);
                    break;
                }
                lm_lambda *= 8.0;
                if (lm_lambda > 1e12 || dx.norm() < 1e-14 * xscale) break;
            }
            if (accepted || res_best < 3.0 * residual) {
                x = std::move(x_best);
                G = rr_best.xT - x;
                rr = std::move(rr_best);
                residual = res_best;
                t1_last = t1_offset(rr);
            } else {
                // no useful Newton step: follow the flow one period, which
                // crosses mode boundaries physically
                lm_lambda = 1e-6;
                PeriodSimulator::RunResult rn;
                try {
                    rn = run_map(rr.xT, true);
                } catch (const std::runtime_error&) {
                    break;
                }
                x = rr.xT;
                G = rn.xT - x;
                rr = std::move(rn);
                residual = G.norm() / xscale;
                t1_last = t1_offset(rr);
                if (log) std::fprintf(stderr, "  flow step res=%.3e\n", residual);
            }
            if (log)
                std::fprintf(stderr, "shoot round=%d it=%d res=%.3e accepted=%d\n",
                             duty_round, it, residual, accepted ? 1 : 0);
            if (residual < 0.9 * res_record) {
                res_record = residual;
                stagnant = 0;
            } else if (++stagnant >= 12) {
                break;
            }
        }
        if (residual > opts.tol) {
            if (log) {
                for (int i = 0; i < dim; ++i)
                    std::fprintf(stderr, "  G[%s] = %.6e  (x=%.9g)\n",
                                 sim.layout().state_names()[static_cast<size_t>(i)].c_str(),
                                 G(i), x(i));
            }
            throw ConvergenceError("periodic shooting failed to converge", residual);
        }

        // calibrate the gate duty so the realized conduction duty matches
        if (!std::isfinite(t1_last)) {
            throw ModeError("main conduction start was never observed");
        }
        const double Ts = cfg.period();
        double off = std::fmod(sim.gate_duty() * Ts - t1_last, Ts);
        if (off < 0.0) off += Ts;
        const double d_cond = off / Ts;
        const double err = op.duty_ma - d_cond;
        if (std::abs(err) < 1e-10) break;
        double dg = sim.gate_duty() + err;
        const double dg_max = 1.0 - 2.2 * cfg.dead_time / Ts;
        dg = std::clamp(dg, 0.02, dg_max);
        sim.set_gate_duty(dg);
        if (duty_round == 11) {
            throw ConvergenceError("gate duty calibration failed", std::abs(err));
        }
    }

    // measurement pass at full sampling density
    sim.set_step(cfg.period() / opts.samples_per_period);
    PeriodSimulator::RunResult rr = sim.simulate(x, true);
    const double res_meas = (rr.xT - x).norm() / std::max(1.0, x.norm());

    OracleSolution sol;
    sol.cfg = cfg;
    sol.op = op;
    sol.layout = sim.layout();
    sol.x0 = x;
    sol.t_start = sim.t_start();
    sol.gate_duty = sim.gate_duty();
    sol.residual = std::max(residual, res_meas);
    sol.sample_t = sim.sample_t;
    sol.samples = sim.samples;
    sol.events = sim.events;
    sol.state_sequence = sim.state_sequence;
    sol.state_durations = sim.state_durations;
    sol.legs = sim.leg_metrics;

    const NetworkLayout& lay = sol.layout;
    const double Ts = cfg.period();
    sol.ripple = sim.x_max - sim.x_min;
    sol.cap_current_avg = Eigen::VectorXd::Zero(dim);
    auto cap_avg = [&](int idx, double c) {
        sol.cap_current_avg(idx) = c * (rr.xT(idx) - x(idx)) / Ts;
    };
    for (int l = 0; l < lay.n; ++l) {
        cap_avg(lay.v_cra(l), cfg.c_ra);
        cap_avg(lay.v_cc(l), cfg.c_c);
        for (int k = 1; k < lay.m; ++k) cap_avg(lay.v_ca(l, k), cfg.c_a);
        cap_avg(lay.v_cp(l), cfg.c_p);
    }
    for (int k = 1; k <= lay.m; ++k) cap_avg(lay.v_cout(k), cfg.c_out);

    sol.diode_current_avg = sim.diode_int / Ts;

    SwitchedNetwork probe(cfg, cfg.n_legs, true);
    const Eigen::RowVectorXd vo_row = probe.node_voltage_row(lay.node_n(lay.m));
    sol.v_out_avg = vo_row.dot(sim.int_x) / Ts;
    sol.i_out_avg = sol.v_out_avg / cfg.r_load;
    sol.p_out = sim.p_out_int / Ts;
    double i_in = 0.0;
    for (int l = 0; l < lay.n; ++l) {
        i_in += sim.int_x(lay.i_la(l)) / Ts;
        LegMetrics& lm = sol.legs[static_cast<size_t>(l)];
        const double vx_avg = sim.int_vx(l) / Ts;
        const double vy_avg = sim.int_x(lay.v_cra(l)) / Ts;
        lm.v_la_avg = op.v_in - vx_avg;
        lm.v_lra_avg = vx_avg - vy_avg;
        lm.v_cra_avg = sim.int_x(lay.v_cra(l)) / Ts;
        lm.i_la_avg = sim.int_x(lay.i_la(l)) / Ts;
    }
    sol.p_in = op.v_in * i_in;

    if (opts.strict_sequence) {
        std::vector<int> seq;
        for (int s : sol.state_sequence) {
            if (s != 0 && (seq.empty() || seq.back() != s)) seq.push_back(s);
        }
        const std::vector<int> expect{1, 2, 3, 4, 5, 6, 7, 8};
        if (seq != expect) {
            std::string msg = "unexpected leg state order:";
            for (int s : seq) msg += " " + std::to_string(s);
            throw ModeError(msg);
        }
    }
    return sol;
}

} // namespace vmclamp
