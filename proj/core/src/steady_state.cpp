#include "vmclamp/steady_state.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

namespace vmclamp {

namespace {

constexpr int kNStates = kStateCount;

/// Sign of the parasitic-capacitor charge rule: v_cp is measured from the
/// inductors' common node toward the output rail, so the ladder injection
/// current i_La - i_Lra discharges it.
constexpr double kCpSign = -1.0;

double bisect(const std::function<double(double)>& f, double lo, double hi,
              double flo) {
    for (int i = 0; i < 160 && hi - lo > 1e-21; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if ((fm < 0.0) == (flo < 0.0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

/// First zero crossing of f on (lo, hi], sampling n points; `sign0` is the
/// sign f leaves from. Returns negative when no crossing is found.
double first_crossing(const std::function<double(double)>& f, double lo, double hi,
                      int n, double f_lo) {
    double prev_t = lo, prev_f = f_lo;
    for (int k = 1; k <= n; ++k) {
        const double t = lo + (hi - lo) * k / n;
        const double ft = f(t);
        if ((ft < 0.0) != (prev_f < 0.0) || ft == 0.0)
            return bisect(f, prev_t, t, prev_f);
        prev_t = t;
        prev_f = ft;
    }
    return -1.0;
}

struct CycleBook {
    std::array<StateVector, kNStates> entries;
    std::array<ModalCoefficients, kNStates> coeffs;
    std::array<double, kNStates> d{};
    std::array<double, kNStates> q_delta{}; ///< ladder charge per state [A s]
    double q_lra67 = 0.0;                   ///< clamp-pair charge [A s]
    StateVector exit_state;                 ///< continuous states at the cycle end
};

double delta_at(const ModalCoefficients& mc, double tau) {
    const auto [ila, ilra] = inductor_currents(mc, tau);
    return ila - ilra;
}

/// Applies duration tau of `state` to the entry conditions.
StateVector advance(const ConverterConfig& cfg, OperationalState state,
                    const StateVector& entry, const ModalCoefficients& mc, double tau) {
    StateVector out = entry;
    const auto [ila, ilra] = inductor_currents(mc, tau);
    out.i_la = ila;
    out.i_lra = ilra;
    out.v_cra = clamp_node_voltage(mc, tau);
    const double qd = charge_integrals(mc, tau).q_delta();
    switch (state) {
    case OperationalState::s2:
    case OperationalState::s6:
        out.v_ca1 -= qd / cfg.c_a;
        out.v_ca2 -= qd / cfg.c_a;
        break;
    case OperationalState::s3:
    case OperationalState::s7:
        out.v_ca1 -= qd / cfg.c_a;
        break;
    case OperationalState::s4:
    case OperationalState::s5:
        out.v_cp += kCpSign * qd / cfg.c_p;
        break;
    default:
        break;
    }
    if (state == OperationalState::s6 || state == OperationalState::s7)
        out.v_cc = out.v_cra; // clamp capacitor tied to the switch node
    return out;
}

/// Entry fix-up when a state pins the inductors' common node: the parasitic
/// capacitor snaps to the pinned potential (its stored charge is negligible).
void pin_parasitic(OperationalState state, StateVector* entry) {
    double vx;
    if (pinned_common_node_voltage(state, *entry, &vx))
        entry->v_cp = entry->v_cout1 + entry->v_cout2 + entry->v_cout3 - vx;
}

/// Unknowns of the cycle map: cycle-origin currents and small-capacitor
/// voltages, the output-stack and clamp levels, and the final snubber
/// discharge duration. The stack is parameterized by its total plus the two
/// upper sections so the total can be solved while the split is held.
struct Unknowns {
    double i_la1, i_lra1, v_ca1, v_ca2, v_cout1, v_cout2, v_cout3, v_cc, t_f;

    static Unknowns from(const Eigen::VectorXd& y) {
        return {y[0], y[1], y[2], y[3], y[4] - y[5] - y[6],
                y[5], y[6], y[7], y[8]};
    }
};

/// Propagates one full period of the imposed conduction sequence and returns
/// the scaled residual vector of the periodicity and charge-balance
/// conditions. Throws ModeError when the sequence cannot be realized.
Eigen::VectorXd propagate(const ConverterConfig& cfg, const OperatingPoint& op,
                          const Eigen::VectorXd& y, CycleBook* book) {
    const Unknowns u = Unknowns::from(y);
    const double ts = cfg.period();
    const double t5 = op.duty_ma * ts;
    if (u.t_f < 0.0 || u.t_f > 0.45 * ts)
        throw ModeError("snubber discharge duration out of range");
    const double t8 = ts - u.t_f;
    if (t8 <= t5) throw ModeError("clamp interval collapsed");

    StateVector x;
    x.i_la = u.i_la1;
    x.i_lra = u.i_lra1;
    x.v_cra = 0.0;
    x.v_cc = u.v_cc;
    x.v_ca1 = u.v_ca1;
    x.v_ca2 = u.v_ca2;
    x.v_cout1 = u.v_cout1;
    x.v_cout2 = u.v_cout2;
    x.v_cout3 = u.v_cout3;

    CycleBook bk;
    const OperationalState* seq = all_states();
    double elapsed = 0.0;

    for (int k = 0; k < kNStates; ++k) {
        const OperationalState st = seq[k];
        pin_parasitic(st, &x);
        bk.entries[k] = x;
        const ModalCoefficients mc = state_coefficients(st, cfg, x);
        bk.coeffs[k] = mc;

        double dur = -1.0;
        switch (st) {
        case OperationalState::s1: {
            const double d0 = x.i_la - x.i_lra;
            if (d0 <= 0.0)
                throw ModeError("cycle origin requires the input current above "
                                "the resonant current");
            dur = first_crossing([&](double t) { return delta_at(mc, t); }, 0.0,
                                 t5 - elapsed, 96, d0);
            if (dur < 0.0)
                throw ModeError("first diode does not commutate within the main "
                                "on-interval");
            break;
        }
        case OperationalState::s2: {
            auto f = [&](double t) {
                return x.v_ca2 - charge_integrals(mc, t).q_delta() / cfg.c_a -
                       x.v_cout2;
            };
            const double f0 = f(0.0);
            if (f0 >= 0.0) {
                dur = 0.0; // multiplier handover already satisfied
                break;
            }
            dur = first_crossing(f, 0.0, t5 - elapsed, 96, f0);
            if (dur < 0.0)
                throw ModeError("multiplier handover voltage not reached within "
                                "the main on-interval");
            break;
        }
        case OperationalState::s3: {
            const double d0 = delta_at(mc, 0.0);
            dur = first_crossing([&](double t) { return delta_at(mc, t); }, 0.0,
                                 t5 - elapsed, 96, d0 < 0.0 ? d0 : -1e-12);
            if (dur < 0.0)
                throw ModeError("second diode does not commutate within the main "
                                "on-interval");
            break;
        }
        case OperationalState::s4:
            dur = t5 - elapsed;
            if (dur < 0.0) throw ModeError("main on-interval overrun");
            break;
        case OperationalState::s5: {
            auto f = [&](double t) { return clamp_node_voltage(mc, t) - u.v_cc; };
            dur = first_crossing(f, 0.0, t8 - elapsed, 512, f(0.0));
            if (dur < 0.0)
                throw ModeError("snubber cannot reach the clamp level");
            break;
        }
        case OperationalState::s6: {
            // the chain current rises from ~0 and must return to zero
            const double hi = t8 - elapsed;
            const int n = 256;
            double peak = 0.0, prev_t = 0.0, prev_f = delta_at(mc, 0.0);
            dur = -1.0;
            for (int j = 1; j <= n; ++j) {
                const double t = hi * j / n;
                const double ft = delta_at(mc, t);
                peak = std::max(peak, ft);
                if (peak > 1e-6 && ft <= 0.0) {
                    dur = bisect([&](double s) { return delta_at(mc, s); }, prev_t,
                                 t, prev_f);
                    break;
                }
                prev_t = t;
                prev_f = ft;
            }
            if (dur < 0.0)
                throw ModeError("multiplier chain conducts past the clamp "
                                "interval");
            break;
        }
        case OperationalState::s7:
            dur = t8 - elapsed;
            if (dur < 0.0) throw ModeError("clamp interval overrun");
            break;
        case OperationalState::s8:
            dur = u.t_f;
            break;
        }

        bk.d[k] = dur;
        bk.q_delta[k] = charge_integrals(mc, dur).q_delta();
        if (st == OperationalState::s6 || st == OperationalState::s7)
            bk.q_lra67 += charge_integrals(mc, dur).q_lra;
        x = advance(cfg, st, x, mc, dur);
        elapsed += dur;
    }
    bk.exit_state = x;

    // residual scaling
    const double i_sc = std::max(1.0, std::abs(u.i_la1));
    const double v_sc = 100.0;

    const double i_out = (u.v_cout1 + u.v_cout2 + u.v_cout3) / op.r_load;
    const double q_load = i_out * ts / cfg.n_legs;
    const double qn1 = bk.q_delta[0] + bk.q_delta[2] + bk.q_delta[7];
    const double qn2 = bk.q_delta[1] + bk.q_delta[6];
    const double qn3 = bk.q_delta[5] + bk.q_delta[3] + bk.q_delta[4];

    Eigen::VectorXd r(9);
    r[0] = (x.i_la - u.i_la1) / i_sc;
    r[1] = (x.i_lra - u.i_lra1) / i_sc;
    r[2] = (x.v_ca1 - u.v_ca1) / v_sc;
    r[3] = (x.v_ca2 - u.v_ca2) / v_sc;
    r[4] = x.v_cra / v_sc;
    r[5] = bk.q_lra67 / (ts * i_sc);
    r[6] = (qn3 - q_load) / (ts * i_sc);
    r[7] = (qn3 + qn2 - q_load) / (ts * i_sc);
    r[8] = (qn3 + qn2 + qn1 - q_load) / (ts * i_sc);

    if (book) *book = bk;
    return r;
}

Eigen::VectorXd initial_guess(const ConverterConfig& cfg, const OperatingPoint& op) {
    const double d = op.duty_ma;
    const double ts = cfg.period();
    const double v_cc = op.v_in / (1.0 - d);
    const double v_out = 0.93 * cfg.m_stages * op.v_in / (1.0 - d);
    const double i_out = v_out / op.r_load;
    const double i_la_avg = v_out * i_out / (op.v_in * cfg.n_legs);
    const double ripple = op.v_in * d * ts / cfg.l_a;
    const double slope1 =
        (v_out / 3.0) * (1.0 / cfg.l_a + 1.0 / cfg.l_ra) - op.v_in / cfg.l_a;
    double delta0 = std::sqrt(std::max(2.0 * slope1 * 0.3 * i_out * ts / cfg.n_legs,
                                       0.25));
    delta0 = std::clamp(delta0, 0.5, 30.0);
    const double dv1 = v_out / (cfg.f_s * cfg.c_a * op.r_load);

    Eigen::VectorXd y(9);
    y[0] = i_la_avg - 0.35 * ripple;   // i_la at the cycle origin
    y[1] = y[0] - delta0;              // i_lra
    y[2] = v_out / 3.0 - 0.5 * dv1;    // v_ca1
    y[3] = v_out / 3.0 - 0.25 * dv1;   // v_ca2
    y[4] = v_out;                      // stack total
    y[5] = v_out / 3.0;                // v_cout2
    y[6] = v_out / 3.0;                // v_cout3
    y[7] = v_cc;
    y[8] = 150e-9; // snubber discharge duration
    return y;
}

/// Levenberg-damped Gauss-Newton on a subset of the cycle unknowns and
/// residual rows. Returns the best scaled residual norm reached.
double newton_subset(const ConverterConfig& cfg, const OperatingPoint& op,
                     Eigen::VectorXd& y, const Eigen::VectorXd& scale,
                     const std::vector<int>& yi, const std::vector<int>& ri,
                     double tol, int max_iters, CycleBook* bk_out) {
    const bool trace = std::getenv("VMCLAMP_TRACE") != nullptr;
    const int nu = static_cast<int>(yi.size());
    const int nr = static_cast<int>(ri.size());

    auto eval = [&](const Eigen::VectorXd& yy, CycleBook* bk) {
        const Eigen::VectorXd full = propagate(cfg, op, yy, bk);
        Eigen::VectorXd sub(nr);
        for (int k = 0; k < nr; ++k) sub[k] = full[ri[k]];
        return sub;
    };

    CycleBook bk;
    Eigen::VectorXd r = eval(y, &bk);
    double rn = r.norm();

    for (int iter = 0; iter < max_iters && rn > tol; ++iter) {
        if (trace) {
            std::fprintf(stderr, "[ss] n=%d it=%d rn=%.3e y:", nu, iter, rn);
            for (int j = 0; j < 9; ++j) std::fprintf(stderr, " %.5g", y[j]);
            std::fprintf(stderr, "\n[ss]   r:");
            for (int k = 0; k < nr; ++k) std::fprintf(stderr, " %.2e", r[k]);
            std::fprintf(stderr, "  d:");
            for (int k = 0; k < kNStates; ++k)
                std::fprintf(stderr, " %.3e", bk.d[k]);
            std::fprintf(stderr, "\n");
        }
        Eigen::MatrixXd J(nr, nu);
        bool jac_ok = true;
        for (int j = 0; j < nu && jac_ok; ++j) {
            const double eps = 1e-7 * scale[yi[j]];
            Eigen::VectorXd y2 = y;
            y2[yi[j]] += eps;
            try {
                J.col(j) = (eval(y2, nullptr) - r) / eps;
            } catch (const ModeError&) {
                y2[yi[j]] = y[yi[j]] - eps;
                try {
                    J.col(j) = (r - eval(y2, nullptr)) / eps;
                } catch (const ModeError&) {
                    jac_ok = false;
                }
            }
        }
        if (!jac_ok) break;

        const Eigen::MatrixXd JtJ = J.transpose() * J;
        const Eigen::VectorXd Jtr = J.transpose() * r;
        const Eigen::VectorXd diag = JtJ.diagonal().cwiseMax(1e-30);

        bool accepted = false;
        for (double lambda : {0.0, 1e-6, 1e-3, 1e-1, 1e1, 1e3}) {
            Eigen::MatrixXd M = JtJ;
            M.diagonal() += lambda * diag;
            Eigen::VectorXd dy = M.ldlt().solve(-Jtr);
            // trust region: per-component step limits (amps / volts / seconds)
            static const double kTrust[9] = {8.0, 8.0, 40.0, 40.0, 100.0,
                                             40.0, 40.0, 40.0, 6e-8};
            double shrink = 1.0;
            for (int j = 0; j < nu; ++j)
                shrink = std::min(shrink, kTrust[yi[j]] / std::abs(dy[j]));
            dy *= shrink;
            double step = 1.0;
            for (int ls = 0; ls < 10 && !accepted; ++ls, step *= 0.5) {
                Eigen::VectorXd yc = y;
                for (int j = 0; j < nu; ++j) yc[yi[j]] += step * dy[j];
                try {
                    CycleBook bk2;
                    const Eigen::VectorXd rc = eval(yc, &bk2);
                    if (rc.norm() < rn * (1.0 - 1e-4 * step) || rc.norm() < tol) {
                        y = yc;
                        r = rc;
                        rn = rc.norm();
                        bk = bk2;
                        accepted = true;
                    }
                } catch (const ModeError&) {
                    // shorten until the sequence is realizable
                }
            }
            if (accepted) break;
        }
        if (!accepted) break;
    }
    if (bk_out) *bk_out = bk;
    return rn;
}

} // namespace

double IntervalDurations::sum() const {
    double s = 0.0;
    for (double v : d) s += v;
    return s;
}

IntervalDurations interval_durations(const ConverterConfig& cfg, const OperatingPoint& op,
                                     const StateVector& entry, double v_cc) {
    Eigen::VectorXd y(9);
    y << entry.i_la, entry.i_lra, entry.v_ca1, entry.v_ca2,
        entry.v_cout1 + entry.v_cout2 + entry.v_cout3, entry.v_cout2,
        entry.v_cout3, v_cc, 0.2 * cfg.dead_time;
    // the final discharge duration is defined by the snubber zero; solve the
    // one-dimensional condition with the rest of the cycle fixed
    CycleBook bk;
    auto vcra_end = [&](double tf) {
        y[8] = tf;
        propagate(cfg, op, y, &bk);
        return bk.exit_state.v_cra;
    };
    const double f0 = vcra_end(1e-12);
    double tf = first_crossing(vcra_end, 1e-12, 0.45 * cfg.period(), 256, f0);
    if (tf < 0.0) throw ModeError("snubber does not discharge after clamp turn-off");
    vcra_end(tf);
    IntervalDurations out;
    out.d = bk.d;
    out.T_s = cfg.period();
    return out;
}

SteadyStateSolution solve_steady_state(const ConverterConfig& cfg, const OperatingPoint& op,
                                       const SteadyStateOptions& opts) {
    cfg.validate();
    if (cfg.m_stages != 3)
        throw ModeError("the closed-form cycle model covers three-stage builds");
    if (op.duty_ma <= 0.0 || op.duty_ma >= 1.0)
        throw ConfigError("duty cycle must lie in (0,1)");

    Eigen::VectorXd y = initial_guess(cfg, op);
    Eigen::VectorXd scale(9);
    scale << 1, 1, 100, 100, 300, 100, 100, 100, 1e-7;

    CycleBook bk;
    Eigen::VectorXd r;
    double rn = std::numeric_limits<double>::infinity();

    // the cold guess may violate the sequence; nudge it until it propagates
    const double trial_scales[] = {1.0, 0.85, 1.2, 0.7, 1.4};
    std::string first_err;
    for (double s : trial_scales) {
        Eigen::VectorXd yt = y;
        for (int j = 0; j < 7; ++j) yt[j] *= s;
        try {
            r = propagate(cfg, op, yt, &bk);
            y = yt;
            rn = r.norm();
            break;
        } catch (const ModeError& e) {
            if (first_err.empty()) first_err = e.what();
        }
    }
    if (!std::isfinite(rn))
        throw ModeError("no realizable cycle near the initial guess: " + first_err);

    // Stage 1: fast subcycle (currents, multiplier caps, clamp level,
    // discharge time) plus the stack total, holding the stack split. The
    // total must move with the fast unknowns: the input inductor's
    // volt-second closure fixes it.
    const std::vector<int> fast_y{0, 1, 2, 3, 4, 7, 8};
    const std::vector<int> fast_r{0, 1, 2, 3, 4, 5, 8};
    newton_subset(cfg, op, y, scale, fast_y, fast_r, 1e-9, 60, &bk);

    // Stage 2: full system.
    std::vector<int> all_i{0, 1, 2, 3, 4, 5, 6, 7, 8};
    double rn_full = newton_subset(cfg, op, y, scale, all_i, all_i, opts.tol,
                                   opts.max_iterations, &bk);
    rn = rn_full;
    if (rn > opts.tol)
        throw ConvergenceError("periodic cycle solve stalled at scaled residual " +
                                   std::to_string(rn),
                               rn);

    SteadyStateSolution sol;
    sol.cfg = cfg;
    sol.op = op;
    sol.boundary = bk.entries[0];
    sol.durations.d = bk.d;
    sol.durations.T_s = cfg.period();
    sol.entries = bk.entries;
    sol.coeffs = bk.coeffs;
    sol.ladder_charge = bk.q_delta;
    sol.duty_mca = (bk.d[5] + bk.d[6]) / cfg.period();
    sol.v_cc = y[7];
    sol.v_out = y[4];
    sol.i_out = sol.v_out / op.r_load;
    sol.residual = rn;
    sol.iterations = opts.max_iterations;

    const ClampVoltageReport cv = clamp_voltage(sol);
    sol.v_cc_max = cv.v_cc_max;
    sol.t_x = cv.t_x;
    return sol;
}

ClampVoltageReport clamp_voltage(const SteadyStateSolution& sol) {
    const ConverterConfig& cfg = sol.cfg;
    const auto& d = sol.durations.d;
    const double ts = sol.durations.T_s;

    // snubber voltage-time area of the charge transition (entry level zero)
    const double area5 = resonant_charge_area(sol.coeffs[4], d[4]) / cfg.c_ra;
    // discharge transition: area relative to its entry level
    const double area8 = resonant_charge_area(sol.coeffs[7], d[7]) / cfg.c_ra;

    ClampVoltageReport out;
    out.ideal = sol.op.v_in / (1.0 - sol.op.duty_ma);

    double extra = 0.0;
    if (false) {
        // placeholder; full-average variant computed below when requested
    }
    // period average of the snubber voltage must equal the input voltage;
    // treat the clamp interval as flat at v_cc (its ripple is second order)
    const double hold = d[5] + d[6] + d[7];
    out.v_cc = (sol.op.v_in * ts - area5 - area8 - extra) / hold;

    // clamp peak: the pair keeps charging until the resonant current crosses zero
    const ModalCoefficients& mc6 = sol.coeffs[5];
    auto f = [&](double t) { return inductor_currents(mc6, t).second; };
    const double tx = first_crossing(f, 0.0, d[5], 128, f(0.0));
    out.t_x = tx >= 0.0 ? tx : d[5];
    out.v_cc_max = clamp_node_voltage(mc6, out.t_x);
    return out;
}

StateVector SteadyStateSolution::at(double t) const {
    const auto [k, tau] = locate(t);
    const OperationalState st = all_states()[k];
    StateVector x = advance(cfg, st, entries[k], coeffs[k], tau);
    // potentials pinned by the conducting path refresh continuously
    StateVector probe = x;
    double vx;
    if (pinned_common_node_voltage(st, probe, &vx))
        x.v_cp = x.v_cout1 + x.v_cout2 + x.v_cout3 - vx;
    return x;
}

std::pair<int, double> SteadyStateSolution::locate(double t) const {
    double rem = std::fmod(t, durations.T_s);
    if (rem < 0.0) rem += durations.T_s;
    for (int k = 0; k < kNStates; ++k) {
        if (rem <= durations.d[k] || k == kNStates - 1) return {k, rem};
        rem -= durations.d[k];
    }
    return {kNStates - 1, rem};
}

} // namespace vmclamp
