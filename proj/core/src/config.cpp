#include "vmclamp/config.hpp"

#include <cmath>
#include <numbers>

namespace vmclamp {

namespace {
void require_positive(double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        throw ConfigError(std::string(name) + " must be strictly positive");
    }
}
} // namespace

void ConverterConfig::validate() const {
    if (m_stages < 2) throw ConfigError("m_stages must be >= 2");
    if (n_legs < 1) throw ConfigError("n_legs must be >= 1");
    require_positive(v_in, "v_in");
    require_positive(l_a, "l_a");
    require_positive(l_ra, "l_ra");
    require_positive(c_ra, "c_ra");
    require_positive(c_c, "c_c");
    require_positive(c_a, "c_a");
    require_positive(c_out, "c_out");
    require_positive(c_p, "c_p");
    require_positive(r_load, "r_load");
    require_positive(f_s, "f_s");
    require_positive(dead_time, "dead_time");
    if (diode_drop < 0.0 || !std::isfinite(diode_drop)) {
        throw ConfigError("diode_drop must be >= 0");
    }
    // Snubber << clamp << output capacitor ordering underpins the modal model.
    if (!(c_ra < c_c && c_c < c_out)) {
        throw ConfigError("capacitor ordering violated: require c_ra < c_c < c_out");
    }
}

NormalizedParams normalize(const ConverterConfig& cfg) {
    cfg.validate();
    NormalizedParams p{};
    p.omega_r = 1.0 / std::sqrt(cfg.l_ra * cfg.c_ra);
    p.z_r = std::sqrt(cfg.l_ra / cfg.c_ra);
    p.f_r = p.omega_r / (2.0 * std::numbers::pi);
    p.lambda_l = cfg.l_ra / cfg.l_a;
    p.lambda_c = 1.0 / (1.0 + cfg.c_ra / cfg.c_c);
    p.f_n = cfg.f_s / p.f_r;
    p.r_n = cfg.r_load / p.z_r;
    return p;
}

OperatingPoint OperatingPoint::from_config(const ConverterConfig& cfg, double duty) {
    if (!(duty > 0.0 && duty < 1.0)) {
        throw ConfigError("duty must lie in (0,1)");
    }
    return OperatingPoint{duty, cfg.v_in, cfg.r_load,
                          2.0 * std::numbers::pi / static_cast<double>(cfg.n_legs)};
}

} // namespace vmclamp
