#include "twfm/asymptotics.hpp"

#include <boost/math/distributions/normal.hpp>

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace twfm {

namespace {

bool near_one(double ratio) {
  return std::abs(ratio - 1.0) < tolerance::kNearDegenerate;
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && e[-1] == ' ') --e;
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) {
    throw InputError("cannot parse number '" + s + "'");
  }
  return v;
}

}  // namespace

AsymptoticVariances limiting_variances(const ModelParams& params, double y) {
  params.check_shapes();
  if (!(y > 0.0) || !std::isfinite(y)) throw ValidationError("y must be positive");
  const auto& d = params.dims;
  const double s2 = params.sigma2;
  if (!(s2 > 0.0)) throw ValidationError("sigma2 must be positive");
  AsymptoticVariances out;
  out.y = y;
  out.sigmaL.resize(d.r);
  out.sigmaLambda.resize(d.c);
  for (Index j = 0; j < d.r; ++j) {
    const double f = params.psiF(j);
    double v = s2 / f;
    for (Index i = 0; i < d.c; ++i) {
      const double e = params.psiE(i);
      if (f == e) {
        throw ValidationError("row and column variances coincide; loading variance diverges");
      }
      v += s2 * e * (y * e + f) / ((f - e) * (f - e));
    }
    out.sigmaL(j) = v;
  }
  for (Index i = 0; i < d.c; ++i) {
    const double e = params.psiE(i);
    double v = s2 / e;
    for (Index j = 0; j < d.r; ++j) {
      const double f = params.psiF(j);
      if (f == e) {
        throw ValidationError("row and column variances coincide; loading variance diverges");
      }
      v += s2 * f * (f + y * e) / (y * (e - f) * (e - f));
    }
    out.sigmaLambda(i) = v;
  }
  out.varPsiF = 2.0 * params.psiF.array().square();
  out.varPsiE = 2.0 * params.psiE.array().square();
  out.varSigma2 = 2.0 * s2 * s2;
  return out;
}

double scalar_loading_variance(double sigma2, double sigmaF2, double y,
                               double delta) {
  if (delta == 1.0) return std::numeric_limits<double>::infinity();
  const double gap = delta - 1.0;
  return sigma2 * (1.0 / sigmaF2 + (y + delta) / (gap * gap));
}

std::vector<CurvePoint> variance_curve(double sigma2, double sigmaF2, double y,
                                       const std::vector<double>& delta_grid) {
  if (!(sigma2 > 0.0) || !(sigmaF2 > 0.0) || !(y > 0.0)) {
    throw ValidationError("variance_curve needs positive sigma2, sigmaF2 and y");
  }
  std::vector<CurvePoint> out;
  out.reserve(delta_grid.size());
  for (double delta : delta_grid) {
    CurvePoint pt;
    pt.delta = delta;
    pt.valid = delta != 1.0 && delta >= 0.0;
    pt.value = pt.valid ? scalar_loading_variance(sigma2, sigmaF2, y, delta)
                        : std::numeric_limits<double>::infinity();
    out.push_back(pt);
  }
  return out;
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<std::string> parts;
  const char sep = spec.find(':') != std::string::npos ? ':' : ',';
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  std::vector<double> out;
  if (sep == ',') {
    for (const auto& p : parts) out.push_back(parse_double(p));
    return out;
  }
  if (parts.size() != 3) throw InputError("grid must be start:stop:step");
  const double a = parse_double(parts[0]);
  const double b = parse_double(parts[1]);
  const double h = parse_double(parts[2]);
  if (!(h > 0.0) || b < a) throw InputError("grid needs step > 0 and stop >= start");
  const auto n = static_cast<long>(std::floor((b - a) / h + 1e-9));
  for (long k = 0; k <= n; ++k) out.push_back(a + static_cast<double>(k) * h);
  return out;
}

double corrected_sigma2(double sigma2_hat, const Dims& dims) {
  if (dims.p <= 0 || dims.q <= 0) throw DimensionError("p and q must be positive");
  return (1.0 + static_cast<double>(dims.c) / static_cast<double>(dims.p) +
          static_cast<double>(dims.r) / static_cast<double>(dims.q)) *
         sigma2_hat;
}

LoadingIntervals loading_ci(const ModelParams& theta_hat, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("level must be in (0, 1)");
  theta_hat.check_shapes();
  const auto& d = theta_hat.dims;
  const double p = static_cast<double>(d.p);
  const double q = static_cast<double>(d.q);
  LoadingIntervals out;
  out.level = level;
  out.z = boost::math::quantile(boost::math::normal(), 0.5 + 0.5 * level);
  out.L_reliable.assign(static_cast<std::size_t>(d.r), true);
  out.Lambda_reliable.assign(static_cast<std::size_t>(d.c), true);
  for (Index j = 0; j < d.r; ++j) {
    for (Index i = 0; i < d.c; ++i) {
      if (near_one(theta_hat.psiF(j) / theta_hat.psiE(i))) {
        out.L_reliable[static_cast<std::size_t>(j)] = false;
        out.Lambda_reliable[static_cast<std::size_t>(i)] = false;
      }
    }
  }
  out.half_width_L = VectorXd::Constant(d.r, std::numeric_limits<double>::infinity());
  out.half_width_Lambda = VectorXd::Constant(d.c, std::numeric_limits<double>::infinity());
  try {
    const AsymptoticVariances v = limiting_variances(theta_hat, p / q);
    out.half_width_L = out.z * (v.sigmaL / p).array().sqrt();
    out.half_width_Lambda = out.z * (v.sigmaLambda / q).array().sqrt();
  } catch (const ValidationError&) {
    // Coinciding variances: intervals stay infinite and flagged.
  }
  out.L_lower = theta_hat.L.rowwise() - out.half_width_L.transpose();
  out.L_upper = theta_hat.L.rowwise() + out.half_width_L.transpose();
  out.Lambda_lower = theta_hat.Lambda.rowwise() - out.half_width_Lambda.transpose();
  out.Lambda_upper = theta_hat.Lambda.rowwise() + out.half_width_Lambda.transpose();
  return out;
}

}  // namespace twfm
