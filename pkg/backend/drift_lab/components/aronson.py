"""
Aronson-type upper envelope for the fundamental solution with supercritical
divergence-free drift: parameter arithmetic, formula evaluation, constant
fitting against computed kernel slices, and envelope tail integrals.
"""

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special
from sklearn.linear_model import LinearRegression

from ..core.errors import ValidationError
from ..core.grid import VectorField, displacement_from
from .field_toolkit import lebesgue_norm
from .kernel_lab import KernelSlice

logger = logging.getLogger(__name__)

REGIME_REFERENCES = ("position", "displacement")
NOISE_FLOOR = 1e-14
VIOLATION_FACTOR = 1.05
RESOLUTION_FACTOR = 100.0

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class AronsonParams:
    """Exponents and constants of the envelope; l = inf and q = inf are allowed"""

    l: float
    q: float
    n: int
    lam: float
    Lambda: float
    gamma: float
    mu: float
    nu: float
    mu_one: bool
    C1: float = 1.0
    C2: float = 4.0

    def with_constants(self, C1: float, C2: float) -> "AronsonParams":
        if not (C1 > 0 and C2 > 0):
            raise ValidationError(f"envelope constants must be positive, got C1={C1}, C2={C2}")
        return replace(self, C1=float(C1), C2=float(C2))


def aronson_params(l: float, q: float, n: int, lam: float, Lambda: float,
                   C1: float = 1.0, C2: float = 4.0) -> AronsonParams:
    """
    gamma = 2/l + n/q, mu = 2/(2 - gamma + 2/l), nu = (2 - gamma)/(2 - gamma + 2/l).

    Requires 1 <= gamma < 2, l > 1 (or inf) and q > n/2. q = inf selects mu = 1.
    """
    if not (l == math.inf or l > 1):
        raise ValidationError(f"time integrability l must exceed 1 (or be inf), got {l}")
    if not (q == math.inf or q > n / 2):
        raise ValidationError(f"space integrability q must exceed n/2 = {n / 2}, got {q}")
    two_over_l = 0.0 if l == math.inf else 2.0 / l
    n_over_q = 0.0 if q == math.inf else n / q
    gamma = two_over_l + n_over_q
    if not 1.0 <= gamma < 2.0:
        raise ValidationError(
            f"2/l + n/q = {gamma:g} violates the hypothesis 1 <= 2/l + n/q < 2 (l={l}, q={q}, n={n})"
        )
    denominator = 2.0 - gamma + two_over_l
    mu = 2.0 / denominator
    nu = (2.0 - gamma) / denominator
    return AronsonParams(l=l, q=q, n=n, lam=lam, Lambda=Lambda, gamma=gamma, mu=mu, nu=nu,
                         mu_one=(q == math.inf), C1=C1, C2=C2)


def mixed_norm(b: VectorField, l: float, q: float, T: float) -> float:
    """||b||_{L^l(0,T; L^q)} for a time-independent field: T^{1/l} ||b||_q"""
    norm = lebesgue_norm(b, q)
    return norm if l == math.inf else T ** (1.0 / l) * norm


def _far_exponent(p: AronsonParams, d: ArrayLike, s: float) -> ArrayLike:
    return (d ** p.mu / s ** p.nu) ** (1.0 / (p.mu - 1.0))


def exponent_feature(p: AronsonParams, t: float, tau: float, d: ArrayLike, r_regime: ArrayLike,
                     regime_time: Optional[float] = None) -> ArrayLike:
    """
    phi with envelope = C1 s^{-n/2} exp(-phi / C2) for mu > 1, s = t - tau.

    The regime quantity is r_regime^{mu-2} / T_r^{mu-nu-1}, with T_r = t unless
    regime_time is given; values < 1 select the Gaussian branch d^2/s.
    """
    s = t - tau
    t_r = t if regime_time is None else regime_time
    with np.errstate(divide="ignore", invalid="ignore"):
        regime = np.power(np.asarray(r_regime, dtype=float), p.mu - 2.0) / t_r ** (p.mu - p.nu - 1.0)
    near = np.asarray(regime < 1.0)
    d = np.asarray(d, dtype=float)
    return np.where(near, d ** 2 / s, _far_exponent(p, d, s))


def aronson_envelope(
    p: AronsonParams,
    t: float,
    tau: float,
    x: np.ndarray,
    xi: np.ndarray,
    regime_reference: str = "position",
) -> ArrayLike:
    """
    Evaluate the upper envelope at points x (shape (n,) or (n, ...)) for source xi.

    For mu > 1 the near (Gaussian) and far branches switch on
    |x|^{mu-2} / t^{mu-nu-1} < 1 with regime_reference="position", where x is
    measured from the origin the caller chose (the box center on grids), or on
    |x - xi|^{mu-2} / (t - tau)^{mu-nu-1} with "displacement". For mu = 1 the
    bound is C1 s^{-n/2} exp(-(C1 Lambda s^nu - |x - xi|)^2 / (4 C1 s)).
    """
    if not t > tau:
        raise ValidationError(f"envelope needs t > tau, got t={t}, tau={tau}")
    if regime_reference not in REGIME_REFERENCES:
        raise ValidationError(f"unknown regime reference '{regime_reference}'")
    s = t - tau
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float).reshape((p.n,) + (1,) * (x.ndim - 1))
    d = np.sqrt(np.sum((x - xi) ** 2, axis=0))
    prefactor = p.C1 / s ** (p.n / 2.0)
    if p.mu_one:
        return prefactor * np.exp(-(p.C1 * p.Lambda * s ** p.nu - d) ** 2 / (4.0 * p.C1 * s))
    if regime_reference == "position":
        feature = exponent_feature(p, t, tau, d, np.sqrt(np.sum(x ** 2, axis=0)))
    else:
        feature = exponent_feature(p, t, tau, d, d, regime_time=s)
    return prefactor * np.exp(-feature / p.C2)


def envelope_tail_mass(p: AronsonParams, t: float, R: float, tau: float = 0.0) -> float:
    """
    Integral of the envelope over |x - xi| > R in R^n, with the regime measured
    by displacement. Tends to 0 as R grows.
    """
    if not t > tau:
        raise ValidationError(f"envelope needs t > tau, got t={t}, tau={tau}")
    s = t - tau
    sphere = 2.0 * math.pi ** (p.n / 2.0) / special.gamma(p.n / 2.0)

    def radial(d: float) -> float:
        if p.mu_one:
            value = p.C1 / s ** (p.n / 2.0) * math.exp(-(p.C1 * p.Lambda * s ** p.nu - d) ** 2 / (4.0 * p.C1 * s))
        else:
            feature = float(exponent_feature(p, t, tau, d, d, regime_time=s))
            value = p.C1 / s ** (p.n / 2.0) * math.exp(-feature / p.C2)
        return sphere * d ** (p.n - 1) * value

    value, _ = integrate.quad(radial, R, np.inf, limit=200)
    return float(value)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def resolution_floor(s: KernelSlice) -> float:
    """
    Values at or below this are not trusted: 1e-14 of the peak, or 100 times the
    deepest undershoot, which measures the slice's ringing level.
    """
    undershoot = max(0.0, -float(s.values.values.min()))
    return max(NOISE_FLOOR * s.peak, RESOLUTION_FACTOR * undershoot)


@dataclass
class _FitPoints:
    """One slice's trusted points: y = log Gamma + (n/2) log t and the features of every periodic image"""

    t: float
    y: np.ndarray
    phi: np.ndarray
    image_phi: np.ndarray
    center_y: float
    center_image_phi: np.ndarray


def _image_features(p: AronsonParams, t: float, disp: np.ndarray, pos: np.ndarray,
                    regime_reference: str, box_length: float) -> np.ndarray:
    """Exponent features of x - y + L m for m in {-1, 0, 1}^n, shape (3^n, points)"""
    features = []
    for shift in itertools.product((-1.0, 0.0, 1.0), repeat=p.n):
        d = np.sqrt(np.sum((disp + box_length * np.reshape(shift, (-1, 1))) ** 2, axis=0))
        features.append(exponent_feature(p, t, 0.0, d, d if regime_reference == "displacement" else pos))
    return np.asarray(features, dtype=float)


def _fit_points(s: KernelSlice, p: AronsonParams, regime_reference: str) -> _FitPoints:
    grid, values = s.grid, s.values.values
    mask = values > resolution_floor(s)
    if np.count_nonzero(mask) < 2:
        raise ValidationError(f"kernel slice at t={s.t} has no trusted points above its ringing level")
    disp = displacement_from(grid, s.source_point)[:, mask]
    pos = np.sqrt(np.sum(displacement_from(grid)[:, mask] ** 2, axis=0))
    d = np.sqrt(np.sum(disp ** 2, axis=0))
    phi = np.asarray(exponent_feature(p, s.t, 0.0, d, d if regime_reference == "displacement" else pos), dtype=float)
    source_pos = np.sqrt(np.sum(displacement_from(grid, grid.center)[(slice(None),) + s.source] ** 2))
    center_value = float(values[s.source])
    log_t = 0.5 * p.n * math.log(s.t)
    return _FitPoints(
        t=s.t,
        y=np.log(values[mask]) + log_t,
        phi=phi,
        image_phi=_image_features(p, s.t, disp, pos, regime_reference, grid.box_length),
        center_y=math.log(center_value) + log_t if center_value > 0 else -np.inf,
        center_image_phi=_image_features(p, s.t, np.zeros((p.n, 1)), np.array([source_pos]),
                                         regime_reference, grid.box_length)[:, 0],
    )


def _least_squares(points: Sequence[_FitPoints]) -> Tuple[float, float]:
    """(C1, C2) from y = log C1 - phi / C2 over the central image"""
    y = np.concatenate([pts.y for pts in points])
    phi = np.concatenate([pts.phi for pts in points])
    model = LinearRegression().fit(-phi.reshape(-1, 1), y)
    slope = float(model.coef_[0])
    return float(np.exp(model.intercept_)), (1.0 / slope if slope > 0 else math.inf)


def _log_shape(image_phi: np.ndarray, C2: float) -> np.ndarray:
    """log sum_m exp(-phi_m / C2), the periodized envelope without C1 s^{-n/2}"""
    if not np.isfinite(C2):
        return np.zeros(image_phi.shape[1:])
    return special.logsumexp(-image_phi / C2, axis=0)


def _dominating_log_c1(points: Sequence[_FitPoints], C1_fit: float, C2: float) -> float:
    """Smallest log C1 >= log C1_fit whose periodized envelope lies above every point"""
    return max(math.log(C1_fit), max(float(np.max(pts.y - _log_shape(pts.image_phi, C2))) for pts in points))


def near_field_exponent(s: KernelSlice, level: float = 1e-4) -> float:
    """
    Slope of log(log Gamma(y) - log Gamma) against log d over distance shells of
    width h with shell-mean Gamma above level * peak; about 2 for Gaussian decay.
    """
    values = s.values.values
    grid = s.grid
    d = np.sqrt(np.sum(displacement_from(grid, s.source_point) ** 2, axis=0))
    center_value = float(values[s.source])
    if center_value <= 0:
        return float("nan")
    shells = np.rint(d / grid.h).astype(int)
    log_d, log_gap = [], []
    for k in range(1, int(shells.max()) + 1):
        members = values[shells == k]
        if members.size == 0:
            continue
        mean = float(members.mean())
        if mean < level * center_value:
            break
        gap = math.log(center_value) - math.log(mean)
        if gap > 0:
            log_d.append(math.log(float(d[shells == k].mean())))
            log_gap.append(math.log(gap))
    if len(log_d) < 3:
        return float("nan")
    model = LinearRegression().fit(np.array(log_d).reshape(-1, 1), np.array(log_gap))
    return float(model.coef_[0])


def envelope_fit(
    slices: Sequence[KernelSlice],
    p: AronsonParams,
    regime_reference: str = "displacement",
    violation_factor: float = VIOLATION_FACTOR,
) -> Dict[str, object]:
    """
    Fit (log C1, 1/C2) by least squares on log Gamma + (n/2) log t = log C1 - phi / C2
    over each slice's trusted points (see resolution_floor).

    Violations are counted out of sample: every slice is checked against the
    envelope whose constants come from the other slices alone (least-squares C2,
    C1 raised until that envelope dominates those slices). On the torus the
    envelope is summed over the 3^n nearest periodic images of the source.

    Returns:
        Dict with C1_fit, C2_fit (least squares), C1 (dominating all slices), C2,
        violations (held-out points above violation_factor x envelope), violations_fit
        (points above the least-squares envelope), near_exponent (smallest t),
        per_slice rows
    """
    if len(slices) < 3:
        raise ValidationError(f"envelope fit needs at least 3 slices, got {len(slices)}")
    if len({s.t for s in slices}) < 3:
        raise ValidationError("envelope fit needs slices at 3 distinct times")
    if any(s.peak <= 0 for s in slices):
        raise ValidationError("envelope fit received an all-zero kernel slice")
    if p.mu_one:
        raise ValidationError("the mu = 1 envelope has no (C1, C2) regression form; evaluate it directly")
    if regime_reference not in REGIME_REFERENCES:
        raise ValidationError(f"unknown regime reference '{regime_reference}'")

    points = [_fit_points(s, p, regime_reference) for s in slices]
    C1_fit, C2_fit = _least_squares(points)
    C1 = math.exp(_dominating_log_c1(points, C1_fit, C2_fit))
    threshold = math.log(violation_factor)
    violations_fit = sum(
        int(np.sum(pts.y - math.log(C1_fit) - _log_shape(pts.image_phi, C2_fit) > threshold)) for pts in points
    )

    per_slice = []
    for idx, (s, pts) in enumerate(zip(slices, points)):
        others = points[:idx] + points[idx + 1:]
        c1_other, c2_other = _least_squares(others)
        log_c1 = _dominating_log_c1(others, c1_other, c2_other)
        excess = pts.y - log_c1 - _log_shape(pts.image_phi, c2_other)
        center_excess = pts.center_y - log_c1 - float(_log_shape(pts.center_image_phi[:, None], c2_other)[0])
        per_slice.append({
            "t": s.t,
            "mass": s.mass,
            "peak": s.peak,
            "points": int(pts.y.size),
            "C1_held_out": math.exp(log_c1),
            "C2_held_out": c2_other,
            "violations": int(np.sum(excess > threshold)),
            "near_exponent": near_field_exponent(s),
            "on_diagonal_scaled": float(s.values.values[s.source]) * s.t ** (p.n / 2.0),
            "on_diagonal_ok": bool(center_excess <= threshold),
        })
    violations = sum(row["violations"] for row in per_slice)
    earliest = min(range(len(slices)), key=lambda i: slices[i].t)
    result = {
        "C1_fit": C1_fit,
        "C2_fit": C2_fit,
        "C1": C1,
        "C2": C2_fit,
        "violations": violations,
        "violations_fit": violations_fit,
        "on_diagonal_ok": all(row["on_diagonal_ok"] for row in per_slice),
        "near_exponent": per_slice[earliest]["near_exponent"],
        "points": sum(row["points"] for row in per_slice),
        "per_slice": per_slice,
    }
    logger.info(f"envelope fit: C1={C1:.4g} (lsq {C1_fit:.4g}), C2={C2_fit:.4g}, "
                f"held-out violations={violations}, least-squares violations={violations_fit}")
    return result


def constants_spread(fits: List[Dict[str, object]]) -> Dict[str, float]:
    """Relative spread (max/min - 1) of the dominating constants over a family of fits"""
    c1 = np.array([float(f["C1"]) for f in fits])
    c2 = np.array([float(f["C2"]) for f in fits])
    return {"C1_spread": float(c1.max() / c1.min() - 1.0), "C2_spread": float(c2.max() / c2.min() - 1.0)}
