"""
Named studies run by the experiment harness.

Each study takes the shared LabContext, drives the component modules and
returns a StudyOutcome: one table (written to <output>/<study>.csv) plus a
pass flag judged against the config's thresholds.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .components.aronson import (
    AronsonParams,
    aronson_envelope,
    aronson_params,
    constants_spread,
    envelope_fit,
    envelope_tail_mass,
    exponent_feature,
    mixed_norm,
    near_field_exponent,
    resolution_floor,
)
from .components.field_toolkit import (
    certify,
    cellular_vortex,
    mollification_ladder,
    singular_vortex,
    zero_field,
)
from .components.kernel_lab import (
    KernelSlice,
    chapman_kolmogorov_residual,
    conservativeness_check,
    duhamel_residual,
    estimate_kernel,
    kernel_limit_stability,
    markov_property_check,
    on_diagonal_profile,
)
from .components.pde_core import (
    DiffusionCoefficient,
    DiscreteOperator,
    TestFunction,
    assemble,
    energy_residual,
    evolve,
    l2_contraction_ratio,
    mass_drift,
    step_count,
    weak_form_residual,
)
from .components.resolvent_lab import (
    LogWeight,
    energy_inequality_margin,
    first_resolvent_identity_residual,
    log_weighted_ratio,
    resolve,
    resolvent_bounds,
    resolvent_convergence,
    resolvent_identity_residual,
    tail_mass,
    uniqueness_gap,
    weight_gradient_bound_check,
)
from .components.taylor_mc import McConfig, exit_consistency, simulate, tv_distance
from .core.config import ExperimentConfig, default_workers
from .core.dfsl import load_vector
from .core.errors import ConfigError
from .core.grid import (
    GridSpec,
    ScalarField,
    VectorField,
    center_index,
    displacement_from,
    distance_from,
    gaussian_bump,
    l1_norm,
    l2_norm,
    node_point,
    random_field,
)

logger = logging.getLogger(__name__)

BUMP_WIDTH = 0.5
DEGENERATE_FLOOR = 1e-6


@dataclass
class StudyOutcome:
    name: str
    table: pd.DataFrame
    passed: bool
    detail: str = ""
    skipped: bool = False
    runtime: float = 0.0


# ---------------------------------------------------------------------------
# Building coefficients from a config
# ---------------------------------------------------------------------------

def build_field(cfg: ExperimentConfig, grid: Optional[GridSpec] = None) -> VectorField:
    """The config's target drift, certified divergence-free"""
    grid = cfg.grid_spec if grid is None else grid
    spec = cfg.field
    if spec.kind == "zero":
        return zero_field(grid)
    if spec.kind == "cellular":
        return cellular_vortex(grid, amplitude=spec.amplitude, mode=spec.mode)
    if spec.kind == "singular":
        return singular_vortex(grid, spec.s, spec.core_radius, target_q=spec.target_q,
                               amplitude=spec.amplitude, support_radius=spec.support_radius)
    b = certify(load_vector(spec.path))
    if b.grid != grid:
        raise ConfigError(f"field file {spec.path} lives on {b.grid}, config grid is {grid}")
    if not b.div_free_certified:
        raise ConfigError(f"field file {spec.path} is not divergence-free (max|div b| = {b.max_divergence:.3e})")
    return b


def build_diffusion(cfg: ExperimentConfig, grid: Optional[GridSpec] = None) -> DiffusionCoefficient:
    grid = cfg.grid_spec if grid is None else grid
    spec = cfg.diffusion
    if spec.kind == "identity":
        return DiffusionCoefficient.identity(grid)
    if spec.kind == "constant":
        return DiffusionCoefficient.constant(grid, spec.matrix)
    if spec.kind == "cosine":
        return DiffusionCoefficient.diagonal_cosine(grid, spec.amplitude)
    a = DiffusionCoefficient.from_dfsl(spec.path)
    if a.grid != grid:
        raise ConfigError(f"diffusion file {spec.path} lives on {a.grid}, config grid is {grid}")
    return a


@dataclass
class LabContext:
    """Everything the studies share: coefficients, operators and the source node"""

    config: ExperimentConfig
    grid: GridSpec
    a: DiffusionCoefficient
    b: VectorField
    op: DiscreteOperator
    ladder: List[Tuple[float, VectorField]]
    family: List[DiscreteOperator]
    source: Tuple[int, ...]
    workers: int = 1
    _cache: Dict[str, object] = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, workers: Optional[int] = None) -> "LabContext":
        grid = cfg.grid_spec
        a = build_diffusion(cfg, grid)
        b = build_field(cfg, grid)
        mode = cfg.diffusion.mode
        ladder = mollification_ladder(b, cfg.ladder.epsilon0, cfg.ladder.halvings)
        offset = np.asarray(cfg.studies.source_offset or [0.0] * grid.n, dtype=float)
        source = tuple(int(i) for i in (np.asarray(center_index(grid)) + np.rint(offset / grid.h).astype(int))
                       % grid.points_per_axis)
        return cls(
            config=cfg,
            grid=grid,
            a=a,
            b=b,
            op=assemble(a, b, mode),
            ladder=ladder,
            family=[assemble(a, bk, mode) for _, bk in ladder],
            source=source,
            workers=default_workers() if workers is None else max(1, workers),
        )

    @property
    def epsilons(self) -> List[float]:
        return [eps for eps, _ in self.ladder]

    @property
    def source_point(self) -> np.ndarray:
        return node_point(self.grid, self.source)

    def bump(self) -> ScalarField:
        """Gaussian initial data, peak 1, width 0.5, centred on the source node"""
        return gaussian_bump(self.grid, BUMP_WIDTH, self.source_point)

    def kernel(self, t: float) -> KernelSlice:
        """Forward slice of the target operator at time t from the source node, cached"""
        key = f"kernel:{t!r}"
        if key not in self._cache:
            s = self.config.scheme
            self._cache[key] = estimate_kernel(self.op, t, self.source, dt=s.dt, theta=s.theta)
        return self._cache[key]


def _decreasing(values: Sequence[float], floor: float = DEGENERATE_FLOOR) -> bool:
    """Strictly decreasing, or every entry below the floor (a degenerate family)"""
    values = list(values)
    if all(v <= floor for v in values):
        return True
    return all(later < earlier for earlier, later in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def baseline_study(ctx: LabContext) -> StudyOutcome:
    """Heat kernel (b = 0, a = I) against (4 pi t)^{-n/2} exp(-|x - y|^2 / 4t)"""
    cfg = ctx.config
    grid, T = ctx.grid, cfg.scheme.T
    heat = assemble(DiffusionCoefficient.identity(grid), zero_field(grid))
    kslice = estimate_kernel(heat, T, ctx.source, dt=cfg.scheme.dt, theta=cfg.scheme.theta)
    d2 = distance_from(grid, kslice.source_point) ** 2
    exact = (4.0 * math.pi * T) ** (-grid.n / 2.0) * np.exp(-d2 / (4.0 * T))
    rel_l1 = l1_norm(kslice.values.values - exact, grid) / l1_norm(exact, grid)
    passed = rel_l1 <= cfg.thresholds.baseline_l1
    table = pd.DataFrame([{
        "t": T, "n": grid.n, "points": grid.points_per_axis, "rel_l1": rel_l1,
        "mass": kslice.mass, "peak": kslice.peak, "exact_peak": float(exact.max()), "passed": passed,
    }])
    return StudyOutcome("baseline", table, passed, f"relative L1 error {rel_l1:.3e}")


def conservativeness_study(ctx: LabContext) -> StudyOutcome:
    """Row sums and column sums of the kernel stay 1 for the target and every ladder member"""
    cfg = ctx.config
    tol = cfg.thresholds.mass
    members = [("target", math.nan, ctx.op)] + [("ladder", eps, op) for eps, op in zip(ctx.epsilons, ctx.family)]
    rows = []
    for label, eps, op in tqdm(members, desc="conservativeness", leave=False):
        forward, adjoint = conservativeness_check(op, cfg.scheme.T, cfg.scheme.dt, cfg.scheme.theta)
        rows.append({"member": label, "epsilon": eps, "forward": forward, "adjoint": adjoint,
                     "passed": forward <= tol and adjoint <= tol})
    table = pd.DataFrame(rows)
    worst = float(table[["forward", "adjoint"]].to_numpy().max())
    return StudyOutcome("conservativeness", table, bool(table["passed"].all()), f"worst deviation {worst:.3e}")


def chapman_study(ctx: LabContext) -> StudyOutcome:
    """Chapman-Kolmogorov residual at matched steps and under mismatched-step refinement"""
    cfg = ctx.config
    th, s = cfg.thresholds, cfg.scheme
    half = s.T / 2.0
    matched = chapman_kolmogorov_residual(ctx.op, half, half, ctx.source, dt=s.dt, theta=s.theta)
    rows = [{"legs": "matched", "dt": s.dt, "residual": matched, "ratio": math.nan}]
    mismatched = []
    for level in range(2):
        dt = s.dt / 2 ** level
        r = chapman_kolmogorov_residual(ctx.op, half, half, ctx.source, dt=dt, leg_dts=(2.0 * dt, dt), theta=s.theta)
        mismatched.append(r)
        rows.append({"legs": "mismatched", "dt": dt, "residual": r,
                     "ratio": r / mismatched[-2] if level and mismatched[-2] > 0 else math.nan})
    refines = mismatched[0] <= DEGENERATE_FLOOR * th.chapman_mismatched or mismatched[1] <= 0.55 * mismatched[0]
    passed = matched <= th.chapman_matched and mismatched[0] <= th.chapman_mismatched and refines
    return StudyOutcome("chapman", pd.DataFrame(rows), passed,
                        f"matched {matched:.2e}, mismatched {mismatched[0]:.2e} -> {mismatched[1]:.2e}")


def energy_study(ctx: LabContext) -> StudyOutcome:
    """Energy identity at the configured step plus the trapezoid-quadrature order under halving"""
    cfg = ctx.config
    th, s = cfg.thresholds, cfg.scheme
    u0 = ctx.bump()
    rows = []
    traj = evolve(ctx.op, u0, s.T, s.dt, theta=s.theta)
    midpoint = energy_residual(traj, ctx.a, "midpoint")
    rows.append({"quadrature": "midpoint", "dt": s.dt, "residual": midpoint, "order": math.nan,
                 "mass_drift": mass_drift(traj), "l2_ratio": l2_contraction_ratio(traj)})

    trapezoid = []
    for level in range(3):
        dt = s.dt / 2 ** level
        run = traj if level == 0 and s.theta == 0.5 else evolve(ctx.op, u0, s.T, dt, theta=0.5)
        trapezoid.append(energy_residual(run, ctx.a, "trapezoid"))
        order = math.log2(trapezoid[-2] / trapezoid[-1]) if level and trapezoid[-1] > 0 else math.nan
        rows.append({"quadrature": "trapezoid", "dt": dt, "residual": trapezoid[-1], "order": order,
                     "mass_drift": mass_drift(run), "l2_ratio": l2_contraction_ratio(run)})
    table = pd.DataFrame(rows)
    orders = table["order"].dropna()
    observed = float(orders.min()) if len(orders) else math.nan
    passed = (midpoint <= th.energy_residual and observed >= th.energy_order
              and float(table["mass_drift"].max()) <= th.mass
              and float(table["l2_ratio"].max()) <= 1.0 + th.bound_slack)
    return StudyOutcome("energy", table, passed, f"midpoint residual {midpoint:.2e}, observed order {observed:.2f}")


def resolvent_study(ctx: LabContext) -> StudyOutcome:
    """Norm bounds, the variational identity and the first resolvent identity over random f"""
    cfg = ctx.config
    th = cfg.thresholds
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seeds.base))
    lam = ctx.a.lam
    alphas = list(cfg.studies.alphas)
    rows = []
    for index, alpha in enumerate(tqdm(alphas, desc="resolvent", leave=False)):
        l2_ratios, h1_ratios, identities, margins = [], [], [], []
        for _ in range(cfg.studies.random_draws):
            f = random_field(ctx.grid, rng, BUMP_WIDTH)
            v = random_field(ctx.grid, rng, BUMP_WIDTH)
            r = resolve(ctx.op, alpha, f)
            bounds = resolvent_bounds(r, lam)
            l2_ratios.append(bounds["l2_ratio"])
            h1_ratios.append(bounds["h1_ratio"])
            identities.append(resolvent_identity_residual(r, ctx.a, ctx.b, v, ctx.op.diffusion_mode))
            margins.append(energy_inequality_margin(r, lam))
        first_identity = math.nan
        if index + 1 < len(alphas):
            f = random_field(ctx.grid, rng, BUMP_WIDTH)
            first_identity = first_resolvent_identity_residual(ctx.op, alpha, alphas[index + 1], f)
        rows.append({
            "alpha": alpha, "draws": cfg.studies.random_draws,
            "max_l2_ratio": max(l2_ratios), "max_h1_ratio": max(h1_ratios),
            "max_identity_residual": max(identities), "min_energy_margin": min(margins),
            "first_identity_residual": first_identity,
        })
    table = pd.DataFrame(rows)
    limit = 1.0 + th.bound_slack
    passed = bool(
        (table["max_l2_ratio"] <= limit).all()
        and (table["max_h1_ratio"] <= limit).all()
        and (table["max_identity_residual"] <= th.identity_residual).all()
        and (table["first_identity_residual"].fillna(0.0) <= th.identity_residual).all()
    )
    table["passed"] = passed
    return StudyOutcome("resolvent", table, passed,
                        f"worst L2 ratio {table['max_l2_ratio'].max():.6f}, "
                        f"worst identity residual {table['max_identity_residual'].max():.2e}")


def weighted_study(ctx: LabContext) -> StudyOutcome:
    """Log-weighted resolvent ratio across the ladder, one spread per gamma_w"""
    cfg = ctx.config
    f = ctx.bump()
    alpha = 1.0
    solutions = [resolve(op, alpha, f) for op in tqdm(ctx.family, desc="weighted", leave=False)]
    bounds = [resolvent_bounds(r, ctx.a.lam) for r in solutions]
    cauchy = [l2_norm(solutions[k].u.values - solutions[k + 1].u.values, ctx.grid)
              for k in range(len(solutions) - 1)] + [math.nan]
    radii = (ctx.grid.box_length / 8.0, ctx.grid.box_length / 4.0)
    tails = [[tail_mass(r.u, radius) for radius in radii] for r in solutions]
    rows, spreads = [], []
    for gamma_w in cfg.studies.gamma_ws:
        w = LogWeight(ctx.grid, gamma_w)
        ratios = [log_weighted_ratio(r, w) for r in solutions]
        spread = max(ratios) / min(ratios) - 1.0
        spreads.append(spread)
        for k, (eps, ratio) in enumerate(zip(ctx.epsilons, ratios)):
            rows.append({
                "epsilon": eps, "alpha": alpha, "gamma_w": gamma_w,
                "l2_ratio": bounds[k]["l2_ratio"], "h1_ratio": bounds[k]["h1_ratio"],
                "weighted_ratio": ratio, "tail_mass_r1": tails[k][0], "tail_mass_r2": tails[k][1],
                "cauchy_diff": cauchy[k], "spread": spread,
            })
    gradient_ratio = weight_gradient_bound_check(LogWeight(ctx.grid, 0.0))
    table = pd.DataFrame(rows)
    table["weight_gradient_ratio"] = gradient_ratio
    table["r1"], table["r2"] = radii
    tails_ok = all(np.isfinite(t1) and t2 <= t1 for t1, t2 in tails)
    passed = max(spreads) <= cfg.thresholds.weighted_spread and gradient_ratio <= 1.0 and tails_ok
    return StudyOutcome("weighted", table, passed,
                        f"largest spread {max(spreads):.2%}, weight gradient ratio {gradient_ratio:.3f}")


def convergence_study(ctx: LabContext) -> StudyOutcome:
    """Cauchy differences of solutions, resolvents and kernel slices along the ladder"""
    cfg = ctx.config
    s = cfg.scheme
    u0 = ctx.bump()
    eps = ctx.epsilons

    def final_state(op: DiscreteOperator) -> np.ndarray:
        return evolve(op, u0, s.T, s.dt, theta=s.theta, record_every=step_count(s.T, s.dt)).final.values

    with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
        finals = list(pool.map(final_state, ctx.family))
    solution = [l1_norm(finals[k] - finals[k + 1], ctx.grid) for k in range(len(finals) - 1)]
    resolvents = resolvent_convergence(ctx.family, 1.0, u0, eps)["cauchy"]
    kernels = kernel_limit_stability(ctx.family, s.T, ctx.source, dt=s.dt, theta=s.theta, workers=ctx.workers)

    rows = []
    for name, values in (("solution_l1", solution), ("resolvent_l2", resolvents),
                         ("kernel_l1", kernels["differences"])):
        for k, value in enumerate(values):
            rows.append({"quantity": name, "k": k, "epsilon_k": eps[k], "epsilon_next": eps[k + 1], "value": value})
    for k, mass in enumerate(kernels["masses"]):
        rows.append({"quantity": "kernel_mass", "k": k, "epsilon_k": eps[k], "epsilon_next": math.nan, "value": mass})
    table = pd.DataFrame(rows)

    masses_ok = all(abs(m - 1.0) <= 1e-3 for m in kernels["masses"])
    final_ok = kernels["differences"][-1] <= cfg.thresholds.kernel_final_difference
    passed = (_decreasing(solution) and _decreasing(resolvents) and _decreasing(kernels["differences"])
              and masses_ok and final_ok)
    return StudyOutcome("convergence", table, passed,
                        f"final kernel difference {kernels['differences'][-1]:.3e}")


def _branch_coincidence_gap(n: int) -> float:
    """Largest relative |far - near| of the exponent feature for mu = 2, nu = 1, which must vanish"""
    p = aronson_params(math.inf, float(n), n, 1.0, 0.0)
    d = np.linspace(0.05, 3.0, 60)
    near = d ** 2 / 0.1
    # regime quantity r^0 / t^0 = 1 selects the far formula everywhere
    far = exponent_feature(p, 0.1, 0.0, d, np.full_like(d, 10.0))
    return float(np.max(np.abs(far - near) / near))


def _mu_one_constant(slices: Sequence[KernelSlice], p: AronsonParams, factor: float) -> float:
    """Smallest C1 on a geometric scan whose mu = 1 envelope dominates every slice"""
    for C1 in np.geomspace(1e-2, 1e4, 121):
        q = p.with_constants(C1, p.C2)
        clean = True
        for s in slices:
            values = s.values.values
            disp = displacement_from(s.grid, s.source_point)
            env = aronson_envelope(q, s.t, 0.0, disp, np.zeros(s.grid.n))
            mask = values > resolution_floor(s)
            if np.any(values[mask] > factor * env[mask]):
                clean = False
                break
        if clean:
            return float(C1)
    return math.nan


def _family_constants_spread(ctx: LabContext, times: Sequence[float], p: AronsonParams,
                             factor: float) -> Dict[str, float]:
    """Fit the envelope separately for every ladder member; reported, not judged"""
    s = ctx.config.scheme

    def member_fit(op: DiscreteOperator) -> Dict[str, object]:
        member_slices = [estimate_kernel(op, t, ctx.source, dt=s.dt, theta=s.theta) for t in times]
        return envelope_fit(member_slices, p, violation_factor=factor)

    with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
        fits = list(pool.map(member_fit, ctx.family))
    return constants_spread(fits)


def envelope_study(ctx: LabContext) -> StudyOutcome:
    """Aronson-type envelope: fitted constants, violations, near-field shape, on-diagonal decay"""
    cfg = ctx.config
    th, st = cfg.thresholds, cfg.studies
    times = sorted(set(st.envelope_times))
    with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
        slices = list(pool.map(ctx.kernel, times))
    Lambda = mixed_norm(ctx.b, st.aronson_l, st.aronson_q, max(times))
    p = aronson_params(st.aronson_l, st.aronson_q, ctx.grid.n, ctx.a.lam, Lambda)
    coincidence = _branch_coincidence_gap(ctx.grid.n)
    y_index = "-".join(str(i) for i in ctx.source)
    profile = on_diagonal_profile(slices)

    if p.mu_one:
        C1 = _mu_one_constant(slices, p, th.violation_factor)
        rows = [{
            "t": s.t, "y_index": y_index, "direction": s.direction, "mass": s.mass, "peak": s.peak,
            "mu": p.mu, "nu": p.nu, "C1": C1, "near_exponent": near_field_exponent(s),
            "on_diagonal_scaled": prof["scaled"],
        } for s, prof in zip(slices, profile)]
        passed = bool(np.isfinite(C1)) and coincidence <= 1e-14
        table = pd.DataFrame(rows)
        table["branch_gap"] = coincidence
        return StudyOutcome("envelope", table, passed, f"mu = 1 branch, dominating C1 = {C1:.4g}")

    fit = envelope_fit(slices, p, violation_factor=th.violation_factor)
    spread = _family_constants_spread(ctx, times, p, th.violation_factor)
    rows = []
    dominating = p.with_constants(fit["C1"], fit["C2"])
    radius = ctx.grid.box_length / 4.0
    for s, row, prof in zip(slices, fit["per_slice"], profile):
        far = distance_from(ctx.grid, s.source_point) > radius
        rows.append({
            "t": s.t, "y_index": y_index, "direction": s.direction, "mass": s.mass, "peak": s.peak,
            "C1_fit": fit["C1_fit"], "C2_fit": fit["C2_fit"], "C1": fit["C1"],
            "C1_held_out": row["C1_held_out"], "C2_held_out": row["C2_held_out"],
            "points": row["points"], "violations": row["violations"],
            "near_exponent": row["near_exponent"],
            "on_diagonal_scaled": prof["scaled"], "on_diagonal_ok": row["on_diagonal_ok"],
            "mu": p.mu, "nu": p.nu,
            "tail_radius": radius,
            "kernel_tail": float(s.values.values[far].sum() * ctx.grid.cell_volume),
            "envelope_tail": envelope_tail_mass(dominating, s.t, radius),
        })
    table = pd.DataFrame(rows)
    table["violations_fit"] = fit["violations_fit"]
    table["branch_gap"] = coincidence
    table["C1_spread"], table["C2_spread"] = spread["C1_spread"], spread["C2_spread"]
    near = fit["near_exponent"]
    passed = (fit["violations"] == 0 and th.near_exponent_min <= near <= th.near_exponent_max
              and fit["on_diagonal_ok"] and coincidence <= 1e-14)
    return StudyOutcome("envelope", table, passed,
                        f"C1={fit['C1']:.4g}, C2={fit['C2']:.4g}, violations={fit['violations']}, "
                        f"near exponent {near:.3f}, C1 spread over ladder {spread['C1_spread']:.1%}")


def mc_study(ctx: LabContext) -> StudyOutcome:
    """Euler-Maruyama endpoint law against the forward kernel slice"""
    cfg = ctx.config
    if not ctx.a.is_identity:
        table = pd.DataFrame([{"skipped": True, "reason": "path simulation needs a = I"}])
        return StudyOutcome("mc", table, True, "skipped: a is not the identity", skipped=True)
    mc_cfg = mc_config(ctx)
    sample = simulate(ctx.b, mc_cfg)
    kslice = ctx.kernel(mc_cfg.T)
    tv = tv_distance(sample, kslice, cfg.mc.bins_per_axis)
    exits = exit_consistency(sample, kslice)
    limit = cfg.thresholds.tv_singular if cfg.is_singular else cfg.thresholds.tv_smooth
    passed = tv <= limit and exits["nested_ok"] and exits["tail_ok"]
    table = pd.DataFrame([{
        "paths": mc_cfg.N, "T": mc_cfg.T, "dt": mc_cfg.dt, "seed": mc_cfg.seed,
        "bins_per_axis": cfg.mc.bins_per_axis, "tv": tv, "tv_limit": limit,
        "exit_radius": mc_cfg.exit_radius, **exits, "passed": passed,
    }])
    return StudyOutcome("mc", table, passed, f"TV {tv:.4f} (limit {limit}), exit fraction {exits['exit_fraction']:.4f}")


def mc_config(ctx: LabContext) -> McConfig:
    cfg = ctx.config
    T = cfg.mc.T or cfg.scheme.T
    dt = cfg.mc.dt or cfg.scheme.dt / 4.0
    R = cfg.mc.exit_radius
    if R is None:
        R = min(2.0 * math.sqrt(2.0 * ctx.grid.n * T), ctx.grid.box_length / 2.0 - 2.0 * ctx.grid.h)
    return McConfig(
        x0=tuple(float(v) for v in ctx.source_point),
        T=T, dt=dt, N=cfg.mc.paths, seed=cfg.seeds.mc, exit_radius=R,
        block_size=cfg.mc.block_size, workers=ctx.workers,
    )


def duhamel_study(ctx: LabContext) -> StudyOutcome:
    """Perturbation bound between the target drift and each mollified member"""
    cfg = ctx.config
    s = cfg.scheme
    u0 = ctx.bump()
    rows = []
    for eps, op_k in tqdm(list(zip(ctx.epsilons, ctx.family)), desc="duhamel", leave=False):
        result = duhamel_residual(ctx.op, op_k, s.T, ctx.source, dt=s.dt, u0=u0, theta=s.theta,
                                  slack=cfg.thresholds.duhamel_slack)
        rows.append({"epsilon": eps, **result})
    table = pd.DataFrame(rows)
    return StudyOutcome("duhamel", table, bool(table["holds"].all()),
                        f"largest ratio {table['ratio'].max():.3f}")


def uniqueness_study(ctx: LabContext) -> StudyOutcome:
    """Time stepping against resolvent iteration at the final time"""
    cfg = ctx.config
    s = cfg.scheme
    report = uniqueness_gap(ctx.op, ctx.bump(), s.T, cfg.studies.uniqueness_iterations, s.dt)
    passed = report["relative_gap"] <= cfg.thresholds.uniqueness_gap
    table = pd.DataFrame([{"t": s.T, "iterations": cfg.studies.uniqueness_iterations, **report, "passed": passed}])
    return StudyOutcome("uniqueness", table, passed, f"relative gap {report['relative_gap']:.3e}")


def weak_form_study(ctx: LabContext) -> StudyOutcome:
    """Space-time weak-formulation defect against a Gaussian test function vanishing at T"""
    cfg = ctx.config
    s = cfg.scheme
    traj = evolve(ctx.op, ctx.bump(), s.T, s.dt, theta=s.theta)
    phi = TestFunction(ctx.grid, horizon=s.T, width=BUMP_WIDTH, center=ctx.source_point)
    residual = weak_form_residual(traj, ctx.a, ctx.b, phi)
    passed = residual <= cfg.thresholds.weak_form
    table = pd.DataFrame([{"t": s.T, "dt": s.dt, "theta": s.theta, "residual": residual, "passed": passed}])
    return StudyOutcome("weak_form", table, passed, f"residual {residual:.3e}")


def markov_study(ctx: LabContext) -> StudyOutcome:
    """
    Implicit Euler from 0 <= u0 <= 1 on the monotone (upwind / flux) operators,
    pure diffusion and with the drift; both must stay sub-Markov.
    """
    cfg = ctx.config
    s = cfg.scheme
    if not ctx.a.is_diagonal:
        table = pd.DataFrame([{"skipped": True, "reason": "the monotone operator needs a diagonal a"}])
        return StudyOutcome("markov", table, True, "skipped: a is not diagonal", skipped=True)
    u0 = ctx.bump()
    diffusion_only = assemble(ctx.a, zero_field(ctx.grid), "flux", "upwind")
    rows = []
    for label, op in (("diffusion", diffusion_only), ("full", ctx.op.monotone())):
        report = markov_property_check(op, u0, s.T, s.dt)
        rows.append({"operator": label, "diffusion_mode": op.diffusion_mode,
                     "advection_form": op.advection_form, **report})
    table = pd.DataFrame(rows)
    passed = bool(table["holds"].all())
    full = rows[1]
    return StudyOutcome("markov", table, passed,
                        f"full operator min {full['min']:.2e}, excess {full['max_excess']:.2e}, "
                        f"L1 ratio {full['l1_ratio']:.6f}")


STUDY_FUNCTIONS: Dict[str, Callable[[LabContext], StudyOutcome]] = {
    "baseline": baseline_study,
    "conservativeness": conservativeness_study,
    "chapman": chapman_study,
    "energy": energy_study,
    "resolvent": resolvent_study,
    "weighted": weighted_study,
    "convergence": convergence_study,
    "envelope": envelope_study,
    "mc": mc_study,
    "duhamel": duhamel_study,
    "uniqueness": uniqueness_study,
    "weak_form": weak_form_study,
    "markov": markov_study,
}


def run_study(name: str, ctx: LabContext) -> StudyOutcome:
    """Run one study; failures are turned into a failed outcome carrying the error"""
    start = time.perf_counter()
    try:
        outcome = STUDY_FUNCTIONS[name](ctx)
    except Exception as e:
        logger.exception(f"study '{name}' raised")
        outcome = StudyOutcome(name, pd.DataFrame([{"error": type(e).__name__, "message": str(e)}]),
                               False, f"{type(e).__name__}: {e}")
    outcome.runtime = time.perf_counter() - start
    return outcome
