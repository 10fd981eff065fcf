"""Calibrated MCAR and MAR amputation with a target share of incomplete rows.

Per-variable missingness follows a linear progression ``p_i = p0 + (i-1) d``
over the amputed variables (``c2, c3, a, y`` or, without exposure
missingness, ``c2, c3, y``).  ``(p0, d)`` is chosen by barrier-constrained
Nelder-Mead so that the overall incomplete-row probability hits the target.
Under MAR each missingness indicator follows a logistic model with unit
coefficients on its parents; intercepts are solved so that the marginal rate
equals ``p_i`` on a fixed reference sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data_model import Dataset
from .optim import constr_optim
from .rng import RngStream

AMPUTED = ("c2", "c3", "a", "y")
AMPUTED_NO_EXPOSURE = ("c2", "c3", "y")
PARENTS = {"c2": ("c1",), "c3": ("c1", "c2"), "a": ("c1", "c2", "c3"), "y": ("c1", "c2", "c3", "a")}

MAX_OUTER_EVALS = 1000


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MissingnessPlan:
    mechanism: str
    phi_target: float
    p0: float
    d: float
    variables: tuple[str, ...]
    p: tuple[float, ...]
    intercepts: tuple[float, ...] | None = None
    phi_realised_calibration: float = math.nan
    reference_n: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.mechanism not in ("mcar", "mar", "mar_no_exposure"):
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "mcar" and self.intercepts is not None:
            raise ValueError("MCAR plans carry no intercepts")
        if len(self.p) != len(self.variables):
            raise ValueError("one probability per amputed variable")
        k = len(self.variables)
        if self.p0 < 0 or self.d < 0 or self.p0 + (k - 1) * self.d >= 1:
            raise ValueError("need p0 >= 0, d >= 0 and p0 + (k-1) d < 1")

    @property
    def expected_phi(self) -> float:
        return phi_mcar(self.p) if self.mechanism == "mcar" else self.phi_realised_calibration


def phi_mcar(p) -> float:
    """Probability that at least one of independent indicators fires."""
    p = np.asarray(p, dtype=float)
    return float(1.0 - np.prod(1.0 - p))


def linear_progression(p0: float, d: float, k: int) -> np.ndarray:
    return p0 + d * np.arange(k)


def _constraints(k: int):
    # p0 >= 0, d >= 0, 1 - p0 - (k-1) d > 0
    ui = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -(k - 1.0)]])
    ci = np.array([0.0, 0.0, -1.0])
    return ui, ci


def _initial(phi_target: float) -> np.ndarray:
    s = max(phi_target / 10.0, 1e-4)
    return np.array([s, s])


def calibrate_mcar(phi_target: float, n_vars: int = 4) -> MissingnessPlan:
    if not 0 < phi_target <= 0.95:
        raise ValueError("phi_target must lie in (0, 0.95]")
    variables = AMPUTED if n_vars == 4 else AMPUTED_NO_EXPOSURE

    def objective(theta):
        return (phi_mcar(linear_progression(theta[0], theta[1], n_vars)) - phi_target) ** 2

    ui, ci = _constraints(n_vars)
    res = constr_optim(objective, _initial(phi_target), ui, ci, maxit=MAX_OUTER_EVALS)
    p0, d = (float(v) for v in res.x)
    p = linear_progression(p0, d, n_vars)
    phi = phi_mcar(p)
    if abs(phi - phi_target) >= 1e-4:
        raise CalibrationError(f"MCAR calibration did not converge: |phi - target| = {abs(phi - phi_target):.3g}")
    return MissingnessPlan("mcar", phi_target, p0, d, variables, tuple(float(x) for x in p),
                           phi_realised_calibration=phi)


def solve_intercept(eta, target_p: float, lo: float = -20.0, hi: float = 20.0,
                    tol: float = 1e-8, start: float | None = None) -> float:
    """Root of ``mean(expit(g + eta)) = target_p`` on ``[lo, hi]``.

    Newton steps safeguarded by a shrinking bracket; the mean is monotone in
    ``g`` so the bracket always contains the unique root.
    """
    if not 0 < target_p < 1:
        raise ValueError("target_p must lie in (0, 1)")
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")

    def h(g):
        p = expit(g + eta)
        return float(p.mean()) - target_p, float(np.mean(p * (1 - p)))

    f_lo, _ = h(lo)
    f_hi, _ = h(hi)
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(f"target {target_p} not bracketed on [{lo}, {hi}]")
    g = 0.5 * (lo + hi) if start is None else min(max(start, lo), hi)
    for _ in range(200):
        val, slope = h(g)
        if abs(val) < tol:
            return g
        if val > 0:
            hi = g
        else:
            lo = g
        g_new = g - val / slope if slope > 0 else 0.5 * (lo + hi)
        if not lo < g_new < hi:
            g_new = 0.5 * (lo + hi)
        g = g_new
        if hi - lo < 1e-15:
            return g
    raise CalibrationError("intercept search did not converge")


def linear_predictors(ds: Dataset, variables=AMPUTED) -> dict[str, np.ndarray]:
    """Unit-coefficient parent sums; reads only parent columns."""
    out = {}
    for v in variables:
        eta = np.zeros(ds.n)
        for parent in PARENTS[v]:
            eta = eta + ds.column(parent)
        out[v] = eta
    return out


class _MarObjective:
    """Monte Carlo overall-missingness on a fixed reference sample."""

    def __init__(self, reference: Dataset, variables):
        if not reference.is_complete:
            raise ValueError("MAR calibration needs a complete reference sample")
        self.variables = variables
        self.eta = linear_predictors(reference, variables)
        self._last = {v: None for v in variables}

    def intercepts(self, p) -> list[float]:
        out = []
        for v, pv in zip(self.variables, p):
            g = solve_intercept(self.eta[v], pv, start=self._last[v])
            self._last[v] = g
            out.append(g)
        return out

    def phi(self, intercepts) -> float:
        keep = np.ones_like(next(iter(self.eta.values())))
        for v, g in zip(self.variables, intercepts):
            keep *= 1.0 - expit(g + self.eta[v])
        return float(1.0 - keep.mean())


def calibrate_mar(phi_target: float, reference: Dataset, ampute_exposure: bool = True) -> MissingnessPlan:
    if not 0 < phi_target <= 0.95:
        raise ValueError("phi_target must lie in (0, 0.95]")
    variables = AMPUTED if ampute_exposure else AMPUTED_NO_EXPOSURE
    k = len(variables)
    obj = _MarObjective(reference, variables)

    def objective(theta):
        p = linear_progression(theta[0], theta[1], k)
        if np.any(p <= 0) or np.any(p >= 1):
            return math.nan
        try:
            return (obj.phi(obj.intercepts(p)) - phi_target) ** 2
        except CalibrationError:
            return math.nan

    ui, ci = _constraints(k)
    res = constr_optim(objective, _initial(phi_target), ui, ci, maxit=MAX_OUTER_EVALS)
    p0, d = (float(v) for v in res.x)
    p = linear_progression(p0, d, k)
    icpt = obj.intercepts(p)
    phi = obj.phi(icpt)
    if abs(phi - phi_target) >= 1e-3:
        raise CalibrationError(f"MAR calibration did not converge: |phi - target| = {abs(phi - phi_target):.3g}")
    mech = "mar" if ampute_exposure else "mar_no_exposure"
    return MissingnessPlan(mech, phi_target, p0, d, variables, tuple(float(x) for x in p),
                           tuple(float(g) for g in icpt), phi, reference.n)


def ampute(ds: Dataset, plan: MissingnessPlan, rng: RngStream) -> Dataset:
    """Impose missingness on a complete dataset according to ``plan``."""
    if not ds.is_complete:
        raise ValueError("ampute expects a complete dataset")
    mask = {name: np.zeros(ds.n, dtype=bool) for name in AMPUTED}
    if plan.mechanism == "mcar":
        for v, pv in zip(plan.variables, plan.p):
            mask[v] = rng.uniform(ds.n) < pv
    else:
        if plan.intercepts is None:
            raise ValueError("MAR plan has no intercepts")
        eta = linear_predictors(ds, plan.variables)
        for v, g in zip(plan.variables, plan.intercepts):
            mask[v] = rng.uniform(ds.n) < expit(g + eta[v])
    if not any(m.any() for m in mask.values()):
        return ds
    return ds.with_columns(
        c2=ds.c2.copy(), c3=ds.c3.copy(), a=ds.a.copy(), y=ds.y.copy(), missing=mask
    )


def plan_to_toml(plan: MissingnessPlan) -> str:
    lines = [
        f'mechanism = "{plan.mechanism}"',
        f"phi_target = {plan.phi_target!r}",
        f"p0 = {plan.p0!r}",
        f"d = {plan.d!r}",
        "variables = [" + ", ".join(f'"{v}"' for v in plan.variables) + "]",
        "p = [" + ", ".join(repr(x) for x in plan.p) + "]",
    ]
    if plan.intercepts is not None:
        lines.append("intercepts = [" + ", ".join(repr(x) for x in plan.intercepts) + "]")
    lines.append(f"phi_realised_calibration = {plan.phi_realised_calibration!r}")
    lines.append(f"reference_n = {plan.reference_n}")
    return "\n".join(lines) + "\n"


def plan_from_mapping(raw: dict) -> MissingnessPlan:
    return MissingnessPlan(
        mechanism=raw["mechanism"],
        phi_target=float(raw["phi_target"]),
        p0=float(raw["p0"]),
        d=float(raw["d"]),
        variables=tuple(raw["variables"]),
        p=tuple(float(x) for x in raw["p"]),
        intercepts=None if "intercepts" not in raw else tuple(float(x) for x in raw["intercepts"]),
        phi_realised_calibration=float(raw.get("phi_realised_calibration", math.nan)),
        reference_n=int(raw.get("reference_n", 0)),
    )


def reference_sample(config, n: int | None = None) -> Dataset:
    """Complete reference data drawn from the scenario DGM on the reserved stream."""
    from .dgm import generate_dataset
    from .rng import RESERVED_INDEX

    rng = RngStream(config.seed, RESERVED_INDEX, (1,))
    return generate_dataset(config, rng, n=config.reference_n if n is None else n)


def plan_for_scenario(config) -> MissingnessPlan | None:
    """Calibrated plan for ``config``; ``None`` when the scenario has no missingness."""
    if config.missingness == "none":
        return None
    if config.missingness == "mcar":
        return calibrate_mcar(config.phi_target)
    ref = reference_sample(config)
    return calibrate_mar(config.phi_target, ref, ampute_exposure=config.missingness == "mar")
