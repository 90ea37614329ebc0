"""Evaluation: Pearson correlation, RMSE and epsilon-insensitive RMSE*.

RMSE* is computed after a monotonic third-order polynomial mapping of the
predictions onto the subjective scale::

    rmse* = sqrt( sum_i max(0, |mapped_i - subj_i| - ci95_i)^2 / (K - d) )

with ``d = 4`` fitted mapping parameters.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import comb

from .errors import DegenerateSet, Undefined

log = logging.getLogger(__name__)

MAPPING_DOF = 4


def _monomials(u):
    return np.vander(np.asarray(u, dtype=np.float64), 4, increasing=True)


def _derivative_rows(u):
    u = np.asarray(u, dtype=np.float64)
    return np.stack([np.zeros_like(u), np.ones_like(u), 2 * u, 3 * u * u], axis=1)


def fit_monotone_poly3(pred, subj, grid_size=1000, max_iter=500):
    """Least-squares cubic ``subj ~ c0 + c1 x + c2 x^2 + c3 x^3`` with p'(x) >= 0.

    The derivative constraint is imposed on a grid over [min(pred),
    max(pred)], plus the exact slope minimiser when it falls between grid
    points, and the constrained least-squares problem is solved with SLSQP.
    Returns ``c`` (lowest order first) in the original prediction units.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(subj, dtype=np.float64)
    if x.shape != y.shape or x.size < MAPPING_DOF:
        raise DegenerateSet(f"need >= {MAPPING_DOF} paired points, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.array([y.mean(), 0.0, 0.0, 0.0])

    # fit in u = (x - mid) / half in [-1, 1] for conditioning
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    X = _monomials((x - mid) / half)
    D = _derivative_rows(np.linspace(-1.0, 1.0, grid_size))
    a = np.linalg.lstsq(X, y, rcond=None)[0]
    tol = -1e-12 * max(1.0, np.abs(y).max())
    for _ in range(5):
        if _min_slope(a) >= tol:
            break
        # the slope is quadratic in u, so its minimum on [-1, 1] is known in
        # closed form; add that point to the grid whenever it dips below zero
        D = np.vstack([D, _derivative_rows([_argmin_slope(a)])])
        a = _solve_constrained(X, y, D, max_iter)
    if _min_slope(a) < -1e-9:
        log.warning("monotone fit: min slope %.3g", _min_slope(a))
    return _to_raw_coefficients(a, mid, half)


def _argmin_slope(a):
    """Location of the smallest slope of sum_k a_k u^k on [-1, 1]."""
    cands = [-1.0, 1.0]
    if a[3] > 0:
        cands.append(float(np.clip(-a[2] / (3 * a[3]), -1.0, 1.0)))
    slopes = _derivative_rows(cands) @ a
    return cands[int(np.argmin(slopes))]


def _min_slope(a):
    return float((_derivative_rows([_argmin_slope(a)]) @ a)[0])


def _solve_constrained(X, y, D, max_iter):
    """min ||X b - y||^2 subject to D b >= 0, by SLSQP from a feasible start."""
    slope = max(np.polyfit(X[:, 1], y, 1)[0], 0.0)  # best line with non-negative slope
    start = np.array([np.mean(y - slope * X[:, 1]), slope, 0.0, 0.0])
    res = optimize.minimize(lambda b: 0.5 * np.sum((X @ b - y) ** 2), start,
                            jac=lambda b: X.T @ (X @ b - y), method="SLSQP",
                            constraints=[{"type": "ineq", "fun": lambda b: D @ b, "jac": lambda b: D}],
                            options={"ftol": 1e-14, "maxiter": max_iter})
    return res.x


def _to_raw_coefficients(a, mid, half):
    """Expand sum_k a_k ((x - mid)/half)^k into powers of x."""
    c = np.zeros(4)
    for k in range(4):
        for j in range(k + 1):
            c[j] += a[k] * comb(k, j) * (-mid) ** (k - j) / half ** k
    return c


def apply_mapping(coeffs, pred):
    return np.polynomial.polynomial.polyval(np.asarray(pred, dtype=np.float64), coeffs)


def rmse_star(mapped_pred, subj, ci95, d=MAPPING_DOF) -> float:
    """Epsilon-insensitive RMSE with a ``d`` degrees-of-freedom correction."""
    mapped_pred = np.asarray(mapped_pred, dtype=np.float64)
    subj = np.asarray(subj, dtype=np.float64)
    ci95 = np.broadcast_to(np.asarray(ci95, dtype=np.float64), subj.shape)
    if mapped_pred.shape != subj.shape:
        raise ValueError("prediction and subjective vectors differ in length")
    K = subj.size
    if K <= d:
        raise DegenerateSet(f"{K} points <= {d} degrees of freedom")
    perr = np.maximum(0.0, np.abs(mapped_pred - subj) - ci95)
    return float(np.sqrt(np.sum(perr ** 2) / (K - d)))


def rmse(pred, subj, d=0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    subj = np.asarray(subj, dtype=np.float64)
    if subj.size <= d:
        raise DegenerateSet(f"{subj.size} points <= {d} degrees of freedom")
    return float(np.sqrt(np.sum((pred - subj) ** 2) / (subj.size - d)))


def pearson(pred, subj) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(subj, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise Undefined("need at least two paired points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = xc @ xc, yc @ yc
    if sxx == 0 or syy == 0:
        raise Undefined("zero variance")
    return float(np.clip((xc @ yc) / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class EvalReport:
    n: int
    pearson_r: float
    rmse: float  # raw predictions
    rmse_mapped: float  # mapped predictions, d-corrected
    rmse_star: float
    coefficients: list
    groups: dict = field(default_factory=dict)
    average_rmse_star: float | None = None
    max_rmse_star: float | None = None
    config_hash: str | None = None

    def to_dict(self):
        d = asdict(self)
        d["groups"] = {k: v.to_dict() for k, v in self.groups.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'group':<20} {'n':>5} {'r':>6} {'RMSE':>6} {'RMSE*':>6}"]
        for name, g in sorted(self.groups.items()):
            lines.append(f"{name:<20} {g.n:>5d} {g.pearson_r:>6.2f} {g.rmse:>6.2f} {g.rmse_star:>6.2f}")
        lines.append(f"{'overall':<20} {self.n:>5d} {self.pearson_r:>6.2f} {self.rmse:>6.2f} {self.rmse_star:>6.2f}")
        if self.average_rmse_star is not None:
            lines.append(f"average RMSE* {self.average_rmse_star:.2f}   max RMSE* {self.max_rmse_star:.2f}")
        return "\n".join(lines)


def _report(pred, subj, ci95) -> EvalReport:
    c = fit_monotone_poly3(pred, subj)
    mapped = apply_mapping(c, pred)
    try:
        r = pearson(pred, subj)
    except Undefined:
        r = float("nan")
    return EvalReport(n=len(pred), pearson_r=r, rmse=rmse(pred, subj),
                      rmse_mapped=rmse(mapped, subj, MAPPING_DOF),
                      rmse_star=rmse_star(mapped, subj, ci95), coefficients=c.tolist())


def evaluate_predictions(pred, subj, ci95=0.15, groups=None, per_group_mapping=True) -> EvalReport:
    """Report over all points plus a per-group table when ``groups`` is given.

    The overall numbers use one global mapping.  Group rows use their own
    mapping when ``per_group_mapping`` is set, else the global one.
    """
    pred = np.asarray(pred, dtype=np.float64)
    subj = np.asarray(subj, dtype=np.float64)
    ci95 = np.broadcast_to(np.asarray(ci95, dtype=np.float64), subj.shape)
    report = _report(pred, subj, ci95)
    if groups is None:
        return report
    groups = np.asarray(groups)
    for name in sorted(set(groups.tolist())):
        sel = groups == name
        if per_group_mapping:
            report.groups[name] = _report(pred[sel], subj[sel], ci95[sel])
        else:
            mapped = apply_mapping(report.coefficients, pred[sel])
            report.groups[name] = EvalReport(
                n=int(sel.sum()), pearson_r=pearson(pred[sel], subj[sel]), rmse=rmse(pred[sel], subj[sel]),
                rmse_mapped=rmse(mapped, subj[sel], MAPPING_DOF),
                rmse_star=rmse_star(mapped, subj[sel], ci95[sel]), coefficients=report.coefficients)
    stars = [g.rmse_star for g in report.groups.values()]
    report.average_rmse_star = float(np.mean(stars))
    report.max_rmse_star = float(np.max(stars))
    return report


def evaluate(manifest_rows, model, default_ci95=0.15, per_group_mapping=True) -> EvalReport:
    """Predict every manifest row with ``model`` and score against its MOS.

    Rows whose audio files are missing are skipped with a warning.
    """
    from .audio_io import load_wav
    from .training import predict

    pred, subj, ci, groups = [], [], [], []
    missing = []
    for row in manifest_rows:
        paths = [row.deg_path] + ([] if model.config.single_ended or row.ref_path is None else [row.ref_path])
        if not all(p.exists() for p in paths):
            missing.append(str(row.deg_path))
            continue
        ref = None if model.config.single_ended else load_wav(row.ref_path)
        pred.append(predict(ref, load_wav(row.deg_path), model))
        subj.append(row.mos)
        ci.append(default_ci95 if row.ci95 is None else row.ci95)
        groups.append(row.group)
    if missing:
        log.warning("skipped %d rows with missing files: %s", len(missing), ", ".join(missing[:5]))
    report = evaluate_predictions(pred, subj, ci, groups if len(set(groups)) > 1 else None,
                                  per_group_mapping)
    if len(set(groups)) == 1:
        report.groups = {groups[0]: EvalReport(**{**asdict(report), "groups": {}})}
        report.average_rmse_star = report.max_rmse_star = report.rmse_star
    report.config_hash = model.config_hash
    return report
