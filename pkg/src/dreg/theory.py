"""Least-squares calibration theory on the two-class contamination model.

Data come from :func:`dreg.synthdata.sample_contaminated_gmm`: labels are
stored as {0, 1} with class 1 meaning y = +1. Both estimators below regress
on the smoothed signed target ``(1 - eps) * y + eps / 2`` with y in {-1, +1},
which is the encoding whose population solution is
``(1 - eps)(1 - 2 eta) / (1 + |w*|^2) * w*``. A fitted vector ``w`` predicts
P(class 1 | x) = sigmoid(w . x).

The robust counterpart is iterative trimmed least squares: drop the
round(eta * n) largest squared residuals, refit on the rest, and repeat until
the retained set stops changing.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit, logit

from dreg import metrics
from dreg.errors import ConfigError, NumericError
from dreg.synthdata import LabeledDataset, SynthConfig, round_half_even, sample_contaminated_gmm, to_signed

log = logging.getLogger(__name__)

# Cholesky pivots below this fraction of the largest one mean a singular Gram matrix
_RANK_TOL = 1e-12


@dataclass(frozen=True)
class TheoryParams:
    w_star: tuple
    n: int = 100_000
    eta: float = 0.2
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        w = tuple(float(v) for v in np.atleast_1d(np.asarray(self.w_star, dtype=np.float64)))
        object.__setattr__(self, "w_star", w)
        if not w or not all(math.isfinite(v) for v in w):
            raise ConfigError("w_star must be a non-empty finite vector")
        if not np.linalg.norm(w) > 0:
            raise ConfigError("w_star must be non-zero")
        if int(self.n) < 1:
            raise ConfigError("n must be >= 1")
        if not (0.0 <= self.eta < 0.5):
            raise ConfigError(f"eta must lie in [0, 0.5), got {self.eta}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    @property
    def d(self) -> int:
        return len(self.w_star)

    @property
    def w(self) -> np.ndarray:
        return np.array(self.w_star)

    def synth_config(self, n=None, seed=None) -> SynthConfig:
        return SynthConfig(
            n=int(self.n if n is None else n),
            w_star=self.w_star,
            eta=self.eta,
            seed=int(self.seed if seed is None else seed),
        )


def isotropic_w_star(d: int, norm: float) -> tuple:
    """Vector with equal coordinates and the requested Euclidean norm."""
    return tuple(np.full(int(d), float(norm) / math.sqrt(int(d))))


def population_baseline_w(tp: TheoryParams) -> np.ndarray:
    w = tp.w
    return (1.0 - tp.epsilon) * (1.0 - 2.0 * tp.eta) / (1.0 + w @ w) * w


def smoothed_targets(labels, epsilon: float) -> np.ndarray:
    return (1.0 - epsilon) * to_signed(labels) + epsilon / 2.0


def _solve(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n <= x.shape[1]:
        raise NumericError(f"need more samples ({n}) than dimensions ({x.shape[1]})")
    gram = x.T @ x / n
    rhs = x.T @ t / n
    try:
        factor, lower = linalg.cho_factor(gram, check_finite=True)
    except linalg.LinAlgError:
        raise NumericError("Gram matrix is not positive definite") from None
    pivots = np.abs(np.diag(factor))
    if pivots.min() <= _RANK_TOL * pivots.max():
        raise NumericError("Gram matrix is rank deficient")
    return linalg.cho_solve((factor, lower), rhs)


def ls_fit(ds: LabeledDataset, epsilon: float = 0.0) -> np.ndarray:
    """Least squares on the smoothed signed targets via a Cholesky solve."""
    if not (0.0 <= epsilon < 1.0):
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    return _solve(ds.features, smoothed_targets(ds.labels, epsilon))


@dataclass
class TrimmedFit:
    w: np.ndarray
    converged: bool
    iterations: int
    retained: np.ndarray  # boolean mask over the input rows


def trimmed_ls_fit(ds: LabeledDataset, eta: float, theta0=None, iters: int = 50,
                   epsilon: float = 0.0) -> TrimmedFit:
    """Trim the round(eta * n) worst residuals and refit, up to ``iters`` times.

    ``theta0`` defaults to the untrimmed fit. With eta = 0 the result is the
    untrimmed fit itself. Residual ties are dropped lowest index first.
    """
    if not (0.0 <= eta < 0.5):
        raise ConfigError(f"eta must lie in [0, 0.5), got {eta}")
    if int(iters) < 1:
        raise ConfigError("iters must be >= 1")
    x = ds.features
    t = smoothed_targets(ds.labels, epsilon)
    m = round_half_even(eta * ds.n)
    if m == 0:
        return TrimmedFit(ls_fit(ds, epsilon), True, 0, np.ones(ds.n, dtype=bool))
    w = ls_fit(ds, epsilon) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    if w.shape != (ds.d,):
        raise ConfigError(f"theta0 must have length {ds.d}")
    keep = None
    for it in range(1, int(iters) + 1):
        resid = (x @ w - t) ** 2
        new_keep = np.ones(ds.n, dtype=bool)
        new_keep[np.argsort(-resid, kind="stable")[:m]] = False
        if keep is not None and np.array_equal(new_keep, keep):
            return TrimmedFit(w, True, it - 1, keep)
        keep = new_keep
        w = _solve(x[keep], t[keep])
    resid = (x @ w - t) ** 2
    final = np.ones(ds.n, dtype=bool)
    final[np.argsort(-resid, kind="stable")[:m]] = False
    return TrimmedFit(w, bool(np.array_equal(final, keep)), int(iters), keep)


def _check_p(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0.5)) or np.any(~(p < 1.0)):
        raise ConfigError("p must lie in the open interval (0.5, 1)")
    return p


def _out(v):
    return float(v) if np.ndim(v) == 0 else v


def _signed_error(p, scale):
    # scale 1 is exact: sigmoid(logit(p)) = p, which rounding would blur
    if scale == 1.0:
        return _out(np.zeros_like(p))
    return _out(p - expit(logit(p) / scale))


def signed_error_baseline(p, eta: float, epsilon: float):
    """p - sigmoid(logit(p) / ((1 - eps)(1 - 2 eta)))."""
    p = _check_p(p)
    if not (0.0 <= eta < 0.5) or not (0.0 <= epsilon < 1.0):
        raise ConfigError("need 0 <= eta < 0.5 and 0 <= epsilon < 1")
    return _signed_error(p, (1.0 - epsilon) * (1.0 - 2.0 * eta))


def signed_error_dreg(p, eta: float):
    """p - sigmoid(logit(p) / (1 - eta))."""
    p = _check_p(p)
    if not (0.0 <= eta < 0.5):
        raise ConfigError("need 0 <= eta < 0.5")
    return _signed_error(p, 1.0 - eta)


def p_grid(n_points: int = 99) -> np.ndarray:
    """``n_points`` evenly spaced interior points of (0.5, 1)."""
    k = np.arange(1, int(n_points) + 1)
    return 0.5 + 0.5 * k / (int(n_points) + 1)


@dataclass
class CalibCurve:
    p: np.ndarray
    err_baseline: np.ndarray
    err_dreg: np.ndarray
    ece_baseline: float | None = None
    ece_dreg: float | None = None

    def to_csv(self) -> str:
        lines = ["p,err_baseline,err_dreg"]
        lines += [f"{a:.17g},{b:.17g},{c:.17g}" for a, b, c in zip(self.p, self.err_baseline, self.err_dreg)]
        return "\n".join(lines) + "\n"


def calib_curve(eta: float, epsilon: float, p=None) -> CalibCurve:
    p = p_grid() if p is None else _check_p(p)
    return CalibCurve(p, signed_error_baseline(p, eta, epsilon), signed_error_dreg(p, eta))


def binary_predictions(w_hat, ds: LabeledDataset) -> metrics.PredictionSet:
    q = expit(ds.features @ np.asarray(w_hat, dtype=np.float64))
    return metrics.PredictionSet(np.stack([1.0 - q, q], axis=1), ds.labels)


def mc_ece_under_model(w_hat, tp: TheoryParams, n_test: int = 100_000, n_bins: int = metrics.DEFAULT_BINS,
                       seed: int = 0) -> float:
    """ECE of sigmoid(w_hat . x) on fresh draws from the contaminated mixture."""
    if int(n_test) < 1000:
        raise ConfigError("n_test must be >= 1000")
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w_hat.shape != (tp.d,):
        raise ConfigError(f"w_hat must have length {tp.d}")
    test = sample_contaminated_gmm(tp.synth_config(n=n_test, seed=seed))
    return metrics.ece(binary_predictions(w_hat, test), n_bins)[0]


def quadrature_ece(confidences, eta: float, epsilon: float, n_bins: int = 50):
    """Integrate |signed error| of both closed forms against a confidence histogram.

    Confidences at exactly 0.5 carry no error and are dropped; each remaining
    histogram bin on (0.5, 1) contributes its mass times the error at its midpoint.
    """
    c = np.asarray(confidences, dtype=np.float64)
    c = c[(c > 0.5) & (c < 1.0)]
    total = np.asarray(confidences).size
    if c.size == 0:
        return 0.0, 0.0
    edges = np.linspace(0.5, 1.0, int(n_bins) + 1)
    counts, _ = np.histogram(c, bins=edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    weight = counts / total
    base = float(np.sum(weight * np.abs(signed_error_baseline(mid, eta, epsilon))))
    dreg = float(np.sum(weight * np.abs(signed_error_dreg(mid, eta))))
    return base, dreg


@dataclass
class CellResult:
    eta: float
    epsilon: float
    seed: int
    ece_baseline: float
    ece_dreg: float
    ece_dreg_oracle: float
    quad_baseline: float
    quad_dreg: float
    converged: bool
    converged_oracle: bool
    outlier_fraction_retained: float

    @property
    def passed(self) -> bool:
        return self.ece_dreg < self.ece_baseline


def cell_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def run_cell(tp: TheoryParams, n_test: int = 100_000, n_bins: int = metrics.DEFAULT_BINS,
             iters: int = 50) -> CellResult:
    """Fit both estimators on one training sample and score them on one test sample.

    The training sample uses ``tp.seed`` and the test sample a seed derived
    from it, so both estimators see exactly the same data.
    """
    train = sample_contaminated_gmm(tp.synth_config())
    test_seed = cell_seed(tp.seed, 1)
    w_base = ls_fit(train, tp.epsilon)
    fit = trimmed_ls_fit(train, tp.eta, None, iters, tp.epsilon)
    fit_oracle = trimmed_ls_fit(train, tp.eta, tp.w, iters, tp.epsilon)
    test = sample_contaminated_gmm(tp.synth_config(n=n_test, seed=test_seed))
    pred_base = binary_predictions(w_base, test)
    e_base = metrics.ece(pred_base, n_bins)[0]
    e_dreg = metrics.ece(binary_predictions(fit.w, test), n_bins)[0]
    e_oracle = metrics.ece(binary_predictions(fit_oracle.w, test), n_bins)[0]
    q_base, q_dreg = quadrature_ece(pred_base.confidences, tp.eta, tp.epsilon)
    retained_flags = train.flags[fit.retained]
    return CellResult(
        tp.eta, tp.epsilon, tp.seed, e_base, e_dreg, e_oracle, q_base, q_dreg,
        fit.converged, fit_oracle.converged, float(np.mean(~retained_flags)),
    )


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class TheoremReport:
    cells: list = field(default_factory=list)
    n_test: int = 100_000
    n_bins: int = metrics.DEFAULT_BINS
    template: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "epsilon", "ece_baseline", "ece_dreg", "pass"])
        for c in self.cells:
            w.writerow([f"{c.eta:.17g}", f"{c.epsilon:.17g}", f"{c.ece_baseline:.17g}", f"{c.ece_dreg:.17g}",
                        "true" if c.passed else "false"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        cells = []
        for c in self.cells:
            cells.append({
                "eta": c.eta,
                "epsilon": c.epsilon,
                "seed": c.seed,
                "ece_baseline": c.ece_baseline,
                "ece_dreg": c.ece_dreg,
                "pass": c.passed,
                "ece_dreg_oracle_init": c.ece_dreg_oracle,
                "pass_oracle_init": c.ece_dreg_oracle < c.ece_baseline,
                "quadrature_baseline": c.quad_baseline,
                "quadrature_dreg": c.quad_dreg,
                "trimmed_converged": c.converged,
                "trimmed_converged_oracle_init": c.converged_oracle,
                "outlier_fraction_retained": c.outlier_fraction_retained,
            })
        return {
            "template": self.template,
            "n_test": self.n_test,
            "n_bins": self.n_bins,
            "cells": cells,
            "all_pass": all(c.passed for c in self.cells),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def theorem_check(grid, template: TheoryParams, n_test: int = 100_000, n_bins: int = metrics.DEFAULT_BINS,
                  iters: int = 50, parallel: int = 1) -> TheoremReport:
    """Compare baseline and trimmed fits on every (eta, epsilon) cell of ``grid``.

    Cell ``i`` draws its data from a seed derived from (template.seed, i), so
    the report does not depend on ``parallel``.
    """
    jobs = []
    for i, (eta, eps) in enumerate(grid):
        tp = replace(template, eta=float(eta), epsilon=float(eps), seed=cell_seed(template.seed, i))
        jobs.append((tp, int(n_test), int(n_bins), int(iters)))
    if int(parallel) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(parallel)) as ex:
            cells = list(ex.map(_run_cell_args, jobs))
    else:
        cells = [_run_cell_args(j) for j in jobs]
    for c in cells:
        log.info("eta=%g eps=%g ece_base=%.5f ece_dreg=%.5f", c.eta, c.epsilon, c.ece_baseline, c.ece_dreg)
    tmpl = {"w_star": list(template.w_star), "n": template.n, "seed": template.seed}
    return TheoremReport(cells, int(n_test), int(n_bins), tmpl)
