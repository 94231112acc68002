"""Multiplicative direct-demand model fitted by OLS on its log-linear form.

    T_ij = phi * prod X_ip^a_p * prod X_jp^b_p * prod Z_ijq^g_q
    ln T_ij = ln phi + sum a_p ln X_ip + sum b_p ln X_jp + sum g_q ln Z_ijq

Predictors containing a zero use ``log(x + 1)`` instead of ``ln x``.
Predictions are back-transformed with plain exponentiation before any
count-scale metric is computed.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, stats

from .od import DesignRow

logger = logging.getLogger(__name__)

VIF_THRESHOLD = 10.0
CV_FOLDS = 10
INTERCEPT = "const"
LN, LOG1P = "ln", "log1p"
# 1 - R^2 below this is treated as exact collinearity.
_SINGULAR_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Transformed regression inputs.

    ``X`` carries an intercept column first, then one column per entry of
    ``names`` (sorted). ``y = ln(response)``.
    """

    X: np.ndarray
    y: np.ndarray
    response: np.ndarray
    names: tuple
    transforms: dict
    dropped: tuple = ()
    origin: tuple = ()
    dest: tuple = ()

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def predictors(self) -> np.ndarray:
        return self.X[:, 1:]

    def select(self, names: Sequence[str]) -> "DesignMatrix":
        """Keep only ``names`` (in the given order) plus the intercept."""
        pos = {n: i for i, n in enumerate(self.names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"unknown predictor(s): {missing}")
        cols = [0] + [pos[n] + 1 for n in names]
        return DesignMatrix(self.X[:, cols], self.y, self.response, tuple(names),
                            {n: self.transforms[n] for n in names}, self.dropped,
                            self.origin, self.dest)

    def take(self, idx) -> "DesignMatrix":
        idx = np.asarray(idx)
        pick = (lambda t: tuple(np.asarray(t, dtype=object)[idx])) if self.origin else (lambda t: ())
        return DesignMatrix(self.X[idx], self.y[idx], self.response[idx], self.names,
                            self.transforms, self.dropped, pick(self.origin), pick(self.dest))


def transform_column(values: np.ndarray) -> tuple[str, np.ndarray]:
    """``ln`` for strictly positive columns, ``log1p`` when any value is zero."""
    values = np.asarray(values, dtype=float)
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValueError("predictors must be finite and non-negative")
    if np.any(values == 0):
        return LOG1P, np.log1p(values)
    return LN, np.log(values)


def build_design(rows: Sequence[DesignRow], drop_constant: bool = True) -> DesignMatrix:
    """Transform design rows into an OLS-ready matrix.

    Constant predictor columns carry no information and are dropped with a
    warning.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no design rows")
    names = sorted(rows[0].predictors)
    for r in rows:
        if sorted(r.predictors) != names:
            raise ValueError(f"row {r.origin_tract}->{r.dest_tract} has a different predictor set")
    T = np.array([r.response for r in rows], dtype=float)
    if np.any(~np.isfinite(T)) or np.any(T <= 0):
        raise ValueError("response values must be finite and positive")
    raw = np.array([[r.predictors[n] for n in names] for r in rows], dtype=float).reshape(len(rows), -1)
    if not np.all(np.isfinite(raw)):
        bad = sorted({names[j] for j in np.argwhere(~np.isfinite(raw))[:, 1]})
        raise ValueError(f"missing or non-finite predictor values in {bad}")

    keep, dropped, cols, transforms = [], [], [], {}
    for j, n in enumerate(names):
        if drop_constant and np.ptp(raw[:, j]) == 0:
            dropped.append(n)
            continue
        kind, col = transform_column(raw[:, j])
        keep.append(n)
        cols.append(col)
        transforms[n] = kind
    if dropped:
        msg = f"dropped constant predictor column(s): {', '.join(dropped)}"
        warnings.warn(msg, stacklevel=2)
        logger.warning(msg)
    X = np.column_stack([np.ones(len(rows))] + cols)
    return DesignMatrix(X, np.log(T), T, tuple(keep), transforms, tuple(dropped),
                        tuple(r.origin_tract for r in rows), tuple(r.dest_tract for r in rows))


def add_constant(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(len(x)), x])


def vif(X) -> np.ndarray:
    """Variance inflation factor of each column of ``X`` (no intercept column).

    Column ``j`` is regressed on all other columns plus an intercept; the
    VIF is ``1 / (1 - R^2)``. Exactly collinear columns get ``inf``.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    out = np.ones(p)
    if p < 2:
        return out
    for j in range(p):
        target = X[:, j]
        others = add_constant(np.delete(X, j, axis=1))
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        rss = float(np.sum((target - others @ coef) ** 2))
        tss = float(np.sum((target - target.mean()) ** 2))
        if tss == 0 or rss <= _SINGULAR_TOL * tss:
            out[j] = np.inf
        else:
            out[j] = tss / rss
    return out


@dataclass
class VifScreen:
    retained: list
    removed: list = field(default_factory=list)  # (name, vif) in removal order
    final_vif: dict = field(default_factory=dict)


def vif_screen(X, names: Sequence[str], threshold: float = VIF_THRESHOLD) -> VifScreen:
    """Iteratively drop the predictor with the largest VIF while it exceeds ``threshold``.

    Ties in VIF go to the alphabetically first name.
    """
    X = np.asarray(X, dtype=float)
    names = list(names)
    if X.shape[1] != len(names):
        raise ValueError("X columns and names differ in length")
    if len(names) < 2:
        raise ValueError("VIF screening needs at least two predictors")
    if X.shape[0] <= len(names):
        raise ValueError("VIF screening needs more observations than predictors")
    keep = list(range(len(names)))
    removed = []
    while True:
        v = vif(X[:, keep])
        top = np.max(v)
        if len(keep) < 2 or not top > threshold:
            break
        worst = min((names[keep[i]] for i in np.flatnonzero(v == top)))
        removed.append((worst, float(top)))
        logger.info("VIF screen: removed %s (VIF=%s)", worst, top)
        keep = [k for k in keep if names[k] != worst]
    return VifScreen([names[k] for k in keep], removed,
                     {names[k]: float(x) for k, x in zip(keep, v)})


@dataclass(frozen=True, eq=False)
class FittedModel:
    """OLS fit of the log-linear model. ``params[0]`` is the intercept ln(phi)."""

    names: tuple
    params: np.ndarray
    bse: np.ndarray
    tvalues: np.ndarray
    pvalues: np.ndarray
    n_obs: int
    df_resid: int
    sigma2: float
    rss: float
    r2_log: float

    @property
    def intercept(self) -> float:
        return float(self.params[0])

    def _named(self, arr) -> dict:
        return {n: float(v) for n, v in zip(self.names, arr[1:])}

    @property
    def coefficients(self) -> dict:
        return self._named(self.params)

    @property
    def standard_errors(self) -> dict:
        return self._named(self.bse)

    @property
    def p_values(self) -> dict:
        return self._named(self.pvalues)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names), "intercept": self.intercept,
            "intercept_se": float(self.bse[0]), "intercept_p": float(self.pvalues[0]),
            "coefficients": self.coefficients, "standard_errors": self.standard_errors,
            "t_values": self._named(self.tvalues), "p_values": self.p_values,
            "n_obs": self.n_obs, "df_resid": self.df_resid, "sigma2": self.sigma2,
            "rss": self.rss, "r2_log": self.r2_log,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        names = tuple(d["names"])

        def vec(first, named):
            return np.array([d[first]] + [d[named][n] for n in names], dtype=float)

        tv = np.array([np.nan] + [d["t_values"][n] for n in names], dtype=float)
        return cls(names, vec("intercept", "coefficients"), vec("intercept_se", "standard_errors"),
                   tv, vec("intercept_p", "p_values"), int(d["n_obs"]), int(d["df_resid"]),
                   float(d["sigma2"]), float(d["rss"]), float(d["r2_log"]))


def fit_ols(X, y, names: Sequence[str] | None = None) -> FittedModel:
    """Least squares with classical standard errors and t-test p-values.

    ``X`` must include the intercept as its first column.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, cols = X.shape
    if names is None:
        names = [f"x{j}" for j in range(1, cols)]
    if len(names) != cols - 1:
        raise ValueError("names must cover every non-intercept column")
    if n <= cols:
        raise ValueError(f"need more observations ({n}) than parameters ({cols})")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if np.linalg.matrix_rank(X) < cols or diag.min() <= 1e-10 * diag.max():
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)
    df = n - cols
    sigma2 = rss / df
    r_inv = linalg.solve_triangular(R, np.eye(cols))
    bse = np.sqrt(sigma2 * np.sum(r_inv ** 2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        tvalues = beta / bse
    pvalues = 2 * stats.t.sf(np.abs(tvalues), df)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - rss / tss if tss > 0 else float("nan")
    return FittedModel(tuple(names), beta, bse, tvalues, pvalues, n, df, sigma2, rss, r2)


def _matrix_for(model: FittedModel, X) -> np.ndarray:
    if isinstance(X, DesignMatrix):
        if X.names != model.names:
            if set(model.names) - set(X.names):
                raise ValueError(f"design lacks model predictor(s) "
                                 f"{sorted(set(model.names) - set(X.names))}")
            X = X.select(model.names)
        return X.X
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.params):
        raise ValueError(f"expected {len(model.params)} columns (intercept first), got "
                         f"{X.shape[1] if X.ndim == 2 else X.ndim}")
    return X


def predict_log(model: FittedModel, X) -> np.ndarray:
    return _matrix_for(model, X) @ model.params


def predict_counts(model: FittedModel, X) -> np.ndarray:
    """Back-transformed flows ``exp(ln T_hat)``; no smearing correction."""
    return np.exp(predict_log(model, X))


class Metrics(NamedTuple):
    mae: float
    rmse: float
    r2: float


def _metrics(T, T_hat, allow_undefined: bool = False) -> Metrics:
    T = np.asarray(T, dtype=float)
    T_hat = np.asarray(T_hat, dtype=float)
    if T.shape != T_hat.shape or T.ndim != 1:
        raise ValueError("observed and predicted must be 1-d and of equal length")
    if len(T) < 2:
        raise ValueError("need at least two observations")
    err = T_hat - T
    sse = float(np.sum(err ** 2))
    sst = float(np.sum((T - T.mean()) ** 2))
    if sst == 0:
        if not allow_undefined:
            raise ValueError("R^2 is undefined: observed flows have zero variance")
        r2 = float("nan")
    else:
        r2 = 1 - sse / sst
    return Metrics(float(np.mean(np.abs(err))), float(np.sqrt(sse / len(T))), r2)


def metrics(T, T_hat) -> Metrics:
    """MAE, RMSE and R^2 on the count scale."""
    return _metrics(T, T_hat)


@dataclass(frozen=True)
class FoldResult:
    fold: int
    test_index: tuple
    n_train: int
    n_test: int
    in_sample: Metrics
    out_of_sample: Metrics


@dataclass(frozen=True)
class CvReport:
    k: int
    seed: int
    folds: tuple
    mean_in_sample: Metrics
    mean_out_of_sample: Metrics

    def to_dict(self) -> dict:
        return {
            "k": self.k, "seed": self.seed,
            "mean_in_sample": self.mean_in_sample._asdict(),
            "mean_out_of_sample": self.mean_out_of_sample._asdict(),
            "folds": [{"fold": f.fold, "n_train": f.n_train, "n_test": f.n_test,
                       "in_sample": f.in_sample._asdict(),
                       "out_of_sample": f.out_of_sample._asdict()} for f in self.folds],
        }


def _mean_metrics(ms: Sequence[Metrics]) -> Metrics:
    r2 = [m.r2 for m in ms if np.isfinite(m.r2)]
    return Metrics(float(np.mean([m.mae for m in ms])), float(np.mean([m.rmse for m in ms])),
                   float(np.mean(r2)) if r2 else float("nan"))


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split into ``k`` folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def cross_validate(design: DesignMatrix, k: int = CV_FOLDS, seed: int = 0,
                   workers: int = 1) -> CvReport:
    """k-fold CV with count-scale metrics on training and holdout rows.

    Each fold's out-of-sample R^2 uses that fold's own mean. Folds whose
    observed flows are constant report R^2 as NaN and are left out of the
    mean R^2.
    """
    folds = kfold_indices(design.n_obs, k, seed)
    everything = np.arange(design.n_obs)

    def run(i):
        test = folds[i]
        train = np.setdiff1d(everything, test)
        model = fit_ols(design.X[train], design.y[train], design.names)
        ins = _metrics(design.response[train], predict_counts(model, design.X[train]), True)
        out = _metrics(design.response[test], predict_counts(model, design.X[test]), True)
        return FoldResult(i, tuple(test.tolist()), len(train), len(test), ins, out)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(i) for i in range(k)]
    undefined = [r.fold for r in results if not np.isfinite(r.out_of_sample.r2)]
    if undefined:
        warnings.warn(f"R^2 undefined in fold(s) {undefined}; excluded from the mean",
                      stacklevel=2)
    return CvReport(k, seed, tuple(results), _mean_metrics([r.in_sample for r in results]),
                    _mean_metrics([r.out_of_sample for r in results]))


@dataclass(frozen=True)
class DemandFit:
    design: DesignMatrix
    model: FittedModel
    screen: VifScreen


def fit_demand_model(rows: Sequence[DesignRow] | DesignMatrix,
                     vif_threshold: float = VIF_THRESHOLD) -> DemandFit:
    """Transform, VIF-screen and fit in one step."""
    design = rows if isinstance(rows, DesignMatrix) else build_design(rows)
    if len(design.names) >= 2:
        screen = vif_screen(design.predictors, design.names, vif_threshold)
    else:
        screen = VifScreen(list(design.names))
    design = design.select(screen.retained)
    return DemandFit(design, fit_ols(design.X, design.y, design.names), screen)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def _format_p(p: float) -> str:
    return "<0.001" if p < 0.001 else f"{p:.4g}"


def format_report(model: FittedModel, cv: CvReport | None = None) -> str:
    """Plain-text coefficient table grouped into origin, destination and distance."""
    groups = [("Origin variables", [n for n in model.names if n.endswith("_O")]),
              ("Destination variables", [n for n in model.names if n.endswith("_D")]),
              ("Impedance", [n for n in model.names if not n.endswith(("_O", "_D"))])]
    width = max([len(n) for n in model.names] + [12])
    rule = "-" * (width + 34)
    lines = [f"{'Variable':<{width}}  {'Coefficient':>12}  {'p-value':>10}", rule]
    lines.append(f"{'Intercept':<{width}}  {model.intercept:>12.6f}  "
                 f"{_format_p(model.pvalues[0]) + significance_stars(model.pvalues[0]):>10}")
    p = model.p_values
    c = model.coefficients
    for title, names in groups:
        if not names:
            continue
        lines += [rule, title]
        for n in names:
            lines.append(f"{n:<{width}}  {c[n]:>12.6f}  {_format_p(p[n]) + significance_stars(p[n]):>10}")
    lines += [rule, f"Observations: {model.n_obs}   Predictors: {len(model.names)}"]
    if cv is not None:
        for label, m in (("In-sample", cv.mean_in_sample), ("Out-of-sample", cv.mean_out_of_sample)):
            lines.append(f"{label}: MAE = {m.mae:.3f}  RMSE = {m.rmse:.3f}  R2 = {m.r2:.3f}")
    lines.append("Note: * p < 0.05, ** p < 0.01, *** p < 0.001")
    return "\n".join(lines) + "\n"


def report_dict(fit: DemandFit, cv: CvReport | None = None) -> dict:
    out = {
        "model": fit.model.to_dict(),
        "significance": {n: significance_stars(p) for n, p in fit.model.p_values.items()},
        "transforms": dict(fit.design.transforms),
        "dropped_constant": list(fit.design.dropped),
        "vif_removed": [{"name": n, "vif": v if np.isfinite(v) else "inf"}
                        for n, v in fit.screen.removed],
        "vif_final": fit.screen.final_vif,
    }
    if cv is not None:
        out["cv"] = cv.to_dict()
    return out
