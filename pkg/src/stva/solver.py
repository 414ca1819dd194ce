"""Full-batch gradient descent, blocked cross-validation and ablation variants."""

from __future__ import annotations

import configparser
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .geo_graph import CountyGraph, SparsityPattern, SpatialCovariance, build_pattern
from .ingest import ObservationPanel
from .model import FitConfig, ModelParams, all_weeks, gradient, loss, objective

logger = logging.getLogger(__name__)

ABLATIONS = ("full", "no_spatial", "no_census", "no_mobility")


class FitError(RuntimeError):
    pass


@dataclass
class FitReport:
    loss_trace: list[tuple[int, float]]
    final_loss: float
    final_data_loss: float
    iterations_used: int
    converged: bool
    config: FitConfig
    ablation: str = "full"
    step_size: float = 0.0
    diagnostic: str = ""
    wall_time: float = 0.0

    @property
    def diverged(self) -> bool:
        return not self.converged and bool(self.diagnostic)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "loss_trace": [[i, v] for i, v in self.loss_trace],
            "final_loss": self.final_loss,
            "final_data_loss": self.final_data_loss,
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "config": self.config.to_dict(),
            "ablation": self.ablation,
            "step_size": self.step_size,
            "diagnostic": self.diagnostic,
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


def ablation_pattern(graph: CountyGraph, ablation: str) -> SparsityPattern:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if ablation == "no_spatial":
        return SparsityPattern.diagonal(graph.n)
    return build_pattern(graph)


def _free_mask(params: ModelParams, ablation: str) -> np.ndarray:
    mask = np.ones(params.size, dtype=bool)
    sl = params.block_slices()
    if ablation == "no_mobility":
        mask[sl["mu"]] = False
        mask[sl["nu"]] = False
    elif ablation == "no_census":
        mask[sl["upsilon"]] = False
        mask[sl["zeta"]] = False
    return mask


def estimate_lipschitz(smooth_grad, size: int, mask: np.ndarray, iters: int = 60, seed: int = 0) -> float:
    """Largest Hessian eigenvalue of a quadratic by power iteration on
    gradient differences."""
    rng = np.random.default_rng(seed)
    g0 = smooth_grad(np.zeros(size))
    v = rng.standard_normal(size) * mask
    nv = np.linalg.norm(v)
    if nv == 0:
        return 1.0
    v /= nv
    lam = 0.0
    for _ in range(iters):
        hv = (smooth_grad(v) - g0) * mask
        lam_new = float(np.linalg.norm(hv))
        if lam_new == 0:
            return 1.0
        v = hv / lam_new
        if abs(lam_new - lam) <= 1e-6 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return lam


def fit(
    panel: ObservationPanel,
    graph: CountyGraph,
    cov: SpatialCovariance,
    cfg: FitConfig = FitConfig(),
    ablation: str = "full",
    weeks=None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, FitReport]:
    """Minimize loss + lambda1 * R by full-batch (sub)gradient descent.

    Parameters start at zero unless ``init`` is given. ``weeks`` restricts
    the training targets (0-based, each >= p); default is every week with
    a full lag history. With ``cfg.proximal`` the l1 part is applied as a
    soft-threshold after each step instead of by subgradient.

    On a non-finite objective the last finite iterate is returned with
    ``converged=False`` and a diagnostic.
    """
    t0 = time.perf_counter()
    if panel.T <= cfg.p:
        raise FitError(f"panel has {panel.T} weeks; need more than p={cfg.p}")
    pattern = ablation_pattern(graph, ablation)
    weeks = all_weeks(cfg.p, panel) if weeks is None else np.asarray(weeks, dtype=np.int64)
    if weeks.size == 0:
        raise FitError("no training weeks")
    template = ModelParams.zeros(pattern, cfg.p, panel.K, panel.L)
    if init is not None:
        if init.pattern.digest() != pattern.digest():
            raise FitError("initial parameters use a different sparsity pattern")
        template = init.copy()
    free = _free_mask(template, ablation)
    spatial = template.spatial_mask()

    def unpack(vec):
        return template.with_vector(vec)

    def f(vec):
        return objective(unpack(vec), panel, cov, cfg, weeks)

    def smooth_f(vec):
        # data loss + ridge part of R
        prm = unpack(vec)
        v = vec[spatial]
        return loss(prm, panel, cov, cfg, weeks) + cfg.lambda1 * (1 - cfg.lambda2) * float(v @ v)

    l1 = cfg.lambda1 * cfg.lambda2

    def grad(vec, include_l1=True):
        g = gradient(unpack(vec), panel, cov, cfg, weeks, include_l1=False).to_vector()
        if include_l1 and l1:
            # minimum-norm subgradient: sign(x) off zero, shrunk smooth part at zero
            v, gs = vec[spatial], g[spatial]
            g[spatial] = np.where(v != 0, gs + l1 * np.sign(v), np.sign(gs) * np.maximum(np.abs(gs) - l1, 0.0))
        return g * free

    step = cfg.step_size
    if step is None:
        lip = estimate_lipschitz(lambda v: grad(v, include_l1=False), template.size, free)
        step = 1.0 / lip

    def prox(vec, s):
        if cfg.lambda1 * cfg.lambda2 == 0:
            return vec
        thr = s * cfg.lambda1 * cfg.lambda2
        out = vec.copy()
        v = out[spatial]
        out[spatial] = np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)
        return out

    theta = template.to_vector() * free
    obj = f(theta)
    if not np.isfinite(obj):
        raise FitError("objective is not finite at the initial point")
    trace = [(0, obj)]
    converged = False
    diagnostic = ""
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, cfg.max_iters + 1):
            s = step
            if cfg.proximal:
                g = grad(theta, include_l1=False)
                fs = smooth_f(theta)
                cand = prox(theta - s * g, s)
                if cfg.line_search:
                    for _ in range(60):
                        d = cand - theta
                        if smooth_f(cand) <= fs + g @ d + (d @ d) / (2 * s):
                            break
                        s *= 0.5
                        cand = prox(theta - s * g, s)
            else:
                g = grad(theta)
                cand = theta - s * g
                if cfg.line_search:
                    gg = float(g @ g)
                    for _ in range(60):
                        val = f(cand)
                        if np.isfinite(val) and val <= obj - 1e-4 * s * gg:
                            break
                        s *= 0.5
                        cand = theta - s * g
            new_obj = f(cand)
            if not np.isfinite(new_obj):
                diagnostic = (
                    f"objective became non-finite at iteration {it}; "
                    f"returning the last finite iterate. Try a smaller step_size (current {s:.3g})."
                )
                logger.warning(diagnostic)
                it -= 1
                break
            if cfg.line_search:
                step = s
            theta = cand
            prev, obj = obj, new_obj
            trace.append((it, obj))
            if obj == 0.0 or abs(prev - obj) <= cfg.tol * max(abs(prev), np.finfo(float).tiny):
                converged = True
                break

    params = unpack(theta)
    report = FitReport(
        loss_trace=trace,
        final_loss=obj,
        final_data_loss=loss(params, panel, cov, cfg, weeks),
        iterations_used=it,
        converged=converged,
        config=cfg,
        ablation=ablation,
        step_size=float(step),
        diagnostic=diagnostic,
        wall_time=time.perf_counter() - t0,
    )
    return params, report


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("STVA_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class CVResult:
    best: tuple[float, float]
    scores: dict[tuple[float, float], float]
    folds: list[np.ndarray] = field(default_factory=list)


def week_folds(p: int, T: int, n_folds: int = 5) -> list[np.ndarray]:
    """Contiguous blocks of target weeks ``p .. T-1``."""
    usable = np.arange(p, T)
    if usable.size < n_folds * (p + 1):
        raise FitError(
            f"{usable.size} usable weeks is fewer than {n_folds} x (p + 1) = {n_folds * (p + 1)}"
        )
    return [b for b in np.array_split(usable, n_folds)]


def cross_validate(
    panel: ObservationPanel,
    graph: CountyGraph,
    cov: SpatialCovariance,
    cfg: FitConfig,
    lambda1_grid,
    lambda2_grid,
    ablation: str = "full",
    n_folds: int = 5,
) -> CVResult:
    """Blocked k-fold CV over (lambda1, lambda2).

    Each cell is scored by the summed held-out loss (unpenalized), with lags
    taken from the observed data. Ties go to the larger lambda1, then the
    larger lambda2.
    """
    lambda1_grid, lambda2_grid = list(lambda1_grid), list(lambda2_grid)
    if not lambda1_grid or not lambda2_grid:
        raise ValueError("empty lambda grid")
    folds = week_folds(cfg.p, panel.T, n_folds)
    cells = [(l1, l2) for l1 in lambda1_grid for l2 in lambda2_grid]

    def score(cell):
        c = replace(cfg, lambda1=float(cell[0]), lambda2=float(cell[1]))
        total = 0.0
        for k, held in enumerate(folds):
            train = np.concatenate([b for j, b in enumerate(folds) if j != k])
            params, _ = fit(panel, graph, cov, c, ablation, weeks=train)
            total += loss(params, panel, cov, c, held)
        return total

    with ThreadPoolExecutor(max_workers()) as pool:
        values = list(pool.map(score, cells))
    scores = dict(zip(cells, values))
    best = min(cells, key=lambda c: (scores[c], -c[0], -c[1]))
    return CVResult(best=best, scores=scores, folds=folds)


CONFIG_KEYS = {
    "p": int,
    "delta": float,
    "eta": float,
    "lambda1": float,
    "lambda2": float,
    "step_size": float,
    "max_iters": int,
    "tol": float,
    "clamp_output": bool,
    "proximal": bool,
    "line_search": bool,
    "distance_mode": str,
    "ablation": str,
    "seed": int,
}


def _coerce(key: str, raw):
    kind = CONFIG_KEYS[key]
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none", "auto")):
        if key == "step_size":
            return None
        raise ValueError(f"config key {key!r} needs a value")
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        val = str(raw).strip().lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: not a boolean: {raw!r}")
    return kind(raw)


def read_config(path) -> dict:
    """Parse a ``key = value`` file (``#`` comments, no sections)."""
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string("[stva]\n" + text)
    out = {}
    for key, raw in parser["stva"].items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def make_config(settings: dict) -> tuple[FitConfig, str, int]:
    """Split a merged settings dict into (FitConfig, ablation, seed)."""
    settings = {k: _coerce(k, v) if k in CONFIG_KEYS else v for k, v in settings.items()}
    ablation = settings.pop("ablation", "full")
    seed = settings.pop("seed", 0)
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    return FitConfig.from_dict(settings), ablation, seed
