"""Sparse block-triangular VAR: parameters, forward model, loss and gradient.

The 2N observation vector is laid out as ``[cases; deaths]``. For lag tau the
implied transition matrix is ``[[B, 0], [H, A]]``: cases depend on past cases
only, deaths on past cases (H) and past deaths (A).
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .geo_graph import SparsityPattern, SpatialCovariance
from .ingest import ObservationPanel

PARAMS_FORMAT = "stva-params/1"


class InsufficientHistory(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    p: int = 2
    delta: float = 0.9
    eta: float = 1e3
    lambda1: float = 1e2
    lambda2: float = 1e-1
    step_size: float | None = None  # None: 1 / (Lipschitz estimate)
    max_iters: int = 2000
    tol: float = 1e-8
    clamp_output: bool = True
    proximal: bool = False
    line_search: bool = False
    distance_mode: str = "great-circle-normalized"

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if not 0.0 <= self.lambda2 <= 1.0:
            raise ValueError("lambda2 must lie in [0, 1]")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FitConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelParams:
    """Coefficients on a shared sparsity pattern.

    ``B``, ``H``, ``A`` hold the pattern values, shape (p, nnz); ``mu`` and
    ``nu`` are (K, p); ``upsilon`` and ``zeta`` are (L,).
    """

    pattern: SparsityPattern
    B: np.ndarray
    H: np.ndarray
    A: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    upsilon: np.ndarray
    zeta: np.ndarray

    BLOCKS = ("B", "H", "A", "mu", "nu", "upsilon", "zeta")

    @classmethod
    def zeros(cls, pattern: SparsityPattern, p: int, K: int, L: int) -> ModelParams:
        z = np.zeros
        return cls(pattern, z((p, pattern.nnz)), z((p, pattern.nnz)), z((p, pattern.nnz)),
                   z((K, p)), z((K, p)), z(L), z(L))

    @property
    def p(self) -> int:
        return self.B.shape[0]

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def L(self) -> int:
        return self.upsilon.shape[0]

    @property
    def n(self) -> int:
        return self.pattern.n

    @property
    def size(self) -> int:
        return sum(getattr(self, b).size for b in self.BLOCKS)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, b).ravel() for b in self.BLOCKS])

    def with_vector(self, vec: np.ndarray) -> ModelParams:
        out, pos = {}, 0
        for b in self.BLOCKS:
            shape = getattr(self, b).shape
            size = int(np.prod(shape))
            out[b] = np.array(vec[pos : pos + size], dtype=float).reshape(shape)
            pos += size
        if pos != vec.size:
            raise ValueError("vector length does not match parameter layout")
        return replace(self, **out)

    def copy(self) -> ModelParams:
        return self.with_vector(self.to_vector())

    def block_slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for b in self.BLOCKS:
            size = getattr(self, b).size
            out[b] = slice(pos, pos + size)
            pos += size
        return out

    def spatial_mask(self) -> np.ndarray:
        """Boolean mask over ``to_vector()`` selecting B, H, A entries."""
        mask = np.zeros(self.size, dtype=bool)
        sl = self.block_slices()
        for b in ("B", "H", "A"):
            mask[sl[b]] = True
        return mask

    def dense(self, matrix: str, lag: int) -> np.ndarray:
        """N x N matrix for ``matrix`` in {'A', 'B', 'H'} at 1-based ``lag``."""
        vals = getattr(self, matrix)[lag - 1]
        out = np.zeros((self.n, self.n))
        out[self.pattern.rows, self.pattern.cols] = vals
        return out

    def transition(self, lag: int) -> np.ndarray:
        """The 2N x 2N block matrix [[B, 0], [H, A]] for 1-based ``lag``."""
        n = self.n
        out = np.zeros((2 * n, 2 * n))
        out[:n, :n] = self.dense("B", lag)
        out[n:, :n] = self.dense("H", lag)
        out[n:, n:] = self.dense("A", lag)
        return out

    def save(self, path, config: FitConfig | None = None, extra: dict | None = None) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": PARAMS_FORMAT,
            "N": self.n,
            "p": self.p,
            "K": self.K,
            "L": self.L,
            "nnz": self.pattern.nnz,
            "pattern_sha256": self.pattern.digest(),
            "config": config.to_dict() if config is not None else None,
        }
        if extra:
            manifest.update(extra)
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        buf = io.BytesIO()
        np.savez(
            buf,
            rows=self.pattern.rows,
            cols=self.pattern.cols,
            **{b: getattr(self, b) for b in self.BLOCKS},
        )
        (path / "arrays.npz").write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple[ModelParams, dict]:
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        if manifest.get("format") != PARAMS_FORMAT:
            raise ValueError(f"{path}: not a parameter snapshot")
        with np.load(path / "arrays.npz") as z:
            pattern = SparsityPattern(int(manifest["N"]), z["rows"], z["cols"])
            if pattern.digest() != manifest["pattern_sha256"]:
                raise ValueError(f"{path}: pattern hash mismatch")
            params = cls(pattern, *(z[b] for b in cls.BLOCKS))
        return params, manifest


def _check_weeks(params: ModelParams, panel: ObservationPanel, weeks) -> np.ndarray:
    weeks = np.atleast_1d(np.asarray(weeks, dtype=np.int64))
    if weeks.size and weeks.min() < params.p:
        raise InsufficientHistory(
            f"insufficient history: week index {int(weeks.min())} needs {params.p} prior weeks"
        )
    if weeks.size and weeks.max() > panel.T:
        raise ValueError(f"week index {int(weeks.max())} beyond panel end ({panel.T})")
    if (params.n, params.K, params.L) != (panel.N, panel.K, panel.L):
        raise ValueError(
            f"params (N={params.n}, K={params.K}, L={params.L}) do not match "
            f"panel (N={panel.N}, K={panel.K}, L={panel.L})"
        )
    return weeks


def all_weeks(params_or_p, panel: ObservationPanel) -> np.ndarray:
    """Week indices (0-based) with a full lag history inside the panel."""
    p = params_or_p if isinstance(params_or_p, int) else params_or_p.p
    return np.arange(p, panel.T)


def _apply(vals: np.ndarray, pattern: SparsityPattern, X: np.ndarray) -> np.ndarray:
    """Row-wise sparse product: for each row x of X (W, N), M @ x."""
    return (X[:, pattern.cols] * vals) @ pattern.scatter


def predict(params: ModelParams, panel: ObservationPanel, weeks) -> tuple[np.ndarray, np.ndarray]:
    """Conditional means for the given 0-based week indices.

    A week index equal to ``panel.T`` forecasts one week past the panel.

    Returns:
        (cases_hat, deaths_hat), each (len(weeks), N).
    """
    weeks = _check_weeks(params, panel, weeks)
    pat = params.pattern
    c_hat = np.zeros((weeks.size, panel.N))
    d_hat = np.zeros((weeks.size, panel.N))
    for tau in range(1, params.p + 1):
        c_lag = panel.cases[weeks - tau].astype(float)
        d_lag = panel.deaths[weeks - tau].astype(float)
        c_hat += _apply(params.B[tau - 1], pat, c_lag)
        d_hat += _apply(params.H[tau - 1], pat, c_lag) + _apply(params.A[tau - 1], pat, d_lag)
        if params.K:
            m_lag = panel.mobility[:, weeks - tau]  # (K, W, N)
            c_hat += np.tensordot(params.mu[:, tau - 1], m_lag, axes=1)
            d_hat += np.tensordot(params.nu[:, tau - 1], m_lag, axes=1)
    if params.L:
        c_hat += params.upsilon @ panel.demographics
        d_hat += params.zeta @ panel.demographics
    return c_hat, d_hat


def forward(params: ModelParams, panel: ObservationPanel, t: int) -> np.ndarray:
    """Predicted x_t = [cases; deaths] (length 2N) for 0-based week ``t``."""
    c_hat, d_hat = predict(params, panel, [t])
    return np.concatenate([c_hat[0], d_hat[0]])


def residuals(params: ModelParams, panel: ObservationPanel, weeks) -> tuple[np.ndarray, np.ndarray]:
    weeks = np.atleast_1d(np.asarray(weeks, dtype=np.int64))
    if weeks.size and weeks.max() >= panel.T:
        raise ValueError("residuals need observed weeks")
    c_hat, d_hat = predict(params, panel, weeks)
    return panel.cases[weeks] - c_hat, panel.deaths[weeks] - d_hat


def loss(
    params: ModelParams,
    panel: ObservationPanel,
    cov: SpatialCovariance,
    cfg: FitConfig,
    weeks=None,
) -> float:
    """delta * sum_t e_d' S^-1 e_d + (1 - delta) * sum_t e_c' S^-1 e_c."""
    weeks = all_weeks(params, panel) if weeks is None else weeks
    e_c, e_d = residuals(params, panel, weeks)
    return cfg.delta * cov.quad(e_d) + (1.0 - cfg.delta) * cov.quad(e_c)


def regularizer(params: ModelParams, lambda2: float) -> float:
    """Elastic net over every pattern entry of B, H and A at every lag.

    Covariate coefficients are not penalized.
    """
    v = np.concatenate([params.B.ravel(), params.H.ravel(), params.A.ravel()])
    return float(lambda2 * np.abs(v).sum() + (1.0 - lambda2) * (v**2).sum())


def objective(params, panel, cov, cfg, weeks=None) -> float:
    return loss(params, panel, cov, cfg, weeks) + cfg.lambda1 * regularizer(params, cfg.lambda2)


def loss_gradient(
    params: ModelParams,
    panel: ObservationPanel,
    cov: SpatialCovariance,
    cfg: FitConfig,
    weeks=None,
) -> ModelParams:
    """Gradient of the whitened weighted loss alone."""
    weeks = all_weeks(params, panel) if weeks is None else np.asarray(weeks, dtype=np.int64)
    e_c, e_d = residuals(params, panel, weeks)
    # d loss / d prediction
    g_c = (-2.0 * (1.0 - cfg.delta)) * cov.solve(e_c.T).T
    g_d = (-2.0 * cfg.delta) * cov.solve(e_d.T).T
    pat = params.pattern
    grad = ModelParams.zeros(pat, params.p, params.K, params.L)
    gc_rows = g_c[:, pat.rows]
    gd_rows = g_d[:, pat.rows]
    for tau in range(1, params.p + 1):
        c_lag = panel.cases[weeks - tau].astype(float)
        d_lag = panel.deaths[weeks - tau].astype(float)
        grad.B[tau - 1] = np.einsum("we,we->e", gc_rows, c_lag[:, pat.cols])
        grad.H[tau - 1] = np.einsum("we,we->e", gd_rows, c_lag[:, pat.cols])
        grad.A[tau - 1] = np.einsum("we,we->e", gd_rows, d_lag[:, pat.cols])
        if params.K:
            m_lag = panel.mobility[:, weeks - tau]
            grad.mu[:, tau - 1] = np.einsum("kwn,wn->k", m_lag, g_c)
            grad.nu[:, tau - 1] = np.einsum("kwn,wn->k", m_lag, g_d)
    if params.L:
        grad.upsilon[:] = panel.demographics @ g_c.sum(axis=0)
        grad.zeta[:] = panel.demographics @ g_d.sum(axis=0)
    return grad


def gradient(
    params: ModelParams,
    panel: ObservationPanel,
    cov: SpatialCovariance,
    cfg: FitConfig,
    weeks=None,
    include_l1: bool = True,
) -> ModelParams:
    """Gradient of loss + lambda1 * R.

    The absolute-value terms contribute ``lambda2 * sign(x)`` (0 at x = 0);
    pass ``include_l1=False`` to get the smooth part only, as used by the
    proximal solver.
    """
    grad = loss_gradient(params, panel, cov, cfg, weeks)
    if cfg.lambda1:
        for b in ("B", "H", "A"):
            x = getattr(params, b)
            g = getattr(grad, b)
            g += cfg.lambda1 * 2.0 * (1.0 - cfg.lambda2) * x
            if include_l1:
                g += cfg.lambda1 * cfg.lambda2 * np.sign(x)
    return grad
