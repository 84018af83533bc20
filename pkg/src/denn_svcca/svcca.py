"""Singular vector canonical correlation analysis of layer activations.

Whitening works on the SVD of the centred activations rather than on
covariance matrices, so directions whose variance is many orders of magnitude
below the leading one are still resolved accurately.  Two knobs control the
small directions:

``cutoff``
    directions with covariance eigenvalue below ``cutoff * lambda_max`` are
    treated as rank-deficient and dropped (a pseudo-inverse).
``epsilon``
    ridge added to each covariance as ``epsilon * lambda_max``.  With a ridge,
    a direction of variance ``lambda`` contributes at most
    ``lambda / (lambda + epsilon * lambda_max)``, which is what turns
    self-similarity into a soft count of significant directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bvp import GridField, grid_points
from .net import MLP, forward_activations

__all__ = [
    "SampleSpec",
    "ActivationMatrix",
    "CCAResult",
    "ComponentField",
    "sample_activations",
    "cca",
    "principal_analysis",
    "svcca_similarity",
    "self_similarity",
    "component_fields",
    "spectral_knee",
    "CCA",
    "SVCCA",
    "SelfSVCCA",
    "DEFAULT_EPSILON",
    "DEFAULT_CUTOFF",
]

DEFAULT_CUTOFF = 1e-12
DEFAULT_EPSILON = 1e-10


@dataclass(frozen=True)
class SampleSpec:
    """Uniform ``n x n`` grid over the domain, boundary nodes included."""

    n: int = 100
    domain: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)

    @property
    def identifier(self) -> str:
        x0, x1, y0, y1 = self.domain
        return f"grid{self.n}[{x0:g},{x1:g}]x[{y0:g},{y1:g}]"

    def points(self) -> np.ndarray:
        return grid_points(self.n, self.n, self.domain)


@dataclass(eq=False)
class ActivationMatrix:
    values: np.ndarray
    layer: int
    network: tuple = ()
    sample_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("activation matrix must be 2-D (points x neurons)")
        n, m = self.values.shape
        if n <= m:
            raise ValueError(f"need more sample points than neurons for CCA, got {n} points x {m} neurons")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(eq=False)
class CCAResult:
    """Canonical correlations (descending) and the maps to canonical variates.

    ``projection_a`` has one row per neuron of view A (zero rows for dropped
    constant neurons); ``(A - mean_a) @ projection_a`` gives unit-variance
    variates.
    """

    correlations: np.ndarray
    projection_a: np.ndarray
    projection_b: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    dropped_a: list[int] = field(default_factory=list)
    dropped_b: list[int] = field(default_factory=list)

    @property
    def similarity(self) -> float:
        return float(np.sum(self.correlations))

    def variates_a(self, values) -> np.ndarray:
        return (np.asarray(values) - self.mean_a) @ self.projection_a

    def variates_b(self, values) -> np.ndarray:
        return (np.asarray(values) - self.mean_b) @ self.projection_b

    def to_text(self) -> str:
        def block(name, arr):
            arr = np.atleast_2d(arr)
            return [f"{name} {arr.shape[0]} {arr.shape[1]}"] + [" ".join(repr(float(v)) for v in row) for row in arr]

        lines = ["CCA-RESULT", f"n_correlations={len(self.correlations)}"]
        lines.append("dropped_a=" + ",".join(map(str, self.dropped_a)))
        lines.append("dropped_b=" + ",".join(map(str, self.dropped_b)))
        lines += block("correlations", self.correlations.reshape(1, -1))
        lines += block("mean_a", self.mean_a.reshape(1, -1))
        lines += block("mean_b", self.mean_b.reshape(1, -1))
        lines += block("projection_a", self.projection_a)
        lines += block("projection_b", self.projection_b)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> CCAResult:
        lines = text.splitlines()
        if not lines or lines[0] != "CCA-RESULT":
            raise ValueError("not a CCA result file")
        kv = dict(ln.split("=", 1) for ln in lines[1:4])
        pos, blocks = 4, {}
        while pos < len(lines):
            name, r, c = lines[pos].split()
            r, c = int(r), int(c)
            rows = [[float(v) for v in ln.split()] for ln in lines[pos + 1 : pos + 1 + r]]
            blocks[name] = np.array(rows, dtype=np.float64).reshape(r, c)
            pos += 1 + r

        def idx(s):
            return [int(v) for v in s.split(",") if v]

        return cls(
            blocks["correlations"].ravel(),
            blocks["projection_a"],
            blocks["projection_b"],
            blocks["mean_a"].ravel(),
            blocks["mean_b"].ravel(),
            idx(kv["dropped_a"]),
            idx(kv["dropped_b"]),
        )


def _values(x) -> np.ndarray:
    if isinstance(x, ActivationMatrix):
        return x.values
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D (points x neurons) array")
    return arr


@dataclass(eq=False)
class _Whitened:
    """SVD of one centred view, restricted to its numerically nonzero directions."""

    mean: np.ndarray
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    kept: np.ndarray
    dropped: list[int]
    n_cols: int

    @classmethod
    def of(cls, x, cutoff: float = DEFAULT_CUTOFF, top_fraction: float | None = None) -> _Whitened:
        x = _values(x)
        mean = x.mean(axis=0)
        const = np.ptp(x, axis=0) == 0
        kept = np.flatnonzero(~const)
        if kept.size == 0:
            raise ValueError("every neuron is constant over the sample set")
        xc = x[:, kept] - mean[kept]
        u, s, vt = np.linalg.svd(xc, full_matrices=False)
        lam = s * s
        rank = int(np.count_nonzero(lam > cutoff * lam[0])) if lam[0] > 0 else 0
        if rank == 0:
            raise ValueError("activations have no variance")
        if top_fraction is not None:
            frac = np.cumsum(lam[:rank]) / lam[:rank].sum()
            rank = int(np.searchsorted(frac, top_fraction - 1e-15) + 1)
        return cls(mean, u[:, :rank], s[:rank], vt[:rank], kept, np.flatnonzero(const).tolist(), x.shape[1])

    def shrink(self, epsilon: float) -> np.ndarray:
        if epsilon == 0:
            return np.ones_like(self.s)
        return self.s / np.sqrt(self.s * self.s + epsilon * self.s[0] ** 2)

    def projection(self, rotation: np.ndarray, n_points: int) -> np.ndarray:
        """Map centred activations (all neurons) to unit-variance variates."""
        proj = np.zeros((self.n_cols, rotation.shape[1]))
        proj[self.kept] = self.vt.T @ ((np.sqrt(n_points - 1) / self.s)[:, None] * rotation)
        return proj


def _check_pair(a, b) -> None:
    va, vb = _values(a), _values(b)
    if va.shape[0] != vb.shape[0]:
        raise ValueError(f"views have different numbers of sample points ({va.shape[0]} vs {vb.shape[0]})")
    if isinstance(a, ActivationMatrix) and isinstance(b, ActivationMatrix) and a.sample_id != b.sample_id:
        raise ValueError(f"views come from different sample sets ({a.sample_id!r} vs {b.sample_id!r})")


def _cca_whitened(wa: _Whitened, wb: _Whitened, epsilon: float, n_points: int) -> CCAResult:
    m = (wa.u * wa.shrink(epsilon)).T @ (wb.u * wb.shrink(epsilon))
    p, corr, qt = np.linalg.svd(m, full_matrices=False)
    k = min(wa.s.size, wb.s.size)
    corr = np.clip(corr[:k], 0.0, 1.0)
    return CCAResult(
        corr,
        wa.projection(p[:, :k], n_points),
        wb.projection(qt[:k].T, n_points),
        wa.mean,
        wb.mean,
        wa.dropped,
        wb.dropped,
    )


def cca(a, b, epsilon: float = 0.0, cutoff: float = DEFAULT_CUTOFF) -> CCAResult:
    """Canonical correlations between two views sampled on the same points.

    Columns are centred and constant columns dropped (listed in
    ``dropped_a``/``dropped_b``).  The correlations are the singular values of
    the whitened cross-covariance; their number is the smaller of the two
    effective ranks.
    """
    _check_pair(a, b)
    n = _values(a).shape[0]
    return _cca_whitened(_Whitened.of(a, cutoff), _Whitened.of(b, cutoff), epsilon, n)


def principal_analysis(a, epsilon: float = DEFAULT_EPSILON, cutoff: float = DEFAULT_CUTOFF) -> CCAResult:
    """Self-SVCCA: principal directions of one view with ridge-regularized self-correlations.

    Regularized CCA of a view with itself has correlations
    ``lambda_i / (lambda_i + epsilon * lambda_1)`` along the principal
    directions, so strong directions score ~1 and negligible ones ~0.
    """
    w = _Whitened.of(a, cutoff)
    shrink = w.shrink(epsilon)
    corr = np.clip(shrink * shrink, 0.0, 1.0)
    rot = np.eye(w.s.size)
    n = _values(a).shape[0]
    proj = w.projection(rot, n)
    return CCAResult(corr, proj, proj.copy(), w.mean, w.mean.copy(), w.dropped, list(w.dropped))


def svcca_similarity(a, b, threshold: float | None = None, epsilon: float = DEFAULT_EPSILON,
                     cutoff: float = DEFAULT_CUTOFF) -> float:
    """Sum of canonical correlations between two layers.

    ``threshold`` (optional) first reduces each view to the leading singular
    directions holding that fraction of its variance.
    """
    _check_pair(a, b)
    n = _values(a).shape[0]
    wa = _Whitened.of(a, cutoff, threshold)
    wb = _Whitened.of(b, cutoff, threshold)
    return _cca_whitened(wa, wb, epsilon, n).similarity


def self_similarity(a, epsilon: float = DEFAULT_EPSILON, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Intrinsic dimensionality estimate: ``svcca_similarity(a, a)``."""
    x = _values(a)
    if not np.any(x - x.mean(axis=0)):
        raise ValueError("cannot measure dimensionality of a constant activation matrix")
    return float(principal_analysis(a, epsilon, cutoff).correlations.sum())


def spectral_knee(correlations, limit: int | None = None) -> int:
    """Number of leading components before the largest drop between neighbours."""
    c = np.asarray(correlations, dtype=np.float64)
    limit = len(c) if limit is None else min(limit, len(c))
    if limit < 2:
        return limit
    ratios = c[: limit - 1] / np.maximum(c[1:limit], np.finfo(float).tiny)
    return int(np.argmax(ratios) + 1)


def sample_activations(net: MLP, layer: int, sample: SampleSpec = SampleSpec(), network: tuple = ()) -> ActivationMatrix:
    """Activations of hidden layer ``layer`` (1-based) on the sample grid."""
    if not 1 <= layer <= net.depth:
        raise IndexError(f"layer {layer} out of range 1..{net.depth}")
    acts = forward_activations(net, sample.points())[layer - 1]
    return ActivationMatrix(acts, layer, network, sample.identifier)


def all_layer_activations(net: MLP, sample: SampleSpec = SampleSpec(), network: tuple = ()) -> list[ActivationMatrix]:
    acts = forward_activations(net, sample.points())[:-1]
    return [ActivationMatrix(a, l + 1, network, sample.identifier) for l, a in enumerate(acts)]


@dataclass(eq=False)
class ComponentField:
    field: GridField
    correlation: float
    index: int


def component_fields(result: CCAResult, net: MLP, layer: int, resolution: int = 50,
                     domain=(-1.0, 1.0, -1.0, 1.0), count: int | None = None) -> list[ComponentField]:
    """Evaluate the canonical (or principal) variates of view A over a grid.

    ``net``/``layer`` must be the network and layer that produced view A.
    """
    if resolution < 2:
        raise ValueError("component grid resolution must be >= 2")
    if not 1 <= layer <= net.depth:
        raise IndexError(f"layer {layer} out of range 1..{net.depth}")
    pts = grid_points(resolution, resolution, domain)
    acts = forward_activations(net, pts)[layer - 1]
    variates = result.variates_a(acts)
    k = variates.shape[1] if count is None else min(count, variates.shape[1])
    return [
        ComponentField(GridField(resolution, resolution, domain, variates[:, i]), float(result.correlations[i]), i + 1)
        for i in range(k)
    ]


# -- estimator interface ------------------------------------------------------


class CCA(BaseEstimator, TransformerMixin):
    """Linear CCA between two views.

    Parameters
    ----------
    epsilon : float
        Relative ridge on each covariance (0 disables it).
    cutoff : float
        Relative eigenvalue cutoff of the pseudo-inverse whitening.
    """

    def __init__(self, epsilon=0.0, cutoff=DEFAULT_CUTOFF):
        self.epsilon = epsilon
        self.cutoff = cutoff

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        self.result_ = cca(X, Y, self.epsilon, self.cutoff)
        self.correlations_ = self.result_.correlations
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X, Y=None):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        if Y is None:
            return self.result_.variates_a(X)
        return self.result_.variates_a(X), self.result_.variates_b(check_array(Y, dtype=np.float64))

    def score(self, X, Y):
        """Sum of canonical correlations of a fresh fit on ``(X, Y)``."""
        return cca(check_array(X), check_array(Y), self.epsilon, self.cutoff).similarity


class SVCCA(BaseEstimator):
    """SVCCA similarity between two layers; ``similarity_`` after ``fit``."""

    def __init__(self, threshold=None, epsilon=DEFAULT_EPSILON, cutoff=DEFAULT_CUTOFF):
        self.threshold = threshold
        self.epsilon = epsilon
        self.cutoff = cutoff

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        self.similarity_ = svcca_similarity(X, Y, self.threshold, self.epsilon, self.cutoff)
        return self


class SelfSVCCA(BaseEstimator, TransformerMixin):
    """Principal-component view of one layer with regularized self-correlations.

    After ``fit``, ``correlations_`` holds the per-component self-correlations
    and ``dimensionality_`` their sum; ``transform`` returns the principal
    variates (unit variance).
    """

    def __init__(self, epsilon=DEFAULT_EPSILON, cutoff=DEFAULT_CUTOFF):
        self.epsilon = epsilon
        self.cutoff = cutoff

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.result_ = principal_analysis(X, self.epsilon, self.cutoff)
        self.correlations_ = self.result_.correlations
        self.dimensionality_ = float(self.correlations_.sum())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "result_")
        return self.result_.variates_a(check_array(X, dtype=np.float64))
