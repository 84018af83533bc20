"""Ensemble similarity matrices and the layer-generality metrics built on them.

An ensemble is a list of networks indexed by ``(x' index, seed)`` with all
seeds of one source position stored contiguously.  For one layer, entry
``(i, j)`` of the similarity matrix is the SVCCA similarity of networks ``i``
and ``j``; the diagonal holds self-similarities.  The matrix splits into

* ``self``   - the diagonal,
* ``same``   - same source position, different seeds (``dx' = 0``),
* ``cross``  - one group per positive source offset ``dx'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import groupby

import numpy as np

from .config import XPRIME_UNIT
from .io import atomic_write_text, write_csv
from .net import MLP
from .svcca import (
    DEFAULT_CUTOFF,
    DEFAULT_EPSILON,
    SampleSpec,
    _cca_whitened,
    _Whitened,
    all_layer_activations,
)

__all__ = [
    "EnsembleIndex",
    "SimilarityMatrix",
    "GroupStats",
    "LayerStats",
    "build_similarity_matrix",
    "build_similarity_matrices",
    "decompose",
    "reproducibility",
    "specificity",
    "metrics_report",
    "group_sizes",
]


@dataclass(frozen=True)
class EnsembleIndex:
    entries: tuple[tuple[int, int], ...]  # (x' index in units of 0.1, seed id)
    width: int = 0
    depth: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((int(x), int(s)) for x, s in self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def x_indices(self) -> np.ndarray:
        return np.array([x for x, _ in self.entries], dtype=np.int64)

    def check_grouped(self) -> None:
        seen = set()
        for x, _ in groupby(self.x_indices.tolist()):
            if x in seen:
                raise ValueError(f"ensemble is not grouped by x': position {x * XPRIME_UNIT:g} appears in two blocks")
            seen.add(x)
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate (x', seed) entries in ensemble index")


@dataclass(eq=False)
class SimilarityMatrix:
    values: np.ndarray
    index: EnsembleIndex
    layer: int

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.index)
        if self.values.shape != (n, n):
            raise ValueError(f"matrix shape {self.values.shape} does not match ensemble size {n}")

    def to_text(self) -> str:
        n = len(self.index)
        lines = [f"{n} layer={self.layer} width={self.index.width}"]
        lines.append(" ".join(f"{x}:{s}" for x, s in self.index.entries))
        lines.extend(" ".join(repr(float(v)) for v in row) for row in self.values)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SimilarityMatrix:
        lines = text.splitlines()
        head = lines[0].split()
        n = int(head[0])
        meta = dict(tok.split("=") for tok in head[1:])
        entries = [tuple(int(v) for v in tok.split(":")) for tok in lines[1].split()]
        vals = np.array([[float(v) for v in ln.split()] for ln in lines[2 : 2 + n]])
        return cls(vals.reshape(n, n), EnsembleIndex(tuple(entries), int(meta["width"])), int(meta["layer"]))

    def write(self, stem) -> None:
        """``<stem>.txt``, ``<stem>.csv`` and ``<stem>.pgm`` (plus its scale sidecar)."""
        from .bvp import write_pgm

        atomic_write_text(f"{stem}.txt", self.to_text())
        labels = [f"x{x * XPRIME_UNIT:.1f}_s{s}" for x, s in self.index.entries]
        write_csv(f"{stem}.csv", ["network", *labels], [[lab, *row] for lab, row in zip(labels, self.values)])
        write_pgm(f"{stem}.pgm", self.values)


def _pair_similarity(wa: _Whitened, wb: _Whitened, epsilon: float, n_points: int) -> float:
    return _cca_whitened(wa, wb, epsilon, n_points).similarity


def build_similarity_matrices(
    networks: list[MLP],
    index: EnsembleIndex,
    sample: SampleSpec = SampleSpec(),
    epsilon: float = DEFAULT_EPSILON,
    threshold: float | None = None,
    cutoff: float = DEFAULT_CUTOFF,
) -> list[SimilarityMatrix]:
    """One similarity matrix per hidden layer; each network is evaluated once."""
    if len(networks) != len(index):
        raise ValueError("need exactly one network per ensemble entry")
    if not networks:
        raise ValueError("empty ensemble")
    widths = networks[0].widths
    for net in networks[1:]:
        if net.widths != widths:
            raise ValueError(f"architecture mismatch in ensemble: {net.widths} vs {widths}")
    index.check_grouped()
    depth = networks[0].depth
    n_points = sample.n * sample.n
    views = []
    for net, entry in zip(networks, index.entries):
        views.append([_Whitened.of(a, cutoff, threshold) for a in all_layer_activations(net, sample, entry)])
    out = []
    n = len(networks)
    for l in range(depth):
        mat = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                mat[i, j] = mat[j, i] = _pair_similarity(views[i][l], views[j][l], epsilon, n_points)
        out.append(SimilarityMatrix(mat, index, l + 1))
    return out


def build_similarity_matrix(networks, index, layer: int, sample: SampleSpec = SampleSpec(), **kw) -> SimilarityMatrix:
    mats = build_similarity_matrices(networks, index, sample, **kw)
    if not 1 <= layer <= len(mats):
        raise IndexError(f"layer {layer} out of range 1..{len(mats)}")
    return mats[layer - 1]


@dataclass(frozen=True)
class GroupStats:
    mean: float
    min: float
    max: float
    count: int
    variance: float  # unbiased sample variance, 0 for a single value

    @classmethod
    def of(cls, values) -> GroupStats:
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            nan = float("nan")
            return cls(nan, nan, nan, 0, nan)
        var = float(v.var(ddof=1)) if v.size > 1 else 0.0
        return cls(float(v.mean()), float(v.min()), float(v.max()), int(v.size), var)

    @property
    def sem2(self) -> float:
        """Squared standard error of the mean."""
        return self.variance / self.count


@dataclass
class LayerStats:
    layer: int
    self_stats: GroupStats
    same: GroupStats
    cross: dict[int, GroupStats] = field(default_factory=dict)  # keyed by dx' in units of 0.1
    values: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def decompose(matrix: SimilarityMatrix) -> LayerStats:
    """Split a similarity matrix into self, same-position and per-offset groups."""
    index = matrix.index
    index.check_grouped()
    x = index.x_indices
    m = matrix.values
    iu, ju = np.triu_indices(len(x), k=1)
    dx = np.abs(x[iu] - x[ju])
    vals = m[iu, ju]
    groups = {"self": np.diag(m).copy(), "same": vals[dx == 0]}
    cross = {}
    for d in np.unique(dx[dx > 0]).tolist():
        groups[f"dx{d}"] = vals[dx == d]
        cross[int(d)] = GroupStats.of(vals[dx == d])
    return LayerStats(matrix.layer, GroupStats.of(groups["self"]), GroupStats.of(groups["same"]), cross, groups)


def group_sizes(positions: int, seeds: int) -> dict[str, int]:
    """Closed-form group sizes for evenly spaced positions with equal seed counts."""
    sizes = {"self": positions * seeds, "same": positions * seeds * (seeds - 1) // 2}
    for k in range(1, positions):
        sizes[f"dx{k}"] = (positions - k) * seeds * seeds
    return sizes


def reproducibility(stats: LayerStats) -> tuple[float, float]:
    """``<rho_same> / <rho_self>`` with first-order uncorrelated error propagation."""
    same, own = stats.same, stats.self_stats
    if same.count == 0:
        raise ValueError("reproducibility needs at least two seeds per position")
    value = same.mean / own.mean
    rel2 = same.sem2 / same.mean**2 + own.sem2 / own.mean**2
    return value, abs(value) * float(np.sqrt(rel2))


def specificity(stats: LayerStats) -> tuple[float, float]:
    """Mean over offsets of ``|<rho_same> - <rho_dx>| / <rho_same>``, with uncertainty."""
    same = stats.same
    if not stats.cross:
        raise ValueError("specificity needs at least two distinct source positions")
    if same.count == 0:
        raise ValueError("specificity needs at least two seeds per position")
    terms, var = [], 0.0
    for g in stats.cross.values():
        q = g.mean / same.mean
        terms.append(abs(1.0 - q))
        var += q * q * (g.sem2 / g.mean**2 + same.sem2 / same.mean**2)
    d = len(terms)
    return float(np.mean(terms)), float(np.sqrt(var)) / d


METRICS_COLUMNS = [
    "width", "layer", "dimensionality_mean", "dimensionality_min", "dimensionality_max",
    "reproducibility", "reproducibility_uncertainty", "specificity", "specificity_uncertainty",
]


def metrics_rows(stats_by_width: dict[int, list[LayerStats]]) -> list[list]:
    rows = []
    for width in sorted(stats_by_width):
        for st in stats_by_width[width]:
            rep = reproducibility(st)
            spec = specificity(st)
            s = st.self_stats
            rows.append([width, st.layer, s.mean, s.min, s.max, rep[0], rep[1], spec[0], spec[1]])
    return rows


def metrics_report(stats_by_width: dict[int, list[LayerStats]], path=None) -> list[list]:
    """Per-(width, layer) dimensionality, reproducibility and specificity.

    Writes a CSV when ``path`` is given; returns the rows either way.
    """
    rows = metrics_rows(stats_by_width)
    if path is not None:
        write_csv(path, METRICS_COLUMNS, rows)
    return rows


STATS_COLUMNS = ["width", "layer", "group", "dxprime", "mean", "min", "max", "count", "variance"]


def stats_rows(width: int, stats: LayerStats) -> list[list]:
    rows = [
        [width, stats.layer, "self", "", *_stat_cells(stats.self_stats)],
        [width, stats.layer, "dx", f"{0:.1f}", *_stat_cells(stats.same)],
    ]
    for d, g in sorted(stats.cross.items()):
        rows.append([width, stats.layer, "dx", f"{d * XPRIME_UNIT:.1f}", *_stat_cells(g)])
    return rows


def _stat_cells(g: GroupStats) -> list:
    return [g.mean, g.min, g.max, g.count, g.variance]
