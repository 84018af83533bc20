"""Parametrized Poisson problems on a rectangle.

Each member of the family solves ``lap(u) = s`` with ``u = 0`` on the
boundary, where ``-s`` is a normalized Gaussian bump of width ``r`` centred
at ``(x_source, y_source)``.  This module also holds the point samplers used
for training and testing, and a 5-point finite-difference solver used as an
independent reference solution.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "BVPSpec",
    "TaggedPointSet",
    "GridField",
    "FDSolveError",
    "INTERIOR",
    "BOUNDARY",
    "source_term",
    "pointwise_loss",
    "sample_training_set",
    "sample_test_set",
    "fd_solve",
    "relative_l2_error",
]

INTERIOR = "interior"
BOUNDARY = "boundary"


@dataclass(frozen=True)
class BVPSpec:
    x_source: float = 0.0
    y_source: float = 0.0
    r: float = 0.1
    eta: float = 1.0
    domain: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0)

    def __post_init__(self) -> None:
        x0, x1, y0, y1 = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (x0, x1, y0, y1))
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate domain {self.domain}")
        if not self.r > 0:
            raise ValueError(f"source width r must be positive, got {self.r}")
        if not self.eta >= 0:
            raise ValueError(f"boundary weight eta must be nonnegative, got {self.eta}")
        if not (x0 <= self.x_source <= x1 and y0 <= self.y_source <= y1):
            raise ValueError(f"source centre ({self.x_source}, {self.y_source}) outside domain {self.domain}")


def source_term(p, spec: BVPSpec):
    """Negated nascent delta: ``-exp(-d^2 / 2r^2) / (2 pi r^2)``.

    Accepts a single point or an ``(N, 2)`` array.
    """
    p = np.asarray(p, dtype=np.float64)
    dx = p[..., 0] - spec.x_source
    dy = p[..., 1] - spec.y_source
    r2 = spec.r * spec.r
    return -np.exp(-(dx * dx + dy * dy) / (2.0 * r2)) / (2.0 * np.pi * r2)


def pointwise_loss(bundle, p, tag: str, spec: BVPSpec, norm: str = "L2") -> float:
    """Per-point loss: ``|lap u - s|^k`` inside, ``eta |u|^k`` on the boundary."""
    k = {"L2": 2, "L1": 1}.get(str(norm).upper())
    if k is None:
        raise ValueError(f"unknown loss norm {norm!r}")
    if tag == INTERIOR:
        return abs(bundle.laplacian - float(source_term(p, spec))) ** k
    if tag == BOUNDARY:
        return spec.eta * abs(bundle.value) ** k
    raise ValueError(f"unknown point tag {tag!r}")


class TaggedPointSet:
    """Points split into interior and boundary groups (interior rows first)."""

    def __init__(self, interior, boundary):
        self.interior_points = np.asarray(interior, dtype=np.float64).reshape(-1, 2)
        self.boundary_points = np.asarray(boundary, dtype=np.float64).reshape(-1, 2)

    @property
    def points(self) -> np.ndarray:
        return np.vstack([self.interior_points, self.boundary_points])

    @property
    def tags(self) -> list[str]:
        return [INTERIOR] * self.n_interior + [BOUNDARY] * self.n_boundary

    @property
    def is_boundary(self) -> np.ndarray:
        return np.r_[np.zeros(self.n_interior, bool), np.ones(self.n_boundary, bool)]

    @property
    def n_interior(self) -> int:
        return len(self.interior_points)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary_points)

    def counts(self) -> dict[str, int]:
        return {INTERIOR: self.n_interior, BOUNDARY: self.n_boundary}

    def __len__(self) -> int:
        return self.n_interior + self.n_boundary

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaggedPointSet):
            return NotImplemented
        return np.array_equal(self.interior_points, other.interior_points) and np.array_equal(
            self.boundary_points, other.boundary_points
        )


def _open_uniform(rng: np.random.Generator, lo: float, hi: float, n: int) -> np.ndarray:
    out = rng.uniform(lo, hi, n)
    bad = out <= lo
    while np.any(bad):  # probability zero, but keeps the interior open
        out[bad] = rng.uniform(lo, hi, int(bad.sum()))
        bad = out <= lo
    return out


def _edge_points(rng: np.random.Generator, domain, n: int) -> np.ndarray:
    # Half-open edges walked counter-clockwise; each corner belongs to one edge.
    x0, x1, y0, y1 = domain
    u = rng.uniform(0.0, 1.0, (4, n))
    bottom = np.column_stack([x0 + u[0] * (x1 - x0), np.full(n, y0)])
    right = np.column_stack([np.full(n, x1), y0 + u[1] * (y1 - y0)])
    top = np.column_stack([x1 - u[2] * (x1 - x0), np.full(n, y1)])
    left = np.column_stack([np.full(n, x0), y1 - u[3] * (y1 - y0)])
    return np.vstack([bottom, right, top, left])


def sample_training_set(rng, spec: BVPSpec, n_interior: int = 10_000, n_per_edge: int = 10_000) -> TaggedPointSet:
    """Uniform points in the open domain plus ``n_per_edge`` on each of the four edges."""
    if n_interior < 0 or n_per_edge < 0:
        raise ValueError("point counts must be nonnegative")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x0, x1, y0, y1 = spec.domain
    interior = np.column_stack([_open_uniform(rng, x0, x1, n_interior), _open_uniform(rng, y0, y1, n_interior)])
    return TaggedPointSet(interior, _edge_points(rng, spec.domain, n_per_edge))


def sample_test_set(rng, spec: BVPSpec, n_interior: int = 10_000, n_per_edge: int = 10_000, scale: int = 10):
    """Training-style sample with every region's count multiplied by ``scale``."""
    return sample_training_set(rng, spec, n_interior * scale, n_per_edge * scale)


# -- grid fields --------------------------------------------------------------


@dataclass(eq=False)
class GridField:
    """Scalar values at the nodes of a uniform grid; ``values[j, i]`` sits at ``(x_i, y_j)``."""

    nx: int
    ny: int
    domain: tuple[float, float, float, float]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.ny, self.nx)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid field contains non-finite values")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.domain[0], self.domain[1], self.nx)

    @property
    def y(self) -> np.ndarray:
        return np.linspace(self.domain[2], self.domain[3], self.ny)

    def nodes(self) -> np.ndarray:
        """Node coordinates as ``(ny * nx, 2)`` in row-major order."""
        return grid_points(self.nx, self.ny, self.domain)

    def to_text(self) -> str:
        x0, x1, y0, y1 = self.domain
        lines = [f"{self.nx} {self.ny} {x0!r} {x1!r} {y0!r} {y1!r}"]
        lines.extend(" ".join(repr(float(v)) for v in row) for row in self.values)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> GridField:
        tokens = text.split()
        if len(tokens) < 6:
            raise ValueError("grid field text missing header")
        nx, ny = int(tokens[0]), int(tokens[1])
        domain = tuple(float(t) for t in tokens[2:6])
        vals = np.array([float(t) for t in tokens[6:]])
        if vals.size != nx * ny:
            raise ValueError(f"grid field declares {nx}x{ny} values, found {vals.size}")
        return cls(nx, ny, domain, vals)

    def write(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def read(cls, path) -> GridField:
        return cls.from_text(Path(path).read_text())

    def write_pgm(self, path) -> None:
        write_pgm(path, self.values[::-1])  # top image row = largest y


def grid_points(nx: int, ny: int, domain) -> np.ndarray:
    x0, x1, y0, y1 = domain
    xx, yy = np.meshgrid(np.linspace(x0, x1, nx), np.linspace(y0, y1, ny))
    return np.column_stack([xx.ravel(), yy.ravel()])


def write_pgm(path, image) -> None:
    """8-bit binary PGM with linear min-max scaling; limits go to ``<path>.txt``."""
    from .io import atomic_write_bytes, atomic_write_text

    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + pixels.tobytes())
    atomic_write_text(str(path) + ".txt", f"min={lo!r}\nmax={hi!r}\nlevels=255\nscaling=linear\n")


def read_pgm(path) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`write_pgm` up to 8-bit quantization."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
    meta = dict(line.split("=", 1) for line in Path(str(path) + ".txt").read_text().split())
    return pixels, float(meta["min"]), float(meta["max"])


# -- finite-difference reference solver ----------------------------------------


class FDSolveError(RuntimeError):
    pass


def fd_solve(spec: BVPSpec, n: int = 129, source: Callable | None = None, tol: float = 1e-10) -> GridField:
    """Solve ``lap(u) = s``, ``u = 0`` on the boundary, with the 5-point stencil.

    The grid has ``n`` nodes per side including boundary nodes.  ``source``
    overrides the Gaussian source of ``spec`` (used for manufactured solutions).
    """
    if n < 3:
        raise ValueError(f"grid resolution must be >= 3, got {n}")
    x0, x1, y0, y1 = spec.domain
    hx, hy = (x1 - x0) / (n - 1), (y1 - y0) / (n - 1)
    m = n - 2
    pts = grid_points(n, n, spec.domain).reshape(n, n, 2)[1:-1, 1:-1].reshape(-1, 2)
    f = source(pts) if source is not None else source_term(pts, spec)
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), (m * m,)).copy()

    lap = laplacian_matrix(m, hx, hy)
    u = spla.spsolve(lap, f)
    resid = np.max(np.abs(lap @ u - f)) if m else 0.0
    scale = max(1.0, float(np.max(np.abs(f)))) if m else 1.0
    if not np.all(np.isfinite(u)) or resid > tol * scale:
        raise FDSolveError(f"finite-difference solve failed: residual {resid:.3e} exceeds {tol * scale:.3e}")

    full = np.zeros((n, n))
    full[1:-1, 1:-1] = u.reshape(m, m)
    return GridField(n, n, spec.domain, full)


def laplacian_matrix(m: int, hx: float, hy: float) -> sp.csc_matrix:
    """5-point Laplacian on an ``m x m`` block of interior nodes (x varies fastest)."""
    d2 = sp.diags([np.ones(m - 1), -2.0 * np.ones(m), np.ones(m - 1)], [-1, 0, 1], shape=(m, m))
    eye = sp.identity(m)
    return (sp.kron(eye, d2) / hx**2 + sp.kron(d2, eye) / hy**2).tocsc()


def discrete_residual(field: GridField, spec: BVPSpec, source: Callable | None = None) -> np.ndarray:
    """Stencil residual at every interior node of ``field``."""
    u = field.values
    hx = (field.domain[1] - field.domain[0]) / (field.nx - 1)
    hy = (field.domain[3] - field.domain[2]) / (field.ny - 1)
    lap = (u[1:-1, 2:] - 2 * u[1:-1, 1:-1] + u[1:-1, :-2]) / hx**2 + (
        u[2:, 1:-1] - 2 * u[1:-1, 1:-1] + u[:-2, 1:-1]
    ) / hy**2
    pts = field.nodes().reshape(field.ny, field.nx, 2)[1:-1, 1:-1]
    s = source(pts.reshape(-1, 2)).reshape(lap.shape) if source is not None else source_term(pts, spec)
    return lap - s


def relative_l2_error(net, oracle: GridField) -> float:
    """``||u_net - u_ref|| / ||u_ref||`` over the oracle's grid nodes.

    ``net`` is an :class:`~denn_svcca.net.MLP` or any callable mapping
    ``(N, 2)`` points to ``(N,)`` values.
    """
    from .net import MLP, forward_value

    pts = oracle.nodes()
    pred = forward_value(net, pts) if isinstance(net, MLP) else np.asarray(net(pts), dtype=np.float64)
    ref = oracle.values.ravel()
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise ValueError("reference field is identically zero")
    return float(np.linalg.norm(pred - ref) / denom)
