"""Fully-connected tanh networks with exact input derivatives.

The network maps a point ``(x, y)`` to a scalar ``u(x, y)``.  Besides the
value, the forward pass carries the first input derivatives and the pure
second input derivatives (``d2u/dx2``, ``d2u/dy2``) through every layer, which
is all a Laplacian needs.  Parameter gradients of losses built on those
quantities come from a hand-written reverse pass over the recorded layer tape.

Derivative streams are stacked along a leading axis in this order::

    0: value   1: d/dx   2: d/dy   3: d2/dx2   4: d2/dy2
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .bvp import BVPSpec, TaggedPointSet, source_term

__all__ = [
    "MLP",
    "DerivativeBundle",
    "ParamGradient",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointShapeError",
    "CheckpointVersionError",
    "glorot_init",
    "as_rng",
    "forward_activations",
    "forward_value",
    "input_derivatives",
    "forward_with_input_derivatives",
    "loss_param_gradient",
    "batch_loss",
    "write_checkpoint",
    "read_checkpoint",
]

SUPPORTED_ACTIVATIONS = ("tanh",)
N_STREAMS = 5


@dataclass(eq=False)
class MLP:
    """Fully-connected network ``2 -> hidden... -> 1`` with tanh hidden units.

    ``weights[l]`` has shape ``(fan_out, fan_in)``; the last layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    seed: int | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} not supported; piecewise-linear "
                "activations have vanishing second derivatives and cannot fit a Laplacian"
            )
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise ValueError("weights and biases must be non-empty lists of equal length")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        fan_in = self.weights[0].shape[1] if self.weights[0].ndim == 2 else -1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != fan_in:
                raise ValueError(f"layer {l}: weight shape {w.shape} does not chain from fan_in={fan_in}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} != ({w.shape[0]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")
            fan_in = w.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def hidden_widths(self) -> list[int]:
        return self.widths[1:-1]

    @property
    def depth(self) -> int:
        """Number of hidden layers."""
        return len(self.weights) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def copy(self) -> MLP:
        return MLP(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.seed,
            dict(self.metadata),
        )

    def same_parameters(self, other: MLP) -> bool:
        """Exact (bitwise) equality of architecture and parameters."""
        return (
            self.activation == other.activation
            and self.widths == other.widths
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MLP):
            return NotImplemented
        return self.same_parameters(other) and self.seed == other.seed and self.metadata == other.metadata

    __hash__ = None  # type: ignore[assignment]


class DerivativeBundle(NamedTuple):
    value: float
    input_gradient: np.ndarray
    input_pure_second: np.ndarray

    @property
    def laplacian(self) -> float:
        return float(self.input_pure_second.sum())


@dataclass
class ParamGradient:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: MLP) -> ParamGradient:
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def __iadd__(self, other: ParamGradient) -> ParamGradient:
        for a, b in zip(self.arrays(), other.arrays()):
            a += b
        return self


def as_rng(rng: np.random.Generator | int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def glorot_init(widths, rng: np.random.Generator | int, activation: str = "tanh") -> MLP:
    """Glorot-uniform weights and zero biases for the given layer widths.

    Each weight is drawn from ``U(-L, L)`` with ``L = sqrt(6 / (fan_in + fan_out))``.
    Passing an integer seeds a fresh generator, so the result is reproducible.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"invalid layer widths {widths}: need at least two widths, all >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = as_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, activation, None if seed is None else int(seed))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.ndim != 2:
        raise ValueError(f"points must be an (N, d) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite coordinates")
    return pts


def forward_activations(net: MLP, points) -> list[np.ndarray]:
    """Post-activation values of every hidden layer, then the (N, 1) output."""
    a = _as_points(points)
    if a.shape[1] != net.input_dim:
        raise ValueError(f"points have {a.shape[1]} coordinates, network expects {net.input_dim}")
    out = []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.tanh(a @ w.T + b)
        out.append(a)
    out.append(a @ net.weights[-1].T + net.biases[-1])
    return out


def forward_value(net: MLP, points) -> np.ndarray:
    return forward_activations(net, points)[-1][:, 0]


# -- derivative streams -------------------------------------------------------


def _input_streams(x: np.ndarray, order: int) -> np.ndarray:
    n, d = x.shape
    if order == 0:
        return x[None]
    h = np.zeros((1 + 2 * d, n, d))
    h[0] = x
    for i in range(d):
        h[1 + i, :, i] = 1.0
    return h


def _forward_tape(net: MLP, x: np.ndarray, order: int, start: int = 0, h: np.ndarray | None = None):
    """Forward pass carrying derivative streams; returns output streams and tape.

    With ``start > 0``, ``h`` holds the streams leaving hidden layer ``start``
    (see :func:`prefix_streams`) and the pass resumes from there.
    """
    if h is None:
        h = _input_streams(x, order)
    tape = []
    for w, b in zip(net.weights[start:-1], net.biases[start:-1]):
        z = h @ w.T
        z[0] += b
        t = np.tanh(z[0])
        d1 = 1.0 - t * t
        a = np.empty_like(z)
        a[0] = t
        if order:
            d2 = -2.0 * t * d1
            a[1:3] = d1 * z[1:3]
            a[3:5] = d2 * (z[1:3] * z[1:3]) + d1 * z[3:5]
        else:
            d2 = None
        tape.append((h, z, t, d1, d2))
        h = a
    out = h @ net.weights[-1].T
    out[0] += net.biases[-1]
    tape.append((h,))
    return out, tape


def prefix_streams(net: MLP, points, n_layers: int, order: int) -> np.ndarray:
    """Derivative streams after the first ``n_layers`` hidden layers."""
    x = _as_points(points)
    h = _input_streams(x, order)
    for w, b in zip(net.weights[:n_layers], net.biases[:n_layers]):
        z = h @ w.T
        z[0] += b
        t = np.tanh(z[0])
        d1 = 1.0 - t * t
        a = np.empty_like(z)
        a[0] = t
        if order:
            a[1:3] = d1 * z[1:3]
            a[3:5] = (-2.0 * t * d1) * (z[1:3] * z[1:3]) + d1 * z[3:5]
        h = a
    return h


def _backward_tape(net: MLP, tape, g_out: np.ndarray, order: int, start: int = 0) -> ParamGradient:
    """Reverse pass; layers before ``start`` get zero gradient."""
    grad = ParamGradient.zeros_like(net)
    (h,) = tape[-1]
    grad.weights[-1][...] = g_out.reshape(-1, g_out.shape[-1]).T @ h.reshape(-1, h.shape[-1])
    grad.biases[-1][...] = g_out[0].sum(axis=0)
    g = g_out @ net.weights[-1]
    for i in range(len(tape) - 2, -1, -1):
        l = start + i
        h, z, t, d1, d2 = tape[i]
        gz = np.empty_like(g)
        if order:
            d3 = (6.0 * t * t - 2.0) * d1
            zd = z[1:3]
            gz[0] = (
                g[0] * d1
                + (g[1:3] * zd).sum(axis=0) * d2
                + (g[3:5] * (d3 * zd * zd + d2 * z[3:5])).sum(axis=0)
            )
            gz[1:3] = g[1:3] * d1 + 2.0 * g[3:5] * d2 * zd
            gz[3:5] = g[3:5] * d1
        else:
            gz[0] = g[0] * d1
        w = net.weights[l]
        grad.weights[l][...] = gz.reshape(-1, w.shape[0]).T @ h.reshape(-1, w.shape[1])
        grad.biases[l][...] = gz[0].sum(axis=0)
        if i:
            g = gz @ w
    return grad


def input_derivatives(net: MLP, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched value ``(N,)``, input gradient ``(N, 2)`` and pure seconds ``(N, 2)``."""
    x = _as_points(points)
    out, _ = _forward_tape(net, x, order=2)
    out = out[..., 0]
    return out[0], out[1:3].T.copy(), out[3:5].T.copy()


def forward_with_input_derivatives(net: MLP, point) -> DerivativeBundle:
    u, grad, second = input_derivatives(net, point)
    if np.ndim(point) != 1:
        raise ValueError("expected a single point; use input_derivatives for batches")
    return DerivativeBundle(float(u[0]), grad[0], second[0])


# -- losses -------------------------------------------------------------------


def _norm_power(norm: str) -> int:
    key = str(norm).upper()
    if key == "L2":
        return 2
    if key == "L1":
        return 1
    raise ValueError(f"unknown loss norm {norm!r}; expected 'L1' or 'L2'")


def _loss_terms(net: MLP, batch: TaggedPointSet, spec: BVPSpec, norm: str, source=None, want_grad=True,
                frozen_prefix: int = 0, streams=None):
    k = _norm_power(norm)
    if len(batch) == 0:
        raise ValueError("empty batch")
    n_total = len(batch)
    interior, boundary = batch.interior_points, batch.boundary_points
    h_int, h_bnd = streams if streams is not None else (None, None)
    start = frozen_prefix if streams is not None else 0
    loss = 0.0
    grad = ParamGradient.zeros_like(net) if want_grad else None

    if len(interior):
        if source is None:
            source = source_term(interior, spec)
        out, tape = _forward_tape(net, interior, 2, start, h_int)
        res = out[3, :, 0] + out[4, :, 0] - source
        if k == 2:
            loss += float(np.sum(res * res))
            dres = 2.0 * res / n_total
        else:
            loss += float(np.sum(np.abs(res)))
            dres = np.sign(res) / n_total  # subgradient 0 at res == 0
        if want_grad:
            g_out = np.zeros_like(out)
            g_out[3, :, 0] = dres
            g_out[4, :, 0] = dres
            grad += _backward_tape(net, tape, g_out, 2, start)

    if len(boundary) and spec.eta > 0:
        out, tape = _forward_tape(net, boundary, 0, start, h_bnd)
        u = out[0, :, 0]
        if k == 2:
            loss += spec.eta * float(np.sum(u * u))
            du = 2.0 * spec.eta * u / n_total
        else:
            loss += spec.eta * float(np.sum(np.abs(u)))
            du = spec.eta * np.sign(u) / n_total
        if want_grad:
            g_out = np.zeros_like(out)
            g_out[0, :, 0] = du
            grad += _backward_tape(net, tape, g_out, 0, start)

    return loss / n_total, grad


def batch_streams(net: MLP, batch: TaggedPointSet, n_layers: int):
    """Cached prefix streams for a batch whose first ``n_layers`` layers are frozen."""
    return (
        prefix_streams(net, batch.interior_points, n_layers, 2) if batch.n_interior else None,
        prefix_streams(net, batch.boundary_points, n_layers, 0) if batch.n_boundary else None,
    )


def loss_param_gradient(
    net: MLP, batch: TaggedPointSet, spec: BVPSpec, norm: str = "L2", source=None,
    frozen_prefix: int = 0, streams=None,
) -> tuple[float, ParamGradient]:
    """Mean pointwise DGM loss over ``batch`` and its exact parameter gradient.

    ``source`` optionally supplies precomputed source values at the batch's
    interior points.  With the L1 norm a zero residual has subgradient 0.
    ``streams`` (from :func:`batch_streams`) skips the first ``frozen_prefix``
    layers, whose gradient is then reported as zero.
    """
    return _loss_terms(net, batch, spec, norm, source, True, frozen_prefix, streams)


def batch_loss(net: MLP, batch: TaggedPointSet, spec: BVPSpec, norm: str = "L2", source=None,
               frozen_prefix: int = 0, streams=None) -> float:
    """Mean pointwise loss without the reverse pass."""
    return _loss_terms(net, batch, spec, norm, source, False, frozen_prefix, streams)[0]


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = "DENN-MLP-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Malformed or truncated checkpoint file."""


class CheckpointShapeError(CheckpointError):
    """Declared and actual matrix sizes disagree."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


def _fmt(v: float) -> str:
    return float(v).hex()


def format_checkpoint(net: MLP) -> str:
    lines = [
        CHECKPOINT_MAGIC,
        f"version={CHECKPOINT_VERSION}",
        "widths=" + ",".join(str(w) for w in net.widths),
        f"activation={net.activation}",
        f"seed={'' if net.seed is None else net.seed}",
    ]
    for key in sorted(net.metadata):
        value = str(net.metadata[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"metadata entry {key!r} cannot be stored on one line")
        lines.append(f"meta.{key}={value}")
    for l, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        lines.append(f"W{l} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(_fmt(v) for v in row) for row in w)
        lines.append(f"b{l} {b.shape[0]}")
        lines.append(" ".join(_fmt(v) for v in b))
    lines.append("end")
    return "\n".join(lines) + "\n"


def write_checkpoint(net: MLP, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, format_checkpoint(net))


def _parse_row(line: str, expected: int, section: str) -> np.ndarray:
    try:
        vals = [float.fromhex(tok) for tok in line.split()]
    except ValueError as exc:
        raise CheckpointFormatError(f"section {section}: unparseable number ({exc})") from None
    if len(vals) != expected:
        raise CheckpointShapeError(f"section {section}: expected {expected} values per row, found {len(vals)}")
    return np.array(vals)


def parse_checkpoint(text: str) -> MLP:
    lines = text.splitlines()
    pos = 0

    def take(what: str) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointFormatError(f"truncated checkpoint: missing {what}")
        pos += 1
        return lines[pos - 1]

    if take("magic line") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic line)")
    header: dict[str, str] = {}
    meta: dict[str, str] = {}
    while pos < len(lines) and "=" in lines[pos]:
        key, _, value = take("header").partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            header[key] = value
    for key in ("version", "widths", "activation", "seed"):
        if key not in header:
            raise CheckpointFormatError(f"truncated checkpoint: missing header {key!r}")
    if header["version"] != str(CHECKPOINT_VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint version {header['version']!r}")
    try:
        widths = [int(w) for w in header["widths"].split(",")]
    except ValueError:
        raise CheckpointFormatError(f"bad widths line {header['widths']!r}") from None

    weights, biases = [], []
    for l in range(1, len(widths)):
        fan_in, fan_out = widths[l - 1], widths[l]
        tag = f"W{l}"
        parts = take(f"section {tag}").split()
        if not parts or parts[0] != tag or len(parts) != 3:
            raise CheckpointFormatError(f"expected section header {tag!r}, found {' '.join(parts)!r}")
        rows, cols = int(parts[1]), int(parts[2])
        if (rows, cols) != (fan_out, fan_in):
            raise CheckpointShapeError(f"section {tag}: declared {rows}x{cols}, widths imply {fan_out}x{fan_in}")
        w = np.array([_parse_row(take(f"section {tag} row {i}"), cols, tag) for i in range(rows)])
        tag = f"b{l}"
        parts = take(f"section {tag}").split()
        if not parts or parts[0] != tag or len(parts) != 2:
            raise CheckpointFormatError(f"expected section header {tag!r}, found {' '.join(parts)!r}")
        if int(parts[1]) != fan_out:
            raise CheckpointShapeError(f"section {tag}: declared {parts[1]}, widths imply {fan_out}")
        b = _parse_row(take(f"section {tag} values"), fan_out, tag)
        weights.append(w.reshape(fan_out, fan_in))
        biases.append(b)
    if take("end marker").strip() != "end":
        raise CheckpointFormatError("missing end marker")
    seed = int(header["seed"]) if header["seed"] else None
    return MLP(weights, biases, header["activation"], seed, meta)


def read_checkpoint(path) -> MLP:
    return parse_checkpoint(Path(path).read_text())
