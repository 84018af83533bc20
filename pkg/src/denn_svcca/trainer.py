"""Full-batch Adam training with periodic resampling and patience stopping."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bvp import BVPSpec, TaggedPointSet, sample_test_set, sample_training_set, source_term
from .net import MLP, ParamGradient, batch_loss, batch_streams, glorot_init, loss_param_gradient

log = logging.getLogger(__name__)

__all__ = [
    "AdamParams",
    "AdamState",
    "TrainConfig",
    "TrainRecord",
    "TrainingError",
    "PatienceStopper",
    "adam_step",
    "train",
    "derive_seed",
    "run_streams",
    "tune_allocator",
]


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap instead of fresh mmap pages.

    The training loop allocates the same few hundred-kilobyte arrays every
    epoch; glibc's default mmap threshold turns each into page faults, which
    roughly doubles the epoch time.  No-op off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        return bool(libc.mallopt(m_mmap_threshold, 1 << 30) and libc.mallopt(m_trim_threshold, 1 << 30))
    except (OSError, AttributeError):
        return False


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError(f"invalid Adam hyperparameters {self}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, net: MLP) -> AdamState:
        params = [*net.weights, *net.biases]
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    net: MLP,
    grad: ParamGradient,
    state: AdamState,
    hp: AdamParams = AdamParams(),
    frozen: list[bool] | None = None,
) -> tuple[MLP, AdamState]:
    """One bias-corrected Adam update, in place.

    ``frozen[l]`` marks layer ``l`` (weights and bias) as untouched; its
    moments are not advanced either.
    """
    if not grad.is_finite():
        raise FloatingPointError("non-finite gradient")
    params = [*net.weights, *net.biases]
    grads = grad.arrays()
    if len(params) != len(state.m) or any(p.shape != m.shape for p, m in zip(params, state.m)):
        raise ValueError("Adam state does not match the network's parameter shapes")
    n_layers = len(net.weights)
    state.t += 1
    bc1 = 1.0 - hp.beta1**state.t
    bc2 = 1.0 - hp.beta2**state.t
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if frozen is not None and frozen[i % n_layers]:
            continue
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * (g * g)
        p -= (hp.lr / bc1) * m / (np.sqrt(v / bc2) + hp.eps)
    return net, state


@dataclass(frozen=True)
class TrainConfig:
    resample_every: int = 100
    eval_every: int = 1000
    patience: int = 5
    adam: AdamParams = AdamParams()
    n_interior: int = 1000
    n_per_edge: int = 1000
    test_scale: int = 10
    norm: str = "L2"
    max_epochs: int = 200_000
    seed: int = 0
    test_seed: int | None = None  # overrides the test-set stream; shared across runs when set

    def __post_init__(self) -> None:
        if self.resample_every < 1 or self.eval_every < 1:
            raise ValueError("resample_every and eval_every must be >= 1")
        if self.eval_every % self.resample_every:
            raise ValueError("resample_every must divide eval_every")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.n_interior < 0 or self.n_per_edge < 0 or self.n_interior + self.n_per_edge == 0:
            raise ValueError("need a non-empty training sample")
        if self.test_scale < 1:
            raise ValueError("test_scale must be >= 1")
        if self.norm.upper() not in ("L1", "L2"):
            raise ValueError(f"unknown loss norm {self.norm!r}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.test_seed is not None and not 0 <= self.test_seed < 2**64:
            raise ValueError("test_seed must be a 64-bit unsigned integer")

    def as_dict(self) -> dict[str, str]:
        d = dataclasses.asdict(self)
        adam = d.pop("adam")
        if d["test_seed"] is None:
            del d["test_seed"]
        out = {k: str(v) for k, v in d.items()}
        out.update({f"adam_{k}": repr(v) for k, v in adam.items()})
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> TrainConfig:
        adam = AdamParams(**{k[5:]: float(v) for k, v in d.items() if k.startswith("adam_")})
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in d and f.name != "adam":
                kw[f.name] = d[f.name] if f.name == "norm" else int(d[f.name])
        return cls(adam=adam, **kw)


@dataclass
class TrainRecord:
    spec: BVPSpec
    widths: list[int]
    config: TrainConfig
    eval_epochs: list[int] = field(default_factory=list)
    test_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    final_test_loss: float = float("nan")
    epochs_run: int = 0
    wall_time: float = 0.0
    stop_reason: str = ""
    checkpoint_path: str = ""

    def to_text(self) -> str:
        """key=value header, then one ``epoch loss`` line per evaluation.

        Wall time is left out so that the text depends only on the run's inputs.
        """
        s = self.spec
        lines = [
            "DENN-TRAIN-RECORD",
            "version=1",
            f"x_source={s.x_source!r}",
            f"y_source={s.y_source!r}",
            f"r={s.r!r}",
            f"eta={s.eta!r}",
            "domain=" + ",".join(repr(v) for v in s.domain),
            "widths=" + ",".join(str(w) for w in self.widths),
        ]
        lines += [f"config.{k}={v}" for k, v in self.config.as_dict().items()]
        lines += [
            f"best_epoch={self.best_epoch}",
            f"final_test_loss={float(self.final_test_loss).hex()}",
            f"epochs_run={self.epochs_run}",
            f"stop_reason={self.stop_reason}",
            f"checkpoint_path={self.checkpoint_path}",
            f"history {len(self.test_losses)}",
        ]
        lines += [f"{e} {float(v).hex()}" for e, v in zip(self.eval_epochs, self.test_losses)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> TrainRecord:
        lines = text.splitlines()
        if not lines or lines[0] != "DENN-TRAIN-RECORD":
            raise ValueError("not a training record")
        kv: dict[str, str] = {}
        i = 1
        while i < len(lines) and not lines[i].startswith("history "):
            key, sep, value = lines[i].partition("=")
            if not sep:
                raise ValueError(f"malformed record line {lines[i]!r}")
            kv[key] = value
            i += 1
        if i == len(lines):
            raise ValueError("training record missing history block")
        n_hist = int(lines[i].split()[1])
        hist = [ln.split() for ln in lines[i + 1 : i + 1 + n_hist]]
        if len(hist) != n_hist:
            raise ValueError("truncated history block")
        spec = BVPSpec(
            float(kv["x_source"]),
            float(kv["y_source"]),
            float(kv["r"]),
            float(kv["eta"]),
            tuple(float(v) for v in kv["domain"].split(",")),
        )
        config = TrainConfig.from_dict({k[7:]: v for k, v in kv.items() if k.startswith("config.")})
        return cls(
            spec=spec,
            widths=[int(w) for w in kv["widths"].split(",")],
            config=config,
            eval_epochs=[int(e) for e, _ in hist],
            test_losses=[float.fromhex(v) for _, v in hist],
            best_epoch=int(kv["best_epoch"]),
            final_test_loss=float.fromhex(kv["final_test_loss"]),
            epochs_run=int(kv["epochs_run"]),
            wall_time=float(kv.get("wall_time", "nan")),
            stop_reason=kv["stop_reason"],
            checkpoint_path=kv["checkpoint_path"],
        )

    def write(self, path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def read(cls, path) -> TrainRecord:
        return cls.from_text(Path(path).read_text())


class TrainingError(RuntimeError):
    def __init__(self, message: str, record: TrainRecord | None = None):
        super().__init__(message)
        self.record = record


class PatienceStopper:
    """Stop once ``patience`` consecutive evaluations fail to beat the best loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = float("inf")
        self.bad = 0

    def update(self, loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, should_stop)``; improvement must be strict."""
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def run_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for initialization, training points and test points."""
    init, train, test = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(train), np.random.default_rng(test)


def make_test_set(spec: BVPSpec, config: TrainConfig) -> TaggedPointSet:
    if config.test_seed is not None:
        test_rng = np.random.default_rng(np.random.SeedSequence(config.test_seed).spawn(3)[2])
    else:
        _, _, test_rng = run_streams(config.seed)
    return sample_test_set(test_rng, spec, config.n_interior, config.n_per_edge, config.test_scale)


def frozen_prefix_length(frozen: list[bool] | None, depth: int) -> int:
    """Number of leading frozen hidden layers."""
    n = 0
    while frozen is not None and n < depth and frozen[n]:
        n += 1
    return n


def train(
    spec: BVPSpec,
    widths,
    config: TrainConfig = TrainConfig(),
    init: MLP | None = None,
    frozen: list[bool] | None = None,
) -> tuple[MLP, TrainRecord]:
    """Train a network on one problem; returns the best-evaluated network.

    Each epoch takes one Adam step on the full current training set.  The
    training set is redrawn every ``resample_every`` epochs, the fixed test set
    is scored every ``eval_every`` epochs, and training stops after
    ``patience`` evaluations without strict improvement or at ``max_epochs``.

    ``init`` replaces the Glorot initialization (used for transfer recipients)
    and ``frozen`` marks layers that Adam must leave untouched.  A frozen
    leading block is evaluated once per training set rather than every epoch.
    """
    widths = [int(w) for w in widths]
    init_rng, train_rng, _ = run_streams(config.seed)
    net = glorot_init(widths, init_rng) if init is None else init.copy()
    if net.widths != widths:
        raise ValueError(f"initial network widths {net.widths} != requested {widths}")
    if frozen is not None and len(frozen) != len(net.weights):
        raise ValueError("frozen mask must have one entry per layer")
    net.seed = config.seed
    n_fixed = frozen_prefix_length(frozen, net.depth)
    test_set = make_test_set(spec, config)
    test_source = source_term(test_set.interior_points, spec)
    test_streams = batch_streams(net, test_set, n_fixed) if n_fixed else None
    streams = None

    record = TrainRecord(spec=spec, widths=widths, config=config)
    state = AdamState.zeros_like(net)
    stopper = PatienceStopper(config.patience)
    best = net.copy()
    start = time.perf_counter()
    batch = source = None
    epoch = 0
    try:
        while epoch < config.max_epochs:
            if epoch % config.resample_every == 0:
                batch = sample_training_set(train_rng, spec, config.n_interior, config.n_per_edge)
                source = source_term(batch.interior_points, spec)
                if n_fixed:
                    streams = batch_streams(net, batch, n_fixed)
            loss, grad = loss_param_gradient(net, batch, spec, config.norm, source, n_fixed, streams)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            adam_step(net, grad, state, config.adam, frozen)
            epoch += 1
            if epoch % config.eval_every == 0:
                test_loss = batch_loss(net, test_set, spec, config.norm, test_source, n_fixed, test_streams)
                if not np.isfinite(test_loss):
                    raise FloatingPointError(f"non-finite test loss at epoch {epoch}")
                record.eval_epochs.append(epoch)
                record.test_losses.append(test_loss)
                improved, stop = stopper.update(test_loss)
                log.debug("epoch %d test loss %.6e", epoch, test_loss)
                if improved:
                    best = net.copy()
                    record.best_epoch = epoch
                    record.final_test_loss = test_loss
                if stop:
                    record.stop_reason = "patience"
                    break
        else:
            record.stop_reason = "max_epochs"
    except FloatingPointError as exc:
        record.epochs_run = epoch
        record.stop_reason = "non-finite"
        raise TrainingError(str(exc), record) from exc
    finally:
        record.wall_time = time.perf_counter() - start

    record.epochs_run = epoch
    if not record.test_losses:
        # max_epochs below eval_every: score the final state once
        record.final_test_loss = batch_loss(net, test_set, spec, config.norm, test_source)
        record.eval_epochs.append(epoch)
        record.test_losses.append(record.final_test_loss)
        record.best_epoch = epoch
        best = net.copy()
    best.seed = config.seed
    best.metadata.update(
        {
            "x_source": repr(spec.x_source),
            "best_epoch": str(record.best_epoch),
            "final_test_loss": float(record.final_test_loss).hex(),
        }
    )
    return best, record


_MIX_MULTIPLIERS = (0xBF58476D1CE4E5B9, 0x94D049BB133111EB)
_SEED_FIELDS = (("x_index", 16), ("r_index", 8), ("n_layers", 8), ("width", 16), ("seed_core", 16))


def derive_seed(x_index: int, r_index: int, n_layers: int, width: int, seed_core: int) -> int:
    """64-bit run seed from the experiment coordinates.

    The fields are packed into disjoint bit ranges (16/8/8/16/16 bits) and the
    packed word goes through the SplitMix64 finalizer, which is a bijection on
    64-bit integers, so distinct in-range inputs never collide.
    """
    packed = 0
    for (name, bits), value in zip(_SEED_FIELDS, (x_index, r_index, n_layers, width, seed_core)):
        value = int(value)
        if not 0 <= value < (1 << bits):
            raise ValueError(f"{name}={value} outside [0, {1 << bits})")
        packed = (packed << bits) | value
    mask = (1 << 64) - 1
    z = packed
    z = ((z ^ (z >> 30)) * _MIX_MULTIPLIERS[0]) & mask
    z = ((z ^ (z >> 27)) * _MIX_MULTIPLIERS[1]) & mask
    return z ^ (z >> 31)
