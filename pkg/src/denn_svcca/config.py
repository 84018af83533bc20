"""Experiment configuration files.

A configuration is an INI file with the sections ``experiment``, ``problem``,
``training``, ``svcca``, ``transfer``, ``oracle`` and ``components``.  Every
key is optional; missing keys take the desk-scale defaults below.  Source
positions are stored internally as integer multiples of 0.1 so that
differences between them bin exactly.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bvp import BVPSpec
from .trainer import AdamParams, TrainConfig

XPRIME_UNIT = 0.1
OUTPUT_ENV = "DENN_SVCCA_OUTPUT"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def xprime_index(value: float, field: str = "x'") -> int:
    idx = round(value / XPRIME_UNIT)
    if abs(idx * XPRIME_UNIT - value) > 1e-9:
        raise ConfigError(field, f"{value} is not a multiple of {XPRIME_UNIT}")
    return idx


def xprime_value(index: int) -> float:
    return round(index * XPRIME_UNIT, 10)


def xprime_label(index: int) -> str:
    return f"{xprime_value(index):.1f}"


@dataclass(frozen=True)
class SVCCASettings:
    grid: int = 100
    epsilon: float = 1e-10
    threshold: float | None = None


@dataclass(frozen=True)
class TransferSettings:
    xprime_a: int = 0
    xprime_b: int = 6
    n_values: tuple[int, ...] = (1, 2, 3, 4)
    widths: tuple[int, ...] = (16,)
    donor_seeds: int = 2
    recipient_seeds: int = 2


@dataclass(frozen=True)
class ComponentSettings:
    grid: int = 50
    count: int = 9
    layer: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    widths: tuple[int, ...] = (8, 16, 20)
    depth: int = 4
    xprime_indices: tuple[int, ...] = (0, 2, 4, 6)
    seeds: int = 3
    problem: BVPSpec = BVPSpec()
    training: TrainConfig = TrainConfig(max_epochs=20_000)
    svcca: SVCCASettings = SVCCASettings()
    transfer: TransferSettings = TransferSettings()
    oracle_n: int = 129
    components: ComponentSettings = ComponentSettings()
    output: Path = Path("runs_out")
    jobs: int = 1
    extra: dict = field(default_factory=dict, compare=False)

    def spec_for(self, x_index: int) -> BVPSpec:
        return replace(self.problem, x_source=xprime_value(x_index))

    def layer_widths(self, width: int) -> list[int]:
        return [2] + [width] * self.depth + [1]


def _get(parser, section, key, conv, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r} ({exc})") from None


def _int_list(raw: str) -> tuple[int, ...]:
    vals = tuple(int(v) for v in raw.replace(",", " ").split())
    if not vals:
        raise ValueError("empty list")
    return vals


def _opt_float(raw: str) -> float | None:
    return None if raw.lower() in ("", "none") else float(raw)


KNOWN_KEYS = {
    "experiment": {"widths", "depth", "xprime_start", "xprime_step", "xprime_count", "seeds", "output", "jobs"},
    "problem": {"y_source", "r", "eta"},
    "training": {
        "resample_every", "eval_every", "patience", "lr", "beta1", "beta2", "epsilon",
        "n_interior", "n_per_edge", "test_scale", "norm", "max_epochs",
    },
    "svcca": {"grid", "epsilon", "threshold"},
    "transfer": {"xprime_a", "xprime_b", "n_values", "widths", "donor_seeds", "recipient_seeds"},
    "oracle": {"n"},
    "components": {"grid", "count", "layer"},
}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(section, "unknown section")
        for key in parser.options(section):
            if key not in KNOWN_KEYS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")

    d = ExperimentConfig()
    ex = "experiment"
    widths = _get(parser, ex, "widths", _int_list, d.widths)
    if min(widths) < 1:
        raise ConfigError("experiment.widths", "widths must be >= 1")
    depth = _get(parser, ex, "depth", int, d.depth)
    if depth < 1:
        raise ConfigError("experiment.depth", "need at least one hidden layer")
    start = xprime_index(_get(parser, ex, "xprime_start", float, 0.0), "experiment.xprime_start")
    step = xprime_index(_get(parser, ex, "xprime_step", float, 0.2), "experiment.xprime_step")
    count = _get(parser, ex, "xprime_count", int, len(d.xprime_indices))
    if count < 1 or step < 1:
        raise ConfigError("experiment.xprime_count", "need count >= 1 and a positive step")
    indices = tuple(start + k * step for k in range(count))
    seeds = _get(parser, ex, "seeds", int, d.seeds)
    if seeds < 1:
        raise ConfigError("experiment.seeds", "need at least one seed")
    jobs = _get(parser, ex, "jobs", int, d.jobs)
    if jobs < 1:
        raise ConfigError("experiment.jobs", "must be >= 1")
    output = Path(_get(parser, ex, "output", str, str(d.output)))
    if not output.is_absolute() and base_dir is not None:
        output = base_dir / output

    pr = "problem"
    try:
        problem = BVPSpec(
            x_source=0.0,
            y_source=_get(parser, pr, "y_source", float, d.problem.y_source),
            r=_get(parser, pr, "r", float, d.problem.r),
            eta=_get(parser, pr, "eta", float, d.problem.eta),
        )
        for idx in indices:
            replace(problem, x_source=xprime_value(idx))
    except ValueError as exc:
        raise ConfigError("problem", str(exc)) from None

    tr, dt = "training", d.training
    try:
        adam = AdamParams(
            lr=_get(parser, tr, "lr", float, dt.adam.lr),
            beta1=_get(parser, tr, "beta1", float, dt.adam.beta1),
            beta2=_get(parser, tr, "beta2", float, dt.adam.beta2),
            eps=_get(parser, tr, "epsilon", float, dt.adam.eps),
        )
        training = TrainConfig(
            resample_every=_get(parser, tr, "resample_every", int, dt.resample_every),
            eval_every=_get(parser, tr, "eval_every", int, dt.eval_every),
            patience=_get(parser, tr, "patience", int, dt.patience),
            adam=adam,
            n_interior=_get(parser, tr, "n_interior", int, dt.n_interior),
            n_per_edge=_get(parser, tr, "n_per_edge", int, dt.n_per_edge),
            test_scale=_get(parser, tr, "test_scale", int, dt.test_scale),
            norm=_get(parser, tr, "norm", str, dt.norm).upper(),
            max_epochs=_get(parser, tr, "max_epochs", int, dt.max_epochs),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None

    sv, ds = "svcca", d.svcca
    svcca = SVCCASettings(
        grid=_get(parser, sv, "grid", int, ds.grid),
        epsilon=_get(parser, sv, "epsilon", float, ds.epsilon),
        threshold=_get(parser, sv, "threshold", _opt_float, ds.threshold),
    )
    if svcca.grid < 2:
        raise ConfigError("svcca.grid", "grid must be >= 2")
    if svcca.epsilon < 0:
        raise ConfigError("svcca.epsilon", "must be >= 0")
    if svcca.threshold is not None and not 0 < svcca.threshold <= 1:
        raise ConfigError("svcca.threshold", "variance fraction must lie in (0, 1]")

    tf, dtf = "transfer", d.transfer
    transfer = TransferSettings(
        xprime_a=xprime_index(_get(parser, tf, "xprime_a", float, 0.0), "transfer.xprime_a"),
        xprime_b=xprime_index(_get(parser, tf, "xprime_b", float, 0.6), "transfer.xprime_b"),
        n_values=_get(parser, tf, "n_values", _int_list, dtf.n_values),
        widths=_get(parser, tf, "widths", _int_list, dtf.widths),
        donor_seeds=_get(parser, tf, "donor_seeds", int, dtf.donor_seeds),
        recipient_seeds=_get(parser, tf, "recipient_seeds", int, dtf.recipient_seeds),
    )
    if any(not 1 <= n <= depth for n in transfer.n_values):
        raise ConfigError("transfer.n_values", f"each n must lie in 1..{depth}")
    if transfer.donor_seeds < 1 or transfer.recipient_seeds < 1:
        raise ConfigError("transfer.donor_seeds", "need at least one donor and one recipient seed")
    if transfer.xprime_a not in indices:
        raise ConfigError("transfer.xprime_a", "donors come from the ensemble, so x'_A must be on the x' grid")
    if not set(transfer.widths) <= set(widths):
        raise ConfigError("transfer.widths", "transfer widths must be among experiment.widths")
    try:
        replace(problem, x_source=xprime_value(transfer.xprime_b))
    except ValueError as exc:
        raise ConfigError("transfer.xprime_b", str(exc)) from None
    if transfer.donor_seeds > seeds:
        raise ConfigError("transfer.donor_seeds", f"only {seeds} ensemble seeds are trained")

    oracle_n = _get(parser, "oracle", "n", int, d.oracle_n)
    if oracle_n < 3:
        raise ConfigError("oracle.n", "grid resolution must be >= 3")
    co, dc = "components", d.components
    components = ComponentSettings(
        grid=_get(parser, co, "grid", int, dc.grid),
        count=_get(parser, co, "count", int, dc.count),
        layer=_get(parser, co, "layer", int, dc.layer),
    )
    if components.grid < 2:
        raise ConfigError("components.grid", "grid must be >= 2")
    if not 1 <= components.layer <= depth:
        raise ConfigError("components.layer", f"layer must lie in 1..{depth}")

    return ExperimentConfig(
        widths=widths,
        depth=depth,
        xprime_indices=indices,
        seeds=seeds,
        problem=problem,
        training=training,
        svcca=svcca,
        transfer=transfer,
        oracle_n=oracle_n,
        components=components,
        output=output,
        jobs=jobs,
    )


def load_config(path, output_override: str | os.PathLike | None = None) -> ExperimentConfig:
    """Read a config file; ``--out`` or ``$DENN_SVCCA_OUTPUT`` override the output root."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"no such file {path}")
    cfg = parse_config(path.read_text(), base_dir=path.parent)
    override = output_override or os.environ.get(OUTPUT_ENV)
    if override:
        cfg = replace(cfg, output=Path(override))
    return cfg


DESK_CONFIG = """\
# Desk-scale experiment: CPU-tractable analogue of the full study.
[experiment]
widths = 8, 16, 20
depth = 4
xprime_start = 0.0
xprime_step = 0.2
xprime_count = 4
seeds = 3
output = runs_desk
jobs = 1

[problem]
y_source = 0.0
r = 0.1
eta = 1.0

[training]
resample_every = 100
eval_every = 1000
patience = 5
lr = 0.001
beta1 = 0.9
beta2 = 0.999
epsilon = 1e-8
n_interior = 1000
n_per_edge = 1000
test_scale = 10
norm = L2
max_epochs = 20000

[svcca]
grid = 100
epsilon = 1e-10
threshold = none

[transfer]
xprime_a = 0.0
xprime_b = 0.6
n_values = 1, 4
widths = 16
donor_seeds = 2
recipient_seeds = 2

[oracle]
n = 129

[components]
grid = 50
count = 9
layer = 1
"""
