"""Layer transfer between source positions: splicing, the four groups, and the ratio.

A recipient takes the first ``n`` hidden layers of a donor trained at
``x'_A`` and learns the task at ``x'_B``.  With ``x'_B == x'_A`` the recipient
is a *selffer*, otherwise a *transfer* network.  In *frozen* mode the copied
layers stay fixed; in *retrained* mode they only provide the initialization.

Layout under the output root::

    transfer/<width>/n<n>/<group>/<donor>_<recipient>/{model.ckpt,record.txt,timing.txt}
    transfer_manifest.csv
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bvp import BVPSpec
from .config import ExperimentConfig, xprime_label, xprime_value
from .experiment import (
    MissingInputError,
    RunKey,
    is_complete,
    load_run,
    run_tasks,
    write_run,
)
from .io import read_csv, sha256_file, write_csv
from .net import MLP, glorot_init, read_checkpoint
from .trainer import TrainConfig, TrainRecord, derive_seed, run_streams, train, tune_allocator

log = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "GROUPS",
    "TransferSpec",
    "TransferOutcome",
    "splice_recipient",
    "train_recipient",
    "run_protocol",
    "transfer_specificity",
    "group_summary",
    "run_transfer_stage",
]

MODES = ("frozen", "retrained")
GROUPS = ("selffer-frozen", "selffer-retrained", "transfer-frozen", "transfer-retrained")
RECIPIENT_CORE_OFFSET = {"selffer": 1000, "transfer": 2000}
TEST_SET_CORE = 3000
TRANSFER_MANIFEST = "transfer_manifest.csv"
OUTCOME_COLUMNS = ["group", "n", "width", "xprime_a", "xprime_b", "donor_seed", "recipient_seed", "final_loss"]
SUMMARY_COLUMNS = ["width", "n", "group", "mean_loss", "min_loss", "max_loss", "count"]
SPECIFICITY_COLUMNS = ["width", "n", "ratio", "min_ratio", "max_ratio"]


def recipient_seed(task: str, x_index: int, depth: int, width: int, k: int) -> int:
    """Recipient seeds live in their own ``seed_core`` ranges, away from ensemble seeds.

    Selffer and transfer recipients use separate ranges, so with ``x'_B == x'_A``
    the transfer group is an independent replica of the selffer group.
    """
    return derive_seed(x_index, 0, depth, width, RECIPIENT_CORE_OFFSET[task] + k)


def task_test_seed(x_index: int, depth: int, width: int) -> int:
    """Test-set seed shared by every recipient learning the task at ``x_index``.

    Recipients of one task are then scored on the same points, so group
    losses differ only through the networks.
    """
    return derive_seed(x_index, 0, depth, width, TEST_SET_CORE)


@dataclass(frozen=True)
class TransferSpec:
    """One recipient training.

    ``x_a``/``x_b`` are source positions in units of 0.1 (``x_b`` is the task
    the recipient learns); ``donor_id`` and ``recipient_id`` are the small seed
    indices used for file names.  ``task`` is ``selffer`` or ``transfer``.
    """

    task: str
    donor_id: int
    x_a: int
    x_b: int
    n: int
    mode: str
    recipient_id: int
    recipient_seed: int
    depth: int

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.n <= self.depth:
            raise ValueError(f"n={self.n} outside 1..{self.depth}")
        if self.task not in ("selffer", "transfer"):
            raise ValueError(f"task must be 'selffer' or 'transfer', got {self.task!r}")
        if self.task == "selffer" and self.x_b != self.x_a:
            raise ValueError("a selffer recipient learns the donor's own task")

    @property
    def group(self) -> str:
        return f"{self.task}-{self.mode}"


@dataclass
class TransferOutcome:
    group: str
    n: int
    width: int
    x_a: int
    x_b: int
    donor_id: int
    recipient_id: int
    final_loss: float
    record: TrainRecord | None = None
    path: Path | None = None

    def __post_init__(self) -> None:
        task, _, mode = self.group.partition("-")
        if self.group not in GROUPS:
            raise ValueError(f"unknown group tag {self.group!r}")
        if task == "selffer" and self.x_a != self.x_b:
            raise ValueError(f"group {self.group!r} inconsistent with x'_A={self.x_a}, x'_B={self.x_b}")

    def row(self) -> list:
        return [
            self.group, self.n, self.width, xprime_label(self.x_a), xprime_label(self.x_b),
            self.donor_id, self.recipient_id, self.final_loss,
        ]


def splice_recipient(donor: MLP, n: int, rng) -> tuple[MLP, list[bool]]:
    """Copy the first ``n`` hidden layers of ``donor``; Glorot-initialize the rest.

    Returns the recipient and a per-layer mask marking the copied layers.  The
    output layer is always freshly initialized.
    """
    if not 1 <= n <= donor.depth:
        raise ValueError(f"can transfer 1..{donor.depth} hidden layers, got n={n}")
    net = glorot_init(donor.widths, rng, donor.activation)
    for l in range(n):
        net.weights[l] = donor.weights[l].copy()
        net.biases[l] = donor.biases[l].copy()
    mask = [l < n for l in range(len(net.weights))]
    return net, mask


def train_recipient(
    donor: MLP, spec: TransferSpec, problem: BVPSpec, config: TrainConfig
) -> tuple[MLP, TrainRecord]:
    """Splice and train one recipient on ``problem`` (the task at ``x'_B``)."""
    test_seed = task_test_seed(spec.x_b, donor.depth, donor.hidden_widths[0])
    config = replace(config, seed=spec.recipient_seed, test_seed=test_seed)
    init_rng = run_streams(spec.recipient_seed)[0]
    net, mask = splice_recipient(donor, spec.n, init_rng)
    frozen = mask if spec.mode == "frozen" else None
    best, record = train(problem, net.widths, config, init=net, frozen=frozen)
    best.metadata.update(
        {"group": spec.group, "n": str(spec.n), "donor": str(spec.donor_id), "recipient": str(spec.recipient_id)}
    )
    return best, record


def protocol_specs(donor_ids, x_a: int, x_b: int, n_values, recipient_ids, depth: int, width: int) -> list[TransferSpec]:
    """Every (n, group, donor, recipient) combination, in a fixed order."""
    specs = []
    for n in n_values:
        for task, task_x in (("selffer", x_a), ("transfer", x_b)):
            for mode in MODES:
                for d in donor_ids:
                    for k in recipient_ids:
                        seed = recipient_seed(task, task_x, depth, width, k)
                        specs.append(TransferSpec(task, d, x_a, task_x, n, mode, k, seed, depth))
    return specs


def run_protocol(
    donors: dict[int, MLP | None],
    x_a: int,
    x_b: int,
    n_values,
    recipient_ids,
    config: TrainConfig,
    problem: BVPSpec = BVPSpec(),
    jobs: int = 1,
) -> list[TransferOutcome]:
    """Train all four groups for each ``n`` and donor/recipient pairing.

    ``donors`` maps donor ids to networks trained at ``x'_A``; a ``None``
    value marks a missing checkpoint.
    """
    missing = sorted(d for d, net in donors.items() if net is None)
    if missing:
        raise MissingInputError(f"missing donor checkpoints: {missing}")
    if not donors:
        raise ValueError("need at least one donor")
    first = next(iter(donors.values()))
    for net in donors.values():
        if net.widths != first.widths:
            raise ValueError("donor architectures differ")
    specs = protocol_specs(sorted(donors), x_a, x_b, n_values, recipient_ids, first.depth, first.hidden_widths[0])
    tasks = [(donors[s.donor_id], s, replace(problem, x_source=xprime_value(s.x_b)), config) for s in specs]
    results = run_tasks(train_recipient, tasks, jobs)
    return [
        TransferOutcome(s.group, s.n, first.hidden_widths[0], s.x_a, s.x_b, s.donor_id, s.recipient_id,
                        rec.final_test_loss, rec)
        for s, (_, rec) in zip(specs, results)
    ]


def _losses(outcomes, group: str, n: int) -> np.ndarray:
    return np.array([o.final_loss for o in outcomes if o.group == group and o.n == n], dtype=np.float64)


def transfer_specificity(outcomes, n: int) -> tuple[float, float, float]:
    """Ratio of mean frozen-transfer to mean frozen-selffer loss at depth ``n``.

    The minimum and maximum run over every (transfer, selffer) loss pair.
    """
    t = _losses(outcomes, "transfer-frozen", n)
    s = _losses(outcomes, "selffer-frozen", n)
    if t.size == 0 or s.size == 0:
        absent = [g for g, v in (("transfer-frozen", t), ("selffer-frozen", s)) if v.size == 0]
        raise ValueError(f"no outcomes for {absent} at n={n}")
    pairs = t[:, None] / s[None, :]
    return float(t.mean() / s.mean()), float(pairs.min()), float(pairs.max())


def group_summary(outcomes) -> list[list]:
    rows = []
    for width in sorted({o.width for o in outcomes}):
        for n in sorted({o.n for o in outcomes if o.width == width}):
            for g in GROUPS:
                v = np.array([o.final_loss for o in outcomes if o.width == width and o.n == n and o.group == g])
                if v.size:
                    rows.append([width, n, g, v.mean(), v.min(), v.max(), v.size])
    return rows


# -- stage orchestration --------------------------------------------------------


def recipient_dir(cfg: ExperimentConfig, width: int, spec: TransferSpec) -> Path:
    return cfg.output / "transfer" / str(width) / f"n{spec.n}" / spec.group / f"{spec.donor_id}_{spec.recipient_id}"


def _train_and_store(cfg: ExperimentConfig, width: int, spec: TransferSpec) -> Path:
    directory = recipient_dir(cfg, width, spec)
    if is_complete(directory):
        return directory
    tune_allocator()
    donor, _ = load_run(cfg, RunKey(width, spec.x_a, spec.donor_id))
    log.info("transfer width=%d n=%d %s donor=%d recipient=%d", width, spec.n, spec.group, spec.donor_id,
             spec.recipient_id)
    net, record = train_recipient(donor, spec, cfg.spec_for(spec.x_b), cfg.training)
    write_run(directory, net, record)
    return directory


def stage_specs(cfg: ExperimentConfig, width: int) -> list[TransferSpec]:
    t = cfg.transfer
    return protocol_specs(
        range(t.donor_seeds), t.xprime_a, t.xprime_b, t.n_values, range(t.recipient_seeds), cfg.depth, width
    )


def run_transfer_stage(cfg: ExperimentConfig, widths=None, jobs: int | None = None) -> dict[str, Path]:
    """Train missing recipients, then write the manifest and the result tables."""
    t = cfg.transfer
    widths = list(t.widths if widths is None else widths)
    donor_keys = [RunKey(w, t.xprime_a, d) for w in widths for d in range(t.donor_seeds)]
    absent = [k for k in donor_keys if not is_complete(_donor_dir(cfg, k))]
    if absent:
        raise MissingInputError(
            "missing donor checkpoints (train them first):\n  "
            + "\n  ".join(str(_donor_dir(cfg, k)) for k in absent)
        )
    for k in donor_keys:
        load_run(cfg, k)  # hash check before any recipient starts
    tasks = [(cfg, w, s) for w in widths for s in stage_specs(cfg, w)]
    run_tasks(_train_and_store, tasks, jobs or cfg.jobs)
    outcomes = collect_outcomes(cfg, widths)
    return write_transfer_outputs(cfg, outcomes)


def _donor_dir(cfg: ExperimentConfig, key: RunKey) -> Path:
    from .experiment import run_dir

    return run_dir(cfg, key)


def collect_outcomes(cfg: ExperimentConfig, widths, verify: bool = False) -> list[TransferOutcome]:
    outcomes = []
    manifest = _manifest(cfg) if verify else None
    for w in widths:
        for s in stage_specs(cfg, w):
            directory = recipient_dir(cfg, w, s)
            if not is_complete(directory):
                raise MissingInputError(f"missing transfer run {directory}")
            if manifest is not None:
                rel = directory.relative_to(cfg.output).as_posix()
                entry = manifest.get(rel)
                if entry is None or entry["checkpoint_sha256"] != sha256_file(directory / "model.ckpt"):
                    from .experiment import ManifestMismatchError

                    raise ManifestMismatchError(f"transfer run {directory} does not match {TRANSFER_MANIFEST}")
            record = TrainRecord.read(directory / "record.txt")
            outcomes.append(
                TransferOutcome(s.group, s.n, w, s.x_a, s.x_b, s.donor_id, s.recipient_id, record.final_test_loss,
                                record, directory)
            )
    return outcomes


def _manifest(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    path = cfg.output / TRANSFER_MANIFEST
    if not path.is_file():
        raise MissingInputError(f"no {TRANSFER_MANIFEST} under {cfg.output}")
    return {row["path"]: row for row in read_csv(path)}


def write_transfer_outputs(cfg: ExperimentConfig, outcomes: list[TransferOutcome]) -> dict[str, Path]:
    out = cfg.output
    rows = []
    for o in outcomes:
        rows.append(
            [
                o.path.relative_to(out).as_posix(),
                sha256_file(o.path / "model.ckpt"),
                sha256_file(o.path / "record.txt"),
                o.final_loss,
            ]
        )
    paths = {"manifest": out / TRANSFER_MANIFEST}
    write_csv(paths["manifest"], ["path", "checkpoint_sha256", "record_sha256", "final_loss"], rows)
    paths["outcomes"] = out / "transfer_outcomes.csv"
    write_csv(paths["outcomes"], OUTCOME_COLUMNS, [o.row() for o in outcomes])
    paths["groups"] = out / "transfer_groups.csv"
    write_csv(paths["groups"], SUMMARY_COLUMNS, group_summary(outcomes))
    spec_rows = []
    for w in sorted({o.width for o in outcomes}):
        mine = [o for o in outcomes if o.width == w]
        for n in sorted({o.n for o in mine}):
            spec_rows.append([w, n, *transfer_specificity(mine, n)])
    paths["specificity"] = out / "transfer_specificity.csv"
    write_csv(paths["specificity"], SPECIFICITY_COLUMNS, spec_rows)
    return paths


def recipient_network(outcome: TransferOutcome) -> MLP:
    if outcome.path is None:
        raise ValueError("outcome has no stored checkpoint")
    return read_checkpoint(outcome.path / "model.ckpt")
