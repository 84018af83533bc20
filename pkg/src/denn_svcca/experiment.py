"""Run-directory layout, ensemble training and manifests.

Layout under the output root::

    runs/<width>/<x'>/<seed>/model.ckpt    best checkpoint
    runs/<width>/<x'>/<seed>/record.txt    training record (completion marker)
    runs/<width>/<x'>/<seed>/timing.txt    wall time (not hashed)
    train_manifest.csv                     one row per completed run, with hashes
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ExperimentConfig, xprime_label, xprime_value
from .io import atomic_write_text, read_csv, sha256_file, write_csv
from .net import MLP, read_checkpoint, write_checkpoint
from .trainer import TrainConfig, TrainRecord, derive_seed, train, tune_allocator

log = logging.getLogger(__name__)

R_INDEX = 0
TRAIN_MANIFEST = "train_manifest.csv"
MANIFEST_COLUMNS = [
    "width", "xprime", "seed_core", "seed", "path",
    "checkpoint_sha256", "record_sha256", "final_test_loss", "best_epoch", "epochs_run",
]


class MissingInputError(FileNotFoundError):
    pass


class ManifestMismatchError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class RunKey:
    width: int
    x_index: int
    seed_core: int


def run_seed(cfg: ExperimentConfig, key: RunKey) -> int:
    return derive_seed(key.x_index, R_INDEX, cfg.depth, key.width, key.seed_core)


def run_dir(cfg: ExperimentConfig, key: RunKey) -> Path:
    return cfg.output / "runs" / str(key.width) / xprime_label(key.x_index) / str(run_seed(cfg, key))


def grid_keys(cfg: ExperimentConfig, widths=None, xprimes=None, seeds=None) -> list[RunKey]:
    """All ensemble runs, optionally filtered by width, x' value and seed index."""
    keys = []
    for w in cfg.widths:
        if widths and w not in widths:
            continue
        for x in cfg.xprime_indices:
            if xprimes and not any(abs(xprime_value(x) - v) < 1e-9 for v in xprimes):
                continue
            for s in range(cfg.seeds):
                if seeds is not None and s not in seeds:
                    continue
                keys.append(RunKey(w, x, s))
    return keys


def is_complete(directory: Path) -> bool:
    return (directory / "record.txt").is_file() and (directory / "model.ckpt").is_file()


def write_run(directory: Path, net: MLP, record: TrainRecord) -> None:
    """Checkpoint first, record last: the record marks the run as complete."""
    directory.mkdir(parents=True, exist_ok=True)
    write_checkpoint(net, directory / "model.ckpt")
    record.checkpoint_path = "model.ckpt"
    atomic_write_text(directory / "timing.txt", f"wall_time={record.wall_time:.3f}\n")
    record.write(directory / "record.txt")


def train_and_store(cfg: ExperimentConfig, key: RunKey) -> Path:
    directory = run_dir(cfg, key)
    if is_complete(directory):
        return directory
    tune_allocator()
    config = replace(cfg.training, seed=run_seed(cfg, key))
    log.info("training width=%d x'=%s seed_core=%d", key.width, xprime_label(key.x_index), key.seed_core)
    net, record = train(cfg.spec_for(key.x_index), cfg.layer_widths(key.width), config)
    net.metadata["seed_core"] = str(key.seed_core)
    write_run(directory, net, record)
    return directory


def run_tasks(fn, tasks, jobs: int) -> list:
    """Map ``fn`` over argument tuples; results come back in input order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def train_grid(cfg: ExperimentConfig, keys: list[RunKey] | None = None, jobs: int | None = None) -> Path:
    """Train every missing run, then rewrite the manifest from all completed runs."""
    keys = grid_keys(cfg) if keys is None else keys
    run_tasks(train_and_store, [(cfg, k) for k in keys], jobs or cfg.jobs)
    return write_train_manifest(cfg)


def write_train_manifest(cfg: ExperimentConfig) -> Path:
    rows = []
    for key in grid_keys(cfg):
        directory = run_dir(cfg, key)
        if not is_complete(directory):
            continue
        record = TrainRecord.read(directory / "record.txt")
        rows.append(
            [
                key.width,
                xprime_label(key.x_index),
                key.seed_core,
                run_seed(cfg, key),
                directory.relative_to(cfg.output).as_posix(),
                sha256_file(directory / "model.ckpt"),
                sha256_file(directory / "record.txt"),
                record.final_test_loss,
                record.best_epoch,
                record.epochs_run,
            ]
        )
    path = cfg.output / TRAIN_MANIFEST
    write_csv(path, MANIFEST_COLUMNS, rows)
    return path


def load_run(cfg: ExperimentConfig, key: RunKey, verify: bool = True) -> tuple[MLP, TrainRecord]:
    """Read a completed run, checking its files against the training manifest."""
    directory = run_dir(cfg, key)
    if not is_complete(directory):
        raise MissingInputError(f"missing run {directory}")
    if verify:
        entry = manifest_entries(cfg).get(directory.relative_to(cfg.output).as_posix())
        if entry is None:
            raise MissingInputError(f"run {directory} is not listed in {TRAIN_MANIFEST}")
        if sha256_file(directory / "model.ckpt") != entry["checkpoint_sha256"]:
            raise ManifestMismatchError(f"checkpoint hash mismatch for {directory}")
        if sha256_file(directory / "record.txt") != entry["record_sha256"]:
            raise ManifestMismatchError(f"record hash mismatch for {directory}")
    return read_checkpoint(directory / "model.ckpt"), TrainRecord.read(directory / "record.txt")


_manifest_cache: dict[Path, tuple[float, dict]] = {}


def manifest_entries(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    path = cfg.output / TRAIN_MANIFEST
    if not path.is_file():
        raise MissingInputError(f"no {TRAIN_MANIFEST} under {cfg.output}; run the train stage first")
    mtime = path.stat().st_mtime_ns
    cached = _manifest_cache.get(path)
    if cached is None or cached[0] != mtime:
        cached = (mtime, {row["path"]: row for row in read_csv(path)})
        _manifest_cache[path] = cached
    return cached[1]


def require_runs(cfg: ExperimentConfig, keys: list[RunKey]) -> None:
    missing = [str(run_dir(cfg, k)) for k in keys if not is_complete(run_dir(cfg, k))]
    if missing:
        raise MissingInputError("missing trained runs:\n  " + "\n  ".join(missing))


def record_train_config(cfg: ExperimentConfig, key: RunKey) -> TrainConfig:
    return replace(cfg.training, seed=run_seed(cfg, key))
