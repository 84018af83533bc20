"""Analysis stages that consume trained runs and emit the data products.

Every stage verifies the hashes of its inputs against the upstream manifest
and finishes by writing its own manifest, listing each emitted file with a
SHA-256 hash.  Outputs, relative to the output root::

    analysis/<width>/similarity_L<l>.{txt,csv,pgm}   similarity matrices
    analysis/stats.csv                              decomposed group statistics
    analysis/lines.csv                              similarity vs dx' (mean, min, max)
    analysis/dimensionality.csv                     per-network self-similarity
    analysis_manifest.csv
    metrics.csv, metrics_manifest.csv               per-(width, layer) metrics
    oracle/<x'>/field.{txt,pgm}, oracle_errors.csv, oracle_manifest.csv
    components/<width>/<x'>/<seed>/L<l>_pc<i>.{txt,pgm}, components.csv, components_manifest.csv
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .bvp import GridField, fd_solve, relative_l2_error
from .config import ExperimentConfig, xprime_label
from .experiment import (
    ManifestMismatchError,
    MissingInputError,
    RunKey,
    grid_keys,
    load_run,
    require_runs,
    run_seed,
    run_tasks,
)
from .generality import (
    STATS_COLUMNS,
    EnsembleIndex,
    SimilarityMatrix,
    build_similarity_matrices,
    decompose,
    metrics_report,
    stats_rows,
)
from .io import read_csv, sha256_file, write_csv
from .svcca import SampleSpec, component_fields, principal_analysis, sample_activations

log = logging.getLogger(__name__)

ANALYSIS_MANIFEST = "analysis_manifest.csv"
MANIFEST_COLUMNS = ["path", "sha256"]


def write_manifest(cfg: ExperimentConfig, name: str, paths) -> Path:
    rows = sorted([Path(p).relative_to(cfg.output).as_posix(), sha256_file(p)] for p in paths)
    path = cfg.output / name
    write_csv(path, MANIFEST_COLUMNS, rows)
    return path


def verify_manifest(cfg: ExperimentConfig, name: str, wanted=None) -> dict[str, Path]:
    """Check listed files (or only ``wanted`` relative paths) against their hashes."""
    path = cfg.output / name
    if not path.is_file():
        raise MissingInputError(f"no {name} under {cfg.output}; run the upstream stage first")
    entries = {row["path"]: row["sha256"] for row in read_csv(path)}
    check = entries if wanted is None else wanted
    out = {}
    for rel in check:
        if rel not in entries:
            raise MissingInputError(f"{rel} is not listed in {name}")
        file = cfg.output / rel
        if not file.is_file():
            raise MissingInputError(f"missing {file}")
        if sha256_file(file) != entries[rel]:
            raise ManifestMismatchError(f"hash mismatch for {file} (listed in {name})")
        out[rel] = file
    return out


def sample_spec(cfg: ExperimentConfig) -> SampleSpec:
    return SampleSpec(cfg.svcca.grid, cfg.problem.domain)


def ensemble(cfg: ExperimentConfig, width: int):
    """Networks of one width, grouped by x', with their ensemble index."""
    keys = grid_keys(cfg, widths=[width])
    require_runs(cfg, keys)
    nets = [load_run(cfg, k)[0] for k in keys]
    return nets, EnsembleIndex(tuple((k.x_index, k.seed_core) for k in keys), width, cfg.depth)


# -- analyze ------------------------------------------------------------------


def _analyze_width(cfg: ExperimentConfig, width: int) -> tuple[list[Path], list[list], list[list]]:
    nets, index = ensemble(cfg, width)
    log.info("similarity matrices for width %d (%d networks)", width, len(nets))
    mats = build_similarity_matrices(nets, index, sample_spec(cfg), cfg.svcca.epsilon, cfg.svcca.threshold)
    directory = cfg.output / "analysis" / str(width)
    directory.mkdir(parents=True, exist_ok=True)
    files, stats, dims = [], [], []
    for m in mats:
        stem = directory / f"similarity_L{m.layer}"
        m.write(stem)
        files += [Path(f"{stem}.{ext}") for ext in ("txt", "csv", "pgm", "pgm.txt")]
        stats += stats_rows(width, decompose(m))
        for (x, s), v in zip(index.entries, np.diag(m.values)):
            dims.append([width, m.layer, xprime_label(x), s, v])
    return files, stats, dims


def analyze(cfg: ExperimentConfig, widths=None, jobs: int | None = None) -> Path:
    widths = list(cfg.widths if not widths else widths)
    results = run_tasks(_analyze_width, [(cfg, w) for w in widths], jobs or cfg.jobs)
    files, stats, dims = [], [], []
    for f, s, d in results:
        files += f
        stats += s
        dims += d
    root = cfg.output / "analysis"
    write_csv(root / "stats.csv", STATS_COLUMNS, stats)
    lines = [r[:2] + r[3:7] for r in stats if r[2] == "dx"]
    write_csv(root / "lines.csv", ["width", "layer", "dxprime", "mean", "min", "max"], lines)
    write_csv(root / "dimensionality.csv", ["width", "layer", "xprime", "seed", "self_similarity"], dims)
    files += [root / "stats.csv", root / "lines.csv", root / "dimensionality.csv"]
    return write_manifest(cfg, ANALYSIS_MANIFEST, files)


def load_matrices(cfg: ExperimentConfig, width: int) -> list[SimilarityMatrix]:
    wanted = [f"analysis/{width}/similarity_L{l}.txt" for l in range(1, cfg.depth + 1)]
    files = verify_manifest(cfg, ANALYSIS_MANIFEST, wanted)
    return [SimilarityMatrix.from_text(files[w].read_text()) for w in wanted]


# -- metrics ------------------------------------------------------------------


def metrics(cfg: ExperimentConfig, widths=None) -> Path:
    widths = list(cfg.widths if not widths else widths)
    stats = {w: [decompose(m) for m in load_matrices(cfg, w)] for w in widths}
    path = cfg.output / "metrics.csv"
    metrics_report(stats, path)
    return write_manifest(cfg, "metrics_manifest.csv", [path])


# -- oracle -------------------------------------------------------------------


def oracle(cfg: ExperimentConfig, widths=None, xprimes=None, seeds=None) -> Path:
    """Finite-difference reference solutions and the error table of completed runs."""
    files = []
    fields = {}
    for x in cfg.xprime_indices:
        if xprimes and xprime_label(x) not in {f"{v:.1f}" for v in xprimes}:
            continue
        field = fd_solve(cfg.spec_for(x), cfg.oracle_n)
        directory = cfg.output / "oracle" / xprime_label(x)
        directory.mkdir(parents=True, exist_ok=True)
        field.write(directory / "field.txt")
        field.write_pgm(directory / "field.pgm")
        files += [directory / "field.txt", directory / "field.pgm", directory / "field.pgm.txt"]
        fields[x] = field
    rows = []
    for key in grid_keys(cfg, widths, xprimes, seeds):
        if key.x_index not in fields:
            continue
        try:
            net, record = load_run(cfg, key)
        except MissingInputError:
            continue
        rows.append(
            [key.width, xprime_label(key.x_index), key.seed_core, run_seed(cfg, key),
             relative_l2_error(net, fields[key.x_index]), record.final_test_loss]
        )
    table = cfg.output / "oracle_errors.csv"
    write_csv(table, ["width", "xprime", "seed_core", "seed", "relative_l2_error", "final_test_loss"], rows)
    files.append(table)
    return write_manifest(cfg, "oracle_manifest.csv", files)


# -- components ---------------------------------------------------------------


def linear_fit_correlation(field: GridField) -> tuple[float, float, float, float]:
    """Least-squares fit ``a x + b y + c`` to a field; returns ``(r, a, b, c)``."""
    pts = field.nodes()
    v = field.values.ravel()
    design = np.column_stack([pts, np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(design, v, rcond=None)
    fit = design @ coef
    r = float(np.corrcoef(fit, v)[0, 1]) if np.std(fit) > 0 else 0.0
    return r, float(coef[0]), float(coef[1]), float(coef[2])


COMPONENT_COLUMNS = ["width", "xprime", "seed", "layer", "component", "self_correlation", "linear_r", "a", "b", "c"]


def components(cfg: ExperimentConfig, widths=None, xprimes=None, seeds=None) -> Path:
    """Principal-component fields of the configured layer for the selected networks.

    Without filters: the widest network at the first x', seed 0.
    """
    if not (widths or xprimes or seeds is not None):
        keys = [RunKey(max(cfg.widths), cfg.xprime_indices[0], 0)]
    else:
        keys = grid_keys(cfg, widths, xprimes, seeds)
    if not keys:
        raise MissingInputError("network selection matched no runs")
    require_runs(cfg, keys)
    settings = cfg.components
    files, rows = [], []
    for key in keys:
        net, _ = load_run(cfg, key)
        layer = settings.layer
        acts = sample_activations(net, layer, sample_spec(cfg))
        result = principal_analysis(acts, cfg.svcca.epsilon)
        directory = cfg.output / "components" / str(key.width) / xprime_label(key.x_index) / str(key.seed_core)
        directory.mkdir(parents=True, exist_ok=True)
        for comp in component_fields(result, net, layer, settings.grid, cfg.problem.domain, settings.count):
            stem = directory / f"L{layer}_pc{comp.index}"
            comp.field.write(f"{stem}.txt")
            comp.field.write_pgm(f"{stem}.pgm")
            files += [Path(f"{stem}.txt"), Path(f"{stem}.pgm"), Path(f"{stem}.pgm.txt")]
            rows.append(
                [key.width, xprime_label(key.x_index), key.seed_core, layer, comp.index, comp.correlation,
                 *linear_fit_correlation(comp.field)]
            )
    table = cfg.output / "components.csv"
    write_csv(table, COMPONENT_COLUMNS, rows)
    files.append(table)
    return write_manifest(cfg, "components_manifest.csv", files)
