import numpy as np
import pytest

from denn_svcca.bvp import GridField
from denn_svcca.config import load_config
from denn_svcca.experiment import ManifestMismatchError, MissingInputError
from denn_svcca.pipeline import linear_fit_correlation, verify_manifest, write_manifest
from denn_svcca.transfer import TransferOutcome, group_summary

DOMAIN = (-1.0, 1.0, -1.0, 1.0)


def field(fn, n=21):
    x = np.linspace(-1, 1, n)
    xx, yy = np.meshgrid(x, x)
    return GridField(n, n, DOMAIN, fn(xx, yy))


def test_linear_field_fits_exactly():
    r, a, b, c = linear_fit_correlation(field(lambda x, y: 0.5 * x - 2 * y + 3))
    assert r == pytest.approx(1.0) and (a, b, c) == pytest.approx((0.5, -2.0, 3.0))


def test_saddle_has_no_linear_part():
    r, a, b, _ = linear_fit_correlation(field(lambda x, y: x * y))
    assert abs(r) < 1e-12 and abs(a) < 1e-12 and abs(b) < 1e-12


def test_sign_flip_keeps_magnitude():
    f = field(lambda x, y: np.tanh(2 * x + y))
    g = field(lambda x, y: -np.tanh(2 * x + y))
    assert abs(linear_fit_correlation(f)[0]) == pytest.approx(abs(linear_fit_correlation(g)[0]))


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nwidths = 16\n")
    return load_config(path, tmp_path)


def test_manifest_round_trip_and_tamper(cfg):
    (cfg.output / "a.txt").write_text("one")
    (cfg.output / "sub").mkdir()
    (cfg.output / "sub" / "b.txt").write_text("two")
    write_manifest(cfg, "m.csv", [cfg.output / "sub" / "b.txt", cfg.output / "a.txt"])
    assert list(verify_manifest(cfg, "m.csv")) == ["a.txt", "sub/b.txt"]
    (cfg.output / "a.txt").write_text("changed")
    with pytest.raises(ManifestMismatchError, match="a.txt"):
        verify_manifest(cfg, "m.csv")
    assert list(verify_manifest(cfg, "m.csv", ["sub/b.txt"])) == ["sub/b.txt"]
    with pytest.raises(MissingInputError, match="not listed"):
        verify_manifest(cfg, "m.csv", ["c.txt"])
    with pytest.raises(MissingInputError):
        verify_manifest(cfg, "other.csv")


def test_group_summary():
    outs = [TransferOutcome("selffer-frozen", 1, 4, 0, 0, 0, k, v) for k, v in enumerate([1.0, 3.0])]
    outs.append(TransferOutcome("transfer-retrained", 1, 4, 0, 6, 0, 0, 5.0))
    assert group_summary(outs) == [[4, 1, "selffer-frozen", 2.0, 1.0, 3.0, 2], [4, 1, "transfer-retrained", 5.0, 5.0, 5.0, 1]]
