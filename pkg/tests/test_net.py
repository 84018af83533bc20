import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denn_svcca.bvp import BVPSpec, TaggedPointSet
from denn_svcca.net import (
    MLP,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    batch_loss,
    batch_streams,
    forward_activations,
    forward_value,
    forward_with_input_derivatives,
    format_checkpoint,
    glorot_init,
    input_derivatives,
    loss_param_gradient,
    parse_checkpoint,
    read_checkpoint,
    write_checkpoint,
)

from oracles import fd_input_gradient, fd_param_gradient, fd_pure_second, flat_params, plain_forward


def test_glorot_bound_and_zero_biases():
    net = glorot_init([2, 20, 20, 1], 0)
    limit = np.sqrt(6 / 22)
    assert limit == pytest.approx(0.5222329678670935)
    assert np.abs(net.weights[0]).max() <= limit
    assert np.abs(net.weights[0]).max() > 0.9 * limit
    assert all(np.all(b == 0) for b in net.biases)


def test_glorot_same_seed_same_net():
    assert glorot_init([2, 8, 1], 3).same_parameters(glorot_init([2, 8, 1], 3))
    assert not glorot_init([2, 8, 1], 3).same_parameters(glorot_init([2, 8, 1], 4))


def test_single_unit_value():
    net = MLP([np.array([[1.0, 0.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    assert forward_value(net, [0.5, 0.3])[0] == pytest.approx(0.46211715726000974, abs=1e-12)


def test_single_unit_derivatives():
    # u = tanh(x): u' = sech^2, u'' = -2 tanh sech^2
    net = MLP([np.array([[1.0, 0.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    b = forward_with_input_derivatives(net, np.array([0.5, 0.3]))
    t = np.tanh(0.5)
    assert b.input_gradient == pytest.approx([1 - t * t, 0.0], abs=1e-14)
    assert b.input_pure_second == pytest.approx([-2 * t * (1 - t * t), 0.0], abs=1e-14)
    assert b.laplacian == pytest.approx(-2 * t * (1 - t * t))


def test_rejects_relu():
    with pytest.raises(ValueError, match="piecewise-linear"):
        MLP([np.ones((3, 2)), np.ones((1, 3))], [np.zeros(3), np.zeros(1)], activation="relu")


def test_rejects_bad_shapes():
    with pytest.raises(ValueError, match="does not chain"):
        MLP([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(ValueError, match="bias shape"):
        MLP([np.ones((3, 2))], [np.zeros(2)])


def test_rejects_nonfinite_points(small_net):
    with pytest.raises(ValueError, match="non-finite"):
        forward_value(small_net, [np.nan, 0.0])


def test_forward_matches_plain(deep_net, rng):
    x = rng.uniform(-1, 1, (50, 2))
    np.testing.assert_allclose(forward_value(deep_net, x), plain_forward(deep_net, x), rtol=0, atol=1e-14)
    acts = forward_activations(deep_net, x)
    assert [a.shape for a in acts] == [(50, 6)] * 4 + [(50, 1)]


def test_input_derivatives_match_fd(deep_net, rng):
    for p in rng.uniform(-1, 1, (20, 2)):
        b = forward_with_input_derivatives(deep_net, p)
        np.testing.assert_allclose(b.input_gradient, fd_input_gradient(deep_net, p), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(b.input_pure_second, fd_pure_second(deep_net, p), rtol=1e-5, atol=1e-7)


def test_batched_equals_single(deep_net, rng):
    pts = rng.uniform(-1, 1, (7, 2))
    u, g, s = input_derivatives(deep_net, pts)
    for i, p in enumerate(pts):
        b = forward_with_input_derivatives(deep_net, p)
        assert b.value == pytest.approx(u[i], abs=1e-15)
        np.testing.assert_allclose(b.input_gradient, g[i], atol=1e-15)
        np.testing.assert_allclose(b.input_pure_second, s[i], atol=1e-15)


@pytest.mark.parametrize("norm", ["L2", "L1"])
def test_param_gradient_matches_fd(small_net, rng, norm):
    spec = BVPSpec(x_source=0.2, eta=0.7)
    batch = TaggedPointSet(rng.uniform(-0.9, 0.9, (6, 2)), [[1.0, 0.3], [-0.2, -1.0]])
    _, grad = loss_param_gradient(small_net, batch, spec, norm)
    analytic = np.concatenate([a.ravel() for a in grad.arrays()])
    fd = fd_param_gradient(lambda n: batch_loss(n, batch, spec, norm), small_net)
    np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_boundary_only_batch_gradient(small_net):
    spec = BVPSpec()
    batch = TaggedPointSet(np.empty((0, 2)), [[1.0, 0.5], [0.0, -1.0]])
    loss, grad = loss_param_gradient(small_net, batch, spec)
    assert loss == pytest.approx(np.mean(plain_forward(small_net, batch.boundary_points) ** 2))
    fd = fd_param_gradient(lambda n: batch_loss(n, batch, spec), small_net)
    np.testing.assert_allclose(np.concatenate([a.ravel() for a in grad.arrays()]), fd, rtol=1e-6, atol=1e-10)


def test_empty_batch_rejected(small_net):
    with pytest.raises(ValueError, match="empty"):
        loss_param_gradient(small_net, TaggedPointSet(np.empty((0, 2)), np.empty((0, 2))), BVPSpec())


def test_unknown_norm(small_net):
    batch = TaggedPointSet([[0.1, 0.1]], [])
    with pytest.raises(ValueError, match="norm"):
        batch_loss(small_net, batch, BVPSpec(), "L3")


def test_l1_subgradient_zero_at_zero_residual():
    # zero network on a boundary point: u = 0 exactly, so the L1 subgradient is 0
    net = MLP([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)])
    loss, grad = loss_param_gradient(net, TaggedPointSet(np.empty((0, 2)), [[1.0, 0.0]]), BVPSpec(), "L1")
    assert loss == 0
    assert all(np.all(a == 0) for a in grad.arrays())


def test_prefix_streams_give_same_loss_and_gradient(deep_net, rng):
    spec = BVPSpec(x_source=-0.3)
    batch = TaggedPointSet(rng.uniform(-1, 1, (30, 2)), rng.uniform(-1, 1, (10, 2)))
    full_loss, full_grad = loss_param_gradient(deep_net, batch, spec)
    for k in (1, 2, 4):
        loss, grad = loss_param_gradient(deep_net, batch, spec, frozen_prefix=k, streams=batch_streams(deep_net, batch, k))
        assert loss == full_loss
        for l in range(len(deep_net.weights)):
            if l < k:
                assert np.all(grad.weights[l] == 0)
            else:
                np.testing.assert_array_equal(grad.weights[l], full_grad.weights[l])
                np.testing.assert_array_equal(grad.biases[l], full_grad.biases[l])


def test_checkpoint_round_trip_bitwise(tmp_path, deep_net):
    deep_net.weights[1][0, 0] = 1 / 3
    deep_net.seed = 2**63 + 5
    deep_net.metadata["x_source"] = "0.4"
    write_checkpoint(deep_net, tmp_path / "m.ckpt")
    back = read_checkpoint(tmp_path / "m.ckpt")
    assert back == deep_net
    assert np.array_equal(flat_params(back), flat_params(deep_net))


@settings(max_examples=25, deadline=None)
@given(
    widths=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    seed=st.integers(0, 2**32 - 1),
)
def test_checkpoint_round_trip_property(widths, seed):
    net = glorot_init([2, *widths, 1], seed)
    rng = np.random.default_rng(seed)
    for b in net.biases:
        b[...] = rng.normal(size=b.shape) * 10.0 ** rng.integers(-300, 300, size=b.shape)
    assert parse_checkpoint(format_checkpoint(net)) == net


def test_checkpoint_truncated(small_net):
    text = format_checkpoint(small_net)
    with pytest.raises(CheckpointFormatError, match="truncated|missing"):
        parse_checkpoint("\n".join(text.splitlines()[:9]))


def test_checkpoint_shape_mismatch(small_net):
    text = format_checkpoint(small_net).replace("W1 5 2", "W1 4 2")
    with pytest.raises(CheckpointShapeError, match="W1"):
        parse_checkpoint(text)


def test_checkpoint_short_row(small_net):
    lines = format_checkpoint(small_net).splitlines()
    i = lines.index("W2 4 5") + 1
    lines[i] = " ".join(lines[i].split()[:-1])
    with pytest.raises(CheckpointShapeError, match="W2"):
        parse_checkpoint("\n".join(lines))


def test_checkpoint_version(small_net):
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(format_checkpoint(small_net).replace("version=1", "version=9"))


def test_checkpoint_bad_magic():
    with pytest.raises(CheckpointFormatError, match="magic"):
        parse_checkpoint("hello\n")
