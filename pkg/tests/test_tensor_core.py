import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from progmesh.core import ops
from progmesh.core.autodiff import backward, const, param
from progmesh.core.checkpoint import (CheckpointError, MAGIC, adam_from_tensors, adam_to_tensors,
                                      load_tensors, save_tensors)
from progmesh.core.optim import AdamState, adam_step

from conftest import check_grad, numeric_grad, rel_err


# ------------------------------------------------------------------ conv

def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    out = ops.conv3d(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out.value, x)


def test_conv3d_constant_window_sum():
    c = 1.7
    out = ops.conv3d(np.full((1, 5, 5, 5), c), np.ones((1, 1, 3, 3, 3)), np.zeros(1), padding=1)
    assert out.value.shape == (1, 5, 5, 5)
    assert out.value[0, 2, 2, 2] == pytest.approx(27 * c, rel=1e-14)
    assert out.value[0, 0, 0, 0] == pytest.approx(8 * c, rel=1e-14)  # corner sees 2x2x2


def test_conv3d_gradient_matches_fd(rng):
    x = param(rng.normal(size=(2, 4, 4, 4)))
    w = param(rng.normal(size=(3, 2, 3, 3, 3)))
    b = param(rng.normal(size=3))
    err = check_grad(lambda: ops.sum(ops.conv3d(x, w, b, stride=1, padding=1)), [w, b, x])
    assert err <= 1e-6


def test_conv3d_strided_gradient_matches_fd(rng):
    x = param(rng.normal(size=(2, 2, 4, 4, 4)))
    w = param(rng.normal(size=(2, 2, 3, 3, 3)))
    b = param(rng.normal(size=2))
    proj = rng.normal(size=(2, 2, 2, 2, 2))
    err = check_grad(lambda: ops.sum(ops.mul(ops.conv3d(x, w, b, stride=2, padding=1), proj)), [w, b, x])
    assert err <= 1e-6


def test_conv2d_identity_and_stride_arithmetic(rng):
    x = rng.normal(size=(1, 8, 8))
    assert np.array_equal(ops.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).value, x)
    out = ops.conv2d(x, rng.normal(size=(4, 1, 3, 3)), np.zeros(4), stride=2, padding=1)
    assert out.value.shape == (4, 4, 4)


def test_conv2d_gradient_matches_fd(rng):
    x = param(rng.normal(size=(2, 6, 6)))
    w = param(rng.normal(size=(3, 2, 3, 3)))
    b = param(rng.normal(size=3))
    proj = rng.normal(size=(3, 3, 3))
    err = check_grad(lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=2, padding=1), proj)), [w, b, x])
    assert err <= 1e-6


def test_conv_pointwise_matches_general_path(rng):
    x = rng.normal(size=(2, 3, 4, 4, 4))
    w = rng.normal(size=(5, 3, 1, 1, 1))
    b = rng.normal(size=5)
    fast = ops.conv3d(x, w, b).value
    ref = np.einsum("oc,bczyx->bozyx", w[:, :, 0, 0, 0], x) + b[None, :, None, None, None]
    assert np.allclose(fast, ref, atol=1e-13)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        ops.conv3d(np.zeros((2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)), np.zeros(1))
    assert "(2, 4, 4, 4)" in str(exc.value) and "(1, 3, 3, 3, 3)" in str(exc.value)


def test_batched_conv_equals_per_sample(rng):
    x = rng.normal(size=(3, 2, 4, 4, 4))
    w, b = rng.normal(size=(2, 2, 3, 3, 3)), rng.normal(size=2)
    batched = ops.conv3d(x, w, b, stride=2, padding=1).value
    for i in range(3):
        assert np.allclose(batched[i], ops.conv3d(x[i], w, b, stride=2, padding=1).value, atol=1e-12)


# ---------------------------------------------------------- bilinear sampling

def test_bilinear_at_pixel_center(rng):
    fm = rng.normal(size=(4, 5, 6))
    out = ops.bilinear_sample(fm, np.array([[2.0, 3.0]]))  # u = column 2, v = row 3
    assert np.array_equal(out.value[0], fm[:, 3, 2])


def test_bilinear_midpoint_average(rng):
    fm = rng.normal(size=(3, 4, 4))
    out = ops.bilinear_sample(fm, np.array([[1.5, 2.5]])).value[0]
    ref = (fm[:, 2, 1] + fm[:, 2, 2] + fm[:, 3, 1] + fm[:, 3, 2]) / 4
    assert np.allclose(out, ref, atol=1e-15)


def test_bilinear_gradient_wrt_uv_and_features(rng):
    fm = param(rng.normal(size=(3, 6, 7)))
    # fractional parts kept inside [0.2, 0.8]: away from every lattice line
    uv = param(rng.integers(0, 5, size=(10, 2)) + rng.uniform(0.2, 0.8, size=(10, 2)))
    proj = rng.normal(size=(10, 3))
    err = check_grad(lambda: ops.sum(ops.mul(ops.bilinear_sample(fm, uv), proj)), [uv, fm])
    assert err <= 1e-5


def test_bilinear_out_of_bounds_clamps_with_zero_uv_gradient(rng):
    fm = rng.normal(size=(2, 4, 4))
    uv = param(np.array([[-3.0, 1.5], [10.0, 10.0]]))
    out = ops.bilinear_sample(fm, uv)
    assert np.allclose(out.value[0], 0.5 * (fm[:, 1, 0] + fm[:, 2, 0]))
    assert np.array_equal(out.value[1], fm[:, 3, 3])
    g = backward(ops.sum(out))[uv]
    assert g[0, 0] == 0.0 and np.all(g[1] == 0.0)


# ------------------------------------------------------- softmax expectation

def _coords(r, spacing=1.0):
    from progmesh.camera import lattice_offsets
    return lattice_offsets(r, spacing)


def test_softmax_expectation_one_hot():
    c = _coords(4) + 7.0
    vol = np.zeros((1, 4, 4, 4))
    vol.reshape(-1)[37] = 1e6
    out = ops.softmax_expectation(vol, c).value
    assert np.allclose(out[0], c[37], atol=1e-9)


def test_softmax_expectation_uniform_gives_center():
    p = np.array([3.0, -2.0, 5.0])
    out = ops.softmax_expectation(np.zeros((2, 4, 4, 4)), _coords(4, 2.5) + p).value
    assert np.allclose(out, p, atol=1e-9)


def test_softmax_expectation_two_peaks_midpoint():
    c = _coords(4)
    vol = np.full((1, 64), -1e6)
    vol[0, [5, 58]] = 0.0
    out = ops.softmax_expectation(vol.reshape(1, 4, 4, 4), c).value
    assert np.allclose(out[0], 0.5 * (c[5] + c[58]), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 27), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_expectation_convex_and_shift_invariant(logits, shift):
    c = _coords(3, 1.5) + np.array([1.0, 2.0, 3.0])
    out = ops.softmax_expectation(logits.reshape(3, 3, 3, 3), c).value
    assert np.all(out >= c.min(0) - 1e-9) and np.all(out <= c.max(0) + 1e-9)
    shifted = ops.softmax_expectation((logits + shift).reshape(3, 3, 3, 3), c).value
    assert np.allclose(out, shifted, atol=1e-9)


def test_softmax_expectation_gradient(rng):
    vol = param(rng.normal(size=(2, 4, 4, 4)))
    proj = rng.normal(size=(2, 3))
    err = check_grad(lambda: ops.sum(ops.mul(ops.softmax_expectation(vol, _coords(4, 3.0)), proj)), [vol])
    assert err <= 1e-6


# ------------------------------------------------------------------ backward

def test_backward_sum_gives_ones(rng):
    x = param(rng.normal(size=(2, 3, 4)))
    assert np.array_equal(backward(ops.sum(x))[x], np.ones((2, 3, 4)))


def test_backward_mse_identical_inputs_zero(rng):
    a = param(rng.normal(size=(5, 3)))
    g = backward(ops.squared_distance_mean(a, a.value.copy()))[a]
    assert np.all(g == 0.0)


def test_backward_composite_conv_relu(rng):
    x = param(rng.normal(size=(2, 6, 6)))
    w = param(rng.normal(size=(3, 2, 3, 3)))
    b = param(rng.normal(size=3) + 0.3)
    build = lambda: ops.sum(ops.relu(ops.conv2d(x, w, b, padding=1)))
    # make sure no pre-activation sits within the FD step of the kink
    pre = ops.conv2d(x, w, b, padding=1).value
    assert np.min(np.abs(pre)) > 1e-3
    assert check_grad(build, [w, b, x]) <= 1e-5


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ValueError):
        backward(param(rng.normal(size=3)))


def test_backward_accumulates_until_reset(rng):
    x = param(rng.normal(size=4))
    backward(ops.sum(x))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, 2 * np.ones(4))
    x.zero_grad()
    assert np.array_equal(x.grad, np.zeros(4))


def test_independent_leaf_gets_exactly_zero(rng):
    x, y = param(rng.normal(size=3)), param(rng.normal(size=3))
    reached = backward(ops.sum(ops.mul(x, x)))
    assert y not in reached
    assert np.array_equal(y.grad, np.zeros(3))


def test_squared_distance_mean_value_and_gradient():
    a = np.zeros((4, 3))
    b = np.zeros((4, 3))
    b[2] = [0.0, 3.0, 4.0]
    assert ops.squared_distance_mean(a, b).value == pytest.approx(25.0 / 4)
    A = param(a)
    g = backward(ops.squared_distance_mean(A, b))[A]
    assert np.allclose(g, 2 * (a - b) / 4)
    with pytest.raises(ValueError):
        ops.squared_distance_mean(np.zeros((3, 3)), np.zeros((4, 3)))


def test_ops_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8, 8))
    w, b = rng.normal(size=(4, 3, 3, 3, 3)), rng.normal(size=4)
    a = ops.conv3d(x, w, b, stride=2, padding=1).value
    assert np.array_equal(a, ops.conv3d(x, w, b, stride=2, padding=1).value)


@st.composite
def _small_op_case(draw):
    seed = draw(st.integers(0, 2 ** 31))
    kind = draw(st.sampled_from(["matmul", "mul_add", "upsample", "concat_transpose", "take_rows"]))
    return kind, np.random.default_rng(seed)


@settings(max_examples=25, deadline=None)
@given(_small_op_case())
def test_random_op_gradients_match_fd(case):
    kind, r = case
    a = param(r.normal(size=(3, 4)))
    b = param(r.normal(size=(4, 2)) if kind == "matmul" else r.normal(size=(3, 4)))
    if kind == "matmul":
        build = lambda: ops.sum(ops.mul(ops.matmul(a, b), ops.matmul(a, b)))
    elif kind == "mul_add":
        build = lambda: ops.sum(ops.mul(ops.add(a, b), ops.sub(a, ops.mul(b, 2.0))))
    elif kind == "upsample":
        proj = r.normal(size=(3, 8))
        build = lambda: ops.sum(ops.mul(ops.upsample_nearest(ops.add(a, b), 1), proj))
    elif kind == "concat_transpose":
        proj = r.normal(size=(4, 6))
        build = lambda: ops.sum(ops.mul(ops.transpose(ops.concat([a, b], 0), (1, 0)), proj))
    else:
        idx = np.array([2, 0, 2, 1])
        proj = r.normal(size=(4, 4))
        build = lambda: ops.sum(ops.mul(ops.take_rows(ops.mul(a, b), idx), proj))
    assert check_grad(build, [a, b]) <= 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["mean_std", "max"]))
def test_fusion_gradient_and_view_permutation(seed, mode):
    r = np.random.default_rng(seed)
    s = param(r.normal(size=(3, 5, 2)))
    proj = r.normal(size=(5, 4 if mode == "mean_std" else 2))
    assert check_grad(lambda: ops.sum(ops.mul(ops.fuse_views(s, mode), proj)), [s]) <= 1e-5
    perm = r.permutation(3)
    assert np.allclose(ops.fuse_views(s.value[perm], mode).value, ops.fuse_views(s.value, mode).value,
                       atol=1e-12)


def test_std_fusion_zero_for_duplicate_views(rng):
    s = np.repeat(rng.normal(size=(1, 7, 4)), 3, axis=0)
    out = ops.fuse_views(s).value
    assert np.array_equal(out[:, 4:], np.zeros((7, 4)))
    assert np.allclose(out[:, :4], s[0])
    one = ops.fuse_views(s[:1]).value
    assert np.array_equal(one[:, 4:], np.zeros((7, 4)))


def test_std_fusion_value():
    s = np.array([[[1.0]], [[3.0]]])
    out = ops.fuse_views(s).value
    assert out[0, 0] == 2.0
    # smoothed std: sqrt(var + eps) - sqrt(eps), zero at zero variance
    assert out[0, 1] == pytest.approx(np.sqrt(1.0 + ops.STD_EPS) - np.sqrt(ops.STD_EPS), rel=1e-14)


# ---------------------------------------------------------------------- adam

def test_adam_first_step_is_lr_sign():
    p = {"x": np.array([1.0, -2.0, 0.5])}
    g = {"x": np.array([3.0, -0.2, 1e3])}
    st_ = AdamState(lr=0.01)
    adam_step(p, g, st_)
    assert np.allclose(p["x"], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], atol=1e-8)
    assert st_.step == 1


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"x": np.array([1.0, 2.0])}
    st_ = AdamState(lr=0.1)
    adam_step(p, {"x": np.array([1.0, 1.0])}, st_)
    before = p["x"].copy()
    m = st_.m["x"].copy()
    # the bias-corrected first moment still moves the parameter; zero it to isolate decay
    st_.m["x"][...] = 0.0
    adam_step(p, {"x": np.zeros(2)}, st_)
    assert np.array_equal(p["x"], before)
    assert np.all(st_.v["x"] < 1.0) and np.array_equal(st_.m["x"], np.zeros(2))
    assert st_.step == 2
    assert np.all(m > 0)


def test_adam_minimizes_quadratic():
    p = {"x": np.array([0.0])}
    st_ = AdamState(lr=0.1)
    for _ in range(100):
        adam_step(p, {"x": 2 * (p["x"] - 3.0)}, st_)
    assert abs(p["x"][0] - 3.0) < 0.1


def test_adam_rejects_non_finite(caplog):
    p = {"x": np.array([1.0]), "y": np.array([1.0])}
    st_ = AdamState(lr=0.1)
    with caplog.at_level(logging.WARNING):
        ok = adam_step(p, {"x": np.array([1.0]), "y": np.array([np.nan])}, st_)
    assert not ok and st_.step == 0 and p["x"][0] == 1.0
    assert "non-finite" in caplog.text


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_and_layout(tmp_path, rng):
    t = {"a/w": rng.normal(size=(2, 3)), "scalar": np.array(4.5), "x": rng.normal(size=(1, 2, 1, 2, 1))}
    path = tmp_path / "c.ckpt"
    save_tensors(path, t)
    back = load_tensors(path)
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and np.array_equal(back[k], t[k])
    # independent parse of the first entry
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"TOFU"
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (1, 3)
    (n,) = struct.unpack_from("<I", raw, 12)
    assert raw[16:16 + n] == b"a/w"
    rank, = struct.unpack_from("<I", raw, 16 + n)
    assert rank == 2 and struct.unpack_from("<2Q", raw, 20 + n) == (2, 3)
    data = np.frombuffer(raw, "<f8", 6, 36 + n)
    assert np.array_equal(data.reshape(2, 3), t["a/w"])


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(p)
    save_tensors(p, {"a": np.ones(4)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_tensors(p)


def test_adam_state_round_trip(tmp_path, rng):
    st_ = AdamState(lr=3e-4)
    p = {"w": rng.normal(size=(2, 2))}
    adam_step(p, {"w": rng.normal(size=(2, 2))}, st_)
    save_tensors(tmp_path / "a.ckpt", adam_to_tensors(st_))
    back = adam_from_tensors(load_tensors(tmp_path / "a.ckpt"))
    assert back.step == 1 and back.lr == 3e-4
    assert np.array_equal(back.m["w"], st_.m["w"]) and np.array_equal(back.v["w"], st_.v["w"])


def test_checkpoint_rejects_duplicate_names(tmp_path):
    p = tmp_path / "dup.ckpt"
    body = b""
    for _ in range(2):
        body += struct.pack("<I", 1) + b"a" + struct.pack("<I", 1) + struct.pack("<Q", 1) + struct.pack("<d", 1.0)
    p.write_bytes(MAGIC + struct.pack("<II", 1, 2) + body)
    with pytest.raises(CheckpointError, match="duplicate"):
        load_tensors(p)
