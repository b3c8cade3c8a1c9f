import numpy as np
import pytest

from progmesh import gradcheck
from progmesh.core import ops
from progmesh.core.autodiff import const
from progmesh.core.trace import tracing
from progmesh.gradcheck import (TOLERANCE, check_gradients, extract_features, full_loss, global_stage,
                                relative_error, roundoff_bound, tiny_setup)

SUBSET = ["global/out/b", "local/out/w"]


@pytest.fixture(scope="module")
def tiny():
    return tiny_setup(0)


def test_relative_error_examples():
    a = np.array([1.0, 2.0, 0.0, 1e-9])
    n = np.array([1.0, 2.2, 0.0, -1e-9])
    e = relative_error(a, n, scale=10.0)
    assert e[0] == 0.0
    assert e[1] == pytest.approx(0.2 / 2.2)
    assert e[2] == 0.0
    # below the floor (1e-6 * scale) the error is measured against the floor
    assert e[3] == pytest.approx(2e-9 / 1e-5)


def test_noise_floor_admits_roundoff_only():
    noise = roundoff_bound(loss=100.0, step=1e-5)
    assert noise == pytest.approx(64 * np.finfo(float).eps * 100.0 / 1e-5)
    assert roundoff_bound(200.0, 1e-5) == pytest.approx(2 * noise)
    within = relative_error(np.array([0.0]), np.array([noise]), scale=1.0, noise=noise)
    beyond = relative_error(np.array([0.0]), np.array([10 * noise]), scale=1.0, noise=noise)
    assert within[0] <= TOLERANCE < beyond[0]


def test_trace_signature_detects_branch_change():
    def sig(x):
        with tracing() as t:
            ops.leaky_relu(const(np.array(x)))
        return t["signature"]
    assert sig([0.3, -0.2]) == sig([0.31, -0.19])
    assert sig([0.3, -0.2]) != sig([0.3, 0.2])


def test_frozen_upstream_leaves_loss_unchanged(tiny):
    model, sample = tiny
    fm = const(extract_features(sample.capture.stacked(), model).value)
    V0 = const(global_stage(sample.capture, model, fm).value)
    base = full_loss(model, sample).value
    assert full_loss(model, sample, {"fmaps": fm}).value == base
    assert full_loss(model, sample, {"fmaps": fm, "V0": V0}).value == base


def test_tiny_setup_shape():
    model, sample = tiny_setup(0)
    assert model.hierarchy.vertex_counts == [12, 42]
    assert len(sample.capture.images) == 2 and sample.capture.images[0].shape == (3, 8, 8)
    assert model.config.global_resolution == 4
    a, _ = tiny_setup(0)
    assert all(np.array_equal(a.params[k].value, model.params[k].value) for k in a.params)


def test_subset_check_passes(tiny):
    model, sample = tiny
    rep = check_gradients(model, sample, names=SUBSET)
    n = sum(model.params[k].value.size for k in SUBSET)
    assert rep.n_params == n and rep.passed
    assert set(rep.per_group) == {"global", "local"}
    assert rep.max_rel_error <= TOLERANCE


def test_checker_flags_a_wrong_gradient(tiny, monkeypatch):
    model, sample = tiny
    real = gradcheck.backward

    def skewed(loss):
        return {n: g * 1.01 for n, g in real(loss).items()}
    monkeypatch.setattr(gradcheck, "backward", skewed)
    rep = check_gradients(model, sample, names=SUBSET)
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)
