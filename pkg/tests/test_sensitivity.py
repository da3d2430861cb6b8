from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdqat import nn
from pdqat.data import gen_synthetic
from pdqat.errors import InputError
from pdqat.primal_dual import DualState, TrainRunConfig, train_pdqat
from pdqat.sensitivity import (epsilon_sweep, mixed_precision_eval, probe_margins,
                               rank_layers, run_many, select_layers, subgradient_probe)
from pdqat.shadow import LayerSpec, full_eval_accuracy, quantized_eval_accuracy

from conftest import tiny_config


def _duals(*lam):
    return DualState(np.array(lam, float))


def test_rank_order():
    assert rank_layers(_duals(0.1, 0.9, 0.0)).layer_ids == [2, 1, 3]


def test_rank_ties_by_id():
    assert rank_layers(_duals(0.5, 0.5, 0.5, 0.5)).layer_ids == [1, 2, 3, 4]


@given(st.lists(st.floats(0, 10), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_rank_is_scale_invariant_permutation(lam, c):
    r = rank_layers(_duals(*lam)).layer_ids
    assert sorted(r) == list(range(1, len(lam) + 1))
    assert rank_layers(_duals(*[c * v for v in lam])).layer_ids == r


def test_rank_by_trajectory_mean():
    d = _duals(0.0, 0.0)
    d.trajectory = [np.array([1.0, 0.0, 1.0]), np.array([0.0, 0.6, 1.0])]
    d.lambdas = np.array([0.0, 0.6])
    assert rank_layers(d, "final").layer_ids == [2, 1]
    assert rank_layers(d, "mean").layer_ids == [1, 2]
    with pytest.raises(InputError):
        rank_layers(d, "median")


def test_select_layers():
    r = rank_layers(_duals(0.3, 0.1, 0.2))
    assert select_layers(r, 2, "top") == [1, 3]
    assert select_layers(r, 2, "bottom") == [3, 2]
    assert select_layers(r, 0, "bottom") == []
    with pytest.raises(InputError):
        select_layers(r, 4)
    with pytest.raises(InputError):
        select_layers(r, -1)
    with pytest.raises(InputError):
        select_layers(r, 1, "middle")


@pytest.fixture(scope="module")
def mixed_run():
    data = gen_synthetic("blobs", 100, classes=3, seed=0)
    cfg = TrainRunConfig([LayerSpec(size=8)] * 3 + [LayerSpec(size=3)], [0, 1, 1, 0],
                         epochs=4, early_stop=False, eps_layer=0.01)
    return train_pdqat(cfg, data), data


def test_mixed_eval_endpoints(mixed_run):
    rep, data = mixed_run
    r = rank_layers(rep.duals)
    q = quantized_eval_accuracy(rep.model, data.x, data.y)
    for mode in ("top", "bottom"):
        assert mixed_precision_eval(rep.model, r, 0, mode, data.x, data.y) == q
        assert (mixed_precision_eval(rep.model, r, 3, mode, data.x, data.y)
                == full_eval_accuracy(rep.model, data.x, data.y))
    assert [b.quantized for b in rep.model.blocks] == [False, True, True, False]


def test_probe_margin_formula():
    m = probe_margins([0.1, 0.5], [2.0, 1.0], [3.0, 0.5])
    np.testing.assert_allclose(m, [[0, 1.0 - 2.0 + 3.0 * 0.4], [2.0 - 1.0 - 0.5 * 0.4, 0]])
    assert np.all(np.diag(m) == 0)


def test_probe_grid_must_increase(blobs):
    cfg = tiny_config(epochs=1)
    with pytest.raises(InputError):
        subgradient_probe(cfg, blobs, [0.5, 0.1])
    with pytest.raises(InputError):
        subgradient_probe(cfg, blobs, [])


def logistic_config(**kw):
    base = dict(layers=[LayerSpec(size=2)], bits=[2], epochs=200, batch_size=32,
                early_stop=False, dtype="float64", dual_lr=0.1,
                adam=nn.AdamConfig(lr=0.01, milestones=(100, 150, 180)))
    base.update(kw)
    return TrainRunConfig(**base)


@pytest.fixture(scope="module")
def logistic_data():
    return gen_synthetic("blobs", 500, seed=0)


def test_probe_inactive_constraint_is_flat(logistic_data):
    p = subgradient_probe(logistic_config(epochs=60), logistic_data, [2.0, 3.0])
    np.testing.assert_array_equal(p.lambdas, 0.0)
    assert abs(p.objective[0] - p.objective[1]) <= p.tolerance()[0]
    assert np.all(p.converged)


def test_probe_flags_unconverged(logistic_data):
    p = subgradient_probe(logistic_config(epochs=2), logistic_data, [0.5, 2.0], max_loss=1e-6)
    assert not np.any(p.converged)
    assert np.all(np.isnan(p.worst_margin))


def test_sweep_output_multiplier_non_increasing(logistic_data):
    rows = epsilon_sweep(logistic_config(), "eps_out", [0.05, 0.5, 2.0], logistic_data,
                         logistic_data)
    lam = [r[2] for r in rows]
    assert lam[0] >= lam[1] - 0.05 and lam[1] >= lam[2] - 0.05
    assert [r[0] for r in rows] == [0.05, 0.5, 2.0]


def test_sweep_single_value_matches_plain_run(blobs):
    cfg = tiny_config(epochs=2)
    (row,) = epsilon_sweep(cfg, "eps_out", [0.3], blobs, blobs)
    rep = train_pdqat(replace(cfg, eps_out=0.3), blobs)
    x = blobs.x.astype(np.float64)
    assert row == (0.3, quantized_eval_accuracy(rep.model, x, blobs.y), rep.duals.lambda_out)


def test_sweep_rejects_bad_values(blobs):
    cfg = tiny_config(epochs=1)
    with pytest.raises(InputError):
        epsilon_sweep(cfg, "eps_out", [], blobs, blobs)
    with pytest.raises(InputError):
        epsilon_sweep(cfg, "eps_out", [0.1, 0.1], blobs, blobs)
    with pytest.raises(InputError):
        epsilon_sweep(cfg, "eps_bogus", [0.1], blobs, blobs)
    with pytest.raises(InputError):
        epsilon_sweep(cfg, 5, [0.1], blobs, blobs)


def test_sweep_single_layer_bound(blobs):
    rows = epsilon_sweep(tiny_config(epochs=1), 2, [0.01, 0.02], blobs, blobs)
    assert len(rows) == 2


def test_worker_pool_matches_serial(blobs):
    cfgs = [tiny_config(epochs=1, seed=s) for s in (0, 1)]
    a = run_many(cfgs, blobs, blobs, jobs=1)
    b = run_many(cfgs, blobs, blobs, jobs=2)
    for ra, rb in zip(a, b):
        assert ra["objective"] == rb["objective"] and ra["test_acc"] == rb["test_acc"]
        np.testing.assert_array_equal(ra["duals"].lambdas, rb["duals"].lambdas)
