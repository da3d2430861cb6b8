import numpy as np
import pytest

from pdqat import nn
from pdqat.constraints import layer_distance
from pdqat.errors import DimensionError, InputError
from pdqat.primal_dual import train_pdqat
from pdqat.quantize import QuantSpec, levels, quantize_activations, quantize_weights
from pdqat.shadow import (LayerSpec, ShadowModel, accuracy, full_eval_accuracy,
                          quantized_eval_accuracy)

from conftest import tiny_config, tiny_model


def test_all_high_precision_collapses(rng):
    model = tiny_model(bits=(0, 0, 0), sizes=(6, 5, 3))
    x = rng.standard_normal((7, 8))
    tr = model.forward_pair(x)
    for l in range(len(tr.full)):
        assert np.array_equal(tr.full[l], tr.quant[l])
    for l in (1, 2):
        assert layer_distance(tr.hybrid[l], tr.quant[l]) == 0.0
    assert np.array_equal(tr.logits, tr.logits_quant)


def test_trace_shapes_share_batch(rng):
    model = tiny_model(sizes=(6, 3))
    x = rng.standard_normal((5, 8))
    tr = model.forward_pair(x)
    assert tr.full[0] is x and tr.quant[0] is x
    assert all(len(z) == 5 for z in tr.full + tr.quant + tr.hybrid[1:])


def test_fine_grid_bounds_activation_rounding(rng):
    model = tiny_model(bits=(16, 0), sizes=(6, 3), batchnorm=False)
    x = rng.standard_normal((9, 8))
    block = model.blocks[0]
    q, cache = block.forward(x, "quant", keep_cache=True, ste=True)
    assert np.max(np.abs(q - cache["prequant"])) <= 0.5 / levels(16) + 1e-15


def test_hand_computed_one_bit_layer():
    model = ShadowModel.build((2,), [LayerSpec(size=2), LayerSpec(size=2)],
                              QuantSpec.from_bits([1, 0]), dtype=np.float64, batchnorm=False)
    W = np.array([[0.5, -1.0], [2.0, 0.1]])
    model.blocks[0].layer.params["weight"].value[:] = W
    model.blocks[0].layer.params["bias"].value[:] = [0.1, -0.2]
    x = np.array([[1.0, 0.5]])
    tr = model.forward_pair(x)
    Wq = quantize_weights(W, 1)
    np.testing.assert_array_equal(Wq, [[1, -1], [1, 1]])
    np.testing.assert_array_equal(tr.quant[1], [[1.0, 0.0]])
    expected = quantize_activations(np.clip(x @ Wq + [0.1, -0.2], 0, 1), 1)
    np.testing.assert_array_equal(tr.quant[1], expected)
    np.testing.assert_allclose(tr.hybrid[1], np.clip(x @ W + [0.1, -0.2], 0, 1))


def test_dimension_error_names_layer(rng):
    model = tiny_model()
    with pytest.raises(DimensionError, match="layer1"):
        model.forward_pair(rng.standard_normal((2, 5)))


def test_set_precision_toggles(rng):
    model = tiny_model(bits=(2, 2, 0), sizes=(6, 5, 3))
    x = rng.standard_normal((10, 8))
    tr = model.forward_pair(x)
    assert layer_distance(tr.hybrid[1], tr.quant[1]) > 0
    model.set_precision(1, False)
    tr = model.forward_pair(x)
    assert layer_distance(tr.hybrid[1], tr.quant[1]) == 0.0
    for l in (1, 2, 3):
        model.set_precision(l, False)
    tr = model.forward_pair(x)
    assert np.array_equal(tr.logits, tr.logits_quant)


def test_reenable_at_new_bitwidth(rng):
    model = tiny_model(bits=(2, 0), sizes=(6, 3))
    model.set_precision(1, False)
    model.set_precision(1, True, k=3)
    tr = model.forward_pair(rng.standard_normal((10, 8)))
    s = tr.quant[1] * levels(3)
    assert np.all(np.abs(s - np.round(s)) < 1e-9)


def test_set_precision_unknown_layer():
    model = tiny_model()
    with pytest.raises(InputError):
        model.set_precision(3, True)
    with pytest.raises(InputError):
        model.set_precision(0, True)


def test_precision_override_restores():
    model = tiny_model(bits=(2, 2, 0), sizes=(6, 5, 3))
    with model.precision_override({1: False, 2: False}):
        assert not model.blocks[0].quantized
    assert model.blocks[0].quantized and model.blocks[1].quantized


def test_constant_logits_accuracy_is_class_zero_frequency():
    model = tiny_model(bits=(0, 0), sizes=(6, 3))
    last = model.blocks[-1].layer.params
    last["weight"].value[:] = 0
    last["bias"].value[:] = 0
    x = np.zeros((5, 8))
    y = np.array([0, 1, 2, 0, 1])
    assert quantized_eval_accuracy(model, x, y) == pytest.approx(0.4)


def test_all_disabled_quantized_equals_full(blobs):
    model = ShadowModel.build((2,), [LayerSpec(size=4), LayerSpec(size=2)],
                              QuantSpec.from_bits([0, 0]))
    x, y = blobs.x, blobs.y
    assert quantized_eval_accuracy(model, x, y) == full_eval_accuracy(model, x, y)


def test_empty_dataset_rejected():
    model = tiny_model()
    with pytest.raises(InputError):
        quantized_eval_accuracy(model, np.zeros((0, 8)), np.zeros(0, int))
    with pytest.raises(InputError):
        accuracy(np.zeros((0, 2)), np.zeros(0, int))


def test_hybrid_does_not_touch_running_stats(rng):
    model = tiny_model(bits=(2, 0))
    bn = model.blocks[0].bn
    before = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in bn.items()}
    model.blocks[0].forward(rng.standard_normal((4, 8)), "hybrid")
    for k, s in bn.items():
        assert np.array_equal(s.running_mean, before[k][0])


def test_disabled_layer_leaves_quant_stats_alone(rng):
    model = tiny_model(bits=(0, 0))
    q = model.blocks[0].bn["quant"]
    m0 = q.running_mean.copy()
    model.forward_pair(rng.standard_normal((4, 8)))
    assert np.array_equal(q.running_mean, m0)


def test_batchnorm_statistics_diverge_between_precisions():
    cfg = tiny_config(epochs=2)
    from pdqat.data import gen_synthetic
    rep = train_pdqat(cfg, gen_synthetic("blobs", 40, seed=0))
    bn = rep.model.blocks[1].bn
    assert not np.array_equal(bn["full"].running_mean, bn["quant"].running_mean)
    assert not np.array_equal(bn["full"].running_var, bn["quant"].running_var)


def test_quant_weights_never_stored(rng):
    model = tiny_model(bits=(2, 0))
    W = model.blocks[0].layer.params["weight"].value
    x = rng.standard_normal((3, 8))
    model.forward_pair(x)
    W += 0.5
    _, cache = model.blocks[0].forward(x, "quant", keep_cache=True)
    np.testing.assert_array_equal(cache["weight"], quantize_weights(W, 2))


def test_state_arrays_names():
    model = tiny_model(bits=(2, 0))
    names = set(model.state_arrays())
    assert {"layer1.weight", "layer1.bias", "layer1.bn_scale", "layer1.bn_shift",
            "layer1.bn_full.running_mean", "layer1.bn_full.running_var",
            "layer1.bn_quant.running_mean", "layer1.bn_quant.running_var",
            "layer2.weight", "layer2.bias"} == names


def test_conv_model_forward_pair(rng):
    specs = [LayerSpec("conv", 3, kernel=3, padding=1), LayerSpec("conv", 4, kernel=3, stride=2),
             LayerSpec(size=2)]
    model = ShadowModel.build((1, 6, 6), specs, QuantSpec.from_bits([0, 2, 0]),
                              dtype=np.float64)
    tr = model.forward_pair(rng.random((3, 1, 6, 6)))
    assert tr.full[1].shape == (3, 3, 6, 6)
    assert tr.full[2].shape == (3, 4, 2, 2)
    assert tr.logits.shape == (3, 2)
    assert layer_distance(tr.hybrid[1], tr.quant[1]) == 0.0
