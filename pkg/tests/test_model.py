import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qrobust.autodiff import Tensor, ops
from qrobust.autodiff.tensor import ShapeError
from qrobust.model import ForwardContext, LayerSpec, ModelSpec, SpecError, build, footprint, load_model
from qrobust.quantize import QuantizerSpec, scheme

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def spec_of(*layers, input_shape=(4,), residual=()):
    return ModelSpec(input_shape, tuple(LayerSpec(**d) for d in layers), residual)


def mlp(wq="fp32", zero_last=False):
    return ModelSpec.from_dict(
        {
            "input_shape": [6],
            "layers": [
                {"kind": "dense", "name": "h", "units": 5, "activation": "relu", "weight_quantizer": wq},
                {"kind": "dense", "name": "o", "units": 3, "activation": "softmax", "weight_quantizer": wq, "kernel_init": "zeros" if zero_last else "he_uniform"},
            ],
        }
    )


# -- parameter accounting -----------------------------------------------------


def test_dense_param_count():
    assert spec_of({"kind": "dense", "units": 3}).trainable_params == 15


def test_depthwise_param_count():
    s = spec_of({"kind": "depthwise_conv2d", "kernel": 3, "padding": "same"}, input_shape=(5, 5, 8))
    assert s.trainable_params == 80
    assert build(s).trainable_params == 80


def test_desk_reference_counts_match_hand_arithmetic():
    # conv1, bn1, dw1, bn2, sep1, bn3, conv2, bn4, dw2, sep2, fc1, fc2, fc3
    hand = [
        9 * 16 + 16,
        2 * 16,
        9 * 16 + 16,
        2 * 16,
        9 * 16 + 16 * 32 + 32,
        2 * 32,
        9 * 32 * 32 + 32,
        2 * 32,
        9 * 32 + 32,
        9 * 32 + 32 * 32 + 32,
        (4 * 4 * 32) * 64 + 64,
        64 * 32 + 32,
        32 * 10 + 10,
    ]
    spec = ModelSpec.load(CONFIGS / "desk_reference.json")
    model = build(spec)
    assert sum(hand) == spec.trainable_params == model.trainable_params == 47_354
    assert model.non_trainable_params == 2 * (16 + 16 + 32 + 32) == 192


def test_shape_propagation_error_names_layer():
    with pytest.raises(SpecError, match="narrow"):
        spec_of({"kind": "conv2d", "name": "narrow", "filters": 2, "kernel": 5}, input_shape=(3, 3, 1)).shapes()


def test_residual_shape_mismatch_rejected():
    s = spec_of({"kind": "dense", "name": "a", "units": 3}, {"kind": "dense", "name": "b", "units": 4}, residual=((0, 1),))
    with pytest.raises(SpecError, match="residual"):
        s.shapes()


def test_unknown_layer_field_rejected():
    with pytest.raises(SpecError):
        ModelSpec.from_dict({"input_shape": [4], "layers": [{"kind": "dense", "units": 2, "widht": 3}]})


def test_spec_json_round_trip(tmp_path):
    spec = ModelSpec.load(CONFIGS / "desk_reference.json")
    spec.save(tmp_path / "m.json")
    assert ModelSpec.load(tmp_path / "m.json") == spec
    json.loads((tmp_path / "m.json").read_text())


# -- predict -------------------------------------------------------------------


def test_zero_init_final_layer_gives_uniform_output():
    model = build(mlp(zero_last=True))
    p = model.predict(np.random.default_rng(0).normal(size=(4, 6)))
    np.testing.assert_allclose(p, np.full((4, 3), 1 / 3), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 1000))
def test_predict_rows_sum_to_one(n, seed):
    model = build(mlp("stq"), seed=seed)
    p = model.predict(np.random.default_rng(seed).normal(size=(n, 6)))
    assert p.shape == (n, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_predict_equals_forward_composition():
    model = build(mlp("ternary"), seed=3)
    x = np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32)
    composed = ops.softmax(model.forward(Tensor(x)), axis=-1).data
    assert np.array_equal(model.predict(x), composed)
    # and against a plain numpy evaluation of the quantized weights
    w = model.read_weights()
    h = np.maximum(x @ w["h/kernel"] + w["h/bias"], 0)
    z = h @ w["o/kernel"] + w["o/bias"]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(model.predict(x), e / e.sum(axis=1, keepdims=True), rtol=1e-5)


def test_predict_shape_mismatch():
    with pytest.raises(ShapeError):
        build(mlp()).predict(np.zeros((2, 7)))


def test_predict_is_pure():
    model = build(ModelSpec.load(CONFIGS / "desk_reference.json"), seed=1)
    x = np.random.default_rng(0).uniform(size=(2, 32, 32, 1))
    before = model.state_dict()
    a = model.predict(x)
    assert np.array_equal(a, model.predict(x))
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


# -- quantize on read ---------------------------------------------------------


@pytest.mark.parametrize("wq", ["stq", "ternary", "s-binary", "4-bit"])
def test_training_forward_never_mutates_shadow_weights(wq):
    model = build(mlp(wq), seed=2)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    ctx = ForwardContext(training=True, rng=np.random.default_rng(0))
    model.forward(Tensor(np.random.default_rng(1).normal(size=(3, 6)).astype(np.float32)), ctx)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_read_weights_on_ternary_codomain():
    model = build(mlp("ternary"), seed=0)
    for name, w in model.read_weights().items():
        assert len(np.unique(np.abs(w))) <= 2, name


def test_checkpoint_round_trip(tmp_path):
    model = build(ModelSpec.load(CONFIGS / "desk_reference.json"), seed=4)
    model.save(tmp_path / "m.qrb")
    twin = load_model(CONFIGS / "desk_reference.json", tmp_path / "m.qrb")
    for k, v in model.state_dict().items():
        assert np.array_equal(twin.state_dict()[k], v)


def test_checkpoint_for_other_spec_rejected(tmp_path):
    build(mlp()).save(tmp_path / "m.qrb")
    other = build(spec_of({"kind": "dense", "name": "h", "units": 2}))
    with pytest.raises(SpecError):
        other.load(tmp_path / "m.qrb")


# -- footprint -----------------------------------------------------------------


def test_thousand_ternary_weights_take_250_bytes():
    s = spec_of({"kind": "dense", "units": 100, "use_bias": False, "weight_quantizer": scheme("ternary")}, input_shape=(10,))
    assert footprint(s).total_bytes == 250


@pytest.mark.parametrize("name,bits", [("fp32", 32), ("8-bit", 8), ("4-bit", 4), ("2-bit", 2), ("ternary", 2), ("stq", 2), ("binary", 1), ("s-binary", 1)])
def test_bits_per_param(name, bits):
    rep = footprint(mlp(), name)
    assert all(r.bits == bits for r in rep.rows)
    assert rep.total_bytes == rep.total_params * bits / 8


@pytest.mark.parametrize("path", ["desk_reference.json", "toy_model.json"])
def test_footprint_ratios_exact(path):
    spec = ModelSpec.load(CONFIGS / path)
    assert footprint(spec, "8-bit").total_bytes / footprint(spec, "fp32").total_bytes == 0.25
    assert footprint(spec, "binary").total_bytes / footprint(spec, "2-bit").total_bytes == 0.5


def test_footprint_excludes_batchnorm_and_is_per_layer_sum():
    rep = footprint(ModelSpec.load(CONFIGS / "desk_reference.json"), "fp32")
    assert "batchnorm" not in {r.kind for r in rep.rows}
    assert rep.total_params == 47_354 - 2 * (16 + 16 + 32 + 32)
    assert rep.total_bytes == sum(r.bytes for r in rep.rows)
    assert rep.total_kb == rep.total_bytes / 1024


def test_footprint_of_weightless_model_is_zero():
    s = spec_of({"kind": "flatten"}, input_shape=(2, 2, 1))
    assert footprint(s).total_bytes == 0
    assert footprint(s).total_packed_bytes == 0


def test_packed_bytes_round_each_layer_up():
    s = spec_of({"kind": "dense", "units": 1, "use_bias": False, "weight_quantizer": scheme("binary")}, input_shape=(3,))
    rep = footprint(s)
    assert rep.total_bytes == 3 / 8
    assert rep.total_packed_bytes == 1


def test_footprint_independent_of_training_state():
    model = build(mlp("stq"), seed=0)
    a = footprint(model).as_dict()
    for p in model.parameters():
        p.data += 1.0
    assert footprint(model).as_dict() == a


def test_quantizer_override_keeps_graph():
    spec = ModelSpec.load(CONFIGS / "toy_model.json")
    swapped = spec.with_weight_quantizer(QuantizerSpec("binary"))
    assert swapped.shapes() == spec.shapes()
    assert {ls.weight_quantizer.kind for ls in swapped.layers if ls.kind == "dense"} == {"binary"}
