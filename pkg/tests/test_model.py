import numpy as np
import pytest

from deepconvlstm import tensor as T
from deepconvlstm.errors import ConfigError, ShapeError
from deepconvlstm.model import (DeepConvLstmModel, ModelConfig, build, forward, lstm_parameter_total,
                                parameter_inventory)
from deepconvlstm.tensor import Tape, Tensor

from conftest import numeric_grad, rel_error


def cfg(**kw):
    base = dict(num_classes=8, channels=3, window_samples=50)
    base.update(kw)
    return ModelConfig(**base)


def test_post_conv_extent():
    assert cfg().conv_time_steps == 10
    assert cfg(kernel_len=21, window_samples=100).conv_time_steps == 20


def test_too_short_window_is_a_config_error():
    with pytest.raises(ConfigError) as exc:
        cfg(window_samples=40)
    assert exc.value.field == "window_samples"


@pytest.mark.parametrize("field,value", [("lstm_layers", 3), ("hidden_units", 0), ("dropout_p", 1.0),
                                         ("num_classes", 1)])
def test_config_errors_name_the_field(field, value):
    with pytest.raises(ConfigError) as exc:
        cfg(**{field: value})
    assert exc.value.field == field


def test_forward_shape_and_eval_purity(rng):
    model = build(cfg(hidden_units=128), seed=0)
    x = rng.standard_normal((1, 1, 50, 3)).astype(np.float32)
    logits = forward(model, np.concatenate([x, x]), training=False)
    assert logits.shape == (2, 8)
    np.testing.assert_array_equal(logits.data[0], logits.data[1])


def test_forward_rejects_wrong_batch_shape():
    model = build(cfg(hidden_units=8, num_filters=4), seed=0)
    with pytest.raises(ShapeError, match="batch"):
        forward(model, np.zeros((2, 1, 49, 3), np.float32))


def test_build_is_bitwise_reproducible():
    a, b = build(cfg(hidden_units=16), 5), build(cfg(hidden_units=16), 5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build(cfg(hidden_units=16), 6)
    assert c.lstms[0].W.data.tobytes() != a.lstms[0].W.data.tobytes()


def test_inventory_examples():
    one = parameter_inventory(build(cfg(hidden_units=128, lstm_layers=1), 0))
    two = parameter_inventory(build(cfg(hidden_units=128, lstm_layers=2), 0))
    assert lstm_parameter_total(one) == 164_352
    assert lstm_parameter_total(two) == 295_936 == 164_352 + 8 * 128 ** 2 + 4 * 128
    conv1 = [e for e in one if e.layer == "conv1"]
    assert sum(e.count for e in conv1) == 768


def test_inventory_diff_is_exactly_one_lstm_layer():
    one = parameter_inventory(build(cfg(hidden_units=32, lstm_layers=1), 0))
    two = parameter_inventory(build(cfg(hidden_units=32, lstm_layers=2), 0))
    assert {e.layer for e in two} - {e.layer for e in one} == {"lstm2"}
    shared = [(e.layer, e.param, e.shape) for e in one]
    assert shared == [(e.layer, e.param, e.shape) for e in two if e.layer != "lstm2"]
    assert sum(e.count for e in two) - sum(e.count for e in one) == 8 * 32 ** 2 + 4 * 32


def test_inventory_total_matches_closed_forms():
    model = build(cfg(hidden_units=24, lstm_layers=2), 0)
    expected = sum(layer.expected_count() for layer in model.layers.values())
    assert model.num_parameters() == expected == sum(e.count for e in parameter_inventory(model))


def test_logits_finite_on_bounded_inputs(rng):
    model = build(cfg(hidden_units=64, lstm_layers=2), 3)
    x = rng.uniform(-10, 10, (4, 1, 50, 3)).astype(np.float32)
    assert np.all(np.isfinite(forward(model, x).data))


def test_eval_forward_is_batch_order_equivariant(rng):
    model = build(cfg(hidden_units=16, num_filters=8), 1)
    x = rng.standard_normal((6, 1, 50, 3)).astype(np.float32)
    perm = rng.permutation(6)
    np.testing.assert_allclose(forward(model, x[perm]).data, forward(model, x).data[perm], rtol=1e-5, atol=1e-6)


def test_dropout_only_active_in_training(rng):
    model = build(cfg(hidden_units=16, num_filters=8), 1)
    x = rng.standard_normal((3, 1, 50, 3)).astype(np.float32)
    a = forward(model, x, training=True, rng=np.random.default_rng(0)).data
    b = forward(model, x, training=False).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("layers", [1, 2])
def test_full_model_gradients(layers, float64, rng):
    small = ModelConfig(num_classes=3, channels=2, window_samples=12, num_filters=3, kernel_len=3,
                        lstm_layers=layers, hidden_units=4, dropout_p=0.5)
    model = build(small, seed=2)
    for p in model.parameters():
        if p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.1
    x = rng.standard_normal((2, 1, 12, 2))
    y = np.array([0, 2])
    w = np.array([1.0, 2.0, 0.5])

    def loss_value(training_rng_seed=11):
        return T.softmax_cross_entropy_weighted(
            forward(model, x, training=True, rng=np.random.default_rng(training_rng_seed)), y, w)

    with Tape() as tape:
        tape.backward(loss_value())

    def f():
        with T.no_grad():
            return loss_value().item()

    for name, p in model.named_parameters():
        assert rel_error(p.grad, numeric_grad(f, p.data)) < 1e-4, name


def test_checkpoint_roundtrip(tmp_path, rng):
    model = build(cfg(hidden_units=8, num_filters=4, lstm_layers=2), 4)
    model.save(tmp_path / "m.npz")
    loaded = DeepConvLstmModel.load(tmp_path / "m.npz")
    assert loaded.config == model.config
    x = rng.standard_normal((2, 1, 50, 3)).astype(np.float32)
    np.testing.assert_array_equal(forward(loaded, x).data, forward(model, x).data)
