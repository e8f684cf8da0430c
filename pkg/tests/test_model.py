import json

import numpy as np
import pytest

from pro_ood import tensor as tn
from pro_ood.datasets import LabeledDataset, gen_blobs
from pro_ood.errors import DataIOError, DimensionError, DivergenceError, ParseError, SchemaError, ValidationError
from pro_ood.model import (
    Activation,
    Classifier,
    Dense,
    TrainConfig,
    accuracy,
    cross_entropy,
    dumps_weights,
    forward,
    init_mlp,
    load_weights,
    loads_weights,
    pgd_attack,
    save_weights,
    train,
)
from pro_ood.rng import philox

from oracles import central_diff, rel_err


def test_identity_layer_forward():
    net = Classifier((Dense(np.eye(2), np.zeros(2)),))
    assert net(np.array([1.0, 2.0])).tolist() == [1.0, 2.0]


def test_hand_matrix_forward():
    net = Classifier((Dense([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0]),))
    assert net(np.array([3.0, 4.0])).tolist() == [3.0, -4.0]


def _straight_line_forward(net, x):
    h = np.array(x, dtype=np.float64)
    for layer in net.layers:
        if isinstance(layer, Dense):
            h = np.array([[sum(row[j] * h_[j] for j in range(len(h_))) for row in layer.W] for h_ in np.atleast_2d(h)])
            h = h + layer.b
        elif layer.kind == "relu":
            h = np.maximum(h, 0.0)
        else:
            h = np.tanh(h)
    return h


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_independent_reimplementation(act):
    net = init_mlp([6, 9, 7, 4], act, seed=42)
    X = philox(42, 1).normal(size=(5, 6))
    assert np.max(np.abs(net(X) - _straight_line_forward(net, X))) < 1e-12


def test_wrong_input_dim():
    net = init_mlp([3, 4, 2], seed=0)
    with pytest.raises(DimensionError):
        net(np.zeros(4))


def test_linear_input_gradient():
    net = Classifier((Dense([[2.0, -3.0]], [0.0]),))
    for x in ([0.0, 0.0], [5.0, -1.0]):
        logits, tape = forward(net, np.array(x))
        tn.sum(logits)
        assert tn.grad_input(tape).tolist() == [2.0, -3.0]


def test_relu_squared_gradient():
    tape = tn.Tape()
    x = tape.watch_input(np.array([1.5]))
    r = tn.relu(x)
    tn.sum(tn.mul(r, r))
    assert tn.grad_input(tape).tolist() == [3.0]


def test_squared_error_weight_gradient_is_outer_product():
    W = np.array([[0.5, -1.0, 2.0], [1.0, 0.0, -0.5]])
    net = Classifier((Dense(W, np.array([0.1, -0.2])),))
    x = np.array([1.0, 2.0, -1.0])
    target = np.array([0.3, 0.7])
    logits, tape = forward(net, x, params=True)
    r = tn.sub(logits, target)
    tn.mul(tn.sum(tn.mul(r, r)), 0.5)
    (dW, db), = tn.grad_params(tape)
    residual = net(x) - target
    assert np.allclose(dW, np.outer(residual, x), atol=1e-15)
    assert np.allclose(db, residual, atol=1e-15)


def test_zero_loss_gives_zero_gradients():
    net = Classifier((Dense(np.eye(2), np.zeros(2)),))
    x = np.array([1.0, -2.0])
    logits, tape = forward(net, x, params=True)
    r = tn.sub(logits, x)
    tn.sum(tn.mul(r, r))
    (dW, db), = tn.grad_params(tape)
    assert not dW.any() and not db.any()


@pytest.mark.parametrize("seed", range(4))
def test_cross_entropy_weight_gradients_match_fd(seed):
    net = init_mlp([4, 6, 5, 3], "tanh", seed)
    rng = philox(seed, 7)
    X = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    logits, tape = forward(net, X, params=True)
    tn.sum(cross_entropy(logits, y))
    grads = tn.grad_params(tape)
    dense = net.dense_layers

    def loss(layers):
        return float(np.sum(cross_entropy(forward(net.with_dense(layers), X, record=False)[0], y).data))

    for li, (gw, gb) in enumerate(grads):
        def f_w(W, li=li):
            ls = list(dense)
            ls[li] = Dense(W.copy(), dense[li].b)
            return loss(ls)

        def f_b(b, li=li):
            ls = list(dense)
            ls[li] = Dense(dense[li].W, b.copy())
            return loss(ls)

        assert rel_err(gw, central_diff(f_w, dense[li].W)) < 1e-4
        assert rel_err(gb, central_diff(f_b, dense[li].b)) < 1e-4


def test_cross_entropy_value():
    z = np.array([[1.0, 2.0, 0.5]])
    expected = np.log(np.sum(np.exp(z))) - 2.0
    assert cross_entropy(tn.Tensor(z), [1]).data[0] == pytest.approx(expected, abs=1e-15)


def test_classifier_validation():
    with pytest.raises(SchemaError):
        Classifier((Dense(np.ones((3, 2)), np.zeros(3)), Dense(np.ones((2, 4)), np.zeros(2))))
    with pytest.raises(SchemaError):
        Classifier((Dense(np.ones((3, 2)), np.zeros(3)), Activation("relu")))
    with pytest.raises(SchemaError):
        Activation("gelu")
    with pytest.raises(DimensionError):
        Dense(np.ones((3, 2)), np.zeros(2))


def test_init_is_seeded():
    a = init_mlp([5, 8, 3], "relu", 11)
    b = init_mlp([5, 8, 3], "relu", 11)
    c = init_mlp([5, 8, 3], "relu", 12)
    assert dumps_weights(a) == dumps_weights(b) != dumps_weights(c)
    assert all(not d.b.any() for d in a.dense_layers)


# -- PGD -----------------------------------------------------------------------


def test_pgd_zero_eps_returns_input():
    net = init_mlp([3, 5, 2], seed=1)
    x = philox(1, 1).normal(size=(4, 3))
    assert np.array_equal(pgd_attack(net, x, [0, 1, 0, 1], 0.0, 5, 0.1), x)


def test_pgd_rejects_negative_eps():
    net = init_mlp([3, 2], seed=1)
    with pytest.raises(ValidationError):
        pgd_attack(net, np.zeros(3), [0], -0.1, 3, 0.1)


def test_pgd_linear_model_lands_on_analytic_maximiser():
    w1, w2 = np.array([1.0, -2.0, 0.5]), np.array([-1.0, 1.0, 1.5])
    net = Classifier((Dense(np.stack([w1, w2]), np.zeros(2)),))
    x = np.array([[0.3, -0.2, 0.1]])
    eps = 0.05
    x_adv = pgd_attack(net, x, [0], eps, 1, eps)
    # CE for label 0 grows with z2 - z1, so the maximiser moves along sign(w2 - w1)
    assert np.allclose(x_adv, x + eps * np.sign(w2 - w1), atol=1e-15)


def test_pgd_never_lowers_loss_and_stays_in_ball():
    for trial in range(100):
        rng = philox(trial, 3)
        net = init_mlp([5, 7, 3], "relu" if trial % 2 else "tanh", trial)
        x = rng.normal(size=(3, 5))
        y = rng.integers(0, 3, size=3)
        eps = float(rng.uniform(0.01, 0.5))
        x_adv = pgd_attack(net, x, y, eps, 5, 2.5 * eps / 5)
        assert np.max(np.abs(x_adv - x)) <= eps + 1e-12
        before = cross_entropy(forward(net, x, record=False)[0], y).data
        after = cross_entropy(forward(net, x_adv, record=False)[0], y).data
        assert np.all(after >= before)


# -- training ------------------------------------------------------------------


def test_standard_training_separates_blobs():
    data = gen_blobs(2, 50, 2, 6.0, seed=3, split="train")
    net, loss = train(data, TrainConfig(epochs=200, hidden=(8,), seed=3))
    assert accuracy(net, data.X, data.y) == 1.0
    assert loss < 0.05


def test_adversarial_training_loss_is_small():
    data = gen_blobs(2, 50, 2, 6.0, seed=3, split="train")
    cfg = TrainConfig(epochs=200, hidden=(8,), seed=3, mode="adversarial", eps_adv=0.5, pgd_steps=3)
    net, loss = train(data, cfg)
    assert loss < 0.1


def test_zero_epochs_returns_initialisation():
    data = gen_blobs(3, 10, 4, 6.0, seed=1)
    cfg = TrainConfig(epochs=0, hidden=(5,), seed=9)
    net, _ = train(data, cfg)
    assert dumps_weights(net) == dumps_weights(init_mlp([4, 5, 3], "relu", 9))


def test_training_is_deterministic():
    data = gen_blobs(3, 20, 4, 6.0, seed=1)
    cfg = TrainConfig(epochs=5, hidden=(6,), seed=4, mode="adversarial", eps_adv=0.1)
    assert dumps_weights(train(data, cfg)[0]) == dumps_weights(train(data, cfg)[0])


def test_divergence_names_epoch():
    X = np.array([[1e150, -1e150], [-1e150, 1e150]])
    data = LabeledDataset(X, np.array([0, 1]), 2, "train")
    with pytest.raises(DivergenceError) as info:
        train(data, TrainConfig(epochs=3, hidden=(4,), learning_rate=1e10))
    assert info.value.epoch in (0, 1, 2)
    assert f"epoch {info.value.epoch}" in str(info.value)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(mode="fancy")
    with pytest.raises(ValidationError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValidationError):
        TrainConfig(mode="adversarial", eps_adv=0.0)
    assert TrainConfig(eps_adv=0.2, pgd_steps=4).step_size == pytest.approx(0.125)


# -- weight files --------------------------------------------------------------


def test_weight_round_trip_is_bit_exact(tmp_path):
    net = init_mlp([4, 6, 3], "tanh", 5)
    dense = [Dense(d.W * np.pi, d.b + 1e-300) for d in net.dense_layers]
    net = net.with_dense(dense)
    path = tmp_path / "w.json"
    save_weights(net, path)
    back = load_weights(path)
    for a, b in zip(net.dense_layers, back.dense_layers):
        assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
    assert dumps_weights(back).encode() == path.read_bytes()


def test_hand_written_file_parses():
    doc = {
        "format_version": 1,
        "input_dim": 2,
        "class_count": 3,
        "layers": [
            {"type": "dense", "in": 2, "out": 4, "W": list(range(8)), "b": [0, 0, 0, 0]},
            {"type": "relu"},
            {"type": "dense", "in": 4, "out": 3, "W": [0.5] * 12, "b": [1, 2, 3]},
        ],
    }
    net = loads_weights(json.dumps(doc).encode())
    assert [d.W.shape for d in net.dense_layers] == [(4, 2), (3, 4)]
    assert net.dense_layers[0].W[1].tolist() == [2.0, 3.0]


def test_mismatched_dims_is_schema_error():
    doc = {
        "format_version": 1,
        "input_dim": 2,
        "class_count": 3,
        "layers": [
            {"type": "dense", "in": 2, "out": 4, "W": [0] * 8, "b": [0] * 4},
            {"type": "dense", "in": 5, "out": 3, "W": [0] * 15, "b": [0] * 3},
        ],
    }
    with pytest.raises(SchemaError):
        loads_weights(json.dumps(doc).encode())


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda d: d.pop("class_count"), "class_count"),
        (lambda d: d.update(format_version=2), "format_version"),
        (lambda d: d["layers"][0].update(W=[0] * 5), "W"),
        (lambda d: d["layers"][0].update(type="conv"), "type"),
        (lambda d: d.update(input_dim=3), "input_dim"),
        (lambda d: d["layers"][0].update(b=["x", 0]), "W"),
    ],
)
def test_schema_errors_name_field(mutate, field):
    doc = {"format_version": 1, "input_dim": 2, "class_count": 2,
           "layers": [{"type": "dense", "in": 2, "out": 2, "W": [1, 0, 0, 1], "b": [0, 0]}]}
    mutate(doc)
    with pytest.raises(SchemaError) as info:
        loads_weights(json.dumps(doc).encode())
    assert info.value.field == field


def test_malformed_file_reports_offset():
    raw = b'{"format_version": 1, "input_dim": 2,, }'
    with pytest.raises(ParseError) as info:
        loads_weights(raw)
    assert info.value.offset == raw.index(b",,") + 1
    assert "byte offset" in str(info.value)


def test_non_finite_literal_rejected():
    with pytest.raises(ParseError):
        loads_weights(b'{"format_version": 1, "x": NaN}')


def test_missing_weight_file():
    with pytest.raises(DataIOError):
        load_weights("/nonexistent/weights.json")
