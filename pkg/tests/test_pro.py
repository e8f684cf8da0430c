import numpy as np
import pytest

from pro_ood import tensor as tn
from pro_ood.datasets import make_desk_data
from pro_ood.errors import NumericError, ValidationError
from pro_ood.model import Classifier, Dense, init_mlp, load_weights
from pro_ood.pro import (
    ProConfig,
    delta_z,
    odin_preprocess_score,
    perturbation_path,
    pro_score,
    robustness_gap,
    score_and_grad,
)
from pro_ood.rng import philox
from pro_ood.scores import KINDS, ScoreFn

from oracles import linear_net, linear_score

W_LIN = np.array([2.0, -1.0])


def test_linear_pro_descends_by_l1_norm_each_step():
    net = linear_net(W_LIN)
    x = np.array([0.3, 0.7])
    g0 = float(W_LIN @ x)
    g_star, traj = pro_score(net, linear_score, x, ProConfig(0.1, 3))
    assert np.allclose(np.diff(traj.scores), -0.3, atol=1e-12)
    assert g_star == pytest.approx(g0 - 0.9, abs=1e-12)


def test_linear_odin_and_delta_z():
    net = linear_net(W_LIN)
    x = np.array([0.3, 0.7])
    g0 = float(W_LIN @ x)
    assert odin_preprocess_score(net, linear_score, x, 0.1) == pytest.approx(g0 + 0.3, abs=1e-12)
    assert delta_z(net, linear_score, x, 0.1) == pytest.approx(0.3, abs=1e-12)
    assert delta_z(net, linear_score, x, 0.0) == 0.0
    assert odin_preprocess_score(net, linear_score, x, 0.0) == pytest.approx(g0, abs=0)


def test_k_zero_is_unperturbed_score():
    net = init_mlp([4, 6, 3], seed=2)
    x = philox(2, 1).normal(size=4)
    g_star, traj = pro_score(net, ScoreFn("MSP"), x, ProConfig(0.01, 0))
    assert len(traj) == 1
    assert g_star == ScoreFn("MSP")(net(x))


def test_trajectory_records_k_plus_one_scores_and_steps():
    net = init_mlp([5, 8, 4], seed=3)
    x = philox(3, 1).normal(size=5)
    cfg = ProConfig(0.02, 4)
    g_star, traj = pro_score(net, ScoreFn("ENT"), x, cfg, keep_inputs=True)
    assert len(traj.scores) == 5 and len(traj.inputs) == 5
    assert traj.scores[0] == ScoreFn("ENT")(net(x))
    assert g_star == traj.scores.min()
    for a, b in zip(traj.inputs, traj.inputs[1:]):
        step = np.abs(b - a)
        assert np.all((step == 0) | np.isclose(step, 0.02, rtol=0, atol=1e-15))
    for xi, si in zip(traj.inputs, traj.scores):
        assert si == ScoreFn("ENT")(net(xi))


def test_each_step_follows_fresh_gradient_sign():
    net = init_mlp([3, 6, 3], "tanh", seed=4)
    fn = ScoreFn("MSP")
    _, traj = pro_score(net, fn, philox(4, 1).normal(size=3), ProConfig(0.05, 3), keep_inputs=True)
    for a, b in zip(traj.inputs, traj.inputs[1:]):
        _, g = score_and_grad(net, fn, a)
        assert np.array_equal(b, a - 0.05 * np.sign(g))


def test_flat_coordinates_do_not_move():
    # the second input feature has no weight, so its gradient is exactly 0
    net = Classifier((Dense([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0]),))
    _, traj = pro_score(net, ScoreFn("MSP"), np.array([0.5, 3.0]), ProConfig(0.1, 3), keep_inputs=True)
    assert all(xi[1] == 3.0 for xi in traj.inputs)


def test_constant_score_has_zero_shift():
    net = Classifier((Dense(np.zeros((3, 4)), np.array([1.0, 0.0, -1.0])),))
    X = philox(5, 1).normal(size=(6, 4))
    assert np.all(delta_z(net, ScoreFn("MSP"), X, 0.1) == 0.0)


def test_batch_matches_single_samples():
    net = init_mlp([6, 10, 4], seed=6)
    X = philox(6, 1).normal(size=(8, 6))
    cfg = ProConfig(0.01, 5)
    for kind in KINDS:
        fn = ScoreFn(kind, T=10.0)
        batch, _ = pro_score(net, fn, X, cfg)
        single = [pro_score(net, fn, x, cfg)[0] for x in X]
        assert np.array_equal(batch, single)


def test_clamp_keeps_every_intermediate_in_box():
    net = init_mlp([4, 8, 3], seed=7)
    x = np.full(4, 0.95)
    cfg = ProConfig(0.2, 6, clamp=(0.0, 1.0))
    _, traj = pro_score(net, ScoreFn("MSP"), x, cfg, keep_inputs=True)
    for xi in traj.inputs:
        assert np.all((xi >= 0.0) & (xi <= 1.0))


def test_per_feature_clamp():
    net = init_mlp([3, 5, 2], seed=8)
    lo, hi = np.array([0.0, -1.0, -0.1]), np.array([0.1, 1.0, 0.1])
    _, traj = pro_score(net, ScoreFn("ENT"), np.zeros(3), ProConfig(0.3, 4, clamp=(lo, hi)), keep_inputs=True)
    for xi in traj.inputs:
        assert np.all((xi >= lo) & (xi <= hi))


def test_config_validation():
    with pytest.raises(ValidationError):
        ProConfig(-0.1, 3)
    with pytest.raises(ValidationError):
        ProConfig(0.1, 65)
    with pytest.raises(ValidationError):
        ProConfig(0.1, 3, direction="sideways")
    with pytest.raises(ValidationError):
        ProConfig(0.1, 3, clamp=(1.0, 0.0))
    net = init_mlp([2, 2], seed=0)
    with pytest.raises(ValidationError):
        pro_score(net, ScoreFn("MSP"), np.zeros(2), ProConfig(0.1, 2, direction="maximize"))


def test_non_finite_score_names_step():
    net = Classifier((Dense([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]),))

    def exploding(z):
        # finite at the start, log of a negative number after one step
        return tn.log(tn.sum(z, axis=-1))

    with pytest.raises(NumericError) as info:
        perturbation_path(net, exploding, np.array([0.05, 0.05]), ProConfig(0.1, 3))
    assert "step 1" in str(info.value)


def test_robustness_gap_identical_sets_is_zero():
    net = init_mlp([4, 6, 3], seed=9)
    X = philox(9, 1).normal(size=(20, 4))
    gap = robustness_gap(net, ScoreFn("MSP"), X, X.copy(), 0.01)
    assert gap.gap == 0.0
    assert len(gap.dz_ind) == 20


def test_robustness_gap_rejects_empty_set():
    net = init_mlp([4, 6, 3], seed=9)
    with pytest.raises(ValidationError):
        robustness_gap(net, ScoreFn("MSP"), np.zeros((3, 4)), np.zeros((0, 4)), 0.01)


def test_pro_never_exceeds_base_and_is_monotone_in_k():
    for trial in range(200):
        rng = philox(trial, 11)
        net = init_mlp([5, 7, 4], "relu" if trial % 2 else "tanh", trial)
        x = rng.normal(size=(4, 5))
        fn = ScoreFn(KINDS[trial % len(KINDS)], T=2.0)
        traj = perturbation_path(net, fn, x, ProConfig(float(rng.uniform(0, 0.5)), 7))
        prefix_min = np.minimum.accumulate(traj.scores, axis=0)
        assert np.all(prefix_min[-1] <= traj.scores[0])
        assert np.all(np.diff(prefix_min, axis=0) <= 0)


@pytest.fixture(scope="module")
def desk_net(desk_run):
    out, _ = desk_run
    return load_weights(out / "model" / "weights.json"), make_desk_data(7)


def test_odin_raises_near_ood_scores(desk_net):
    net, data = desk_net
    fn = ScoreFn("MSP")
    X = data["near_shift"].X
    assert np.mean(odin_preprocess_score(net, fn, X, 0.01)) > np.mean(fn(net(X)))


def test_min_tracking_matters_at_large_eps(desk_net):
    net, data = desk_net
    X = np.vstack([data["near_shift"].X, data["far_ring"].X])
    traj = perturbation_path(net, ScoreFn("MSP"), X, ProConfig(0.05, 7))
    # some samples end above an earlier point of their own trajectory
    assert np.any(traj.scores[:-1].min(axis=0) < traj.scores[-1])
