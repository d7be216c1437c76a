import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actmat.tensor_store import Checkpoint, load_checkpoint, save_checkpoint
from actmat.toy import (
    ConvergenceError,
    ToyNet,
    ToyScenario,
    TaskData,
    TrainingDivergedError,
    TrainTrace,
    brute_force_minimizer,
    generate_scenario,
    interference_gradient,
    interference_objective,
    layer_inputs,
    task_losses,
    train_full_batch,
)
from actmat.verify import random_psd

seeds = st.integers(0, 2**31 - 1)


def test_scenario_determinism():
    a = generate_scenario(5, T=2, widths=(3, 4, 2))
    b = generate_scenario(5, T=2, widths=(3, 4, 2))
    for ta, tb in zip(a.tasks, b.tasks):
        assert np.array_equal(ta.X, tb.X) and np.array_equal(ta.Y, tb.Y)
    assert a.pretrained.bit_equal(b.pretrained)


def test_scenario_shapes():
    sc = generate_scenario(0, T=1, widths=(3, 7, 2), n_samples=11)
    assert sc.T == 1
    assert sc.tasks[0].X.shape == (11, 3) and sc.tasks[0].Y.shape == (11, 2)
    assert sc.pretrained["layers.0.weight"].shape == (7, 3)
    assert sc.pretrained["layers.1.bias"].shape == (2,)


def test_teacher_shift_keeps_teacher_near_pretrained():
    sc = generate_scenario(1, T=2, widths=(3, 4, 2), teacher_shift=0.1)
    for task in sc.tasks:
        for k, v in sc.pretrained.items():
            assert np.linalg.norm(task.teacher[k] - v) < np.linalg.norm(v) + 1.0


def test_eta_zero_leaves_weights():
    sc = generate_scenario(2, T=1, widths=(3, 4, 2), K=5)
    final, traces = train_full_batch(sc, 0, capture_layers=["layers.0.weight"], eta=0.0)
    assert final.bit_equal(Checkpoint(final.name, sc.pretrained.tensors))
    assert not np.any(traces["layers.0.weight"].delta())


def test_k_zero_captures_one_iteration():
    sc = generate_scenario(2, T=1, widths=(3, 4, 2), K=0)
    _, traces = train_full_batch(sc, 0, capture_layers=["layers.1.weight"])
    tr = traces["layers.1.weight"]
    assert tr.K == 0 and len(tr.zs) == 1 and len(tr.weights) == 2


def linear_scenario(seed, d_in=3, d_out=2, L=7, eta=0.05, K=30):
    rng = np.random.default_rng(seed)
    net = ToyNet((d_in, d_out), activation="identity", bias=False)
    pre = Checkpoint("pre", {"layers.0.weight": rng.normal(size=(d_out, d_in))})
    X, Y = rng.normal(size=(L, d_in)), rng.normal(size=(L, d_out))
    return ToyScenario(seed, net, pre, [TaskData(X, Y)], eta=eta, K=K, loss="mse")


@given(seeds)
def test_linear_regression_recurrence(seed):
    sc = linear_scenario(seed)
    _, traces = train_full_batch(sc, 0, capture_layers=["layers.0.weight"])
    X, Y = sc.tasks[0].X.T, sc.tasks[0].Y.T  # columns are samples
    L = X.shape[1]
    W = sc.pretrained["layers.0.weight"].copy()
    for k, Wk in enumerate(traces["layers.0.weight"].weights):
        assert np.max(np.abs(Wk - W)) <= 1e-10, k
        W = W - (2 * sc.eta / L) * (W @ X - Y) @ X.T


@settings(max_examples=25)
@given(seeds, st.sampled_from(["tanh", "relu", "identity"]), st.sampled_from(["mse", "norm"]))
def test_gd_consistency(seed, activation, loss):
    sc = generate_scenario(seed, T=1, widths=(4, 5, 3), n_samples=9, activation=activation, loss=loss, K=20)
    _, traces = train_full_batch(sc, 0, capture_layers=sc.net.weight_names)
    for tr in traces.values():
        delta = tr.delta()
        assert np.linalg.norm(tr.delta_from_gradients() - delta) <= 1e-8 * max(np.linalg.norm(delta), 1e-300)


def test_gradients_match_finite_differences():
    sc = generate_scenario(4, T=1, widths=(3, 4, 2), n_samples=5, K=0, eta=1e-7)
    _, traces = train_full_batch(sc, 0, capture_layers=["layers.0.weight"])
    tr = traces["layers.0.weight"]
    grad = tr.gs[0].T @ tr.zs[0] / tr.zs[0].shape[0]
    h = 1e-6
    W = sc.pretrained["layers.0.weight"]
    for i, j in [(0, 0), (2, 1), (3, 2)]:
        vals = []
        for s in (+h, -h):
            Wp = W.copy()
            Wp[i, j] += s
            p = Checkpoint("p", {**sc.pretrained.tensors, "layers.0.weight": Wp})
            vals.append(task_losses(sc, p)[0])
        assert (vals[0] - vals[1]) / (2 * h) == pytest.approx(grad[i, j], rel=1e-5, abs=1e-9)


def test_trace_serialisation(tmp_path):
    sc = generate_scenario(3, T=1, widths=(3, 4, 2), K=3)
    _, traces = train_full_batch(sc, 0, capture_layers=sc.net.weight_names)
    tensors = {}
    for tr in traces.values():
        tensors.update(tr.to_tensors())
    assert all(k.startswith("trace/") for k in tensors)
    save_checkpoint(Checkpoint("tr", tensors), tmp_path / "t.ckpt.st")
    back = TrainTrace.from_tensors(load_checkpoint(tmp_path / "t.ckpt.st").tensors)
    for name, tr in traces.items():
        b = back[name]
        assert b.eta == tr.eta and b.K == tr.K
        assert all(np.array_equal(x, y) for x, y in zip(b.weights, tr.weights))
        assert all(np.array_equal(x, y) for x, y in zip(b.gs, tr.gs))


def test_divergence_detected():
    sc = generate_scenario(0, T=1, widths=(3, 4, 2), K=400, eta=50.0, activation="identity")
    with pytest.raises(TrainingDivergedError) as e:
        train_full_batch(sc, 0)
    assert e.value.iteration >= 0


def test_bad_arguments():
    sc = generate_scenario(0, T=1, widths=(3, 2))
    with pytest.raises(IndexError):
        train_full_batch(sc, 1)
    with pytest.raises(KeyError):
        train_full_batch(sc, 0, capture_layers=["nope"])
    with pytest.raises(ValueError):
        generate_scenario(0, T=0, widths=(3, 2))


def test_layer_inputs():
    sc = generate_scenario(0, T=1, widths=(3, 4, 2), activation="relu")
    z = layer_inputs(sc.net, sc.pretrained, sc.tasks[0].X)
    assert np.array_equal(z["layers.0.weight"], sc.tasks[0].X)
    assert np.all(z["layers.1.weight"] >= 0)


class TestBruteForce:
    def test_single_task(self, rng):
        W = rng.normal(size=(3, 4))
        C = random_psd(rng, 4, 4)
        assert np.linalg.norm(brute_force_minimizer([W], [C]) - W) <= 1e-6

    def test_identity(self, rng):
        Ws = [rng.normal(size=(2, 3)) for _ in range(3)]
        assert np.linalg.norm(brute_force_minimizer(Ws, [np.eye(3)] * 3) - sum(Ws) / 3) <= 1e-6

    def test_objective_and_gradient(self, rng):
        Ws = [rng.normal(size=(2, 3)) for _ in range(2)]
        Cs = [random_psd(rng, 3, 2) for _ in range(2)]
        W = rng.normal(size=(2, 3))
        E = rng.normal(size=W.shape)
        h = 1e-6
        fd = (interference_objective(W + h * E, Ws, Cs) - interference_objective(W - h * E, Ws, Cs)) / (2 * h)
        assert fd == pytest.approx(np.sum(interference_gradient(W, Ws, Cs) * E), rel=1e-6)

    def test_non_convergence(self, rng):
        Ws = [rng.normal(size=(2, 3)) for _ in range(2)]
        Cs = [random_psd(rng, 3, 3) for _ in range(2)]
        with pytest.raises(ConvergenceError):
            brute_force_minimizer(Ws, Cs, steps=3)
