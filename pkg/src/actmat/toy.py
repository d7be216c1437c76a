"""Desk-scale fine-tuning scenarios for checking the merging theory.

Small MLPs are fine-tuned per task with exact full-batch gradient descent
from one shared pretrained initialisation. For selected linear layers the
trainer records, at every iteration, the layer inputs ``z`` and the
per-sample output gradients ``g = dloss_i/dy`` so that the weight update is
exactly ``-eta * mean(g z^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .covariance import empirical_covariance
from .linalg import as_matrix
from .tensor_store import Checkpoint

__all__ = [
    "ACTIVATIONS",
    "ToyNet",
    "TaskData",
    "ToyScenario",
    "TrainTrace",
    "TrainingDivergedError",
    "ConvergenceError",
    "generate_scenario",
    "train_full_batch",
    "brute_force_minimizer",
    "interference_objective",
    "interference_gradient",
    "layer_inputs",
    "task_losses",
]


def _identity(x):
    return x


def _identity_grad(x):
    return np.ones_like(x)


def _tanh_grad(x):
    return 1.0 - np.tanh(x) ** 2


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(np.float64)


# name -> (function, derivative); all are 1-Lipschitz
ACTIVATIONS = {
    "identity": (_identity, _identity_grad),
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}

LOSSES = ("mse", "norm")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"training diverged (non-finite loss) at iteration {iteration}")


class ConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ToyNet:
    """Fully connected net ``widths[0] -> ... -> widths[-1]``.

    Linear layer ``i`` owns ``layers.{i}.weight`` (``widths[i+1] x widths[i]``)
    and, if ``bias``, ``layers.{i}.bias``. The activation follows every
    linear layer except the last.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_linear(self) -> int:
        return len(self.widths) - 1

    def weight_name(self, i: int) -> str:
        return f"layers.{i}.weight"

    def bias_name(self, i: int) -> str:
        return f"layers.{i}.bias"

    @property
    def weight_names(self) -> list[str]:
        return [self.weight_name(i) for i in range(self.n_linear)]

    def components(self) -> list[tuple[str, str | None]]:
        """Layer-wise decomposition: ``("linear", i)`` and ``("act", None)`` entries."""
        out: list[tuple[str, str | None]] = []
        for i in range(self.n_linear):
            out.append(("linear", str(i)))
            if i < self.n_linear - 1:
                out.append(("act", None))
        return out

    def init(self, rng: np.random.Generator, name: str = "init", bias_scale: float = 0.1) -> Checkpoint:
        tensors = {}
        for i in range(self.n_linear):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            tensors[self.weight_name(i)] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in))
            if self.bias:
                tensors[self.bias_name(i)] = rng.normal(0.0, bias_scale, fan_out)
        return Checkpoint(name=name, tensors=tensors)

    def forward(self, params: Checkpoint, X: np.ndarray):
        """Return ``(output, inputs, pre)``: per linear layer its input batch and pre-activation."""
        act, _ = ACTIVATIONS[self.activation]
        h = np.asarray(X, dtype=np.float64)
        inputs, pre = [], []
        for i in range(self.n_linear):
            inputs.append(h)
            y = h @ params[self.weight_name(i)].T
            if self.bias:
                y = y + params[self.bias_name(i)]
            pre.append(y)
            h = act(y) if i < self.n_linear - 1 else y
        return h, inputs, pre

    def __call__(self, params: Checkpoint, X: np.ndarray) -> np.ndarray:
        return self.forward(params, X)[0]


def per_sample_loss(kind: str, out: np.ndarray, Y: np.ndarray | None) -> np.ndarray:
    if kind == "mse":
        return np.sum((out - Y) ** 2, axis=1)
    if kind == "norm":
        return np.linalg.norm(out, axis=1)
    raise ValueError(f"unknown loss {kind!r}")


def _loss_grad(kind: str, out: np.ndarray, Y: np.ndarray | None) -> np.ndarray:
    if kind == "mse":
        return 2.0 * (out - Y)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, out / safe, 0.0)


@dataclass
class TaskData:
    X: np.ndarray
    Y: np.ndarray
    teacher: Checkpoint | None = None


@dataclass
class ToyScenario:
    seed: int
    net: ToyNet
    pretrained: Checkpoint
    tasks: list[TaskData]
    eta: float = 0.05
    K: int = 50
    loss: str = "mse"
    noise_std: float = 0.01

    @property
    def T(self) -> int:
        return len(self.tasks)


def generate_scenario(
    seed: int,
    T: int,
    widths: Sequence[int],
    n_samples: int = 32,
    activation: str = "tanh",
    eta: float = 0.05,
    K: int = 50,
    loss: str = "mse",
    bias: bool = True,
    noise_std: float = 0.01,
    input_decay: float = 0.6,
    teacher_shift: float | None = None,
) -> ToyScenario:
    """Random shared initialisation plus ``T`` teacher-labelled tasks.

    Task ``t`` draws inputs ``x = xi @ M_t`` with ``xi ~ N(0, I)`` and a random
    task-specific mixing ``M_t`` whose singular values decay geometrically by
    ``input_decay``, so different tasks occupy different input directions.
    Labels come from a teacher of the same architecture plus Gaussian noise.
    With ``teacher_shift=None`` the teacher is an independent random net;
    otherwise it is the pretrained net with every tensor perturbed by
    ``teacher_shift`` times a fresh initialisation draw.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    net = ToyNet(tuple(widths), activation, bias)
    rng = np.random.default_rng(seed)
    pretrained = net.init(rng, name="pretrained")
    d_in = net.widths[0]
    scales = input_decay ** np.arange(d_in)
    tasks = []
    for t in range(T):
        Q, _ = np.linalg.qr(rng.normal(size=(d_in, d_in)))
        mixing = (scales[:, None] * Q.T) * np.sqrt(d_in / np.sum(scales**2))
        X = rng.normal(size=(n_samples, d_in)) @ mixing
        teacher = net.init(rng, name=f"teacher{t}")
        if teacher_shift is not None:
            teacher = Checkpoint(f"teacher{t}", {
                k: pretrained[k] + teacher_shift * v for k, v in teacher.items()
            })
        Y = net(teacher, X) + noise_std * rng.normal(size=(n_samples, net.widths[-1]))
        tasks.append(TaskData(X=X, Y=Y, teacher=teacher))
    return ToyScenario(seed=seed, net=net, pretrained=pretrained, tasks=tasks, eta=eta, K=K,
                       loss=loss, noise_std=noise_std)


@dataclass
class TrainTrace:
    """Per-iteration captures for one linear layer.

    ``zs[k]`` (L x D_i) and ``gs[k]`` (L x D_o) are recorded at iteration
    ``k = 0..K``; ``weights`` holds ``W^(0) .. W^(K+1)``.
    """

    layer: str
    eta: float
    zs: list[np.ndarray] = field(default_factory=list)
    gs: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.zs) - 1

    def delta_from_gradients(self) -> np.ndarray:
        total = np.zeros((self.gs[0].shape[1], self.zs[0].shape[1]))
        for z, g in zip(self.zs, self.gs):
            total += g.T @ z / z.shape[0]
        return -self.eta * total

    def delta(self) -> np.ndarray:
        return self.weights[-1] - self.weights[0]

    def covariance(self, k: int = -1) -> np.ndarray:
        return empirical_covariance(self.zs[k])

    def to_tensors(self, prefix: str = "trace/") -> dict[str, np.ndarray]:
        base = f"{prefix}{self.layer}/"
        out = {f"{base}eta": np.asarray(self.eta, dtype=np.float64)}
        width = len(str(len(self.weights)))
        for k, (z, g) in enumerate(zip(self.zs, self.gs)):
            out[f"{base}z/{k:0{width}d}"] = z
            out[f"{base}g/{k:0{width}d}"] = g
        for k, W in enumerate(self.weights):
            out[f"{base}W/{k:0{width}d}"] = W
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "trace/") -> dict[str, "TrainTrace"]:
        grouped: dict[str, dict[str, dict[int, np.ndarray]]] = {}
        etas: dict[str, float] = {}
        for key in sorted(tensors):
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            if rest.endswith("/eta"):
                etas[rest[: -len("/eta")]] = float(tensors[key])
                continue
            layer, kind, idx = rest.rsplit("/", 2)
            grouped.setdefault(layer, {"z": {}, "g": {}, "W": {}})[kind][int(idx)] = tensors[key]
        traces = {}
        for layer, parts in grouped.items():
            traces[layer] = cls(
                layer=layer,
                eta=etas[layer],
                zs=[parts["z"][k] for k in sorted(parts["z"])],
                gs=[parts["g"][k] for k in sorted(parts["g"])],
                weights=[parts["W"][k] for k in sorted(parts["W"])],
            )
        return traces


def train_full_batch(
    scenario: ToyScenario,
    task: int,
    capture_layers: Iterable[str] | None = None,
    eta: float | None = None,
    K: int | None = None,
) -> tuple[Checkpoint, dict[str, TrainTrace]]:
    """Fine-tune the pretrained net on one task with full-batch GD.

    Iterations ``k = 0..K`` each apply ``W <- W - eta * mean_i(g_i z_i^T)``,
    so ``K + 1`` updates happen in total.
    """
    if not 0 <= task < scenario.T:
        raise IndexError(f"task index {task} out of range for {scenario.T} tasks")
    net = scenario.net
    eta = scenario.eta if eta is None else float(eta)
    K = scenario.K if K is None else int(K)
    if K < 0:
        raise ValueError("K must be non-negative")
    data = scenario.tasks[task]
    capture = set(capture_layers or ())
    unknown = capture - set(net.weight_names)
    if unknown:
        raise KeyError(f"cannot capture unknown layers {sorted(unknown)}")
    _, act_grad = ACTIVATIONS[net.activation]

    params = {k: v.astype(np.float64).copy() for k, v in scenario.pretrained.items()}
    traces = {
        name: TrainTrace(layer=name, eta=eta, weights=[params[name].copy()]) for name in sorted(capture)
    }
    L = data.X.shape[0]
    for k in range(K + 1):
        ckpt = Checkpoint(name="_", tensors=params)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            out, inputs, pre = net.forward(ckpt, data.X)
            loss = float(np.mean(per_sample_loss(scenario.loss, out, data.Y)))
        if not np.isfinite(loss):
            raise TrainingDivergedError(k)
        g = _loss_grad(scenario.loss, out, data.Y)
        grads = {}
        for i in reversed(range(net.n_linear)):
            if i < net.n_linear - 1:
                g = g * act_grad(pre[i])
            wname = net.weight_name(i)
            z = inputs[i]
            if wname in traces:
                traces[wname].zs.append(z.copy())
                traces[wname].gs.append(g.copy())
            grads[wname] = g.T @ z / L
            if net.bias:
                grads[net.bias_name(i)] = g.mean(axis=0)
            g = g @ params[wname]
        for name, grad in grads.items():
            params[name] = params[name] - eta * grad
            if not np.all(np.isfinite(params[name])):
                raise TrainingDivergedError(k)
        for name, tr in traces.items():
            tr.weights.append(params[name].copy())
    final = Checkpoint(name=f"expert{task}", tensors=params)
    return final, traces


def layer_inputs(net: ToyNet, params: Checkpoint, X: np.ndarray) -> dict[str, np.ndarray]:
    """Input batch seen by each linear layer when running ``params`` on ``X``."""
    _, inputs, _ = net.forward(params, X)
    return {net.weight_name(i): z for i, z in enumerate(inputs)}


def task_losses(scenario: ToyScenario, params: Checkpoint) -> list[float]:
    return [
        float(np.mean(per_sample_loss(scenario.loss, scenario.net(params, d.X), d.Y)))
        for d in scenario.tasks
    ]


def interference_objective(W, Ws: Sequence, Cs: Sequence) -> float:
    """``sum_t tr((W - W_t)^T (W - W_t) C_t)``."""
    W = np.asarray(W, dtype=np.float64)
    total = 0.0
    for Wt, C in zip(Ws, Cs):
        D = W - Wt
        total += float(np.trace(D.T @ D @ C))
    return total


def interference_gradient(W, Ws: Sequence, Cs: Sequence) -> np.ndarray:
    """``2 sum_t (W - W_t) C_t``."""
    W = np.asarray(W, dtype=np.float64)
    G = np.zeros_like(W)
    for Wt, C in zip(Ws, Cs):
        G += (W - Wt) @ C
    return 2.0 * G


def _lambda_max(A: np.ndarray, rng: np.random.Generator, iters: int = 5000, tol: float = 1e-13) -> float:
    v = rng.normal(size=A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / nw
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def brute_force_minimizer(
    Ws: Sequence,
    Cs: Sequence,
    steps: int = 500_000,
    lr: float | None = None,
    tol: float = 1e-10,
    seed: int = 0,
) -> np.ndarray:
    """Minimise the interference objective by plain gradient descent from zero.

    Starting at ``W = 0`` keeps every iterate in the row space of
    ``sum_t C_t``, so the limit is the minimum-norm minimiser. The default
    step is ``0.9 / lambda_max(sum_t C_t)`` with ``lambda_max`` from power
    iteration.
    """
    Ws = [as_matrix(W) for W in Ws]
    Cs = [as_matrix(C) for C in Cs]
    A = sum(Cs[1:], Cs[0].copy())
    B = sum((W @ C for W, C in zip(Ws[1:], Cs[1:])), Ws[0] @ Cs[0])
    if lr is None:
        lam = _lambda_max(A, np.random.default_rng(seed))
        if lam == 0.0:
            return np.zeros_like(Ws[0])
        lr = 0.9 / lam
    W = np.zeros_like(Ws[0])
    step = 2.0 * lr
    for i in range(steps):
        G = W @ A - B
        if i % 16 == 0 and 2.0 * np.linalg.norm(G) <= tol:
            return W
        W -= step * G
    G = W @ A - B
    if 2.0 * np.linalg.norm(G) <= tol:
        return W
    raise ConvergenceError(
        f"gradient norm {2.0 * np.linalg.norm(G):.3e} above {tol:.1e} after {steps} steps"
    )
