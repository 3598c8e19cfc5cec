"""Synthetic multi-task teacher-student benchmark.

Each task k owns a target update ``(alpha/r) * diag(b_k) @ B* @ diag(a_k) @ A*``
on top of a shared frozen base weight. Inputs carry a one-hot task tag in their
first ``tag_width`` coordinates followed by Gaussian noise, so a router that
reads the raw input can learn which task it is looking at.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import adapters, grads
from .adapters import LoRALayer, MoELoRALayer, MoRLayer
from .matcore import SplitMix64, matmul, rng_gaussian_matrix

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class TeacherSpec:
    W: np.ndarray
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)
    task_a: np.ndarray  # (K, r)
    task_b: np.ndarray  # (K, d_out)
    alpha: float
    tag_width: int

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.task_a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_w(self, k: int) -> np.ndarray:
        """Dense update of task k (used as an oracle, not on the hot path)."""
        return self.scale * matmul(matmul(np.diag(self.task_b[k]), self.B),
                                   matmul(np.diag(self.task_a[k]), self.A))


def make_teacher(d_in: int, d_out: int, rank: int, n_tasks: int, tag_width: int,
                 seed: int, alpha: float = 32.0, unit_scalings: bool = False) -> TeacherSpec:
    if not n_tasks <= tag_width <= d_in:
        raise ValueError(f"need n_tasks ({n_tasks}) <= tag_width ({tag_width}) <= d_in ({d_in})")
    if not 1 <= rank <= min(d_in, d_out):
        raise ValueError(f"rank {rank} out of range for d_in={d_in}, d_out={d_out}")
    rng = SplitMix64(seed)
    W = rng_gaussian_matrix(rng, d_out, d_in, 0.0, 1.0 / math.sqrt(d_in))
    A = rng_gaussian_matrix(rng, rank, d_in, 0.0, 1.0 / math.sqrt(d_in))
    B = rng_gaussian_matrix(rng, d_out, rank, 0.0, rank / (alpha * math.sqrt(rank)))
    if unit_scalings:
        task_a, task_b = np.ones((n_tasks, rank)), np.ones((n_tasks, d_out))
    else:
        task_a = 0.5 + rng.uniform(n_tasks * rank).reshape(n_tasks, rank)
        task_b = 0.5 + rng.uniform(n_tasks * d_out).reshape(n_tasks, d_out)
    return TeacherSpec(W, A, B, task_a, task_b, alpha, tag_width)


def teacher_outputs(teacher: TeacherSpec, X: np.ndarray, tasks: np.ndarray) -> np.ndarray:
    U = matmul(X, teacher.A.T) * teacher.task_a[tasks]
    delta = matmul(U, teacher.B.T) * teacher.task_b[tasks]
    return matmul(X, teacher.W.T) + teacher.scale * delta


def make_inputs(teacher: TeacherSpec, tasks: np.ndarray, rng: SplitMix64) -> np.ndarray:
    n = len(tasks)
    X = np.zeros((n, teacher.d_in))
    X[np.arange(n), tasks] = 1.0
    noise_dims = teacher.d_in - teacher.tag_width
    if noise_dims:
        X[:, teacher.tag_width:] = rng.normal(n * noise_dims).reshape(n, noise_dims)
    return X


def sample_batch(teacher: TeacherSpec, k: int, n: int, rng: SplitMix64):
    if not 0 <= k < teacher.n_tasks:
        raise ValueError(f"task index {k} out of range for {teacher.n_tasks} tasks")
    tasks = np.full(n, k)
    X = make_inputs(teacher, tasks, rng)
    return X, teacher_outputs(teacher, X, tasks)


def sample_mixed_batch(teacher: TeacherSpec, n: int, rng: SplitMix64):
    tasks = rng.integers(teacher.n_tasks, n)
    X = make_inputs(teacher, tasks, rng)
    return tasks, X, teacher_outputs(teacher, X, tasks)


# -- optimisers -------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 2e-4
    steps: int = 20_000
    batch_size: int = 8
    dropout: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50
    eval_every: int = 1000
    n_eval: int = 256

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grad: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update. Returns new parameter arrays; updates ``state``."""
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grad[name]
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** state.t)
        v_hat = v / (1 - beta2 ** state.t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def sgd_step(params: dict, grad: dict, lr: float) -> dict:
    return {name: p - lr * grad[name] for name, p in params.items()}


# -- training ---------------------------------------------------------------------

@dataclass
class TrainReport:
    log_steps: list[int]
    losses: list[float]
    eval_steps: list[int]
    eval_errors: list[list[float]]  # per checkpoint, per task
    task_errors: list[float]
    router_mass: list[list[float]] | None
    n_trainable: int
    config: dict
    student: object = field(default=None, repr=False, compare=False)

    @property
    def mean_task_error(self) -> float:
        return float(np.mean(self.task_errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("student")
        d["mean_task_error"] = self.mean_task_error
        return d

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"loss": out / "loss_curve.csv", "eval": out / "eval_curve.csv",
                 "report": out / "report.json"}
        with open(paths["loss"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            w.writerows(zip(self.log_steps, (repr(x) for x in self.losses)))
        with open(paths["eval"], "w", newline="") as f:
            w = csv.writer(f)
            n_tasks = len(self.task_errors)
            w.writerow(["step"] + [f"task{k}" for k in range(n_tasks)])
            for step, errs in zip(self.eval_steps, self.eval_errors):
                w.writerow([step] + [repr(e) for e in errs])
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2))
        return paths


def n_trainable(layer) -> int:
    params = layer.trainable()
    if isinstance(layer, MoRLayer) and layer.router.kind == "mean_pool":
        params = {k: v for k, v in params.items() if k != "Wr"}
    return int(sum(p.size for p in params.values()))


def eval_task_error(student, teacher: TeacherSpec, k: int, n_eval: int, rng: SplitMix64) -> float:
    """Relative error of the student's adapter contribution on fresh task-k inputs."""
    X, Y_star = sample_batch(teacher, k, n_eval, rng)
    Y, _ = adapters.forward_batch(student, X)
    base = matmul(X, teacher.W.T)
    return float(np.linalg.norm(Y - Y_star) / np.linalg.norm(Y_star - base))


def router_report(student, teacher: TeacherSpec, n_per_task: int, rng: SplitMix64) -> np.ndarray:
    """K x N matrix of mean router weights per task."""
    if not isinstance(student, (MoRLayer, MoELoRALayer)):
        raise TypeError("router_report needs a routed adapter")
    rows = []
    for k in range(teacher.n_tasks):
        X = make_inputs(teacher, np.full(n_per_task, k), rng)
        rows.append(adapters.router_weights_batch(student, X).mean(axis=0))
    return np.array(rows)


def _task_errors(student, teacher, config: TrainConfig) -> list[float]:
    rng = SplitMix64(config.seed ^ 0xE7A1)
    return [eval_task_error(student, teacher, k, config.n_eval, rng) for k in range(teacher.n_tasks)]


def train_student(teacher: TeacherSpec, student, config: TrainConfig) -> TrainReport:
    """Fit ``student`` (in place) to uniformly mixed task batches by MSE."""
    if student.W.shape != teacher.W.shape or not np.array_equal(student.W, teacher.W):
        raise ValueError("student base weight must equal the teacher's frozen W")
    master = SplitMix64(config.seed)
    data_rng, drop_rng = master.spawn(), master.spawn()
    aux = 0.0
    if isinstance(student, MoRLayer) and student.router.kind == "balanced":
        aux = student.router.aux_coefficient
    state = AdamState()
    log_steps, losses, eval_steps, eval_errors = [], [], [], []

    for step in range(config.steps + 1):
        if step % config.eval_every == 0 or step == config.steps:
            eval_steps.append(step)
            eval_errors.append(_task_errors(student, teacher, config))
        if step == config.steps:
            break
        _, X, Y_star = sample_mixed_batch(teacher, config.batch_size, data_rng)
        mask = adapters.dropout_mask(drop_rng, X.shape, config.dropout)
        cache = None
        if isinstance(student, MoRLayer):
            Y, G, cache = adapters.mor_forward_stacked(student, X, mask, return_cache=True)
        else:
            Y, G = adapters.forward_batch(student, X, mask)
        diff = Y - Y_star
        loss = float(np.mean(diff * diff))
        if aux:
            loss += aux * adapters.balance_loss(G)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if step % config.log_every == 0 or step == config.steps - 1:
            log_steps.append(step)
            losses.append(loss)
            log.debug("step %d loss %.6g", step, loss)
        g = grads.backward(student, X, 2.0 * diff / diff.size, mask, cache).as_dict()
        params = student.trainable()
        if config.optimizer == "adam":
            new = adam_step(params, g, state, config.lr, config.beta1, config.beta2, config.eps)
        else:
            new = sgd_step(params, g, config.lr)
        for name, value in new.items():
            setattr(student, name, value)

    mass = None
    if isinstance(student, (MoRLayer, MoELoRALayer)):
        mass = router_report(student, teacher, config.n_eval, SplitMix64(config.seed ^ 0x5E7)).tolist()
    return TrainReport(log_steps, losses, eval_steps, eval_errors, eval_errors[-1], mass,
                       n_trainable(student), asdict(config), student)
