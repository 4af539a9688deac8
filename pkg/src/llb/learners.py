"""The learner family: plain SGD, Fisher-penalty regularization (EWC),
multi-constraint gradient projection (GEM), its averaged single-constraint
variant (A-GEM), the stochastic one-constraint variant (S-GEM), and the
shuffled multi-task upper bound.

Each learner exposes a uniform single-step interface plus a task-boundary
hook; the math lives in free functions operating on ``LearnerState`` so
the update rules can be tested in isolation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import nn
from .embedding import je_loss_and_grad
from .errors import ConfigurationError
from .memory import EpisodicMemory, MixedBatch, per_task_batches, sample_ref_batch, update_eps_mem
from .nn import Batch, Model, apply_update, loss_and_grad
from .qp import DualProblem, drop_zero_rows, reconstruct, solve_nonneg_qp
from .rng import spawn_seed, substream
from .streams import TaskDataset

log = logging.getLogger(__name__)

DEGENERATE_REF_EPS = 1e-12


@dataclass
class EwcAnchor:
    theta_star: np.ndarray
    fisher: np.ndarray     # nonnegative, per-parameter
    lam: float


@dataclass
class LearnerState:
    model: Model
    memory: EpisodicMemory | None = None
    ewc_anchors: list[EwcAnchor] = field(default_factory=list)
    violation_count: int = 0
    step_seconds: float = 0.0
    step_count: int = 0
    descriptors: dict = field(default_factory=dict)


def batch_loss_and_grad(model: Model, batch: Batch, descriptors: dict):
    """Loss/grad with head routing: per-task heads or the shared attribute table."""
    if model.arch.head_mode == nn.PER_TASK:
        return loss_and_grad(model, batch)
    return je_loss_and_grad(model, batch, descriptors[batch.task])


def mixed_loss_and_grad(model: Model, mixed: MixedBatch, descriptors: dict):
    """Mean loss/grad over a batch spanning several tasks (per-example mean).

    One trunk forward/backward covers all examples; only the logits and
    head (or attribute-table) gradients are computed per task, so the cost
    does not grow with the number of tasks represented in the batch.
    """
    n = len(mixed)
    if n == 0:
        raise ConfigurationError("empty mixed batch")
    lay = nn.layout(model.arch)
    pres, posts = nn.trunk_forward(model, mixed.x)
    phi = posts[-1]
    grad = np.zeros_like(model.theta)
    d_hidden = np.zeros_like(phi)
    total = 0.0
    table = None
    if model.arch.head_mode == nn.JOINT_EMBEDDING:
        table = model.theta[lay.table].reshape(model.arch.attr_count, model.arch.table_dim)
        table_grad = grad[lay.table].reshape(table.shape)
    for t in np.unique(mixed.tasks):
        rows = np.flatnonzero(mixed.tasks == t)
        labels = mixed.y[rows]
        if table is None:
            w, b, classes = model._head(int(t))
            W_head = model.theta[w].reshape(model.arch.trunk_dim, classes)
            logits = phi[rows] @ W_head + model.theta[b]
            loss_t, dlogits = nn.softmax_cross_entropy(logits, labels)
            dlogits *= len(rows) / n     # group mean -> overall mean
            grad[w] = (phi[rows].T @ dlogits).ravel()
            grad[b] = dlogits.sum(axis=0)
            d_hidden[rows] = dlogits @ W_head.T
        else:
            desc = np.asarray(descriptors[int(t)], dtype=np.float64)
            class_emb = desc @ table
            logits = phi[rows] @ class_emb.T
            loss_t, dlogits = nn.softmax_cross_entropy(logits, labels)
            dlogits *= len(rows) / n
            table_grad += desc.T @ (dlogits.T @ phi[rows])
            d_hidden[rows] = dlogits @ class_emb
        total += (len(rows) / n) * loss_t
    if table is not None:
        grad[lay.table] = table_grad.ravel()
    nn._backprop_trunk(model, pres, posts, d_hidden, grad)
    return total, grad


# ---------------------------------------------------------------------------
# update rules


def vanilla_step(state: LearnerState, batch: Batch, lr: float) -> LearnerState:
    """One unconstrained SGD step."""
    _, grad = batch_loss_and_grad(state.model, batch, state.descriptors)
    state.model = apply_update(state.model, grad, lr)
    return state


class Projection(NamedTuple):
    g_tilde: np.ndarray
    violated: bool
    degenerate: bool = False


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> Projection:
    """Project g onto the half-space of non-negative inner product with g_ref.

    Pass-through when the constraint already holds; otherwise the closest
    vector (in L2) with <g~, g_ref> = 0, i.e.

        g~ = g - (g . g_ref / g_ref . g_ref) g_ref.

    A reference with squared norm below 1e-12 is flagged degenerate and
    leaves g unchanged.
    """
    if g.shape != g_ref.shape:
        raise ConfigurationError("gradient and reference length mismatch")
    ref_sq = float(g_ref @ g_ref)
    if ref_sq <= DEGENERATE_REF_EPS:
        return Projection(g, False, degenerate=True)
    dot = float(g @ g_ref)
    if dot >= 0.0:
        return Projection(g, False)
    return Projection(g - (dot / ref_sq) * g_ref, True)


def agem_step(
    state: LearnerState,
    batch: Batch,
    lr: float,
    ref_size: int,
    rng: np.random.Generator | int,
) -> LearnerState:
    """Gradient step constrained by the average memory gradient.

    Empty memory falls back to a plain step.
    """
    _, g = batch_loss_and_grad(state.model, batch, state.descriptors)
    ref = sample_ref_batch(state.memory, ref_size, rng) if state.memory else None
    if ref is None:
        state.model = apply_update(state.model, g, lr)
        return state
    _, g_ref = mixed_loss_and_grad(state.model, ref, state.descriptors)
    proj = agem_project(g, g_ref)
    if proj.violated:
        state.violation_count += 1
    state.model = apply_update(state.model, proj.g_tilde, lr)
    return state


def _memory_gradient_rows(state: LearnerState) -> np.ndarray:
    rows = []
    for task, buf in per_task_batches(state.memory):
        _, g_k = batch_loss_and_grad(
            state.model, Batch(buf.x, buf.y, task), state.descriptors
        )
        rows.append(g_k)
    if not rows:
        return np.zeros((0, len(state.model.theta)))
    return drop_zero_rows(np.stack(rows))


def gem_step(
    state: LearnerState,
    batch: Batch,
    lr: float,
    tol: float = 1e-7,
    max_iter: int = 10_000,
) -> LearnerState:
    """Gradient step constrained per stored task, via the dual QP.

    The constraint matrix is recomputed from the full buffers at every
    step; with no stored tasks (or all-zero memory gradients) this is a
    plain step.
    """
    _, g = batch_loss_and_grad(state.model, batch, state.descriptors)
    G = _memory_gradient_rows(state) if state.memory else np.zeros((0, len(g)))
    if len(G) == 0 or np.all(G @ g >= 0.0):
        state.model = apply_update(state.model, g, lr)
        return state
    state.violation_count += 1
    sol = solve_nonneg_qp(DualProblem.from_gradients(G, g), tol=tol, max_iter=max_iter)
    if not sol.converged:
        log.warning(
            "dual QP not converged after %d iterations (residual %.3e); "
            "proceeding with best iterate",
            sol.iterations,
            sol.residual,
        )
    state.model = apply_update(state.model, reconstruct(g, G, sol.v), lr)
    return state


def sgem_step(
    state: LearnerState,
    batch: Batch,
    lr: float,
    rng: np.random.Generator | int,
) -> LearnerState:
    """Gradient step constrained by one uniformly sampled stored task."""
    _, g = batch_loss_and_grad(state.model, batch, state.descriptors)
    stored = sorted(state.memory.per_task) if state.memory else []
    if not stored:
        state.model = apply_update(state.model, g, lr)
        return state
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng), "sgem-constraint")
    task = stored[int(rng.integers(0, len(stored)))]
    buf = state.memory.per_task[task]
    _, g_k = batch_loss_and_grad(state.model, Batch(buf.x, buf.y, task), state.descriptors)
    proj = agem_project(g, g_k)
    if proj.violated:
        state.violation_count += 1
    state.model = apply_update(state.model, proj.g_tilde, lr)
    return state


# ---------------------------------------------------------------------------
# EWC


def per_example_squared_grads(model: Model, batch: Batch, descriptors: dict) -> np.ndarray:
    """Sum over examples of the squared per-example loss gradient.

    Uses the factorization (h_i d_j)^2 = h_i^2 d_j^2 for dense layers, so
    no per-example loop is needed; agrees exactly with looping.
    """
    lay = nn.layout(model.arch)
    pres, posts = nn.trunk_forward(model, batch.inputs)
    n = len(batch)
    if model.arch.head_mode == nn.PER_TASK:
        w, b, classes = model._head(batch.task)
        W_head = model.theta[w].reshape(model.arch.trunk_dim, classes)
        logits = posts[-1] @ W_head + model.theta[b]
        _, dlogits = nn.softmax_cross_entropy(logits, batch.labels)
        dlogits = dlogits * n  # per-example gradients, not the batch mean
        out = np.zeros_like(model.theta)
        out[w] = ((posts[-1] ** 2).T @ (dlogits**2)).ravel()
        out[b] = (dlogits**2).sum(axis=0)
        d = dlogits @ W_head.T
    else:
        desc = np.asarray(descriptors[batch.task], dtype=np.float64)
        table = model.theta[lay.table].reshape(model.arch.attr_count, model.arch.table_dim)
        class_emb = desc @ table
        logits = posts[-1] @ class_emb.T
        _, dlogits = nn.softmax_cross_entropy(logits, batch.labels)
        dlogits = dlogits * n
        out = np.zeros_like(model.theta)
        u = dlogits @ desc  # (n, A): per-example attribute-space errors
        out[lay.table] = ((u**2).T @ (posts[-1] ** 2)).ravel()
        d = dlogits @ class_emb
    for idx in range(len(lay.trunk) - 1, -1, -1):
        w, b, fan_in, fan_out = lay.trunk[idx]
        d_pre = d * (pres[idx] > 0.0)
        out[w] += ((posts[idx] ** 2).T @ (d_pre**2)).ravel()
        out[b] += (d_pre**2).sum(axis=0)
        if idx > 0:
            W = model.theta[w].reshape(fan_in, fan_out)
            d = d_pre @ W.T
    return out


def ewc_consolidate(
    state: LearnerState,
    task_dataset: TaskDataset,
    fisher_samples: int,
    lam: float,
    seed: int,
) -> LearnerState:
    """Snapshot theta and an empirical Fisher diagonal at a task boundary.

    The Fisher is the mean squared per-example loss gradient over up to
    ``fisher_samples`` uniformly chosen training examples.
    """
    n = len(task_dataset.train_y)
    if n == 0:
        log.warning("empty dataset at consolidation; Fisher set to zero")
        fisher = np.zeros_like(state.model.theta)
    else:
        take = min(n, fisher_samples)
        idx = substream(seed, "fisher", str(task_dataset.task_id)).choice(
            n, size=take, replace=False
        )
        batch = Batch(task_dataset.train_x[idx], task_dataset.train_y[idx], task_dataset.task_id)
        fisher = per_example_squared_grads(state.model, batch, state.descriptors) / take
    state.ewc_anchors.append(EwcAnchor(state.model.theta.copy(), fisher, lam))
    return state


def ewc_penalty_and_grad(state: LearnerState) -> tuple[float, np.ndarray]:
    """sum_anchors lam * sum_i F_i (theta_i - theta*_i)^2 and its gradient."""
    penalty = 0.0
    grad = np.zeros_like(state.model.theta)
    for anchor in state.ewc_anchors:
        diff = state.model.theta - anchor.theta_star
        penalty += anchor.lam * float(anchor.fisher @ diff**2)
        grad += 2.0 * anchor.lam * anchor.fisher * diff
    return penalty, grad


def ewc_step(state: LearnerState, batch: Batch, lr: float) -> LearnerState:
    """SGD on task loss plus the quadratic anchor penalties."""
    _, grad = batch_loss_and_grad(state.model, batch, state.descriptors)
    if state.ewc_anchors:
        _, pgrad = ewc_penalty_and_grad(state)
        grad = grad + pgrad
    state.model = apply_update(state.model, grad, lr)
    return state


# ---------------------------------------------------------------------------
# learner objects


class Learner:
    """Plain single-pass SGD; base class wiring state, RNG streams, hooks."""

    name = "vanilla"
    uses_memory = False

    def __init__(self, model: Model, hp, seed: int):
        self.hp = hp
        self.seed = seed
        memory = EpisodicMemory(hp.memory_per_task) if self.uses_memory else None
        self.state = LearnerState(model=model, memory=memory)
        self._ref_rng = substream(seed, "ref-batch")
        self._constraint_rng = substream(seed, "sgem-constraint")

    @property
    def model(self) -> Model:
        return self.state.model

    def register_task(self, dataset: TaskDataset) -> None:
        self.state.descriptors[dataset.task_id] = dataset.descriptor

    def step(self, batch: Batch) -> None:
        vanilla_step(self.state, batch, self.hp.lr)

    def end_task(self, dataset: TaskDataset) -> None:
        pass

    def timed_step(self, batch: Batch) -> None:
        start = time.perf_counter()
        self.step(batch)
        self.state.step_seconds += time.perf_counter() - start
        self.state.step_count += 1


class EwcLearner(Learner):
    name = "ewc"

    def step(self, batch: Batch) -> None:
        ewc_step(self.state, batch, self.hp.lr)

    def end_task(self, dataset: TaskDataset) -> None:
        ewc_consolidate(
            self.state, dataset, self.hp.fisher_samples, self.hp.lam,
            spawn_seed(self.seed, "consolidate", str(dataset.task_id)),
        )


class AGemLearner(Learner):
    name = "agem"
    uses_memory = True

    def step(self, batch: Batch) -> None:
        agem_step(self.state, batch, self.hp.lr, self.hp.ref_batch_size, self._ref_rng)

    def end_task(self, dataset: TaskDataset) -> None:
        update_eps_mem(self.state.memory, dataset, dataset.task_id, self.seed)


class GemLearner(Learner):
    name = "gem"
    uses_memory = True

    def step(self, batch: Batch) -> None:
        gem_step(self.state, batch, self.hp.lr)

    def end_task(self, dataset: TaskDataset) -> None:
        update_eps_mem(self.state.memory, dataset, dataset.task_id, self.seed)


class SGemLearner(Learner):
    name = "sgem"
    uses_memory = True

    def step(self, batch: Batch) -> None:
        sgem_step(self.state, batch, self.hp.lr, self._constraint_rng)

    def end_task(self, dataset: TaskDataset) -> None:
        update_eps_mem(self.state.memory, dataset, dataset.task_id, self.seed)


LEARNERS = {
    cls.name: cls for cls in (Learner, EwcLearner, AGemLearner, GemLearner, SGemLearner)
}
LEARNER_NAMES = tuple(sorted(LEARNERS)) + ("multitask",)


def make_learner(name: str, model: Model, hp, seed: int) -> Learner:
    try:
        cls = LEARNERS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown learner {name!r}; valid: {', '.join(LEARNER_NAMES)}"
        ) from None
    return cls(model, hp, seed)


def multitask_train(
    model: Model, tasks: list[TaskDataset], hp, seed: int
) -> tuple[Model, dict[int, int]]:
    """Upper-bound baseline: one shuffled single pass over all tasks' data.

    Returns the trained model and the per-example visit counts (each
    should be exactly 1).
    """
    descriptors = {t.task_id: t.descriptor for t in tasks}
    x = np.concatenate([t.train_x for t in tasks])
    y = np.concatenate([t.train_y for t in tasks])
    task_of = np.concatenate(
        [np.full(len(t.train_y), t.task_id, dtype=np.int64) for t in tasks]
    )
    ids = np.concatenate([t.train_ids for t in tasks])
    order = substream(seed, "shuffle", "multitask").permutation(len(y))
    visits: dict[int, int] = {}
    for start in range(0, len(order), hp.batch_size):
        idx = order[start : start + hp.batch_size]
        mixed = MixedBatch(x[idx], y[idx], task_of[idx])
        _, grad = mixed_loss_and_grad(model, mixed, descriptors)
        model = apply_update(model, grad, hp.lr)
        for i in ids[idx]:
            visits[int(i)] = visits.get(int(i), 0) + 1
    return model, visits
