"""Per-task episodic sample buffers and reference-batch sampling.

Buffers are filled once, at each task boundary, by uniform sampling
without replacement from that task's training data (the whole task if it
fits).  Reference batches are drawn uniformly without replacement from
the union of all buffers and keep each example's originating task id for
head routing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, MemoryStateError
from .rng import substream
from .streams import TaskDataset


@dataclass
class TaskBuffer:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class MixedBatch:
    """Examples drawn across tasks; ``tasks[i]`` routes example i to its head."""

    x: np.ndarray
    y: np.ndarray
    tasks: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class EpisodicMemory:
    per_task_capacity: int
    per_task: dict[int, TaskBuffer] = field(default_factory=dict)

    def __post_init__(self):
        if self.per_task_capacity < 1:
            raise ConfigurationError("per-task capacity must be >= 1")

    def __len__(self) -> int:
        return sum(len(buf) for buf in self.per_task.values())

    def copy(self) -> "EpisodicMemory":
        return EpisodicMemory(
            self.per_task_capacity,
            {
                t: TaskBuffer(b.x.copy(), b.y.copy(), b.ids.copy())
                for t, b in self.per_task.items()
            },
        )


def update_eps_mem(
    mem: EpisodicMemory, task_dataset: TaskDataset, task_id: int, seed: int
) -> EpisodicMemory:
    """Store up to the per-task capacity of uniformly chosen training examples."""
    if task_id in mem.per_task:
        raise MemoryStateError(f"memory for task {task_id} already populated")
    n = len(task_dataset.train_y)
    m = mem.per_task_capacity
    if n <= m:
        idx = np.arange(n)
    else:
        idx = substream(seed, "memory", str(task_id)).choice(n, size=m, replace=False)
    mem.per_task[task_id] = TaskBuffer(
        task_dataset.train_x[idx].copy(),
        task_dataset.train_y[idx].copy(),
        task_dataset.train_ids[idx].copy(),
    )
    return mem


def sample_ref_batch(
    mem: EpisodicMemory, size: int, rng: np.random.Generator | int
) -> MixedBatch | None:
    """min(size, stored) examples uniform without replacement over all buffers.

    Returns None when the memory is empty; callers fall back to an
    unconstrained step.
    """
    total = len(mem)
    if total == 0:
        return None
    if isinstance(rng, (int, np.integer)):
        rng = substream(int(rng), "ref-batch")
    tasks_sorted = sorted(mem.per_task)
    sizes = np.array([len(mem.per_task[t]) for t in tasks_sorted])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    take = min(size, total)
    idx = rng.choice(total, size=take, replace=False)
    # gather only the sampled rows; buffers are never concatenated
    which = np.searchsorted(offsets, idx, side="right") - 1
    local = idx - offsets[which]
    x = np.empty((take, mem.per_task[tasks_sorted[0]].x.shape[1]))
    y = np.empty(take, dtype=np.int64)
    t_out = np.empty(take, dtype=np.int64)
    for pos, task in enumerate(tasks_sorted):
        mask = which == pos
        if mask.any():
            buf = mem.per_task[task]
            x[mask] = buf.x[local[mask]]
            y[mask] = buf.y[local[mask]]
            t_out[mask] = task
    return MixedBatch(x, y, t_out)


def per_task_batches(mem: EpisodicMemory) -> list[tuple[int, TaskBuffer]]:
    """One (task id, full buffer) entry per stored task, ascending task id."""
    return [(t, mem.per_task[t]) for t in sorted(mem.per_task)]
