"""Attribute-conditioned classification head.

Classes are scored by inner products between the trunk output and class
embeddings built from a shared attribute lookup table: a task descriptor
is a (C_k x A) matrix of per-class attribute values, the table is an
(A x D) block of theta, and the class embeddings are descriptor @ table.
Because the table lives inside the flat parameter vector, every learner
(projection, Fisher penalties) covers it with no special casing.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .nn import (
    JOINT_EMBEDDING,
    Batch,
    Model,
    layout,
    softmax_cross_entropy,
    trunk_forward,
    _backprop_trunk,
)


def _table(model: Model) -> np.ndarray:
    lay = layout(model.arch)
    if lay.table is None:
        raise ConfigurationError("model has no attribute table (per-task head mode)")
    return model.theta[lay.table].reshape(model.arch.attr_count, model.arch.table_dim)


def check_descriptor(model: Model, descriptor: np.ndarray) -> np.ndarray:
    desc = np.asarray(descriptor, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[1] != model.arch.attr_count:
        raise ConfigurationError(
            f"descriptor must be (C_k, {model.arch.attr_count}), got {desc.shape}"
        )
    return desc


def embed_task(descriptor: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Class embeddings (C_k x D) = descriptor (C_k x A) @ table (A x D)."""
    descriptor = np.asarray(descriptor, dtype=np.float64)
    if descriptor.ndim != 2 or descriptor.shape[1] != table.shape[0]:
        raise ConfigurationError(
            f"descriptor columns {descriptor.shape} do not match table rows {table.shape}"
        )
    return descriptor @ table


def je_forward(model: Model, batch: Batch, descriptor: np.ndarray) -> np.ndarray:
    """Logits (batch x C_k): trunk output against attribute-derived class embeddings."""
    if model.arch.head_mode != JOINT_EMBEDDING:
        raise ConfigurationError("je_forward requires a joint-embedding model")
    if model.arch.table_dim != model.arch.trunk_dim:
        raise ConfigurationError(
            f"trunk output dim {model.arch.trunk_dim} != embedding dim {model.arch.table_dim}"
        )
    desc = check_descriptor(model, descriptor)
    _, posts = trunk_forward(model, batch.inputs)
    return posts[-1] @ embed_task(desc, _table(model)).T


def je_probabilities(model: Model, batch: Batch, descriptor: np.ndarray) -> np.ndarray:
    logits = je_forward(model, batch, descriptor)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def je_loss_and_grad(
    model: Model, batch: Batch, descriptor: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean CE and exact gradient w.r.t. trunk and attribute table jointly."""
    if model.arch.head_mode != JOINT_EMBEDDING:
        raise ConfigurationError("je_loss_and_grad requires a joint-embedding model")
    desc = check_descriptor(model, descriptor)
    if np.any(batch.labels < 0) or np.any(batch.labels >= desc.shape[0]):
        raise ConfigurationError("labels out of range for descriptor")
    lay = layout(model.arch)
    table = _table(model)
    pres, posts = trunk_forward(model, batch.inputs)
    phi = posts[-1]
    class_emb = desc @ table
    logits = phi @ class_emb.T
    loss, dlogits = softmax_cross_entropy(logits, batch.labels)
    grad = np.zeros_like(model.theta)
    # d/d(table) = desc^T @ (dlogits^T @ phi); rows of attributes absent from
    # every class in the task stay exactly zero.
    grad[lay.table] = (desc.T @ (dlogits.T @ phi)).ravel()
    _backprop_trunk(model, pres, posts, dlogits @ class_emb, grad)
    return float(loss), grad


def je_predict(model: Model, inputs: np.ndarray, descriptor: np.ndarray) -> np.ndarray:
    batch = Batch(np.asarray(inputs, dtype=np.float64), np.zeros(len(inputs), dtype=int), task=-1)
    return je_forward(model, batch, descriptor).argmax(axis=1)


def zero_shot_eval(model: Model, task_dataset) -> float:
    """Test accuracy on a task the model has not trained on, via its descriptor.

    Pure read; errors for integer-descriptor tasks or per-task-head models,
    where no zero-shot path exists.
    """
    desc = task_dataset.descriptor
    if not isinstance(desc, np.ndarray):
        raise ConfigurationError(
            "zero-shot evaluation needs an attribute descriptor, "
            f"got integer descriptor {desc!r}"
        )
    preds = je_predict(model, task_dataset.test_x, desc)
    return float(np.mean(preds == task_dataset.test_y))
