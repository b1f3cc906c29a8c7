"""Dense float64 primitives: softmax, cosine, fixed-order products, Adam.

Vectors and matrices are plain ``numpy.ndarray`` objects of dtype float64.
Reductions go through ``ndarray.sum`` along a fixed axis rather than BLAS so
that a given row always accumulates in the same order, whatever its position
in the matrix and however many threads BLAS happens to use.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import (
    DegenerateVectorError,
    NumericInputError,
    ShapeError,
    TrainingDivergenceError,
)

DTYPE = np.float64


def as_vector(x, name="x"):
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name="M"):
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericInputError(f"{name} contains non-finite entries")
    return arr


def softmax_row(x, temperature=1.0):
    """Numerically stable softmax of a single vector."""
    x = as_vector(x)
    if x.size == 0:
        raise ShapeError("softmax of an empty vector")
    z = x / temperature if temperature != 1.0 else x
    z = z - z.max()
    ez = np.exp(z)
    return ez / ez.sum()


def softmax_rows(X, temperature=1.0):
    """Row-wise softmax of a 2-D array (each row treated as in :func:`softmax_row`)."""
    X = np.asarray(X, dtype=DTYPE)
    Z = X / temperature if temperature != 1.0 else X
    Z = Z - Z.max(axis=1, keepdims=True)
    EZ = np.exp(Z)
    return EZ / EZ.sum(axis=1, keepdims=True)


def norm(a):
    a = np.asarray(a, dtype=DTYPE)
    return float(np.sqrt((a * a).sum()))


def cosine(a, b):
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cosine of vectors with lengths {a.size} and {b.size}")
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    c = float((a * b).sum()) / (na * nb)
    return min(1.0, max(-1.0, c))


def matvec(M, x):
    """``M @ x`` with a fixed per-row accumulation order."""
    M = np.asarray(M, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if M.ndim != 2 or x.ndim != 1 or M.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shapes {M.shape} and {x.shape} do not agree")
    return (M * x).sum(axis=1)


def vecmat(w, M):
    """``w @ M``; rows of ``M`` are accumulated in index order."""
    w = np.asarray(w, dtype=DTYPE)
    M = np.asarray(M, dtype=DTYPE)
    if M.ndim != 2 or w.ndim != 1 or M.shape[0] != w.shape[0]:
        raise ShapeError(f"vecmat shapes {w.shape} and {M.shape} do not agree")
    return (w[:, None] * M).sum(axis=0)


def row_norms(M):
    M = np.asarray(M, dtype=DTYPE)
    return np.sqrt((M * M).sum(axis=1))


def scheduled_lr(base_lr, gamma, step_every, epoch):
    """Step decay: ``base_lr * gamma ** (epoch // step_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * gamma ** (epoch // step_every)


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    base_lr: float = 1e-3
    gamma: float = 0.5
    step_every: int = 100

    @classmethod
    def zeros_like(cls, param, **hyper):
        param = np.asarray(param, dtype=DTYPE)
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)

    def lr(self, epoch):
        return scheduled_lr(self.base_lr, self.gamma, self.step_every, epoch)


def adam_update(param, grad, state, epoch, name="param"):
    """One bias-corrected Adam step.

    Returns ``(new_param, new_state)``; neither input is modified.
    """
    param = np.asarray(param, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(
            f"{name}: param {param.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergenceError(
            f"non-finite gradient for {name}", parameter=name
        )
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - state.lr(epoch) * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, dataclasses.replace(state, m=m, v=v, step_count=t)
