"""Residual key-value adapter ``Tr(e) = e + softmax(e K^T / t) V``.

``K`` and ``V`` are ``h x d``. The lookup term is a convex combination of the
rows of ``V``, so every residual lies in the (at most ``h``-dimensional) row
space of ``V``.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError, ShapeError, TapeError
from .numerics import DTYPE, as_matrix, softmax_rows
from .utils import atomic_write_bytes

CHECKPOINT_FORMAT_VERSION = 1


def _frozen(a):
    a = np.array(a, dtype=DTYPE, copy=True)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class AdapterParams:
    """Keys and values of one adapter. Arrays are read-only."""

    K: np.ndarray
    V: np.ndarray
    temperature: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        K = as_matrix(self.K, "K")
        V = as_matrix(self.V, "V")
        if K.shape != V.shape:
            raise ShapeError(f"K {K.shape} and V {V.shape} must have the same shape")
        h, d = K.shape
        if h < 1:
            raise ConfigurationError("adapter needs at least one key")
        if h >= d:
            raise ConfigurationError(f"hidden size h={h} must be smaller than d={d}")
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be positive")
        object.__setattr__(self, "K", _frozen(K))
        object.__setattr__(self, "V", _frozen(V))
        object.__setattr__(self, "temperature", float(self.temperature))

    @property
    def h(self):
        return self.K.shape[0]

    @property
    def d(self):
        return self.K.shape[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def fingerprint(self):
        digest = hashlib.sha256()
        digest.update(np.asarray(self.K.shape, dtype="<i8").tobytes())
        digest.update(self.K.astype("<f8").tobytes())
        digest.update(self.V.astype("<f8").tobytes())
        digest.update(np.float64(self.temperature).astype("<f8").tobytes())
        return digest.hexdigest()

    def equals(self, other):
        """Bit-exact comparison of parameters."""
        return (
            isinstance(other, AdapterParams)
            and self.K.shape == other.K.shape
            and self.K.tobytes() == other.K.tobytes()
            and self.V.tobytes() == other.V.tobytes()
            and self.temperature == other.temperature
        )

    def is_identity(self):
        return not np.any(self.V)


@dataclasses.dataclass
class AdapterConfig:
    h: int = 16
    init_key_scale: float = 1.0
    seed: int = 0
    temperature: float = 1.0


def init(config, d):
    """Gaussian keys with std ``init_key_scale / sqrt(d)``, zero values.

    Zero values make the fresh adapter the identity map.
    """
    if config.h < 1 or config.h >= d:
        raise ConfigurationError(f"hidden size h={config.h} must satisfy 1 <= h < d={d}")
    if not config.init_key_scale > 0:
        raise ConfigurationError("init_key_scale must be positive")
    rng = np.random.default_rng(config.seed)
    K = rng.normal(0.0, config.init_key_scale / np.sqrt(d), size=(config.h, d))
    V = np.zeros((config.h, d), dtype=DTYPE)
    return AdapterParams(K=K, V=V, temperature=config.temperature, seed=config.seed)


@dataclasses.dataclass(frozen=True, eq=False)
class ForwardTape:
    """Intermediates of one (possibly batched) forward pass."""

    e: np.ndarray
    logits: np.ndarray
    weights: np.ndarray
    residual: np.ndarray
    params: AdapterParams
    single: bool

    def replay(self):
        out = self.e + self.residual
        return out[0] if self.single else out


def _check_input(E, params):
    E = np.asarray(E, dtype=DTYPE)
    single = E.ndim == 1
    if single:
        E = E[None, :]
    if E.ndim != 2 or E.shape[1] != params.d:
        raise ShapeError(f"input of shape {E.shape} does not match adapter d={params.d}")
    return E, single


def forward(E, params):
    """Apply ``Tr`` to one embedding or a batch of rows and record a tape."""
    E, single = _check_input(E, params)
    logits = (E @ params.K.T) / params.temperature
    weights = softmax_rows(logits)
    residual = weights @ params.V
    tape = ForwardTape(E, logits, weights, residual, params, single)
    return tape.replay(), tape


def lookup(e, params):
    """``softmax(e K^T / t) V`` for one embedding or a batch of rows."""
    E, single = _check_input(e, params)
    residual = softmax_rows((E @ params.K.T) / params.temperature) @ params.V
    return residual[0] if single else residual


def transform(e, params):
    E, single = _check_input(e, params)
    out = E + lookup(E, params)
    return out[0] if single else out


def transform_grad(tape, upstream, params=None):
    """Reverse pass: gradients of ``<upstream, Tr(e)>`` w.r.t. ``K``, ``V`` and ``e``.

    For a batched tape the parameter gradients are summed over rows and ``de``
    keeps one row per input.
    """
    if params is not None and params is not tape.params and not params.equals(tape.params):
        raise TapeError("tape was recorded with different adapter parameters")
    U = np.asarray(upstream, dtype=DTYPE)
    if tape.single:
        if U.shape != (tape.e.shape[1],):
            raise TapeError(f"upstream shape {U.shape} does not match tape")
        U = U[None, :]
    elif U.shape != tape.e.shape:
        raise TapeError(f"upstream shape {U.shape} does not match tape {tape.e.shape}")

    p = tape.params
    W = tape.weights
    dV = W.T @ U
    dW = U @ p.V.T
    # softmax Jacobian: diag(w) - w w^T
    dZ = W * (dW - (W * dW).sum(axis=1, keepdims=True))
    dZ = dZ / p.temperature
    dK = dZ.T @ tape.e
    de = U + dZ @ p.K
    return dK, dV, (de[0] if tape.single else de)


def _encode_array(a):
    return {
        "shape": list(a.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(obj):
    if obj.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {obj.get('dtype')!r}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(DTYPE)


def to_document(params, training_metadata=None):
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "h": params.h,
        "d": params.d,
        "temperature": params.temperature,
        "seed": params.seed,
        "K": _encode_array(params.K),
        "V": _encode_array(params.V),
        "training_metadata": training_metadata or {},
    }


def from_document(doc):
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    try:
        K = _decode_array(doc["K"])
        V = _decode_array(doc["V"])
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if K.shape != (doc["h"], doc["d"]):
        raise CheckpointError(f"K shape {K.shape} disagrees with h={doc['h']}, d={doc['d']}")
    return AdapterParams(K=K, V=V, temperature=doc["temperature"], seed=doc.get("seed"))


def save(params, path, training_metadata=None):
    """Write a JSON checkpoint atomically. Arrays are base64 little-endian float64."""
    doc = to_document(params, training_metadata)
    data = json.dumps(doc, indent=1, sort_keys=True).encode("utf-8")
    atomic_write_bytes(Path(path), data)
    return Path(path)


def load(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return from_document(doc)


def load_metadata(path):
    return json.loads(Path(path).read_text("utf-8")).get("training_metadata", {})
