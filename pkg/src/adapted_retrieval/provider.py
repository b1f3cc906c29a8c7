"""Black-box embedding access: remote HTTP client, offline stub, on-disk cache.

The remote wire format is the OpenAI-compatible one::

    POST {endpoint_url}  {"model": ..., "input": [text, ...]}
    -> {"data": [{"index": i, "embedding": [...]}, ...]}

Responses are matched by ``index``. Every vector is written to the
:class:`EmbeddingCache` before :meth:`Embedder.embed` returns.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import random
import struct
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx
import numpy as np

from .errors import ConfigurationError, InputError, ProviderContractError, ProviderError
from .numerics import DTYPE

logger = logging.getLogger(__name__)

CACHE_FORMAT_VERSION = 1
_DATA_MAGIC = b"ADRCACH1"
_KEY_BYTES = 32
_RECORD_HEADER = struct.Struct("<32sQ")


def normalize_text(text):
    """Strip and collapse every internal whitespace run to a single space."""
    if not isinstance(text, str):
        raise InputError(f"expected a string, got {type(text).__name__}")
    return " ".join(text.split())


def content_key(model_name, text):
    return hashlib.sha256(f"{model_name}\x00{text}".encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# cache


class EmbeddingCache:
    """Append-only content-addressed vector store.

    ``data.bin`` holds ``magic`` followed by records of
    ``[32-byte key][uint64 count][count little-endian float64]``.
    ``manifest.tsv`` maps hex keys to the byte offset and length of the floats;
    it is rebuilt from the data file whenever the two disagree.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.data_path = self.directory / "data.bin"
        self.manifest_path = self.directory / "manifest.tsv"
        self._lock = threading.Lock()
        self._entries = {}
        self._open()

    def _open(self):
        if not self.data_path.exists():
            with open(self.data_path, "wb") as fh:
                fh.write(_DATA_MAGIC)
            self._write_manifest({})
        with open(self.data_path, "rb") as fh:
            if fh.read(len(_DATA_MAGIC)) != _DATA_MAGIC:
                raise ProviderError(f"{self.data_path} is not an embedding cache data file")
        entries = self._read_manifest()
        if entries is None or self._manifest_end(entries) != self.data_path.stat().st_size:
            logger.warning("embedding cache manifest out of sync; rebuilding from %s", self.data_path)
            entries = self.rebuild_manifest()
        self._entries = entries

    @staticmethod
    def _manifest_end(entries):
        if not entries:
            return len(_DATA_MAGIC)
        return max(off + 8 * n for off, n in entries.values())

    def _read_manifest(self):
        try:
            lines = self.manifest_path.read_text("utf-8").splitlines()
        except FileNotFoundError:
            return None
        if not lines or lines[0] != f"# format_version={CACHE_FORMAT_VERSION}":
            return None
        entries = {}
        try:
            for line in lines[1:]:
                if not line:
                    continue
                key, off, n = line.split("\t")
                entries[key] = (int(off), int(n))
        except ValueError:
            return None
        return entries

    def _write_manifest(self, entries):
        body = [f"# format_version={CACHE_FORMAT_VERSION}"]
        body += [f"{k}\t{off}\t{n}" for k, (off, n) in sorted(entries.items(), key=lambda kv: kv[1][0])]
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text("\n".join(body) + "\n", "utf-8")
        os.replace(tmp, self.manifest_path)

    def rebuild_manifest(self):
        """Scan the data file, drop a torn trailing record, rewrite the manifest."""
        entries = {}
        size = self.data_path.stat().st_size
        with open(self.data_path, "rb+") as fh:
            pos = len(_DATA_MAGIC)
            fh.seek(pos)
            while pos + _RECORD_HEADER.size <= size:
                key, n = _RECORD_HEADER.unpack(fh.read(_RECORD_HEADER.size))
                end = pos + _RECORD_HEADER.size + 8 * n
                if end > size:
                    break
                entries[key.hex()] = (pos + _RECORD_HEADER.size, n)
                fh.seek(end)
                pos = end
            if pos != size:
                fh.truncate(pos)
        self._write_manifest(entries)
        return entries

    def __contains__(self, key):
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, key):
        entry = self._entries.get(key)
        if entry is None:
            return None
        off, n = entry
        with open(self.data_path, "rb") as fh:
            fh.seek(off - _RECORD_HEADER.size)
            stored_key, stored_n = _RECORD_HEADER.unpack(fh.read(_RECORD_HEADER.size))
            if stored_key.hex() != key or stored_n != n:
                raise ProviderError(f"embedding cache corrupt at offset {off}")
            raw = fh.read(8 * n)
        return np.frombuffer(raw, dtype="<f8").astype(DTYPE)

    def put(self, key, vector):
        vec = np.ascontiguousarray(vector, dtype="<f8")
        with self._lock:
            if key in self._entries:
                return
            with open(self.data_path, "ab") as fh:
                start = fh.tell()
                fh.write(_RECORD_HEADER.pack(bytes.fromhex(key), vec.size))
                fh.write(vec.tobytes())
                fh.flush()
                os.fsync(fh.fileno())
            off = start + _RECORD_HEADER.size
            self._entries[key] = (off, vec.size)
            with open(self.manifest_path, "a", encoding="utf-8") as fh:
                fh.write(f"{key}\t{off}\t{vec.size}\n")


# --------------------------------------------------------------------------
# stub


@dataclasses.dataclass
class StubProvider:
    """Deterministic offline pseudo-embeddings.

    ``hashed`` mode: signed feature hashing of whitespace tokens into ``dimension``
    buckets, then L2 normalisation, so shared tokens raise cosine similarity.
    ``offset`` mode: texts starting with ``tag`` get ``offset_vector`` added to
    the hashed embedding of the remaining text before renormalising.
    """

    dimension: int
    seed: int = 0
    mode: str = "hashed"
    tag: str = "[query]"
    offset_vector: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("hashed", "offset"):
            raise ConfigurationError(f"unknown stub mode {self.mode!r}")
        if self.dimension < 2:
            raise ConfigurationError("stub dimension must be at least 2")
        if self.mode == "offset":
            if self.offset_vector is None:
                raise ConfigurationError("offset mode needs an offset_vector")
            self.offset_vector = np.asarray(self.offset_vector, dtype=DTYPE)
            if self.offset_vector.shape != (self.dimension,):
                raise ConfigurationError("offset_vector length must equal dimension")

    @classmethod
    def with_random_offset(cls, dimension, seed=0, offset_scale=2.0, tag="[query]", distribution="sign"):
        """Offset of norm ``offset_scale``: random signs with equal magnitude, or Gaussian."""
        rng = np.random.default_rng([seed, 0x0FF5E7])
        if distribution == "sign":
            o = rng.choice([-1.0, 1.0], size=dimension)
        elif distribution == "gaussian":
            o = rng.standard_normal(dimension)
        else:
            raise ConfigurationError(f"unknown offset distribution {distribution!r}")
        o *= offset_scale / np.linalg.norm(o)
        return cls(dimension=dimension, seed=seed, mode="offset", tag=tag, offset_vector=o)

    @property
    def model_name(self):
        name = f"stub-{self.mode}-d{self.dimension}-s{self.seed}"
        if self.mode == "offset":
            digest = hashlib.sha256(self.offset_vector.astype("<f8").tobytes()).hexdigest()[:12]
            name += f"-{digest}"
        return name


def _hashed_vector(text, dimension, seed):
    vec = np.zeros(dimension, dtype=DTYPE)
    for token in text.split():
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
        (h,) = struct.unpack("<Q", digest)
        vec[h % dimension] += 1.0 if (h >> 63) & 1 else -1.0
    n = np.sqrt((vec * vec).sum())
    if n == 0.0:
        # every token cancelled; fall back to a bucket keyed by the whole text
        (h,) = struct.unpack("<Q", hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest())
        vec[h % dimension] = 1.0
        n = 1.0
    return vec / n


def stub_embed(text, stub):
    text = normalize_text(text)
    if not text:
        raise InputError("cannot embed empty text")
    if stub.mode == "offset" and text.startswith(stub.tag):
        content = text[len(stub.tag):].strip()
        base = _hashed_vector(content or text, stub.dimension, stub.seed)
        shifted = base + stub.offset_vector
        return shifted / np.sqrt((shifted * shifted).sum())
    return _hashed_vector(text, stub.dimension, stub.seed)


# --------------------------------------------------------------------------
# remote + orchestration


@dataclasses.dataclass
class ProviderSpec:
    kind: str = "stub"
    model_name: str = "text-embedding-ada-002"
    dimension: int = 1536
    endpoint_url: str = "https://api.openai.com/v1/embeddings"
    api_key_env_var: str = "OPENAI_API_KEY"
    batch_size: int = 64
    max_retries: int = 5
    timeout: float = 60.0
    max_chars: int = 8000
    max_concurrency: int = 1
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self):
        if self.kind not in ("remote", "stub"):
            raise ConfigurationError(f"provider kind must be 'remote' or 'stub', got {self.kind!r}")
        if self.batch_size < 1 or self.max_concurrency < 1 or self.max_retries < 0:
            raise ConfigurationError("batch_size and max_concurrency must be >= 1, max_retries >= 0")
        if self.dimension < 2:
            raise ConfigurationError("dimension must be at least 2")


@dataclasses.dataclass
class EmbedStats:
    hits: int = 0
    misses: int = 0
    truncations: int = 0
    network_calls: int = 0

    def as_dict(self):
        return dataclasses.asdict(self)


_RETRYABLE = {429, 500, 502, 503, 504}


class Embedder:
    """Order-preserving batch embedding through the cache.

    ``stub`` is required when ``spec.kind == "stub"``. ``transport`` is passed to
    ``httpx.Client`` and lets tests record or fake the HTTP traffic.
    """

    def __init__(self, spec, cache=None, stub=None, transport=None, sleep=time.sleep, rng=None):
        self.spec = spec
        self.cache = cache
        self.stub = stub
        self.stats = EmbedStats()
        self._sleep = sleep
        self._rng = rng or random.Random(0)
        self._transport = transport
        self._client = None
        if spec.kind == "stub":
            if stub is None:
                raise ConfigurationError("stub provider spec without StubProvider settings")
            if stub.dimension != spec.dimension:
                raise ConfigurationError(
                    f"stub dimension {stub.dimension} disagrees with spec dimension {spec.dimension}"
                )

    @property
    def dimension(self):
        return self.spec.dimension

    @property
    def model_name(self):
        return self.stub.model_name if self.spec.kind == "stub" else self.spec.model_name

    def _prepare(self, text):
        text = normalize_text(text)
        if not text:
            raise InputError("cannot embed empty text")
        if len(text) > self.spec.max_chars:
            logger.warning("truncating text of %d chars to %d", len(text), self.spec.max_chars)
            self.stats.truncations += 1
            text = text[: self.spec.max_chars]
        return text

    def embed(self, texts):
        """Embed ``texts``; returns an ``(n, d)`` float64 array in input order."""
        texts = list(texts)
        if not texts:
            raise InputError("no texts to embed")
        prepared = [self._prepare(t) for t in texts]
        keys = [content_key(self.model_name, t) for t in prepared]
        out = np.empty((len(prepared), self.dimension), dtype=DTYPE)

        missing = {}
        for i, key in enumerate(keys):
            cached = self.cache.get(key) if self.cache is not None else None
            if cached is not None:
                self._check_dim(cached, i)
                out[i] = cached
                self.stats.hits += 1
            else:
                missing.setdefault(key, []).append(i)
        self.stats.misses += len(missing)

        if missing:
            miss_keys = list(missing)
            miss_texts = [prepared[missing[k][0]] for k in miss_keys]
            vectors = self._fetch(miss_texts)
            for key, vec in zip(miss_keys, vectors):
                if self.cache is not None:
                    self.cache.put(key, vec)
                for i in missing[key]:
                    out[i] = vec
        return out

    def _check_dim(self, vec, where):
        if len(vec) != self.dimension:
            raise ProviderContractError(
                f"embedding {where} has length {len(vec)}, expected {self.dimension}"
            )

    def _fetch(self, texts):
        if self.spec.kind == "stub":
            return [stub_embed(t, self.stub) for t in texts]
        bs = self.spec.batch_size
        batches = [texts[i : i + bs] for i in range(0, len(texts), bs)]
        if self.spec.max_concurrency > 1 and len(batches) > 1:
            with ThreadPoolExecutor(self.spec.max_concurrency) as pool:
                results = list(pool.map(self._post_batch, batches))
        else:
            results = [self._post_batch(b) for b in batches]
        return [vec for batch in results for vec in batch]

    def client(self):
        if self._client is None:
            headers = {}
            api_key = os.environ.get(self.spec.api_key_env_var)
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"
            self._client = httpx.Client(
                transport=self._transport, timeout=self.spec.timeout, headers=headers
            )
        return self._client

    def close(self):
        if self._client is not None:
            self._client.close()
            self._client = None

    def _post_batch(self, texts):
        request_ids = []
        body = {"model": self.spec.model_name, "input": texts}
        last_error = None
        for attempt in range(self.spec.max_retries + 1):
            if attempt:
                delay = self.spec.backoff_base * self.spec.backoff_factor ** (attempt - 1)
                self._sleep(delay * (1.0 + 0.25 * self._rng.random()))
            request_id = uuid.uuid4().hex
            request_ids.append(request_id)
            self.stats.network_calls += 1
            try:
                resp = self.client().post(
                    self.spec.endpoint_url, json=body, headers={"X-Request-Id": request_id}
                )
            except httpx.HTTPError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            server_id = resp.headers.get("x-request-id")
            if server_id and server_id != request_id:
                request_ids[-1] = server_id
            if resp.status_code in _RETRYABLE:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ProviderError(
                    f"embedding request failed with HTTP {resp.status_code}: {resp.text[:200]}",
                    request_ids,
                )
            return self._parse(resp, len(texts), request_ids)
        raise ProviderError(
            f"embedding request failed after {self.spec.max_retries + 1} attempts ({last_error})",
            request_ids,
        )

    def _parse(self, resp, n, request_ids):
        try:
            items = resp.json()["data"]
            by_index = {int(item["index"]): item["embedding"] for item in items}
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderContractError(f"malformed embedding response: {exc}", request_ids) from exc
        if sorted(by_index) != list(range(n)):
            raise ProviderContractError(
                f"response indices {sorted(by_index)[:10]} do not cover 0..{n - 1}", request_ids
            )
        vectors = []
        for i in range(n):
            vec = np.asarray(by_index[i], dtype=DTYPE)
            if vec.ndim != 1 or vec.size != self.dimension:
                raise ProviderContractError(
                    f"embedding {i} has length {vec.size}, expected {self.dimension}", request_ids
                )
            if not np.all(np.isfinite(vec)):
                raise ProviderContractError(f"embedding {i} has non-finite entries", request_ids)
            vectors.append(vec)
        return vectors


def embed_batch(texts, spec, cache=None, stub=None, transport=None):
    embedder = Embedder(spec, cache=cache, stub=stub, transport=transport)
    try:
        return embedder.embed(texts)
    finally:
        embedder.close()
