"""Semantic vector providers and the embedding file format.

A provider turns entities into dense vectors while honoring the pointwise
contract: exactly one logical call per entity, so provisioning a catalog of N
entities costs O(N) upstream calls. Providers:

  * file  — load a previously stored `.semv` binary (or JSONL) embedding file
  * http  — POST one prompt per entity to an external embedding endpoint
            (ships with `MockEmbeddingServer`, a deterministic local stand-in)
  * synthetic — planted-cluster vectors with known labels, for experiments

Binary embedding format (little-endian, bit-exact round trip):

    magic "SEMV" | version u16 = 1 | dim u32 | count u64
    | count x (id u64, dim x f32)
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .numerics import Rng

log = logging.getLogger(__name__)

SEMV_MAGIC = b"SEMV"
SEMV_VERSION = 1


class TemplateError(ValueError):
    def __init__(self, placeholder: str):
        self.placeholder = placeholder
        super().__init__(f"unresolved placeholder: {placeholder!r}")


class EmbeddingFormatError(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


_PLACEHOLDER = re.compile(r"\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


@dataclass
class PromptTemplate:
    kind: str        # "user" | "item"
    text: str

    def placeholders(self) -> list:
        seen = []
        for m in _PLACEHOLDER.finditer(self.text):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return seen

    def render(self, fields: dict) -> str:
        def sub(m):
            name = m.group(1)
            if name not in fields:
                raise TemplateError(name)
            return str(fields[name])

        rendered = _PLACEHOLDER.sub(sub, self.text)
        return re.sub(r"\s+", " ", rendered).strip()


DEFAULT_USER_TEMPLATE = PromptTemplate(
    kind="user",
    text=("Here is a user with the following profile: {profile}. "
          "The user's earliest interactions were: {history}. "
          "Describe this user's likely preferences, considering: {aspects}."))

DEFAULT_ITEM_TEMPLATE = PromptTemplate(
    kind="item",
    text=("Here is an item with the following attributes: {profile}. "
          "Describe what kind of audience this item appeals to, "
          "considering: {aspects}."))


def render_prompt(tpl: PromptTemplate, features: dict,
                  history: list | None = None,
                  aspects: list | None = None) -> str:
    """Render an entity prompt from its feature row and history snippet."""
    fields = dict(features)
    fields.setdefault(
        "profile",
        ", ".join(f"{k}={v}" for k, v in features.items()) or "unknown")
    if "history" in tpl.placeholders():
        fields.setdefault("history", ", ".join(str(h) for h in (history or [])) or "none")
    if "aspects" in tpl.placeholders():
        fields.setdefault("aspects", ", ".join(aspects or ["general taste"]))
    return tpl.render(fields)


@dataclass
class ProviderStats:
    calls: int = 0
    entities: int = 0
    failures: int = 0


def write_embeddings(path, vectors: dict, dim: int | None = None) -> None:
    """Store {id: vector} to the binary format, sorted by id."""
    ids = sorted(vectors)
    if dim is None:
        if not ids:
            raise ValueError("cannot infer dim from an empty vector map")
        dim = len(vectors[ids[0]])
    with open(path, "wb") as fh:
        fh.write(SEMV_MAGIC)
        fh.write(struct.pack("<H", SEMV_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(ids)))
        for eid in ids:
            v = np.ascontiguousarray(vectors[eid], dtype="<f4")
            if v.shape != (dim,):
                raise ValueError(f"vector {eid} has shape {v.shape}, expected ({dim},)")
            fh.write(struct.pack("<Q", eid))
            fh.write(v.tobytes())


def read_embeddings(path, expected_dim: int | None = None):
    """Returns ({id: float32 vector}, dim); validates magic/version/dim."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SEMV_MAGIC:
            raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != SEMV_VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported version {version}")
        (dim,) = struct.unpack("<I", fh.read(4))
        if expected_dim is not None and dim != expected_dim:
            raise EmbeddingFormatError(
                f"{path}: dim {dim} does not match expected {expected_dim}")
        (count,) = struct.unpack("<Q", fh.read(8))
        vectors = {}
        entry = struct.Struct("<Q")
        for _ in range(count):
            head = fh.read(8)
            data = fh.read(dim * 4)
            if len(head) != 8 or len(data) != dim * 4:
                raise EmbeddingFormatError(f"{path}: truncated file")
            (eid,) = entry.unpack(head)
            vectors[eid] = np.frombuffer(data, dtype="<f4").copy()
        if fh.read(1):
            raise EmbeddingFormatError(f"{path}: trailing bytes")
    return vectors, dim


def write_embeddings_jsonl(path, vectors: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid in sorted(vectors):
            row = {"id": int(eid), "v": [float(x) for x in vectors[eid]]}
            fh.write(json.dumps(row) + "\n")


def read_embeddings_jsonl(path, expected_dim: int | None = None):
    vectors = {}
    dim = expected_dim
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            v = np.asarray(row["v"], dtype=np.float32)
            if dim is None:
                dim = len(v)
            if len(v) != dim:
                raise EmbeddingFormatError(
                    f"{path}: vector for id {row['id']} has dim {len(v)}, expected {dim}")
            vectors[int(row["id"])] = v
    return vectors, dim


def provide_file(path, expected_dim: int | None = None):
    """Load pre-stored embeddings; one 'call' is counted per stored vector."""
    path = str(path)
    if path.endswith(".jsonl"):
        vectors, _ = read_embeddings_jsonl(path, expected_dim)
    else:
        vectors, _ = read_embeddings(path, expected_dim)
    stats = ProviderStats(calls=len(vectors), entities=len(vectors))
    return vectors, stats


def provide_synthetic(n_entities: int, dim: int, n_clusters: int,
                      noise_sigma: float, rng: Rng,
                      labels: np.ndarray | None = None):
    """Planted-cluster vectors: unit-sphere centers plus Gaussian noise.

    Returns (vectors keyed 1..n_entities, labels, stats). Pass `labels`
    (0-based cluster per entity id, entry 0 ignored) to align the vectors
    with an existing planted world.
    """
    if n_clusters < 1 or n_clusters > n_entities:
        raise ValueError(f"n_clusters={n_clusters} out of range")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    centers = rng.derive("centers").normal(size=(n_clusters, dim)).astype(np.float64)
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if labels is None:
        lab = rng.derive("labels").integers(0, n_clusters, size=n_entities + 1)
        lab[0] = -1
    else:
        lab = np.asarray(labels, dtype=np.int64)
        if len(lab) != n_entities + 1:
            raise ValueError("labels must be indexed by entity id (len n_entities+1)")
        if lab[1:].max() >= n_clusters or lab[1:].min() < 0:
            raise ValueError("labels out of range for n_clusters")
    noise_rng = rng.derive("noise")
    vectors = {}
    for eid in range(1, n_entities + 1):
        v = centers[lab[eid]]
        if noise_sigma > 0:
            v = v + noise_sigma * noise_rng.normal(size=dim).astype(np.float64)
        vectors[eid] = v.astype(np.float32)
    stats = ProviderStats(calls=n_entities, entities=n_entities)
    return vectors, lab, stats


@dataclass
class HttpProviderConfig:
    endpoint: str
    auth_env: str | None = None
    timeout_ms: int = 10000
    max_in_flight: int = 4
    retries: int = 3
    backoff_base_ms: int = 100
    abort_failure_frac: float = 0.1


def _fetch_one(config: HttpProviderConfig, session, eid: int, prompt: str,
               headers: dict):
    """One logical call; transport retries do not count extra."""
    last_err = None
    for attempt in range(config.retries + 1):
        if attempt:
            time.sleep(config.backoff_base_ms / 1000.0 * (2 ** (attempt - 1)))
        try:
            resp = session.post(
                config.endpoint,
                json={"id": int(eid), "prompt": prompt},
                headers=headers,
                timeout=config.timeout_ms / 1000.0)
            if resp.status_code >= 500:
                last_err = f"HTTP {resp.status_code}"
                continue
            resp.raise_for_status()
            body = resp.json()
            return np.asarray(body["vector"], dtype=np.float32), None
        except (requests.RequestException, KeyError, ValueError) as exc:
            last_err = str(exc)
    return None, last_err


def provide_http(config: HttpProviderConfig, prompts: dict,
                 expected_dim: int | None = None, cache_path=None):
    """Fetch one vector per entity from an external embedding endpoint.

    `prompts` maps entity id -> prompt text. Responses are assembled in id
    order regardless of completion order. Per-entity failures are recorded
    and the run continues unless more than `abort_failure_frac` of entities
    fail. Successful vectors are cached to `cache_path` (binary format) when
    given.
    """
    headers = {}
    if config.auth_env:
        token = os.environ.get(config.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
    ids = sorted(prompts)
    stats = ProviderStats(entities=len(ids))
    results = {}
    errors = {}
    session = requests.Session()

    def work(eid):
        return eid, _fetch_one(config, session, eid, prompts[eid], headers)

    with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
        for eid, (vec, err) in pool.map(work, ids):
            stats.calls += 1
            if vec is None:
                stats.failures += 1
                errors[eid] = err
                continue
            results[eid] = vec

    if stats.failures and stats.failures > config.abort_failure_frac * max(1, len(ids)):
        sample = "; ".join(f"{k}: {errors[k]}" for k in sorted(errors)[:5])
        raise ProviderError(
            f"{stats.failures}/{len(ids)} entities failed ({sample})")
    dims = {len(v) for v in results.values()}
    if expected_dim is not None:
        dims.add(expected_dim)
    if len(dims) > 1:
        raise EmbeddingFormatError(f"endpoint returned mixed dims {sorted(dims)}")
    if errors:
        log.warning("http provider: %d entity failures tolerated", len(errors))
    if cache_path and results:
        write_embeddings(cache_path, results)
    return results, stats


class _MockHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        eid = int(body.get("id", 0))
        server = self.server
        with server.state_lock:
            remaining = server.fail_first.get(eid, 0)
            if remaining > 0:
                server.fail_first[eid] = remaining - 1
                self.send_response(503)
                self.end_headers()
                return
            server.request_count += 1
        vec = server.vector_for(body.get("prompt", ""), eid)
        payload = json.dumps({"id": eid, "vector": vec}).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):  # silence per-request stderr noise
        pass


class MockEmbeddingServer:
    """Deterministic local embedding endpoint for tests and offline demos.

    Vectors are a pure function of the prompt text (hash-seeded Gaussian), so
    any two runs against the mock produce identical embeddings. `fail_first`
    maps entity id -> number of initial requests to reject with 503, which
    exercises the client's retry path.
    """

    def __init__(self, dim: int = 16, fail_first: dict | None = None):
        self.dim = dim
        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), _MockHandler)
        self._httpd.fail_first = dict(fail_first or {})
        self._httpd.state_lock = threading.Lock()
        self._httpd.request_count = 0
        self._httpd.vector_for = self._vector_for
        self._thread = None

    def _vector_for(self, prompt: str, eid: int):
        digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
        seed = int.from_bytes(digest, "little") % (2 ** 63)
        return [float(x) for x in Rng(seed).normal(size=self.dim)]

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}/embed"

    @property
    def served_requests(self) -> int:
        return self._httpd.request_count

    def __enter__(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
        return False
