"""Embedding tables and the built-in deterministic text encoder.

The builtin encoder hashes token n-grams into buckets and projects the bag
through a seeded Gaussian matrix whose rows are generated on demand from a
counter-based RNG, so the same (spec, text) pair maps to the same vector on
any platform without storing the matrix.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, FormatError, MissingText

MAGIC = b"EMBT"
VERSION = 1
NORM_TOL = 1e-5

ACTION_KEY_PREFIX = "act:"


def action_key(action_id):
    return ACTION_KEY_PREFIX + action_id


@dataclass(frozen=True)
class BuiltinEncoderSpec:
    dim: int = 256
    seed: int = 0
    ngram_orders: tuple = (1, 2, 3)
    hash_buckets: int = 1 << 16


def _bucket_of(ngram, spec):
    payload = ngram.encode("utf-8") + b"\x00" + struct.pack("<q", spec.seed)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") % spec.hash_buckets


def _projection_row(bucket, spec):
    """Deterministic Gaussian row for one hash bucket (Philox, keyed)."""
    rng = np.random.Generator(np.random.Philox(key=[spec.seed & (2**64 - 1), bucket]))
    return rng.standard_normal(spec.dim)


class _RowCache:
    def __init__(self, spec):
        self.spec = spec
        self.rows = {}

    def row(self, bucket):
        r = self.rows.get(bucket)
        if r is None:
            r = _projection_row(bucket, self.spec)
            self.rows[bucket] = r
        return r


def _ngram_counts(text, spec):
    tokens = text.split()
    counts = {}
    for order in spec.ngram_orders:
        for i in range(len(tokens) - order + 1):
            gram = " ".join(tokens[i:i + order])
            b = _bucket_of(gram, spec)
            counts[b] = counts.get(b, 0) + 1
    return counts


def builtin_encode(text, spec, _cache=None):
    """Encode text to a unit-norm float32 vector of spec.dim entries."""
    cache = _cache if _cache is not None else _RowCache(spec)
    counts = _ngram_counts(text, spec)
    if not counts:
        # empty text maps to a fixed seeded direction, one bucket past the last
        vec = _projection_row(spec.hash_buckets, spec)
    else:
        vec = np.zeros(spec.dim)
        for bucket in sorted(counts):
            vec += counts[bucket] * cache.row(bucket)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        vec = _projection_row(spec.hash_buckets, spec)
        norm = float(np.linalg.norm(vec))
    out = (vec / norm).astype(np.float32)
    # float32 rounding can nudge the norm; renormalize once in float32
    out /= np.float32(np.linalg.norm(out))
    return out


@dataclass
class EmbeddingTable:
    dim: int
    entries: dict                        # id string -> float32 vector
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        fixed = {}
        for key, vec in self.entries.items():
            arr = np.asarray(vec, dtype=np.float32)
            if arr.ndim != 1 or arr.shape[0] != self.dim:
                raise DimensionMismatch(
                    f"entry '{key}' has shape {arr.shape}, expected ({self.dim},)")
            norm = float(np.linalg.norm(arr.astype(np.float64)))
            if norm == 0.0:
                raise FormatError(f"entry '{key}' is a zero vector")
            if abs(norm - 1.0) > NORM_TOL:
                arr = (arr.astype(np.float64) / norm).astype(np.float32)
            fixed[key] = arr
        self.entries = fixed

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def vector(self, key):
        return self.entries[key]

    def matrix(self, keys):
        return np.stack([self.entries[k] for k in keys])

    def checksum(self):
        h = hashlib.blake2b(digest_size=16)
        for key in sorted(self.entries):
            h.update(key.encode("utf-8"))
            h.update(self.entries[key].tobytes())
        return h.hexdigest()


def save_table(table, path):
    """Write the binary EMBT format (little-endian, see header layout)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", VERSION, table.dim, len(table.entries)))
        for key, vec in table.entries.items():
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"id too long for format: {key[:40]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.astype("<f4").tobytes())


def load_table(path, expect_dim=None):
    """Read an EMBT file; vectors are L2-normalized at ingestion."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 20 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an EMBT file")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise DimensionMismatch(f"{path}: dim {dim}, expected {expect_dim}")
    entries = {}
    off = 20
    vec_bytes = dim * 4
    for _ in range(count):
        if off + 2 > len(data):
            raise FormatError(f"{path}: truncated id header")
        (id_len,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + id_len + vec_bytes > len(data):
            raise FormatError(f"{path}: truncated entry")
        key = data[off:off + id_len].decode("utf-8")
        off += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
        off += vec_bytes
        if key in entries:
            raise FormatError(f"{path}: duplicate id '{key}'")
        entries[key] = vec
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return EmbeddingTable(dim=dim, entries=entries, meta={"source": str(path)})


def embed_corpus(states, action_ids, spec):
    """Encode every distinct state text and action id with the builtin encoder.

    `states` is an iterable of (id, text) pairs (ids unique); actions are
    keyed as "act:<action id>" and encoded from their id string.
    """
    cache = _RowCache(spec)
    entries = {}
    for sid, text in states:
        key = str(sid)
        if key in entries:
            continue
        if text is None:
            raise MissingText(f"state {key} has no text")
        entries[key] = builtin_encode(text, spec, _cache=cache)
    for aid in action_ids:
        key = action_key(aid)
        if key not in entries:
            entries[key] = builtin_encode(aid, spec, _cache=cache)
    return EmbeddingTable(dim=spec.dim, entries=entries,
                          meta={"encoder": f"builtin-ngram-{spec.dim}",
                                "seed": spec.seed})


def read_states_jsonl(path):
    """Yield (id, text) rows from a states.jsonl file."""
    import json

    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows.append((obj["id"], obj.get("text")))
    return rows
