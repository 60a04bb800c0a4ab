"""On-disk formats: packed embedding files, trial and score lists, checkpoints.

Embedding file layout (little-endian)::

    b"ATSF" | version u16 | flags u16 (bit0 = tied) | M u32 | d_k u32 | d_v u32 | count u64
    count x ( id_len u16 | id utf-8 | total_dim x f32 )

Vectors are stored as float32 and promoted to float64 on read, so a
read-then-write cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .evaluation import Trial
from .layout import LayoutConfig

MAGIC = b"ATSF"
CKPT_MAGIC = b"ATSC"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIQ")
_U16 = struct.Struct("<H")
_F32 = np.dtype("<f4")


@dataclass
class EmbeddingSet:
    layout: LayoutConfig
    ids: list
    vectors: np.ndarray  # (count, total_dim) float64

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        width = self.layout.total_dim if vecs.size == 0 else -1
        self.vectors = vecs.reshape(len(self.ids), width)
        if self.vectors.shape[1] != self.layout.total_dim:
            raise FormatError(
                f"vectors have {self.vectors.shape[1]} columns, layout needs {self.layout.total_dim}")
        if len(set(self.ids)) != len(self.ids):
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise FormatError(f"duplicate embedding id {dup!r}")

    def index(self) -> dict:
        return {u: i for i, u in enumerate(self.ids)}


def write_embeddings(path, emb: EmbeddingSet) -> None:
    lay = emb.layout
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, int(lay.tied), lay.num_pairs, lay.key_dim,
                              lay.value_dim, len(emb.ids)))
        for uid, vec in zip(emb.ids, emb.vectors):
            raw = uid.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"id too long for the format: {uid[:40]!r}...")
            fh.write(_U16.pack(len(raw)))
            fh.write(raw)
            fh.write(vec.astype(_F32).tobytes())


def read_embeddings(path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, flags, M, dk, dv, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if flags & ~1:
        raise FormatError(f"{path}: unknown flag bits {flags:#06x}")
    try:
        layout = LayoutConfig(M, dk, dv, bool(flags & 1))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid layout in header: {exc}") from exc
    rec_bytes = layout.total_dim * _F32.itemsize
    pos = _HEADER.size
    ids, vecs = [], []
    for r in range(count):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: truncated at record {r}")
        (n,) = _U16.unpack_from(data, pos)
        pos += 2
        if pos + n + rec_bytes > len(data):
            raise FormatError(f"{path}: truncated at record {r}")
        try:
            ids.append(data[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record {r} id is not valid UTF-8") from exc
        pos += n
        vecs.append(np.frombuffer(data, dtype=_F32, count=layout.total_dim, offset=pos))
        pos += rec_bytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    mat = np.array(vecs, dtype=np.float64).reshape(count, layout.total_dim)
    return EmbeddingSet(layout, ids, mat)


def _lines(path):
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


_LABELS = {"tgt": True, "non": False}


def _trial(path, lineno, cols) -> Trial:
    enroll, test, lab = cols[:3]
    if lab not in _LABELS:
        raise FormatError(f"{path}:{lineno}: label must be tgt or non, got {lab!r}")
    try:
        return Trial(enroll, test, _LABELS[lab])
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from exc


def read_trials(path) -> list:
    out = []
    for lineno, cols in _lines(path):
        if len(cols) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(cols)}")
        out.append(_trial(path, lineno, cols))
    return out


def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{t.enroll_speaker_id}\t{t.test_utterance_id}\t{t.label}\n")


def format_score(x: float) -> str:
    return format(float(x), ".17g")


def write_scores(path, scored) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t, s in scored:
            fh.write(f"{t.enroll_speaker_id}\t{t.test_utterance_id}\t{t.label}\t{format_score(s)}\n")


def read_scores(path) -> list:
    out = []
    for lineno, cols in _lines(path):
        if len(cols) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(cols)}")
        try:
            s = float(cols[3])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad score {cols[3]!r}") from exc
        if not math.isfinite(s):
            raise FormatError(f"{path}:{lineno}: non-finite score")
        out.append((_trial(path, lineno, cols), s))
    return out


# checkpoints: magic | version u16 | param count u16, then per parameter
# name_len u16 | name | ndim u16 | dims u32... | f32 data
def write_checkpoint(path, params: dict, config: dict) -> Path:
    """Write parameters and a JSON sidecar (``<path>.json``) echoing ``config``."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HH", VERSION, len(params)))
        for name in sorted(params):
            arr = np.atleast_1d(np.asarray(params[name], dtype=np.float64))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack(f"<H{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(arr.astype(_F32).tobytes())
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


def read_checkpoint(path) -> tuple:
    """Return ``(params, config)``; the sidecar must sit next to the blob."""
    path = Path(path)
    data = path.read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, n = struct.unpack_from("<HH", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos, params = 8, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<H", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 2)
            pos += 2 + 4 * ndim
            size = int(np.prod(shape))
            if pos + 4 * size > len(data):
                raise FormatError(f"{path}: truncated parameter {name!r}")
            params[name] = np.frombuffer(data, _F32, size, pos).astype(np.float64).reshape(shape)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    side = path.with_name(path.name + ".json")
    try:
        config = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: invalid JSON ({exc})") from exc
    return params, config
