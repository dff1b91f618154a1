"""Hierarchical feature extraction: raw byte matrices, packet-level and
flow-level statistical vectors, and the model-ready FlowSample bundle."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .ingest import Direction, Flow, HttpMessage, Label

PL_LEN = 41
FL_REQ_LEN = 57
FL_RES_LEN = 58
N_FIELDS = 18
MAX_SEQ = 50

METHOD_CODES = {b"GET": 1, b"POST": 2, b"HEAD": 3, b"OPTIONS": 4, b"PUT": 5, b"DELETE": 6}
OTHER_METHOD = 7
VERSION_CODES = {b"HTTP/1.0": 10, b"HTTP/1.1": 11, b"HTTP/2": 20, b"HTTP/2.0": 20}
FL_METHODS = (b"GET", b"POST", b"HEAD", b"OPTIONS")

SAMPLE_SCHEMA = "hstf-sample/v1"


class SampleRejected(ValueError):
    """A flow exceeded the per-direction sequence limit under the discard policy."""


@dataclass(frozen=True)
class FeatureConfig:
    rows: int = 20
    cols: int = 40
    flow_size: int = 3
    max_seq: int = MAX_SEQ
    overflow_policy: str = "truncate"

    def __post_init__(self):
        if self.rows < 3 or self.cols < 1:
            raise ValueError(f"matrix shape {self.rows}x{self.cols} too small (rows >= 3)")
        if self.flow_size < 1:
            raise ValueError("flow_size must be >= 1")
        if self.overflow_policy not in ("truncate", "discard"):
            raise ValueError(f"unknown overflow policy {self.overflow_policy!r}")

    @classmethod
    def from_mapping(cls, d: dict) -> "FeatureConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class FlowSample:
    req_matrices: np.ndarray  # (flow_size, rows, cols)
    res_matrices: np.ndarray
    req_pl: np.ndarray  # (flow_size, 41)
    res_pl: np.ndarray
    req_fl: np.ndarray  # (57,)
    res_fl: np.ndarray  # (58,)
    label: Label = Label.UNLABELED
    flow_id: str = ""
    truncated: bool = False

    @property
    def y(self) -> int:
        """Class index: 0 malicious, 1 benign."""
        return 0 if self.label is Label.MALICIOUS else 1


# -- per-message features ------------------------------------------------------

def scale_bytes(data: bytes) -> np.ndarray:
    return (np.frombuffer(data, dtype=np.uint8) % 128) / 128.0


def build_raw_matrix(msg: HttpMessage, rows: int = 20, cols: int = 40) -> np.ndarray:
    """Start line in row 0, header lines in rows 1..rows-2, payload in the last row."""
    mat = np.zeros((rows, cols))
    line = msg.start_line[:cols]
    mat[0, : len(line)] = scale_bytes(line)
    for i in range(min(len(msg.header_lines), rows - 2)):
        line = msg.header_line_bytes(i)[:cols]
        mat[i + 1, : len(line)] = scale_bytes(line)
    line = msg.payload[:cols]
    mat[rows - 1, : len(line)] = scale_bytes(line)
    return mat


def _version_code(token: bytes) -> int:
    return VERSION_CODES.get(token.upper(), 0)


def split_start_line(msg: HttpMessage) -> tuple[bytes, bytes, bytes]:
    """Return (method-or-version, url-or-status, version-or-reason)."""
    parts = msg.start_line.split(b" ", 2)
    parts += [b""] * (3 - len(parts))
    return parts[0], parts[1], parts[2]


def status_code(msg: HttpMessage) -> int:
    _, code, _ = split_start_line(msg)
    return int(code) if code.isdigit() else 0


def extract_pl(msg: HttpMessage) -> np.ndarray:
    v = np.zeros(PL_LEN)
    first, second, third = split_start_line(msg)
    if msg.direction is Direction.REQUEST:
        v[0] = METHOD_CODES.get(first.upper(), OTHER_METHOD)
        v[1] = len(second)
        v[2] = _version_code(third)
    else:
        v[0] = int(second) if second.isdigit() else 0
        v[1] = len(third)
        v[2] = _version_code(first)
    v[3] = len(msg.header_lines)
    for i, (name, value) in enumerate(msg.header_lines[:N_FIELDS]):
        v[4 + i] = len(name)
        v[4 + N_FIELDS + i] = len(value)
    v[40] = len(msg.payload)
    return v


def extract_fl(msgs: Sequence[HttpMessage], direction: Direction) -> np.ndarray:
    if direction is Direction.REQUEST:
        v = np.zeros(FL_REQ_LEN)
        for m in msgs:
            method = split_start_line(m)[0].upper()
            slot = FL_METHODS.index(method) + 1 if method in FL_METHODS else 5
            v[slot] += 1
        seq_at = 7
    else:
        v = np.zeros(FL_RES_LEN)
        for m in msgs:
            cls = status_code(m) // 100
            v[cls if 1 <= cls <= 5 else 6] += 1
        seq_at = 8
    v[0] = len(msgs)
    if msgs:
        sizes = np.array([m.wire_size for m in msgs], dtype=float)
        v[seq_at - 1] = sizes.mean()
        v[seq_at: seq_at + len(sizes)] = sizes
    return v


def normalize_stat(v) -> np.ndarray:
    """Elementwise (1 - e^-x) / (1 + e^-x), evaluated so e^-x never overflows."""
    x = np.asarray(v, dtype=float)
    e = np.exp(-np.abs(x))
    return np.sign(x) * (1.0 - e) / (1.0 + e)


# -- flow bundle -----------------------------------------------------------------

def flow_to_sample(flow: Flow, cfg: FeatureConfig = FeatureConfig()) -> FlowSample:
    n = cfg.flow_size
    mats, pls, fls = {}, {}, {}
    truncated = False
    for d in Direction:
        msgs = flow.direction(d)
        if len(msgs) > cfg.max_seq:
            if cfg.overflow_policy == "discard":
                raise SampleRejected(
                    f"flow {flow.flow_id}: {len(msgs)} {d.value} messages > {cfg.max_seq}")
            truncated = True
        m = np.zeros((n, cfg.rows, cfg.cols))
        p = np.zeros((n, PL_LEN))
        for i, msg in enumerate(msgs[:n]):
            m[i] = build_raw_matrix(msg, cfg.rows, cfg.cols)
            p[i] = normalize_stat(extract_pl(msg))
        mats[d], pls[d] = m, p
        fls[d] = normalize_stat(extract_fl(msgs[: cfg.max_seq], d))
    req, res = Direction.REQUEST, Direction.RESPONSE
    return FlowSample(mats[req], mats[res], pls[req], pls[res], fls[req], fls[res],
                      label=flow.label, flow_id=flow.flow_id, truncated=truncated)


def flows_to_samples(flows: Iterable[Flow], cfg: FeatureConfig = FeatureConfig(),
                     rejected: list | None = None) -> list[FlowSample]:
    out = []
    for f in flows:
        try:
            out.append(flow_to_sample(f, cfg))
        except SampleRejected:
            if rejected is not None:
                rejected.append(f.flow_id)
    return out


# -- serialization --------------------------------------------------------------

def sample_to_json(s: FlowSample) -> dict:
    return {
        "schema": SAMPLE_SCHEMA,
        "flow_id": s.flow_id,
        "label": s.label.value,
        "truncated": s.truncated,
        "req_matrices": s.req_matrices.tolist(),
        "res_matrices": s.res_matrices.tolist(),
        "req_pl": s.req_pl.tolist(),
        "res_pl": s.res_pl.tolist(),
        "req_fl": s.req_fl.tolist(),
        "res_fl": s.res_fl.tolist(),
    }


def sample_from_json(d: dict) -> FlowSample:
    if d.get("schema") != SAMPLE_SCHEMA:
        raise ValueError(f"unsupported sample schema {d.get('schema')!r}")
    arr = {k: np.asarray(d[k], dtype=float) for k in
           ("req_matrices", "res_matrices", "req_pl", "res_pl", "req_fl", "res_fl")}
    return FlowSample(label=Label(d["label"]), flow_id=d["flow_id"],
                      truncated=bool(d.get("truncated", False)), **arr)


def write_samples_jsonl(path: str | Path, samples: Iterable[FlowSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_samples_jsonl(path: str | Path) -> list[FlowSample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_json(json.loads(line)) for line in fh if line.strip()]


# Compact binary: magic, header JSON (length-prefixed), then fixed-size records.
# Each record: label byte, truncated byte, 16-byte flow id, six f32 sections.
BIN_MAGIC = b"HSTFBIN1"
_LABEL_CODES = {Label.MALICIOUS: 0, Label.BENIGN: 1, Label.UNLABELED: 2}
_CODE_LABELS = {v: k for k, v in _LABEL_CODES.items()}


def _section_shapes(rows: int, cols: int, n: int):
    return [(n, rows, cols), (n, rows, cols), (n, PL_LEN), (n, PL_LEN), (FL_REQ_LEN,), (FL_RES_LEN,)]


def write_samples_bin(path: str | Path, samples: Iterable[FlowSample], cfg: FeatureConfig) -> int:
    header = json.dumps({"schema": SAMPLE_SCHEMA, "rows": cfg.rows, "cols": cfg.cols,
                         "flow_size": cfg.flow_size}, sort_keys=True).encode()
    n = 0
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<I", len(header)) + header)
        for s in samples:
            fh.write(struct.pack("<BB16s", _LABEL_CODES[s.label], s.truncated,
                                 s.flow_id.encode()[:16]))
            for a in (s.req_matrices, s.res_matrices, s.req_pl, s.res_pl, s.req_fl, s.res_fl):
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
            n += 1
    return n


class SampleStore:
    """Random-access reader over a compact binary sample file.

    Records are read on demand, so memory use does not grow with the file.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh: BinaryIO = open(self.path, "rb")
        if self._fh.read(8) != BIN_MAGIC:
            self._fh.close()
            raise ValueError(f"{path}: not a binary sample file")
        (hlen,) = struct.unpack("<I", self._fh.read(4))
        meta = json.loads(self._fh.read(hlen))
        self.cfg = FeatureConfig(rows=meta["rows"], cols=meta["cols"], flow_size=meta["flow_size"])
        self._shapes = _section_shapes(meta["rows"], meta["cols"], meta["flow_size"])
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self._base = 12 + hlen
        self._rec = 18 + 4 * sum(self._sizes)
        size = self.path.stat().st_size - self._base
        if size % self._rec:
            raise ValueError(f"{path}: truncated record")
        self._n = size // self._rec
        self._labels = None

    def __len__(self):
        return self._n

    def __getitem__(self, i: int) -> FlowSample:
        if not -self._n <= i < self._n:
            raise IndexError(i)
        i %= self._n
        self._fh.seek(self._base + i * self._rec)
        buf = self._fh.read(self._rec)
        code, trunc, fid = struct.unpack_from("<BB16s", buf)
        arrays, off = [], 18
        for shape, size in zip(self._shapes, self._sizes):
            arrays.append(np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape))
            off += 4 * size
        return FlowSample(*arrays, label=_CODE_LABELS[code], flow_id=fid.rstrip(b"\0").decode(),
                          truncated=bool(trunc))

    def __iter__(self) -> Iterator[FlowSample]:
        for i in range(self._n):
            yield self[i]

    def labels(self) -> list[Label]:
        if self._labels is None:
            out = []
            for i in range(self._n):
                self._fh.seek(self._base + i * self._rec)
                out.append(_CODE_LABELS[self._fh.read(1)[0]])
            self._labels = out
        return self._labels

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_samples(path: str | Path):
    """Open a sample file in either serialized form."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == BIN_MAGIC:
        return SampleStore(path)
    return read_samples_jsonl(path)
