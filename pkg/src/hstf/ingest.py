"""Capture parsing and full-duplex HTTP flow reassembly.

A "packet" here is one complete HTTP message (start line, header lines,
payload). TCP segments belonging to one message are joined before the
message is emitted.
"""
from __future__ import annotations

import base64
import csv
import enum
import hashlib
import io
import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import dpkt

log = logging.getLogger(__name__)

PAYLOAD_CAP = 64 * 1024
DEFAULT_IDLE_TIMEOUT = 120.0

# Token chars per RFC 7230; methods are matched as a token followed by SP.
_REQUEST_LINE = re.compile(rb"^[!#$%&'*+.^_`|~0-9A-Za-z-]+ \S")
KNOWN_METHODS = frozenset(
    b"GET POST HEAD OPTIONS PUT DELETE PATCH TRACE CONNECT".split())
_PCAP_MAGICS = {b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4", b"\x4d\x3c\xb2\xa1", b"\xa1\xb2\x3c\x4d"}
_PCAPNG_MAGIC = b"\x0a\x0d\x0d\x0a"


class CaptureError(ValueError):
    """Raised when a capture as a whole cannot be read."""


class Direction(str, enum.Enum):
    REQUEST = "request"
    RESPONSE = "response"


class Label(str, enum.Enum):
    MALICIOUS = "malicious"
    BENIGN = "benign"
    UNLABELED = "unlabeled"


@dataclass(frozen=True, order=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self):
        if not self.host:
            raise ValueError("endpoint host must be non-empty")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class FlowKey:
    client: Endpoint
    server: Endpoint

    @property
    def pair(self) -> tuple[Endpoint, Endpoint]:
        """Direction-free lookup key."""
        return tuple(sorted((self.client, self.server)))


@dataclass(frozen=True)
class HttpMessage:
    direction: Direction
    start_line: bytes
    header_lines: tuple[tuple[bytes, bytes], ...]
    payload: bytes
    timestamp: int  # microseconds since epoch
    wire_size: int

    def header_line_bytes(self, i: int) -> bytes:
        name, value = self.header_lines[i]
        return name + b": " + value


@dataclass
class Flow:
    key: FlowKey
    messages: list[HttpMessage]
    label: Label = Label.UNLABELED

    @property
    def first_ts(self) -> int:
        return self.messages[0].timestamp

    @property
    def last_ts(self) -> int:
        return self.messages[-1].timestamp

    @property
    def flow_id(self) -> str:
        return flow_id(self.key, self.first_ts)

    def direction(self, d: Direction) -> list[HttpMessage]:
        return [m for m in self.messages if m.direction is d]


@dataclass
class ParseStats:
    messages: int = 0
    skipped_non_tcp: int = 0
    skipped_non_http: int = 0
    skipped_malformed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def skipped(self) -> int:
        return self.skipped_non_tcp + self.skipped_non_http + self.skipped_malformed


@dataclass(frozen=True)
class TupleFragment:
    """Connection tuple as seen on the wire: sender -> receiver."""
    src: Endpoint
    dst: Endpoint


def flow_id(key: FlowKey, first_ts: int) -> str:
    token = f"{key.client}|{key.server}|{first_ts}".encode()
    return hashlib.sha1(token).hexdigest()[:16]


def classify_start(data: bytes) -> Direction | None:
    if data.startswith(b"HTTP/"):
        return Direction.RESPONSE
    if _REQUEST_LINE.match(data):
        line = data.split(b"\r\n", 1)[0].split(b"\n", 1)[0]
        if b" HTTP/" in line or line.split(b" ", 1)[0] in KNOWN_METHODS:
            return Direction.REQUEST
    return None


def parse_message(raw: bytes, timestamp: int, wire_size: int | None = None) -> HttpMessage:
    """Parse one complete HTTP message from its on-wire bytes.

    Raises ValueError if the bytes do not start with an HTTP start line.
    """
    direction = classify_start(raw)
    if direction is None:
        raise ValueError("not an HTTP start line")
    head, sep, body = raw.partition(b"\r\n\r\n")
    if not sep:
        head, sep, body = raw.partition(b"\n\n")
    lines = re.split(rb"\r?\n", head)
    start_line = lines[0]
    headers = []
    for line in lines[1:]:
        if not line:
            continue
        if line[:1] in (b" ", b"\t") and headers:
            # obsolete line folding
            name, value = headers[-1]
            headers[-1] = (name, value + b" " + line.strip())
            continue
        name, colon, value = line.partition(b":")
        if not colon:
            raise ValueError(f"malformed header line {line[:40]!r}")
        headers.append((name.strip(), value.strip()))
    return HttpMessage(
        direction=direction,
        start_line=start_line,
        header_lines=tuple(headers),
        payload=body[:PAYLOAD_CAP],
        timestamp=int(timestamp),
        wire_size=len(raw) if wire_size is None else int(wire_size),
    )


# -- capture readers ---------------------------------------------------------

def sniff_format(head: bytes) -> str:
    if head[:4] in _PCAP_MAGICS:
        return "pcap"
    if head[:4] == _PCAPNG_MAGIC:
        return "pcapng"
    return "flow-jsonl"


def parse_capture(source: BinaryIO | bytes, fmt: str = "auto",
                  stats: ParseStats | None = None) -> Iterator[tuple[TupleFragment, HttpMessage]]:
    """Yield (tuple, message) pairs from a pcap or flow-jsonl byte stream."""
    stats = stats if stats is not None else ParseStats()
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if fmt == "auto":
        head = source.read(4)
        source.seek(0)
        fmt = sniff_format(head)
    if fmt == "pcap" or fmt == "pcapng":
        yield from _parse_pcap(source, stats)
    elif fmt == "flow-jsonl":
        yield from _parse_jsonl(source, stats)
    else:
        raise CaptureError(f"unknown capture format {fmt!r}")


def _parse_jsonl(source: BinaryIO, stats: ParseStats):
    for lineno, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            if lineno == 1:
                raise CaptureError(f"not a flow-jsonl capture: {exc}") from None
            stats.skipped_malformed += 1
            continue
        if not isinstance(rec, dict):
            raise CaptureError(f"line {lineno}: expected a JSON object")
        try:
            frag = TupleFragment(Endpoint(str(rec["src_host"]), int(rec["src_port"])),
                                 Endpoint(str(rec["dst_host"]), int(rec["dst_port"])))
            raw = base64.b64decode(rec["raw_b64"], validate=True)
            msg = parse_message(raw, int(rec["ts_us"]))
        except (KeyError, TypeError, ValueError) as exc:
            log.debug("line %d skipped: %s", lineno, exc)
            stats.skipped_malformed += 1
            continue
        declared = rec.get("direction")
        if declared and declared != msg.direction.value:
            log.debug("line %d: declared %s but start line says %s", lineno, declared, msg.direction.value)
        stats.messages += 1
        yield frag, msg


def _inet(addr: bytes) -> str:
    import socket
    return socket.inet_ntop(socket.AF_INET6 if len(addr) == 16 else socket.AF_INET, addr)


def _parse_pcap(source: BinaryIO, stats: ParseStats):
    try:
        reader = dpkt.pcap.Reader(source)
    except (ValueError, dpkt.NeedData, dpkt.UnpackError):
        try:
            source.seek(0)
            reader = dpkt.pcapng.Reader(source)
        except (ValueError, dpkt.NeedData, dpkt.UnpackError) as exc:
            raise CaptureError(f"bad capture header: {exc}") from None

    # per-direction segment buffers, keyed by (src, dst)
    streams: dict[TupleFragment, dict] = {}
    order = 0
    done: list[tuple[int, int, TupleFragment, HttpMessage]] = []

    def flush(frag: TupleFragment):
        nonlocal order
        st = streams.pop(frag, None)
        if not st or not st["segments"]:
            return
        segs = sorted(st["segments"].items())
        raw = b"".join(data for _, (data, _) in segs)
        ts = min(t for _, (_, t) in segs)
        try:
            msg = parse_message(raw[: PAYLOAD_CAP + 16384], ts, wire_size=len(raw))
        except ValueError:
            stats.skipped_malformed += 1
            return
        done.append((ts, order, frag, msg))
        order += 1

    try:
        for ts, buf in reader:
            try:
                eth = dpkt.ethernet.Ethernet(buf)
            except (dpkt.UnpackError, dpkt.NeedData):
                stats.skipped_malformed += 1
                continue
            ip = eth.data
            if not isinstance(ip, (dpkt.ip.IP, dpkt.ip6.IP6)):
                stats.skipped_non_tcp += 1
                continue
            tcp = ip.data
            if not isinstance(tcp, dpkt.tcp.TCP):
                stats.skipped_non_tcp += 1
                continue
            if not tcp.data:
                continue
            frag = TupleFragment(Endpoint(_inet(ip.src), tcp.sport), Endpoint(_inet(ip.dst), tcp.dport))
            ts_us = int(round(ts * 1_000_000))
            starts = classify_start(bytes(tcp.data)) is not None
            if starts:
                flush(frag)
                streams[frag] = {"segments": {}}
            st = streams.get(frag)
            if st is None:
                stats.skipped_non_http += 1
                continue
            st["segments"].setdefault(tcp.seq, (bytes(tcp.data), ts_us))
    except (dpkt.NeedData, ValueError) as exc:
        log.warning("capture truncated: %s", exc)
        stats.skipped_malformed += 1
    for frag in list(streams):
        flush(frag)
    done.sort(key=lambda t: (t[0], t[1]))
    for _, _, frag, msg in done:
        stats.messages += 1
        yield frag, msg


def write_pcap(path_or_file, records: Iterable[tuple[TupleFragment, HttpMessage, bytes]],
               mss: int = 1400) -> None:
    """Write (tuple, message, raw bytes) records as Ethernet/IPv4/TCP frames.

    Raw bytes larger than ``mss`` are split across segments so the reader's
    join path gets exercised.
    """
    import socket

    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "wb") if own else path_or_file
    try:
        writer = dpkt.pcap.Writer(fh)
        seqs: dict[TupleFragment, int] = {}
        for frag, msg, raw in records:
            seq = seqs.get(frag, 1000)
            for k, off in enumerate(range(0, max(len(raw), 1), mss)):
                chunk = raw[off: off + mss]
                tcp = dpkt.tcp.TCP(sport=frag.src.port, dport=frag.dst.port, seq=seq,
                                   flags=dpkt.tcp.TH_ACK | dpkt.tcp.TH_PUSH, data=chunk)
                ip = dpkt.ip.IP(src=socket.inet_aton(frag.src.host), dst=socket.inet_aton(frag.dst.host),
                                p=dpkt.ip.IP_PROTO_TCP, data=tcp)
                ip.len = len(ip)
                eth = dpkt.ethernet.Ethernet(src=b"\x02" * 6, dst=b"\x04" * 6,
                                             type=dpkt.ethernet.ETH_TYPE_IP, data=ip)
                writer.writepkt(bytes(eth), ts=(msg.timestamp + k) / 1_000_000)
                seq += len(chunk)
            seqs[frag] = seq
    finally:
        if own:
            fh.close()


# -- reassembly ----------------------------------------------------------------

def reassemble(messages: Iterable[tuple[TupleFragment, HttpMessage]],
               idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> list[Flow]:
    """Group messages into full-duplex flows.

    Messages whose tuples are equal or reversed share a flow; a gap longer
    than ``idle_timeout`` seconds on a tuple closes the open flow. Flows are
    returned in completion order (last activity, then creation order).
    """
    timeout_us = idle_timeout * 1_000_000
    items = sorted(enumerate(messages), key=lambda im: (im[1][1].timestamp, im[0]))
    open_flows: dict[tuple[Endpoint, Endpoint], tuple[int, Flow]] = {}
    closed: list[tuple[int, Flow]] = []
    created = 0
    for _, (frag, msg) in items:
        pair = tuple(sorted((frag.src, frag.dst)))
        entry = open_flows.get(pair)
        if entry is not None and msg.timestamp - entry[1].last_ts > timeout_us:
            closed.append(open_flows.pop(pair))
            entry = None
        if entry is None:
            if msg.direction is Direction.REQUEST:
                key = FlowKey(client=frag.src, server=frag.dst)
            else:
                key = FlowKey(client=frag.dst, server=frag.src)
            entry = (created, Flow(key=key, messages=[]))
            created += 1
            open_flows[pair] = entry
        entry[1].messages.append(msg)
    closed.extend(open_flows.values())
    closed.sort(key=lambda e: (e[1].last_ts, e[0]))
    return [f for _, f in closed]


# -- labels ---------------------------------------------------------------

def read_labelmap(path: str | Path) -> dict[str, Label]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CaptureError(f"cannot read label file {path}: {exc}") from None
    labels: dict[str, Label] = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or not row[0].strip():
            continue
        if len(row) < 2:
            raise CaptureError(f"label file {path}: malformed row {row!r}")
        key, value = row[0].strip(), row[1].strip().lower()
        if (key, value) == ("key", "label"):
            continue
        try:
            labels[key] = Label(value)
        except ValueError:
            raise CaptureError(f"label file {path}: unknown label {value!r}") from None
    return labels


def load_labels(flows: Sequence[Flow], labelmap: dict[str, Label] | str | Path) -> list[Flow]:
    """Attach labels by flow id first, then by server host; unmatched flows are Unlabeled."""
    if not isinstance(labelmap, dict):
        labelmap = read_labelmap(labelmap)
    out = []
    for f in flows:
        label = labelmap.get(f.flow_id, labelmap.get(f.key.server.host, Label.UNLABELED))
        out.append(replace(f, label=label))
    return out


def write_labels(path: str | Path, flows: Iterable[Flow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "label"])
        for f in flows:
            if f.label is not Label.UNLABELED:
                w.writerow([f.flow_id, f.label.value])


# -- flow-jsonl ---------------------------------------------------------------

def message_bytes(msg: HttpMessage) -> bytes:
    """Re-serialize a message to on-wire form (payload as stored)."""
    lines = [msg.start_line] + [msg.header_line_bytes(i) for i in range(len(msg.header_lines))]
    return b"\r\n".join(lines) + b"\r\n\r\n" + msg.payload


def message_record(frag: TupleFragment, msg: HttpMessage, raw: bytes | None = None) -> dict:
    return {
        "src_host": frag.src.host,
        "src_port": frag.src.port,
        "dst_host": frag.dst.host,
        "dst_port": frag.dst.port,
        "direction": msg.direction.value,
        "ts_us": msg.timestamp,
        "raw_b64": base64.b64encode(raw if raw is not None else message_bytes(msg)).decode("ascii"),
    }


def flow_fragments(flow: Flow) -> Iterator[tuple[TupleFragment, HttpMessage]]:
    fwd = TupleFragment(flow.key.client, flow.key.server)
    rev = TupleFragment(flow.key.server, flow.key.client)
    for m in flow.messages:
        yield (fwd if m.direction is Direction.REQUEST else rev), m


def write_flows_jsonl(fh, flows: Iterable[Flow]) -> int:
    """Write the grouped flow-jsonl form (one message per line, flow_id added)."""
    n = 0
    for f in flows:
        fid = f.flow_id
        for frag, m in flow_fragments(f):
            rec = message_record(frag, m)
            rec["flow_id"] = fid
            rec["label"] = f.label.value
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            n += 1
    return n
