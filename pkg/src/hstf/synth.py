"""Deterministic synthetic HTTP flow corpora.

Trojan-like flows beacon to a command server: long token-bearing URLs, a
small fixed header set and short regular payloads. Benign-like flows use
diverse methods, header sets and sizes. ``separability`` controls how often
a trojan flow borrows benign message shapes.
"""
from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, field
from pathlib import Path

from .ingest import Endpoint, Flow, FlowKey, Label, parse_message, write_flows_jsonl, write_labels

MIMICRY = {"high": 0.0, "medium": 0.15, "low": 0.45}

_WORDS = ("news", "static", "img", "api", "v2", "assets", "user", "home", "search", "feed",
          "cdn", "media", "blog", "article", "video", "cart", "login", "docs", "js", "css")
_EXT = ("", ".html", ".js", ".css", ".png", ".jpg", ".json", ".php")
_TLDS = ("com", "net", "org", "cn", "io")
_BENIGN_HEADERS = (
    ("Accept", ("text/html,application/xhtml+xml", "*/*", "image/webp,*/*", "application/json")),
    ("Accept-Language", ("en-US,en;q=0.9", "zh-CN,zh;q=0.8", "de-DE")),
    ("Accept-Encoding", ("gzip, deflate", "gzip, deflate, br", "identity")),
    ("Connection", ("keep-alive", "close")),
    ("Referer", ("http://www.example.com/", "http://search.example.org/?q=news")),
    ("Cookie", ("sid=3f9a0c; theme=dark", "uid=77120; _ga=GA1.2.1234", "session=abcdef0123")),
    ("Cache-Control", ("no-cache", "max-age=0")),
    ("Upgrade-Insecure-Requests", ("1",)),
    ("DNT", ("1",)),
    ("If-Modified-Since", ("Tue, 01 May 2018 10:00:00 GMT",)),
    ("X-Requested-With", ("XMLHttpRequest",)),
    ("Pragma", ("no-cache",)),
)
_BROWSER_UA = ("Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 Chrome/66.0 Safari/537.36",
               "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_13_4) AppleWebKit/605.1.15 Version/11.1 Safari/605.1.15",
               "Mozilla/5.0 (X11; Linux x86_64; rv:60.0) Gecko/20100101 Firefox/60.0")
_STATUS = {200: "OK", 204: "No Content", 301: "Moved Permanently", 302: "Found",
           304: "Not Modified", 404: "Not Found", 500: "Internal Server Error", 503: "Service Unavailable"}


@dataclass(frozen=True)
class GenProfile:
    cls: str = "benign"  # benign | trojan
    url_len: tuple[int, int] = (1, 40)
    header_count: tuple[int, int] = (5, 12)
    method_weights: dict = field(default_factory=lambda: {"GET": 0.75, "POST": 0.12, "HEAD": 0.08, "OPTIONS": 0.05})
    payload_len: tuple[int, int] = (200, 5000)
    msgs_per_flow: tuple[int, int] = (1, 4)
    beacon_regularity: float = 0.0
    separability: str = "high"
    seed: int = 42

    def __post_init__(self):
        if self.cls not in ("benign", "trojan"):
            raise ValueError(f"unknown profile class {self.cls!r}")
        if self.separability not in MIMICRY:
            raise ValueError(f"unknown separability {self.separability!r}")
        if not 0 <= self.beacon_regularity <= 1:
            raise ValueError("beacon_regularity must be in [0, 1]")
        for name in ("url_len", "header_count", "payload_len", "msgs_per_flow"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")

    @classmethod
    def from_mapping(cls, d: dict) -> "GenProfile":
        d = dict(d)
        for name in ("url_len", "header_count", "payload_len", "msgs_per_flow"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


def default_profile(cls: str, separability: str = "high", seed: int = 42) -> GenProfile:
    if cls == "benign":
        return GenProfile(cls="benign", separability=separability, seed=seed)
    url = {"high": (60, 110), "medium": (35, 90), "low": (20, 70)}[separability]
    return GenProfile(cls="trojan", url_len=url, header_count=(2, 3),
                      method_weights={"POST": 0.7, "GET": 0.3}, payload_len=(16, 64),
                      msgs_per_flow=(2, 6), beacon_regularity=0.9, separability=separability, seed=seed)


def _pick(rng: random.Random, weights: dict) -> str:
    keys = sorted(weights)
    return rng.choices(keys, weights=[weights[k] for k in keys])[0]


def _hostname(rng: random.Random) -> str:
    return f"{rng.choice(_WORDS)}{rng.randint(1, 999)}.{''.join(rng.choices(string.ascii_lowercase, k=rng.randint(4, 9)))}.{rng.choice(_TLDS)}"


def _fill(rng: random.Random, alphabet: str, n: int) -> str:
    return "".join(rng.choices(alphabet, k=n))


def _benign_url(rng: random.Random, length: int) -> str:
    parts = [rng.choice(_WORDS) for _ in range(rng.randint(1, 4))]
    url = "/" + "/".join(parts) + rng.choice(_EXT)
    if len(url) < length:
        url += "?" + _fill(rng, string.ascii_lowercase + "=&", length - len(url) - 1)
    return url[:max(length, 1)]


def _trojan_url(rng: random.Random, length: int) -> str:
    url = "/" + rng.choice(("gate.php", "index.php", "tasks", "b", "update/check", "s.asp")) + "?id="
    url += _fill(rng, "0123456789abcdef", 16)
    if len(url) < length:
        url += "&k=" + _fill(rng, string.ascii_letters + string.digits + "+/", max(length - len(url) - 3, 0))
    return url[:length]


def _benign_exchange(rng: random.Random, prof: GenProfile, host: str):
    method = _pick(rng, prof.method_weights)
    url = _benign_url(rng, rng.randint(*prof.url_len))
    version = "HTTP/1.1" if rng.random() < 0.9 else "HTTP/1.0"
    n_headers = rng.randint(*prof.header_count)
    headers = [("Host", host), ("User-Agent", rng.choice(_BROWSER_UA))]
    pool = list(_BENIGN_HEADERS)
    rng.shuffle(pool)
    for name, values in pool[:max(n_headers - 2, 0)]:
        headers.append((name, rng.choice(values)))
    headers = headers[:n_headers]
    body = b""
    if method == "POST":
        body = _fill(rng, string.ascii_letters + "=&", rng.randint(50, 800)).encode()
        headers.append(("Content-Type", "application/x-www-form-urlencoded"))
        headers.append(("Content-Length", str(len(body))))
    req = _raw(f"{method} {url} {version}", headers, body)
    code = rng.choices(sorted(_STATUS), weights=[60, 3, 4, 5, 10, 8, 3, 2])[0]
    rbody = b"" if method == "HEAD" or code in (204, 304) else \
        _fill(rng, string.printable[:94] + " \n", rng.randint(*prof.payload_len)).encode()
    rheaders = [("Server", rng.choice(("nginx/1.14.0", "Apache/2.4.29 (Ubuntu)", "cloudflare"))),
                ("Date", "Tue, 01 May 2018 10:00:00 GMT"),
                ("Content-Type", rng.choice(("text/html; charset=utf-8", "application/javascript", "image/png"))),
                ("Content-Length", str(len(rbody)))]
    for name, values in rng.sample(_BENIGN_HEADERS, rng.randint(0, 5)):
        rheaders.append((name, rng.choice(values)))
    res = _raw(f"{version} {code} {_STATUS[code]}", rheaders, rbody)
    return req, res


def _trojan_exchange(rng: random.Random, prof: GenProfile, host: str, ua: str):
    method = _pick(rng, prof.method_weights)
    url = _trojan_url(rng, rng.randint(*prof.url_len))
    headers = [("Host", host), ("User-Agent", ua)]
    body = b""
    if method == "POST":
        body = _fill(rng, string.ascii_letters + string.digits + "+/=", rng.randint(*prof.payload_len)).encode()
        headers.append(("Content-Length", str(len(body))))
    headers = headers[:max(prof.header_count[1], 2)]
    req = _raw(f"{method} {url} HTTP/1.1", headers, body)
    rbody = _fill(rng, string.ascii_letters + string.digits, rng.randint(8, 48)).encode()
    res = _raw("HTTP/1.1 200 OK", [("Content-Length", str(len(rbody))), ("Content-Type", "text/plain")], rbody)
    return req, res


def _raw(start: str, headers, body: bytes) -> bytes:
    lines = [start] + [f"{k}: {v}" for k, v in headers]
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + body


def generate(profile: GenProfile, count: int) -> list[Flow]:
    """Generate ``count`` labeled flows; identical profile and count give identical flows."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = random.Random(f"{profile.cls}:{profile.seed}")
    label = Label.MALICIOUS if profile.cls == "trojan" else Label.BENIGN
    benign_shape = default_profile("benign", profile.separability, profile.seed)
    mimic = MIMICRY[profile.separability] if profile.cls == "trojan" else 0.0
    octet = 1 if profile.cls == "trojan" else 2
    base_ts = 1_525_132_800_000_000 + (profile.seed % 1000) * 10_000_000_000
    flows = []
    for k in range(count):
        client = Endpoint(f"10.{octet}.{(k >> 8) & 255}.{k & 255}", 20000 + (k >> 16) % 40000)
        server = Endpoint(f"93.184.{rng.randint(0, 255)}.{rng.randint(1, 254)}", 80)
        host = _hostname(rng)
        n_ex = rng.randint(*profile.msgs_per_flow)
        ts = base_ts + k * 1_000_000
        ua = rng.choice(("Mozilla/4.0 (compatible; MSIE 6.0)", "WinHTTP/1.0", "Mozilla/4.0"))
        msgs = []
        with_response = profile.cls == "trojan" or n_ex > 1 or rng.random() < 0.9
        for _ in range(n_ex):
            if profile.cls == "trojan" and rng.random() >= mimic:
                req, res = _trojan_exchange(rng, profile, host, ua)
                gap = 5.0 * (profile.beacon_regularity + (1 - profile.beacon_regularity) * rng.random() * 2)
            else:
                req, res = _benign_exchange(rng, benign_shape if profile.cls == "trojan" else profile, host)
                gap = rng.uniform(0.05, 20.0)
            msgs.append(parse_message(req, ts))
            if with_response:
                msgs.append(parse_message(res, ts + rng.randint(2_000, 200_000)))
            ts += int(gap * 1_000_000) + 300_000
        flows.append(Flow(FlowKey(client, server), msgs, label))
    return flows


def generate_corpus(n_malicious: int, n_benign: int, separability: str = "high",
                    seed: int = 42) -> list[Flow]:
    """Trojan and benign flows with class-specific seeds, malicious first."""
    out = []
    if n_malicious:
        out += generate(default_profile("trojan", separability, seed), n_malicious)
    if n_benign:
        out += generate(default_profile("benign", separability, seed), n_benign)
    return out


def write_corpus(out_prefix: str | Path, flows: list[Flow]) -> tuple[Path, Path]:
    """Write ``<prefix>.jsonl`` (flow-jsonl) and ``<prefix>.labels.csv``."""
    out_prefix = Path(out_prefix)
    jsonl = out_prefix.with_name(out_prefix.name + ".jsonl")
    labels = out_prefix.with_name(out_prefix.name + ".labels.csv")
    with open(jsonl, "w", encoding="utf-8") as fh:
        write_flows_jsonl(fh, flows)
    write_labels(labels, flows)
    return jsonl, labels


def load_profile(path: str | Path) -> GenProfile:
    text = Path(path).read_text()
    if str(path).endswith(".toml"):
        try:
            import tomllib as tomli
        except ModuleNotFoundError:  # Python 3.10
            import tomli
        return GenProfile.from_mapping(tomli.loads(text))
    return GenProfile.from_mapping(json.loads(text))
