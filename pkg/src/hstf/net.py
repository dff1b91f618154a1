"""HSTF hybrid network in numpy: MLP encoders, shared CNN over raw packet
matrices, one LSTM per direction, fused fully-connected head.

Everything runs on batches. Forward passes in train mode return a cache that
``backward`` consumes to produce exact gradients for every parameter.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import FL_REQ_LEN, FL_RES_LEN, PL_LEN, FlowSample
from .ingest import Label

log = logging.getLogger(__name__)

CKPT_SCHEMA = "hstf-ckpt/v1"
GATES = ("f", "i", "C", "o")
DIRECTIONS = ("req", "res")


class ConfigError(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    rows: int = 20
    cols: int = 40
    flow_size: int = 3
    kernels: int = 2
    kernel_h: int = 2
    kernel_w: int = 8
    stride: int = 2
    pool_h: int = 2
    pool_w: int = 2
    pool_stride: int = 1
    lstm_hidden: int = 16
    ep_out: int = 32
    ef_out: int = 32
    er_hidden: int | None = None  # None -> cols (single cols->cols layer)
    head_hidden: int = 64
    dropout: float = 0.3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    use_stats: bool = True  # False gives the raw-data-only contrast model
    dtype: str = "float32"
    seed: int = 42

    def __post_init__(self):
        if (self.rows - self.kernel_h) % self.stride or (self.cols - self.kernel_w) % self.stride:
            raise ConfigError("conv output dims are not integral for this matrix/kernel/stride")
        ch, cw = self.conv_shape
        if ch < self.pool_h or cw < self.pool_w:
            raise ConfigError(f"conv map {ch}x{cw} smaller than pool {self.pool_h}x{self.pool_w}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def conv_shape(self) -> tuple[int, int]:
        return ((self.rows - self.kernel_h) // self.stride + 1,
                (self.cols - self.kernel_w) // self.stride + 1)

    @property
    def pool_shape(self) -> tuple[int, int]:
        ch, cw = self.conv_shape
        return ((ch - self.pool_h) // self.pool_stride + 1,
                (cw - self.pool_w) // self.pool_stride + 1)

    @property
    def conv_flat(self) -> int:
        ph, pw = self.pool_shape
        return ph * pw * self.kernels

    @property
    def packet_dim(self) -> int:
        return self.conv_flat + (self.ep_out if self.use_stats else 0)

    @property
    def fused_dim(self) -> int:
        return 2 * self.lstm_hidden + (2 * self.ef_out if self.use_stats else 0)

    @property
    def er_widths(self) -> list[int]:
        if self.er_hidden is None or self.er_hidden == self.cols:
            return [self.cols]
        return [self.er_hidden, self.cols]

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)

    @classmethod
    def from_mapping(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- initialisation -------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes the init RNG stream."""
    s: dict[str, tuple[int, ...]] = {}
    width = cfg.cols
    for k, w in enumerate(cfg.er_widths):
        s[f"er_W{k}"], s[f"er_b{k}"] = (width, w), (w,)
        width = w
    s["conv_W"], s["conv_b"] = (cfg.kernels, cfg.kernel_h, cfg.kernel_w), (cfg.kernels,)
    if cfg.use_stats:
        s["ep_W0"], s["ep_b0"] = (PL_LEN, cfg.ep_out), (cfg.ep_out,)
        s["ef_req_W0"], s["ef_req_b0"] = (FL_REQ_LEN, cfg.ef_out), (cfg.ef_out,)
        s["ef_res_W0"], s["ef_res_b0"] = (FL_RES_LEN, cfg.ef_out), (cfg.ef_out,)
    H = cfg.lstm_hidden
    for d in DIRECTIONS:
        for g in GATES:
            s[f"lstm_{d}_W_{g}"] = (H + cfg.packet_dim, H)
            s[f"lstm_{d}_b_{g}"] = (H,)
    s["head_W"], s["head_b"] = (cfg.fused_dim, cfg.head_hidden), (cfg.head_hidden,)
    s["out_W"], s["out_b"] = (cfg.head_hidden, 2), (2,)
    return s


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name == "conv_W":
        k, kh, kw = shape
        return kh * kw, k * kh * kw
    return shape[0], shape[1]


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            val = 1.0 if name.endswith("_b_f") else 0.0
            params[name] = np.full(shape, val, dtype=cfg.dtype)
        else:
            fan_in, fan_out = _fans(name, shape)
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=shape).astype(cfg.dtype)
    return params


# -- building blocks --------------------------------------------------------------

def _check(name: str, a: np.ndarray) -> None:
    if not np.isfinite(a).all():
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteActivation(f"non-finite activation in {name} at index {tuple(bad.tolist())}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dense_stack(x, params, prefix: str, depth: int):
    """ReLU MLP; returns output and per-layer (input, pre-activation) cache."""
    cache = []
    for k in range(depth):
        z = x @ params[f"{prefix}_W{k}"] + params[f"{prefix}_b{k}"]
        cache.append((x, z))
        x = np.maximum(z, 0)
    return x, cache


def dense_stack_backward(dy, params, prefix: str, cache, grads):
    for k in reversed(range(len(cache))):
        x, z = cache[k]
        dz = dy * (z > 0)
        W = params[f"{prefix}_W{k}"]
        grads[f"{prefix}_W{k}"] += x.reshape(-1, x.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        grads[f"{prefix}_b{k}"] += dz.reshape(-1, dz.shape[-1]).sum(0)
        dy = dz @ W.T
    return dy


def encode_raw(mats, params, cfg: ModelConfig):
    """Row-wise dense encoding of raw matrices (..., rows, cols) -> same shape."""
    if mats.shape[-2:] != (cfg.rows, cfg.cols):
        raise ConfigError(f"raw matrix shape {mats.shape[-2:]} != ({cfg.rows}, {cfg.cols})")
    return dense_stack(mats, params, "er", len(cfg.er_widths))[0]


def conv_forward(x, params, cfg: ModelConfig):
    """x: (N, rows, cols) -> ReLU(conv) (N, oh, ow, K) plus cache."""
    kh, kw, s = cfg.kernel_h, cfg.kernel_w, cfg.stride
    patches = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    patches = patches.reshape(*patches.shape[:3], kh * kw)
    Wf = params["conv_W"].reshape(cfg.kernels, kh * kw)
    z = patches @ Wf.T + params["conv_b"]
    return np.maximum(z, 0), (patches, z)


def conv_backward(dy, params, cfg: ModelConfig, cache, grads):
    patches, z = cache
    kh, kw, s = cfg.kernel_h, cfg.kernel_w, cfg.stride
    dz = dy * (z > 0)
    grads["conv_W"] += np.einsum("nijp,nijk->kp", patches, dz).reshape(cfg.kernels, kh, kw)
    grads["conv_b"] += dz.sum((0, 1, 2))
    dp = dz @ params["conv_W"].reshape(cfg.kernels, kh * kw)
    N, oh, ow = dz.shape[:3]
    dx = np.zeros((N, cfg.rows, cfg.cols), dtype=dz.dtype)
    for a in range(kh):
        for b in range(kw):
            dx[:, a:a + s * oh:s, b:b + s * ow:s] += dp[..., a * kw + b]
    return dx


def pool_forward(x, cfg: ModelConfig):
    """Max pool over (N, H, W, K); ties resolve to the row-major first cell."""
    ph, pw, s = cfg.pool_h, cfg.pool_w, cfg.pool_stride
    win = sliding_window_view(x, (ph, pw), axis=(1, 2))[:, ::s, ::s]
    win = win.reshape(*win.shape[:4], ph * pw)
    idx = win.argmax(-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]
    return out, (idx, x.shape)


def pool_backward(dy, cfg: ModelConfig, cache):
    idx, shape = cache
    ph, pw, s = cfg.pool_h, cfg.pool_w, cfg.pool_stride
    oh, ow = dy.shape[1:3]
    dx = np.zeros(shape, dtype=dy.dtype)
    for a in range(ph):
        for b in range(pw):
            dx[:, a:a + s * oh:s, b:b + s * ow:s] += np.where(idx == a * pw + b, dy, 0)
    return dx


def conv_pool(encoded, params, cfg: ModelConfig):
    """(N, rows, cols) -> flattened pooled feature maps (N, conv_flat)."""
    y, _ = conv_forward(encoded, params, cfg)
    p, _ = pool_forward(y, cfg)
    return p.reshape(len(p), -1)


def encode_pl(pl, params):
    return dense_stack(pl, params, "ep", 1)[0]


def encode_fl(fl, params, direction: str):
    width = params[f"ef_{direction}_W0"].shape[0]
    if fl.shape[-1] != width:
        raise ConfigError(f"FL vector length {fl.shape[-1]} != {width} for {direction}")
    return dense_stack(fl, params, f"ef_{direction}", 1)[0]


def lstm_weights(params, direction: str):
    W = np.concatenate([params[f"lstm_{direction}_W_{g}"] for g in GATES], axis=1)
    b = np.concatenate([params[f"lstm_{direction}_b_{g}"] for g in GATES])
    return W, b


def lstm_forward(X, W, b, hidden: int):
    """Run an LSTM over X (B, T, D) with stacked gate weights W (H+D, 4H).

    Gate order along the stacked axis is forget, input, candidate, output.
    Returns the last hidden state and the per-step cache.
    """
    B, T, _ = X.shape
    H = hidden
    h = np.zeros((B, H), dtype=X.dtype)
    c = np.zeros((B, H), dtype=X.dtype)
    steps = []
    for t in range(T):
        z = np.concatenate([h, X[:, t]], axis=1)
        a = z @ W + b
        f = _sigmoid(a[:, :H])
        i = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        steps.append((z, f, i, g, o, c_prev, tc))
    return h, steps


def lstm_backward(dh, W, hidden: int, steps):
    H = hidden
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[1], dtype=W.dtype)
    dX = []
    dc = np.zeros_like(dh)
    for z, f, i, g, o, c_prev, tc in reversed(steps):
        do = dh * tc
        dc = dc + dh * o * (1 - tc * tc)
        da = np.concatenate([dc * c_prev * f * (1 - f),
                             dc * g * i * (1 - i),
                             dc * i * (1 - g * g),
                             do * o * (1 - o)], axis=1)
        dW += z.T @ da
        db += da.sum(0)
        dz = da @ W.T
        dh = dz[:, :H]
        dX.append(dz[:, H:])
        dc = dc * f
    return np.stack(dX[::-1], axis=1), dW, db


def softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    R: dict  # direction -> (B, n, rows, cols)
    P: dict  # direction -> (B, n, 41)
    F: dict  # direction -> (B, 57|58)
    y: np.ndarray  # (B,) class index, 0 malicious

    def __len__(self):
        return len(self.y)


def stack_samples(samples: Sequence[FlowSample], dtype="float32") -> Batch:
    R = {"req": np.stack([s.req_matrices for s in samples]).astype(dtype, copy=False),
         "res": np.stack([s.res_matrices for s in samples]).astype(dtype, copy=False)}
    P = {"req": np.stack([s.req_pl for s in samples]).astype(dtype, copy=False),
         "res": np.stack([s.res_pl for s in samples]).astype(dtype, copy=False)}
    F = {"req": np.stack([s.req_fl for s in samples]).astype(dtype, copy=False),
         "res": np.stack([s.res_fl for s in samples]).astype(dtype, copy=False)}
    y = np.array([s.y for s in samples], dtype=np.int64)
    return Batch(R, P, F, y)


# -- the network --------------------------------------------------------------

class HSTFNet:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = init_params(cfg) if params is None else params
        shapes = param_shapes(cfg)
        if set(shapes) != set(self.params):
            raise ConfigError(f"parameter names do not match config: {sorted(set(shapes) ^ set(self.params))}")
        for k, shape in shapes.items():
            if self.params[k].shape != shape:
                raise ConfigError(f"param {k} has shape {self.params[k].shape}, expected {shape}")

    def _check_batch(self, batch: Batch):
        cfg = self.cfg
        want = (cfg.flow_size, cfg.rows, cfg.cols)
        for d in DIRECTIONS:
            if batch.R[d].shape[1:] != want:
                raise ConfigError(f"sample {d} matrices {batch.R[d].shape[1:]} != model {want}")

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None):
        """Return (probabilities (B, 2), cache). Column 0 is p_malicious."""
        cfg, p = self.cfg, self.params
        self._check_batch(batch)
        B, n, H = len(batch), cfg.flow_size, cfg.lstm_hidden
        cache: dict = {"batch": batch}
        h_out = {}
        for d in DIRECTIONS:
            M = batch.R[d].reshape(B * n, cfg.rows, cfg.cols)
            E, er_cache = dense_stack(M, p, "er", len(cfg.er_widths))
            _check(f"er[{d}]", E)
            Cv, conv_cache = conv_forward(E, p, cfg)
            Pm, pool_cache = pool_forward(Cv, cfg)
            parts = [Pm.reshape(B * n, -1)]
            ep_cache = None
            if cfg.use_stats:
                ep, ep_cache = dense_stack(batch.P[d].reshape(B * n, PL_LEN), p, "ep", 1)
                parts.append(ep)
            X = np.concatenate(parts, axis=1).reshape(B, n, cfg.packet_dim)
            _check(f"packet[{d}]", X)
            W, b = lstm_weights(p, d)
            h, steps = lstm_forward(X, W, b, H)
            _check(f"lstm[{d}]", h)
            mask = None
            if train and cfg.dropout > 0:
                keep = 1.0 - cfg.dropout
                mask = ((rng.random(h.shape) < keep) / keep).astype(h.dtype)
                h = h * mask
            h_out[d] = h
            cache[d] = (er_cache, conv_cache, pool_cache, ep_cache, W, steps, mask, Pm.shape)
        fused = [h_out["req"], h_out["res"]]
        if cfg.use_stats:
            for d in DIRECTIONS:
                ef, cache[f"ef_{d}"] = dense_stack(batch.F[d], p, f"ef_{d}", 1)
                fused.append(ef)
        Z = np.concatenate(fused, axis=1)
        A = Z @ p["head_W"] + p["head_b"]
        Hh = np.maximum(A, 0)
        logits = Hh @ p["out_W"] + p["out_b"]
        _check("logits", logits)
        probs = softmax(logits)
        cache.update(Z=Z, A=A, Hh=Hh, probs=probs)
        return probs, cache

    def loss(self, probs, y) -> float:
        tiny = np.finfo(probs.dtype).tiny
        return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], tiny))))

    def backward(self, cache, y=None) -> dict[str, np.ndarray]:
        """Gradients of the mean cross-entropy loss w.r.t. every parameter."""
        cfg, p = self.cfg, self.params
        batch = cache["batch"]
        y = batch.y if y is None else y
        B, n, H = len(batch), cfg.flow_size, cfg.lstm_hidden
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dlogits = cache["probs"].copy()
        dlogits[np.arange(B), y] -= 1
        dlogits /= B
        grads["out_W"] += cache["Hh"].T @ dlogits
        grads["out_b"] += dlogits.sum(0)
        dA = (dlogits @ p["out_W"].T) * (cache["A"] > 0)
        grads["head_W"] += cache["Z"].T @ dA
        grads["head_b"] += dA.sum(0)
        dZ = dA @ p["head_W"].T
        if cfg.use_stats:
            off = 2 * H
            for d in DIRECTIONS:
                dense_stack_backward(dZ[:, off:off + cfg.ef_out], p, f"ef_{d}", cache[f"ef_{d}"], grads)
                off += cfg.ef_out
        for k, d in enumerate(DIRECTIONS):
            er_cache, conv_cache, pool_cache, ep_cache, W, steps, mask, pshape = cache[d]
            dh = dZ[:, k * H:(k + 1) * H]
            if mask is not None:
                dh = dh * mask
            dX, dW, db = lstm_backward(dh, W, H, steps)
            for j, g in enumerate(GATES):
                grads[f"lstm_{d}_W_{g}"] += dW[:, j * H:(j + 1) * H]
                grads[f"lstm_{d}_b_{g}"] += db[j * H:(j + 1) * H]
            dX = dX.reshape(B * n, cfg.packet_dim)
            if cfg.use_stats:
                dense_stack_backward(dX[:, cfg.conv_flat:], p, "ep", ep_cache, grads)
            dPm = dX[:, :cfg.conv_flat].reshape(pshape)
            dCv = pool_backward(dPm, cfg, pool_cache)
            dE = conv_backward(dCv, p, cfg, conv_cache, grads)
            dense_stack_backward(dE, p, "er", er_cache, grads)
        return grads

    def predict_proba(self, samples, batch_size: int = 256) -> np.ndarray:
        """p_malicious for each sample, inference mode."""
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = [samples[j] for j in range(i, min(i + batch_size, len(samples)))]
            probs, _ = self.forward(stack_samples(chunk, self.cfg.dtype))
            out.append(probs[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path, meta: dict | None = None, sidecar: bool = False) -> None:
        path = Path(path)
        doc = {"version": CKPT_SCHEMA, "config": asdict(self.cfg), "meta": meta or {}, "params": {}}
        if sidecar:
            blob_path = path.with_suffix(path.suffix + ".bin")
            offset = 0
            with open(blob_path, "wb") as fh:
                for name in sorted(self.params):
                    a = np.ascontiguousarray(self.params[name], dtype="<f4")
                    fh.write(a.tobytes())
                    doc["params"][name] = {"shape": list(a.shape), "offset": offset, "count": int(a.size)}
                    offset += a.nbytes
            doc["blob"] = blob_path.name
        else:
            for name in sorted(self.params):
                a = self.params[name]
                doc["params"][name] = {"shape": list(a.shape), "data": a.ravel().tolist()}
        path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["HSTFNet", dict]:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
        if doc.get("version") != CKPT_SCHEMA:
            raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
        cfg = ModelConfig.from_mapping(doc["config"])
        params = {}
        if "blob" in doc:
            blob = (path.parent / doc["blob"]).read_bytes()
            for name, entry in doc["params"].items():
                a = np.frombuffer(blob, dtype="<f4", count=entry["count"], offset=entry["offset"])
                params[name] = a.reshape(entry["shape"]).astype(cfg.dtype)
        else:
            for name, entry in doc["params"].items():
                params[name] = np.asarray(entry["data"], dtype=cfg.dtype).reshape(entry["shape"])
        return cls(cfg, params), doc.get("meta", {})


def checkpoint_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- optimisation ---------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        if self.lr == 0:
            return
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= step.astype(params[k].dtype, copy=False)


def _labels_of(dataset) -> np.ndarray:
    if hasattr(dataset, "labels"):
        labels = dataset.labels()
    else:
        labels = [s.label for s in dataset]
    if any(l is Label.UNLABELED for l in labels):
        raise ValueError("dataset contains unlabeled samples")
    return np.array([0 if l is Label.MALICIOUS else 1 for l in labels], dtype=np.int64)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    acc: float
    val_loss: float = float("nan")
    val_recall: float = float("nan")
    val_precision: float = float("nan")
    val_f1: float = float("nan")


def train_epoch(net: HSTFNet, opt: Adam, dataset, rng: np.random.Generator,
                epoch: int = 0) -> tuple[float, float]:
    """One shuffled pass; returns (mean loss, accuracy). Samples are fetched per batch."""
    cfg = net.cfg
    order = rng.permutation(len(dataset))
    total_loss, correct = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = stack_samples([dataset[int(i)] for i in idx], cfg.dtype)
        probs, cache = net.forward(batch, train=True, rng=rng)
        loss = net.loss(probs, batch.y)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} in epoch {epoch} at batch {start // cfg.batch_size}")
        grads = net.backward(cache)
        opt.step(net.params, grads)
        total_loss += loss * len(idx)
        correct += int((probs.argmax(1) == batch.y).sum())
    n = max(len(order), 1)
    return total_loss / n, correct / n


def _val_stats(net: HSTFNet, dataset, y: np.ndarray) -> tuple[float, float, float, float]:
    p_mal = net.predict_proba(dataset)
    p_true = np.where(y == 0, p_mal, 1 - p_mal)
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-30))))
    pred_mal = p_mal > 0.5
    is_mal = y == 0
    tp = int((pred_mal & is_mal).sum())
    fp = int((pred_mal & ~is_mal).sum())
    fn = int((~pred_mal & is_mal).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return loss, rec, prec, f1


def train(train_set, val_set, cfg: ModelConfig,
          on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[HSTFNet, list[EpochStats]]:
    """Minibatch Adam with early stopping on validation F1.

    The returned network holds the parameters of the best validation epoch
    (F1, ties broken by lower validation loss).
    """
    if len(train_set) == 0:
        raise ValueError("training split is empty")
    if len(val_set) == 0:
        raise ValueError("validation split is empty")
    _labels_of(train_set)
    y_val = _labels_of(val_set)
    net = HSTFNet(cfg)
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[EpochStats] = []
    best, best_params, stale = None, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        loss, acc = train_epoch(net, opt, train_set, rng, epoch)
        vloss, vrec, vprec, vf1 = _val_stats(net, val_set, y_val)
        st = EpochStats(epoch, loss, acc, vloss, vrec, vprec, vf1)
        history.append(st)
        log.info("epoch %d loss=%.5f acc=%.4f val_f1=%.4f val_recall=%.4f", epoch, loss, acc, vf1, vrec)
        if on_epoch:
            on_epoch(st)
        score = (vf1, -vloss)
        if best is None or score > best:
            best, best_params, stale = score, {k: v.copy() for k, v in net.params.items()}, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.params = best_params
    return net, history


def predict(p_malicious: float, threshold: float = 0.5) -> Label:
    """Malicious iff p_malicious is strictly greater than the threshold."""
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    return Label.MALICIOUS if p_malicious > threshold else Label.BENIGN
