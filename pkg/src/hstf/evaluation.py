"""Evaluation protocol: imbalance scenarios with a balanced test set, repeated
seeded splits, point metrics, ROC/AUC, cross-corpus runs and the scaling
benchmark."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import tempfile
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import FeatureConfig, SampleStore, flows_to_samples, write_samples_bin
from .ingest import Label
from .net import HSTFNet, ModelConfig, predict, train, train_epoch, Adam

log = logging.getLogger(__name__)

REPORT_SCHEMA = "hstf-report/v1"

# Published robustness results on the original corpus, percent (P, R, F1),
# keyed by malicious:benign training ratio.
REFERENCE_ROWS = {
    (1, 1): (99.66, 99.28, 99.47),
    (1, 3): (99.76, 99.74, 99.75),
    (1, 6): (99.96, 99.66, 99.81),
    (1, 10): (99.76, 99.42, 99.59),
    (1, 16): (99.84, 99.00, 99.42),
    (1, 24): (99.78, 99.34, 99.56),
    (1, 50): (99.90, 98.34, 99.11),
    (1, 100): (99.98, 97.30, 98.62),
}
PAPER_RATIOS = tuple(r for _, r in REFERENCE_ROWS)


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    ratio_mal: int = 1
    ratio_ben: int = 1
    rows: int = 20
    cols: int = 40
    flow_size: int = 3
    repeats: int = 10
    seed: int = 42
    test_per_class: int = 200
    train_mal: int | None = None  # None -> as many as the pool allows
    val_fraction: float = 0.1
    name: str = ""

    def __post_init__(self):
        if self.ratio_mal <= 0 or self.ratio_ben <= 0:
            raise ValueError("scenario ratios must be positive")
        if self.repeats < 1 or self.test_per_class < 1:
            raise ValueError("repeats and test_per_class must be >= 1")

    @property
    def label(self) -> str:
        return self.name or f"{self.ratio_mal}:{self.ratio_ben}"

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(rows=self.rows, cols=self.cols, flow_size=self.flow_size)


@dataclass
class Split:
    repeat: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray  # indices into the test pool (the training pool unless cross-corpus)


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


@dataclass(frozen=True)
class PointMetrics:
    P: float
    R: float
    F: float
    FPR: float
    TPR: float
    beta: float = 1.0


def _pool_labels(pool) -> np.ndarray:
    labels = pool.labels() if hasattr(pool, "labels") else [s.label for s in pool]
    return np.array([l is Label.MALICIOUS for l in labels]), np.array([l is Label.BENIGN for l in labels])


def build_scenario(pool, sc: Scenario, test_pool=None) -> list[Split]:
    """Per-repeat disjoint train/val/test index splits.

    The test split is balanced 1:1; train+val follow the scenario ratio and
    validation is a stratified ``val_fraction`` of that portion.
    """
    mal, ben = _pool_labels(pool)
    mal_idx, ben_idx = np.flatnonzero(mal), np.flatnonzero(ben)
    cross = test_pool is not None
    if cross:
        tmal, tben = _pool_labels(test_pool)
        tmal_idx, tben_idx = np.flatnonzero(tmal), np.flatnonzero(tben)
        if min(len(tmal_idx), len(tben_idx)) < sc.test_per_class:
            raise InsufficientData(
                f"test pool needs {sc.test_per_class} per class, has {len(tmal_idx)} malicious / {len(tben_idx)} benign")
    test_take = 0 if cross else sc.test_per_class
    avail_mal, avail_ben = len(mal_idx) - test_take, len(ben_idx) - test_take
    if sc.train_mal is None:
        n_mal = min(avail_mal, (avail_ben * sc.ratio_mal) // sc.ratio_ben)
    else:
        n_mal = sc.train_mal
    n_ben = (n_mal * sc.ratio_ben) // sc.ratio_mal
    need_mal, need_ben = n_mal + test_take, n_ben + test_take
    if n_mal < 2 or need_mal > len(mal_idx) or need_ben > len(ben_idx):
        raise InsufficientData(
            f"scenario {sc.label} needs {max(need_mal, test_take + 2)} malicious / {need_ben} benign, "
            f"pool has {len(mal_idx)} malicious / {len(ben_idx)} benign")
    v_mal = max(1, round(sc.val_fraction * n_mal))
    v_ben = max(1, round(sc.val_fraction * n_ben))
    splits = []
    for r in range(sc.repeats):
        rng = np.random.default_rng(sc.seed + r)
        pm, pb = rng.permutation(mal_idx), rng.permutation(ben_idx)
        if cross:
            test = np.concatenate([rng.permutation(tmal_idx)[:sc.test_per_class],
                                   rng.permutation(tben_idx)[:sc.test_per_class]])
        else:
            test = np.concatenate([pm[:test_take], pb[:test_take]])
        tm, tb = pm[test_take:test_take + n_mal], pb[test_take:test_take + n_ben]
        val = np.concatenate([tm[:v_mal], tb[:v_ben]])
        tr = np.concatenate([tm[v_mal:], tb[v_ben:]])
        splits.append(Split(r, np.sort(tr), np.sort(val), np.sort(test)))
    return splits


def stratified_split(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, val) index arrays with ``fraction`` of each class held out (at least one)."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    tr, va = [], []
    for cls in (Label.MALICIOUS, Label.BENIGN):
        idx = rng.permutation([i for i, l in enumerate(labels) if l is cls])
        if len(idx) < 2:
            raise InsufficientData(f"need at least 2 {cls.value} samples, have {len(idx)}")
        k = max(1, round(fraction * len(idx)))
        va.append(idx[:k])
        tr.append(idx[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


def compute_metrics(counts: ConfusionCounts, beta: float = 1.0) -> PointMetrics:
    if counts.total == 0:
        raise ValueError("empty test set")
    if counts.TP + counts.FN == 0:
        raise ValueError("recall undefined: no malicious samples in test set")
    P = counts.TP / (counts.TP + counts.FP) if counts.TP + counts.FP else 0.0
    R = counts.TP / (counts.TP + counts.FN)
    b2 = beta * beta
    F = (1 + b2) * P * R / (b2 * P + R) if P + R else 0.0
    FPR = counts.FP / (counts.TN + counts.FP) if counts.TN + counts.FP else 0.0
    return PointMetrics(P, R, F, FPR, R, beta)


def metrics_from_pr(P: float, R: float, beta: float = 1.0) -> tuple[float, float]:
    """(F_beta, FPR) implied by precision and recall on a 1:1 test set."""
    b2 = beta * beta
    return (1 + b2) * P * R / (b2 * P + R), R * (1 - P) / P


def count_confusion(p_mal: np.ndarray, is_mal: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    pred = np.asarray(p_mal) > threshold
    is_mal = np.asarray(is_mal, dtype=bool)
    return ConfusionCounts(int((pred & is_mal).sum()), int((pred & ~is_mal).sum()),
                           int((~pred & ~is_mal).sum()), int((~pred & is_mal).sum()))


def recount(p_mal, is_mal, threshold: float = 0.5) -> ConfusionCounts:
    """Independent per-sample recount through the detection rule."""
    tp = fp = tn = fn = 0
    for p, m in zip(p_mal, is_mal):
        verdict = predict(float(p), threshold)
        if verdict is Label.MALICIOUS:
            tp, fp = tp + bool(m), fp + (not m)
        else:
            fn, tn = fn + bool(m), tn + (not m)
    return ConfusionCounts(tp, fp, tn, fn)


def roc_sweep(scores, is_mal) -> tuple[list[tuple[float, float, float]], float]:
    """ROC points (FPR, TPR, lambda) sorted by FPR, and the trapezoid AUC."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(is_mal, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one sample of each class")
    lams = np.unique(np.concatenate([s, [0.0, 1.0]]))
    if lams[0] >= s.min():
        lams = np.concatenate([[lams[0] - 1.0], lams])
    # counts of scores strictly above each lambda
    order = np.sort(s[y]), np.sort(s[~y])
    tp = n_pos - np.searchsorted(order[0], lams, side="right")
    fp = n_neg - np.searchsorted(order[1], lams, side="right")
    pts = sorted(zip(fp / n_neg, tp / n_pos, lams), key=lambda t: (t[0], t[1], -t[2]))
    fpr = np.array([p[0] for p in pts])
    tpr = np.array([p[1] for p in pts])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return [(float(a), float(b), float(c)) for a, b, c in pts], auc


def evaluate_predictions(p_mal, is_mal, threshold: float = 0.5, beta: float = 1.0) -> dict:
    """Point metrics + ROC for one test set, counting confusion two ways."""
    counts = count_confusion(p_mal, is_mal, threshold)
    if recount(p_mal, is_mal, threshold) != counts:
        raise RuntimeError("confusion recount disagrees with vectorised count")
    m = compute_metrics(counts, beta)
    roc, auc = roc_sweep(p_mal, is_mal)
    row = {"TP": counts.TP, "FP": counts.FP, "TN": counts.TN, "FN": counts.FN,
           "P": m.P, "R": m.R, "F": m.F, "FPR": m.FPR, "TPR": m.TPR, "AUC": auc}
    if counts.TP + counts.FN == counts.TN + counts.FP and m.P > 0:
        residual = abs(m.FPR - m.R * (1 - m.P) / m.P)
        if residual > 1e-9:
            raise RuntimeError(f"balanced-test FPR identity violated by {residual}")
        row["fpr_identity_residual"] = residual
    return row, roc


@dataclass
class MetricsReport:
    scenario: dict
    mode: str
    model_config: dict
    config_hash: str
    fingerprints: dict
    repeats: list[dict] = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    roc: list = field(default_factory=list)
    auc: float = float("nan")
    histories: list = field(default_factory=list)
    reference: dict | None = None

    def to_json(self) -> dict:
        d = {"schema": REPORT_SCHEMA, **asdict(self)}
        if d["reference"] is None:
            d.pop("reference")
        return d


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def corpus_fingerprint(pool) -> str:
    h = hashlib.sha256()
    for i in range(len(pool)):
        s = pool[i]
        h.update(f"{s.flow_id}:{s.label.value}\n".encode())
    return h.hexdigest()[:16]


class _Subset:
    """Index view over a pool without copying samples."""

    def __init__(self, pool, idx):
        self.pool, self.idx = pool, idx

    def __len__(self):
        return len(self.idx)

    def __getitem__(self, i):
        return self.pool[int(self.idx[i])]

    def labels(self):
        if hasattr(self.pool, "labels"):
            every = self.pool.labels()
            return [every[int(i)] for i in self.idx]
        return [self.pool[int(i)].label for i in self.idx]


def _mean_rows(rows: list[dict]) -> dict:
    keys = [k for k in ("P", "R", "F", "FPR", "TPR", "AUC") if k in rows[0]]
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def run_experiment(pool, sc: Scenario, model_cfg: ModelConfig, test_pool=None, beta: float = 1.0,
                   on_repeat: Callable[[int, dict], None] | None = None) -> MetricsReport:
    """Train and evaluate once per repeat; average the per-repeat metrics."""
    mode = "cross-corpus" if test_pool is not None else "in-corpus"
    first = pool[0]
    if first.req_matrices.shape != (sc.flow_size, sc.rows, sc.cols):
        raise ValueError(f"pool samples have shape {first.req_matrices.shape}, scenario wants "
                         f"{(sc.flow_size, sc.rows, sc.cols)}")
    model_cfg = model_cfg.replace(rows=sc.rows, cols=sc.cols, flow_size=sc.flow_size)
    fps = {"train_pool": corpus_fingerprint(pool)}
    if test_pool is not None:
        fps["test_pool"] = corpus_fingerprint(test_pool)
    report = MetricsReport(asdict(sc), mode, asdict(model_cfg), config_hash(asdict(sc), asdict(model_cfg)), fps)
    tpool = pool if test_pool is None else test_pool
    all_p, all_y = [], []
    for split in build_scenario(pool, sc, test_pool):
        if test_pool is None:
            ids_train = {pool[int(i)].flow_id for i in split.train} | {pool[int(i)].flow_id for i in split.val}
            if ids_train & {pool[int(i)].flow_id for i in split.test}:
                raise RuntimeError("train and test splits share flows")
        cfg = model_cfg.replace(seed=sc.seed + split.repeat)
        net, hist = train(_Subset(pool, split.train), _Subset(pool, split.val), cfg)
        test = _Subset(tpool, split.test)
        p_mal = net.predict_proba(test)
        is_mal = np.array([l is Label.MALICIOUS for l in test.labels()])
        row, _ = evaluate_predictions(p_mal, is_mal, beta=beta)
        row.update(repeat=split.repeat, epochs=len(hist), n_train=len(split.train),
                   n_val=len(split.val), n_test=len(split.test))
        report.repeats.append(row)
        report.histories.append([asdict(h) for h in hist])
        all_p.append(p_mal)
        all_y.append(is_mal)
        log.info("%s repeat %d: P=%.4f R=%.4f F=%.4f FPR=%.4f", sc.label, split.repeat,
                 row["P"], row["R"], row["F"], row["FPR"])
        if on_repeat:
            on_repeat(split.repeat, row)
    report.mean = _mean_rows(report.repeats)
    report.roc, report.auc = roc_sweep(np.concatenate(all_p), np.concatenate(all_y))
    ref = REFERENCE_ROWS.get((sc.ratio_mal, sc.ratio_ben))
    if ref is not None:
        report.reference = {"P": ref[0], "R": ref[1], "F1": ref[2]}
    return report


def write_report(report: MetricsReport, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "roc": out_dir / f"{stem}.roc.csv"}
    paths["json"].write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    with open(paths["roc"], "w", newline="") as fh:
        fh.write(f"# config_hash={report.config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "lambda"])
        w.writerows([(repr(a), repr(b), repr(c)) for a, b, c in report.roc])
    return paths


def comparison_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    """Measured mean P/R/F1 next to the published rows, percent."""
    rows = []
    for r in reports:
        sc = r.scenario
        ref = REFERENCE_ROWS.get((sc["ratio_mal"], sc["ratio_ben"]))
        row = {"ratio": f"{sc['ratio_mal']}:{sc['ratio_ben']}",
               "P": 100 * r.mean["P"], "R": 100 * r.mean["R"], "F1": 100 * r.mean["F"],
               "FPR": 100 * r.mean["FPR"]}
        if ref:
            row.update(ref_P=ref[0], ref_R=ref[1], ref_F1=ref[2])
        rows.append(row)
    return rows


# -- presets -------------------------------------------------------------------

def _robustness(r: int, **kw) -> Scenario:
    return Scenario(ratio_mal=1, ratio_ben=r, name=f"robustness-1to{r}", **kw)


PRESETS: dict[str, list[Scenario]] = {
    **{f"robustness-1to{r}": [_robustness(r)] for r in PAPER_RATIOS},
    "paper-robustness": [_robustness(r) for r in PAPER_RATIOS],
    "packet-400": [Scenario(rows=10, cols=40, name="packet-400")],
    "packet-800": [Scenario(name="packet-800")],
    "flow-6": [Scenario(flow_size=6, name="flow-6")],
    "generalization": [Scenario(name="generalization-1to1"),
                       Scenario(ratio_ben=10, name="generalization-1to10")],
    "smoke": [Scenario(repeats=1, test_per_class=20, name="smoke")],
}


def preset(name: str, **overrides) -> list[Scenario]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return [replace(sc, **overrides) for sc in PRESETS[name]]


# -- scaling benchmark -------------------------------------------------------------

@dataclass
class TimingRow:
    n: int
    seconds_per_epoch: float
    peak_bytes: int
    batch_size: int


def _measure_epoch(store_path: Path, cfg: ModelConfig, trials: int) -> tuple[float, int]:
    times = []
    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    with SampleStore(store_path) as store:
        net = HSTFNet(cfg)
        opt = Adam(net.params, cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        for _ in range(trials):
            t0 = time.perf_counter()
            train_epoch(net, opt, store, rng)
            times.append(time.perf_counter() - t0)
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    return min(times), peak


def timing_benchmark(cfg: ModelConfig, sizes: Sequence[int], workdir: str | Path | None = None,
                     trials: int = 2, seed: int = 42) -> list[TimingRow]:
    """Seconds per training epoch and peak traced memory for each pool size.

    Samples are streamed from a binary store so memory should track the batch
    size, not N.
    """
    from .synth import generate_corpus

    fcfg = FeatureConfig(rows=cfg.rows, cols=cfg.cols, flow_size=cfg.flow_size)
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for n in sizes:
            path = Path(tmp) / f"pool-{n}.bin"
            flows = generate_corpus(n // 2, n - n // 2, "high", seed)
            write_samples_bin(path, flows_to_samples(flows, fcfg), fcfg)
            del flows
            sec, peak = _measure_epoch(path, cfg, trials)
            rows.append(TimingRow(n, sec, peak, cfg.batch_size))
            log.info("N=%d: %.3f s/epoch, peak %d bytes", n, sec, peak)
    return rows


def write_timing(rows: Sequence[TimingRow], path: str | Path, cfg_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if cfg_hash:
            fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "seconds_per_epoch", "peak_bytes", "batch_size", "time_ratio_vs_prev"])
        prev = None
        for r in rows:
            ratio = "" if prev is None else f"{r.seconds_per_epoch / prev.seconds_per_epoch:.4f}"
            w.writerow([r.n, f"{r.seconds_per_epoch:.6f}", r.peak_bytes, r.batch_size, ratio])
            prev = r
