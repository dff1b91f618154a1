"""Command line entry point: ``hstf <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import evaluation, features, ingest, net, synth

log = logging.getLogger("hstf")

DEFAULT_SEED = 42


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------------

def read_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError("E_CONFIG", f"config file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            try:
                import tomllib as tomli
            except ModuleNotFoundError:  # Python 3.10
                import tomli
            return tomli.loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise CliError("E_CONFIG", f"cannot parse config {path}: {exc}") from None


def _pick(cls, cfg: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise CliError("E_USAGE", f"missing {what} path")
    p = Path(path)
    if not p.is_file():
        raise CliError("E_IO", f"{what} not found: {path}")
    return p


def is_sample_file(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(64)
    return head.startswith(features.BIN_MAGIC) or b'"schema":"hstf-sample/v1"' in head \
        or (path.stat().st_size > 0 and b"hstf-sample/v1" in head)


def read_flows(path: Path, fmt: str | None, labels: str | None = None,
               stats: ingest.ParseStats | None = None) -> list[ingest.Flow]:
    stats = stats if stats is not None else ingest.ParseStats()
    fmt = fmt or "auto"
    with open(path, "rb") as fh:
        head = fh.read(4)
        fh.seek(0)
        if fmt == "auto" and not head:
            return []
        if fmt == "auto" and ingest.sniff_format(head) == "flow-jsonl" and head[:1] not in (b"{", b"\n", b" "):
            raise CliError("E_CAPTURE", f"{path}: not a pcap or flow-jsonl capture")
        try:
            flows = ingest.reassemble(ingest.parse_capture(fh, fmt, stats))
        except ingest.CaptureError as exc:
            raise CliError("E_CAPTURE", f"{path}: {exc}") from None
    if labels:
        flows = ingest.load_labels(flows, labels)
    return flows


def load_pool(path: Path, labels: str | None, fcfg: features.FeatureConfig, fmt: str | None = None):
    if is_sample_file(path):
        return features.load_samples(path)
    flows = read_flows(path, fmt, labels)
    return features.flows_to_samples(flows, fcfg)


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc", "val_recall", "val_precision", "val_f1", "val_loss"])
        for h in history:
            w.writerow([h.epoch, f"{h.loss:.8f}", f"{h.acc:.6f}", f"{h.val_recall:.6f}",
                        f"{h.val_precision:.6f}", f"{h.val_f1:.6f}", f"{h.val_loss:.8f}"])


# -- subcommands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = args.output or "synthetic"
    if args.config:
        profile = synth.GenProfile.from_mapping({**read_config(args.config), "seed": args.seed})
        flows = synth.generate(profile, args.count)
    else:
        n_mal = args.malicious if args.malicious is not None else args.count // 2
        n_ben = args.benign if args.benign is not None else args.count - n_mal
        flows = synth.generate_corpus(n_mal, n_ben, args.separability, args.seed)
    jsonl, labels = synth.write_corpus(out, flows)
    n_mal = sum(f.label is ingest.Label.MALICIOUS for f in flows)
    print(f"wrote {len(flows)} flows ({n_mal} malicious, {len(flows) - n_mal} benign) to {jsonl}, labels {labels}")
    if args.pcap:
        ingest.write_pcap(args.pcap, ((frag, m, ingest.message_bytes(m))
                                      for f in flows for frag, m in ingest.flow_fragments(f)))
        print(f"wrote pcap {args.pcap}")
    return 0


def cmd_extract(args) -> int:
    src = _require_file(args.input, "capture")
    cfg = read_config(args.config)
    # dataset builds drop over-long flows unless told otherwise
    cfg["overflow_policy"] = args.policy or cfg.get("overflow_policy", "discard")
    fcfg = features.FeatureConfig.from_mapping(cfg)
    stats = ingest.ParseStats()
    flows = read_flows(src, None if args.format in (None, "auto") else args.format, args.labels, stats)
    out = Path(args.output or src.with_suffix(".samples.jsonl"))
    rejected: list[str] = []
    samples = features.flows_to_samples(flows, fcfg, rejected)
    kept = {s.flow_id for s in samples}
    with open(out.with_name(out.name + ".flows.jsonl"), "w", encoding="utf-8") as fh:
        ingest.write_flows_jsonl(fh, [f for f in flows if f.flow_id in kept])
    if args.binary:
        features.write_samples_bin(out, samples, fcfg)
    else:
        features.write_samples_jsonl(out, samples)
    if not flows:
        log.warning("capture %s contained no HTTP flows", src)
    truncated = sum(s.truncated for s in samples)
    print(f"flows={len(flows)} samples={len(samples)} truncated={truncated} discarded={len(rejected)} "
          f"messages={stats.messages} skipped_non_tcp={stats.skipped_non_tcp} "
          f"skipped_non_http={stats.skipped_non_http} skipped_malformed={stats.skipped_malformed}")
    return 0


def cmd_train(args) -> int:
    src = _require_file(args.input, "samples")
    data = features.load_samples(src)
    if len(data) == 0:
        raise CliError("E_DATA", f"{src}: no samples")
    first = data[0]
    n, rows, cols = first.req_matrices.shape
    cfg = read_config(args.config)
    mcfg = net.ModelConfig.from_mapping({**_pick(net.ModelConfig, cfg), "rows": rows, "cols": cols,
                                         "flow_size": n, "seed": args.seed})
    labels = data.labels() if hasattr(data, "labels") else [s.label for s in data]
    if any(l is ingest.Label.UNLABELED for l in labels):
        raise CliError("E_DATA", f"{src}: corpus contains unlabeled samples")
    tr_idx, va_idx = evaluation.stratified_split(labels, 0.1, args.seed)
    model, history = net.train(evaluation._Subset(data, tr_idx), evaluation._Subset(data, va_idx), mcfg)
    out = Path(args.output or "model.ckpt.json")
    best = max(history, key=lambda h: (h.val_f1, -h.val_loss))
    meta = {"seed": args.seed, "epochs": len(history), "best_epoch": best.epoch,
            "final_loss": history[-1].loss, "best_val_f1": best.val_f1, "best_val_loss": best.val_loss,
            "n_train": len(tr_idx), "n_val": len(va_idx),
            "corpus": evaluation.corpus_fingerprint(data)}
    model.save(out, meta, sidecar=args.sidecar)
    hist_path = out.with_name(out.name + ".history.csv")
    _write_history(hist_path, history)
    if args.plots:
        from .plotting import plot_history
        plot_history({"train": [asdict(h) for h in history]}, out.with_name(out.name + ".history.png"))
    print(f"checkpoint={out} epochs={len(history)} best_epoch={best.epoch} best_val_f1={best.val_f1:.4f} "
          f"sha256={net.checkpoint_hash(out)}")
    return 0


def cmd_detect(args) -> int:
    src = _require_file(args.input, "input")
    ckpt = _require_file(args.checkpoint, "checkpoint")
    if not 0 <= args.lam <= 1:
        raise CliError("E_USAGE", f"--lambda {args.lam} outside [0, 1]")
    model, _ = net.HSTFNet.load(ckpt)
    c = model.cfg
    fcfg = features.FeatureConfig(rows=c.rows, cols=c.cols, flow_size=c.flow_size,
                                  overflow_policy=args.policy or "truncate")
    if args.format == "samples" or (args.format in (None, "auto") and is_sample_file(src)):
        samples = features.load_samples(src)
    else:
        samples = features.flows_to_samples(
            read_flows(src, None if args.format in (None, "auto") else args.format, args.labels), fcfg)
    if len(samples) and samples[0].req_matrices.shape != (c.flow_size, c.rows, c.cols):
        raise CliError("E_CONFIG", f"samples shaped {samples[0].req_matrices.shape} do not match checkpoint "
                                   f"{(c.flow_size, c.rows, c.cols)}")
    p_mal = model.predict_proba(samples)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    counts = {"Malicious": 0, "Benign": 0}
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["flow_id", "p_malicious", "verdict", "truncated"])
        for i in range(len(samples)):
            verdict = "Malicious" if net.predict(float(p_mal[i]), args.lam) is ingest.Label.MALICIOUS else "Benign"
            counts[verdict] += 1
            w.writerow([samples[i].flow_id, f"{p_mal[i]:.6f}", verdict, int(samples[i].truncated)])
    finally:
        if args.output:
            out.close()
    print(f"flows={len(samples)} malicious={counts['Malicious']} benign={counts['Benign']} lambda={args.lam}",
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    try:
        scenarios = evaluation.preset(args.preset or "", repeats=args.repeats, test_per_class=args.test_per_class,
                                      seed=args.seed, train_mal=args.train_mal)
    except KeyError as exc:
        raise CliError("E_PRESET", str(exc.args[0])) from None
    src = _require_file(args.input, "training pool")
    test_src = _require_file(args.test_input, "test pool") if args.test_input else None
    cfg = read_config(args.config)
    mcfg = net.ModelConfig.from_mapping({**_pick(net.ModelConfig, cfg), "seed": args.seed})
    if args.max_epochs:
        mcfg = mcfg.replace(max_epochs=args.max_epochs)
    out_dir = Path(args.output or "eval-out")
    reports = []
    pools: dict = {}
    for sc in scenarios:
        fcfg = sc.feature_config()
        key = (fcfg.rows, fcfg.cols, fcfg.flow_size)
        if key not in pools:
            pools[key] = (load_pool(src, args.labels, fcfg),
                          load_pool(test_src, args.test_labels, fcfg) if test_src else None)
        pool, tpool = pools[key]
        try:
            rep = evaluation.run_experiment(pool, sc, mcfg, test_pool=tpool)
        except evaluation.InsufficientData as exc:
            raise CliError("E_DATA", str(exc)) from None
        stem = sc.label.replace(":", "to")
        paths = evaluation.write_report(rep, out_dir, stem)
        if args.plots:
            from .plotting import plot_history, plot_roc
            plot_roc({sc.label: rep.roc}, out_dir / f"{stem}.roc.png", {sc.label: rep.auc})
            plot_history({f"repeat {i}": h for i, h in enumerate(rep.histories)}, out_dir / f"{stem}.history.png")
        reports.append(rep)
        m = rep.mean
        print(f"{sc.label}\tmode={rep.mode}\trepeats={len(rep.repeats)}\tP={m['P']:.4f}\tR={m['R']:.4f}\t"
              f"F1={m['F']:.4f}\tFPR={m['FPR']:.4f}\tAUC={rep.auc:.4f}\treport={paths['json']}")
    if len(reports) > 1 or args.preset == "paper-robustness":
        rows = evaluation.comparison_rows(reports)
        with open(out_dir / "comparison.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["ratio", "P", "R", "F1", "FPR", "ref_P", "ref_R", "ref_F1"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows({k: round(v, 4) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
        print("ratio\tP\tR\tF1\tpublished_P\tpublished_R\tpublished_F1")
        for r in rows:
            print(f"{r['ratio']}\t{r['P']:.2f}\t{r['R']:.2f}\t{r['F1']:.2f}\t"
                  f"{r.get('ref_P', float('nan')):.2f}\t{r.get('ref_R', float('nan')):.2f}\t"
                  f"{r.get('ref_F1', float('nan')):.2f}")
        if args.plots:
            from .plotting import plot_comparison
            plot_comparison(rows, out_dir / "comparison.png")
    return 0


def cmd_bench(args) -> int:
    cfg = read_config(args.config)
    mcfg = net.ModelConfig.from_mapping({**_pick(net.ModelConfig, cfg), "seed": args.seed})
    if args.batch_size:
        mcfg = mcfg.replace(batch_size=args.batch_size)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = evaluation.timing_benchmark(mcfg, sizes, trials=args.trials, seed=args.seed)
    out_dir = Path(args.output or "bench-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_timing(rows, out_dir / "timing.csv", evaluation.config_hash(asdict(mcfg)))
    if args.plots:
        from .plotting import plot_timing
        plot_timing(rows, out_dir / "timing.png")
    print("n\tseconds_per_epoch\tpeak_bytes")
    for r in rows:
        print(f"{r.n}\t{r.seconds_per_epoch:.4f}\t{r.peak_bytes}")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hstf", description="HTTP flow feature extraction and hybrid CNN-LSTM detection")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, plots=False):
        p.add_argument("--input")
        p.add_argument("--output")
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        if plots:
            p.add_argument("--no-plots", dest="plots", action="store_false", help="skip PNG figures")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic labeled corpus"))
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--malicious", type=int)
    p.add_argument("--benign", type=int)
    p.add_argument("--separability", choices=sorted(synth.MIMICRY), default="high")
    p.add_argument("--pcap", help="also write the corpus as a pcap file")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("extract", help="capture -> flow-jsonl + sample file"))
    p.add_argument("--format", choices=["auto", "pcap", "flow-jsonl"], default="auto")
    p.add_argument("--labels")
    p.add_argument("--policy", choices=["truncate", "discard"])
    p.add_argument("--binary", action="store_true", help="write the compact binary sample form")
    p.set_defaults(func=cmd_extract)

    p = common(sub.add_parser("train", help="train a model on a sample file"), plots=True)
    p.add_argument("--sidecar", action="store_true", help="store parameters in a binary sidecar")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("detect", help="score flows with a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--format", choices=["auto", "pcap", "flow-jsonl", "samples"], default="auto")
    p.add_argument("--policy", choices=["truncate", "discard"])
    p.add_argument("--labels")
    p.set_defaults(func=cmd_detect)

    p = common(sub.add_parser("eval", help="run an evaluation preset"), plots=True)
    p.add_argument("--preset")
    p.add_argument("--test-input", help="foreign corpus for cross-corpus evaluation")
    p.add_argument("--labels")
    p.add_argument("--test-labels")
    p.add_argument("--repeats", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--train-mal", type=int)
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("bench", help="epoch time and peak memory versus pool size"), plots=True)
    p.add_argument("--sizes", default="500,1000,2000")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--trials", type=int, default=2)
    p.set_defaults(func=cmd_bench)
    return ap


_ERROR_CODES = (
    (ingest.CaptureError, "E_CAPTURE"),
    (net.ConfigError, "E_CONFIG"),
    (evaluation.InsufficientData, "E_DATA"),
    (net.TrainingDiverged, "E_DIVERGED"),
    (net.NonFiniteActivation, "E_NONFINITE"),
    (OSError, "E_IO"),
    (ValueError, "E_INPUT"),
)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HSTF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except Exception as exc:  # map library failures to one-line codes
        for cls, c in _ERROR_CODES:
            if isinstance(exc, cls):
                code, msg = c, str(exc)
                break
        else:
            raise
    print(f"hstf: error {code}: {msg}".replace("\n", " "), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
