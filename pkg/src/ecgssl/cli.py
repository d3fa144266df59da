"""Command-line entry point: ``ecgssl <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shlex
import socket
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autograd import NumericError
from .data import DataError, load_manifest, load_segments, write_dataset
from .features import FeaturePipeline, cosine_matrix, feature_ids
from .metrics import (DEFAULT_REMAP, SYNTH_REMAP, MetricError, auroc_binary, auroc_macro, challenge_metric,
                      load_weights, parse_remap, prf1, remap_binary, remap_labels)
from .model import CheckpointError, load_checkpoint
from .pairing import ANCHOR, assemble_pairs
from .peaks import detect_rpeaks
from .synth import RhythmClass, SynthError, synth_records
from .trainer import (ENV_PREFIX, FINETUNE_LOG_COLUMNS, PRETRAIN_LOG_COLUMNS, ConfigError, FeatureCache,
                      TrainConfig, batches, build_corpus, finetune, finetune_checkpoint, flat_fields, from_flat,
                      label_matrix, layered_config, log_csv, predict_scores, pretrain, pretrain_checkpoint, to_flat)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunReport:
    command: list[str]
    config: dict
    seed: int
    outputs: list[str] = field(default_factory=list)
    metrics: list[tuple[str, object]] = field(default_factory=list)

    def render(self) -> str:
        lines = ["[run]", f"command = {shlex.join(self.command)}", f"seed = {self.seed}", "", "[config]"]
        lines += [f"{k} = {v}" for k, v in sorted(self.config.items())]
        lines += ["", "[outputs]"] + list(self.outputs)
        lines += ["", "[metrics]"] + [f"{k} = {_fmt(v)}" for k, v in self.metrics]
        return "\n".join(lines) + "\n"

    def write(self, path: Path, wall_s: float) -> None:
        missing = [o for o in self.outputs if not Path(o).exists()]
        if missing:
            raise DataError(f"declared output missing: {missing[0]}")
        path.write_text(self.render(), encoding="utf-8")
        timing = {"wall_time_s": round(wall_s, 3), "finished_at": datetime.now(timezone.utc).isoformat(),
                  "host": socket.gethostname()}
        path.with_suffix(path.suffix + ".timing.json").write_text(json.dumps(timing, indent=1) + "\n",
                                                                  encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---- argument plumbing ----------------------------------------------------

def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(sp: argparse.ArgumentParser, train: bool = False) -> None:
    note = " (default: {})" if train else ""
    sp.add_argument("--seed", type=int, default=None if train else 0,
                    help="master random seed" + note.format(0))
    sp.add_argument("--threads", type=int, default=None if train else 1,
                    help="worker threads; outputs do not depend on it" + note.format(1))
    sp.add_argument("--report", type=Path, default=None,
                    help="run report path (default: next to the main output)")


_DERIVED = {"input_leads": "ignored; taken from the data",
            "input_samples": "ignored; half_s x sampling rate of the data"}


def _train_flags(sp: argparse.ArgumentParser, defaults: TrainConfig) -> None:
    sp.add_argument("--config", type=Path, default=None, help="flat 'key = value' config file (default: none)")
    flat = to_flat(defaults)
    for key, (_, kind, _) in flat_fields().items():
        if key in ("seed", "threads"):
            continue
        names = [f"--{key}"] + ([f"--{key.replace('_', '-')}"] if "_" in key else [])
        sp.add_argument(*names, dest=key, type=_bool if kind is bool else kind, default=None,
                        metavar=kind.__name__.upper(), help=_DERIVED.get(key, f"(default: {flat[key]})"))


def _apply_env(parser: argparse.ArgumentParser, environ) -> None:
    """Environment defaults ``ECGSSL_<DEST>``; explicit flags still win."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub, environ)
            continue
        if not action.option_strings or action.dest in ("help", "config"):
            continue
        val = environ.get(ENV_PREFIX + action.dest.upper())
        if val is not None:
            action.default = val


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="ecgssl", description="Physiology-aware self-supervised ECG representation learning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a labelled synthetic dataset", formatter_class=fmt)
    sp.add_argument("--classes", default=",".join(c.value for c in RhythmClass), help="comma-separated rhythms")
    sp.add_argument("--per-class", type=int, default=128, help="records per class")
    sp.add_argument("--fs", type=float, default=500.0, help="sampling rate in Hz")
    sp.add_argument("--duration", type=float, default=10.0, help="record length in seconds")
    sp.add_argument("--leads", type=int, default=1, help="number of leads")
    sp.add_argument("--noise-sd", default="0.05", help="noise level(s) in mV; a comma list is sampled per record")
    sp.add_argument("--prefix", default="", help="prefix for record ids")
    sp.add_argument("--out", type=Path, required=True, help="output dataset directory")
    _common(sp)

    sp = sub.add_parser("peaks", help="detect R-peaks for every segment", formatter_class=fmt)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--lead", type=int, default=0, help="reference lead")
    sp.add_argument("--window-s", type=float, default=10.0, help="segment length in seconds")
    sp.add_argument("--out", type=Path, required=True, help="output TSV (segment id, peak sample indices)")
    _common(sp)

    sp = sub.add_parser("extract-features", help="physiological feature table", formatter_class=fmt)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--window-s", type=float, default=10.0, help="segment length in seconds")
    sp.add_argument("--out", type=Path, required=True, help="output CSV; invalid features are left empty")
    _common(sp)

    sp = sub.add_parser("fit-pca", help="fit feature scaling + PCA", formatter_class=fmt)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--window-s", type=float, default=10.0, help="segment length in seconds")
    sp.add_argument("--k", type=int, default=50, help="number of components")
    sp.add_argument("--out", type=Path, required=True, help="output model path")
    _common(sp)

    sp = sub.add_parser("pairs-audit", help="positive/negative set sizes for one epoch",
                        formatter_class=argparse.HelpFormatter)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--pca", type=Path, default=None, help="fitted feature model (default: fit on --data)")
    sp.add_argument("--out", type=Path, required=True, help="output CSV")
    _train_flags(sp, TrainConfig())
    _common(sp, train=True)

    sp = sub.add_parser("pretrain", help="self-supervised pretraining", formatter_class=argparse.HelpFormatter)
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--pca", type=Path, default=None, help="fitted feature model (default: fit on --data)")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")
    sp.add_argument("--log", type=Path, default=None, help="log CSV (default: <out>.log.csv)")
    _train_flags(sp, TrainConfig())
    _common(sp, train=True)

    sp = sub.add_parser("finetune", help="supervised finetuning / linear probe",
                        formatter_class=argparse.HelpFormatter)
    sp.add_argument("--checkpoint", type=Path, required=True, help="pretrained checkpoint")
    sp.add_argument("--data", type=Path, required=True, help="labelled dataset directory")
    sp.add_argument("--out", type=Path, required=True, help="finetuned checkpoint path")
    sp.add_argument("--log", type=Path, default=None, help="log CSV (default: <out>.log.csv)")
    _train_flags(sp, TrainConfig.for_finetune())
    _common(sp, train=True)

    sp = sub.add_parser("eval", help="score a finetuned checkpoint", formatter_class=fmt)
    sp.add_argument("--checkpoint", type=Path, required=True, help="finetuned checkpoint")
    sp.add_argument("--data", type=Path, required=True, help="labelled dataset directory")
    sp.add_argument("--out", type=Path, required=True, help="metrics CSV")
    sp.add_argument("--weights", type=Path, default=None, help="challenge weight matrix CSV (optional)")
    sp.add_argument("--threshold", type=float, default=0.5, help="decision threshold on sigmoid scores")
    sp.add_argument("--remap", default="auto",
                    help="binary AFib remap, e.g. 'afib=AF,AFib;normal=SR,SA,SB,STach'; 'auto' picks a known table")
    sp.add_argument("--scores", type=Path, default=None, help="also write per-record scores CSV")
    _common(sp)

    sp = sub.add_parser("plot", help="SVG line chart of a log CSV", formatter_class=fmt)
    sp.add_argument("--log", type=Path, required=True, help="input CSV with an epoch column")
    sp.add_argument("--out", type=Path, required=True, help="output SVG")
    _common(sp)
    return p


# ---- subcommands -------------------------------------------------------------

def _segments(data: Path, window_s: float):
    manifest = load_manifest(data)
    segs = load_segments(manifest, window_s)
    if not segs:
        raise DataError(f"{data}: no complete {window_s:g}-s segments")
    return manifest, segs


def cmd_synth(a, rep: RunReport) -> None:
    classes = [c.strip() for c in a.classes.split(",") if c.strip()]
    noise = [float(v) for v in a.noise_sd.split(",")]
    recs = synth_records(classes, a.per_class, a.seed, a.fs, a.duration, a.leads,
                         noise[0] if len(noise) == 1 else noise, a.prefix)
    vocab = [RhythmClass(c).value for c in classes]
    manifest = write_dataset(a.out, recs, vocab)
    rep.outputs += [str(manifest), str(a.out / "labels.txt")]
    rep.metrics.append(("records", len(recs)))


def cmd_peaks(a, rep: RunReport) -> None:
    _, segs = _segments(a.data, a.window_s)
    rows = []
    for s in segs:
        if not 0 <= a.lead < s.n_leads:
            raise DataError(f"segment {s.id}: lead {a.lead} out of range")
        r = detect_rpeaks(s.data, s.fs_hz, a.lead)
        rows.append(f"{s.id}\t{','.join(str(int(v)) for v in r)}\n")
    a.out.write_text("segment_id\trpeaks\n" + "".join(rows), encoding="utf-8")
    rep.outputs.append(str(a.out))
    rep.metrics.append(("segments", len(segs)))


def cmd_extract_features(a, rep: RunReport) -> None:
    _, segs = _segments(a.data, a.window_s)
    prepped = FeatureCache().fill(segs, a.threads)
    ids = feature_ids(segs[0].n_leads)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["segment_id"] + ids)
    valid = 0
    for s, (_, fv) in zip(segs, prepped):
        if fv.feature_ids != ids:
            raise DataError(f"segment {s.id}: lead count differs from the first segment")
        wr.writerow([s.id] + [repr(float(v)) if ok else "" for v, ok in zip(fv.values, fv.valid)])
        valid += fv.valid_count
    a.out.write_text(buf.getvalue(), encoding="utf-8")
    rep.outputs.append(str(a.out))
    rep.metrics += [("segments", len(segs)), ("mean_valid_features", valid / len(segs))]


def cmd_fit_pca(a, rep: RunReport) -> None:
    _, segs = _segments(a.data, a.window_s)
    vectors = [fv for _, fv in FeatureCache().fill(segs, a.threads)]
    pipe = FeaturePipeline.fit(vectors, a.k)
    pipe.save(a.out)
    rep.outputs += [str(a.out), f"{a.out}.features.txt", f"{a.out}.stats.csv"]
    ev = pipe.pca.explained_variance
    rep.metrics += [("k", pipe.pca.k), ("degenerate_components", pipe.pca.degenerate),
                    ("explained_variance_total", float(ev.sum()))]


def _train_cfg(a, base: TrainConfig) -> TrainConfig:
    flags = {k: getattr(a, k) for k in flat_fields() if hasattr(a, k)}
    return layered_config(base, a.config, {}, flags)


def _pipeline(a):
    return FeaturePipeline.load(a.pca) if a.pca else None


def cmd_pairs_audit(a, rep: RunReport) -> None:
    cfg = _train_cfg(a, TrainConfig())
    rep.config = to_flat(cfg)
    _, segs = _segments(a.data, cfg.window_s)
    corpus = build_corpus(segs, cfg, pipeline=_pipeline(a))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["batch", "anchor_id", "positives", "feature_positives", "negatives", "feature_purity"])
    n_pos, purity = [], []
    edges = np.linspace(-1.0, 1.0, 9)
    hist = np.zeros(len(edges) - 1, dtype=np.int64)
    for b, idx in enumerate(batches(len(corpus), cfg.batch_size, cfg.seed, 1)):
        sims = cosine_matrix(corpus.reduced[idx])
        off = sims[~np.eye(len(idx), dtype=bool)]
        hist += np.histogram(np.clip(off, -1.0, 1.0), edges)[0]
        for ps in assemble_pairs(corpus.reduced[idx], cfg.pairing):
            ps.check()
            feat = [j for kind, j in ps.positives if kind == ANCHOR]
            mine = corpus.labels[idx[ps.anchor_index]]
            pur = ""
            if feat and mine:
                pur = float(np.mean([corpus.labels[idx[j]] == mine for j in feat]))
                purity.append(pur)
            wr.writerow([b, corpus.ids[idx[ps.anchor_index]], len(ps.positives), len(feat), len(ps.negatives),
                         _fmt(pur) if pur != "" else ""])
            n_pos.append(len(feat))
    a.out.write_text(buf.getvalue(), encoding="utf-8")
    rep.outputs.append(str(a.out))
    rep.metrics += [("anchors", len(n_pos)), ("mean_feature_positives", float(np.mean(n_pos))),
                    ("mean_feature_purity", float(np.mean(purity)) if purity else "n/a")]
    rep.metrics += [(f"sim_hist[{lo:+.2f},{hi:+.2f})", int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], hist)]


def cmd_pretrain(a, rep: RunReport) -> None:
    cfg = _train_cfg(a, TrainConfig())
    rep.config = to_flat(cfg)
    _, segs = _segments(a.data, cfg.window_s)
    res = pretrain(segs, cfg, pipeline=_pipeline(a))
    log_path = a.log or a.out.with_name(a.out.name + ".log.csv")
    a.out.write_bytes(pretrain_checkpoint(res, cfg))
    log_path.write_text(log_csv(res.log, PRETRAIN_LOG_COLUMNS), encoding="utf-8")
    rep.outputs += [str(a.out), str(log_path)]
    if res.log:
        last = res.log[-1]
        rep.metrics += [(k, last[k]) for k in PRETRAIN_LOG_COLUMNS[2:]]
    rep.metrics.append(("parameters", res.params.count()))


def cmd_finetune(a, rep: RunReport) -> None:
    cfg = _train_cfg(a, TrainConfig.for_finetune())
    rep.config = to_flat(cfg)
    enc, params, _ = load_checkpoint(a.checkpoint)
    manifest, segs = _segments(a.data, cfg.window_s)
    res = finetune(params, enc, segs, manifest.label_vocabulary, cfg)
    log_path = a.log or a.out.with_name(a.out.name + ".log.csv")
    a.out.write_bytes(finetune_checkpoint(res, cfg))
    log_path.write_text(log_csv(res.log, FINETUNE_LOG_COLUMNS), encoding="utf-8")
    rep.outputs += [str(a.out), str(log_path)]
    if res.log:
        rep.metrics.append(("loss_bce", res.log[-1]["loss_bce"]))


def _pick_remap(text: str, vocab):
    if text != "auto":
        return parse_remap(text)
    for table in (DEFAULT_REMAP, SYNTH_REMAP):
        sub = {g: tuple(c for c in codes if c in vocab) for g, codes in table.items()}
        if all(sub.values()):
            return sub
    return None


def cmd_eval(a, rep: RunReport) -> None:
    enc, params, extra = load_checkpoint(a.checkpoint)
    vocab = list(extra.get("vocabulary") or [])
    if not vocab:
        raise CheckpointError(f"{a.checkpoint}: no label vocabulary; run finetune first")
    manifest = load_manifest(a.data)
    window = float(extra.get("train", {}).get("window_s", 10.0))
    segs = load_segments(manifest, window)
    if not segs:
        raise DataError(f"{a.data}: no complete segments")
    cfg = TrainConfig(threads=a.threads, window_s=window,
                      half_s=float(extra.get("train", {}).get("half_s", 5.0)))
    scores = predict_scores(params, enc, segs, cfg)
    y = label_matrix([s.labels for s in segs], [s.id for s in segs], vocab)
    rows: list[tuple[str, object]] = []
    macro = auroc_macro(scores, y)
    rows += [("auroc_macro", macro.value), ("auroc_macro_skipped_classes", len(macro.skipped))]
    table = _pick_remap(a.remap, vocab)
    if table is None:
        rows += [(m, "skipped") for m in ("auroc_binary", "precision", "recall", "f1")]
    else:
        b, _ = remap_binary(scores, vocab, table)
        yb, valid = remap_labels(y, vocab, table)
        yb, b = yb[valid], b[valid]
        try:
            rows.append(("auroc_binary", auroc_binary(b, yb)))
        except MetricError:
            rows.append(("auroc_binary", "skipped"))
        rows += list(zip(("precision", "recall", "f1"), prf1(b >= a.threshold, yb)))
    if a.weights is None:
        rows.append(("challenge_metric", "skipped"))
    else:
        w = load_weights(a.weights)
        missing = [c for c in w.classes if c not in vocab]
        if missing:
            raise MetricError(f"weights class {missing[0]!r} not in label vocabulary")
        cols = [vocab.index(c) for c in w.classes]
        rows.append(("challenge_metric", challenge_metric(scores[:, cols] >= a.threshold, y[:, cols], w)))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["metric", "value"])
    for k, v in rows:
        wr.writerow([k, _fmt(v)])
    a.out.write_text(buf.getvalue(), encoding="utf-8")
    rep.outputs.append(str(a.out))
    if a.scores:
        sb = io.StringIO()
        sw = csv.writer(sb, lineterminator="\n")
        sw.writerow(["segment_id"] + vocab)
        for s, row in zip(segs, scores):
            sw.writerow([s.id] + [repr(float(v)) for v in row])
        a.scores.write_text(sb.getvalue(), encoding="utf-8")
        rep.outputs.append(str(a.scores))
    rep.metrics += rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_svg(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """One panel per numeric series, x = epoch (or first column)."""
    xcol = header.index("epoch") if "epoch" in header else 0
    try:
        x = np.array([float(r[xcol]) for r in rows])
    except (ValueError, IndexError):
        raise DataError("plot: x column is not numeric") from None
    series = []
    for j, name in enumerate(header):
        if j == xcol or name == "step":
            continue
        try:
            series.append((name, np.array([float(r[j]) for r in rows])))
        except ValueError:
            continue
    if not series:
        raise DataError("plot: no numeric series")
    w, ph, pad = 480, 120, 40
    height = pad + len(series) * (ph + pad)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" '
           f'viewBox="0 0 {w} {height}">',
           f'<rect width="{w}" height="{height}" fill="white"/>']
    x0, x1 = float(x.min()), float(x.max())
    xs = (x - x0) / (x1 - x0) if x1 > x0 else np.full_like(x, 0.5)
    for k, (name, y) in enumerate(series):
        top = pad + k * (ph + pad)
        lo, hi = float(np.nanmin(y)), float(np.nanmax(y))
        ys = (y - lo) / (hi - lo) if hi > lo else np.full_like(y, 0.5)
        pts = " ".join(f"{pad + u * (w - 2 * pad):.2f},{top + (1 - v) * ph:.2f}" for u, v in zip(xs, ys))
        out.append(f'<rect x="{pad}" y="{top}" width="{w - 2 * pad}" height="{ph}" fill="none" stroke="#999"/>')
        out.append(f'<text x="{pad}" y="{top - 6}" font-size="12" font-family="sans-serif">'
                   f'{name} [{lo:.4g}, {hi:.4g}]</text>')
        out.append(f'<polyline fill="none" stroke="{_PALETTE[k % len(_PALETTE)]}" stroke-width="1.5" '
                   f'points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(a, rep: RunReport) -> None:
    if not a.log.is_file():
        raise DataError(f"log not found: {a.log}")
    with open(a.log, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{a.log}: empty CSV")
    a.out.write_text(render_svg(rows[0], rows[1:]), encoding="utf-8")
    rep.outputs.append(str(a.out))
    rep.metrics.append(("points", len(rows) - 1))


COMMANDS = {
    "synth": cmd_synth, "peaks": cmd_peaks, "extract-features": cmd_extract_features,
    "fit-pca": cmd_fit_pca, "pairs-audit": cmd_pairs_audit, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "eval": cmd_eval, "plot": cmd_plot,
}


def _report_path(a) -> Path:
    if a.report:
        return a.report
    out = Path(a.out)
    return out / "run_report.txt" if a.command == "synth" else out.with_name(out.name + ".report.txt")


def _error_line(code: int, kind: str, message: str) -> str:
    msg = " ".join(str(message).split())
    return f"ecgssl: error code={code} kind={kind} message={json.dumps(msg)}"


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    environ = os.environ if environ is None else environ
    t0 = time.perf_counter()
    try:
        parser = build_parser()
        _apply_env(parser, environ)
        a = parser.parse_args(argv)
        rep = RunReport(["ecgssl"] + argv, {}, a.seed if a.seed is not None else 0)
        if a.command not in ("pretrain", "finetune", "pairs-audit"):
            rep.config = {k: str(v) for k, v in vars(a).items() if k not in ("command", "report")}
        COMMANDS[a.command](a, rep)
        if rep.config and a.command in ("pretrain", "finetune", "pairs-audit"):
            rep.seed = int(rep.config["seed"])
        path = _report_path(a)
        rep.write(path, time.perf_counter() - t0)
        return EXIT_OK
    except UsageError as exc:
        print(_error_line(EXIT_USAGE, "usage", exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(_error_line(EXIT_USAGE, "config", exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(_error_line(EXIT_NUMERIC, "numeric", exc), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MetricError, SynthError, FileNotFoundError, ValueError) as exc:
        print(_error_line(EXIT_DATA, type(exc).__name__, exc), file=sys.stderr)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
