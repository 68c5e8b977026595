"""Held-out evaluation of a trained sequence and the CSV / summary reports."""

from __future__ import annotations

import csv
import io
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nerfcl.errors import DomainError, ProtocolError
from nerfcl.field import load_checkpoint
from nerfcl.metrics import psnr, ssim
from nerfcl.render import render_image
from nerfcl.scenes import Dataset

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.txt"
CKPT_PATTERN = re.compile(r"ckpt_t(\d+)\.ctrd$")


@dataclass(frozen=True)
class MetricRecord:
    """Mean metrics over the test images of ``eval_timestep`` for the model
    deployed after ``train_timestep``."""

    strategy: str
    eval_timestep: int
    train_timestep: int
    psnr: float
    ssim: float
    buffer_bytes: int = 0
    wall_time: float = 0.0


CSV_COLUMNS = ("strategy", "eval_timestep", "train_timestep", "psnr", "ssim", "buffer_bytes")


@dataclass(frozen=True)
class Summary:
    strategy: str
    mean_psnr: float
    mean_ssim: float
    buffer_bytes: int
    wall_time: float
    per_timestep: tuple

    def __str__(self):
        return f"{self.strategy}: {self.mean_psnr:.3f} dB, SSIM {self.mean_ssim:.4f}"


def checkpoint_steps(checkpoints) -> dict:
    """Map train timestep -> checkpoint path from ``ckpt_t<k>.ctrd`` names."""
    steps = {}
    for p in checkpoints:
        m = CKPT_PATTERN.search(str(p))
        if m is None:
            raise ProtocolError(f"not a checkpoint name: {p}")
        steps[int(m.group(1))] = Path(p)
    return steps


def evaluate_model(params, dataset: Dataset, timesteps, n_samples: int = 64, workers: int = 1):
    """Per-timestep (mean PSNR, mean SSIM) over held-out images."""
    out = {}
    for t in timesteps:
        test = dataset.test(t).images
        if not test:
            raise ProtocolError(f"timestep {t} has no test images")
        scores = []
        for im in test:
            pred = render_image(params, im.camera, t, n_samples, workers=workers)
            scores.append((psnr(pred, im.pixels), ssim(pred, im.pixels)))
        out[t] = tuple(float(np.mean(c)) for c in zip(*scores))
    return out


def evaluate_sequence(checkpoints, dataset: Dataset, strategy: str, n_samples: int = 64,
                      buffer_bytes: int = 0, wall_time: float = 0.0, curves: bool = True,
                      workers: int = 1):
    """Score the final model on every timestep's test split.

    Each timestep is rendered with its own embeddings. With ``curves``, every
    earlier checkpoint is also scored on the timesteps it had seen, giving
    forgetting curves. Returns ``(records, summary)``.
    """
    steps = checkpoint_steps(checkpoints)
    final = dataset.n_timesteps - 1
    if final not in steps:
        raise ProtocolError(f"final checkpoint ckpt_t{final}.ctrd is missing")
    for k, path in steps.items():
        if k > final:
            raise ProtocolError(f"checkpoint for timestep {k} but dataset has {dataset.n_timesteps}")
        if not Path(path).exists():
            raise ProtocolError(f"missing checkpoint {path}")
    records = []
    for k in sorted(steps):
        if k != final and not curves:
            continue
        params = load_checkpoint(steps[k])
        scores = evaluate_model(params, dataset, range(k + 1), n_samples, workers)
        for t, (p, s) in scores.items():
            records.append(MetricRecord(strategy, t, k, p, s, buffer_bytes, wall_time))
    return records, summarize(records)[strategy]


def summarize(records) -> dict:
    """Strategy -> Summary over final-model records."""
    if not records:
        raise DomainError("no metric records")
    by_strategy = {}
    for r in records:
        by_strategy.setdefault(r.strategy, []).append(r)
    out = {}
    for name, recs in by_strategy.items():
        final = max(r.train_timestep for r in recs)
        rows = sorted((r for r in recs if r.train_timestep == final), key=lambda r: r.eval_timestep)
        out[name] = Summary(name, float(np.mean([r.psnr for r in rows])), float(np.mean([r.ssim for r in rows])),
                            max(r.buffer_bytes for r in rows), max(r.wall_time for r in rows),
                            tuple((r.eval_timestep, r.psnr, r.ssim) for r in rows))
    return out


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return repr(float(x))


def summary_table(summaries, with_wall_time: bool = False, reference: str | None = None) -> str:
    header = f"{'strategy':<16} {'mean_psnr':>10} {'mean_ssim':>10} {'buffer_bytes':>13}"
    if with_wall_time:
        header += f" {'wall_time_s':>12}"
    lines = [header]
    for s in summaries:
        line = f"{s.strategy:<16} {s.mean_psnr:>10.3f} {s.mean_ssim:>10.4f} {s.buffer_bytes:>13d}"
        if with_wall_time:
            line += f" {s.wall_time:>12.1f}"
        if reference is not None and s.strategy == reference:
            line += "  (reference)"
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_report(records, path) -> dict:
    """Write metrics.csv, timing.csv and summary.txt under directory ``path``.

    metrics.csv and summary.txt depend only on the trained models; wall time
    goes to timing.csv so reruns produce byte-identical reports.
    """
    if not records:
        raise DomainError("refusing to write an empty report")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.strategy, r.eval_timestep, r.train_timestep, _fmt(r.psnr), _fmt(r.ssim), r.buffer_bytes])
    _atomic_write(out / METRICS_FILE, buf.getvalue())
    summaries = summarize(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("strategy", "wall_time"))
    for name, s in summaries.items():
        w.writerow([name, _fmt(s.wall_time)])
    _atomic_write(out / TIMING_FILE, buf.getvalue())
    _atomic_write(out / SUMMARY_FILE, summary_table(summaries.values()))
    return {"metrics": out / METRICS_FILE, "timing": out / TIMING_FILE, "summary": out / SUMMARY_FILE}


def read_report(path) -> list:
    """Parse a report directory back into MetricRecords."""
    root = Path(path)
    if not (root / METRICS_FILE).exists():
        raise ProtocolError(f"no {METRICS_FILE} in {root}")
    timing = {}
    if (root / TIMING_FILE).exists():
        with open(root / TIMING_FILE, newline="") as fh:
            timing = {row["strategy"]: float(row["wall_time"]) for row in csv.DictReader(fh)}
    records = []
    with open(root / METRICS_FILE, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ProtocolError(f"unexpected columns in {root / METRICS_FILE}: {reader.fieldnames}")
        for row in reader:
            records.append(MetricRecord(row["strategy"], int(row["eval_timestep"]), int(row["train_timestep"]),
                                        float(row["psnr"]), float(row["ssim"]), int(row["buffer_bytes"]),
                                        timing.get(row["strategy"], 0.0)))
    return records


def compare_summaries(summaries, reference: str = "UB") -> str:
    ordered = sorted(summaries, key=lambda s: (-s.mean_psnr, s.strategy))
    return summary_table(ordered, with_wall_time=True, reference=reference)

