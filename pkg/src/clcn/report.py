"""Run artifacts: metric trace CSV, JSON manifest, checkpoint and SVG embedding plot."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .data import evaluation_access
from .errors import CLCNError
from .metrics import pca_project
from .model import ModelParams, embed
from .trainer import TRACE_FIELDS, RunResult, TraceRow, save_checkpoint, target_pseudo_labels

SOURCE_COLORS = ("#b2182b", "#d6604d", "#f4a582", "#8c2d04", "#e6550d", "#fd8d3c", "#a50f15", "#fb6a4a", "#67000d", "#fcbba1")
TARGET_COLORS = ("#2166ac", "#4393c3", "#92c5de", "#084594", "#3182bd", "#6baed6", "#08519c", "#9ecae1", "#08306b", "#c6dbef")
MARKERS = ("circle", "square", "triangle", "diamond", "cross")


class ReportError(CLCNError, OSError):
    pass


@dataclass
class RunManifest:
    config: dict
    seed: int
    datasets: dict
    final_metrics: dict
    artifacts: dict
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _num(x: float) -> str:
    return repr(float(x))


def trace_csv(trace: list[TraceRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_FIELDS)
    for row in trace:
        writer.writerow([row.episode] + [_num(v) for v in row.as_tuple()[1:]])
    return buf.getvalue()


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [TraceRow(int(r["episode"]), *(float(r[f]) for f in TRACE_FIELDS[1:])) for r in reader]


def fingerprint(ds) -> str:
    """SHA-256 over samples and (if present) labels."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())
    with evaluation_access(ds):
        labels = ds.labels
    if labels is not None:
        h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


# -- svg --------------------------------------------------------------------


def _marker(shape: str, x: float, y: float, color: str, css: str, r: float = 3.0) -> str:
    common = f'class="{css}" fill="{color}" fill-opacity="0.75"'
    if shape == "circle":
        return f'<circle {common} cx="{x:.2f}" cy="{y:.2f}" r="{r}"/>'
    if shape == "square":
        return f'<rect {common} x="{x - r:.2f}" y="{y - r:.2f}" width="{2 * r}" height="{2 * r}"/>'
    if shape == "triangle":
        pts = f"{x:.2f},{y - r:.2f} {x - r:.2f},{y + r:.2f} {x + r:.2f},{y + r:.2f}"
        return f'<polygon {common} points="{pts}"/>'
    if shape == "diamond":
        pts = f"{x:.2f},{y - r:.2f} {x + r:.2f},{y:.2f} {x:.2f},{y + r:.2f} {x - r:.2f},{y:.2f}"
        return f'<polygon {common} points="{pts}"/>'
    d = f"M{x - r:.2f},{y:.2f}H{x + r:.2f}M{x:.2f},{y - r:.2f}V{y + r:.2f}"
    return f'<path class="{css}" stroke="{color}" stroke-width="1.5" fill="none" d="{d}"/>'


def scatter_svg(
    source_xy: np.ndarray,
    source_labels: np.ndarray,
    target_xy: np.ndarray,
    target_labels: np.ndarray,
    title: str = "",
    size: int = 640,
) -> str:
    """Source points in reds, target points in blues; marker shape encodes class."""
    pad = 40
    allxy = np.concatenate([source_xy, target_xy]) if len(target_xy) else source_xy
    lo, hi = allxy.min(axis=0), allxy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def to_px(xy):
        u = (xy - lo) / span
        return pad + u[:, 0] * (size - 2 * pad), size - pad - u[:, 1] * (size - 2 * pad)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]
    for name, xy, labels, palette in (
        ("source", source_xy, source_labels, SOURCE_COLORS),
        ("target", target_xy, target_labels, TARGET_COLORS),
    ):
        if not len(xy):
            continue
        px, py = to_px(xy)
        parts.append(f'<g id="{name}">')
        for x, y, k in zip(px, py, labels):
            k = int(k)
            parts.append(_marker(MARKERS[k % len(MARKERS)], x, y, palette[k % len(palette)], f"point {name}"))
        parts.append("</g>")
    parts.append(
        f'<text x="{pad}" y="{size - 12}" font-family="sans-serif" font-size="11">'
        "red: source, blue: target; marker shape = class</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def embedding_svg(params: ModelParams, source, target, banks=None, title: str = "") -> str:
    """PCA of the joint source/target embedding. Target markers use true labels
    when available, otherwise nearest-centroid pseudo-labels."""
    params = params.numpy()
    fs = embed(params, source.samples).data
    ft = embed(params, target.samples).data
    xy = pca_project(np.concatenate([fs, ft]))
    with evaluation_access(target):
        target_labels = target.labels
    if target_labels is None:
        if banks is None:
            target_labels = np.zeros(len(target), dtype=np.int64)
        else:
            target_labels = target_pseudo_labels(params, banks, target.samples)
    return scatter_svg(xy[: len(fs)], source.labels, xy[len(fs) :], target_labels, title)


def write_artifact(path: Path, text: str | bytes) -> None:
    try:
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            path.write_text(text)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_report(run: RunResult, out_dir, source=None, target=None, svg: bool = True) -> RunManifest:
    """Write trace.csv, checkpoint.bin, embedding.svg (when datasets are given)
    and manifest.json into ``out_dir``. Output bytes depend only on ``run``
    and the datasets; wall time is deliberately left out."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc.strerror or exc}") from exc

    artifacts = {"trace": "trace.csv", "checkpoint": "checkpoint.bin"}
    write_artifact(out / "trace.csv", trace_csv(run.trace))
    try:
        save_checkpoint(out / "checkpoint.bin", run.params, run.banks, run.velocity)
    except OSError as exc:
        raise ReportError(f"cannot write {out / 'checkpoint.bin'}: {exc.strerror or exc}") from exc

    datasets = {}
    if source is not None and target is not None:
        datasets = {"source": fingerprint(source), "target": fingerprint(target)}
        if svg:
            title = f"{run.config.variant} seed {run.config.seed}"
            write_artifact(out / "embedding.svg", embedding_svg(run.params, source, target, run.banks, title))
            artifacts["embedding"] = "embedding.svg"

    final = {}
    if run.trace:
        final = {k: v for k, v in dataclasses.asdict(run.final).items()}
    final["clamped_log_entries"] = run.clamped
    final["episodes_without_cycle_term"] = run.inactive_cycle_episodes
    manifest = RunManifest(
        config=_jsonable(run.config),
        seed=run.config.seed,
        datasets=datasets,
        final_metrics=final,
        artifacts=artifacts,
    )
    write_artifact(out / "manifest.json", manifest.to_json())
    return manifest
