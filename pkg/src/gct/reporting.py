"""Run reports, comparison tables, metric curves and flaw-map dumps."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import GctError, InvalidInputError


@dataclass
class RunReport:
    run_id: str
    method: str
    task: str
    ratio: str
    seed: int
    metric_id: str
    series: list
    best_metric: float
    final_metric: float
    n_samples: int
    n_reference: int

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def load_reports(run_dirs):
    reports = []
    for d in run_dirs:
        path = Path(d) / "report.json"
        if not path.exists():
            raise InvalidInputError(f"{d}: no report.json (is the run complete?)")
        reports.append(RunReport.load(path))
    return reports


def _fmt(x):
    return "inf" if math.isinf(x) else f"{x:.4f}"


def summarize(reports, use="best"):
    """Mean and population std of the chosen metric per (method, ratio), rows sorted by method id."""
    if not reports:
        raise InvalidInputError("need at least one run report")
    metric_ids = {r.metric_id for r in reports}
    if len(metric_ids) != 1:
        raise InvalidInputError(f"cannot tabulate mixed metrics {sorted(metric_ids)}")
    cells = defaultdict(list)
    for r in reports:
        cells[(r.method, r.ratio)].append(r.best_metric if use == "best" else r.final_metric)
    rows = []
    for (method, ratio) in sorted(cells, key=lambda k: (k[0], Fraction(k[1]))):
        vals = np.asarray(cells[(method, ratio)], dtype=np.float64)
        rows.append({"method": method, "ratio": ratio, "mean": float(vals.mean()),
                     "std": float(vals.std()), "runs": len(vals)})
    return metric_ids.pop(), rows


def format_table(metric_id, rows) -> str:
    ratios = sorted({r["ratio"] for r in rows}, key=Fraction)
    methods = sorted({r["method"] for r in rows})
    lookup = {(r["method"], r["ratio"]): r for r in rows}
    width = max(12, *(len(m) for m in methods))
    lines = [f"{metric_id}: mean +/- std over runs".ljust(width)]
    lines.append("method".ljust(width) + "".join(r.rjust(22) for r in ratios))
    for m in methods:
        cells = []
        for ratio in ratios:
            r = lookup.get((m, ratio))
            cells.append(("-" if r is None else f"{_fmt(r['mean'])} +/- {_fmt(r['std'])} ({r['runs']})").rjust(22))
        lines.append(m.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def format_tsv(metric_id, rows) -> str:
    out = ["metric\tmethod\tratio\tmean\tstd\truns"]
    for r in rows:
        out.append(f"{metric_id}\t{r['method']}\t{r['ratio']}\t{r['mean']!r}\t{r['std']!r}\t{r['runs']}")
    return "\n".join(out) + "\n"


def plot_curves(reports, path):
    """Validation metric against epoch, one line per run, colored by method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({r.method for r in reports})
    colors = dict(zip(methods, plt.rcParams["axes.prop_cycle"].by_key()["color"] * 4))
    fig, ax = plt.subplots(figsize=(6, 4))
    seen = set()
    for r in sorted(reports, key=lambda r: (r.method, r.ratio, r.seed)):
        label = None if r.method in seen else r.method
        seen.add(r.method)
        ax.plot(range(1, len(r.series) + 1), r.series, color=colors[r.method], lw=1.2, alpha=0.8, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(reports[0].metric_id)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report(run_dirs, out_dir, use="best"):
    """Write ``report.txt``, ``report.tsv`` and ``curves.png`` into ``out_dir``; return the table text."""
    reports = load_reports(run_dirs)
    metric_id, rows = summarize(reports, use)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_table(metric_id, rows)
    (out_dir / "report.txt").write_text(table)
    (out_dir / "report.tsv").write_text(format_tsv(metric_id, rows))
    plot_curves(reports, out_dir / "curves.png")
    return table


# ------------------------------------------------------------------ flaw maps


def to_uint8(p):
    """Encode probabilities in [0, 1] as round(255 * p)."""
    p = np.asarray(p, dtype=np.float64)
    return np.clip(np.rint(255.0 * p), 0, 255).astype(np.uint8)


def write_gray(path, p):
    from PIL import Image

    try:
        Image.fromarray(to_uint8(p), mode="L").save(path)
    except OSError as exc:
        raise GctError(f"cannot write {path}: {exc}") from exc


def read_image(path):
    """Read an image file as float (H, W, C) in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except OSError as exc:
        raise GctError(f"cannot read {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr / 255.0


def dump_flawmaps(models: dict, flaw_detector, data, sample_ids, out_dir, params):
    """For each sample and task model write the predicted flaw map and its ground truth.

    Files are ``{id}_{model}_pred.png`` and ``{id}_{model}_gt.png``.
    """
    import torch

    from .trainer import flaw_targets

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    batch = data.gather(list(sample_ids))
    y_map = data.target_map(batch.y_l)
    written = []
    flaw_detector.eval()
    with torch.no_grad():
        for name, model in models.items():
            model.eval()
            pred = model.predict(batch.x_l)
            flaw = flaw_detector(batch.x_l, pred)[:, 0].numpy()
            gt = flaw_targets(pred, y_map, params)[:, 0].numpy()
            for i, sid in enumerate(sample_ids):
                for kind, arr in (("pred", flaw[i]), ("gt", gt[i])):
                    path = out_dir / f"{sid}_{name}_{kind}.png"
                    write_gray(path, arr)
                    written.append(path)
    return written
