"""Sliding-window volumetric inference and per-case evaluation.

Windows tile the volume with the given stride, the final window per axis
clamped to the boundary; overlapping predictions are averaged uniformly by
visit count.  Volumes smaller than the window are zero-padded (trailing
edge) and un-padded after.  The exported map is always decoder 1's
foreground probability; thresholding at exactly 0.5 assigns background.
"""

import csv
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UndefinedMetricError
from .metrics import dice_jaccard, surface_distances
from .network import select_final
from .tensor import Tensor, no_grad

METRICS_SCHEMA = "metrics_v1"
METRICS_CSV_HEADER = ("case_id", "dice", "jaccard", "asd", "hd95",
                      "degenerate_flag", "schema")


def threshold_foreground(prob):
    """Binary mask from probabilities; exact 0.5 ties resolve to background."""
    return np.asarray(prob) > 0.5


def _tile_starts(size, window, stride):
    if size <= window:
        return [0]
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def sliding_window_infer(net, volume, window, stride):
    """Foreground-probability volume from overlapping window predictions."""
    volume = np.asarray(volume, dtype=np.float64)
    rank = volume.ndim
    window = tuple(int(w) for w in (window if not isinstance(window, int)
                                    else (window,) * rank))
    stride = tuple(int(s) for s in (stride if not isinstance(stride, int)
                                    else (stride,) * rank))
    if len(window) != rank or len(stride) != rank:
        raise ConfigError(f"window {window} / stride {stride} do not match "
                          f"volume rank {rank}")
    if any(s < 1 or s > w for w, s in zip(window, stride)):
        raise ConfigError(f"need 1 <= stride <= window, got window {window} "
                          f"stride {stride}")
    multiple = 1 << net.config.depth
    if any(w % multiple for w in window):
        raise ConfigError(f"window {window} must be divisible by {multiple} "
                          "(2^depth)")

    original = volume.shape
    pad = [max(0, w - n) for n, w in zip(original, window)]
    if any(pad):
        volume = np.pad(volume, [(0, p) for p in pad])

    prob = np.zeros(volume.shape, dtype=np.float64)
    count = np.zeros(volume.shape, dtype=np.float64)
    axes_starts = [_tile_starts(n, w, s)
                   for n, w, s in zip(volume.shape, window, stride)]
    with no_grad():
        for corner in itertools.product(*axes_starts):
            sl = tuple(slice(o, o + w) for o, w in zip(corner, window))
            tile = Tensor(volume[sl][None, None])
            out = select_final(net.forward(tile)).data[0, 0]
            prob[sl] += out
            count[sl] += 1.0
    prob /= count
    return prob[tuple(slice(0, n) for n in original)]


# -- per-case evaluation -------------------------------------------------------


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    jaccard: float
    asd: float | None
    hd95: float | None
    degenerate: bool


@dataclass
class MetricReport:
    cases: list
    aggregate: dict
    n_cases: int
    n_degenerate: int


def evaluate(net, records, window, stride, out_dir=None):
    """Per-case metrics and their mean for every test record with a mask.

    Cases where a surface metric is undefined (empty prediction or truth)
    carry a None sentinel and the degenerate flag; aggregates average over
    the defined cases only.
    """
    cases = []
    for record in records:
        if record.mask is None:
            raise ConfigError(f"record {record.case_id} has no ground-truth mask")
        prob = sliding_window_infer(net, record.image, window, stride)
        pred = threshold_foreground(prob)
        truth = record.mask.astype(bool)
        dice, jaccard = dice_jaccard(pred, truth)
        try:
            asd, hd95 = surface_distances(pred, truth)
            degenerate = False
        except UndefinedMetricError:
            asd, hd95, degenerate = None, None, True
        cases.append(CaseMetrics(case_id=record.case_id, dice=dice,
                                 jaccard=jaccard, asd=asd, hd95=hd95,
                                 degenerate=degenerate))

    defined = [c for c in cases if not c.degenerate]
    aggregate = {
        "dice": float(np.mean([c.dice for c in cases])) if cases else None,
        "jaccard": float(np.mean([c.jaccard for c in cases])) if cases else None,
        "asd": float(np.mean([c.asd for c in defined])) if defined else None,
        "hd95": float(np.mean([c.hd95 for c in defined])) if defined else None,
    }
    report = MetricReport(cases=cases, aggregate=aggregate, n_cases=len(cases),
                          n_degenerate=len(cases) - len(defined))
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_CSV_HEADER)
        for c in report.cases:
            writer.writerow([
                c.case_id, format(c.dice, ".17g"), format(c.jaccard, ".17g"),
                "" if c.asd is None else format(c.asd, ".17g"),
                "" if c.hd95 is None else format(c.hd95, ".17g"),
                int(c.degenerate), METRICS_SCHEMA])
    doc = {"schema": METRICS_SCHEMA, "aggregate": report.aggregate,
           "n_cases": report.n_cases, "n_degenerate": report.n_degenerate,
           "cases": [{"case_id": c.case_id, "dice": c.dice,
                      "jaccard": c.jaccard, "asd": c.asd, "hd95": c.hd95,
                      "degenerate": c.degenerate} for c in report.cases]}
    (out_dir / "metrics.json").write_text(json.dumps(doc, indent=1) + "\n")
