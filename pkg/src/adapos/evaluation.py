"""Chart-to-world alignment, MAE, and the (model x n_e) robustness sweep."""
from __future__ import annotations

import csv
import html
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateFitError, ExcludedCaseError, UsageError
from .rngs import STREAM_EVAL_SUBSET, derive_seed, stream_rng
from .sim import CirDataset
from .training import sample_subset_fixed_n

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffineTransform:
    A: np.ndarray  # [2, 2]
    b: np.ndarray  # [2]
    condition: float = float("nan")

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.A.T + self.b


def fit_affine(pred, truth) -> AffineTransform:
    """Least-squares ``A, b`` minimizing ``sum |A pred_i + b - truth_i|^2``.

    Solved through the normal equations of the homogeneous design
    ``[pred - mean(pred), 1]``; centring only improves conditioning.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(truth):
        raise UsageError(f"{len(pred)} predictions vs {len(truth)} reference points")
    if len(pred) < 3:
        raise DegenerateFitError("an affine fit needs at least 3 points")
    center = pred.mean(axis=0)
    design = np.hstack([pred - center, np.ones((len(pred), 1))])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-12:
        raise DegenerateFitError("prediction points are collinear or coincident")
    theta = np.linalg.solve(design.T @ design, design.T @ truth)  # [3, 2]
    A = theta[:2].T
    b = theta[2] - A @ center
    return AffineTransform(A, b, float(sv[0] / sv[-1]))


def mae(pred_aligned, truth) -> float:
    pred_aligned = np.asarray(pred_aligned, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(pred_aligned) != len(truth) or len(truth) == 0:
        raise UsageError(f"cannot compare {len(pred_aligned)} predictions with {len(truth)} points")
    return float(np.mean(np.linalg.norm(pred_aligned - truth, axis=1)))


@dataclass
class EvalResult:
    mae: float
    n_batches: int
    transform: AffineTransform
    subsets: list


def evaluation_subsets(a_max: int, n_e: int, n_batches: int, seed: int) -> list:
    """The antenna subset used for every evaluation batch; model independent."""
    return [sample_subset_fixed_n(a_max, n_e, stream_rng(seed, STREAM_EVAL_SUBSET, i)).ids
            for i in range(n_batches)]


def evaluate_model(model, dataset: CirDataset, n_e: int, seed: int, batch_size: int = 256) -> EvalResult:
    """MAE after one global affine fit, with a fresh n_e-subset per batch."""
    a_max = dataset.a_max
    if n_e == 1:
        raise ExcludedCaseError("n_e=1 is excluded: a single antenna gives no spatial diversity "
                                "and attention over one embedding compares nothing")
    if not 2 <= n_e <= a_max:
        raise ConfigurationError(f"n_e={n_e} outside [2, {a_max}]")
    n = len(dataset)
    n_batches = math.ceil(n / batch_size)
    subsets = evaluation_subsets(a_max, n_e, n_batches, seed)
    pred = np.empty((n, 2))
    for i, ids in enumerate(subsets):
        rows = np.arange(i * batch_size, min((i + 1) * batch_size, n))
        pred[rows] = model.predict(dataset, rows, ids)
    transform = fit_affine(pred, dataset.positions)
    return EvalResult(mae(transform.apply(pred), dataset.positions), n_batches, transform, subsets)


@dataclass
class ModelEntry:
    tag: str  # e.g. "adapos"
    strategy: str  # e.g. "fixed-n:4" or "random-n"
    model: object


@dataclass
class SweepResult:
    entries: list  # [(tag, strategy)]
    n_e_values: list
    mae: np.ndarray  # [n_models, n_n_e]
    n_batches: np.ndarray
    seeds: list  # per n_e column
    extra: dict = field(default_factory=dict)

    def rows(self):
        for i, (tag, strategy) in enumerate(self.entries):
            for j, n_e in enumerate(self.n_e_values):
                yield tag, strategy, n_e, float(self.mae[i, j]), int(self.n_batches[i, j]), self.seeds[j]

    def cell(self, tag: str, strategy: str, n_e: int) -> float:
        i = self.entries.index((tag, strategy))
        return float(self.mae[i, self.n_e_values.index(n_e)])


def column_seed(seed: int, n_e: int) -> int:
    return derive_seed(seed, "eval-column", n_e)


def sweep(models: Sequence[ModelEntry], dataset: CirDataset, n_e_values: Sequence[int], seed: int,
          batch_size: int = 256) -> SweepResult:
    if not models:
        raise ConfigurationError("sweep needs at least one model")
    n_e_values = [int(v) for v in n_e_values]
    for v in n_e_values:
        if not 2 <= v <= dataset.a_max:
            raise ConfigurationError(f"n_e={v} outside [2, {dataset.a_max}]")
    seeds = [column_seed(seed, v) for v in n_e_values]
    grid = np.empty((len(models), len(n_e_values)))
    counts = np.empty_like(grid, dtype=np.int64)
    for i, entry in enumerate(models):
        for j, n_e in enumerate(n_e_values):
            try:
                res = evaluate_model(entry.model, dataset, n_e, seeds[j], batch_size)
                grid[i, j], counts[i, j] = res.mae, res.n_batches
            except DegenerateFitError as exc:
                # a collapsed model has no chart to align; keep the grid complete
                log.warning("%s %s at n_e=%d: %s; MAE recorded as nan", entry.tag, entry.strategy, n_e, exc)
                grid[i, j], counts[i, j] = math.nan, math.ceil(len(dataset) / batch_size)
    return SweepResult([(m.tag, m.strategy) for m in models], n_e_values, grid, counts, seeds)


SWEEP_HEADER = ["model", "n_t_strategy", "n_e", "mae_m", "n_batches", "seed"]


def write_sweep_csv(path, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for tag, strategy, n_e, value, nb, s in result.rows():
            writer.writerow([tag, strategy, n_e, repr(value), nb, s])


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _strategy_order(strategy: str):
    if strategy.startswith("fixed-n:"):
        return (0, int(strategy.split(":")[1]))
    return (1, 0)


def _color(value: float, lo: float, hi: float) -> str:
    t = 0.0 if hi <= lo else (value - lo) / (hi - lo)
    t = min(max(t, 0.0), 1.0)
    # light yellow (good) to dark purple (bad)
    c0, c1 = np.array([253, 231, 37]), np.array([68, 1, 84])
    r, g, b = (c0 + (c1 - c0) * t).round().astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap_svg(result: SweepResult, tags: Sequence[str] | None = None, title: str = "") -> str:
    """One panel per model tag; rows are training strategies, columns are n_e."""
    tags = list(dict.fromkeys(tags or [t for t, _ in result.entries]))
    cell, pad_left, pad_top, gap = 56, 90, 50, 40
    cols = len(result.n_e_values)
    panels = []
    finite = result.mae[np.isfinite(result.mae)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    max_rows = 0
    for tag in tags:
        strategies = sorted({s for t, s in result.entries if t == tag}, key=_strategy_order)
        panels.append((tag, strategies))
        max_rows = max(max_rows, len(strategies))
    panel_w = pad_left + cols * cell
    width = len(panels) * panel_w + (len(panels) - 1) * gap + 20
    height = pad_top + max_rows * cell + 50
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="12">']
    if title:
        out.append(f'<text x="10" y="18" font-size="14">{html.escape(title)}</text>')
    for p, (tag, strategies) in enumerate(panels):
        x0 = p * (panel_w + gap)
        out.append(f'<text x="{x0 + pad_left}" y="{pad_top - 22}" font-weight="bold">{html.escape(tag)}</text>')
        for j, n_e in enumerate(result.n_e_values):
            out.append(f'<text x="{x0 + pad_left + j * cell + cell / 2}" y="{pad_top - 6}" '
                       f'text-anchor="middle">n_e={n_e}</text>')
        for r, strategy in enumerate(strategies):
            y = pad_top + r * cell
            label = "random" if strategy == "random-n" else "n_t=" + strategy.split(":")[1]
            out.append(f'<text x="{x0 + pad_left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">{label}</text>')
            for j, n_e in enumerate(result.n_e_values):
                v = result.cell(tag, strategy, n_e)
                xc = x0 + pad_left + j * cell
                if not math.isfinite(v):
                    out.append(f'<rect x="{xc}" y="{y}" width="{cell}" height="{cell}" fill="#bbb" stroke="#fff"/>')
                    out.append(f'<text x="{xc + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle">n/a</text>')
                    continue
                fill = _color(v, lo, hi)
                dark = hi > lo and (v - lo) / (hi - lo) > 0.5
                text_fill = "#fff" if dark else "#000"
                out.append(f'<rect x="{xc}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#fff"/>')
                out.append(f'<text x="{xc + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                           f'fill="{text_fill}">{v:.2f}</text>')
    out.append(f'<text x="10" y="{height - 12}">MAE [m] after affine alignment</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap_svg(path, result: SweepResult, tags=None, title: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(render_heatmap_svg(result, tags, title))
