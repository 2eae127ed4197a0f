"""Metrics and report tables comparing edited models to their originals.

Heatmap distance is the per-pixel mean absolute difference between
normalized maps, averaged over the images whose observed raw map is not
identically zero; the collapsed images are reported separately through
zero_heatmap_fraction (an edit whose planted channel weight comes out
negative rectifies to an all-zero map, and folding those zeros into the
mean would hide the failure instead of exposing it).

The dominance diagnostic is the minimum over images of
(alpha_new * max(A_new)) / (max_k |alpha_k| * max(A_k)), new channel
against the strongest original channel; it is signed, so a negative
value is the collapse case above.

Set GCF_THREADS to spread the per-image explanation loop over that many
threads; results are ordered, so the report does not depend on it.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .errors import ShapeError
from .gradcam import explain_with_featuremap, normalize_heatmap
from .model import Model

CSV_COLUMNS = ("model_tag", "dataset_tag", "accuracy", "score_drift",
               "heatmap_dist", "zero_heatmap_fraction", "dominance_ratio")


@dataclass
class EvalRow:
    model_tag: str
    dataset_tag: str
    accuracy: float
    score_drift: float | None
    heatmap_dist: float | None
    zero_heatmap_fraction: float
    dominance_ratio: float | None


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([
                    row.model_tag, row.dataset_tag,
                    *("" if v is None else repr(float(v))
                      for v in (row.accuracy, row.score_drift, row.heatmap_dist,
                                row.zero_heatmap_fraction, row.dominance_ratio)),
                ])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected CSV header {header}")
            rows = []
            for rec in reader:
                vals = [None if v == "" else float(v) for v in rec[2:]]
                rows.append(EvalRow(rec[0], rec[1], *vals))
        return cls(rows)

    def format_table(self) -> str:
        headers = [f.name for f in fields(EvalRow)]
        table = [headers]
        for row in self.rows:
            table.append([
                row.model_tag, row.dataset_tag,
                *("-" if v is None else f"{v:.5f}"
                  for v in (row.accuracy, row.score_drift, row.heatmap_dist,
                            row.zero_heatmap_fraction, row.dominance_ratio)),
            ])
        widths = [max(len(r[c]) for r in table) for c in range(len(headers))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                 for r in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _pmap(fn, items):
    workers = int(os.environ.get("GCF_THREADS", "1") or "1")
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _scores(model: Model, images: np.ndarray) -> np.ndarray:
    return model.forward(images)


def accuracy(model: Model, ds) -> float:
    """Fraction of argmax-correct predictions; ties pick the lowest index."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(_scores(model, ds.images), axis=1)
    return float((pred == ds.labels).mean())


def score_drift(original: Model, edited: Model, ds) -> float:
    """max over images and classes of |edited score - original score|."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    a = _scores(original, ds.images)
    b = _scores(edited, ds.images)
    return float(np.abs(b - a).max())


def heatmap_distance(target: np.ndarray, observed: np.ndarray) -> float:
    """Per-pixel mean absolute difference."""
    if target.shape != observed.shape:
        raise ShapeError(f"heatmaps {target.shape} vs {observed.shape} differ "
                         "in shape")
    return float(np.abs(np.asarray(target, dtype=np.float64)
                        - np.asarray(observed, dtype=np.float64)).mean())


def _explain_all(model: Model, ds):
    return _pmap(lambda i: explain_with_featuremap(model, ds.images[i]),
                 range(len(ds)))


def _target_map(technique: str, model: Model, x: np.ndarray,
                original_norm: np.ndarray | None) -> np.ndarray:
    if technique == "t1":
        return np.ones(model.meta.hook_hw)
    if technique == "t2":
        return normalize_heatmap(model.feature_branch.constant)
    injected = model.branch_map(x)
    if technique == "t3":
        return normalize_heatmap(injected)
    if technique == "t4":
        if np.all(injected == 0):
            if original_norm is None:
                raise ValueError("t4 rows need the original model's maps")
            return original_norm
        return normalize_heatmap(injected)
    raise ValueError(f"unknown technique {technique!r}")


def model_row(model: Model, ds, model_tag: str, dataset_tag: str,
              original: Model | None = None,
              original_results=None) -> tuple[EvalRow, list]:
    """One report row; returns the per-image results for reuse."""
    results = _explain_all(model, ds)
    acc = accuracy(model, ds)
    technique = None if model.attack is None else model.attack["technique"]

    if technique is None:
        zero = np.mean([np.all(r.heatmap_raw == 0) for r, _ in results])
        return EvalRow(model_tag, dataset_tag, acc, None, None,
                       float(zero), None), results

    if original is None:
        raise ValueError("edited-model rows need the original model")
    drift = score_drift(original, model, ds)
    dists, zeros, ratios = [], 0, []
    for i, (res, feat) in enumerate(results):
        alphas = res.alphas
        num = float(alphas[-1] * feat[-1].max())
        den = float(max(abs(alphas[k]) * feat[k].max()
                        for k in range(len(alphas) - 1)))
        ratios.append(num / den if den > 0 else np.inf)
        if np.all(res.heatmap_raw == 0):
            zeros += 1
            continue
        orig_norm = None
        if original_results is not None:
            orig_norm = original_results[i][0].heatmap_norm
        target = _target_map(technique, model, ds.images[i], orig_norm)
        dists.append(heatmap_distance(target, res.heatmap_norm))

    row = EvalRow(model_tag, dataset_tag, acc, drift,
                  float(np.mean(dists)) if dists else None,
                  zeros / len(ds), float(min(ratios)))
    return row, results


def run_table1(original: Model, t1: Model, t2: Model, t3: Model,
               ds) -> EvalReport:
    """Clean-data comparison: original vs the three unconditional edits."""
    orig_row, orig_results = model_row(original, ds, "original", ds.split)
    rows = [orig_row]
    for tag, model in (("t1", t1), ("t2", t2), ("t3", t3)):
        rows.append(model_row(model, ds, tag, ds.split, original,
                              orig_results)[0])
    return EvalReport(rows)


def run_table2(original: Model, t4: Model, clean_ds, sticker_ds) -> EvalReport:
    """Sticker-conditional comparison on clean and stickered data."""
    rows = []
    for ds in (clean_ds, sticker_ds):
        orig_row, orig_results = model_row(original, ds, "original", ds.split)
        rows.append(orig_row)
        rows.append(model_row(t4, ds, "t4", ds.split, original,
                              orig_results)[0])
    return EvalReport(rows)
