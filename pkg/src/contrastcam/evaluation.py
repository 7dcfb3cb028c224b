"""AUROC scoring, multi-seed aggregation and leave-one-out style reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .cam import SalienceMap, ValidationError

OVERALL = "overall"


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting one half.

    Computed from average ranks (Mann-Whitney U), O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1D and equally long")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValidationError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RunResult:
    seed: int
    sample_ids: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    subsets: list = field(default_factory=list)
    method: str = ""

    def __post_init__(self):
        n = len(self.scores)
        if not (len(self.sample_ids) == len(self.labels) == len(self.subsets) == n):
            raise ValidationError("RunResult lists must have equal lengths")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValidationError("scores must lie in [0, 1]")

    def select(self, subset: str | None = None) -> tuple[np.ndarray, np.ndarray]:
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if subset is None or subset == OVERALL:
            return scores, labels
        keep = np.asarray(self.subsets) == subset
        return scores[keep], labels[keep]

    def auroc(self, subset: str | None = None) -> float:
        return auroc(*self.select(subset))

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "subset", "score"])
            for row in zip(self.sample_ids, self.labels, self.subsets, self.scores):
                w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
        return path

    @classmethod
    def from_csv(cls, path, seed: int, method: str = "") -> "RunResult":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            seed=seed,
            sample_ids=[r["sample_id"] for r in rows],
            scores=[float(r["score"]) for r in rows],
            labels=[int(r["label"]) for r in rows],
            subsets=[r["subset"] for r in rows],
            method=method,
        )


def evaluate_checkpoint(checkpoint, dataset, arch: str | None = None) -> RunResult:
    """Class-1 probability for every sample under a saved model."""
    import torch

    from .training import load_checkpoint, predict_proba, stack_images

    model, manifest = load_checkpoint(checkpoint, arch=arch)
    if not dataset:
        return RunResult(seed=manifest["seed"], method=manifest.get("method", ""))
    probs = predict_proba(model, stack_images(dataset, manifest["arch"]))
    return RunResult(
        seed=manifest["seed"],
        sample_ids=[s.sample_id for s in dataset],
        scores=[float(p) for p in probs.to(torch.float64)],
        labels=[s.label for s in dataset],
        subsets=[s.subset for s in dataset],
        method=manifest.get("method", ""),
    )


@dataclass(frozen=True)
class AggregateCell:
    mean: float
    std: float
    n_seeds: int

    def __post_init__(self):
        if self.std < 0 or self.n_seeds < 1:
            raise ValidationError("AggregateCell needs std >= 0 and n_seeds >= 1")

    def __str__(self):
        return f"{self.mean:.3f}±{self.std:.3f}"


def aggregate(values) -> AggregateCell:
    """Mean and population standard deviation of per-seed AUROCs."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot aggregate an empty list")
    return AggregateCell(float(arr.mean()), float(arr.std(ddof=0)), int(arr.size))


@dataclass(frozen=True)
class ReportRow:
    method: str
    subset: str
    cell: AggregateCell
    per_seed: tuple


def subset_report(results, subsets=None) -> list[ReportRow]:
    """Aggregate AUROC per (method, subset) plus a pooled overall row.

    ``results`` maps method name to that method's per-seed RunResults.
    Subset cells evaluate each seed on its slice; the overall row pools
    every sample of the seed.
    """
    rows = []
    for method, runs in results.items():
        runs = list(runs)
        if not runs:
            raise ValidationError(f"method {method!r} has no runs")
        present = sorted({s for r in runs for s in r.subsets})
        if subsets is None:
            chosen = present
        else:
            unknown = [s for s in subsets if s not in present and s != OVERALL]
            if unknown:
                raise ValidationError(f"unknown subset tags {unknown}; present: {present}")
            chosen = [s for s in subsets if s != OVERALL]
        for subset in chosen:
            vals = tuple(r.auroc(subset) for r in runs)
            rows.append(ReportRow(method, subset, aggregate(vals), vals))
        vals = tuple(r.auroc() for r in runs)
        rows.append(ReportRow(method, OVERALL, aggregate(vals), vals))
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "method", "auroc_mean", "auroc_std", "n_seeds", "cell"])
    for r in rows:
        w.writerow([r.subset, r.method, f"{r.cell.mean:.6f}", f"{r.cell.std:.6f}", r.cell.n_seeds, str(r.cell)])
    return buf.getvalue()


def report_text(rows, title: str = "AUROC") -> str:
    """Subset | Method | AUROC table, grouped by subset with the overall block last."""
    order = sorted({r.subset for r in rows}, key=lambda s: (s == OVERALL, s))
    methods = list(dict.fromkeys(r.method for r in rows))
    by_key = {(r.subset, r.method): r for r in rows}
    w_sub = max([len("Subset")] + [len(s) for s in order])
    w_met = max([len("Method")] + [len(m) for m in methods])
    header = f"{'Subset':<{w_sub}}  {'Method':<{w_met}}  {title}"
    lines = [header, "-" * len(header)]
    for subset in order:
        first = True
        for method in methods:
            row = by_key.get((subset, method))
            if row is None:
                continue
            lines.append(f"{subset if first else '':<{w_sub}}  {method:<{w_met}}  {row.cell}")
            first = False
        lines.append("-" * len(header))
    return "\n".join(lines) + "\n"


def cam_alignment(cam: SalienceMap, reference: SalienceMap) -> float:
    """Pearson correlation over cells; 0 if either map is constant."""
    if cam.shape != reference.shape:
        raise ValidationError(f"map shapes differ: {cam.shape} vs {reference.shape}")
    if np.ptp(cam.values) == 0 or np.ptp(reference.values) == 0:
        return 0.0
    a = cam.values.ravel() - cam.values.mean()
    b = reference.values.ravel() - reference.values.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
