"""Point-set matching, precision/recall, and aggregated reports.

Matching is greedy on globally closest pairs: all ground-truth /
prediction pairs within the distance threshold are sorted by
(distance, gt index, pred index) and accepted when both endpoints are
still free, yielding a deterministic one-to-one matching.  Reports
group per-image metrics, add an overall average row, and serialize to
a fixed-schema CSV plus line plots of recall and precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

CSV_COLUMNS = [
    "density",
    "noise_model",
    "noise_level",
    "n_images",
    "recall_mean",
    "precision_mean",
    "threshold",
    "flags",
]


@dataclass
class Matching:
    """One-to-one matching between ground truth and predictions."""

    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    threshold: float


@dataclass
class Metrics:
    """Per-image localization quality plus grouping descriptors."""

    recall: float
    precision: float
    tp: int
    fp: int
    fn: int
    density: int | None = None
    noise_model: str = ""
    noise_level: float = 0.0
    flags: tuple[str, ...] = field(default_factory=tuple)


def match_points(gt: np.ndarray, pred: np.ndarray, threshold: float) -> Matching:
    """Greedy globally-closest one-to-one matching within a threshold.

    gt and pred are (N, >=3) arrays whose first three columns are
    (x, y, z) voxel coordinates; distances are 3D Euclidean.
    """
    if not (threshold > 0):
        raise DomainError("matching threshold must be positive")

    def _as_points(arr):
        a = np.asarray(arr, dtype=np.float64)
        if a.size == 0:
            return a.reshape(0, 4)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.shape[1] < 3:
            raise DomainError("points need at least (x, y, z) columns")
        return a

    gt = _as_points(gt)
    pred = _as_points(pred)
    n_gt, n_pred = gt.shape[0], pred.shape[0]
    if n_gt == 0 or n_pred == 0:
        return Matching([], list(range(n_gt)), list(range(n_pred)), threshold)

    diff = gt[:, None, :3] - pred[None, :, :3]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    gi, pi = np.nonzero(dist <= threshold)
    order = np.lexsort((pi, gi, dist[gi, pi]))

    used_gt = np.zeros(n_gt, dtype=bool)
    used_pred = np.zeros(n_pred, dtype=bool)
    pairs = []
    for idx in order:
        a, b = gi[idx], pi[idx]
        if not used_gt[a] and not used_pred[b]:
            used_gt[a] = True
            used_pred[b] = True
            pairs.append((int(a), int(b), float(dist[a, b])))
    return Matching(
        pairs=pairs,
        unmatched_gt=[int(i) for i in np.nonzero(~used_gt)[0]],
        unmatched_pred=[int(i) for i in np.nonzero(~used_pred)[0]],
        threshold=threshold,
    )


def precision_recall(m: Matching, n_gt: int, n_pred: int) -> Metrics:
    """Recall and precision with flagged empty-denominator conventions.

    No ground truth: recall is vacuously 1 (flag "empty_gt").  No
    predictions: precision is 0, or vacuously 1 when there is also no
    ground truth (flag "empty_pred").
    """
    tp = len(m.pairs)
    if tp + len(m.unmatched_gt) != n_gt or tp + len(m.unmatched_pred) != n_pred:
        raise ConfigurationError("matching is inconsistent with the stated counts")
    fn = n_gt - tp
    fp = n_pred - tp
    flags = []
    if n_gt == 0:
        recall = 1.0
        flags.append("empty_gt")
    else:
        recall = tp / (tp + fn)
    if n_pred == 0:
        precision = 1.0 if n_gt == 0 else 0.0
        flags.append("empty_pred")
    else:
        precision = tp / (tp + fp)
    return Metrics(
        recall=float(recall),
        precision=float(precision),
        tp=tp,
        fp=fp,
        fn=fn,
        flags=tuple(flags),
    )


def aggregate_report(
    runs: list[Metrics],
    threshold: float,
    group_keys: tuple[str, ...] = ("density", "noise_model", "noise_level"),
) -> list[dict]:
    """Group per-image metrics and append an overall average row.

    Returns rows in the fixed CSV schema; group means are means of the
    per-image rates, and the trailing average row averages the group
    means (one vote per group, like the tables such reports mirror).
    """
    if not runs:
        raise ConfigurationError("aggregate_report needs at least one run")
    for key in group_keys:
        if key not in ("density", "noise_model", "noise_level"):
            raise ConfigurationError(f"unknown group key: {key!r}")
    for r in runs:
        if "density" in group_keys and r.density is None:
            raise ConfigurationError("run is missing its density group key")

    groups: dict[tuple, list[Metrics]] = {}
    for r in runs:
        key = tuple(getattr(r, k) for k in group_keys)
        groups.setdefault(key, []).append(r)

    rows = []
    for key in sorted(groups):
        members = groups[key]
        values = dict(zip(group_keys, key))
        flags = sorted({f for m in members for f in m.flags})
        rows.append(
            {
                "density": values.get("density", ""),
                "noise_model": values.get("noise_model", ""),
                "noise_level": values.get("noise_level", ""),
                "n_images": len(members),
                "recall_mean": float(np.mean([m.recall for m in members])),
                "precision_mean": float(np.mean([m.precision for m in members])),
                "threshold": threshold,
                "flags": ";".join(flags),
            }
        )

    models = {r["noise_model"] for r in rows}
    levels = {r["noise_level"] for r in rows}
    rows.append(
        {
            "density": "average",
            "noise_model": models.pop() if len(models) == 1 else "mixed",
            "noise_level": levels.pop() if len(levels) == 1 else "",
            "n_images": len(runs),
            "recall_mean": float(np.mean([r["recall_mean"] for r in rows])),
            "precision_mean": float(np.mean([r["precision_mean"] for r in rows])),
            "threshold": threshold,
            "flags": "average",
        }
    )
    return rows


def write_report_csv(path, rows: list[dict]) -> None:
    """Serialize report rows with the fixed column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})


def plot_sweep(
    rows_by_method: dict[str, list[dict]],
    x_key: str,
    out_path,
) -> None:
    """Render recall and precision vs a sweep axis, one series per method.

    Average rows are skipped; output is a deterministic two-panel PNG.
    """
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    if x_key not in ("noise_level", "density"):
        raise ConfigurationError(f"unsupported sweep axis: {x_key!r}")

    fig, (ax_r, ax_p) = plt.subplots(1, 2, figsize=(9.0, 3.6), dpi=120)
    for method in sorted(rows_by_method):
        rows = [r for r in rows_by_method[method] if r.get("flags") != "average"]
        rows = sorted(rows, key=lambda r: float(r[x_key]))
        xs = [float(r[x_key]) for r in rows]
        ax_r.plot(xs, [r["recall_mean"] for r in rows], marker="o", label=method)
        ax_p.plot(xs, [r["precision_mean"] for r in rows], marker="s", label=method)
    label = "noise level" if x_key == "noise_level" else "source density"
    for ax, title in ((ax_r, "recall"), (ax_p, "precision")):
        ax.set_xlabel(label)
        ax.set_ylabel(title)
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, metadata={"Software": "rpsfloc"})
    plt.close(fig)
