"""Exact-match metrics, precision/recall sweeps, and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rerank import RerankInstance, confidence_threshold


class EvalError(ValueError):
    """Prediction/gold misalignment or an empty evaluation input."""


def exact_match_topk(predictions: dict[str, list[list[int] | None]],
                     gold: dict[str, list[int]], width: int) -> list[float]:
    """Top-K exact-match accuracies for K = 1..width.

    ``predictions`` maps instance id to ranked applied token sequences (None
    where a hypothesis failed to apply; those count as incorrect). An id
    present on one side only is an alignment error.
    """
    if set(predictions) != set(gold):
        missing = set(predictions) ^ set(gold)
        raise EvalError(f"prediction/gold id mismatch, e.g. {sorted(missing)[:3]}")
    if not predictions:
        raise EvalError("nothing to evaluate")
    hits = np.zeros(width)
    for pid, candidates in predictions.items():
        target = gold[pid]
        for k in range(width):
            if any(c == target for c in candidates[: k + 1] if c is not None):
                hits[k] += 1
    return [float(h) / len(predictions) for h in hits]


def pr_sweep(points: list[tuple[float, bool]], n_thresholds: int = 50) -> list[dict]:
    """Precision/recall curve for one confidence metric.

    The grid spans the observed score range, prepended with a -inf threshold
    whose point is exactly (overall top-1 accuracy, 100%). Points are sorted
    ascending by threshold, so recall is non-increasing along the curve.
    """
    if not points:
        raise EvalError("no scored instances for the sweep")
    scores = np.array([s for s, _ in points], dtype=np.float64)
    thresholds = [-np.inf]
    if n_thresholds > 0:
        lo, hi = float(scores.min()), float(scores.max())
        thresholds.extend(np.linspace(lo, hi, n_thresholds).tolist())
    out = []
    for th in thresholds:
        pt = confidence_threshold(points, th)
        out.append({
            "threshold": pt.threshold,
            "precision": pt.precision,
            "recall": pt.recall,
            "accepted": pt.accepted,
            "correct_accepted": pt.correct_accepted,
        })
    return out


def top1_points(instances: list[RerankInstance], orders: list[list[int]] | None,
                metric: str) -> list[tuple[float, bool]]:
    """(confidence score, correct) for each instance's top-ranked candidate.

    ``metric`` is "ensemble" (requires filled ensemble scores) or "log_prob"
    (the raw beam log-probability).
    """
    pts = []
    for idx, inst in enumerate(instances):
        if not inst.candidates:
            continue
        order = orders[idx] if orders is not None else range(len(inst.candidates))
        top = inst.candidates[list(order)[0]]
        score = top.ensemble if metric == "ensemble" else top.log_prob
        if score is None:
            raise EvalError(f"instance {inst.id}: missing {metric} score")
        pts.append((float(score), bool(top.correct)))
    return pts


@dataclass
class EvalReport:
    """Everything the pipeline measures, serializable deterministically."""

    config_fingerprint: str
    split_sizes: dict[str, int]
    beam_width: int
    rows: dict[str, list[float]]             # setting name -> top-1..top-K accuracies
    pr_curves: dict[str, list[dict]]          # metric name -> sweep points
    edit_stats: dict
    coefficients: dict
    application_failures: int = 0
    filtered_overlength: dict[str, int] = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "config_fingerprint": self.config_fingerprint,
            "split_sizes": self.split_sizes,
            "beam_width": self.beam_width,
            "rows": self.rows,
            "pr_curves": self.pr_curves,
            "edit_stats": self.edit_stats,
            "coefficients": self.coefficients,
            "application_failures": self.application_failures,
            "filtered_overlength": self.filtered_overlength,
            "training": self.training,
        }
        return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            config_fingerprint=doc["config_fingerprint"],
            split_sizes=doc["split_sizes"],
            beam_width=doc["beam_width"],
            rows=doc["rows"],
            pr_curves=doc["pr_curves"],
            edit_stats=doc["edit_stats"],
            coefficients=doc["coefficients"],
            application_failures=doc["application_failures"],
            filtered_overlength=doc["filtered_overlength"],
            training=doc["training"],
        )

    def to_text(self) -> str:
        width = self.beam_width
        lines = []
        lines.append(f"test instances: {self.split_sizes.get('test', 0)}"
                     f"   beam width: {width}")
        header = "setting".ljust(24) + "".join(f"top-{k+1:<6}" for k in range(width))
        lines.append(header)
        lines.append("-" * len(header))
        for name in ("beam_only", "ensemble", "finetuned_ensemble"):
            if name not in self.rows:
                continue
            accs = self.rows[name]
            lines.append(name.ljust(24) + "".join(f"{100 * a:6.2f}%  "[:9] for a in accs))
        lines.append("")
        c = self.coefficients
        if c.get("c1") is not None:
            lines.append(
                f"ensemble: c1={c['c1']:.4f} c2={c['c2']:.4f} "
                f"T={c.get('temperature')} b={c.get('chosen_b')}"
            )
        elif c.get("skipped"):
            lines.append(f"reranking skipped: {c['skipped']}")
        lines.append(f"application failures: {self.application_failures}")
        return "\n".join(lines) + "\n"
