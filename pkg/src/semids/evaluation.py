"""Offline evaluation: per-sequence pairwise accuracy averaged over sequences
(stratified AUC), lift by input length with bootstrap intervals, and
recommendation-diversity metrics grouped by radio seed."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataio import InteractionSequence, TestEntry
from .numerics import Rng

Scorer = Callable[[Sequence[InteractionSequence], Sequence[np.ndarray]], Sequence[np.ndarray]]

N_BOOT = 1000
CI_LEVEL = 0.90


def pairwise_accuracy(pos_scores, neg_scores) -> float:
    """Fraction of (pos, neg) pairs ranked correctly; ties count one half."""
    p = np.asarray(pos_scores, dtype=np.float64)[:, None]
    n = np.asarray(neg_scores, dtype=np.float64)[None, :]
    return float(((p > n) + 0.5 * (p == n)).mean())


def default_edges(max_length: int) -> list[int]:
    """Power-of-two bucket edges [1, 2, 4, ...] covering lengths up to ``max_length``."""
    edges = [1]
    while edges[-1] <= max_length:
        edges.append(edges[-1] * 2)
    return edges


def bootstrap_ci(values: np.ndarray, rng: Rng, n_boot: int = N_BOOT, level: float = CI_LEVEL):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return float("nan"), float("nan")
    means = values[rng.integers(0, len(values), size=(n_boot, len(values)))].mean(axis=1)
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    m = values.mean()
    # percentile intervals can exclude the point estimate by rounding only
    return float(min(lo, m)), float(max(hi, m))


def _bucketize(lengths: np.ndarray, edges: Sequence[int]) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        out.append((int(lo), int(hi), np.flatnonzero((lengths >= lo) & (lengths < hi))))
    return out


@dataclass
class EvalReport:
    auc: float
    n_sequences: int
    seq_ids: np.ndarray
    per_sequence: np.ndarray
    input_lengths: np.ndarray
    per_bucket: list[dict] = field(default_factory=list)
    diversity: dict | None = None
    param_counts: dict | None = None

    @property
    def stratified_auc(self) -> float:
        return self.auc

    def to_dict(self) -> dict:
        return {
            "stratified_auc": self.auc,
            "n_sequences": self.n_sequences,
            "per_bucket": self.per_bucket,
            "diversity": self.diversity,
            "param_counts": self.param_counts,
            "sequences": {
                "seq_id": self.seq_ids.tolist(),
                "accuracy": self.per_sequence.tolist(),
                "input_length": self.input_lengths.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        s = d["sequences"]
        return cls(
            d["stratified_auc"],
            d["n_sequences"],
            np.asarray(s["seq_id"], dtype=np.int64),
            np.asarray(s["accuracy"], dtype=np.float64),
            np.asarray(s["input_length"], dtype=np.int64),
            d.get("per_bucket", []),
            d.get("diversity"),
            d.get("param_counts"),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def read_json(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def stratified_auc(
    scorer: Scorer,
    entries: Sequence[TestEntry],
    edges: Sequence[int] | None = None,
    seed: int = 0,
) -> EvalReport:
    """Score each entry's test tracks from its prefix and average pairwise accuracy per sequence."""
    if not entries:
        raise ValueError("stratified_auc: no test pairs")
    cands = [np.concatenate([e.positives, e.negatives]) for e in entries]
    scores = scorer([e.prefix for e in entries], cands)
    acc = np.empty(len(entries))
    for i, (e, s) in enumerate(zip(entries, scores)):
        s = np.asarray(s, dtype=np.float64)
        acc[i] = pairwise_accuracy(s[: len(e.positives)], s[len(e.positives) :])
    lengths = np.array([e.input_length for e in entries], dtype=np.int64)
    report = EvalReport(
        # exactly rounded sum, so the result does not depend on summation order
        math.fsum(acc) / len(acc),
        len(entries),
        np.array([e.seq_id for e in entries], dtype=np.int64),
        acc,
        lengths,
    )
    report.per_bucket = bucket_accuracy(report, edges, seed)
    return report


def bucket_accuracy(report: EvalReport, edges=None, seed: int = 0) -> list[dict]:
    edges = default_edges(int(report.input_lengths.max())) if edges is None else list(edges)
    rng = Rng(seed)
    out = []
    for lo, hi, idx in _bucketize(report.input_lengths, edges):
        if not len(idx):
            continue
        vals = report.per_sequence[idx]
        ci = bootstrap_ci(vals, rng)
        out.append({"lo": lo, "hi": hi, "n": int(len(idx)), "accuracy": float(vals.mean()), "ci": list(ci)})
    return out


def lift_by_length(
    baseline: EvalReport,
    candidate: EvalReport,
    edges: Sequence[int] | None = None,
    n_boot: int = N_BOOT,
    seed: int = 0,
) -> list[dict]:
    """Per length bucket: mean paired accuracy difference and its bootstrap interval."""
    if set(baseline.seq_ids.tolist()) != set(candidate.seq_ids.tolist()):
        raise ValueError("lift_by_length: reports cover different sequences")
    pos = {int(s): i for i, s in enumerate(candidate.seq_ids)}
    order = np.array([pos[int(s)] for s in baseline.seq_ids])
    delta = candidate.per_sequence[order] - baseline.per_sequence
    lengths = baseline.input_lengths
    edges = default_edges(int(lengths.max())) if edges is None else list(edges)
    rng = Rng(seed)
    out = []
    for lo, hi, idx in _bucketize(lengths, edges):
        if not len(idx):
            continue
        ci = bootstrap_ci(delta[idx], rng, n_boot)
        out.append({"lo": lo, "hi": hi, "n": int(len(idx)), "delta": float(delta[idx].mean()), "ci": list(ci)})
    return out


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def diversity_from_recommendations(
    recs: Sequence[Sequence[int]],
    stations: Sequence[int | None],
    artist_of: dict[int, int] | None = None,
) -> dict[str, float]:
    """Per-seed distinct tracks/artists and repetition, averaged over seeds."""
    if any(s is None for s in stations):
        raise ValueError("diversity metrics need a seed (station) label on every sequence")
    groups: dict[int, list[int]] = {}
    for r, s in zip(recs, stations):
        groups.setdefault(int(s), []).extend(int(t) for t in r)
    distinct_tracks, distinct_artists, repetition = [], [], []
    for pooled in groups.values():
        uniq = set(pooled)
        distinct_tracks.append(len(uniq))
        if artist_of is not None:
            distinct_artists.append(len({artist_of[t] for t in uniq}))
        repetition.append(1.0 - len(uniq) / len(pooled) if pooled else 0.0)
    return {
        "distinct_tracks_per_seed": float(np.mean(distinct_tracks)),
        "distinct_artists_per_seed": float(np.mean(distinct_artists)) if artist_of is not None else float("nan"),
        "repetition_rate": float(np.mean(repetition)),
        "n_seeds": len(groups),
    }


def diversity_metrics(
    scorer: Scorer,
    entries: Sequence[TestEntry],
    track_ids: np.ndarray,
    m: int = 10,
    artist_of: dict[int, int] | None = None,
) -> dict[str, float]:
    """Top-``m`` recommendations over ``track_ids`` per sequence, summarized per seed."""
    from .recsys import top_m

    stations = [e.station for e in entries]
    if any(s is None for s in stations):
        raise ValueError("diversity metrics need a seed (station) label on every sequence")
    track_ids = np.asarray(track_ids, dtype=np.int64)
    recs = []
    for s in range(0, len(entries), 128):
        chunk = entries[s : s + 128]
        scores = scorer([e.prefix for e in chunk], [track_ids] * len(chunk))
        recs.extend(top_m(track_ids, np.asarray(sc), m) for sc in scores)
    return diversity_from_recommendations(recs, stations, artist_of)


def evaluate_model(model, split, catalog=None, m: int = 10, edges=None, seed: int = 0) -> EvalReport:
    """Full report for a trained model: AUC, buckets, diversity and parameter counts."""
    from .recsys import model_scorer

    scorer = model_scorer(model)
    report = stratified_auc(scorer, split.test_pairs, edges, seed)
    counts = model.expected_param_count()
    counts["live_total"] = model.n_params()
    report.param_counts = counts
    if all(e.station is not None for e in split.test_pairs):
        artist_of = None
        if catalog is not None and catalog.has_decomposition:
            artist_of = dict(zip(catalog.track_ids.tolist(), catalog.artist_ids.tolist()))
        report.diversity = diversity_metrics(scorer, split.test_pairs, model.track_ids, m, artist_of)
    return report
