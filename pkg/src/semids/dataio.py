"""Catalog and interaction I/O, a synthetic generator with planted content
structure, and time-separated train/test splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import Rng

POSITIVE = 1
NEGATIVE = 0
_FEEDBACK_CODES = {"pos": POSITIVE, "neg": NEGATIVE}
_FEEDBACK_NAMES = {POSITIVE: "pos", NEGATIVE: "neg"}

DEFAULT_MAX_LEN = 50
STD_CLAMP = 1e-6


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class TrackFeatures:
    track_id: int
    features: np.ndarray
    artist_id: int | None = None
    genre_id: int | None = None


@dataclass(frozen=True)
class Interaction:
    track_id: int
    feedback: int
    timestamp: int

    @property
    def positive(self) -> bool:
        return self.feedback == POSITIVE


@dataclass
class Catalog:
    """Column-oriented track catalog, rows sorted by ascending ``track_id``."""

    track_ids: np.ndarray
    features: np.ndarray
    artist_ids: np.ndarray | None = None
    genre_ids: np.ndarray | None = None

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.track_ids):
            raise DataError("features must be an (n_tracks, d_f) array")
        if len(np.unique(self.track_ids)) != len(self.track_ids):
            raise DataError("duplicate track_id in catalog")
        if not np.isfinite(self.features).all():
            raise DataError("catalog features must be finite")
        if (self.artist_ids is None) != (self.genre_ids is None):
            raise DataError("artist and genre tags must be given together")
        order = np.argsort(self.track_ids, kind="stable")
        self.track_ids = self.track_ids[order]
        self.features = self.features[order]
        if self.artist_ids is not None:
            self.artist_ids = np.asarray(self.artist_ids, dtype=np.int64)[order]
            self.genre_ids = np.asarray(self.genre_ids, dtype=np.int64)[order]
        self._index = {int(t): i for i, t in enumerate(self.track_ids)}

    def __len__(self) -> int:
        return len(self.track_ids)

    def __iter__(self) -> Iterator[TrackFeatures]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> TrackFeatures:
        return TrackFeatures(
            int(self.track_ids[i]),
            self.features[i],
            None if self.artist_ids is None else int(self.artist_ids[i]),
            None if self.genre_ids is None else int(self.genre_ids[i]),
        )

    @property
    def d_f(self) -> int:
        return self.features.shape[1]

    @property
    def has_decomposition(self) -> bool:
        return self.artist_ids is not None

    @property
    def n_artists(self) -> int:
        return 0 if self.artist_ids is None else int(self.artist_ids.max()) + 1

    @property
    def n_genres(self) -> int:
        return 0 if self.genre_ids is None else int(self.genre_ids.max()) + 1

    def index_of(self, track_ids) -> np.ndarray:
        """Dense row positions for an array of track ids."""
        try:
            return np.array([self._index[int(t)] for t in np.ravel(track_ids)], dtype=np.int64).reshape(
                np.shape(track_ids)
            )
        except KeyError as exc:
            raise DataError(f"unknown track_id {exc.args[0]}") from None

    def __contains__(self, track_id) -> bool:
        return int(track_id) in self._index

    def normalized(self) -> "Catalog":
        """Per-dimension z-scores; near-constant columns become zeros."""
        mu = self.features.mean(axis=0)
        sd = np.maximum(self.features.std(axis=0), STD_CLAMP)
        return replace(self, features=(self.features - mu) / sd)

    @classmethod
    def from_tracks(cls, tracks: Sequence[TrackFeatures]) -> "Catalog":
        tags = [t.artist_id is not None or t.genre_id is not None for t in tracks]
        if any(tags) and not all(tags):
            raise DataError("artist/genre tags must be present on all tracks or none")
        has = bool(tracks) and all(tags)
        return cls(
            [t.track_id for t in tracks],
            np.array([t.features for t in tracks], dtype=np.float64).reshape(len(tracks), -1),
            [t.artist_id for t in tracks] if has else None,
            [t.genre_id for t in tracks] if has else None,
        )


@dataclass
class InteractionSequence:
    """Time-ordered events of one user or session, stored as parallel arrays."""

    seq_id: int
    track_ids: np.ndarray
    feedback: np.ndarray
    timestamps: np.ndarray
    station: int | None = None

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        self.feedback = np.asarray(self.feedback, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.track_ids) == len(self.feedback) == len(self.timestamps)):
            raise DataError(f"sequence {self.seq_id}: ragged event arrays")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) < 0):
            order = np.argsort(self.timestamps, kind="stable")
            self.track_ids = self.track_ids[order]
            self.feedback = self.feedback[order]
            self.timestamps = self.timestamps[order]

    def __len__(self) -> int:
        return len(self.track_ids)

    @property
    def events(self) -> list[Interaction]:
        return [
            Interaction(int(t), int(f), int(s))
            for t, f, s in zip(self.track_ids, self.feedback, self.timestamps)
        ]

    def take(self, mask) -> "InteractionSequence":
        return InteractionSequence(
            self.seq_id,
            self.track_ids[mask],
            self.feedback[mask],
            self.timestamps[mask],
            self.station,
        )

    def last(self, n: int) -> "InteractionSequence":
        return self.take(slice(max(len(self) - n, 0), None))

    @classmethod
    def from_events(cls, seq_id: int, events: Sequence[Interaction], station=None):
        return cls(
            seq_id,
            [e.track_id for e in events],
            [e.feedback for e in events],
            [e.timestamp for e in events],
            station,
        )


@dataclass
class TestEntry:
    """One sequence's held-out window: the input prefix plus pos/neg test events."""

    seq_id: int
    prefix: InteractionSequence
    positives: np.ndarray
    negatives: np.ndarray
    station: int | None = None

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(int(p), int(n)) for p in self.positives for n in self.negatives]

    @property
    def input_length(self) -> int:
        return len(self.prefix)


@dataclass
class SplitDataset:
    train: list[InteractionSequence]
    test_pairs: list[TestEntry]
    cutoff: float
    n_excluded: int = 0


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_catalog(path: str | Path, normalize: bool = True) -> Catalog:
    """Read ``track_id,artist_id,genre_id,f0..`` CSV; z-score the features."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty catalog file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["track_id", "artist_id", "genre_id"] or len(header) < 4:
            raise DataError(f"{path}: header must start with track_id,artist_id,genre_id,f0")
        d_f = len(header) - 3
        ids, arts, gens, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                ids.append(int(row[0]))
                arts.append(int(row[1]) if row[1].strip() else None)
                gens.append(int(row[2]) if row[2].strip() else None)
                feats.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DataError(f"{path}: duplicate track_id {dup}")
    tagged = [a is not None and g is not None for a, g in zip(arts, gens)]
    if any(tagged) and not all(tagged):
        raise DataError(f"{path}: artist/genre columns must be filled on all rows or none")
    has_tags = bool(tagged) and all(tagged)
    cat = Catalog(
        ids,
        np.array(feats, dtype=np.float64).reshape(len(ids), d_f),
        arts if has_tags else None,
        gens if has_tags else None,
    )
    return cat.normalized() if normalize else cat


def write_catalog(catalog: Catalog, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "artist_id", "genre_id"] + [f"f{j}" for j in range(catalog.d_f)])
        for i in range(len(catalog)):
            a = "" if catalog.artist_ids is None else int(catalog.artist_ids[i])
            g = "" if catalog.genre_ids is None else int(catalog.genre_ids[i])
            w.writerow([int(catalog.track_ids[i]), a, g] + [f"{v:.9g}" for v in catalog.features[i]])


def load_interactions(
    path: str | Path, catalog: Catalog | None = None, max_len: int = DEFAULT_MAX_LEN
) -> list[InteractionSequence]:
    """Group JSONL events by ``seq_id``, sort by time, keep the last ``max_len``.

    An optional integer ``station`` key on a line labels that sequence's radio seed.
    """
    path = Path(path)
    groups: dict[int, list[tuple[int, int, int]]] = {}
    stations: dict[int, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid, tid, ts = int(obj["seq_id"]), int(obj["track_id"]), int(obj["ts"])
                fb = _FEEDBACK_CODES[obj["feedback"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed interaction ({exc!r})") from None
            if catalog is not None and tid not in catalog:
                raise DataError(f"{path}:{lineno}: unknown track_id {tid}")
            groups.setdefault(sid, []).append((ts, tid, fb))
            if "station" in obj and obj["station"] is not None:
                stations[sid] = int(obj["station"])
    out = []
    for sid in sorted(groups):
        ev = sorted(groups[sid], key=lambda e: e[0])[-max_len:]
        out.append(
            InteractionSequence(
                sid, [e[1] for e in ev], [e[2] for e in ev], [e[0] for e in ev], stations.get(sid)
            )
        )
    return out


def write_interactions(sequences: Sequence[InteractionSequence], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seq in sequences:
            for t, f, s in zip(seq.track_ids, seq.feedback, seq.timestamps):
                rec = {"seq_id": int(seq.seq_id), "track_id": int(t), "feedback": _FEEDBACK_NAMES[int(f)], "ts": int(s)}
                if seq.station is not None:
                    rec["station"] = int(seq.station)
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_tracks: int = 10_000
    n_artists: int = 1_000
    n_genres: int = 20
    d_f: int = 16
    n_users: int = 2_000
    events_per_user_range: tuple[int, int] = (20, 120)
    noise_sigma: float = 0.25
    artist_sigma: float = 0.5
    user_sigma: float = 0.5
    affinity_scale: float = 6.0
    affinity_bias: float = 0.0
    station_prob: float = 0.2
    t_max: int = 1_000_000
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.n_genres <= self.n_artists <= self.n_tracks):
            raise ValueError("need 1 <= n_genres <= n_artists <= n_tracks")
        lo, hi = self.events_per_user_range
        if lo < 1 or hi < lo:
            raise ValueError("events_per_user_range must satisfy 1 <= lo <= hi")
        if self.d_f < 1 or self.n_users < 1:
            raise ValueError("d_f and n_users must be positive")
        if self.noise_sigma < 0 or self.artist_sigma < 0 or self.user_sigma < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 <= self.station_prob <= 1.0:
            raise ValueError("station_prob must lie in [0, 1]")
        if self.t_max < 1:
            raise ValueError("t_max must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "events_per_user_range" in d:
            d["events_per_user_range"] = tuple(d["events_per_user_range"])
        return cls(**d)


@dataclass
class SynthWorld:
    """Latent quantities behind a synthetic dataset, for oracle scoring."""

    genre_centroids: np.ndarray
    artist_centroids: np.ndarray
    user_prefs: dict[int, np.ndarray] = field(default_factory=dict)
    affinity_scale: float = 6.0
    affinity_bias: float = 0.0

    def affinity(self, seq_id: int, raw_features: np.ndarray) -> np.ndarray:
        u = self.user_prefs[seq_id]
        return _cosine(raw_features, u)


def _cosine(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    num = x @ u
    den = np.linalg.norm(x, axis=-1) * np.linalg.norm(u)
    return num / np.maximum(den, 1e-12)


def synth_generate(cfg: SynthConfig, return_world: bool = False):
    """Sample a catalog and feedback sequences from a genre > artist > track hierarchy.

    Feedback on a played track is positive with probability
    ``sigmoid(affinity_scale * cos(user_pref, features) + affinity_bias)``.
    Each play comes from the user's station genres with probability
    ``station_prob``, otherwise uniformly from the catalog.
    """
    cfg.validate()
    rng = Rng(cfg.seed)
    d = cfg.d_f
    genre_c = rng.normal(size=(cfg.n_genres, d))
    # every genre gets at least one artist, every artist at least one track
    artist_genre = np.concatenate(
        [np.arange(cfg.n_genres), rng.integers(0, cfg.n_genres, cfg.n_artists - cfg.n_genres)]
    )
    artist_c = genre_c[artist_genre] + cfg.artist_sigma * rng.normal(size=(cfg.n_artists, d))
    track_artist = np.concatenate(
        [np.arange(cfg.n_artists), rng.integers(0, cfg.n_artists, cfg.n_tracks - cfg.n_artists)]
    )
    track_artist = track_artist[rng.permutation(cfg.n_tracks)]
    feats = artist_c[track_artist] + cfg.noise_sigma * rng.normal(size=(cfg.n_tracks, d))
    track_genre = artist_genre[track_artist]
    catalog = Catalog(np.arange(cfg.n_tracks), feats, track_artist, track_genre)

    by_genre = [np.flatnonzero(track_genre == g) for g in range(cfg.n_genres)]
    world = SynthWorld(genre_c, artist_c, affinity_scale=cfg.affinity_scale, affinity_bias=cfg.affinity_bias)
    lo, hi = cfg.events_per_user_range
    sequences = []
    for u in range(cfg.n_users):
        n_g = int(rng.integers(1, min(3, cfg.n_genres) + 1))
        genres = rng.choice(cfg.n_genres, size=n_g, replace=False)
        weights = rng.uniform(0.2, 1.0, size=n_g)
        weights /= weights.sum()
        pref = weights @ genre_c[genres] + cfg.user_sigma * rng.normal(size=d)
        world.user_prefs[u] = pref
        station = int(genres[np.argmax(weights)])

        n_ev = int(rng.integers(lo, hi + 1))
        start = rng.uniform(0, cfg.t_max)
        ts = np.sort(rng.uniform(start, cfg.t_max, size=n_ev)).astype(np.int64)
        from_station = rng.uniform(size=n_ev) < cfg.station_prob
        tracks = rng.integers(0, cfg.n_tracks, size=n_ev)
        for j in np.flatnonzero(from_station):
            g = genres[rng.categorical(weights)]
            tracks[j] = by_genre[g][rng.integers(0, len(by_genre[g]))]
        logits = cfg.affinity_scale * _cosine(feats[tracks], pref) + cfg.affinity_bias
        p = 1.0 / (1.0 + np.exp(-logits))
        fb = (rng.uniform(size=n_ev) < p).astype(np.int64)
        sequences.append(InteractionSequence(u, tracks, fb, ts, station))
    if return_world:
        return catalog, sequences, world
    return catalog, sequences


def write_dataset(catalog: Catalog, sequences: Sequence[InteractionSequence], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, out / "catalog.csv")
    write_interactions(sequences, out / "interactions.jsonl")


def load_dataset(data_dir: str | Path, max_len: int = DEFAULT_MAX_LEN, normalize: bool = True):
    d = Path(data_dir)
    catalog = load_catalog(d / "catalog.csv", normalize=normalize)
    sequences = load_interactions(d / "interactions.jsonl", catalog, max_len=max_len)
    return catalog, sequences


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def time_split(
    sequences: Sequence[InteractionSequence], test_fraction: float = 0.2
) -> SplitDataset:
    """Cut all sequences at one global time; later events form the test window.

    The cutoff sits at the ``1 - test_fraction`` point of the global timestamp
    range.  A sequence yields a test entry only if its window holds at least one
    positive and one negative event and its pre-window prefix is non-empty.
    """
    if not 0.0 < test_fraction < 0.5:
        raise ValueError("test_fraction must lie in (0, 0.5)")
    nonempty = [s for s in sequences if len(s)]
    if not nonempty:
        raise DataError("time_split: no events")
    t_min = min(int(s.timestamps[0]) for s in nonempty)
    t_max = max(int(s.timestamps[-1]) for s in nonempty)
    cutoff = t_min + (1.0 - test_fraction) * (t_max - t_min)

    train, test, excluded = [], [], 0
    for s in nonempty:
        before = s.timestamps <= cutoff
        prefix = s.take(before)
        if len(prefix):
            train.append(prefix)
        window = s.take(~before)
        if not len(window):
            continue
        pos = window.track_ids[window.feedback == POSITIVE]
        neg = window.track_ids[window.feedback == NEGATIVE]
        if len(prefix) and len(pos) and len(neg):
            test.append(TestEntry(s.seq_id, prefix, pos, neg, s.station))
        else:
            excluded += 1
    return SplitDataset(train, test, cutoff, excluded)


def positive_fraction(sequences: Sequence[InteractionSequence]) -> float:
    n = sum(len(s) for s in sequences)
    pos = sum(int(s.feedback.sum()) for s in sequences)
    return pos / n if n else math.nan
