"""Per-track semantic IDs: trained (v1) or random (v0) codeword tuples plus a
tie-break index, cold-start assignment, and trainable-parameter accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Catalog, DataError
from .numerics import Rng
from .rqvae import CodebookStack, encode, quantize

V0 = "v0"
V1 = "v1"


@dataclass(frozen=True)
class SemanticId:
    codewords: tuple[int, ...]
    tiebreak: int


@dataclass
class IdTable:
    """Semantic IDs for a catalog, rows aligned with ascending ``track_ids``."""

    track_ids: np.ndarray
    codes: np.ndarray
    tiebreaks: np.ndarray
    k: int
    n: int
    variant: str

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.track_ids), self.n)
        self.tiebreaks = np.asarray(self.tiebreaks, dtype=np.int64)
        if self.variant not in (V0, V1):
            raise ValueError(f"unknown variant {self.variant!r}")
        self._row = {int(t): i for i, t in enumerate(self.track_ids)}

    def __len__(self) -> int:
        return len(self.track_ids)

    def __getitem__(self, track_id: int) -> SemanticId:
        i = self._row[int(track_id)]
        return SemanticId(tuple(int(c) for c in self.codes[i]), int(self.tiebreaks[i]))

    def __contains__(self, track_id) -> bool:
        return int(track_id) in self._row

    @property
    def max_tiebreak(self) -> int:
        return int(self.tiebreaks.max()) if len(self.tiebreaks) else 0

    def collision_counts(self) -> dict[tuple[int, ...], int]:
        counts: dict[tuple[int, ...], int] = {}
        for row in map(tuple, self.codes.tolist()):
            counts[row] = counts.get(row, 0) + 1
        return counts

    def is_injective(self) -> bool:
        full = {(tuple(c), int(t)) for c, t in zip(self.codes.tolist(), self.tiebreaks)}
        return len(full) == len(self)

    def rows_for(self, track_ids) -> np.ndarray:
        try:
            return np.array([self._row[int(t)] for t in np.ravel(track_ids)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"no semantic ID for track {exc.args[0]}") from None

    def commit(self, track_id: int, sid: SemanticId) -> "IdTable":
        """A new table with one extra track appended."""
        if int(track_id) in self._row:
            raise ValueError(f"track {track_id} already has an ID")
        return IdTable(
            np.append(self.track_ids, track_id),
            np.vstack([self.codes, np.asarray(sid.codewords)[None, :]]),
            np.append(self.tiebreaks, sid.tiebreak),
            self.k,
            self.n,
            self.variant,
        )


def assign_tiebreaks(codes: np.ndarray) -> np.ndarray:
    """0, 1, 2, ... within each repeated codeword tuple, in row order."""
    seen: dict[tuple[int, ...], int] = {}
    out = np.empty(len(codes), dtype=np.int64)
    for i, row in enumerate(map(tuple, np.asarray(codes).tolist())):
        out[i] = seen.get(row, 0)
        seen[row] = out[i] + 1
    return out


def _sorted(track_ids) -> np.ndarray:
    ids = np.asarray(track_ids, dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise ValueError("duplicate track ids")
    return np.sort(ids)


def assign_v1(catalog: Catalog, stack: CodebookStack) -> IdTable:
    """Trained IDs: encode and quantize every track, ascending track_id order."""
    if catalog.d_f != stack.encoder.in_dim:
        raise ValueError(
            f"catalog has {catalog.d_f} feature dims but the stack expects {stack.encoder.in_dim}"
        )
    codes, _, _ = quantize(encode(catalog.features, stack), stack)
    return IdTable(catalog.track_ids, codes, assign_tiebreaks(codes), stack.k, stack.n_levels, V1)


def assign_v0(track_ids, k: int, n: int, seed: int) -> IdTable:
    """Random IDs: n independent uniform codewords in [0, k) per track."""
    if k < 1 or n < 1:
        raise ValueError("k and n must be >= 1")
    ids = _sorted(track_ids)
    codes = Rng(seed).integers(0, k, size=(len(ids), n))
    return IdTable(ids, codes, assign_tiebreaks(codes), k, n, V0)


def assign_cold_start(features, stack: CodebookStack, table: IdTable) -> SemanticId:
    """ID for an unseen track: quantize its features, take the next free tie-break slot.

    The table is left untouched; use :meth:`IdTable.commit` to add the track.
    """
    if table.variant != V1:
        raise ValueError("cold-start assignment needs a trained (v1) table")
    codes, _, _ = quantize(encode(np.asarray(features, dtype=np.float64), stack), stack)
    key = tuple(int(c) for c in codes)
    taken = int(np.all(table.codes == np.asarray(key), axis=1).sum())
    return SemanticId(key, taken)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_id_table(table: IdTable, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", *[f"c{j}" for j in range(table.n)], "tiebreak", "variant", "k", "n"])
        for t, c, tb in zip(table.track_ids, table.codes, table.tiebreaks):
            w.writerow([int(t), *[int(x) for x in c], int(tb), table.variant, table.k, table.n])


def read_id_table(path: str | Path) -> IdTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "track_id" or header[-4:] != ["tiebreak", "variant", "k", "n"]:
            raise DataError(f"{path}: bad ID table header")
        n = len(header) - 5
        rows = [r for r in reader if r]
    if not rows:
        raise DataError(f"{path}: empty ID table")
    try:
        ids = [int(r[0]) for r in rows]
        codes = [[int(x) for x in r[1 : 1 + n]] for r in rows]
        tbs = [int(r[1 + n]) for r in rows]
        variant, k, n_col = rows[0][2 + n], int(rows[0][3 + n]), int(rows[0][4 + n])
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if n_col != n:
        raise DataError(f"{path}: n column {n_col} disagrees with {n} codeword columns")
    order = np.argsort(ids, kind="stable")
    return IdTable(np.array(ids)[order], np.array(codes).reshape(len(ids), n)[order], np.array(tbs)[order], k, n, variant)


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

BASELINE = "baseline"
BASELINE_DECOMPOSED = "baseline_decomposed"
SEMANTIC = "semantic"
SEMANTIC_DECOMPOSED = "semantic_decomposed"
MODES = (BASELINE, BASELINE_DECOMPOSED, SEMANTIC, SEMANTIC_DECOMPOSED)


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes that enter the closed-form parameter count."""

    max_len: int = 50
    n_layers: int = 2
    n_artists: int = 0
    n_genres: int = 0
    tiebreak_buckets: int = 64
    tiebreak_embedding: bool = True


def tiebreak_rows(max_tiebreak: int, buckets: int, enabled: bool = True) -> int:
    """Rows in the tie-break table.  Tie-break 0 uses no row, so a
    collision-free table needs none; larger values saturate at ``buckets``."""
    return min(max(int(max_tiebreak), 0), buckets) if enabled else 0


def transformer_param_count(h: int, dims: ModelDims) -> int:
    # positional + feedback-type tables
    inputs = dims.max_len * h + 2 * h
    # per block: 2 layernorms, q/k/v/o projections, two-layer width-h feed-forward
    block = 2 * (2 * h) + 4 * (h * h + h) + 2 * (h * h + h)
    final_norm = 2 * h
    return inputs + dims.n_layers * block + final_norm


def param_count(
    n_tracks: int,
    h: int,
    mode: str,
    k: int | None = None,
    n: int | None = None,
    max_tiebreak: int = 0,
    dims: ModelDims = ModelDims(),
) -> dict[str, int]:
    """Closed-form trainable-parameter totals for a recommender configuration."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode in (BASELINE, BASELINE_DECOMPOSED):
        emb = n_tracks * h
    else:
        if k is None or n is None:
            raise ValueError("semantic modes need k and n")
        emb = (n * k + tiebreak_rows(max_tiebreak, dims.tiebreak_buckets, dims.tiebreak_embedding)) * h
    if mode in (BASELINE_DECOMPOSED, SEMANTIC_DECOMPOSED):
        emb += (dims.n_artists + dims.n_genres) * h
    tr = transformer_param_count(h, dims)
    return {"embedding_params": int(emb), "transformer_params": int(tr), "total": int(emb + tr)}


def embedding_reduction(baseline: dict[str, int], semantic: dict[str, int]) -> float:
    return 1.0 - semantic["embedding_params"] / baseline["embedding_params"]
