"""A SASRec-style causal transformer for next-track feedback prediction.

Input tokens are ``track embedding + feedback-type embedding + position
embedding``.  The track embedding depends on the mode:

* ``baseline``: one learned row per track;
* ``semantic``: the sum of one row per semantic-ID level plus a tie-break row;
* ``*_decomposed``: either of the above plus artist and genre rows.

Scores are dot products between a user state and the (same) track embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import POSITIVE, Catalog, InteractionSequence, SplitDataset, time_split
from .numerics import Parameter, Rng, Tensor
from .semid import (
    BASELINE_DECOMPOSED,
    MODES,
    SEMANTIC,
    SEMANTIC_DECOMPOSED,
    IdTable,
    ModelDims,
    param_count,
    tiebreak_rows,
)

FORMAT_VERSION = 1
_MASK = -1e9


@dataclass
class RecModelConfig:
    h: int = 60
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    mode: str = "baseline"
    k: int | None = None
    n: int | None = None
    tiebreak_buckets: int = 64
    tiebreak_embedding: bool = True
    dropout: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 3
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, not {self.dtype!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.h % self.n_heads:
            raise ValueError(f"h={self.h} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 1 or self.n_layers < 0:
            raise ValueError("max_len must be >= 1 and n_layers >= 0")

    @property
    def semantic(self) -> bool:
        return self.mode in (SEMANTIC, SEMANTIC_DECOMPOSED)

    @property
    def decomposed(self) -> bool:
        return self.mode in (BASELINE_DECOMPOSED, SEMANTIC_DECOMPOSED)

    @classmethod
    def from_dict(cls, d: dict) -> "RecModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class TrackEmbedder:
    def __init__(self, cfg: RecModelConfig, catalog: Catalog, id_table: IdTable | None, rng: Rng):
        h = cfg.h
        std = h**-0.5
        self.mode = cfg.mode
        self.dtype = np.dtype(cfg.dtype)
        self.n_tracks = len(catalog)
        self.params: list[Parameter] = []
        self.tables: dict[str, Parameter] = {}
        self.artist_rows = self.genre_rows = None
        self.code_idx = self.tb_row = None
        if cfg.decomposed:
            if not catalog.has_decomposition:
                raise ValueError(f"mode {cfg.mode!r} needs artist/genre tags in the catalog")
            self.artist_rows = catalog.artist_ids.copy()
            self.genre_rows = catalog.genre_ids.copy()
        if cfg.semantic:
            if id_table is None:
                raise ValueError(f"mode {cfg.mode!r} needs an IdTable")
            missing = [int(t) for t in catalog.track_ids if t not in id_table]
            if missing:
                raise KeyError(f"no semantic ID for track {missing[0]}")
            rows = id_table.rows_for(catalog.track_ids)
            self.code_idx = id_table.codes[rows]
            tb = id_table.tiebreaks[rows]
            self.n_tb = tiebreak_rows(id_table.max_tiebreak, cfg.tiebreak_buckets, cfg.tiebreak_embedding)
            # tie-break 0 maps to no row; t >= 1 to row min(t, n_tb) - 1
            self.tb_row = np.where(tb > 0, np.minimum(tb, max(self.n_tb, 1)) - 1, -1)
            if self.n_tb == 0:
                self.tb_row[:] = -1
            for lvl in range(id_table.n):
                self._add(f"emb.level{lvl}", rng.normal(0, std, (id_table.k, h)))
            if self.n_tb:
                self._add("emb.tiebreak", rng.normal(0, std, (self.n_tb, h)))
        else:
            self._add("emb.song", rng.normal(0, std, (self.n_tracks, h)))
        if cfg.decomposed:
            self._add("emb.artist", rng.normal(0, std, (int(self.artist_rows.max()) + 1, h)))
            self._add("emb.genre", rng.normal(0, std, (int(self.genre_rows.max()) + 1, h)))

    def _add(self, name: str, value: np.ndarray) -> None:
        p = Parameter(value, name, self.dtype)
        self.tables[name] = p
        self.params.append(p)

    def __call__(self, rows) -> Tensor:
        """Track embeddings for dense row indices of any shape."""
        rows = np.asarray(rows, dtype=np.int64)
        if "emb.song" in self.tables:
            out = nx.embedding_lookup(self.tables["emb.song"], rows)
        else:
            codes = self.code_idx[rows]
            out = None
            for lvl in range(codes.shape[-1]):
                e = nx.embedding_lookup(self.tables[f"emb.level{lvl}"], codes[..., lvl])
                out = e if out is None else out + e
            if "emb.tiebreak" in self.tables:
                tb = self.tb_row[rows]
                e = nx.embedding_lookup(self.tables["emb.tiebreak"], np.maximum(tb, 0))
                out = out + e * (tb >= 0)[..., None]
        if self.artist_rows is not None:
            out = out + nx.embedding_lookup(self.tables["emb.artist"], self.artist_rows[rows])
            out = out + nx.embedding_lookup(self.tables["emb.genre"], self.genre_rows[rows])
        return out


class RecModel:
    def __init__(self, cfg: RecModelConfig, catalog: Catalog, id_table: IdTable | None = None):
        self.config = cfg
        rng = Rng(cfg.seed)
        self.track_ids = catalog.track_ids.copy()
        self._row = {int(t): i for i, t in enumerate(self.track_ids)}
        self.embedder = TrackEmbedder(cfg, catalog, id_table, rng)
        self.id_table = id_table if cfg.semantic else None
        h = cfg.h
        std = h**-0.5
        dt = np.dtype(cfg.dtype)
        self.feedback_emb = Parameter(rng.normal(0, std, (2, h)), "feedback_emb", dt)
        self.pos_emb = Parameter(rng.normal(0, std, (cfg.max_len, h)), "pos_emb", dt)
        self.blocks: list[dict[str, Parameter]] = []
        for i in range(cfg.n_layers):
            b = {}
            for nm in ("ln1", "ln2"):
                b[f"{nm}.g"] = Parameter(np.ones(h), f"block{i}.{nm}.g", dt)
                b[f"{nm}.b"] = Parameter(np.zeros(h), f"block{i}.{nm}.b", dt)
            for nm in ("q", "k", "v", "o", "ff1", "ff2"):
                b[f"{nm}.w"] = Parameter(rng.normal(0, std, (h, h)), f"block{i}.{nm}.w", dt)
                b[f"{nm}.b"] = Parameter(np.zeros(h), f"block{i}.{nm}.b", dt)
            self.blocks.append(b)
        self.final_g = Parameter(np.ones(h), "final_ln.g", dt)
        self.final_b = Parameter(np.zeros(h), "final_ln.b", dt)
        self.history: list[dict] = []

    # -- bookkeeping ---------------------------------------------------------

    @property
    def params(self) -> list[Parameter]:
        ps = list(self.embedder.params) + [self.feedback_emb, self.pos_emb]
        for b in self.blocks:
            ps.extend(b.values())
        return ps + [self.final_g, self.final_b]

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params))

    def expected_param_count(self) -> dict[str, int]:
        cfg = self.config
        dims = ModelDims(
            max_len=cfg.max_len,
            n_layers=cfg.n_layers,
            n_artists=0 if self.embedder.artist_rows is None else self.embedder.tables["emb.artist"].shape[0],
            n_genres=0 if self.embedder.genre_rows is None else self.embedder.tables["emb.genre"].shape[0],
            tiebreak_buckets=cfg.tiebreak_buckets,
            tiebreak_embedding=cfg.tiebreak_embedding,
        )
        t = self.id_table
        return param_count(
            len(self.track_ids),
            cfg.h,
            cfg.mode,
            k=None if t is None else t.k,
            n=None if t is None else t.n,
            max_tiebreak=0 if t is None else t.max_tiebreak,
            dims=dims,
        )

    def rows(self, track_ids) -> np.ndarray:
        try:
            return np.array([self._row[int(t)] for t in np.ravel(track_ids)], dtype=np.int64).reshape(
                np.shape(track_ids)
            )
        except KeyError as exc:
            raise KeyError(f"track {exc.args[0]} is not in the model's catalog") from None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p in self.params:
            p.data[...] = snap[p.name]

    # -- forward -------------------------------------------------------------

    def forward(self, rows: np.ndarray, feedback: np.ndarray, training: bool = False, rng: Rng | None = None) -> Tensor:
        """States for a right-padded batch: ``rows``/``feedback`` are (B, T) -> (B, T, h)."""
        cfg = self.config
        rows = np.asarray(rows, dtype=np.int64)
        feedback = np.asarray(feedback, dtype=np.int64)
        if rows.ndim != 2 or rows.shape[1] == 0:
            raise ValueError("forward needs a non-empty (batch, time) input")
        B, T = rows.shape
        if T > cfg.max_len:
            raise ValueError(f"input length {T} exceeds max_len {cfg.max_len}")
        h, H = cfg.h, cfg.n_heads
        dh = h // H
        p_drop = cfg.dropout if training else 0.0

        x = self.embedder(rows) + nx.embedding_lookup(self.feedback_emb, feedback)
        x = x + self.pos_emb[:T]
        x = nx.dropout(x, p_drop, rng, training)
        mask = np.triu(np.full((T, T), _MASK), k=1)
        for b in self.blocks:
            a = nx.layernorm(x, b["ln1.g"], b["ln1.b"])

            def heads(t):
                return nx.transpose(nx.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

            q = heads(nx.linear(a, b["q.w"], b["q.b"]))
            k = heads(nx.linear(a, b["k.w"], b["k.b"]))
            v = heads(nx.linear(a, b["v.w"], b["v.b"]))
            att = nx.softmax(q @ nx.swap_last(k) * (1.0 / math.sqrt(dh)) + mask, axis=-1)
            o = nx.reshape(nx.transpose(att @ v, (0, 2, 1, 3)), (B, T, h))
            x = x + nx.dropout(nx.linear(o, b["o.w"], b["o.b"]), p_drop, rng, training)
            f = nx.layernorm(x, b["ln2.g"], b["ln2.b"])
            f = nx.linear(nx.gelu(nx.linear(f, b["ff1.w"], b["ff1.b"])), b["ff2.w"], b["ff2.b"])
            x = x + nx.dropout(f, p_drop, rng, training)
        return nx.layernorm(x, self.final_g, self.final_b)

    def states(self, sequences: Sequence[InteractionSequence]) -> np.ndarray:
        """Final-position state for each sequence (last ``max_len`` events)."""
        if any(len(s) == 0 for s in sequences):
            raise ValueError("cannot compute a state for an empty sequence")
        rows, fb, lengths = self._pad([s.last(self.config.max_len) for s in sequences])
        out = self.forward(rows, fb).data
        return out[np.arange(len(sequences)), lengths - 1]

    def _pad(self, seqs: Sequence[InteractionSequence]):
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lengths.max())
        rows = np.zeros((len(seqs), T), dtype=np.int64)
        fb = np.zeros((len(seqs), T), dtype=np.int64)
        for i, s in enumerate(seqs):
            rows[i, : len(s)] = self.rows(s.track_ids)
            fb[i, : len(s)] = s.feedback
        return rows, fb, lengths

    def track_vectors(self, track_ids) -> np.ndarray:
        return self.embedder(self.rows(track_ids)).data

    def all_track_vectors(self) -> np.ndarray:
        return self.embedder(np.arange(len(self.track_ids))).data

    # -- training loss -------------------------------------------------------

    def batch_loss(self, rows, feedback, lengths, negatives, training=False, rng=None) -> Tensor:
        """Mean BCE over next-event targets and sampled negatives.

        Position t is scored against event t+1: a positive next event is a
        positive target and is paired with one sampled negative track; a
        negative next event is itself a negative target.
        """
        rows = np.asarray(rows)
        B, T = rows.shape
        states = self.forward(rows, feedback, training, rng)[:, : T - 1]
        valid = (np.arange(1, T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
        nxt = rows[:, 1:]
        y = (np.asarray(feedback)[:, 1:] == POSITIVE).astype(np.float64)
        cand = np.stack([nxt, np.asarray(negatives)[:, : T - 1]], axis=-1)
        emb = self.embedder(cand)
        logits = (nx.reshape(states, (B, T - 1, 1, self.config.h)) * emb).sum(axis=-1)
        labels = np.stack([y, np.zeros_like(y)], axis=-1)
        weights = np.stack([valid, valid * y], axis=-1)
        denom = max(weights.sum(), 1.0)
        return (nx.bce_with_logits(logits, labels) * weights).sum() * (1.0 / denom)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def embed_track(track_id: int, model: RecModel) -> np.ndarray:
    return model.track_vectors([track_id])[0]


def forward(sequence: InteractionSequence, model: RecModel, all_states: bool = False) -> np.ndarray:
    if len(sequence) == 0:
        raise ValueError("empty sequence")
    if len(sequence) > model.config.max_len:
        sequence = sequence.last(model.config.max_len)
    out = model.forward(model.rows(sequence.track_ids)[None, :], sequence.feedback[None, :]).data[0]
    return out if all_states else out[-1]


def score(user_state: np.ndarray, track_id: int, model: RecModel) -> float:
    return float(np.dot(user_state, embed_track(track_id, model)))


def recommend_top_m(model: RecModel, sequence: InteractionSequence, m: int, candidates=None) -> list[int]:
    """Top-``m`` candidate tracks by score; equal scores go to the lower track id."""
    cand = model.track_ids if candidates is None else np.asarray(list(candidates), dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("empty candidate set")
    if m > len(cand):
        raise ValueError(f"m={m} exceeds {len(cand)} candidates")
    state = forward(sequence, model)
    s = model.track_vectors(cand) @ state
    return top_m(cand, s, m)


def top_m(track_ids: np.ndarray, scores: np.ndarray, m: int) -> list[int]:
    order = np.lexsort((track_ids, -scores))
    return [int(t) for t in np.asarray(track_ids)[order[:m]]]


def _windows(seqs: Sequence[InteractionSequence], L: int) -> list[InteractionSequence]:
    """Cut each sequence into consecutive chunks of at most ``L`` events, aligned
    to the most recent event; chunks with fewer than two events are dropped."""
    out = []
    for s in seqs:
        for end in range(len(s), 1, -L):
            out.append(s.take(slice(max(0, end - L), end)))
    return out


def train(
    split: SplitDataset,
    catalog: Catalog,
    cfg: RecModelConfig,
    id_table: IdTable | None = None,
    log=None,
) -> RecModel:
    """Fit a model on ``split.train``, early-stopping on a held-out time window.

    The last ``cfg.val_fraction`` of the training time range supplies the
    validation pairs; the parameters with the best validation stratified AUC
    are kept.
    """
    from .evaluation import stratified_auc

    if not split.train:
        raise ValueError("train split is empty")
    model = RecModel(cfg, catalog, id_table)
    inner = time_split(split.train, cfg.val_fraction)
    seqs = _windows(inner.train, cfg.max_len)
    if not seqs:
        raise ValueError("no training sequence has two or more events")
    rng = Rng(cfg.seed).child(7)
    opt = nx.adam_init(model.params, lr=cfg.lr)
    n_tracks = len(model.track_ids)
    best, best_auc, stale = model.snapshot(), -1.0, 0
    seq_len = np.array([len(s) for s in seqs])
    for epoch in range(cfg.epochs):
        # batches of similar length waste less work on padding
        order = rng.permutation(len(seqs))
        order = order[np.argsort(seq_len[order], kind="stable")]
        starts = list(range(0, len(seqs), cfg.batch_size))
        total, count = 0.0, 0
        for b in rng.permutation(len(starts)):
            batch = [seqs[i] for i in order[starts[b] : starts[b] + cfg.batch_size]]
            rows, fb, lengths = model._pad(batch)
            negs = rng.integers(0, n_tracks, size=rows.shape)
            loss = model.batch_loss(rows, fb, lengths, negs, training=True, rng=rng)
            nx.backward(loss)
            nx.adam_step(model.params, opt)
            total += loss.item() * len(batch)
            count += len(batch)
        rec = {"epoch": epoch, "train_loss": total / count}
        if inner.test_pairs:
            rec["val_auc"] = stratified_auc(model_scorer(model), inner.test_pairs).auc
        model.history.append(rec)
        if log is not None:
            log(f"epoch {epoch}: " + ", ".join(f"{k}={v:.4f}" for k, v in rec.items() if k != "epoch"))
        if not inner.test_pairs:
            best = model.snapshot()
            continue
        if rec["val_auc"] > best_auc:
            best, best_auc, stale = model.snapshot(), rec["val_auc"], 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.restore(best)
    return model


def model_scorer(model: RecModel):
    """Adapter for the evaluator: (prefixes, candidate track-id lists) -> score lists."""

    def scorer(prefixes: Sequence[InteractionSequence], candidates: Sequence[np.ndarray]):
        vectors = model.all_track_vectors()
        out = []
        for s in range(0, len(prefixes), 256):
            states = model.states(prefixes[s : s + 256])
            for st, cand in zip(states, candidates[s : s + 256]):
                out.append(vectors[model.rows(cand)] @ st)
        return out

    return scorer


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_to_dict(model: RecModel) -> dict:
    e = model.embedder
    t = model.id_table
    return {
        "format_version": FORMAT_VERSION,
        "kind": "rec_model",
        "config": asdict(model.config),
        "track_ids": model.track_ids.tolist(),
        "artist_ids": None if e.artist_rows is None else e.artist_rows.tolist(),
        "genre_ids": None if e.genre_rows is None else e.genre_rows.tolist(),
        "id_table": None
        if t is None
        else {
            "track_ids": t.track_ids.tolist(),
            "codes": t.codes.tolist(),
            "tiebreaks": t.tiebreaks.tolist(),
            "k": t.k,
            "n": t.n,
            "variant": t.variant,
        },
        "params": {p.name: p.data.tolist() for p in model.params},
        "history": model.history,
    }


def model_from_dict(d: dict) -> RecModel:
    if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "rec_model":
        raise ValueError("not a recognised model checkpoint")
    cfg = RecModelConfig.from_dict(d["config"])
    tids = np.asarray(d["track_ids"], dtype=np.int64)
    catalog = Catalog(tids, np.zeros((len(tids), 1)), d["artist_ids"], d["genre_ids"])
    t = d["id_table"]
    table = None if t is None else IdTable(t["track_ids"], t["codes"], t["tiebreaks"], t["k"], t["n"], t["variant"])
    model = RecModel(cfg, catalog, table)
    for p in model.params:
        arr = np.asarray(d["params"][p.name], dtype=p.data.dtype)
        if arr.shape != p.shape:
            raise ValueError(f"{p.name}: stored shape {arr.shape} != {p.shape}")
        p.data[...] = arr
    model.history = d.get("history", [])
    return model


def save_model(model: RecModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> RecModel:
    return model_from_dict(json.loads(Path(path).read_text()))
