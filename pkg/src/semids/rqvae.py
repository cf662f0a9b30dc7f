"""Residual-quantized autoencoder over track content features.

The encoder maps features to a latent vector, which is quantized greedily by a
stack of codebooks: each level picks the codeword nearest to what the previous
levels left over.  Codebooks are learned by exponential moving averages; the
encoder and decoder by Adam through a straight-through estimator.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import Catalog
from .numerics import Parameter, Rng, Tensor

FORMAT_VERSION = 1
_CHUNK = 2048


@dataclass
class RqvaeConfig:
    d_f: int = 16
    d_z: int = 16
    n_levels: int = 4
    codebook_size: int = 256
    hidden: tuple[int, ...] = (32, 32)
    beta_commit: float = 0.25
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    ema_decay: float = 0.99
    kmeans_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_levels < 1 or self.codebook_size < 1 or self.d_z < 1 or self.d_f < 1:
            raise ValueError("n_levels, codebook_size, d_z and d_f must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RqvaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown rqvae config keys: {sorted(unknown)}")
        return cls(**d)


class Mlp:
    """Dense layers with GELU between them; the last layer is linear."""

    def __init__(self, sizes: list[int], rng: Rng, prefix: str):
        self.params: list[Parameter] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params.append(Parameter(rng.normal(0, 1 / np.sqrt(a), (a, b)), f"{prefix}.l{i}.w"))
            self.params.append(Parameter(np.zeros(b), f"{prefix}.l{i}.b"))

    @property
    def in_dim(self) -> int:
        return self.params[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params[-1].shape[0]

    def __call__(self, x) -> Tensor:
        h = nx.as_tensor(x)
        n = len(self.params) // 2
        for i in range(n):
            h = nx.linear(h, self.params[2 * i], self.params[2 * i + 1])
            if i < n - 1:
                h = nx.gelu(h)
        return h

    def state(self) -> dict[str, list]:
        return {p.name: p.data.tolist() for p in self.params}

    def load(self, state: dict[str, list]) -> None:
        for p in self.params:
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{p.name}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr


@dataclass
class CodebookStack:
    config: RqvaeConfig
    codebooks: list[np.ndarray]
    encoder: Mlp
    decoder: Mlp
    usage_counts: list[np.ndarray] = field(default_factory=list)

    @property
    def n_levels(self) -> int:
        return len(self.codebooks)

    @property
    def k(self) -> int:
        return self.codebooks[0].shape[0]

    @property
    def params(self) -> list[Parameter]:
        return self.encoder.params + self.decoder.params


def init_stack(cfg: RqvaeConfig) -> CodebookStack:
    rng = Rng(cfg.seed)
    enc = Mlp([cfg.d_f, *cfg.hidden, cfg.d_z], rng, "encoder")
    dec = Mlp([cfg.d_z, *cfg.hidden, cfg.d_f], rng, "decoder")
    books = [rng.normal(0, 0.1, (cfg.codebook_size, cfg.d_z)) for _ in range(cfg.n_levels)]
    usage = [np.zeros(cfg.codebook_size, dtype=np.int64) for _ in range(cfg.n_levels)]
    return CodebookStack(cfg, books, enc, dec, usage)


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what}: expected trailing dimension {dim}, got shape {np.shape(x)}")
    return x, single


def encode(features, stack: CodebookStack) -> np.ndarray:
    x, single = _as_batch(features, stack.encoder.in_dim, "encode")
    z = stack.encoder(x).data
    return z[0] if single else z


def decode(quantized, stack: CodebookStack) -> np.ndarray:
    q, single = _as_batch(quantized, stack.decoder.in_dim, "decode")
    out = stack.decoder(q).data
    return out[0] if single else out


def nearest(x: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Row-wise index of the closest codeword (squared Euclidean, lowest index on ties)."""
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    out = np.empty(len(x), dtype=np.int64)
    c_sq = np.einsum("kd,kd->k", codebook, codebook)
    for s in range(0, len(x), _CHUNK):
        xb = x[s : s + _CHUNK]
        # |x|^2 is constant per row and dropped
        out[s : s + _CHUNK] = np.argmin(c_sq[None, :] - 2.0 * (xb @ codebook.T), axis=1)
    return out


def quantize_residuals(latents: np.ndarray, codebooks: list[np.ndarray]):
    """Greedy residual quantization of a batch.

    Returns ``(codes (B, n), quantized (B, d_z), residual_norms (B, n+1),
    residuals_in (n, B, d_z))`` where ``residuals_in[l]`` is the input to level l.
    """
    if not codebooks:
        raise ValueError("empty codebook stack")
    r = np.array(latents, dtype=np.float64)
    B = len(r)
    codes = np.empty((B, len(codebooks)), dtype=np.int64)
    norms = np.empty((B, len(codebooks) + 1))
    res_in = np.empty((len(codebooks), B, r.shape[1]))
    norms[:, 0] = np.linalg.norm(r, axis=1)
    for lvl, cb in enumerate(codebooks):
        res_in[lvl] = r
        idx = nearest(r, cb)
        codes[:, lvl] = idx
        r = r - cb[idx]
        norms[:, lvl + 1] = np.linalg.norm(r, axis=1)
    quantized = np.zeros_like(r)
    for lvl, cb in enumerate(codebooks):
        quantized = quantized + cb[codes[:, lvl]]
    return codes, quantized, norms, res_in


def quantize(latent, stack: CodebookStack):
    """Codeword indices, quantized vector and residual norms for one latent or a batch."""
    z, single = _as_batch(latent, stack.codebooks[0].shape[1] if stack.codebooks else -1, "quantize")
    codes, q, norms, _ = quantize_residuals(z, stack.codebooks)
    if single:
        return codes[0], q[0], norms[0]
    return codes, q, norms


def rqvae_loss(features, stack: CodebookStack, *, return_aux: bool = False):
    """Reconstruction + codebook + commitment loss, averaged over the batch.

    Per sample: ``|x - dec(q)|^2 + sum_l (|sg(r_l) - c_l|^2 + beta |r_l - sg(c_l)|^2)``
    with ``q`` passed straight through to the encoder.  Only the encoder and
    decoder receive gradients.
    """
    x, _ = _as_batch(features, stack.encoder.in_dim, "rqvae_loss")
    z = stack.encoder(x)
    codes, q, norms, res_in = quantize_residuals(z.data, stack.codebooks)
    chosen = [cb[codes[:, lvl]] for lvl, cb in enumerate(stack.codebooks)]

    z_st = z + (q - z.data)
    recon = stack.decoder(z_st)
    d = recon - x
    loss = (d * d).sum(axis=1)

    commit = 0.0
    book = np.zeros(len(x))
    prefix = np.zeros_like(q)
    for lvl, c in enumerate(chosen):
        r = z - prefix
        diff = r - c
        commit = commit + (diff * diff).sum(axis=1)
        book += ((res_in[lvl] - c) ** 2).sum(axis=1)
        prefix = prefix + c
    loss = loss + book + stack.config.beta_commit * commit
    total = loss.mean()
    if return_aux:
        return total, {"codes": codes, "residuals": res_in, "residual_norms": norms}
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def kmeans(x: np.ndarray, k: int, iters: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm seeded from distinct data rows; returns (centers, assignment)."""
    n = len(x)
    centers = x[rng.choice(n, size=k, replace=k > n)].copy()
    assign = nearest(x, centers)
    for _ in range(iters):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        dead = np.flatnonzero(~live)
        if len(dead):
            centers[dead] = x[rng.choice(n, size=len(dead), replace=len(dead) > n)]
        assign = nearest(x, centers)
    return centers, assign


class _Ema:
    def __init__(self, codebook: np.ndarray, counts: np.ndarray, decay: float):
        self.decay = decay
        self.size = counts.astype(np.float64)
        self.sum = codebook * self.size[:, None]
        self.eps = 1e-5

    def update(self, residual: np.ndarray, idx: np.ndarray, codebook: np.ndarray) -> None:
        k = len(codebook)
        counts = np.bincount(idx, minlength=k).astype(np.float64)
        sums = np.zeros_like(codebook)
        np.add.at(sums, idx, residual)
        self.size = self.decay * self.size + (1 - self.decay) * counts
        self.sum = self.decay * self.sum + (1 - self.decay) * sums
        total = self.size.sum()
        smoothed = (self.size + self.eps) / (total + k * self.eps) * total
        codebook[...] = self.sum / smoothed[:, None]

    def reseed(self, rows: np.ndarray, values: np.ndarray, codebook: np.ndarray) -> None:
        codebook[rows] = values
        mean_size = max(self.size.mean(), self.eps)
        self.size[rows] = mean_size
        self.sum[rows] = values * mean_size


def train_rqvae(catalog: Catalog, cfg: RqvaeConfig, log=None) -> CodebookStack:
    """Fit encoder, decoder and codebooks on the catalog's feature vectors.

    The first epoch trains a plain autoencoder; its latents seed every level's
    codebook by k-means on successive residuals.  After each later epoch (but the
    last) codewords that received no assignments are moved onto random residuals.
    A final Lloyd step per level aligns the codebooks with the trained encoder.
    """
    if len(catalog) == 0:
        raise ValueError("train_rqvae: empty catalog")
    x_all = np.asarray(catalog.features, dtype=np.float64)
    n = len(x_all)
    if cfg.d_f != x_all.shape[1]:
        raise ValueError(f"train_rqvae: config d_f={cfg.d_f} but catalog has {x_all.shape[1]}")
    if cfg.codebook_size > n:
        warnings.warn(
            f"codebook_size {cfg.codebook_size} exceeds catalog size {n}; clamping", stacklevel=2
        )
        cfg = RqvaeConfig(**{**asdict(cfg), "codebook_size": n})
    stack = init_stack(cfg)
    rng = Rng(cfg.seed).child(1)
    opt = nx.adam_init(stack.params, lr=cfg.lr)
    bs = max(1, min(cfg.batch_size, n))

    # warm-up: plain autoencoder
    for rows in _batches(n, bs, rng):
        xb = x_all[rows]
        d = stack.decoder(stack.encoder(xb)) - xb
        nx.backward((d * d).sum(axis=1).mean())
        nx.adam_step(stack.params, opt)

    z_all = encode(x_all, stack)
    emas = []
    r = z_all
    for lvl in range(cfg.n_levels):
        centers, assign = kmeans(r, cfg.codebook_size, cfg.kmeans_iters, rng)
        stack.codebooks[lvl] = centers
        counts = np.bincount(assign, minlength=cfg.codebook_size) * (bs / n)
        emas.append(_Ema(centers, counts, cfg.ema_decay))
        r = r - centers[assign]

    for epoch in range(1, max(cfg.epochs, 1)):
        usage = [np.zeros(cfg.codebook_size, dtype=np.int64) for _ in range(cfg.n_levels)]
        seen = [[] for _ in range(cfg.n_levels)]
        total = 0.0
        for rows in _batches(n, bs, rng):
            xb = x_all[rows]
            loss, aux = rqvae_loss(xb, stack, return_aux=True)
            nx.backward(loss)
            nx.adam_step(stack.params, opt)
            total += loss.item() * len(xb)
            for lvl in range(cfg.n_levels):
                idx = aux["codes"][:, lvl]
                usage[lvl] += np.bincount(idx, minlength=cfg.codebook_size)
                seen[lvl].append(aux["residuals"][lvl])
                emas[lvl].update(aux["residuals"][lvl], idx, stack.codebooks[lvl])
        stack.usage_counts = usage
        if log is not None:
            log(f"rqvae epoch {epoch}: loss {total / n:.4f}")
        if epoch < cfg.epochs - 1:
            for lvl in range(cfg.n_levels):
                dead = np.flatnonzero(usage[lvl] == 0)
                if len(dead):
                    pool = np.concatenate(seen[lvl])
                    pick = rng.choice(len(pool), size=len(dead), replace=len(dead) > len(pool))
                    emas[lvl].reseed(dead, pool[pick], stack.codebooks[lvl])
    _refit(stack, encode(x_all, stack))
    if cfg.epochs <= 1:
        codes, *_ = quantize_residuals(encode(x_all, stack), stack.codebooks)
        stack.usage_counts = [np.bincount(codes[:, l], minlength=cfg.codebook_size) for l in range(cfg.n_levels)]
    return stack


def _refit(stack: CodebookStack, z: np.ndarray) -> None:
    """One Lloyd step per level on the final latents.

    EMA codewords trail the encoder by roughly 1/(1-decay) steps; moving each
    used codeword to the mean of its residuals removes that lag.
    """
    r = z
    for cb in stack.codebooks:
        idx = nearest(r, cb)
        counts = np.bincount(idx, minlength=len(cb))
        sums = np.zeros_like(cb)
        np.add.at(sums, idx, r)
        used = counts > 0
        cb[used] = sums[used] / counts[used, None]
        r = r - cb[nearest(r, cb)]


def _batches(n: int, bs: int, rng: Rng):
    perm = rng.permutation(n)
    for start in range(0, n, bs):
        yield perm[start : start + bs]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def stack_to_dict(stack: CodebookStack) -> dict:
    cfg = asdict(stack.config)
    cfg["hidden"] = list(cfg["hidden"])
    return {
        "format_version": FORMAT_VERSION,
        "kind": "codebook_stack",
        "config": cfg,
        "codebooks": [cb.tolist() for cb in stack.codebooks],
        "usage_counts": [u.tolist() for u in stack.usage_counts],
        "encoder": stack.encoder.state(),
        "decoder": stack.decoder.state(),
    }


def stack_from_dict(d: dict) -> CodebookStack:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported codebook format_version {d.get('format_version')!r}")
    cfg = RqvaeConfig.from_dict(d["config"])
    stack = init_stack(cfg)
    stack.codebooks = [np.asarray(cb, dtype=np.float64).reshape(-1, cfg.d_z) for cb in d["codebooks"]]
    stack.usage_counts = [np.asarray(u, dtype=np.int64) for u in d.get("usage_counts", [])]
    stack.encoder.load(d["encoder"])
    stack.decoder.load(d["decoder"])
    return stack


def save_stack(stack: CodebookStack, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stack_to_dict(stack)))


def load_stack(path: str | Path) -> CodebookStack:
    return stack_from_dict(json.loads(Path(path).read_text()))
