"""Experiment grids over (mode, variant, k, h, seed), iso-parameter contours and
SVG figures.

Results are appended to ``results.csv`` one row per finished cell, so an
interrupted sweep picks up where it stopped: a cell whose ``run_id`` already has
an error-free row is skipped.  Full per-sequence reports go to
``reports/<run_id>.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataio import SynthConfig, load_dataset, synth_generate, time_split
from .evaluation import EvalReport, evaluate_model, lift_by_length
from .recsys import RecModelConfig, train
from .rqvae import RqvaeConfig, train_rqvae
from .semid import (
    MODES,
    SEMANTIC,
    SEMANTIC_DECOMPOSED,
    V0,
    V1,
    ModelDims,
    assign_v0,
    assign_v1,
    param_count,
)

CSV_COLUMNS = [
    "run_id",
    "mode",
    "variant",
    "k",
    "h",
    "seed",
    "n_levels",
    "epochs",
    "epochs_run",
    "auc",
    "auc_shortest",
    "n_test",
    "max_tiebreak",
    "embedding_params",
    "transformer_params",
    "total_params",
    "live_params",
    "error",
]

_SEMANTIC_MODES = (SEMANTIC, SEMANTIC_DECOMPOSED)


@dataclass
class SweepConfig:
    """A grid of recommender runs on one dataset.

    Exactly one of ``data_dir`` (a directory with catalog.csv and
    interactions.jsonl) or ``synth`` (SynthConfig fields) names the dataset.
    Baseline modes ignore ``variants`` and ``k_values``.
    """

    modes: list[str] = field(default_factory=lambda: [SEMANTIC])
    variants: list[str] = field(default_factory=lambda: [V1, V0])
    k_values: list[int] = field(default_factory=lambda: [16])
    h_values: list[int] = field(default_factory=lambda: [60])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_levels: int = 4
    data_dir: str | None = None
    synth: dict | None = None
    rec: dict = field(default_factory=dict)
    rqvae: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    out_dir: str = "results"

    def __post_init__(self):
        if (self.data_dir is None) == (self.synth is None):
            raise ValueError("give exactly one of data_dir or synth")
        if not self.modes or not self.h_values or not self.seeds:
            raise ValueError("modes, h_values and seeds must be non-empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}")
        if any(m in _SEMANTIC_MODES for m in self.modes):
            if not self.k_values or not self.variants:
                raise ValueError("semantic modes need k_values and variants")
            if any(v not in (V0, V1) for v in self.variants):
                raise ValueError(f"variants must be {V0!r} or {V1!r}")
        for key in ("h", "k", "n", "mode", "seed"):
            if key in self.rec:
                raise ValueError(f"rec.{key} is set by the grid, not the rec overrides")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "SweepConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dataset_key(self) -> dict:
        return {"data_dir": self.data_dir} if self.synth is None else {"synth": self.synth}


@dataclass(frozen=True)
class Cell:
    mode: str
    variant: str
    k: int
    h: int
    seed: int

    @property
    def semantic(self) -> bool:
        return self.mode in _SEMANTIC_MODES


def grid(cfg: SweepConfig) -> list[Cell]:
    cells = []
    for mode in cfg.modes:
        for h in cfg.h_values:
            for seed in cfg.seeds:
                if mode in _SEMANTIC_MODES:
                    cells += [Cell(mode, v, int(k), int(h), int(seed)) for v in cfg.variants for k in cfg.k_values]
                else:
                    cells.append(Cell(mode, "none", 0, int(h), int(seed)))
    return cells


def run_id(cfg: SweepConfig, cell: Cell) -> str:
    """Stable hash of everything that determines a cell's result."""
    key = {
        "dataset": cfg.dataset_key(),
        "test_fraction": cfg.test_fraction,
        "n_levels": cfg.n_levels,
        "rec": cfg.rec,
        "rqvae": cfg.rqvae if cell.variant == V1 else None,
        "cell": asdict(cell),
    }
    blob = json.dumps(key, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SweepResult:
    rows: list[dict]
    reports: dict[str, EvalReport] = field(default_factory=dict)
    contours: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    def ok_rows(self) -> list[dict]:
        return [r for r in self.rows if not r["error"]]

    def summary(self) -> list[dict]:
        """Seed-averaged AUC (mean, std) per (mode, variant, k, h)."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.ok_rows():
            groups.setdefault((r["mode"], r["variant"], int(r["k"]), int(r["h"])), []).append(r)
        out = []
        for (mode, variant, k, h), rs in sorted(groups.items()):
            aucs = np.array([float(r["auc"]) for r in rs])
            out.append(
                {
                    "mode": mode,
                    "variant": variant,
                    "k": k,
                    "h": h,
                    "n_seeds": len(rs),
                    "auc_mean": float(aucs.mean()),
                    "auc_std": float(aucs.std()),
                    "total_params": int(rs[0]["total_params"]),
                }
            )
        return out

    def mean_auc(self, mode: str, variant: str, k: int, h: int) -> float:
        for s in self.summary():
            if (s["mode"], s["variant"], s["k"], s["h"]) == (mode, variant, k, h):
                return s["auc_mean"]
        raise KeyError((mode, variant, k, h))


def _load_data(cfg: SweepConfig, max_len: int):
    if cfg.synth is not None:
        catalog, seqs = synth_generate(SynthConfig.from_dict(cfg.synth))
        return catalog.normalized(), seqs
    return load_dataset(cfg.data_dir, max_len=max_len)


def read_results(path: str | Path) -> list[dict]:
    """Rows of a results CSV; a later row for the same run_id replaces an earlier one."""
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        latest = {r["run_id"]: r for r in reader}
    return list(latest.values())


def _append(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_sweep(cfg: SweepConfig, log: Callable[[str], None] | None = None) -> SweepResult:
    """Train and evaluate every grid cell, appending one CSV row per cell.

    One RQ-VAE is trained per codebook size and shared by all v1 cells with
    that ``k``.  A failing cell is recorded with its error message and the
    sweep moves on.
    """
    say = log or (lambda s: None)
    out = Path(cfg.out_dir)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "sweep_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    csv_path = out / "results.csv"
    done = {r["run_id"] for r in read_results(csv_path) if not r["error"]}

    base_rec = RecModelConfig.from_dict(dict(cfg.rec))
    catalog, seqs = _load_data(cfg, base_rec.max_len)
    split = time_split(seqs, cfg.test_fraction)
    meta = {
        "n_tracks": len(catalog),
        "n_levels": cfg.n_levels,
        "max_len": base_rec.max_len,
        "n_layers": base_rec.n_layers,
        "tiebreak_buckets": base_rec.tiebreak_buckets,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    stacks: dict[int, object] = {}

    for cell in grid(cfg):
        rid = run_id(cfg, cell)
        if rid in done:
            say(f"skip {rid} {cell}")
            continue
        row = {c: "" for c in CSV_COLUMNS}
        row.update(run_id=rid, mode=cell.mode, variant=cell.variant, k=cell.k, h=cell.h, seed=cell.seed)
        row.update(n_levels=cfg.n_levels if cell.semantic else 0, epochs=base_rec.epochs)
        try:
            table = None
            if cell.variant == V1:
                if cell.k not in stacks:
                    rq = RqvaeConfig.from_dict(
                        {"d_f": catalog.d_f, **cfg.rqvae, "codebook_size": cell.k, "n_levels": cfg.n_levels}
                    )
                    say(f"rqvae k={cell.k}")
                    stacks[cell.k] = train_rqvae(catalog, rq)
                table = assign_v1(catalog, stacks[cell.k])
            elif cell.variant == V0:
                table = assign_v0(catalog.track_ids, cell.k, cfg.n_levels, cell.seed)
            rec = RecModelConfig.from_dict(
                {
                    **cfg.rec,
                    "mode": cell.mode,
                    "h": cell.h,
                    "seed": cell.seed,
                    "k": cell.k if cell.semantic else None,
                    "n": cfg.n_levels if cell.semantic else None,
                }
            )
            say(f"train {rid} {cell}")
            model = train(split, catalog, rec, table)
            report = evaluate_model(model, split, catalog, seed=cell.seed)
            report.write_json(out / "reports" / f"{rid}.json")
            pc = report.param_counts
            row.update(
                epochs_run=len(model.history),
                auc=_fmt(report.auc),
                auc_shortest=_fmt(report.per_bucket[0]["accuracy"]) if report.per_bucket else "",
                n_test=report.n_sequences,
                max_tiebreak=0 if table is None else table.max_tiebreak,
                embedding_params=pc["embedding_params"],
                transformer_params=pc["transformer_params"],
                total_params=pc["total"],
                live_params=pc["live_total"],
            )
            say(f"  auc={report.auc:.4f} params={pc['total']}")
        except Exception as exc:  # a broken cell must not stop the grid
            row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
            say(f"  failed: {row['error']}")
            say(traceback.format_exc())
        _append(csv_path, row)
    return load_sweep(out)


def load_sweep(results_dir: str | Path) -> SweepResult:
    d = Path(results_dir)
    rows = read_results(d / "results.csv")
    if not rows:
        raise FileNotFoundError(f"{d}: no results.csv rows")
    reports = {}
    for r in rows:
        p = d / "reports" / f"{r['run_id']}.json"
        if not r["error"] and p.exists():
            reports[r["run_id"]] = EvalReport.read_json(p)
    result = SweepResult(rows, reports)
    cfg_path, meta_path = d / "sweep_config.json", d / "meta.json"
    if cfg_path.exists() and meta_path.exists():
        result.contours = _contours(result, json.loads(cfg_path.read_text()), json.loads(meta_path.read_text()))
    return result


def _contours(result: SweepResult, cfg: dict, meta: dict) -> dict[int, list[tuple[int, int]]]:
    """Iso-parameter (k, h) pairs for the budget of every semantic grid point.

    The tie-break table is counted at its cap, since its real size depends on
    each cell's collisions.
    """
    sem = sorted({(s["mode"], s["k"], s["h"]) for s in result.summary() if s["mode"] in _SEMANTIC_MODES})
    if not sem:
        return {}
    mode = sem[0][0]
    dims = _dims(meta)
    kw = dict(n=meta["n_levels"], max_tiebreak=dims.tiebreak_buckets, dims=dims)
    budgets = [param_count(meta["n_tracks"], h, mode, k=k, **kw)["total"] for m, k, h in sem if m == mode]
    return iso_param_contours(budgets, cfg["k_values"], cfg["h_values"], mode, meta["n_tracks"], **kw)


def _dims(meta: dict) -> ModelDims:
    return ModelDims(max_len=meta["max_len"], n_layers=meta["n_layers"], tiebreak_buckets=meta["tiebreak_buckets"])


# ---------------------------------------------------------------------------
# iso-parameter contours
# ---------------------------------------------------------------------------


def iso_param_contours(
    budgets: Sequence[int],
    k_grid: Sequence[int],
    h_grid: Sequence[int],
    mode: str,
    n_tracks: int,
    n: int = 4,
    max_tiebreak: int = 0,
    dims: ModelDims = ModelDims(),
    tol: float = 0.01,
) -> dict[int, list[tuple[int, int]]]:
    """For each budget, the grid (k, h) pairs whose total parameters lie within ``tol``."""
    out: dict[int, list[tuple[int, int]]] = {}
    for b in budgets:
        hits = []
        for k in k_grid:
            for h in h_grid:
                total = param_count(n_tracks, h, mode, k=k, n=n, max_tiebreak=max_tiebreak, dims=dims)["total"]
                if abs(total - b) <= tol * b:
                    hits.append((int(k), int(h)))
        out[int(b)] = hits
    return out


def h_for_budget(budget: float, k: int, mode: str, n_tracks: int, n: int = 4, max_tiebreak: int = 0,
                 dims: ModelDims = ModelDims()) -> float:
    """Real-valued h at which the closed-form total equals ``budget`` (for contour lines)."""
    # the total is a*h^2 + b*h: per-row embedding widths plus the transformer terms
    rows = param_count(n_tracks, 1, mode, k=k, n=n, max_tiebreak=max_tiebreak, dims=dims)["embedding_params"]
    a = 6 * dims.n_layers
    b = rows + dims.max_len + 4 + 10 * dims.n_layers
    if a == 0:
        return budget / b
    return (-b + math.sqrt(b * b + 4 * a * budget)) / (2 * a)


# ---------------------------------------------------------------------------
# SVG output
# ---------------------------------------------------------------------------

_W, _H = 480, 340
_M = {"l": 62, "r": 16, "t": 30, "b": 56}
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


class _Svg:
    def __init__(self, title: str):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13" font-family="sans-serif">'
            f"{escape(title)}</text>",
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, anchor="middle", size=10, rotate=None):
        rot = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None else ""
        self.add(
            f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}" '
            f'font-family="sans-serif"{rot}>{escape(str(s))}</text>'
        )

    def line(self, x1, y1, x2, y2, color="#444", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(
            f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{color}" '
            f'stroke-width="{width}"{d}/>'
        )

    def polyline(self, pts, color, dash=None):
        if len(pts) < 2:
            return
        d = f' stroke-dasharray="{dash}"' if dash else ""
        p = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        self.add(f'<polyline points="{p}" fill="none" stroke="{color}" stroke-width="1.5"{d}/>')

    def circle(self, x, y, r, color):
        self.add(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="{r:.1f}" fill="{color}"/>')

    def rect(self, x, y, w, h, color):
        self.add(f'<rect x="{x:.1f}" y="{y:.1f}" width="{w:.1f}" height="{h:.1f}" fill="{color}"/>')

    def no_data(self):
        self.text(_W / 2, _H / 2, "no data", size=14)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


class _Axes:
    """Linear or log2 mapping from data space to the plot rectangle."""

    def __init__(self, xlim, ylim, xlog=False, xpad=0.0):
        self.xlog = xlog
        self.x0, self.x1 = (math.log2(v) for v in xlim) if xlog else xlim
        # xpad is in axis units (octaves on a log axis), keeping end markers off the frame
        self.x0, self.x1 = self.x0 - xpad, self.x1 + xpad
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.01, self.y1 + 0.01

    def px(self, x):
        v = math.log2(x) if self.xlog else x
        return _M["l"] + (v - self.x0) / (self.x1 - self.x0) * (_W - _M["l"] - _M["r"])

    def py(self, y):
        return _H - _M["b"] - (y - self.y0) / (self.y1 - self.y0) * (_H - _M["t"] - _M["b"])

    def frame(self, svg: _Svg, xlabel, ylabel, xticks, yticks):
        l, b = _M["l"], _H - _M["b"]
        svg.line(l, b, _W - _M["r"], b)
        svg.line(l, _M["t"], l, b)
        for t in xticks:
            svg.line(self.px(t), b, self.px(t), b + 4)
            svg.text(self.px(t), b + 15, t)
        for t in yticks:
            svg.line(l - 4, self.py(t), l, self.py(t))
            svg.text(l - 6, self.py(t) + 3, f"{t:g}", anchor="end")
        svg.text((l + _W - _M["r"]) / 2, _H - 10, xlabel, size=11)
        svg.text(14, (_M["t"] + b) / 2, ylabel, size=11, rotate=-90)


def _pad(lo, hi, frac=0.08):
    span = (hi - lo) or max(abs(hi), 1e-3)
    return lo - frac * span, hi + frac * span


def _yticks(lo, hi, n=5):
    """About ``n`` round-valued ticks (1, 2, 2.5 or 5 times a power of ten) inside [lo, hi]."""
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9)
    ticks = []
    i = first
    while i * step <= hi + 1e-12:
        ticks.append(round(i * step, 10))
        i += 1
    return ticks


def plot_accuracy_vs_k(summary: list[dict]) -> str:
    """Mean AUC against codebook size, one line per (mode, variant); baselines as dashed levels."""
    svg = _Svg("Accuracy vs codebook size")
    sem = [s for s in summary if s["mode"] in _SEMANTIC_MODES]
    base = [s for s in summary if s["mode"] not in _SEMANTIC_MODES]
    if not summary:
        svg.no_data()
        return svg.render()
    # one h per figure: the most common one
    hs = [s["h"] for s in summary]
    h = max(sorted(set(hs)), key=hs.count)
    sem = [s for s in sem if s["h"] == h]
    base = [s for s in base if s["h"] == h]
    ks = sorted({s["k"] for s in sem}) or [1]
    aucs = [s["auc_mean"] for s in sem + base]
    ax = _Axes((min(ks), max(ks)), _pad(min(aucs), max(aucs)), xlog=True, xpad=0.3)
    ax.frame(svg, f"codebook size k (h={h})", "stratified AUC", ks, _yticks(ax.y0, ax.y1))
    series = sorted({(s["mode"], s["variant"]) for s in sem})
    legend = []
    for i, key in enumerate(series):
        c = _COLORS[i % len(_COLORS)]
        pts = sorted((s["k"], s["auc_mean"]) for s in sem if (s["mode"], s["variant"]) == key)
        svg.polyline([(ax.px(k), ax.py(a)) for k, a in pts], c)
        for k, a in pts:
            svg.circle(ax.px(k), ax.py(a), 3, c)
        legend.append((f"{key[0]} {key[1]}", c, None))
    for j, s in enumerate(base):
        c = _COLORS[(len(series) + j) % len(_COLORS)]
        y = ax.py(s["auc_mean"])
        svg.line(_M["l"], y, _W - _M["r"], y, color=c, dash="5,3")
        legend.append((s["mode"], c, "5,3"))
    for i, (name, c, dash) in enumerate(legend):
        y = _M["t"] + 8 + 13 * i
        svg.line(_W - 150, y, _W - 132, y, color=c, width=2, dash=dash)
        svg.text(_W - 128, y + 3, name, anchor="start", size=9)
    return svg.render()


def plot_k_h_tradeoff(summary: list[dict], contours: list[tuple[int, list[tuple[float, float]]]]) -> str:
    """Semantic-mode AUC over the (k, h) grid, with iso-parameter lines."""
    svg = _Svg("Accuracy over (k, h) with iso-parameter contours")
    sem = [s for s in summary if s["mode"] in _SEMANTIC_MODES and s["variant"] == V1]
    if not sem:
        svg.no_data()
        return svg.render()
    ks = sorted({s["k"] for s in sem})
    hs = sorted({s["h"] for s in sem})
    ax = _Axes((min(ks), max(ks)), _pad(min(hs), max(hs)), xlog=True, xpad=0.3)
    ax.frame(svg, "codebook size k", "embedding width h", ks, [])
    for h in hs:
        svg.line(_M["l"] - 4, ax.py(h), _M["l"], ax.py(h))
        svg.text(_M["l"] - 6, ax.py(h) + 3, h, anchor="end")
    for budget, line in contours:
        pts = [(ax.px(k), ax.py(h)) for k, h in line if ax.y0 <= h <= ax.y1]
        svg.polyline(pts, "#999", dash="3,3")
        if pts:
            svg.text(pts[-1][0] - 2, pts[-1][1] - 4, f"{budget:,}", anchor="end", size=8)
    aucs = [s["auc_mean"] for s in sem]
    lo, hi = min(aucs), max(aucs)
    for s in sem:
        t = 0.5 if hi == lo else (s["auc_mean"] - lo) / (hi - lo)
        shade = int(round(220 - 180 * t))
        svg.circle(ax.px(s["k"]), ax.py(s["h"]), 4 + 6 * t, f"rgb({shade},{shade},255)")
        svg.text(ax.px(s["k"]), ax.py(s["h"]) - 11, f"{s['auc_mean']:.3f}", size=8)
    return svg.render()


def plot_lift(buckets: list[dict], label: str) -> str:
    """Bars of mean accuracy difference per input-length bucket with CI whiskers."""
    svg = _Svg(f"Lift by input length: {label}")
    if not buckets:
        svg.no_data()
        return svg.render()
    lo = min(min(b["ci"][0] for b in buckets), 0.0)
    hi = max(max(b["ci"][1] for b in buckets), 0.0)
    ax = _Axes((0, len(buckets)), _pad(lo, hi))
    ax.frame(svg, "input length bucket", "accuracy delta", [], _yticks(ax.y0, ax.y1))
    svg.line(_M["l"], ax.py(0.0), _W - _M["r"], ax.py(0.0), color="#888")
    slot = ax.px(1) - ax.px(0)
    for i, b in enumerate(buckets):
        x = ax.px(i) + 0.2 * slot
        y0, y1 = ax.py(0.0), ax.py(b["delta"])
        svg.rect(x, min(y0, y1), 0.6 * slot, abs(y1 - y0), _COLORS[0] if b["delta"] >= 0 else _COLORS[1])
        cx = ax.px(i + 0.5)
        svg.line(cx, ax.py(b["ci"][0]), cx, ax.py(b["ci"][1]), color="black")
        svg.text(cx, _H - _M["b"] + 15, f"[{b['lo']},{b['hi']})")
        svg.text(cx, _H - _M["b"] + 26, f"n={b['n']}", size=8)
    return svg.render()


def _seed_mean_report(reports: list[EvalReport]) -> EvalReport:
    """Average per-sequence accuracies of runs evaluated on the same test pairs."""
    first = reports[0]
    stack = []
    for r in reports:
        pos = {int(s): i for i, s in enumerate(r.seq_ids)}
        stack.append(r.per_sequence[[pos[int(s)] for s in first.seq_ids]])
    acc = np.mean(stack, axis=0)
    return EvalReport(float(acc.mean()), len(acc), first.seq_ids, acc, first.input_lengths)


def lift_between(result: SweepResult, mode: str, k: int, h: int, candidate=V1, reference=V0, seed: int = 0):
    """Seed-averaged lift of ``candidate`` over ``reference`` IDs for one (mode, k, h)."""

    def reps(variant):
        rows = [
            r
            for r in result.ok_rows()
            if r["mode"] == mode and r["variant"] == variant and int(r["k"]) == k and int(r["h"]) == h
        ]
        return [result.reports[r["run_id"]] for r in sorted(rows, key=lambda r: int(r["seed"])) if r["run_id"] in result.reports]

    a, b = reps(reference), reps(candidate)
    if not a or not b:
        return []
    return lift_by_length(_seed_mean_report(a), _seed_mean_report(b), seed=seed)


def emit_plots(result: SweepResult, out_dir: str | Path, n_tracks: int | None = None,
               dims: ModelDims = ModelDims(), n_levels: int = 4) -> list[Path]:
    """Write the three summary figures; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = result.summary()
    paths = []

    p = out / "accuracy_vs_k.svg"
    p.write_text(plot_accuracy_vs_k(summary))
    paths.append(p)

    sem = [s for s in summary if s["mode"] in _SEMANTIC_MODES and s["variant"] == V1]
    lines = []
    if sem and n_tracks is not None:
        mode = sem[0]["mode"]
        ks = sorted({s["k"] for s in sem})
        fine = sorted(set(np.geomspace(min(ks), max(ks), 24).tolist()) | set(ks))
        for budget in sorted({s["total_params"] for s in sem if s["k"] == ks[0]}):
            lines.append((budget, [(k, h_for_budget(budget, k, mode, n_tracks, n_levels, dims=dims)) for k in fine]))
    p = out / "k_h_tradeoff.svg"
    p.write_text(plot_k_h_tradeoff(summary, lines))
    paths.append(p)

    buckets, label = [], "no v1/v0 pair"
    pairs = sorted(
        {(r["mode"], int(r["k"]), int(r["h"])) for r in result.ok_rows() if r["variant"] == V1},
        key=lambda t: (t[1], t[2], t[0]),
    )
    for mode, k, h in pairs:
        buckets = lift_between(result, mode, k, h)
        if buckets:
            label = f"v1 vs v0, {mode}, k={k}, h={h}"
            break
    p = out / "lift_by_length.svg"
    p.write_text(plot_lift(buckets, label))
    paths.append(p)
    return paths


def plot_results(results_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Load a sweep directory and write its figures."""
    d = Path(results_dir)
    result = load_sweep(d)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        return emit_plots(result, out_dir)
    meta = json.loads(meta_path.read_text())
    return emit_plots(result, out_dir, meta["n_tracks"], _dims(meta), meta["n_levels"])
