"""Acceptance checks 1-10.  Each test records one PASS/FAIL line, printed
again in the terminal summary under "acceptance criteria".

The trend checks (6-9) train on the default synthetic dataset and take about
26 minutes together on one core.
"""

import json
import subprocess
import sys
import time
from collections import Counter

import numpy as np
import pytest

from semids import numerics as nx
from semids.dataio import Catalog, SynthConfig, synth_generate, time_split
from semids.evaluation import lift_by_length, stratified_auc
from semids.recsys import RecModel, RecModelConfig, load_model, model_scorer, save_model, train
from semids.rqvae import RqvaeConfig, encode, load_stack, quantize, quantize_residuals, save_stack, train_rqvae
from semids.semid import MODES, ModelDims, assign_v0, assign_v1, embedding_reduction, param_count
from semids.sweep import SweepConfig, run_sweep

# settings for the trend runs; lr, batch size and patience were tuned once on seed 0
TREND_REC = {"lr": 3e-3, "batch_size": 32, "epochs": 20, "patience": 3}
TREND_SEEDS = [0, 1, 2]
TREND_K = [16, 64, 256, 1024]


# -- 1 ---------------------------------------------------------------------


def test_criterion_1_gradient_integrity(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mode = MODES[seed % 4]
        n_tracks = 10
        cat = Catalog(np.arange(n_tracks), rng.normal(size=(n_tracks, 3)), rng.integers(0, 3, n_tracks),
                      rng.integers(0, 2, n_tracks))  # fmt: skip
        table = assign_v0(cat.track_ids, 3, 2, seed) if mode.startswith("semantic") else None
        cfg = RecModelConfig(h=4, n_layers=1, max_len=4, mode=mode, dropout=0.0, seed=seed, dtype="float64")
        model = RecModel(cfg, cat, table)
        rows = rng.integers(0, n_tracks, size=(3, 4))
        fb = rng.integers(0, 2, size=(3, 4))
        fb[:, 1] = 1
        lengths = np.array([4, 3, 2])
        negs = rng.integers(0, n_tracks, size=(3, 4))
        for p in model.params:
            p.zero_grad()
        nx.backward(model.batch_loss(rows, fb, lengths, negs))
        for p in model.params:
            num = nx.numerical_gradient(lambda: model.batch_loss(rows, fb, lengths, negs).item(), p, step=1e-6)
            worst = max(worst, nx.relative_error(p.grad, num, floor=1e-6))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-3 and elapsed < 30
    criterion(1, ok, f"max relative error {worst:.2e} over 20 seeds (< 1e-3), {elapsed:.1f} s (< 30 s)")
    assert ok


# -- 2 ---------------------------------------------------------------------


def test_criterion_2_parameter_accounting(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cat = Catalog(np.arange(40), rng.normal(size=(40, 3)), rng.integers(0, 5, 40), rng.integers(0, 3, 40))
    table = assign_v0(cat.track_ids, 4, 3, 0)
    mismatches = []
    for mode in MODES:
        model = RecModel(RecModelConfig(h=8, mode=mode), cat, table if mode.startswith("semantic") else None)
        if model.n_params() != model.expected_param_count()["total"]:
            mismatches.append(mode)
    base = param_count(10**5, 60, "baseline")
    sem = param_count(10**5, 60, "semantic", k=1024, n=4, max_tiebreak=64, dims=ModelDims(tiebreak_buckets=64))
    red = embedding_reduction(base, sem)
    elapsed = time.perf_counter() - start
    ok = not mismatches and red >= 0.90 and elapsed < 1
    criterion(2, ok, f"live == closed form in {4 - len(mismatches)}/4 modes; embedding reduction {red:.1%} (>= 90%); "
                     f"{elapsed:.2f} s (< 1 s)")  # fmt: skip
    assert ok


# -- 3 ---------------------------------------------------------------------


def _scan(z, books):
    out = []
    r = z.copy()
    for cb in books:
        best, best_d = 0, None
        for j, c in enumerate(cb):
            d = float(np.sum((r - c) ** 2))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
        r = r - cb[best]
    return out


def test_criterion_3_quantizer(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(1000):
        n, k, d = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        books = [rng.normal(size=(k, d)) for _ in range(n)]
        z = rng.normal(size=d)
        codes, _, _, _ = quantize_residuals(z[None, :], books)
        agree += codes[0].tolist() == _scan(z, books)
    cat, _ = synth_generate(SynthConfig(n_users=1))
    cat = cat.normalized()
    decreasing = 0
    means = []
    for seed in range(3):
        stack = train_rqvae(cat, RqvaeConfig(codebook_size=16, seed=seed))
        _, _, norms = quantize(encode(cat.features, stack), stack)
        m = norms.mean(axis=0)
        means.append(np.round(m, 3).tolist())
        decreasing += bool(np.all(np.diff(m) < 0))
    elapsed = time.perf_counter() - start
    ok = agree == 1000 and decreasing == 3 and elapsed < 60
    criterion(3, ok, f"greedy == scan on {agree}/1000; residual norms strictly decreasing on {decreasing}/3 stacks "
                     f"(seed 0: {means[0]}); {elapsed:.1f} s (< 60 s)")  # fmt: skip
    assert ok


# -- 4 ---------------------------------------------------------------------


def test_criterion_4_id_integrity(criterion):
    start = time.perf_counter()
    _, _, world = synth_generate(
        SynthConfig(n_tracks=300, n_artists=30, n_genres=5, n_users=2, noise_sigma=0.0, seed=4), return_world=True
    )
    feats = np.repeat(world.artist_centroids, 10, axis=0)
    cat = Catalog(np.arange(300), feats).normalized()
    table = assign_v1(cat, train_rqvae(cat, RqvaeConfig(codebook_size=32, epochs=10, seed=4)))
    fixture_ok = table.is_injective() and table.max_tiebreak == 9
    fixture_ok &= max(Counter(map(tuple, table.codes.tolist())).values()) == 10

    N, k, n = 10_000, 16, 4
    M = k**n
    mean = N - M * (1 - (1 - 1 / M) ** N)
    sd = np.sqrt(M * (1 - 1 / M) ** N + M * (M - 1) * (1 - 2 / M) ** N - M * M * (1 - 1 / M) ** (2 * N))
    zs = []
    injective = True
    for seed in range(5):
        t = assign_v0(np.arange(N), k, n, seed)
        injective &= t.is_injective()
        zs.append((int((t.tiebreaks > 0).sum()) - mean) / sd)
    elapsed = time.perf_counter() - start
    ok = fixture_ok and injective and max(abs(z) for z in zs) <= 3 and elapsed < 30
    criterion(4, ok, f"zero-noise fixture max_tiebreak={table.max_tiebreak} (== 9); v0 collision z-scores "
                     f"{[round(float(z), 2) for z in zs]} (|z| <= 3); {elapsed:.1f} s (< 30 s)")  # fmt: skip
    assert ok


# -- 5 ---------------------------------------------------------------------


def test_criterion_5_evaluator(criterion):
    import math
    from fractions import Fraction

    start = time.perf_counter()
    _, seqs = synth_generate(SynthConfig(n_tracks=2000, n_artists=200, n_users=1500, seed=3))
    entries = time_split(seqs, 0.2).test_pairs[:1000]
    rng = np.random.default_rng(0)
    rand = stratified_auc(lambda p, c: [rng.random(len(x)) for x in c], entries).auc

    # brute force on 300 small instances drawn from the same test set
    exact = 0
    negation = 0.0
    for i in range(300):
        sub = [entries[j] for j in rng.choice(len(entries), size=int(rng.integers(1, 11)), replace=False)]
        scores = {(e.seq_id, int(t)): float(rng.integers(0, 5)) for e in sub for t in (*e.positives, *e.negatives)}

        def scorer(prefixes, cands, sign=1.0):
            return [np.array([sign * scores[(p.seq_id, int(t))] for t in c]) for p, c in zip(prefixes, cands)]

        per = []
        for e in sub:
            twice = sum(2 * (scores[(e.seq_id, p)] > scores[(e.seq_id, q)]) + (scores[(e.seq_id, p)] == scores[(e.seq_id, q)])
                        for p, q in e.pairs)  # fmt: skip
            per.append(float(Fraction(int(twice), 2 * len(e.pairs))))
        a = stratified_auc(scorer, sub).auc
        exact += a == math.fsum(per) / len(per)
        b = stratified_auc(lambda p, c: scorer(p, c, -1.0), sub).auc
        negation = max(negation, abs(a + b - 1.0))
    elapsed = time.perf_counter() - start
    ok = 0.48 <= rand <= 0.52 and exact == 300 and negation < 1e-12 and elapsed < 60
    criterion(5, ok, f"random scorer {rand:.4f} on {len(entries)} sequences (in [0.48, 0.52]); brute force exact on "
                     f"{exact}/300; max |a + a_neg - 1| = {negation:.1e}; {elapsed:.1f} s (< 60 s)")  # fmt: skip
    assert ok


# -- 6, 7, 9 (shared runs), 8 ------------------------------------------------


@pytest.fixture(scope="module")
def trend(tmp_path_factory):
    cfg = SweepConfig(
        modes=["baseline", "semantic"],
        variants=["v1", "v0"],
        k_values=TREND_K,
        h_values=[60],
        seeds=TREND_SEEDS,
        synth={},
        rec=TREND_REC,
        out_dir=str(tmp_path_factory.mktemp("trend")),
    )
    start = time.perf_counter()
    result = run_sweep(cfg, log=lambda s: print(s, file=sys.stderr, flush=True))
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def decomposed(tmp_path_factory):
    cfg = SweepConfig(
        modes=["semantic_decomposed"],
        variants=["v1", "v0"],
        k_values=[16],
        h_values=[60],
        seeds=TREND_SEEDS,
        synth={},
        rec=TREND_REC,
        out_dir=str(tmp_path_factory.mktemp("decomposed")),
    )
    start = time.perf_counter()
    result = run_sweep(cfg, log=lambda s: print(s, file=sys.stderr, flush=True))
    return result, time.perf_counter() - start


def _gap(result, mode, k):
    return result.mean_auc(mode, "v1", k, 60) - result.mean_auc(mode, "v0", k, 60)


def test_criterion_6_trained_ids_beat_random(criterion, trend):
    result, elapsed = trend
    assert all(not r["error"] for r in result.rows), [r["error"] for r in result.rows if r["error"]]
    g16, g1024 = _gap(result, "semantic", 16), _gap(result, "semantic", 1024)
    ok = g16 > 0.01 and g1024 < g16 and elapsed < 1800
    criterion(6, ok, f"v1 - v0 at k=16: {g16:+.4f} (> 0.01); at k=1024: {g1024:+.4f} (smaller); "
                     f"{elapsed / 60:.1f} min for the shared grid (< 30 min)")  # fmt: skip
    assert ok


def test_criterion_7_semantic_matches_baseline(criterion, trend):
    result, elapsed = trend
    summary = result.summary()
    base = next(s for s in summary if s["mode"] == "baseline")
    hits = [
        (s["k"], s["auc_mean"], s["total_params"])
        for s in summary
        if s["mode"] == "semantic" and s["variant"] == "v1"
        and s["auc_mean"] >= base["auc_mean"] - 0.005 and s["total_params"] < base["total_params"]
    ]  # fmt: skip
    ok = bool(hits) and elapsed < 1800
    detail = ", ".join(f"k={k} AUC {a:.4f} with {p:,} params" for k, a, p in hits) or "no k qualifies"
    criterion(7, ok, f"baseline AUC {base['auc_mean']:.4f} with {base['total_params']:,} params; {detail}")
    assert ok


def test_criterion_8_decomposition_shrinks_gap(criterion, trend, decomposed):
    result, elapsed = decomposed
    assert all(not r["error"] for r in result.rows), [r["error"] for r in result.rows if r["error"]]
    song_only = _gap(trend[0], "semantic", 16)
    dec = _gap(result, "semantic_decomposed", 16)
    ok = abs(dec) < abs(song_only) and elapsed < 1800
    criterion(8, ok, f"|v1 - v0| at k=16 with artist/genre {abs(dec):.4f} vs song-only {abs(song_only):.4f}; "
                     f"{elapsed / 60:.1f} min (< 30 min)")  # fmt: skip
    assert ok


def test_criterion_9_lift_in_short_inputs(criterion, trend):
    result, _ = trend
    deltas = []
    for seed in TREND_SEEDS:
        rid = {r["variant"]: r["run_id"] for r in result.ok_rows()
               if r["mode"] == "semantic" and int(r["k"]) == 16 and int(r["seed"]) == seed}  # fmt: skip
        buckets = lift_by_length(result.reports[rid["v0"]], result.reports[rid["v1"]])
        shortest = buckets[0]
        deltas.append((shortest["lo"], shortest["hi"], shortest["delta"]))
    positive = sum(d > 0 for _, _, d in deltas)
    ok = positive >= 2
    criterion(9, ok, f"shortest-bucket v1 - v0 per seed {[f'[{a},{b}): {d:+.4f}' for a, b, d in deltas]}; "
                     f"positive in {positive}/3 (>= 2)")  # fmt: skip
    assert ok


def test_sweep_trend_auc_non_decreasing_in_k(criterion, trend):
    """v1 mean AUC should not fall as k grows over {16, 64, 256, 1024}."""
    result, _ = trend
    aucs = [result.mean_auc("semantic", "v1", k, 60) for k in TREND_K]
    rising = sum(b >= a for a, b in zip(aucs, aucs[1:]))
    ok = rising == len(TREND_K) - 1
    criterion("sweep trend (v1 AUC non-decreasing in k)", ok,
              f"{dict(zip(TREND_K, [round(a, 4) for a in aucs]))}; {rising}/{len(TREND_K) - 1} steps non-decreasing")
    assert ok


# -- 10 --------------------------------------------------------------------


def test_criterion_10_determinism_and_persistence(criterion, tmp_path):
    # bit-identical CSV rows from identical configs
    tiny = dict(
        synth={"n_tracks": 300, "n_artists": 30, "n_genres": 5, "n_users": 80, "seed": 1},
        modes=["baseline", "semantic"],
        k_values=[8],
        h_values=[16],
        rec={"epochs": 2, "max_len": 30},
    )
    for name in ("a", "b"):
        run_sweep(SweepConfig.from_dict({**tiny, "out_dir": str(tmp_path / name)}))
    csv_same = (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()

    # JSON round trips
    cat, seqs = synth_generate(SynthConfig(n_tracks=300, n_artists=30, n_genres=5, n_users=80, seed=2))
    cat = cat.normalized()
    stack = train_rqvae(cat, RqvaeConfig(codebook_size=8, epochs=3))
    save_stack(stack, tmp_path / "stack.json")
    back = load_stack(tmp_path / "stack.json")
    stack_same = all(np.array_equal(a.data, b.data) for a, b in zip(stack.params, back.params))
    stack_same &= all(np.array_equal(a, b) for a, b in zip(stack.codebooks, back.codebooks))
    split = time_split(seqs, 0.2)
    model = train(split, cat, RecModelConfig(h=16, epochs=2, mode="semantic", k=8, n=4), assign_v1(cat, stack))
    save_model(model, tmp_path / "model.json")
    loaded = load_model(tmp_path / "model.json")
    model_same = all(np.array_equal(a.data, b.data) for a, b in zip(model.params, loaded.params))
    model_same &= (
        stratified_auc(model_scorer(model), split.test_pairs).auc
        == stratified_auc(model_scorer(loaded), split.test_pairs).auc
    )

    # end-to-end CLI on the default dataset
    start = time.perf_counter()

    def cli(*args):
        proc = subprocess.run([sys.executable, "-m", "semids", *map(str, args)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    (tmp_path / "run.json").write_text(json.dumps({"mode": "semantic", "epochs": 3}))
    (tmp_path / "sweep.json").write_text(json.dumps({**tiny, "rec": {"epochs": 1, "max_len": 30}}))
    d = tmp_path / "cli"
    cli("gen-data", "--out", d / "data", "--seed", 0)
    cli("train-rqvae", "--catalog", d / "data" / "catalog.csv", "--k", 16, "--out", d / "stack.json", "--seed", 0)
    cli("assign-ids", "--variant", "v1", "--stack", d / "stack.json", "--catalog", d / "data" / "catalog.csv",
        "--out", d / "ids.csv")  # fmt: skip
    cli("train", "--config", tmp_path / "run.json", "--data", d / "data", "--ids", d / "ids.csv",
        "--out", d / "model.json", "--seed", 0)  # fmt: skip
    out = cli("eval", "--model", d / "model.json", "--data", d / "data", "--report", d / "report.json")
    cli("sweep", "--config", tmp_path / "sweep.json", "--out", d / "results", "--seed", 0)
    cli("plot", "--results", d / "results", "--out", d / "figs")
    figs = sorted(p.name for p in (d / "figs").glob("*.svg"))
    elapsed = time.perf_counter() - start

    ok = csv_same and stack_same and model_same and len(figs) == 3 and elapsed < 600
    criterion(10, ok, f"CSV rows identical: {csv_same}; codebook JSON lossless: {stack_same}; model JSON lossless: "
                      f"{model_same}; CLI path {elapsed:.0f} s (< 600 s), {out.strip()}")  # fmt: skip
    assert ok
