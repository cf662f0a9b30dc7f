"""Command-line entry point: ``semids <subcommand> ...``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
problems with input data (missing or malformed files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataio import DataError, SynthConfig, load_catalog, load_dataset, synth_generate, time_split, write_dataset
from .evaluation import evaluate_model
from .recsys import RecModelConfig, load_model, save_model, train
from .rqvae import RqvaeConfig, load_stack, save_stack, train_rqvae
from .semid import V0, V1, assign_v0, assign_v1, read_id_table, write_id_table
from .sweep import SweepConfig, plot_results, run_sweep

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> None:
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    catalog, seqs = synth_generate(cfg)
    write_dataset(catalog, seqs, args.out)
    _log(f"wrote {len(catalog)} tracks and {len(seqs)} sequences to {args.out}")


def cmd_train_rqvae(args) -> None:
    d = _read_json(args.config) if args.config else {}
    d["codebook_size"] = args.k
    if args.seed is not None:
        d["seed"] = args.seed
    catalog = load_catalog(args.catalog)
    d.setdefault("d_f", catalog.d_f)
    cfg = RqvaeConfig.from_dict(d)
    stack = train_rqvae(catalog, cfg, log=_log if args.verbose else None)
    save_stack(stack, args.out)
    _log(f"saved codebook stack (k={cfg.codebook_size}, levels={cfg.n_levels}) to {args.out}")


def cmd_assign_ids(args) -> None:
    catalog = load_catalog(args.catalog)
    if args.variant == V1:
        if not args.stack:
            raise UsageError("--variant v1 needs --stack")
        table = assign_v1(catalog, load_stack(args.stack))
    else:
        k, n = args.k, args.n
        if args.stack:
            st = load_stack(args.stack)
            k, n = k or st.k, n or st.n_levels
        if not k or not n:
            raise UsageError("--variant v0 needs --stack or both --k and --n")
        table = assign_v0(catalog.track_ids, k, n, 0 if args.seed is None else args.seed)
    write_id_table(table, args.out)
    _log(f"assigned {len(table)} {table.variant} IDs, max tie-break {table.max_tiebreak}")


def cmd_train(args) -> None:
    d = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    table = read_id_table(args.ids) if args.ids else None
    if table is not None:
        d.setdefault("k", table.k)
        d.setdefault("n", table.n)
    cfg = RecModelConfig.from_dict(d)
    if cfg.semantic and table is None:
        raise UsageError(f"mode {cfg.mode!r} needs --ids")
    catalog, seqs = load_dataset(args.data, max_len=cfg.max_len)
    split = time_split(seqs, cfg.test_fraction)
    model = train(split, catalog, cfg, table, log=_log)
    save_model(model, args.out)
    _log(f"saved model ({model.n_params()} parameters) to {args.out}")


def cmd_eval(args) -> None:
    model = load_model(args.model)
    catalog, seqs = load_dataset(args.data, max_len=model.config.max_len)
    split = time_split(seqs, model.config.test_fraction)
    report = evaluate_model(model, split, catalog, m=args.m, seed=0 if args.seed is None else args.seed)
    report.write_json(args.report)
    print(f"stratified_auc={report.auc:.6f} n_sequences={report.n_sequences}")


def cmd_sweep(args) -> None:
    d = _read_json(args.config)
    d["out_dir"] = str(args.out)
    if args.seed is not None:
        d["seeds"] = [args.seed]
    cfg = SweepConfig.from_dict(d)
    result = run_sweep(cfg, log=_log)
    for s in result.summary():
        print(json.dumps(s))


def cmd_plot(args) -> None:
    for p in plot_results(args.results, args.out):
        _log(f"wrote {p}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semids", description="Semantic-ID music recommendation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic catalog and interactions")
    sp.add_argument("--config", help="JSON file of SynthConfig fields (defaults if omitted)")
    sp.add_argument("--out", required=True)

    sp = add("train-rqvae", cmd_train_rqvae, "train a residual-quantization codebook stack")
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--config", help="JSON file of RqvaeConfig fields")
    sp.add_argument("--out", required=True)
    sp.add_argument("--verbose", action="store_true")

    sp = add("assign-ids", cmd_assign_ids, "assign trained (v1) or random (v0) semantic IDs")
    sp.add_argument("--variant", choices=[V1, V0], required=True)
    sp.add_argument("--stack")
    sp.add_argument("--catalog", required=True)
    sp.add_argument("--k", type=int, help="codebook size for v0 without a stack")
    sp.add_argument("--n", type=int, help="levels for v0 without a stack")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a recommender")
    sp.add_argument("--config", help="JSON file of RecModelConfig fields")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ids")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a trained recommender")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--m", type=int, default=10, help="list length for diversity metrics")

    sp = add("sweep", cmd_sweep, "run an experiment grid")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("plot", cmd_plot, "draw figures from a sweep directory")
    sp.add_argument("--results", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (UsageError, TypeError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (DataError, OSError, KeyError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
