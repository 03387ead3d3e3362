"""Command-line entry point: ``shapedelta <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .delta import DeltaError, apply_delta, compute_delta, match_shapes, read_delta, write_delta
from .harness import (
    BASELINES,
    EXPERIMENTS,
    DataError,
    Evaluator,
    ExperimentSpec,
    Report,
    build_pairs,
    group_neighborhoods,
    pair_data,
    read_dataset,
    read_pairs,
    synthetic_dataset,
    training_pairs,
    write_dataset,
    write_pairs,
)
from .metrics import METRICS, NeighborhoodTable, shape_distance
from .shape import ShapeError, read_shape, write_shape
from .synth import SUBTYPES

log = logging.getLogger("shapedelta")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--out", required=out_required, help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="shapedelta", description="Shape deltas between part trees.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="generate the procedural dataset")
    p.add_argument("--groups", type=int, default=10, help="groups per subtype")
    p.add_argument("--subtypes", default=",".join(SUBTYPES))
    _common(p, out_required=True)

    p = sub.add_parser("neighbors", help="within-group k-NN table")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metric", choices=METRICS, default="geometric")
    p.add_argument("--k", type=int, default=95)
    _common(p, out_required=True)

    p = sub.add_parser("pairs", help="compute and audit deltas for a neighborhood table")
    p.add_argument("--data", required=True)
    p.add_argument("--neighbors", required=True)
    _common(p, out_required=True)

    p = sub.add_parser("delta", help="compute the delta from source to target")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    _common(p, out_required=True)

    p = sub.add_parser("apply", help="apply a delta to a source shape")
    p.add_argument("--source", required=True)
    p.add_argument("--delta", required=True)
    _common(p, out_required=True)

    p = sub.add_parser("match", help="part matching between two shapes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    _common(p)

    p = sub.add_parser("dist", help="distance between two shapes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--metric", choices=METRICS, default="geometric")
    _common(p)

    p = sub.add_parser("train", help="train the delta VAE")
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", help="pair manifest from `pairs` (default: sampled training pairs)")
    p.add_argument("--max-pairs", type=int, default=8000)
    _common(p, out_required=True)

    for name, helptext in (("reconstruct", "encode and decode a delta"),
                           ("transfer", "transfer a delta to another source")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--source", required=True)
        p.add_argument("--delta", required=True)
        if name == "transfer":
            p.add_argument("--other", required=True)
        _common(p, out_required=True)

    p = sub.add_parser("generate", help="sample edits of a source shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--count", type=int, default=100)
    _common(p, out_required=True)

    p = sub.add_parser("interpolate", help="decode edits between two encoded deltas")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--delta-a", required=True)
    p.add_argument("--delta-b", required=True)
    p.add_argument("--steps", type=int, default=8)
    _common(p, out_required=True)

    p = sub.add_parser("eval", help="run an evaluation protocol and write a report")
    p.add_argument("--data", required=True)
    p.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baselines", default="identity")
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--pairs-per-source", type=int)
    p.add_argument("--sources", type=int, default=50)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--transfers", type=int, default=300)
    _common(p, out_required=True)

    p = sub.add_parser("report", help="merge report files into one")
    p.add_argument("inputs", nargs="+")
    _common(p, out_required=True)
    return ap


# ----------------------------------------------------------------------------


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _cmd_synth_gen(a) -> None:
    subtypes = tuple(s for s in a.subtypes.split(",") if s)
    unknown = set(subtypes) - set(SUBTYPES)
    if unknown:
        raise UsageError(f"unknown subtypes {sorted(unknown)}")
    if a.groups < 1:
        raise UsageError("--groups must be >= 1")
    write_dataset(synthetic_dataset(a.groups, a.seed, subtypes), a.out)


def _cmd_neighbors(a) -> None:
    ds = read_dataset(a.data)
    group_neighborhoods(ds, a.split, a.metric, a.k, seed=a.seed).save(a.out)


def _cmd_pairs(a) -> None:
    ds = read_dataset(a.data)
    pairs = build_pairs(ds, NeighborhoodTable.load(a.neighbors))
    write_pairs(pairs, a.out)
    bad = sum(1 for p in pairs if p.error)
    print(f"{len(pairs)} pairs, {bad} failed")


def _cmd_delta(a) -> None:
    write_delta(compute_delta(read_shape(a.source), read_shape(a.target)), a.out)


def _cmd_apply(a) -> None:
    write_shape(apply_delta(read_shape(a.source), read_delta(a.delta)), a.out)


def _cmd_match(a) -> None:
    m = match_shapes(read_shape(a.source), read_shape(a.target))
    out = {"pairs": m.pairs, "unmatched_source": m.unmatched_source,
           "unmatched_target": m.unmatched_target, "cost": m.cost}
    if a.out:
        _write_json(out, a.out)
    else:
        print(json.dumps(out, sort_keys=True))


def _cmd_dist(a) -> None:
    d = shape_distance(read_shape(a.source), read_shape(a.target), a.metric, a.seed)
    if a.out:
        _write_json({"metric": a.metric, "distance": d}, a.out)
    print(repr(d))


def _train_config(a):
    from .train import TrainConfig, read_config

    return read_config(a.config) if a.config else TrainConfig(seed=a.seed)


def _cmd_train(a) -> None:
    import torch

    from .model import DeltaVAE, make_pair_data
    from .train import config_text, train

    torch.set_num_threads(1)
    cfg = _train_config(a)
    ds = read_dataset(a.data)
    if a.pairs:
        by_id = {r.id: r.shape for r in ds.records}
        pairs = [make_pair_data(by_id[p.source], p.delta) for p in read_pairs(a.pairs) if p.delta is not None]
    else:
        pairs = pair_data(ds, training_pairs(ds, a.max_pairs, cfg.seed))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text(cfg), encoding="utf-8")
    model = DeltaVAE(ds.records[0].shape.taxonomy, cfg.model_config(), seed=cfg.seed)
    res = train(model, pairs, cfg, log_path=out / "log.jsonl", checkpoint_dir=out)
    print(f"{res.steps} steps, final loss {res.history[-1]['total']:.6g}")


def _load(a):
    from .train import load_model

    if not Path(a.checkpoint).exists():
        raise DataError(f"checkpoint {a.checkpoint} not found")
    return load_model(a.checkpoint)[0]


def _cmd_reconstruct(a) -> None:
    from .model import reconstruct

    write_delta(reconstruct(_load(a), read_shape(a.source), read_delta(a.delta)).delta, a.out)


def _cmd_transfer(a) -> None:
    from .model import transfer_edit

    model = _load(a)
    out = transfer_edit(model, read_shape(a.source), read_delta(a.delta), read_shape(a.other))
    write_delta(out.delta, a.out)


def _cmd_generate(a) -> None:
    from .model import generate_edits

    src = read_shape(a.source)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, e in enumerate(generate_edits(_load(a), src, a.count, seed=a.seed)):
        write_delta(e.delta, out / f"edit{n:03d}.delta.json")
        write_shape(apply_delta(src, e.delta), out / f"edit{n:03d}.json")


def _cmd_interpolate(a) -> None:
    from .model import interpolate_edits

    src = read_shape(a.source)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = interpolate_edits(_load(a), src, read_delta(a.delta_a), read_delta(a.delta_b), a.steps)
    for n, e in enumerate(steps):
        write_delta(e.delta, out / f"step{n:02d}.delta.json")
        write_shape(apply_delta(src, e.delta), out / f"step{n:02d}.json")


def _cmd_eval(a) -> None:
    from .harness import run_experiment

    baselines = tuple(b for b in a.baselines.split(",") if b)
    if set(baselines) - set(BASELINES):
        raise UsageError(f"unknown baselines in {a.baselines!r}")
    if "identity" not in baselines:
        baselines = ("identity",) + baselines
    spec = ExperimentSpec(a.experiment, split=a.split, k=a.k, baselines=baselines, checkpoint=a.checkpoint,
                          seed=a.seed, pairs_per_source=a.pairs_per_source, num_sources=a.sources,
                          samples=a.samples, num_transfers=a.transfers)
    ds = read_dataset(a.data)
    extra = {"config": Path(a.config).read_text(encoding="utf-8")} if a.config else {}
    rep = run_experiment(ds, spec, evaluator=Evaluator(ds, a.seed), extra_config=extra)
    rep.write(a.out)
    print(rep.to_csv(), end="")


def _cmd_report(a) -> None:
    merged = Report()
    for path in a.inputs:
        if not Path(path).exists():
            raise DataError(f"{path}: report not found")
        merged.extend(Report.read(path))
    merged.meta["experiments"] = sorted({r["experiment"] for r in merged.rows})
    merged.write(a.out)
    print(merged.to_csv(), end="")


COMMANDS = {
    "synth-gen": _cmd_synth_gen, "neighbors": _cmd_neighbors, "pairs": _cmd_pairs,
    "delta": _cmd_delta, "apply": _cmd_apply, "match": _cmd_match, "dist": _cmd_dist,
    "train": _cmd_train, "reconstruct": _cmd_reconstruct, "generate": _cmd_generate,
    "transfer": _cmd_transfer, "interpolate": _cmd_interpolate, "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, DeltaError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
