"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate import CoverageError, aggregate_records
from .evaluation import AlignmentError, audit, exact_match, read_jsonl, write_jsonl
from .lasrc import LasrcConfig
from .merge import MergeConfig, merge
from .pipeline import InvariantError, PipelineConfig, aggregate_stage, check_compositions, run_toy_pipeline
from .report import plot_block_gammas, write_audit, write_tsv
from .retrieval import build_support, load_manifest, load_tasks, queries_of, retrieve_view, save_manifest
from .runlog import OUT_PLACEHOLDER, hash_tree, read_run_manifest, write_run_manifest
from .sdp import DEFAULT_SEEDS, SdpConfig, save_masks, sdp_bundle
from .synthetic import SpecError, ToyPoolSpec, gen_toy_pool, load_toy_tasks, toy_support_loss, write_toy_pool
from .tensor_store import BundleFormatError, ShapeError, save_bundle
from .weight_search import EvaluationError, SubprocessEvaluator, WeightVector, search_weights

log = logging.getLogger("loracompose")

CONFIG_ENV = "LORACOMPOSE_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for data errors
        raise UsageError(message)


def _csv(text: str) -> list[str]:
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_merge_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default="lasrc", choices=["linear", "lasrc", "ties", "dare-add", "dare-ties"])
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--gamma-floor", type=float, default=0.05)
    p.add_argument("--norm-guard", type=float, default=0.3)
    p.add_argument("--prune-threshold", type=float, default=0.0)
    p.add_argument("--consensus-scale", type=float, default=1.0)
    p.add_argument("--alignment-scale", type=float, default=0.0)
    p.add_argument("--no-overlap-adaptive", action="store_true")
    p.add_argument("--trim-fraction", type=float, default=0.2)


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--clip-lo", type=float, default=-1.5)
    p.add_argument("--clip-hi", type=float, default=1.5)


def _add_retrieval_flags(p: argparse.ArgumentParser, global_k: int | None = 20, local_k: int | None = 20) -> None:
    p.add_argument("--K", type=int, default=5, help="support examples per task")
    p.add_argument("--offset", type=int, default=10)
    p.add_argument("--global-k", type=int, default=global_k)
    p.add_argument("--local-k", type=int, default=local_k)
    p.add_argument("--views", type=_csv, help="comma-separated view ids (default: all)")


def _add_stats_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--permutations", type=int, default=20_000)
    p.add_argument("--bootstrap", type=int, default=10_000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--audit-seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loracompose", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("retrieve", help="build support sets and retrieve candidate adapters per view")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tasks", required=True)
    _add_retrieval_flags(p)
    p.add_argument("--per-query", action="store_true", help="also emit per-query local candidate sets")

    p = sub.add_parser("search-weights", help="select adapter weights on the support set")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapters", type=_csv, help="adapter ids (default: all in manifest)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--evaluator", help="command reading JSON weights on stdin, printing a loss")
    g.add_argument("--toy-tasks", help="toy tasks.json; scores linear merges with the toy support loss")
    p.add_argument("--task", help="task id for --toy-tasks")
    p.add_argument("--seed", type=int, action="append")
    _add_search_flags(p)

    p = sub.add_parser("sdp", help="sparsify adapters with seeded drop masks")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--adapters", type=_csv)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--no-rescale", action="store_true")
    p.add_argument("--no-norm-preserve", action="store_true")
    p.add_argument("--masks", action="store_true", help="export bit-packed mask sidecars")

    p = sub.add_parser("merge", help="compose weighted adapters")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True, help="JSON {adapter_id: weight}")
    _add_merge_flags(p)
    p.add_argument("--p", type=float, default=0.5, help="drop rate for the DARE operators")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("aggregate", help="combine per-view predictions")
    _add_common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--mode", default="support", choices=["support", "uniform", "oracle"])
    p.add_argument("--views", type=_csv)

    p = sub.add_parser("eval", help="normalized exact match")
    _add_common(p)
    p.add_argument("--predictions", required=True)

    p = sub.add_parser("audit", help="paired flip counts, permutation test and task bootstrap")
    _add_common(p)
    p.add_argument("--a", required=True, help="reference method predictions")
    p.add_argument("--b", required=True, help="compared method predictions")
    p.add_argument("--label-a", default="A")
    p.add_argument("--label-b", default="B")
    _add_stats_flags(p)

    p = sub.add_parser("toygen", help="write a synthetic pool, tasks and manifest")
    _add_common(p)
    p.add_argument("--toy", default="", help="comma-separated key=value toy parameters, e.g. seed=7")

    p = sub.add_parser("pipeline", help="end-to-end run on a toy pool or on prediction files")
    _add_common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--toy", help="toy parameters, e.g. seed=7")
    src.add_argument("--predictions", help="per-view prediction JSONL")
    p.add_argument("--baseline", help="baseline predictions to audit against (prediction input only)")
    _add_retrieval_flags(p, None, None)
    _add_search_flags(p)
    _add_merge_flags(p)
    p.add_argument("--p", type=float, default=0.5, help="SDP drop rate (0 disables)")
    p.add_argument("--seed", type=int, action="append", help=f"SDP seed, repeatable (default {DEFAULT_SEEDS[0]})")
    p.add_argument("--mode", default="support", choices=["support", "uniform", "oracle"])
    _add_stats_flags(p)

    p = sub.add_parser("replay", help="re-run a recorded run manifest and compare output hashes")
    p.add_argument("manifest", help="run_manifest.json or the directory holding it")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load_config(argv: Sequence[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    path = known.config or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    return {k.replace("-", "_"): v for k, v in data.items()}


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    config = _load_config(argv)
    if config:
        # file values become defaults for every subcommand; explicit flags still win
        for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
            for sp in action.choices.values():
                known = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in config.items() if k in known})
    return parser.parse_args(argv)


def _merge_config(args) -> MergeConfig:
    lasrc = LasrcConfig(
        gamma_base=args.gamma, gamma_floor=args.gamma_floor, norm_guard=args.norm_guard,
        prune_threshold=args.prune_threshold, consensus_scale=args.consensus_scale,
        alignment_scale=args.alignment_scale, overlap_adaptive=not args.no_overlap_adaptive,
    )
    seeds = getattr(args, "seed", None) or [DEFAULT_SEEDS[0]]
    return MergeConfig(args.method, lasrc, args.trim_fraction, getattr(args, "p", 0.5), seeds[0])


def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "config", "verbose")}


# -- subcommands -------------------------------------------------------------


def cmd_retrieve(args, out: Path) -> list[str]:
    manifest = load_manifest(args.manifest)
    tasks = load_tasks(args.tasks)
    views = args.views or manifest.views
    records = []
    for task_id in sorted(tasks):
        task = tasks[task_id]
        support = build_support(task["examples"], args.K, args.offset, task_id)
        for view in views:
            rec = {
                "task_id": task_id, "view_id": view, "support_ids": support.example_ids,
                "candidates": retrieve_view(manifest, support, view, args.global_k, args.local_k),
            }
            if args.per_query:
                rec["per_query"] = {
                    q.query_id: retrieve_view(manifest, support, view, args.global_k, args.local_k, q)
                    for q in queries_of(task)
                }
            records.append(rec)
    write_jsonl(records, out / "retrieval.jsonl")
    return [args.manifest, args.tasks]


def cmd_search_weights(args, out: Path) -> list[str]:
    manifest = load_manifest(args.manifest)
    ids = args.adapters or manifest.adapter_ids
    seed = (args.seed or [0])[0]
    if args.evaluator:
        evaluator = SubprocessEvaluator(args.evaluator, ids)
        inputs = [args.manifest]
    else:
        from .merge import linear_merge

        tasks = {t.task_id: t for t in load_toy_tasks(args.toy_tasks)}
        if args.task not in tasks:
            raise UsageError(f"--task must name one of {sorted(tasks)}")
        task = tasks[args.task]
        bundles = manifest.load_bundles(ids)

        def evaluator(w):
            return toy_support_loss(task, linear_merge(bundles, dict(zip(ids, w))))

        inputs = [args.manifest, args.toy_tasks] + [str(manifest.bundle_path(a)) for a in ids]
    wv = search_weights(evaluator, len(ids), args.steps, seed, args.lam, (args.clip_lo, args.clip_hi), ids)
    (out / "weights.json").write_text(wv.to_json() + "\n")
    (out / "search.json").write_text(json.dumps({"objective": wv.objective, "seed": seed, "steps": args.steps}, indent=1) + "\n")
    return inputs


def cmd_sdp(args, out: Path) -> list[str]:
    manifest = load_manifest(args.manifest)
    ids = args.adapters or manifest.adapter_ids
    bundles = manifest.load_bundles(ids)
    for seed in args.seed or [DEFAULT_SEEDS[0]]:
        cfg = SdpConfig(args.p, seed, not args.no_rescale, not args.no_norm_preserve)
        sdir = out / f"seed_{seed}"
        (sdir / "adapters").mkdir(parents=True, exist_ok=True)
        entries = []
        for b in bundles:
            sparse, masks = sdp_bundle(b, cfg)
            save_bundle(sparse, sdir / "adapters" / f"{b.adapter_id}.bundle")
            if args.masks:
                save_masks(masks, sdir / "adapters" / f"{b.adapter_id}.mask", b.adapter_id, cfg)
            e = manifest.entry(b.adapter_id)
            entries.append(type(e)(e.adapter_id, e.source_task, f"adapters/{b.adapter_id}.bundle"))
        sub = type(manifest)(entries, {v: {a: idx[a] for a in ids if a in idx} for v, idx in manifest.view_indexes.items()})
        save_manifest(sub, sdir / "manifest.json")
    return [args.manifest] + [str(manifest.bundle_path(a)) for a in ids]


def cmd_merge(args, out: Path) -> list[str]:
    manifest = load_manifest(args.manifest)
    raw = json.loads(Path(args.weights).read_text())
    weights = WeightVector.from_mapping(raw, (min(-1.5, *raw.values()), max(1.5, *raw.values()))) if raw else None
    if weights is None:
        raise ValueError("weights file is empty")
    ids = list(weights.weights)
    bundles = manifest.load_bundles(ids)
    cfg = _merge_config(args)
    merged, comps = merge(bundles, weights, cfg)
    save_bundle(merged, out / "merged.bundle")
    (out / "merge_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    if comps:
        write_jsonl([c.to_record() for c in comps], out / "compositions.jsonl")
        if not args.no_figures:
            (out / "figures").mkdir(exist_ok=True)
            plot_block_gammas({"merged": comps}, out / "figures" / "block_gamma.png")
        check_compositions(comps, "merge")
    return [args.manifest, args.weights] + [str(manifest.bundle_path(a)) for a in ids]


def cmd_aggregate(args, out: Path) -> list[str]:
    records = read_jsonl(args.predictions)
    decisions = aggregate_records(records, args.mode, args.views)
    write_jsonl(decisions, out / "decisions.jsonl")
    final = [
        {"task_id": d["task_id"], "query_id": d["query_id"], "prediction": d["final_answer"], "reference": d["reference"],
         **({"DIAGNOSTIC": True} if d.get("DIAGNOSTIC") else {})}
        for d in decisions
    ]
    write_jsonl(final, out / "final_predictions.jsonl")
    paths = {d["paths"] for d in decisions}
    summary = {"mode": args.mode, "paths": max(paths) if paths else 0, "n_decisions": len(decisions)}
    if args.mode == "oracle":
        summary["DIAGNOSTIC"] = True
    (out / "aggregate.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return [args.predictions]


def cmd_eval(args, out: Path) -> list[str]:
    em = exact_match(read_jsonl(args.predictions))
    (out / "eval.json").write_text(json.dumps(em.rounded(), indent=1, sort_keys=True) + "\n")
    write_tsv(out / "eval.tsv", ["task_id", "em"], [(t, v) for t, v in sorted(em.per_task.items())])
    print(f"macro EM {em.macro:.2f}  micro EM {em.micro:.2f}  ({em.n_queries} queries, {len(em.per_task)} tasks)")
    return [args.predictions]


def cmd_audit(args, out: Path) -> list[str]:
    report = audit(
        read_jsonl(args.a), read_jsonl(args.b), args.permutations, args.bootstrap, args.audit_seed,
        args.level, args.label_a, args.label_b,
    )
    write_audit(report, out, not args.no_figures)
    print(report.to_table(), end="")
    return [args.a, args.b]


def cmd_toygen(args, out: Path) -> list[str]:
    spec = ToyPoolSpec.from_kv(args.toy)
    manifest, bundles, tasks = gen_toy_pool(spec)
    write_toy_pool(out, manifest, bundles, tasks, spec.to_dict())
    return []


def cmd_pipeline(args, out: Path) -> list[str]:
    cfg = PipelineConfig(
        merge=_merge_config(args), p=args.p, seeds=args.seed or [DEFAULT_SEEDS[0]], views=args.views,
        mode=args.mode, K=args.K, offset=args.offset, steps=args.steps, lam=args.lam,
        clip=(args.clip_lo, args.clip_hi), permutations=args.permutations, bootstrap=args.bootstrap,
        audit_seed=args.audit_seed, figures=not args.no_figures,
    )
    if args.predictions:
        records = read_jsonl(args.predictions)
        baseline = read_jsonl(args.baseline) if args.baseline else None
        aggregate_stage(records, args.mode, args.views, out, baseline, cfg)
        return [p for p in (args.predictions, args.baseline) if p]
    spec = ToyPoolSpec.from_kv(args.toy)
    cfg.global_k = args.global_k if args.global_k is not None else 3
    cfg.local_k = args.local_k if args.local_k is not None else 2
    cfg.K, cfg.offset = spec.K, spec.offset
    if args.K != 5 or args.offset != 10:
        raise UsageError("set support size and offset through --toy (K=..., offset=...) for toy runs")
    manifest, bundles, tasks = gen_toy_pool(spec)
    write_toy_pool(out / "pool", manifest, bundles, tasks, spec.to_dict())
    run_toy_pipeline(manifest, {b.adapter_id: b for b in bundles}, tasks, cfg, out)
    return []


COMMANDS = {
    "retrieve": cmd_retrieve,
    "search-weights": cmd_search_weights,
    "sdp": cmd_sdp,
    "merge": cmd_merge,
    "aggregate": cmd_aggregate,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "toygen": cmd_toygen,
    "pipeline": cmd_pipeline,
}


def cmd_replay(args) -> int:
    recorded = read_run_manifest(args.manifest)
    out = Path(args.out)
    argv = [a.replace(OUT_PLACEHOLDER, str(out)) for a in recorded["argv"]]
    code = run(argv)
    if code != EXIT_OK:
        return code
    fresh = hash_tree(out)
    if fresh != recorded["outputs"]:
        diff = sorted(set(fresh.items()) ^ set(recorded["outputs"].items()))
        print(f"replay mismatch in {len({d[0] for d in diff})} files: {sorted({d[0] for d in diff})[:10]}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"replay reproduced {len(fresh)} artifacts")
    return EXIT_OK


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        return cmd_replay(args)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, out)
        seeds = getattr(args, "seed", None) or []
        write_run_manifest(out, args.command, argv, _config_dict(args), seeds, inputs)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (BundleFormatError, ShapeError, AlignmentError, CoverageError, SpecError, EvaluationError,
            KeyError, ValueError, IndexError, LookupError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
