"""Batch command-line front end.

Every invocation runs one subcommand, prints exactly one JSON document to
stdout, and sends diagnostics to stderr (level set by the
``HYDRA_MERGE_LOG`` environment variable: error, info or debug).  All
randomness flows from ``--seed``, so repeating a command with identical
flags reproduces its outputs byte for byte.

Exit codes: 0 success, 1 failed gradient check, 2 usage error,
3 validation or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .adapters import AdapterCollection, MergedBundle, storage_ratio_percent
from .analysis import pairwise_similarity, reconstruction_report
from .archive import read_archive, write_archive
from .baselines import BaselineConfig, MergeMethod, MergeTarget, merge_collection
from .errors import HydraMergeError
from .gradcheck import run_suite
from .hydra import HydraConfig, InitScheme, globalize_assignment, merge_collection_hydra
from .linalg import DistanceKind
from .synthetic import SynthSpec, generate

log = logging.getLogger("hydramerge")

_BASELINES = [m.value for m in MergeMethod]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydramerge",
        description="Merge low-rank adapter collections and report on the results.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic adapter collection")
    gen.add_argument("--out", required=True, help="output archive path")
    gen.add_argument("--tasks", type=int, default=5)
    gen.add_argument("--layers", type=int, default=2)
    gen.add_argument("--slots", default="q,v", help="comma-separated slot names")
    gen.add_argument("--d", type=int, default=16)
    gen.add_argument("--k", type=int, default=16)
    gen.add_argument("--rank", type=int, default=4)
    gen.add_argument("--a-noise", type=float, default=0.05)
    gen.add_argument("--b-scale", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)

    merge = sub.add_parser("merge", help="merge a collection into a bundle archive")
    merge.add_argument("--in", dest="archive_in", required=True)
    merge.add_argument("--out", dest="archive_out", required=True)
    merge.add_argument(
        "--method", required=True, choices=_BASELINES + ["hydraopt"]
    )
    merge.add_argument("--ties-density", type=float, default=0.2)
    merge.add_argument("--dare-p", type=float, default=0.9)
    merge.add_argument("--scale", type=float, default=1.0)
    merge.add_argument(
        "--a-only", action="store_true", help="merge only input-side factors (baselines)"
    )
    merge.add_argument("--m", type=int, default=None, help="cluster count (hydraopt)")
    merge.add_argument("--temp", type=float, default=0.1)
    merge.add_argument("--epochs", type=int, default=1000)
    merge.add_argument("--lr", type=float, default=1e-2)
    merge.add_argument(
        "--distance", choices=[k.value for k in DistanceKind], default="mae"
    )
    merge.add_argument("--init", choices=["mean", "random"], default="random")
    merge.add_argument("--seed", type=int, default=0)
    merge.add_argument("--jobs", type=int, default=1, help="parallel slots (hydraopt)")
    merge.add_argument(
        "--globalize-assignment",
        action="store_true",
        help="replace per-slot assignments by each task's majority cluster",
    )

    storage = sub.add_parser("report-storage", help="storage accounting for a merge")
    storage.add_argument("--in", dest="archive_in", required=True)
    storage.add_argument("--merged", required=True)
    storage.add_argument("--out", default=None, help="also write the JSON here")

    similarity = sub.add_parser("analyze-similarity", help="pairwise factor similarity")
    similarity.add_argument("--in", dest="archive_in", required=True)
    similarity.add_argument("--out", default=None)

    recon = sub.add_parser("eval-recon", help="reconstruction error of a bundle")
    recon.add_argument("--in", dest="archive_in", required=True)
    recon.add_argument("--merged", required=True)
    recon.add_argument("--out", default=None)

    grad = sub.add_parser("grad-check", help="finite-difference gradient check")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--instances", type=int, default=20)
    grad.add_argument("--tolerance", type=float, default=1e-5)
    grad.add_argument("--out", default=None)
    return parser


def _emit(doc: dict, out_path: str | None = None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _load_collection(path) -> AdapterCollection:
    loaded = read_archive(path)
    if not isinstance(loaded, AdapterCollection):
        raise HydraMergeError(f"{path} holds a merged bundle, expected a collection")
    return loaded


def _load_bundle(path) -> MergedBundle:
    loaded = read_archive(path)
    if not isinstance(loaded, MergedBundle):
        raise HydraMergeError(f"{path} holds a collection, expected a merged bundle")
    return loaded


def _cmd_gen_synthetic(args) -> int:
    spec = SynthSpec(
        tasks=args.tasks,
        layers=args.layers,
        slot_names=tuple(s for s in args.slots.split(",") if s),
        d=args.d,
        k=args.k,
        rank=args.rank,
        a_noise=args.a_noise,
        b_scale=args.b_scale,
        seed=args.seed,
    )
    collection = generate(spec)
    write_archive(collection, args.out)
    log.info("wrote %s", args.out)
    _emit(
        {
            "command": "gen-synthetic",
            "archive": args.out,
            "tasks": collection.task_ids,
            "slots": [s.label() for s in collection.slots],
            "params": collection.param_count(),
            "seed": args.seed,
        }
    )
    return 0


def _cmd_merge(args, parser: argparse.ArgumentParser) -> int:
    if args.method == "hydraopt" and args.a_only:
        parser.error("--a-only does not apply to hydraopt")
    if args.method != "hydraopt" and args.m is not None:
        parser.error("--m only applies to hydraopt")
    collection = _load_collection(args.archive_in)
    doc: dict = {
        "command": "merge",
        "method": args.method,
        "archive_in": args.archive_in,
        "archive_out": args.archive_out,
        "seed": args.seed,
        "initial_loss": None,
        "final_loss": None,
        "per_slot_loss": None,
        "assignment": None,
    }
    if args.method == "hydraopt":
        cfg = HydraConfig(
            num_clusters=args.m if args.m is not None else collection.num_tasks,
            temperature=args.temp,
            epochs=args.epochs,
            learning_rate=args.lr,
            distance=DistanceKind(args.distance),
            seed=args.seed,
            init_scheme=InitScheme.MEAN_A_COPY_B if args.init == "mean" else InitScheme.RANDOM,
        )
        bundle, report = merge_collection_hydra(collection, cfg, jobs=max(1, args.jobs))
        if args.globalize_assignment:
            globalize_assignment(bundle)
        doc["initial_loss"] = report["initial_loss"]
        doc["final_loss"] = report["final_loss"]
        doc["per_slot_loss"] = report["per_slot"]
        doc["assignment"] = bundle.assignment_map()
    else:
        cfg = BaselineConfig(
            method=MergeMethod(args.method),
            ties_density=args.ties_density,
            dare_drop_p=args.dare_p,
            seed=args.seed,
            merge_target=MergeTarget.A_ONLY if args.a_only else MergeTarget.PER_MATRIX,
            scale=args.scale,
        )
        bundle = merge_collection(collection, cfg)
    write_archive(bundle, args.archive_out)
    log.info("wrote %s", args.archive_out)
    original = collection.param_count()
    merged = bundle.param_count
    doc["original_params"] = original
    doc["merged_params"] = merged
    doc["storage_ratio_percent"] = storage_ratio_percent(original, merged)
    _emit(doc)
    return 0


def _cmd_report_storage(args) -> int:
    collection = _load_collection(args.archive_in)
    bundle = _load_bundle(args.merged)
    original = collection.param_count()
    merged = bundle.param_count
    _emit(
        {
            "command": "report-storage",
            "storage": {
                "original_params": original,
                "merged_params": merged,
                "ratio_percent": storage_ratio_percent(original, merged),
            },
        },
        args.out,
    )
    return 0


def _cmd_analyze_similarity(args) -> int:
    collection = _load_collection(args.archive_in)
    doc = {"command": "analyze-similarity"}
    doc.update(pairwise_similarity(collection).to_dict())
    _emit(doc, args.out)
    return 0


def _cmd_eval_recon(args) -> int:
    collection = _load_collection(args.archive_in)
    bundle = _load_bundle(args.merged)
    doc = {"command": "eval-recon", "method": bundle.method}
    doc.update(reconstruction_report(collection, bundle).to_dict())
    _emit(doc, args.out)
    return 0


def _cmd_grad_check(args) -> int:
    report = run_suite(seed=args.seed, instances=args.instances, tolerance=args.tolerance)
    _emit({"command": "grad-check", "grad_check": report.to_dict()}, args.out)
    return 0 if report.passed else 1


def main(argv=None) -> int:
    level = os.environ.get("HYDRA_MERGE_LOG", "error").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            return _cmd_gen_synthetic(args)
        if args.command == "merge":
            return _cmd_merge(args, parser)
        if args.command == "report-storage":
            return _cmd_report_storage(args)
        if args.command == "analyze-similarity":
            return _cmd_analyze_similarity(args)
        if args.command == "eval-recon":
            return _cmd_eval_recon(args)
        return _cmd_grad_check(args)
    except (HydraMergeError, OSError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
