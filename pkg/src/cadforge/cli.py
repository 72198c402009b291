"""Command-line entry points for the synthesis pipeline and its offline stages."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)


def _emit(payload: dict[str, Any], out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _cmd_synthesize(args: argparse.Namespace) -> int:
    from .coordinator import PipelineConfig, run_pipeline

    config = PipelineConfig.from_json(args.config)
    summary = run_pipeline(config)
    _emit(summary.to_json_dict(), args.out)
    return 0


def _cmd_catalog(args: argparse.Namespace) -> int:
    from .catalog import load_taxonomy, run_catalog_stage, write_catalog
    from .coordinator import PipelineConfig, make_backend

    config = PipelineConfig.from_json(args.config)
    if not config.taxonomy_path or not config.catalog_prompt_path:
        print("config must set taxonomy_path and catalog_prompt_path", file=sys.stderr)
        return 2
    taxonomy = load_taxonomy(config.taxonomy_path)
    template = Path(config.catalog_prompt_path).read_text(encoding="utf-8")
    llm = make_backend(config.endpoints[0], "catalog", replay_loop=config.replay_loop)
    descriptions = run_catalog_stage(
        taxonomy, llm, template, batch_size=args.batch_size,
        near_duplicate_jaccard=args.near_duplicate_jaccard,
    )
    write_catalog(descriptions, args.out)
    print(f"wrote {len(descriptions)} descriptions to {args.out}")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    from .store import ArtifactStore, compute_generation_stats

    store = ArtifactStore(args.store)
    stats = compute_generation_stats(store.read_outcomes())
    payload: dict[str, Any] = stats.to_json_dict()

    entries = store.read_manifest()
    faces = [e["topo"]["num_brep_faces"] for e in entries if e.get("topo")]
    if args.min_faces is not None:
        faces = [f for f in faces if f >= args.min_faces]
    if args.max_faces is not None:
        faces = [f for f in faces if f <= args.max_faces]
    if faces:
        ordered = sorted(faces)
        payload["artifact_faces"] = {
            "count": len(ordered),
            "mean": sum(ordered) / len(ordered),
            "median": ordered[(len(ordered) - 1) // 2],
            "min": ordered[0],
            "max": ordered[-1],
        }
    _emit(payload, args.out)
    return 0


def _cmd_split(args: argparse.Namespace) -> int:
    from .store import ArtifactStore, build_manifest_splits, write_splits

    store = ArtifactStore(args.store)
    ids = [entry["artifact_id"] for entry in store.read_manifest()]
    assignment = build_manifest_splits(ids, args.n_val, args.n_test, args.seed)
    write_splits(store, assignment, args.seed)
    counts = {"train": 0, "val": 0, "test": 0}
    for split in assignment.values():
        counts[split] += 1
    _emit({"seed": args.seed, "counts": counts}, None)
    return 0


def _cmd_curate(args: argparse.Namespace) -> int:
    from .curate import kmeans_cluster, read_embeddings, select_exemplars

    embeddings = read_embeddings(args.embeddings, args.ids)
    model = kmeans_cluster(embeddings, args.k, seed=args.seed)
    exemplars = select_exemplars(model, embeddings)
    _emit(
        {
            "k": model.k,
            "seed": args.seed,
            "inertia": model.inertia,
            "iterations": model.n_iterations,
            "exemplars": exemplars,
        },
        args.out,
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .mesh import MeshError, load_stl
    from .metrics import (
        MetricsError,
        best_rotation_iou,
        chamfer_distance,
        normalize_mesh,
        sample_surface,
        success_rate,
    )

    gt_dir = Path(args.gt_dir)
    pred_dir = Path(args.pred_dir)
    results = []
    per_item = []
    for gt_path in sorted(gt_dir.glob("*.stl")):
        name = gt_path.name
        pred_path = pred_dir / name
        record: dict[str, Any] = {"name": name, "executed_ok": False}
        if pred_path.is_file():
            try:
                pred = load_stl(pred_path)
                gt = load_stl(gt_path)
                iou, angle = best_rotation_iou(pred, gt, args.resolution)
                cd = chamfer_distance(
                    sample_surface(normalize_mesh(pred)[0], args.samples, args.seed),
                    sample_surface(normalize_mesh(gt)[0], args.samples, args.seed),
                )
                record.update(
                    {"executed_ok": True, "iou": iou, "rotation_deg": angle, "chamfer": cd}
                )
            except (MeshError, MetricsError) as exc:
                record["error"] = str(exc)
        results.append({k: record.get(k) for k in ("executed_ok", "iou", "chamfer")})
        per_item.append(record)
    payload = success_rate(results)
    payload["items"] = per_item
    _emit(payload, args.out)
    return 0


def _cmd_eval_dist(args: argparse.Namespace) -> int:
    from .curate import read_embeddings
    from .metrics import frechet_distance, kball_coverage

    ref = read_embeddings(args.ref_emb, args.ref_ids or args.ref_emb + ".ids")
    syn = read_embeddings(args.syn_emb, args.syn_ids or args.syn_emb + ".ids")
    payload = {
        "frechet_distance": frechet_distance(ref.matrix, syn.matrix),
        "kball_coverage": kball_coverage(ref.matrix, syn.matrix, args.k),
        "k": args.k,
        "n_ref": len(ref),
        "n_syn": len(syn),
    }
    _emit(payload, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadforge",
        description="Closed-loop synthesis, curation, and evaluation of parametric CAD programs.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="run the full generate-validate-repair pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", help="write the summary JSON here as well")
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("catalog", help="stage 1 only: generate the part-description catalog")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="catalog JSONL output path")
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--near-duplicate-jaccard", type=float, default=None)
    p.set_defaults(func=_cmd_catalog)

    p = sub.add_parser("stats", help="generation statistics for a store")
    p.add_argument("--store", required=True)
    p.add_argument("--out")
    p.add_argument("--min-faces", type=int, default=None)
    p.add_argument("--max-faces", type=int, default=None)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("split", help="assign train/val/test splits over the manifest")
    p.add_argument("--store", required=True)
    p.add_argument("--n-val", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("curate", help="k-means exemplar selection over embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--ids", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("eval", help="voxel IoU + Chamfer evaluation of predicted STLs")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("eval-dist", help="distributional metrics between embedding sets")
    p.add_argument("--ref-emb", required=True)
    p.add_argument("--syn-emb", required=True)
    p.add_argument("--ref-ids")
    p.add_argument("--syn-ids")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval_dist)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
