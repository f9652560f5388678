"""``diffsim`` command line.

Each subcommand is a thin adapter over the library. Machine-readable output
goes to stdout or to files under ``--out``; everything else goes to stderr.
Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import backends, datasets, harness, retrieval
from .errors import ConfigError, DiffSimError, TripletError, ValidationError, WeightsMissingError
from .feature_store import CACHE_ENV, FeatureStore
from .pipeline import PairScorer
from .sites import UNET_BLOCKS, AttentionSite, MetricConfig, default_metric_kind

log = logging.getLogger("diffsim")

DEFAULT_BACKEND = "sd15"
DEFAULT_BLOCK = "up_0"
TASK_TIMESTEPS = {"style": 900, "instance": 750, "human": 600}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("metric")
    g.add_argument("--config", help="JSON file with a full metric config (overrides the flags below)")
    g.add_argument("--backend", help=f"backend id (default {DEFAULT_BACKEND}; toy-self if its weights are missing)")
    g.add_argument("--kind", choices=("self", "cross"), default="self", help="attention kind")
    g.add_argument("--block", help=f"U-Net block ({', '.join(UNET_BLOCKS)}) or transformer layer index")
    g.add_argument("--layer", type=int, default=0, help="attention layer ordinal inside the block")
    g.add_argument("--timestep", type=int, help="denoising timestep (diffusion backends)")
    g.add_argument("--task", choices=sorted(TASK_TIMESTEPS), help="timestep preset: style 900, instance 750, human 600")
    g.add_argument("--resolution", type=int, help="square input resolution")
    g.add_argument("--seed", type=int, default=0, help="noise seed (triplet sampling seed for 'triplets build')")
    g.add_argument("--per-image-noise", action="store_true", help="independent noise per image instead of shared")
    g.add_argument("--cosine-mode", choices=("per_token_mean", "flattened"), default="per_token_mean")
    g.add_argument("--crop-subject", action="store_true", help="crop to the foreground bounding box first")
    o = p.add_argument_group("io")
    o.add_argument("--cache-dir", help=f"feature cache root (default ${CACHE_ENV})")
    o.add_argument("--out", help="output file or directory")
    o.add_argument("--format", help="comma-separated output formats")
    o.add_argument("--jobs", type=int, default=1, help="worker threads")
    o.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="diffsim", description="Aligned-attention image similarity.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("compare", parents=[common], help="score one image pair")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", parents=[common], help="2AFC accuracy on a triplet file")
    p.add_argument("--triplets", required=True)
    p.add_argument("--choices-out", help="also write per-triplet choices (jsonl) for ensembling")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", parents=[common], help="sweep sites and timesteps on a triplet file")
    p.add_argument("--triplets", required=True)
    p.add_argument("--timesteps", help="comma-separated timesteps (default 100..900 step 100)")
    p.add_argument("--blocks", help="comma-separated blocks to keep (default all)")
    p.add_argument("--resolutions", help="comma-separated resolutions (default backend default)")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("triplets", help="triplet construction")
    tsub = p.add_subparsers(dest="triplets_command", required=True, metavar="ACTION")
    b = tsub.add_parser("build", parents=[common], help="sample triplets from a manifest")
    b.add_argument("--manifest", required=True)
    b.add_argument("--n", type=int, help="triplet count for sampled benchmarks")
    b.add_argument("--repeats", type=int, help="samples per group for cute / ip_bench")
    b.set_defaults(func=cmd_triplets_build)

    p = sub.add_parser("retrieve", parents=[common], help="top-k neighbours of a query")
    p.add_argument("--query", required=True, help="image path or corpus image id")
    p.add_argument("--corpus-manifest", required=True)
    p.add_argument("--k", type=int, default=retrieval.DEFAULT_K)
    p.add_argument("--include-query", action="store_true", help="keep the query's own id in the results")
    p.add_argument("--contact-sheet", help="write a PNG of the query and its hits")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("video-var", parents=[common], help="appearance-consistency variance of videos")
    p.add_argument("--manifest", help="tiktok manifest")
    p.add_argument("--video", action="append", help="video id (repeatable; default all)")
    p.add_argument("--frames", nargs="+", help="frame image paths in order, instead of a manifest")
    p.set_defaults(func=cmd_video_var)

    p = sub.add_parser("cache", help="feature cache maintenance")
    csub = p.add_subparsers(dest="cache_command", required=True, metavar="ACTION")
    g = csub.add_parser("gc", parents=[common], help="evict least recently used entries")
    g.add_argument("--max-bytes", required=True, help="size budget, e.g. 500M or 2G")
    g.set_defaults(func=cmd_cache_gc)

    p = sub.add_parser("weights", help="model weights")
    wsub = p.add_subparsers(dest="weights_command", required=True, metavar="ACTION")
    w = wsub.add_parser("check", parents=[common], help="report which backends can load")
    w.set_defaults(func=cmd_weights_check)

    p = sub.add_parser("ensemble", parents=[common], help="majority vote over choice files")
    p.add_argument("--triplets", required=True)
    p.add_argument("--choices", nargs="+", required=True, help="an odd number (>= 3) of choice files")
    p.set_defaults(func=cmd_ensemble)
    return parser


# config resolution

def _parse_block(raw: Optional[str]):
    if raw is None:
        return None
    return int(raw) if re.fullmatch(r"\d+", raw) else raw


def _backend_available(backend_id: str) -> bool:
    try:
        backends.get_backend(backend_id)
    except (WeightsMissingError, ImportError):
        return False
    return True


def load_config_file(path) -> MetricConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if isinstance(data, dict) and "config" in data and "site" not in data:
        data = data["config"]  # a report or retrieval record
    try:
        return MetricConfig.from_dict(data)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"{path}: not a metric config: {e}") from e


def resolve_config(args) -> MetricConfig:
    if args.config:
        return load_config_file(args.config)
    backend_id = args.backend
    if backend_id is None:
        backend_id = DEFAULT_BACKEND
        if not _backend_available(backend_id):
            fallback = "toy-cross" if args.kind == "cross" else "toy-self"
            print(
                f"\n!!! NOTICE: weights for the default backend {DEFAULT_BACKEND!r} are not available "
                f"(set ${backends.WEIGHTS_ENV}).\n!!! Falling back to the toy backend {fallback!r}; "
                f"scores are NOT comparable to real models.\n",
                file=sys.stderr,
            )
            backend_id = fallback
    backend = backends.get_backend(backend_id)
    block = _parse_block(args.block)
    if block is None:
        blocks = [s.block for s in backend.sites() if s.kind == args.kind]
        if not blocks:
            raise ConfigError(f"backend {backend_id!r} has no {args.kind}-attention sites")
        block = DEFAULT_BLOCK if DEFAULT_BLOCK in blocks else blocks[-1]
    timestep = args.timestep
    if timestep is None and backend.is_diffusion:
        timestep = TASK_TIMESTEPS[args.task] if args.task else backend.default_timestep
    resolution = args.resolution or backend.default_resolution
    site = AttentionSite(backend_id, args.kind, block, args.layer, timestep, resolution)
    backend.validate_site(site)
    return MetricConfig(site, default_metric_kind(backend_id, args.kind), noise_seed=args.seed,
                        shared_noise=not args.per_image_noise, cosine_mode=args.cosine_mode,
                        crop_subject=args.crop_subject)


def _store(args) -> Optional[FeatureStore]:
    if args.cache_dir:
        return FeatureStore(args.cache_dir)
    return FeatureStore.from_env()


def _formats(args, default: Sequence[str]) -> list[str]:
    if not args.format:
        return list(default)
    return [f.strip() for f in args.format.split(",") if f.strip()]


def _int_list(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None


def _emit_lines(args, lines: list[str]) -> None:
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        log.info("wrote %s", args.out)
    else:
        sys.stdout.write(text)


# subcommands

def cmd_compare(args) -> int:
    config = resolve_config(args)
    score = PairScorer(config, _store(args)).score(args.image_a, args.image_b)
    _emit_lines(args, [json.dumps(score.to_dict(), sort_keys=True)])
    return 0


def _read_triplets(path):
    try:
        return datasets.read_triplets(path)
    except FileNotFoundError:
        raise ValidationError(f"triplet file not found: {path}") from None


def cmd_eval(args) -> int:
    config = resolve_config(args)
    triplets = _read_triplets(args.triplets)
    report = harness.evaluate_triplets(config, triplets, store=_store(args), jobs=args.jobs)
    out = args.out or "diffsim-report"
    files = harness.emit_report(report, out, _formats(args, ("json", "csv", "markdown")))
    if args.choices_out:
        harness.write_choices(args.choices_out, report)
    log.info("accuracy %.4f (%d/%d); wrote %s", report.accuracy, report.n_correct, report.n_triplets,
             ", ".join(str(p) for ps in files.values() for p in ps))
    print(json.dumps({"accuracy": report.accuracy, "n_correct": report.n_correct,
                      "n_triplets": report.n_triplets, "config": config.to_dict()}, sort_keys=True))
    return 0


def cmd_gridsearch(args) -> int:
    base = resolve_config(args)
    grid = harness.default_grid(base.backend_id, base.metric_kind, kind=base.site.kind,
                                timesteps=_int_list(args.timesteps), resolutions=_int_list(args.resolutions),
                                noise_seed=base.noise_seed)
    if args.blocks:
        keep = {_parse_block(b.strip()) for b in args.blocks.split(",")}
        grid = [c for c in grid if c.site.block in keep]
    grid = [c.replace(shared_noise=base.shared_noise, cosine_mode=base.cosine_mode,
                      crop_subject=base.crop_subject) for c in grid]
    triplets = _read_triplets(args.triplets)
    report = harness.grid_search(base.metric_kind, grid, triplets, store=_store(args), jobs=args.jobs)
    harness.emit_report(report, args.out or "diffsim-grid", _formats(args, ("json", "csv", "markdown", "plot")))
    log.info("best %s: accuracy %.4f", report.config.site.label(), report.accuracy)
    print(json.dumps({"best": report.config.to_dict(), "accuracy": report.accuracy,
                      "grid_size": len(grid)}, sort_keys=True))
    return 0


def cmd_triplets_build(args) -> int:
    manifest = datasets.load_manifest(args.manifest)
    triplets = datasets.build_triplets(manifest, args.seed, n_triplets=args.n, repeats=args.repeats)
    if args.out:
        base = Path(args.out).resolve().parent
        triplets = [datasets.TripletRecord(t.id, t.ref, t.cand, t.gt_index, t.benchmark, t.meta,
                                           {k: os.path.relpath(v, base) for k, v in t.paths.items()})
                    for t in triplets]
        datasets.write_triplets(args.out, triplets)
    else:
        for t in triplets:
            sys.stdout.write(json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    log.info("%d %s triplets (seed %d)", len(triplets), manifest.benchmark, args.seed)
    return 0


def cmd_retrieve(args) -> int:
    config = resolve_config(args)
    manifest = datasets.load_manifest(args.corpus_manifest)
    corpus = {it["id"]: str(manifest.path_of(it["id"])) for it in manifest.items}
    if args.query in corpus:
        qid, query = args.query, corpus[args.query]
    else:
        qid, query = args.query, args.query
    store = _store(args)
    scorer = PairScorer(config, store)
    retrieval.precompute_corpus(config, corpus, scorer=scorer, jobs=args.jobs)
    ranking = retrieval.query_topk(config, query, corpus, args.k, exclude_query=not args.include_query,
                                   scorer=scorer, query_id=qid)
    if ranking.truncated:
        log.warning("k=%d exceeds the %d candidates; returning the full ranking", args.k, len(ranking.hits))
    _emit_lines(args, [json.dumps(r, sort_keys=True) for r in ranking.to_records()])
    if args.contact_sheet:
        retrieval.contact_sheet(ranking, corpus, query, args.contact_sheet)
    return 0


def cmd_video_var(args) -> int:
    config = resolve_config(args)
    scorer = PairScorer(config, _store(args))
    rows = []
    if args.frames:
        rows.append(("frames", args.frames))
    elif args.manifest:
        manifest = datasets.load_manifest(args.manifest)
        for vid in args.video or datasets.video_ids(manifest):
            ids = datasets.load_frame_sequence(manifest, vid)
            rows.append((vid, [str(manifest.path_of(i)) for i in ids]))
    else:
        raise ValidationError("give --manifest or --frames")
    lines, values = [], []
    for vid, frames in rows:
        var = harness.video_consistency_variance(config, frames, scorer)
        values.append(var)
        lines.append(json.dumps({"video": vid, "n_frames": len(frames), "variance": var,
                                 "config": config.to_dict()}, sort_keys=True))
    _emit_lines(args, lines)
    log.info("mean variance over %d videos: %.6g", len(values), sum(values) / len(values))
    return 0


_SIZE_RE = re.compile(r"(\d+(?:\.\d+)?)\s*([kKmMgGtT]?)[bB]?")


def parse_size(raw: str) -> int:
    m = _SIZE_RE.fullmatch(raw.strip())
    if not m:
        raise ConfigError(f"bad size {raw!r}; use e.g. 500M or 2G")
    mult = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}[m.group(2).lower()]
    return int(float(m.group(1)) * mult)


def cmd_cache_gc(args) -> int:
    store = _store(args)
    if store is None:
        raise ConfigError(f"no cache directory; pass --cache-dir or set ${CACHE_ENV}")
    budget = parse_size(args.max_bytes)
    evicted = store.gc(budget)
    print(json.dumps({"evicted": evicted, "size_bytes": store.size_bytes(), "max_bytes": budget}))
    return 0


def cmd_weights_check(args) -> int:
    ids = [args.backend] if args.backend else list(backends.BACKEND_IDS)
    root = backends.weights_dir()
    missing = 0
    for bid in ids:
        try:
            b = backends.get_backend(bid)
            status = {"backend": bid, "available": True, "fingerprint": b.fingerprint()}
        except WeightsMissingError as e:
            status = {"backend": bid, "available": False, "expected": str(e.path)}
        except ImportError as e:
            status = {"backend": bid, "available": False, "error": f"missing dependency: {e.name}"}
        missing += not status["available"]
        print(json.dumps(status, sort_keys=True))
    log.info("weights root: %s", root or f"(unset ${backends.WEIGHTS_ENV})")
    # listing everything is informational; asking about one backend is a check
    return 1 if args.backend and missing else 0


def cmd_ensemble(args) -> int:
    triplets = _read_triplets(args.triplets)
    choice_sets = [harness.read_choices(p) for p in args.choices]
    report = harness.ensemble(choice_sets, triplets, names=[str(p) for p in args.choices])
    harness.emit_report(report, args.out or "diffsim-ensemble", _formats(args, ("json", "csv", "markdown")))
    print(json.dumps({"accuracy": report.accuracy, "n_correct": report.n_correct,
                      "n_triplets": report.n_triplets}, sort_keys=True))
    return 0


def _exit_code(e: BaseException) -> int:
    if isinstance(e, TripletError):
        e = e.cause
    return 2 if isinstance(e, ValidationError) else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="diffsim: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (DiffSimError, OSError) as e:
        print(f"diffsim: error: {e}", file=sys.stderr)
        return _exit_code(e)


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
