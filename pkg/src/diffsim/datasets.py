"""Benchmark manifests and seeded triplet construction.

A manifest is a JSON file listing every image of one benchmark with the
per-benchmark fields its sampling rule needs. Paths are relative to the
manifest's directory. ``manifest.schema.json`` in ``docs/`` is generated
from :data:`MANIFEST_SCHEMA`.

Triplet sampling uses numpy's PCG64 seeded through ``SeedSequence(seed,
spawn_key=(stream,))`` with a fixed stream number per benchmark, iterating
over ids in sorted order, so a ``(manifest, seed)`` pair always produces the
same triplets.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .errors import ManifestError

BENCHMARKS = ("nights", "dreambench_pp", "cute", "ip_bench", "tid2013", "sref", "instantstyle", "tiktok")

# sampling stream per benchmark; never renumber
STREAMS = {b: i for i, b in enumerate(BENCHMARKS)}

PUBLISHED_COUNTS = {
    "nights": 2120,
    "dreambench_pp": 937,
    "cute": 1800,
    "ip_bench": 1495,
    "tid2013": 600,
    "sref": 2000,
    "instantstyle": 2000,
}
DEFAULT_SAMPLED = {"sref": 2000, "instantstyle": 2000, "dreambench_pp": 937}
DEFAULT_REPEATS = {"cute": 10, "ip_bench": 5}
SREF_IMAGES_PER_STYLE = 4


def _role_item(roles, required_for):
    # items with role == required_for[0] must carry the fields in required_for[1]
    role, fields = required_for
    return {
        "required": ["group_id", "role"],
        "properties": {"group_id": {"type": "string", "minLength": 1}, "role": {"enum": list(roles)}},
        "allOf": [{"if": {"properties": {"role": {"const": role}}}, "then": {"required": list(fields)}}],
    }


_ITEM_RULES: dict[str, dict] = {
    "nights": {},
    "sref": {"required": ["style_id"], "properties": {"style_id": {"type": "string", "minLength": 1}}},
    "instantstyle": {"required": ["style_id"], "properties": {"style_id": {"type": "string", "minLength": 1}}},
    "cute": {
        "required": ["instance_id", "lighting_id"],
        "properties": {
            "instance_id": {"type": "string", "minLength": 1},
            "lighting_id": {"type": ["string", "integer"]},
            "category": {"type": "string"},
        },
    },
    "tid2013": _role_item(("reference", "distorted"), ("distorted", ("distortion_type", "distortion_level"))),
    "ip_bench": _role_item(("original", "variant"), ("variant", ("consistency_weight",))),
    "dreambench_pp": _role_item(("original", "generated"), ("generated", ("rating",))),
    "tiktok": {
        "required": ["video_id", "frame_index"],
        "properties": {"video_id": {"type": "string", "minLength": 1}, "frame_index": {"type": "integer", "minimum": 0}},
    },
}
_ITEM_RULES["tid2013"]["properties"].update(
    distortion_type={"type": ["string", "integer"]},
    distortion_level={"type": "integer", "minimum": 1, "maximum": 5},
)
_ITEM_RULES["ip_bench"]["properties"]["consistency_weight"] = {"type": "number"}
_ITEM_RULES["dreambench_pp"]["properties"]["rating"] = {"type": "number"}

_BASE_ITEM = {
    "type": "object",
    "required": ["id", "path"],
    "properties": {"id": {"type": "string", "minLength": 1}, "path": {"type": "string", "minLength": 1}},
}

_NIGHTS_TRIPLET = {
    "type": "object",
    "required": ["id", "ref", "cand"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "ref": {"type": "string"},
        "cand": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
        "gt_index": {"enum": [0, 1]},
        "votes": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
    },
    "oneOf": [{"required": ["gt_index"]}, {"required": ["votes"]}],
}


def _benchmark_schema(benchmark: str) -> dict:
    item = {"allOf": [_BASE_ITEM, {"type": "object", **_ITEM_RULES[benchmark]}]}
    schema = {
        "type": "object",
        "required": ["benchmark", "items"],
        "properties": {
            "benchmark": {"const": benchmark},
            "schema_version": {"const": 1},
            "items": {"type": "array", "items": item, "minItems": 1},
        },
    }
    if benchmark == "nights":
        schema["required"].append("triplets")
        schema["properties"]["triplets"] = {"type": "array", "items": _NIGHTS_TRIPLET, "minItems": 1}
    return schema


MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "diffsim benchmark manifest",
    "type": "object",
    "required": ["benchmark", "items"],
    "properties": {"benchmark": {"enum": list(BENCHMARKS)}},
    "allOf": [
        {"if": {"properties": {"benchmark": {"const": b}}}, "then": _benchmark_schema(b)} for b in BENCHMARKS
    ],
}


@dataclass
class DatasetManifest:
    benchmark: str
    items: list[dict]
    root: Path
    triplets: list[dict] = field(default_factory=list)
    source: Optional[Path] = None

    def __post_init__(self):
        self._by_id = {it["id"]: it for it in self.items}

    def item(self, image_id: str) -> dict:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise ManifestError(f"unknown image id {image_id!r}") from None

    def path_of(self, image_id: str) -> Path:
        return (self.root / self.item(image_id)["path"]).resolve()

    def paths(self, ids) -> dict[str, str]:
        return {i: str(self.path_of(i)) for i in ids}


@dataclass(frozen=True)
class TripletRecord:
    id: str
    ref: str
    cand: tuple[str, str]
    gt_index: int
    benchmark: str
    meta: dict = field(default_factory=dict, compare=False)
    paths: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cand", tuple(self.cand))
        if len(self.cand) != 2:
            raise ManifestError(f"triplet {self.id}: need exactly two candidates")
        if self.gt_index not in (0, 1):
            raise ManifestError(f"triplet {self.id}: gt_index must be 0 or 1, got {self.gt_index!r}")
        if self.ref in self.cand:
            raise ManifestError(f"triplet {self.id}: reference {self.ref!r} is also a candidate")
        if self.cand[0] == self.cand[1]:
            raise ManifestError(f"triplet {self.id}: both candidates are {self.cand[0]!r}")

    def source(self, image_id: str) -> str:
        """Where to load ``image_id`` from: its recorded path, else the id itself."""
        return self.paths.get(image_id, image_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "ref": self.ref,
            "cand": list(self.cand),
            "gt_index": self.gt_index,
            "benchmark": self.benchmark,
            "meta": self.meta,
            "paths": self.paths,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TripletRecord":
        return cls(d["id"], d["ref"], tuple(d["cand"]), int(d["gt_index"]), d.get("benchmark", ""),
                   d.get("meta", {}), d.get("paths", {}))


def write_triplets(path, triplets: list[TripletRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triplets:
            f.write(json.dumps(t.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_triplets(path) -> list[TripletRecord]:
    out = []
    base = Path(path).resolve().parent
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                t = TripletRecord.from_dict(d)
            except (ValueError, KeyError, TypeError) as e:
                raise ManifestError(f"{path}:{n}: bad triplet record: {e}") from e
            if t.paths:
                resolved = {k: str((base / v).resolve()) for k, v in t.paths.items()}
                t = TripletRecord(t.id, t.ref, t.cand, t.gt_index, t.benchmark, t.meta, resolved)
            out.append(t)
    return out


def _schema_error_message(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"schema violation at {where}: {err.message}"


def validate_manifest_dict(data: Any) -> None:
    """Raise :class:`ManifestError` with the JSON path of the first violation."""
    validator = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(list(e.absolute_path)), list(map(str, e.absolute_path))))
    if errors:
        # the most specific error is the one deepest in the instance
        best = jsonschema.exceptions.best_match(errors) or errors[0]
        deepest = max(errors, key=lambda e: len(list(e.absolute_path)))
        if len(list(deepest.absolute_path)) > len(list(best.absolute_path)):
            best = deepest
        if best.context:
            best = max(best.context, key=lambda e: len(list(e.absolute_path)))
        raise ManifestError(_schema_error_message(best))


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (OSError, ValueError) as e:
        raise ManifestError(f"cannot parse manifest {path}: {e}") from e
    validate_manifest_dict(data)
    m = DatasetManifest(data["benchmark"], data["items"], path.resolve().parent, data.get("triplets", []), path)
    _check_semantics(m, check_paths)
    return m


def _check_semantics(m: DatasetManifest, check_paths: bool) -> None:
    seen = set()
    for it in m.items:
        if it["id"] in seen:
            raise ManifestError(f"duplicate image id {it['id']!r}")
        seen.add(it["id"])
        if check_paths and not (m.root / it["path"]).is_file():
            raise ManifestError(f"image {it['id']!r}: path does not exist: {m.root / it['path']}")
    b = m.benchmark
    if b == "sref":
        for style, ids in _group(m.items, "style_id").items():
            if len(ids) != SREF_IMAGES_PER_STYLE:
                raise ManifestError(
                    f"sref style {style!r} has {len(ids)} images; exactly {SREF_IMAGES_PER_STYLE} required"
                )
    elif b in ("tid2013", "ip_bench", "dreambench_pp"):
        anchor = {"tid2013": "reference", "ip_bench": "original", "dreambench_pp": "original"}[b]
        for group, members in _group(m.items, "group_id", whole=True).items():
            anchors = [it for it in members if it["role"] == anchor]
            if len(anchors) != 1:
                raise ManifestError(f"{b} group {group!r} needs exactly one {anchor} image, has {len(anchors)}")
    elif b == "nights":
        ids = set()
        for t in m.triplets:
            if t["id"] in ids:
                raise ManifestError(f"duplicate triplet id {t['id']!r}")
            ids.add(t["id"])
            for ref in [t["ref"], *t["cand"]]:
                if ref not in seen:
                    raise ManifestError(f"triplet {t['id']!r} references unknown image {ref!r}")
            if "votes" in t and t["votes"][0] == t["votes"][1]:
                raise ManifestError(f"triplet {t['id']!r} has tied human votes")
    elif b == "tiktok":
        frames = set()
        for it in m.items:
            k = (it["video_id"], it["frame_index"])
            if k in frames:
                raise ManifestError(f"video {k[0]!r} lists frame {k[1]} twice")
            frames.add(k)


def _group(items, key, whole=False) -> dict:
    out = defaultdict(list)
    for it in items:
        out[it[key]].append(it if whole else it["id"])
    return {k: (v if whole else sorted(v)) for k, v in sorted(out.items(), key=lambda kv: str(kv[0]))}


def _rng(benchmark: str, seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(STREAMS[benchmark],))))


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _pick_two(rng, seq):
    i, j = rng.choice(len(seq), size=2, replace=False)
    return seq[int(i)], seq[int(j)]


def _place(rng, close: str, far: str) -> tuple[tuple[str, str], int]:
    gt = int(rng.integers(2))
    return ((close, far) if gt == 0 else (far, close)), gt


def build_triplets(manifest: DatasetManifest, seed: int, *, n_triplets: Optional[int] = None,
                   repeats: Optional[int] = None) -> list[TripletRecord]:
    """Triplets for ``manifest`` following its benchmark's closeness rule.

    ``n_triplets`` applies to the sampled benchmarks (sref, instantstyle,
    dreambench_pp); ``repeats`` to the per-group ones (cute, ip_bench).
    """
    b = manifest.benchmark
    builder = _BUILDERS.get(b)
    if builder is None:
        raise ManifestError(f"benchmark {b!r} has no triplet protocol")
    if b in DEFAULT_SAMPLED:
        count = DEFAULT_SAMPLED[b] if n_triplets is None else n_triplets
        if count < 1:
            raise ManifestError("n_triplets must be >= 1")
        raw = builder(manifest, _rng(b, seed), count)
    elif b in DEFAULT_REPEATS:
        reps = DEFAULT_REPEATS[b] if repeats is None else repeats
        if reps < 1:
            raise ManifestError("repeats must be >= 1")
        raw = builder(manifest, _rng(b, seed), reps)
    else:
        raw = builder(manifest, _rng(b, seed))
    out = []
    for i, (tid, ref, cand, gt, meta) in enumerate(raw):
        tid = tid or f"{b}-{i:05d}"
        meta = {**meta, "seed": seed}
        out.append(TripletRecord(tid, ref, cand, gt, b, meta, manifest.paths([ref, *cand])))
    return out


def _style_triplets(m, rng, count):
    styles = _group(m.items, "style_id")
    names = [s for s, ids in styles.items() if len(ids) >= 2]
    if len(styles) < 2 or not names:
        raise ManifestError(f"{m.benchmark}: need two styles and at least one style with two images")
    all_names = list(styles)
    for _ in range(count):
        s = _pick(rng, names)
        ref, pos = _pick_two(rng, styles[s])
        j = int(rng.integers(len(all_names) - 1))
        other = [n for n in all_names if n != s][j]
        neg = _pick(rng, styles[other])
        cand, gt = _place(rng, pos, neg)
        yield None, ref, cand, gt, {"style": s, "negative_style": other}


def _tid_triplets(m, rng):
    groups = _group(m.items, "group_id", whole=True)
    n = 0
    for g, members in groups.items():
        ref = next(it["id"] for it in members if it["role"] == "reference")
        by_type = defaultdict(list)
        for it in members:
            if it["role"] == "distorted":
                by_type[str(it["distortion_type"])].append(it)
        for dtype in sorted(by_type):
            levels = defaultdict(list)
            for it in by_type[dtype]:
                levels[it["distortion_level"]].append(it["id"])
            lv = sorted(levels)
            if len(lv) < 2:
                raise ManifestError(f"tid2013 group {g!r} type {dtype!r}: need two distinct distortion levels")
            a, c = sorted(_pick_two(rng, lv))
            close = _pick(rng, sorted(levels[a]))
            far = _pick(rng, sorted(levels[c]))
            cand, gt = _place(rng, close, far)
            n += 1
            yield None, ref, cand, gt, {"distortion_type": dtype, "levels": [a, c] if gt == 0 else [c, a]}
    if n == 0:
        raise ManifestError("tid2013: no distorted images")


def _graded_pair(rng, members, field_name, group, what):
    values = sorted({it[field_name] for it in members})
    if len(values) < 2:
        raise ManifestError(f"group {group!r}: need two distinct {what} values")
    hi, lo = sorted(_pick_two(rng, values), reverse=True)
    close = _pick(rng, sorted(it["id"] for it in members if it[field_name] == hi))
    far = _pick(rng, sorted(it["id"] for it in members if it[field_name] == lo))
    return close, far, hi, lo


def _ip_triplets(m, rng, repeats):
    for g, members in _group(m.items, "group_id", whole=True).items():
        ref = next(it["id"] for it in members if it["role"] == "original")
        variants = [it for it in members if it["role"] == "variant"]
        for _ in range(repeats):
            close, far, hi, lo = _graded_pair(rng, variants, "consistency_weight", g, "consistency_weight")
            cand, gt = _place(rng, close, far)
            yield None, ref, cand, gt, {"group": g, "weights": [hi, lo] if gt == 0 else [lo, hi]}


def _dreambench_triplets(m, rng, count):
    groups = []
    for g, members in _group(m.items, "group_id", whole=True).items():
        gen = [it for it in members if it["role"] == "generated"]
        if len({it["rating"] for it in gen}) >= 2:
            groups.append((g, next(it["id"] for it in members if it["role"] == "original"), gen))
    if not groups:
        raise ManifestError("dreambench_pp: no reference with two differently rated generations")
    for i in range(count):
        g, ref, gen = groups[i % len(groups)]
        # sampling distinct rating values first makes tied pairs impossible
        close, far, hi, lo = _graded_pair(rng, gen, "rating", g, "rating")
        cand, gt = _place(rng, close, far)
        yield None, ref, cand, gt, {"group": g, "ratings": [hi, lo] if gt == 0 else [lo, hi]}


def _cute_triplets(m, rng, repeats):
    by_light = defaultdict(lambda: defaultdict(list))
    for it in m.items:
        by_light[str(it["lighting_id"])][it["instance_id"]].append(it["id"])
    instances = sorted({it["instance_id"] for it in m.items})
    for inst in instances:
        usable = sorted(
            light for light, per in by_light.items()
            if len(per.get(inst, [])) >= 2 and any(o != inst for o in per)
        )
        if not usable:
            raise ManifestError(f"cute instance {inst!r}: no lighting with two of its images and another instance")
        for _ in range(repeats):
            light = _pick(rng, usable)
            ref, pos = _pick_two(rng, sorted(by_light[light][inst]))
            others = sorted(o for o in by_light[light] if o != inst)
            other = _pick(rng, others)
            neg = _pick(rng, sorted(by_light[light][other]))
            cand, gt = _place(rng, pos, neg)
            yield None, ref, cand, gt, {"instance": inst, "negative_instance": other, "lighting": light}


def _nights_triplets(m, rng):
    for t in m.triplets:
        if "gt_index" in t:
            gt = t["gt_index"]
        else:
            gt = int(t["votes"][1] > t["votes"][0])
        meta = {"votes": t["votes"]} if "votes" in t else {}
        yield t["id"], t["ref"], tuple(t["cand"]), gt, meta


_BUILDERS = {
    "sref": _style_triplets,
    "instantstyle": _style_triplets,
    "tid2013": _tid_triplets,
    "ip_bench": _ip_triplets,
    "dreambench_pp": _dreambench_triplets,
    "cute": _cute_triplets,
    "nights": _nights_triplets,
}


def video_ids(manifest: DatasetManifest) -> list[str]:
    if manifest.benchmark != "tiktok":
        raise ManifestError(f"{manifest.benchmark!r} is not a video benchmark")
    return sorted({it["video_id"] for it in manifest.items})


def load_frame_sequence(manifest: DatasetManifest, video_id: str) -> list[str]:
    """Frame ids of one video in ascending frame order, starting at frame 0."""
    if manifest.benchmark != "tiktok":
        raise ManifestError(f"{manifest.benchmark!r} is not a video benchmark")
    frames = sorted((it["frame_index"], it["id"]) for it in manifest.items if it["video_id"] == video_id)
    if not frames:
        raise ManifestError(f"unknown video id {video_id!r}")
    idx = [f for f, _ in frames]
    if idx != list(range(len(idx))):
        missing = sorted(set(range(idx[-1] + 1)) - set(idx))
        raise ManifestError(f"video {video_id!r}: frame indices not contiguous from 0 (missing {missing})")
    return [i for _, i in frames]
