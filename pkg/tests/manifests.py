"""Synthetic benchmark manifests with empty placeholder image files.

``full=True`` reproduces the published benchmark shapes (508 Sref styles x 4,
25 TID2013 references x 24 types x 5 levels, ...); ``full=False`` gives a
small manifest with the same structure.
"""

import json
from pathlib import Path


def _write(root: Path, benchmark: str, items, triplets=None, touch=True) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    if touch:
        (root / "img").mkdir(exist_ok=True)
        for it in items:
            (root / it["path"]).touch()
    data = {"benchmark": benchmark, "schema_version": 1, "items": items}
    if triplets is not None:
        data["triplets"] = triplets
    path = root / f"{benchmark}.json"
    path.write_text(json.dumps(data))
    return path


def _item(i, **fields):
    return {"id": i, "path": f"img/{i}.png", **fields}


def nights(root, full=True):
    n = 2120 if full else 6
    items, triplets = [], []
    for t in range(n):
        ids = [f"n{t}_ref", f"n{t}_0", f"n{t}_1"]
        items += [_item(i) for i in ids]
        rec = {"id": f"nights-{t:04d}", "ref": ids[0], "cand": ids[1:]}
        if t % 2:
            rec["votes"] = [t % 5, 5 - t % 5]  # odd total, never tied
        else:
            rec["gt_index"] = (t // 2) % 2
        triplets.append(rec)
    return _write(Path(root), "nights", items, triplets)


def dreambench(root, full=True):
    groups = 150 if full else 3
    items = []
    for g in range(groups):
        items.append(_item(f"d{g}_orig", group_id=f"g{g:03d}", role="original"))
        # ratings with deliberate ties
        for j, r in enumerate([1, 2, 2, 3, 4, 4, 5][: 7 if full else 4]):
            items.append(_item(f"d{g}_gen{j}", group_id=f"g{g:03d}", role="generated", rating=r))
    return _write(Path(root), "dreambench_pp", items)


def cute(root, full=True):
    instances = 180 if full else 4
    lights = ("l0", "l1") if full else ("l0", "l1", "l2")
    items = []
    for k in range(instances):
        for light in lights:
            for j in range(3):
                items.append(_item(f"c{k}_{light}_{j}", instance_id=f"obj{k:03d}", lighting_id=light,
                                   category=f"cat{k % 50}"))
    return _write(Path(root), "cute", items)


def ip_bench(root, full=True):
    classes = 299 if full else 3
    items = []
    for c in range(classes):
        items.append(_item(f"ip{c}_orig", group_id=f"c{c:03d}", role="original"))
        for j, w in enumerate((0.2, 0.3, 0.4, 0.5, 0.6, 0.7)):
            items.append(_item(f"ip{c}_w{j}", group_id=f"c{c:03d}", role="variant", consistency_weight=w))
    return _write(Path(root), "ip_bench", items)


def tid2013(root, full=True):
    refs, types = (25, 24) if full else (2, 3)
    items = []
    for r in range(refs):
        items.append(_item(f"i{r:02d}", group_id=f"i{r:02d}", role="reference"))
        for t in range(1, types + 1):
            for lv in range(1, 6):
                items.append(_item(f"i{r:02d}_{t:02d}_{lv}", group_id=f"i{r:02d}", role="distorted",
                                   distortion_type=t, distortion_level=lv))
    return _write(Path(root), "tid2013", items)


def styles(root, benchmark, full=True):
    n_styles, per = {"sref": (508, 4), "instantstyle": (30, 5)}[benchmark]
    if not full:
        n_styles = 2 if benchmark == "sref" else 3
    items = [_item(f"{benchmark[0]}{s}_{j}", style_id=f"style{s:03d}") for s in range(n_styles) for j in range(per)]
    return _write(Path(root), benchmark, items)


def tiktok(root, videos=(("v1", 10), ("v2", 1)), skip=None):
    items = []
    for vid, n in videos:
        for f in range(n):
            if skip and (vid, f) == skip:
                continue
            items.append(_item(f"{vid}_f{f}", video_id=vid, frame_index=f))
    return _write(Path(root), "tiktok", items)


def all_manifests(root, full=True) -> dict:
    root = Path(root)
    return {
        "nights": nights(root / "nights", full),
        "dreambench_pp": dreambench(root / "dreambench", full),
        "cute": cute(root / "cute", full),
        "ip_bench": ip_bench(root / "ip", full),
        "tid2013": tid2013(root / "tid", full),
        "sref": styles(root / "sref", "sref", full),
        "instantstyle": styles(root / "instantstyle", "instantstyle", full),
    }
