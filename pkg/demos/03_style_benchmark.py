"""
A small style benchmark, end to end
===================================

The evaluation stack has four parts. A manifest lists images and their
labels. A seeded builder turns it into 2AFC triplets. The harness scores
every triplet. A grid search sweeps attention sites and timesteps.

Here the "styles" are synthetic: each one is a palette plus a stripe
frequency, and every image draws random shapes in that style. The manifest
uses the Sref layout (four images per style), so the same code runs on the
real benchmark once its manifest exists.
"""

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from diffsim import build_triplets, default_grid, emit_report, evaluate_triplets, grid_search, load_manifest
from diffsim.harness import sweep_series

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output") / "style_benchmark"
(OUT / "img").mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(7)

# %%
# Render the images and write the manifest
# ----------------------------------------


def render(palette, freq, seed, size=64):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    stripes = (np.sin(2 * np.pi * freq * (xx + yy) / size) > 0)[..., None]
    img = np.where(stripes, palette[0], palette[1]) + r.normal(0, 30, (size, size, 3))
    img = img.clip(0, 255).astype(np.uint8)
    canvas = Image.fromarray(img)
    draw = ImageDraw.Draw(canvas)
    for _ in range(6):
        x, y = r.integers(0, size - 16, 2)
        w = int(r.integers(10, 30))
        fill = tuple(int(c) for c in r.integers(0, 256, 3))  # shape colours ignore the style
        draw.ellipse([int(x), int(y), int(x) + w, int(y) + w], fill=fill)
    return canvas


items = []
for s in range(12):
    # palettes scatter around one shared colour so styles overlap
    palette = np.clip(np.array([120, 110, 100]) + rng.normal(0, 35, (2, 3)), 0, 255)
    freq = int(rng.integers(2, 9))
    for j in range(4):
        name = f"s{s:02d}_{j}"
        render(palette, freq, seed=100 * s + j).save(OUT / "img" / f"{name}.png")
        items.append({"id": name, "path": f"img/{name}.png", "style_id": f"style{s:02d}"})
(OUT / "manifest.json").write_text(json.dumps({"benchmark": "sref", "schema_version": 1, "items": items}, indent=1))

# %%
# Seeded triplets
# ---------------
# Reference and positive share a style; the negative comes from another
# style. The candidate order is random, so the ground-truth index is
# balanced.

manifest = load_manifest(OUT / "manifest.json")
triplets = build_triplets(manifest, seed=0, n_triplets=60)
t = triplets[0]
print(f"{len(triplets)} triplets; first: ref={t.ref} cand={t.cand} closer={t.cand[t.gt_index]}")

# %%
# One config, then the grid
# -------------------------
# The grid crosses every self-attention site with timesteps 100..900. The
# best entry is chosen on the same triplets, so treat its accuracy as an
# optimistic, exploratory number.

grid = default_grid("toy-self")
single = evaluate_triplets(grid[0], triplets)
print(f"{grid[0].site.label()}: accuracy {single.accuracy:.3f}")

report = grid_search("toy_aas", grid, triplets)
print(f"best: {report.config.site.label()} -> {report.accuracy:.3f}")
for name, pts in sweep_series(report).items():
    print(name, " ".join(f"{t}:{a:.2f}" for t, a in pts))

files = emit_report(report, OUT / "report", ["json", "csv", "markdown", "plot"])
print("wrote", ", ".join(p.name for ps in files.values() for p in ps))
