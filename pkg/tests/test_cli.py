import json
import subprocess
import sys

import pytest

import manifests as mf
from diffsim import backends
from diffsim.cli import main, parse_size
from diffsim.datasets import TripletRecord, write_triplets
from diffsim.feature_store import CACHE_ENV
from diffsim.pipeline import compute_pair_score

from conftest import toy_config

TOY = ["--backend", "toy-self"]


@pytest.fixture(autouse=True)
def no_weights(monkeypatch, tmp_path):
    monkeypatch.setenv(backends.WEIGHTS_ENV, str(tmp_path / "no-weights"))
    monkeypatch.delenv(CACHE_ENV, raising=False)
    for bid in ("sd15", "sdxl", "clip-vit", "dinov2"):
        backends._INSTANCES.pop(bid, None)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def crafted(image_dir, tmp_path):
    """Three triplets whose identical-image candidate wins; ground truth makes two right."""
    paths = {p.stem: str(p) for p in image_dir.glob("*.png")}
    rows = [("t0", ("img0_copy", "img1"), 0), ("t1", ("img1", "img0_copy"), 1), ("t2", ("img0_copy", "img1"), 1)]
    trips = [TripletRecord(i, "img0", cand, gt, "crafted", paths=paths) for i, cand, gt in rows]
    path = tmp_path / "crafted.jsonl"
    write_triplets(path, trips)
    return path


def test_compare_identical(capsys, image_dir):
    code, out, _ = run(capsys, "compare", image_dir / "img0.png", image_dir / "img0_copy.png", *TOY)
    assert code == 0
    d = json.loads(out)
    assert d["value"] == pytest.approx(1.0, abs=1e-5)


def test_compare_is_thin_adapter(capsys, image_dir):
    a, b = image_dir / "img1.png", image_dir / "img3.png"
    code, out, _ = run(capsys, "compare", a, b, *TOY, "--block", "down_0", "--timestep", "700", "--seed", "4")
    c = toy_config(block="down_0", timestep=700, noise_seed=4)
    assert code == 0 and json.loads(out)["value"] == compute_pair_score(c, a, b).value


def test_default_backend_falls_back_loudly(capsys, image_dir):
    code, out, err = run(capsys, "compare", image_dir / "img0.png", image_dir / "img1.png")
    assert code == 0 and "NOTICE" in err and "toy-self" in err
    assert json.loads(out)["config"]["site"]["backend_id"] == "toy-self"


def test_explicit_missing_backend_fails(capsys, image_dir):
    code, _, err = run(capsys, "compare", image_dir / "img0.png", image_dir / "img1.png", "--backend", "sd15")
    assert code == 1 and "sd15" in err


def test_exit_codes(capsys, image_dir, tmp_path):
    assert run(capsys, "compare", tmp_path / "none.png", image_dir / "img0.png", *TOY)[0] == 2
    assert run(capsys, "compare", image_dir / "img0.png", *TOY)[0] == 2
    assert run(capsys, "compare", "a", "b", "--bogus")[0] == 2
    assert run(capsys, "compare", "a", "b", "--backend", "nope")[0] == 2
    assert run(capsys, "compare", image_dir / "img0.png", image_dir / "img1.png", *TOY, "--block", "mid")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "--help")[0] == 0


def test_eval_crafted(capsys, crafted, tmp_path):
    out_dir = tmp_path / "rep"
    code, out, _ = run(capsys, "eval", "--triplets", crafted, "--out", out_dir, *TOY,
                       "--choices-out", tmp_path / "c.jsonl")
    assert code == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert round(report["accuracy"], 4) == 0.6667
    assert report["n_correct"] == 2
    assert (out_dir / "report.csv").exists() and (out_dir / "report.md").exists()
    assert json.loads(out)["accuracy"] == report["accuracy"]
    assert len((tmp_path / "c.jsonl").read_text().splitlines()) == 3


def test_eval_cache_transparent(capsys, crafted, tmp_path):
    reports = []
    for i, extra in enumerate(([], ["--cache-dir", tmp_path / "cache"], ["--cache-dir", tmp_path / "cache"])):
        run(capsys, "eval", "--triplets", crafted, "--out", tmp_path / f"r{i}", "--format", "json", *TOY, *extra)
        d = json.loads((tmp_path / f"r{i}" / "report.json").read_text())
        reports.append(d["per_triplet"])
    assert reports[0] == reports[1] == reports[2]
    assert any((tmp_path / "cache").rglob("*.bin"))


def test_eval_missing_triplets(capsys, tmp_path):
    assert run(capsys, "eval", "--triplets", tmp_path / "none.jsonl", *TOY)[0] == 2


def test_eval_bad_image_in_triplet(capsys, tmp_path, image_dir):
    t = TripletRecord("x", "a", ("b", "c"), 0, "crafted",
                      paths={"a": str(image_dir / "img0.png"), "b": str(tmp_path / "gone.png"), "c": str(image_dir / "img1.png")})
    write_triplets(tmp_path / "t.jsonl", [t])
    code, _, err = run(capsys, "eval", "--triplets", tmp_path / "t.jsonl", "--out", tmp_path / "o", *TOY)
    assert code == 2 and "x" in err


def test_gridsearch(capsys, crafted, tmp_path):
    code, out, _ = run(capsys, "gridsearch", "--triplets", crafted, "--out", tmp_path / "g", *TOY,
                       "--timesteps", "300,900")
    assert code == 0
    d = json.loads(out)
    assert d["grid_size"] == 4
    assert (tmp_path / "g" / "sweep_timestep.png").exists()
    rep = json.loads((tmp_path / "g" / "report.json").read_text())
    assert len(rep["grid_table"]) == 4
    code, out, _ = run(capsys, "gridsearch", "--triplets", crafted, "--out", tmp_path / "g2", *TOY,
                       "--blocks", "up_0", "--timesteps", "500", "--format", "json")
    assert json.loads(out)["grid_size"] == 1
    assert run(capsys, "gridsearch", "--triplets", crafted, *TOY, "--timesteps", "a,b")[0] == 2


def test_triplets_build_reproducible(capsys, tmp_path):
    man = mf.styles(tmp_path / "m", "instantstyle", full=False)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "triplets", "build", "--manifest", man, "--seed", 3, "--n", 25, "--out", a)[0] == 0
    assert run(capsys, "triplets", "build", "--manifest", man, "--seed", 3, "--n", 25, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 25
    rec = json.loads(a.read_text().splitlines()[0])
    assert not any(v.startswith("/") for v in rec["paths"].values())
    code, out, _ = run(capsys, "triplets", "build", "--manifest", man, "--seed", 4, "--n", 25)
    assert code == 0 and out.encode() != a.read_bytes()


def test_triplets_build_bad_manifest(capsys, tmp_path):
    man = mf.styles(tmp_path, "sref", full=False)
    d = json.loads(man.read_text())
    d["items"].pop()
    man.write_text(json.dumps(d))
    code, _, err = run(capsys, "triplets", "build", "--manifest", man)
    assert code == 2 and "style001" in err


def _corpus_manifest(image_dir):
    items = [{"id": p.stem, "path": p.name} for p in sorted(image_dir.glob("*.png"))]
    man = image_dir / "corpus.json"
    # any benchmark schema with only id/path works as a generic corpus
    man.write_text(json.dumps({"benchmark": "nights", "items": items,
                               "triplets": [{"id": "x", "ref": "img0", "cand": ["img1", "img2"], "gt_index": 0}]}))
    return man


def test_retrieve(capsys, image_dir, tmp_path):
    man = _corpus_manifest(image_dir)
    sheet = tmp_path / "sheet.png"
    code, out, _ = run(capsys, "retrieve", "--query", "img0", "--corpus-manifest", man, *TOY,
                       "--cache-dir", tmp_path / "c", "--contact-sheet", sheet)
    assert code == 0
    recs = [json.loads(line) for line in out.splitlines()]
    assert len(recs) == 4 and recs[0]["id"] == "img0_copy" and recs[0]["rank"] == 1
    assert sheet.stat().st_size > 0
    code, out, err = run(capsys, "retrieve", "--query", image_dir / "img2.png", "--corpus-manifest", man, *TOY,
                         "--k", 99, "--cache-dir", tmp_path / "c")
    recs = [json.loads(line) for line in out.splitlines()]
    assert code == 0 and len(recs) == 6 and recs[0]["id"] == "img2" and recs[0]["k_exceeds_corpus"]
    assert "exceeds" in err


def test_video_var(capsys, tmp_path, image_dir):
    from PIL import Image

    man = mf.tiktok(tmp_path / "v", videos=(("v1", 3), ("v2", 1)))
    src = Image.open(image_dir / "img0.png")
    for p in (tmp_path / "v" / "img").glob("*.png"):
        src.save(p)
    code, out, _ = run(capsys, "video-var", "--manifest", man, *TOY)
    rows = {json.loads(line)["video"]: json.loads(line) for line in out.splitlines()}
    assert code == 0 and rows["v1"]["n_frames"] == 3
    assert rows["v1"]["variance"] == pytest.approx(0.0, abs=1e-10) and rows["v2"]["variance"] == 0.0
    code, out, _ = run(capsys, "video-var", "--frames", image_dir / "img0.png", image_dir / "img1.png",
                       image_dir / "img2.png", *TOY)
    assert code == 0 and json.loads(out)["variance"] > 0
    assert run(capsys, "video-var", *TOY)[0] == 2
    assert run(capsys, "video-var", "--manifest", man, "--video", "v9", *TOY)[0] == 2


def test_cache_gc(capsys, image_dir, tmp_path):
    cache = tmp_path / "c"
    run(capsys, "compare", image_dir / "img0.png", image_dir / "img1.png", *TOY, "--cache-dir", cache)
    code, out, _ = run(capsys, "cache", "gc", "--max-bytes", "0", "--cache-dir", cache)
    assert code == 0 and json.loads(out) == {"evicted": 2, "size_bytes": 0, "max_bytes": 0}
    assert run(capsys, "cache", "gc", "--max-bytes", "1G")[0] == 2
    assert run(capsys, "cache", "gc", "--max-bytes", "lots", "--cache-dir", cache)[0] == 2
    assert parse_size("500M") == 500 << 20 and parse_size("2g") == 2 << 30 and parse_size("10") == 10


def test_weights_check(capsys):
    code, out, _ = run(capsys, "weights", "check")
    status = {json.loads(line)["backend"]: json.loads(line) for line in out.splitlines()}
    assert code == 0
    assert status["toy-self"]["available"] and not status["sd15"]["available"]
    assert run(capsys, "weights", "check", "--backend", "sd15")[0] == 1
    assert run(capsys, "weights", "check", "--backend", "toy-cross")[0] == 0


def test_ensemble(capsys, crafted, tmp_path):
    files = []
    for i, block in enumerate(("up_0", "down_0", "up_0")):
        f = tmp_path / f"c{i}.jsonl"
        run(capsys, "eval", "--triplets", crafted, "--out", tmp_path / f"e{i}", *TOY, "--block", block,
            "--choices-out", f)
        files.append(f)
    code, out, _ = run(capsys, "ensemble", "--triplets", crafted, "--choices", *files, "--out", tmp_path / "ens")
    assert code == 0 and json.loads(out)["accuracy"] == pytest.approx(2 / 3)
    assert run(capsys, "ensemble", "--triplets", crafted, "--choices", *files[:2])[0] == 2


def test_config_file_round_trip(capsys, crafted, tmp_path, image_dir):
    run(capsys, "eval", "--triplets", crafted, "--out", tmp_path / "r", *TOY, "--timestep", "800")
    a, b = image_dir / "img1.png", image_dir / "img2.png"
    code, out, _ = run(capsys, "compare", a, b, "--config", tmp_path / "r" / "report.json")
    assert code == 0
    assert json.loads(out)["value"] == compute_pair_score(toy_config(timestep=800), a, b).value
    (tmp_path / "bad.json").write_text("{}")
    assert run(capsys, "compare", a, b, "--config", tmp_path / "bad.json")[0] == 2


def test_console_entry_point(image_dir, tmp_path):
    env = {"PATH": "/usr/bin:/bin", backends.WEIGHTS_ENV: str(tmp_path)}
    p = subprocess.run([sys.executable, "-m", "diffsim", "compare", str(image_dir / "img0.png"),
                        str(image_dir / "img0_copy.png"), "--backend", "toy-self"],
                       capture_output=True, text=True, env=env, timeout=120)
    assert p.returncode == 0, p.stderr
    assert json.loads(p.stdout)["value"] == pytest.approx(1.0, abs=1e-5)
    p = subprocess.run([sys.executable, "-m", "diffsim", "compare", "--nope"], capture_output=True, env=env,
                       timeout=120)
    assert p.returncode == 2
