import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from afrnet import cli
from afrnet.config import ConfigError, RunConfig, parse
from afrnet.model import AFRNet, ModelConfig
from afrnet.storage import save_checkpoint


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--identities", "4", "--impressions", "3", "--seed", "5",
                     "--out", str(root / "ds")]) == 0
    torch.manual_seed(0)
    save_checkpoint(AFRNet(ModelConfig.tiny(4)), root / "rand.afrn")
    return root


def img(work, i, k):
    return str(work / "ds" / "images" / f"{i:04d}_{k:02d}.png")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# config


def test_config_defaults_round_trip():
    rc = RunConfig()
    assert parse(rc.to_text()) == rc
    assert rc.match.s_l == 0.3 and rc.match.s_h == 0.6 and rc.threshold == 0.36
    assert rc.match.limits.max_rotation == 60.0 and rc.train.lr0 == 1e-4
    assert rc.arcface_margin == 0.5


def test_config_overrides_and_errors():
    rc = parse("[match]\nw1 = 0.4\nrealign = no\n[limits]\nmax_rotation = 30\n[ransac]\niters = 50\n")
    assert rc.match.w2 == pytest.approx(0.6) and not rc.match.realign
    assert rc.match.limits.max_rotation == 30 and rc.match.ransac.iters == 50
    assert rc.hash() != RunConfig().hash()
    for bad in ("[match]\nbogus = 1\n", "[nope]\n", "[match]\nw1 = abc\n", "[match]\ns_l = 0.9\n",
                "[model]\npreset = huge\n", "[train]\nlr_min = 1\n", "[match]\nthreshold = 2\n"):
        with pytest.raises(ConfigError):
            parse(bad)


# ---------------------------------------------------------------------------
# gen


def test_gen_counts_and_manifest(work):
    m = json.loads((work / "ds" / "manifest.json").read_text())
    assert len(m["images"]) == 12 and len(m["files"]) == 12
    assert m["seeds"] == {"data": 5} and "config_hash" in m
    e = m["images"][4]
    assert (e["identity"], e["impression"]) == (1, 1)
    assert set(e["perturbation"]) == {"affine", "occlusion_ratio", "noise_std", "contrast", "seed"}
    with Image.open(work / "ds" / e["file"]) as im:
        assert im.mode == "L" and im.size == (224, 224)


def test_gen_reproducible_any_threads(work, tmp_path):
    assert cli.main(["gen", "--identities", "4", "--impressions", "3", "--seed", "5",
                     "--threads", "3", "--out", str(tmp_path / "b")]) == 0
    a, b = work / "ds", tmp_path / "b"
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for f in json.loads((a / "manifest.json").read_text())["files"]:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_gen_50_by_8_count(tmp_path):
    assert cli.main(["gen", "--identities", "50", "--impressions", "8", "--format", "pgm",
                     "--threads", "2", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert len(m["images"]) == 400 and len(list((tmp_path / "images").glob("*.pgm"))) == 400


def test_gen_errors(tmp_path, capsys):
    assert cli.main(["gen", "--identities", "0", "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "file").write_text("")
    assert cli.main(["gen", "--identities", "1", "--out", str(tmp_path / "file" / "sub")]) == 2
    assert "cannot write" in capsys.readouterr().err
    assert cli.main(["gen"]) == 2  # missing --out
    assert cli.main(["frobnicate"]) == 2


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("AFR_THREADS", raising=False)
    assert cli.resolve_threads(None) == 1
    monkeypatch.setenv("AFR_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("AFR_THREADS", "many")
    with pytest.raises(cli.CLIError):
        cli.resolve_threads(None)
    with pytest.raises(cli.CLIError):
        cli.resolve_threads(0)


# ---------------------------------------------------------------------------
# verify


def test_verify_same_file(work, capsys):
    code = cli.main(["verify", "--model", str(work / "rand.afrn"), "--img1", img(work, 0, 0),
                     "--img2", img(work, 0, 0)])
    out = capsys.readouterr().out
    assert code == 0
    assert "score      1.000000" in out and "threshold  0.36" in out and "accept" in out


def test_verify_json_no_realign(work, capsys, tmp_path):
    cfg = tmp_path / "wide.ini"
    cfg.write_text("[match]\ns_l = -1\ns_h = 1\n")
    args = ["verify", "--model", str(work / "rand.afrn"), "--img1", img(work, 0, 0),
            "--img2", img(work, 1, 1), "--json", "--config", str(cfg)]
    cli.main(args)
    on = json.loads(capsys.readouterr().out)
    assert on["realign_attempted"] is True
    cli.main(args + ["--no-realign"])
    off = json.loads(capsys.readouterr().out)
    assert off["realign_attempted"] is False and off["score"] == off["original_score"]
    assert off["threshold"] == 0.36


def test_verify_reject_and_errors(work, tmp_path):
    m = str(work / "rand.afrn")
    # untrained embeddings are nearly identical, so only a threshold of 1 rejects
    assert cli.main(["verify", "--model", m, "--img1", img(work, 0, 0), "--img2", img(work, 2, 1),
                     "--threshold", "1.0"]) == 1
    assert cli.main(["verify", "--model", m, "--img1", "missing.png", "--img2", img(work, 0, 0)]) == 2
    assert cli.main(["verify", "--model", str(tmp_path / "none.afrn"), "--img1", img(work, 0, 0),
                     "--img2", img(work, 0, 0)]) == 2
    (tmp_path / "junk.afrn").write_bytes(b"junk")
    assert cli.main(["verify", "--model", str(tmp_path / "junk.afrn"), "--img1", img(work, 0, 0),
                     "--img2", img(work, 0, 0)]) == 2
    assert cli.main(["verify", "--model", m, "--img1", img(work, 0, 0), "--img2", img(work, 0, 0),
                     "--threshold", "3"]) == 2


def test_verify_color_input(work, tmp_path, capsys):
    g = np.asarray(Image.open(img(work, 0, 0)))
    Image.fromarray(np.stack([g] * 3, axis=-1)).save(tmp_path / "c.png")
    assert cli.main(["verify", "--model", str(work / "rand.afrn"), "--img1", str(tmp_path / "c.png"),
                     "--img2", img(work, 0, 0)]) == 0
    assert "1.000000" in capsys.readouterr().out


def test_entry_point_exit_codes(work):
    base = [sys.executable, "-m", "afrnet.cli", "verify", "--model", str(work / "rand.afrn"),
            "--img1", img(work, 0, 0), "--img2", img(work, 0, 0)]
    assert subprocess.run(base, capture_output=True).returncode == 0
    assert subprocess.run(base + ["--threshold", "1.0"], capture_output=True).returncode in (0, 1)
    assert subprocess.run(base[:4], capture_output=True).returncode == 2


# ---------------------------------------------------------------------------
# enroll / search


def test_enroll_and_search(work, tmp_path, capsys):
    m = str(work / "rand.afrn")
    gal = tmp_path / "gal"
    assert cli.main(["enroll", "--model", m, "--gallery", str(gal), "--data", str(work / "ds")]) == 0
    manifest = json.loads((gal / "manifest.json").read_text())
    assert len(manifest["templates"]) == 4
    assert cli.main(["search", "--model", m, "--gallery", str(gal), "--probe", img(work, 2, 0),
                     "-k", "10", "--out", str(tmp_path / "s1")]) == 0
    rows = read_csv(tmp_path / "s1" / "search.csv")
    assert len(rows) == 4  # k larger than the gallery
    assert rows[0]["label"] == "0002/0" and abs(float(rows[0]["score"]) - 1.0) < 1e-6
    assert cli.main(["search", "--model", m, "--gallery", str(gal), "--probe", img(work, 2, 0),
                     "-k", "2", "--threads", "3", "--out", str(tmp_path / "s2")]) == 0
    rows2 = read_csv(tmp_path / "s2" / "search.csv")
    assert rows2 == rows[:2]
    assert cli.main(["search", "--model", m, "--gallery", str(tmp_path / "none"), "--probe",
                     img(work, 2, 0)]) == 2
    assert cli.main(["enroll", "--model", m, "--gallery", str(gal), "--images", img(work, 3, 2),
                     "--append"]) == 0
    assert len(json.loads((gal / "manifest.json").read_text())["templates"]) == 5


def test_search_rejects_other_model(work, tmp_path):
    torch.manual_seed(1)
    other = AFRNet(ModelConfig.tiny(4, arcface_scale=32.0))
    save_checkpoint(other, tmp_path / "other.afrn")
    gal = tmp_path / "g"
    cli.main(["enroll", "--model", str(tmp_path / "other.afrn"), "--gallery", str(gal),
              "--data", str(work / "ds")])
    assert cli.main(["search", "--model", str(work / "rand.afrn"), "--gallery", str(gal),
                     "--probe", img(work, 0, 0)]) == 2


# ---------------------------------------------------------------------------
# eval / saliency / robustness


def test_eval_outputs_and_determinism(work, tmp_path):
    m = str(work / "rand.afrn")
    base = ["eval", "--model", m, "--data", str(work / "ds")]
    assert cli.main(base + ["--out", str(tmp_path / "e1")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "e2"), "--threads", "4"]) == 0
    man = json.loads((tmp_path / "e1" / "manifest.json").read_text())
    assert (man["n_genuine"], man["n_imposter"]) == (12, 6)
    assert set(man["files"]) == {"scores.csv", "roc.csv", "cmc.csv", "distributions.csv", "summary.json"}
    for f in man["files"] + ["manifest.json"]:
        assert (tmp_path / "e1" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes(), f
    summary = json.loads((tmp_path / "e1" / "summary.json").read_text())
    assert summary["seeds"] == {"data": 5} and summary["config_hash"] == RunConfig().hash()
    cmc_rows = read_csv(tmp_path / "e1" / "cmc.csv")
    acc = [float(r["accuracy"]) for r in cmc_rows]
    assert acc == sorted(acc) and acc[-1] == 1.0
    assert cli.main(base + ["--protocol", "full", "--out", str(tmp_path / "e3")]) == 0
    man3 = json.loads((tmp_path / "e3" / "manifest.json").read_text())
    assert (man3["n_genuine"], man3["n_imposter"]) == (12, 54)


def test_saliency(work, tmp_path):
    out = tmp_path / "sal"
    assert cli.main(["saliency", "--model", str(work / "rand.afrn"), "--img1", img(work, 0, 0),
                     "--img2", img(work, 0, 1), "--threads", "2", "--out", str(out)]) == 0
    rows = read_csv(out / "saliency_img1.csv")
    assert len(rows) == 196
    assert json.loads((out / "manifest.json").read_text())["files"] == ["saliency_img1.csv",
                                                                        "saliency_img2.csv"]


def test_robustness_table(work, tmp_path):
    args = ["robustness", "--model", str(work / "rand.afrn"), "--data", str(work / "ds"),
            "--mode", "occlusion", "--ratios", "0.1,0.2,0.3,0.4,0.5", "--repeats", "5"]
    assert cli.main(args + ["--out", str(tmp_path / "r1")]) == 0
    runs = read_csv(tmp_path / "r1" / "runs.csv")
    assert len(runs) == 25
    assert len(read_csv(tmp_path / "r1" / "robustness.csv")) == 5
    assert cli.main(args + ["--out", str(tmp_path / "r2"), "--threads", "3"]) == 0
    for f in ("runs.csv", "robustness.csv", "manifest.json"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    assert cli.main(args[:-4] + ["--ratios", "0.1,x", "--out", str(tmp_path / "r3")]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_small(work, tmp_path, capsys):
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    args = ["train", "--data", str(work / "ds"), "--epochs", "2"]
    assert cli.main(args + ["--out", str(out1)]) == 0
    assert cli.main(args + ["--out", str(out2), "--threads", "2"]) == 0
    for f in ("model.afrn", "metrics.csv", "manifest.json"):
        assert (out1 / f).read_bytes() == (out2 / f).read_bytes(), f
    man = json.loads((out1 / "manifest.json").read_text())
    assert man["arcface_margin"] == 0.5 and man["lr0"] == 1e-4 and man["power"] == 3.0
    assert man["seeds"] == {"data": 5, "train": 0}
    header = (out1 / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,step,lr,loss_cnn_head,loss_attn_head,val_tar"


def test_train_resumes_after_interruption(work, tmp_path, monkeypatch):
    ref = tmp_path / "ref"
    args = ["train", "--data", str(work / "ds"), "--epochs", "3"]
    assert cli.main(args + ["--out", str(ref)]) == 0

    real_train = cli.train

    def interrupted(*a, progress=None, **kw):
        def stop(e):
            progress(e)
            if e.epoch == 0:
                raise KeyboardInterrupt
        return real_train(*a, progress=stop, **kw)

    out = tmp_path / "int"
    monkeypatch.setattr(cli, "train", interrupted)
    with pytest.raises(KeyboardInterrupt):
        cli.main(args + ["--out", str(out)])
    monkeypatch.setattr(cli, "train", real_train)
    assert len((out / "metrics.csv").read_text().splitlines()) == 2  # header + epoch 0
    assert cli.main(args + ["--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (ref / "metrics.csv").read_bytes()
    assert (out / "model.afrn").read_bytes() == (ref / "model.afrn").read_bytes()


def test_train_nan_exit_3(work, tmp_path):
    cfg = tmp_path / "boom.ini"
    cfg.write_text("[train]\nlr0 = 1e30\nlr_min = 1e29\n")
    assert cli.main(["train", "--data", str(work / "ds"), "--epochs", "3", "--config", str(cfg),
                     "--out", str(tmp_path / "t")]) == 3


def test_train_image_size_mismatch(work, tmp_path):
    d = tmp_path / "small"
    (d / "images").mkdir(parents=True)
    m = json.loads((work / "ds" / "manifest.json").read_text())
    for e in m["images"]:
        Image.open(work / "ds" / e["file"]).resize((112, 112)).save(d / e["file"])
    (d / "manifest.json").write_text(json.dumps(m))
    assert cli.main(["train", "--data", str(d), "--out", str(tmp_path / "t")]) == 2
