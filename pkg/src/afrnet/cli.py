"""``afrnet`` command-line tool.

Exit codes: 0 success (verify: accept), 1 verify reject, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import config as config_mod
from .config import ConfigError, RunConfig
from .evaluation import (EvaluationError, ScoreSet, cmc, export_distributions, fvc_pairs, full_pairs,
                         realign_rate, robustness_sweep, roc, rows_to_csv, saliency_map, tar_at_far)
from .geometry import GeometryError
from .matcher import (AFRNetExtractor, MatchError, decide, enroll, match_features, search,
                      template_from_features)
from .model import ModelError
from .storage import FormatError, load_checkpoint, load_gallery, save_gallery
from .synthdata import IMAGE_SIZE, make_dataset, render_sample
from .train import TrainingDiverged, train

log = logging.getLogger("afrnet")

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
IMAGE_EXTS = {".png", ".pgm"}


class CLIError(Exception):
    def __init__(self, msg: str, code: int = EXIT_USAGE):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def resolve_threads(flag: Optional[int]) -> int:
    if flag is None:
        env = os.environ.get("AFR_THREADS")
        if env is None or env == "":
            return 1
        try:
            flag = int(env)
        except ValueError:
            raise CLIError(f"AFR_THREADS must be an integer, got {env!r}") from None
    if flag < 1:
        raise CLIError("--threads must be >= 1")
    return flag


@contextmanager
def pool(threads: int):
    if threads <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        yield ex


def pmap(executor, fn, items):
    return list(map(fn, items)) if executor is None else list(executor.map(fn, items))


def load_image(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    p = Path(path)
    if not p.is_file():
        raise CLIError(f"image not found: {path}")
    try:
        with Image.open(p) as im:
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
                raise CLIError(f"unsupported image mode {im.mode} in {path}; need 8-bit")
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except UnidentifiedImageError:
        raise CLIError(f"cannot read image {path}") from None


def save_image(img: np.ndarray, path: Path):
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(out: Path, command: str, rc: RunConfig, seeds: dict, **extra) -> Path:
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"))
    body = {"command": command, "config_hash": rc.hash(), "seeds": seeds, "files": files, **extra}
    path = out / "manifest.json"
    path.write_text(_dump(body))
    return path


def make_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CLIError(f"cannot write to {path}: {e.strerror or e}") from None
    return out


def load_dataset(data_dir):
    """Images keyed by ``(identity, impression)`` plus the dataset manifest."""
    d = Path(data_dir)
    mf = d / "manifest.json"
    if not mf.is_file():
        raise CLIError(f"no dataset manifest in {data_dir}")
    manifest = json.loads(mf.read_text())
    try:
        entries = manifest["images"]
    except KeyError:
        raise CLIError(f"{mf} is not a dataset manifest") from None
    images = {(e["identity"], e["impression"]): load_image(d / e["file"]) for e in entries}
    return images, manifest


def load_extractor(path) -> AFRNetExtractor:
    if not Path(path).is_file():
        raise CLIError(f"model not found: {path}")
    return AFRNetExtractor(load_checkpoint(path))


def _params(rc: RunConfig, no_realign: bool = False):
    from dataclasses import replace

    return replace(rc.match, realign=False) if no_realign else rc.match


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, rc: RunConfig):
    if args.identities < 1 or args.impressions < 1:
        raise CLIError("--identities and --impressions must be >= 1")
    out = make_out(args.out)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    samples = make_dataset(args.identities, args.impressions, args.seed)
    ext = "." + args.format

    def one(s):
        name = f"images/{s.identity:04d}_{s.impression:02d}{ext}"
        save_image(render_sample(s, args.seed), out / name)
        return {"file": name, "identity": s.identity, "impression": s.impression,
                "perturbation": s.perturbation.to_dict()}

    with pool(args.threads) as ex:
        entries = pmap(ex, one, samples)
    write_manifest(out, "gen", rc, {"data": args.seed}, identities=args.identities,
                   impressions=args.impressions, image_size=IMAGE_SIZE, images=entries)
    print(f"wrote {len(entries)} images to {img_dir}")
    return EXIT_OK


def cmd_train(args, rc: RunConfig):
    images, dm = load_dataset(args.data)
    n_id, n_imp = dm["identities"], dm["impressions"]
    if n_imp < 2:
        raise CLIError("training needs at least 2 impressions per identity")
    from dataclasses import replace

    kw = {"identities": n_id, "impressions_per_id": n_imp}
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    tc = replace(rc.train, **kw)
    mc = rc.model_config(n_id)
    for key, im in images.items():
        if im.shape != (mc.input_size, mc.input_size):
            raise CLIError(f"image {key} is {im.shape[1]}x{im.shape[0]}, model expects "
                           f"{mc.input_size}x{mc.input_size}")
    out = make_out(args.out)

    def report(e):
        print(f"epoch {e.epoch:3d}  lr {e.lr:.3g}  loss_cnn {e.loss_cnn_head:.4f}  "
              f"loss_attn {e.loss_attn_head:.4f}  val_tar {e.val_tar:.4f}", flush=True)

    _, logs = train(tc, mc, out_dir=out, data_seed=dm["seeds"]["data"], images=images, progress=report)
    best = max(logs, key=lambda e: (e.val_tar, e.val_gap))
    write_manifest(out, "train", rc, {"data": dm["seeds"]["data"], "train": tc.seed},
                   model_fingerprint=mc.fingerprint(), arcface_margin=mc.arcface_margin,
                   arcface_scale=mc.arcface_scale, lr0=tc.lr0, lr_min=tc.lr_min, power=tc.power,
                   weight_decay=tc.weight_decay, batch=tc.batch, epochs=tc.epochs,
                   best_epoch=best.epoch, best_val_tar=best.val_tar)
    print(f"best epoch {best.epoch} val TAR@FAR=1% {best.val_tar:.4f}; model at {out / 'model.afrn'}")
    return EXIT_OK


def cmd_enroll(args, rc: RunConfig):
    ext = load_extractor(args.model)
    jobs = []
    if args.data:
        images, _ = load_dataset(args.data)
        for (i, k), im in sorted(images.items()):
            if k == args.impression:
                jobs.append((im, f"{i:04d}", str(k)))
        if not jobs:
            raise CLIError(f"no images with impression {args.impression}")
    for path in args.images or []:
        jobs.append((load_image(path), Path(path).stem, ""))
    if not jobs:
        raise CLIError("nothing to enroll: give --data or --images")
    gdir = Path(args.gallery)
    existing = load_gallery(gdir) if args.append and (gdir / "manifest.json").is_file() else []
    make_out(gdir)
    with pool(args.threads) as ex:
        new = pmap(ex, lambda j: enroll(j[0], ext, j[1], j[2], with_locals=not args.no_locals), jobs)
    save_gallery(existing + new, gdir, ext.cfg.grid)
    print(f"enrolled {len(new)} templates ({len(existing) + len(new)} in gallery {gdir})")
    return EXIT_OK


def cmd_verify(args, rc: RunConfig):
    ext = load_extractor(args.model)
    threshold = rc.threshold if args.threshold is None else args.threshold
    if not (-1 <= threshold <= 1):
        raise CLIError("--threshold must be in [-1, 1]")
    img1, img2 = load_image(args.img1), load_image(args.img2)
    r = match_features(ext.extract(img1), ext.extract(img2), ext, _params(rc, args.no_realign))
    accept = decide(r.score, threshold)
    if args.json:
        print(_dump({"decision": "accept" if accept else "reject", "threshold": threshold, **r.to_dict()}),
              end="")
    else:
        print(f"score      {r.score:.6f}")
        print(f"threshold  {threshold:.2f}")
        print(f"decision   {'accept' if accept else 'reject'}")
        detail = f" ({r.reason})" if r.reason else ""
        print(f"realign    attempted={str(r.realign_attempted).lower()} "
              f"applied={str(r.realign_applied).lower()}{detail}")
        if r.realign_applied:
            print(f"original   {r.original_score:.6f}  refined {r.refined_score:.6f}")
    return EXIT_OK if accept else EXIT_REJECT


SEARCH_HEADER = ["rank", "index", "label", "score", "original_score", "realign_applied"]


def search_rows(cands):
    return [(r, c.index, c.label, c.score, c.result.original_score, int(c.result.realign_applied))
            for r, c in enumerate(cands, start=1)]


def cmd_search(args, rc: RunConfig):
    if args.k < 1:
        raise CLIError("-k must be >= 1")
    ext = load_extractor(args.model)
    gallery = load_gallery(args.gallery) if (Path(args.gallery) / "manifest.json").is_file() else None
    if not gallery:
        raise CLIError(f"no gallery at {args.gallery}")
    probe = load_image(args.probe)
    with pool(args.threads) as ex:
        cands = search(probe, gallery, ext, rc.match, k=args.k, executor=ex)
    rows = search_rows(cands)
    print(f"{'rank':>4}  {'index':>6}  {'label':<16} {'score':>9}")
    for r, i, label, s, _, _ in rows:
        print(f"{r:>4}  {i:>6}  {label:<16} {s:9.6f}")
    if args.out:
        out = make_out(args.out)
        (out / "search.csv").write_text(rows_to_csv(SEARCH_HEADER, rows))
        write_manifest(out, "search", rc, {}, probe=str(args.probe), k=args.k,
                       model_fingerprint=ext.fingerprint)
    return EXIT_OK


def _features(ext, images, keys, executor):
    feats = pmap(executor, lambda k: ext.extract(images[k]), keys)
    return dict(zip(keys, feats))


def cmd_eval(args, rc: RunConfig):
    ext = load_extractor(args.model)
    images, dm = load_dataset(args.data)
    n_id, n_imp = dm["identities"], dm["impressions"]
    try:
        genuine, imposter = (fvc_pairs if args.protocol == "fvc" else full_pairs)(n_id, n_imp)
    except EvaluationError as e:
        raise CLIError(str(e)) from None
    out = make_out(args.out)
    p = _params(rc, args.no_realign)
    with pool(args.threads) as ex:
        feats = _features(ext, images, sorted(images), ex)
        pairs = [(a, b, 1) for a, b in genuine] + [(a, b, 0) for a, b in imposter]
        results = pmap(ex, lambda t: match_features(feats[t[0]], feats[t[1]], ext, p), pairs)

        gallery = [template_from_features(feats[i, 0], ext.fingerprint, f"{i:04d}") for i in range(n_id)]
        probes = [(i, k) for i in range(n_id) for k in range(1, n_imp)]
        ranked = [[c.label for c in search(feats[q], gallery, ext, p, k=n_id, executor=ex)] for q in probes]
    curve = cmc(ranked, [f"{i:04d}" for i, _ in probes]) if probes else []

    rows = [("genuine" if g else "imposter", a[0], a[1], b[0], b[1], r.original_score,
             "" if r.refined_score is None else r.refined_score, r.score, int(r.realign_applied))
            for (a, b, g), r in zip(pairs, results)]
    (out / "scores.csv").write_text(rows_to_csv(
        ["kind", "id1", "imp1", "id2", "imp2", "original", "refined", "score", "realigned"], rows))
    final = ScoreSet([r.score for r, (_, _, g) in zip(results, pairs) if g],
                     [r.score for r, (_, _, g) in zip(results, pairs) if not g])
    (out / "roc.csv").write_text(rows_to_csv(["far", "tar", "threshold"], roc(final)))
    (out / "cmc.csv").write_text(rows_to_csv(["rank", "accuracy"], enumerate(curve, start=1)))

    orig = ScoreSet([r.original_score for r, (_, _, g) in zip(results, pairs) if g],
                    [r.original_score for r, (_, _, g) in zip(results, pairs) if not g])
    stages = {"original": orig}
    ref = ScoreSet([r.refined_score for r, (_, _, g) in zip(results, pairs) if g and r.realign_applied],
                   [r.refined_score for r, (_, _, g) in zip(results, pairs) if not g and r.realign_applied])
    if len(ref.genuine) + len(ref.imposter):
        stages["refined"] = ref
    stages["fused"] = final
    export_distributions(stages, bins=args.bins, path=out / "distributions.csv")

    import warnings

    metrics = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for far in (1e-2, 1e-3):
            op = tar_at_far(final, far)
            metrics[f"tar_at_far_{far:g}"] = op.tar
            metrics[f"threshold_at_far_{far:g}"] = op.threshold
    metrics["realign_rate"] = realign_rate(results)
    metrics["rank1"] = curve[0] if curve else None
    seeds = {"data": dm["seeds"]["data"]}
    summary = {"config_hash": rc.hash(), "seeds": seeds, "protocol": args.protocol,
               "n_genuine": len(genuine), "n_imposter": len(imposter),
               "model_fingerprint": ext.fingerprint, "metrics": metrics}
    (out / "summary.json").write_text(_dump(summary))
    write_manifest(out, "eval", rc, seeds, protocol=args.protocol, n_genuine=len(genuine),
                   n_imposter=len(imposter))
    print(f"{args.protocol}: {len(genuine)} genuine / {len(imposter)} imposter pairs")
    for k, v in metrics.items():
        print(f"  {k:<22} {v}")
    return EXIT_OK


def cmd_saliency(args, rc: RunConfig):
    ext = load_extractor(args.model)
    img1, img2 = load_image(args.img1), load_image(args.img2)
    out = make_out(args.out)
    with pool(args.threads) as ex:
        m1, m2 = saliency_map(img1, img2, ext, rc.match, patch=ext.cfg.patch, executor=ex)
    base = match_features(ext.extract(img1), ext.extract(img2), ext, rc.match).score
    for name, m in (("saliency_img1.csv", m1), ("saliency_img2.csv", m2)):
        rows = [(i, j, float(m[i, j]), base - float(m[i, j])) for i in range(m.shape[0]) for j in range(m.shape[1])]
        (out / name).write_text(rows_to_csv(["row", "col", "score", "drop"], rows))
    write_manifest(out, "saliency", rc, {}, img1=str(args.img1), img2=str(args.img2), base_score=base)
    print(f"base score {base:.6f}; largest drop img1 {base - m1.min():.6f}, img2 {base - m2.min():.6f}")
    return EXIT_OK


def cmd_robustness(args, rc: RunConfig):
    ext = load_extractor(args.model)
    images, dm = load_dataset(args.data)
    try:
        genuine, imposter = fvc_pairs(dm["identities"], dm["impressions"])
        ratios = [float(v) for v in args.ratios.split(",")]
    except (EvaluationError, ValueError) as e:
        raise CLIError(str(e)) from None
    if any(not (0 <= r < 1) for r in ratios):
        raise CLIError("ratios must be in [0, 1)")
    out = make_out(args.out)
    as_imgs = lambda ps: [(images[a], images[b]) for a, b in ps]
    import warnings

    with pool(args.threads) as ex, warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = robustness_sweep(as_imgs(genuine), as_imgs(imposter), ext, rc.match, ratios=ratios,
                                 repeats=args.repeats, rng_seed=args.seed, mode=args.mode,
                                 far=args.far, executor=ex)
    (out / "robustness.csv").write_text(rows_to_csv(
        ["ratio", "mean_tar", "std_tar"], [(r.ratio, r.mean_tar, r.std_tar) for r in table]))
    (out / "runs.csv").write_text(rows_to_csv(
        ["ratio", "repeat", "tar"], [(r.ratio, k, t) for r in table for k, t in enumerate(r.runs)]))
    seeds = {"data": dm["seeds"]["data"], "perturbation": args.seed}
    write_manifest(out, "robustness", rc, seeds, mode=args.mode, far=args.far, repeats=args.repeats,
                   ratios=ratios, n_genuine=len(genuine), n_imposter=len(imposter))
    for r in table:
        print(f"ratio {r.ratio:.2f}  TAR@FAR={args.far:g}  {r.mean_tar:.4f} +- {r.std_tar:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults when omitted)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for data-parallel sections (env AFR_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="afrnet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic fingerprint dataset")
    p.add_argument("--identities", type=int, default=50)
    p.add_argument("--impressions", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["png", "pgm"], default="png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", parents=[common], help="enroll images into a gallery directory")
    p.add_argument("--model", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--data", help="dataset directory; enrolls one impression per identity")
    p.add_argument("--impression", type=int, default=0)
    p.add_argument("--images", nargs="*", help="image files; subject = file stem")
    p.add_argument("--append", action="store_true")
    p.add_argument("--no-locals", action="store_true", help="store global embeddings only")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", parents=[common], help="1:1 comparison of two images")
    p.add_argument("--model", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--threshold", type=float, default=None, help="decision threshold (default 0.36)")
    p.add_argument("--no-realign", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("search", parents=[common], help="1:N search of a probe against a gallery")
    p.add_argument("--model", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--out", help="directory for search.csv")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="verification and identification metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=["fvc", "full"], default="fvc")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--no-realign", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", parents=[common], help="patch-occlusion saliency for a pair")
    p.add_argument("--model", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("robustness", parents=[common], help="TAR under occlusion or partial crops")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["occlusion", "affine"], default="occlusion")
    p.add_argument("--ratios", default="0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--far", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_robustness)
    return ap


USAGE_ERRORS = (CLIError, ConfigError, FormatError, MatchError, ModelError, GeometryError,
                EvaluationError, OSError, KeyError, json.JSONDecodeError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with code 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    # one intra-op thread keeps float reductions identical however many workers run
    torch.set_num_threads(1)
    try:
        args.threads = resolve_threads(args.threads)
        rc = config_mod.load(args.config)
        return args.func(args, rc)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except USAGE_ERRORS as e:
        code = e.code if isinstance(e, CLIError) else EXIT_USAGE
        print(f"error: {e}", file=sys.stderr)
        return code
    except Exception as e:  # anything else is a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
