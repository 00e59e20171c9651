"""Batch command line: ``izsd {generate,run,fit-gpd,qq,eval}``.

Exit codes: 0 ok, 2 usage or config error, 3 data or fit error, 4 internal.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .ever import EvtFitError
from .gpd import ExceedanceSample, GpdFitError, GpdParams, InsufficientTailError, fit_gpd_mle, qq_points, select_threshold
from .metrics import ALL_POINTS, INTERP11, GroundTruth, NoGroundTruthWarning, map_over, per_class_ap, read_detections_csv
from .protocol import ClassSplit, Dataset, ProtocolError, SyntheticSpec, generate_synthetic, reports_to_csv, run_protocol
from .semantic import build_table, load_embeddings_csv, write_embeddings_csv
from .trainer import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _read_distances(path) -> np.ndarray:
    vals = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            if len(row) != 1:
                raise DataError(f"{path}:{lineno}: expected a single column")
            try:
                vals.append(float(row[0]))
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise DataError(f"{path}:{lineno}: not a number: {row[0]!r}") from None
    return np.array(vals, dtype=float)


def _qq_csv(points: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theoretical", "empirical"])
    for t, e in points:
        w.writerow([repr(float(t)), repr(float(e))])
    return buf.getvalue()


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    out = Path(args.out_dir or ".")
    names = emb = None
    num_classes, d = args.classes, args.d
    if args.embeddings:
        names, emb = load_embeddings_csv(_require_file(args.embeddings, "embeddings file"))
        num_classes, d = emb.shape
    try:
        spec = SyntheticSpec(
            num_classes=num_classes,
            d=d,
            r=args.r,
            scenes_per_class=args.scenes_per_class,
            proposals_per_scene=args.proposals_per_scene,
            noise_sigma=args.noise_sigma,
            bg_fraction=args.bg_fraction,
            test_fraction=args.test_fraction,
            seed=args.seed,
        )
        split = ClassSplit.even(num_classes, args.groups)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_synthetic(spec, emb, names)

    atomic_write(out / "dataset.jsonl", data.dataset.dumps())
    buf = io.StringIO()
    write_embeddings_csv(buf, data.class_names, data.class_embeddings)
    atomic_write(out / "embeddings.csv", buf.getvalue())
    atomic_write(out / "split.json", split.dumps() + "\n")

    n_props = sum(len(s.proposals) for s in data.dataset.train + data.dataset.test)
    n_gt = sum(len(s.ground_truth) for s in data.dataset.train + data.dataset.test)
    print(f"classes={num_classes} groups={split.num_steps} d={d} r={spec.r}")
    print(f"train_scenes={len(data.dataset.train)} test_scenes={len(data.dataset.test)} proposals={n_props} objects={n_gt}")
    print(f"wrote {out / 'dataset.jsonl'}, {out / 'embeddings.csv'}, {out / 'split.json'}")
    return EXIT_OK


def _resolve_run_inputs(cfg: RunConfig):
    if cfg.dataset:
        if not cfg.embeddings:
            raise UsageError("config sets dataset but not embeddings")
        path = _require_file(cfg.dataset, "dataset file")
        try:
            dataset = Dataset.loads(path.read_text())
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: {exc}") from None
        names, emb = load_embeddings_csv(_require_file(cfg.embeddings, "embeddings file"))
        try:
            table = build_table(emb, names)
        except ValueError as exc:
            raise DataError(f"{cfg.embeddings}: {exc}") from None
    else:
        emb = names = None
        if cfg.embeddings:
            names, emb = load_embeddings_csv(_require_file(cfg.embeddings, "embeddings file"))
            cfg = replace(cfg, synth_num_classes=emb.shape[0], synth_d=emb.shape[1])
        try:
            data = generate_synthetic(cfg.synthetic_spec(), emb, names)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        dataset, table = data.dataset, data.table
    if cfg.split:
        split = ClassSplit.loads(_require_file(cfg.split, "split file").read_text())
    else:
        try:
            split = ClassSplit.even(table.num_classes, cfg.num_groups)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return dataset, table, split


def cmd_run(args) -> int:
    if not args.config:
        raise UsageError("run needs --config")
    cfg = load_config(_require_file(args.config, "config file"))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out_dir:
        cfg = replace(cfg, out_dir=args.out_dir)
    if cfg.ap_mode not in (INTERP11, ALL_POINTS):
        raise UsageError(f"unknown ap_mode {cfg.ap_mode!r}")
    dataset, table, split = _resolve_run_inputs(cfg)
    out = Path(cfg.out_dir)

    def on_step(step, state, report):
        atomic_write(out / "checkpoints" / f"step_{step}.json", state.model.dumps())
        atomic_write(out / "checkpoints" / f"bank_step_{step}.json", state.bank.dumps() + "\n")
        print(f"step {step}: seen mAP {report.get('seen', 'mAP'):.4f}  unseen mAP {report.get('unseen', 'mAP'):.4f}  all mAP {report.get('all', 'mAP'):.4f}")

    reports, state = run_protocol(split, dataset, table, cfg.hyperparams(), cfg.train_config(), cfg.visual_dim, cfg.ap_mode, on_step=on_step)
    atomic_write(out / "reports.csv", reports_to_csv(reports))
    atomic_write(out / "bank.json", state.bank.dumps() + "\n")
    atomic_write(out / "memory.jsonl", state.memory.dumps())
    atomic_write(out / "config.cfg", cfg.to_text())
    print(f"wrote {out / 'reports.csv'}")
    return EXIT_OK


def _fit_from_file(path, eta: float):
    d = _read_distances(_require_file(path, "distances file"))
    if d.size == 0:
        raise DataError(f"{path}: no distances")
    sample = select_threshold(d, eta)
    params = fit_gpd_mle(sample)
    return sample, params


def cmd_fit_gpd(args) -> int:
    if not 0 < args.eta < 1:
        raise UsageError("--eta must lie in (0, 1)")
    sample, params = _fit_from_file(args.distances, args.eta)
    out = Path(args.out_dir or ".")
    result = {
        "u": sample.threshold_u,
        "sigma": params.sigma,
        "xi": params.xi,
        "n_excess": sample.n_excess,
        "source_count": sample.source_count,
        "eta": args.eta,
    }
    atomic_write(out / "gpd_params.json", json.dumps(result, indent=1) + "\n")
    atomic_write(out / "qq.csv", _qq_csv(qq_points(sample, params)))
    print(f"u={sample.threshold_u!r} sigma={params.sigma!r} xi={params.xi!r} n_excess={sample.n_excess}")
    return EXIT_OK


def cmd_qq(args) -> int:
    obj = json.loads(_require_file(args.params, "params file").read_text())
    try:
        params = GpdParams(float(obj["sigma"]), float(obj["xi"]))
        eta = float(obj.get("eta", args.eta))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.params}: bad params ({exc})") from None
    d = _read_distances(_require_file(args.distances, "distances file"))
    if "u" in obj:
        u = float(obj["u"])
        exc_ = np.sort(d[d > u] - u)
        sample = ExceedanceSample(u, exc_, int(d.size))
    else:
        sample = select_threshold(d, eta)
    out = Path(args.out) if args.out else Path(args.out_dir or ".") / "qq.csv"
    pts = qq_points(sample, params)
    atomic_write(out, _qq_csv(pts))
    r = float(np.corrcoef(pts[:, 0], pts[:, 1])[0, 1]) if len(pts) > 1 else float("nan")
    print(f"n={len(pts)} correlation={r!r}")
    return EXIT_OK


def _read_gt_jsonl(path) -> list[GroundTruth]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "ground_truth" in obj:  # a dataset scene
                    out.extend(GroundTruth(str(obj["scene_id"]), tuple(g["box"]), int(g["label"])) for g in obj["ground_truth"])
                else:
                    out.append(GroundTruth(str(obj["scene_id"]), tuple(obj["box"]), int(obj["class_id"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def cmd_eval(args) -> int:
    try:
        dets = read_detections_csv(_require_file(args.detections, "detections file"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.detections}: {exc}") from None
    gts = _read_gt_jsonl(_require_file(args.ground_truth, "ground-truth file"))
    classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    if not classes:
        raise DataError("no classes in detections or ground truth")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoGroundTruthWarning)
        aps = per_class_ap(dets, gts, classes, iou_threshold=args.iou, mode=args.mode)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    mAP = map_over(classes, aps)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "AP"])
    for c in classes:
        w.writerow([c, repr(aps[c])])
        print(f"class {c}: AP {aps[c]:.6f}")
    w.writerow(["mAP", repr(mAP)])
    out = Path(args.out_dir or ".")
    atomic_write(out / "ap.csv", buf.getvalue())
    print(f"mAP {mAP:.6f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--out-dir", help="output directory")

    p = argparse.ArgumentParser(prog="izsd", description="Incremental zero-shot detection core: synthetic runs, tail fitting and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("generate", parents=[common], help="write a seeded synthetic dataset, embeddings and split")
    g.add_argument("--classes", type=int, default=20)
    g.add_argument("--groups", type=int, default=4)
    g.add_argument("--d", type=int, default=16, help="semantic dimension")
    g.add_argument("--r", type=int, default=32, help="raw feature dimension")
    g.add_argument("--scenes-per-class", type=int, default=60)
    g.add_argument("--proposals-per-scene", type=int, default=6)
    g.add_argument("--noise-sigma", type=float, default=0.08)
    g.add_argument("--bg-fraction", type=float, default=0.5)
    g.add_argument("--test-fraction", type=float, default=0.5)
    g.add_argument("--embeddings", help="class embeddings CSV to use instead of random ones")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", parents=[common], help="run the incremental protocol from a config")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit-gpd", parents=[common], help="fit a tail model to a column of distances")
    f.add_argument("distances", help="single-column CSV of distances")
    f.add_argument("--eta", type=float, default=0.2, help="tail fraction above the threshold")
    f.set_defaults(func=cmd_fit_gpd)

    q = sub.add_parser("qq", parents=[common], help="Q-Q points of distances against fitted params")
    q.add_argument("distances")
    q.add_argument("--params", required=True, help="params JSON written by fit-gpd")
    q.add_argument("--eta", type=float, default=0.2, help="used only when params lack a threshold")
    q.add_argument("--out", help="output CSV (default OUT_DIR/qq.csv)")
    q.set_defaults(func=cmd_qq)

    e = sub.add_parser("eval", parents=[common], help="per-class AP and mAP of a detections file")
    e.add_argument("detections", help="CSV scene_id,x1,y1,x2,y2,class_id,score")
    e.add_argument("ground_truth", help="JSONL of boxes or dataset scenes")
    e.add_argument("--mode", choices=[INTERP11, ALL_POINTS], default=INTERP11)
    e.add_argument("--iou", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "run":
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"izsd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InsufficientTailError, GpdFitError, EvtFitError, TrainingError, ProtocolError, json.JSONDecodeError) as exc:
        print(f"izsd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"izsd: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
