"""Command line: ``maskseg3d {generate,train,infer,eval,export,verify}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import RunConfig, load_config
from .errors import DataError, MaskSegError, UsageError
from .estimator import Mask3DSegmenter
from .evaluation import ground_truth_instances, map_suite
from .predictions import PredictionsFile, read_predictions, write_predictions
from .scenegen import export_ply, generate_scene, load_scene, save_scene
from .verify import SUITES, run_suite

logger = logging.getLogger("maskseg3d")

SCENE_SUFFIX = ".m3ds"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML run configuration (defaults are used for missing keys)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", help="output file or directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="maskseg3d", description="Query-based 3D instance segmentation on synthetic desk-scale scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write synthetic scene files")
    g.add_argument("--count", type=int, default=8)

    t = sub.add_parser("train", parents=[common], help="train and write checkpoints plus a loss log")
    t.add_argument("--scenes", nargs="*", help="scene files or directories (default: data.scene_dir, else generated)")
    t.add_argument("--count", type=int, default=8, help="scenes to generate when none are given")

    i = sub.add_parser("infer", parents=[common], help="predict instances for one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--queries", type=int, help="query count at inference (non-parametric modes only)")
    i.add_argument("--no-dbscan", action="store_true", help="keep each query mask whole")

    e = sub.add_parser("eval", parents=[common], help="score predictions against labelled scenes")
    e.add_argument("--predictions", nargs="+", required=True)
    e.add_argument("--scenes", nargs="+", required=True, help="ground-truth scene files, same order as predictions")

    x = sub.add_parser("export", parents=[common], help="write a PLY colored by predicted instance")
    x.add_argument("--predictions", required=True)
    x.add_argument("--scene", required=True)

    v = sub.add_parser("verify", parents=[common], help="run oracle-backed self checks")
    v.add_argument("suite", choices=SUITES + ("all",))
    return parser


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.verb} needs --out")
    return Path(args.out)


def _load_cloud(path):
    try:
        return load_scene(path)
    except OSError as exc:
        raise DataError(f"cannot read scene {path}: {exc.strerror or exc}") from exc


def _scene_paths(items) -> list:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob(f"*{SCENE_SUFFIX}")))
        else:
            paths.append(p)
    if not paths:
        raise DataError(f"no scene files found in {', '.join(map(str, items))}")
    return paths


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ verbs


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.train.seed
    for k in range(args.count):
        spec = cfg.scene_spec(base + k)
        path = out / f"scene_{k:04d}{SCENE_SUFFIX}"
        save_scene(path, generate_scene(spec, base + k), spec.num_classes)
    (out / "MANIFEST").write_text(f"config_hash {cfg.hash()}\nseed {base}\ncount {args.count}\n")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _training_clouds(args, cfg: RunConfig) -> list:
    sources = args.scenes or ([cfg.data.scene_dir] if cfg.data.scene_dir else None)
    if sources:
        files = [_load_cloud(p) for p in _scene_paths(sources)]
        wrong = [f.num_classes for f in files if f.num_classes != cfg.model.num_classes]
        if wrong:
            raise DataError(f"scenes carry {wrong[0]} classes, model expects {cfg.model.num_classes}")
        return [f.cloud for f in files]
    return [generate_scene(cfg.scene_spec(cfg.train.seed + k), cfg.train.seed + k) for k in range(args.count)]


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    clouds = _training_clouds(args, cfg)
    chash = cfg.hash()
    meta = {"run_config_hash": chash, "run_config": cfg.to_dict()}
    est = Mask3DSegmenter(**cfg.estimator_params())
    log_path = out / "loss.tsv"
    every = cfg.train.checkpoint_every

    with open(log_path, "w") as log:
        log.write(f"# config_hash {chash}\n")
        header_written = False

        def callback(step, model):
            nonlocal header_written
            rec = model.history_[-1]
            if not header_written:
                cols = ["step", "lr", "loss", "grad_norm"] + [f"layer{i}" for i in range(len(rec["layers"]))]
                log.write("\t".join(cols) + "\n")
                header_written = True
            vals = [str(rec["step"]), f"{rec['lr']:.6e}", repr(rec["loss"]), repr(rec["grad_norm"])]
            log.write("\t".join(vals + [repr(v) for v in rec["layers"]]) + "\n")
            if every and (step + 1) % every == 0 and step + 1 < model.steps:
                model.save(out / f"step_{step + 1:06d}.ckpt", meta)

        est.fit(clouds, callback=callback)
    final = out / "final.ckpt"
    est.save(final, meta)
    if est.history_:
        first, last = est.history_[0]["loss"], est.history_[-1]["loss"]
        print(f"trained {len(est.history_)} steps on {len(clouds)} scenes: loss {first:.4f} -> {last:.4f}")
    else:
        print("steps = 0: wrote the initial weights")
    print(f"checkpoint {final} (config {chash})")
    return 0


def cmd_infer(args) -> int:
    _config(args)
    out = _require_out(args)
    est = Mask3DSegmenter.load(args.checkpoint)
    if args.queries is not None and args.queries < 1:
        raise UsageError("--queries must be >= 1")
    meta = est.checkpoint_meta_
    sf = _load_cloud(args.scene)
    instances = est.predict(sf.cloud, num_queries=args.queries, enable_dbscan=False if args.no_dbscan else None)[0]
    chash = meta.get("run_config_hash", meta.get("config_hash"))
    write_predictions(out, PredictionsFile(Path(args.scene).name, len(sf.cloud), instances, chash))
    print(f"{len(instances)} instances -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if len(args.predictions) != len(args.scenes):
        raise UsageError(f"{len(args.predictions)} prediction files but {len(args.scenes)} scenes")
    preds, gts, hashes = [], [], set()
    for pp, sp in zip(args.predictions, args.scenes):
        pf = read_predictions(pp)
        cloud = _load_cloud(sp).cloud
        if not cloud.has_labels:
            raise DataError(f"{sp} has no ground-truth labels")
        if pf.num_points != len(cloud):
            raise DataError(f"{pp} covers {pf.num_points} points, {sp} has {len(cloud)}")
        preds.append(pf.instances)
        gts.append(ground_truth_instances(cloud.instance_id, cloud.semantic_id))
        hashes.add(pf.config_hash)
    report = map_suite(preds, gts, cfg.eval.confidence_filter)
    chash = hashes.pop() if len(hashes) == 1 and None not in hashes else cfg.hash()
    _emit(report.to_text(chash), args.out)
    return 0


def cmd_export(args) -> int:
    _config(args)
    out = _require_out(args)
    pf = read_predictions(args.predictions)
    cloud = _load_cloud(args.scene).cloud
    if pf.num_points != len(cloud):
        raise DataError(f"{args.predictions} covers {pf.num_points} points, {args.scene} has {len(cloud)}")
    export_ply(out, cloud, pf.instances, comments=(f"config_hash {pf.config_hash or '-'}",))
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    names = SUITES if args.suite == "all" else (args.suite,)
    seed = args.seed if args.seed is not None else 0
    lines, ok = [f"config_hash {cfg.hash()}"], True
    for name in names:
        res = run_suite(name, seed=seed)
        ok &= res.passed
        lines.append(res.summary())
        lines.extend(f"  {n}" for n in res.notes[:10])
    _emit("\n".join(lines) + "\n", args.out)
    if args.out:
        print("\n".join(lines[1:]))
    return 0 if ok else 3


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "export": cmd_export, "verify": cmd_verify}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except MaskSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except MaskSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
