"""Command-line entry point: ``ipdrecon {synth,train,reconstruct,eval,stability,verify}``.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
Every artifact is written to a temporary file and renamed into place, so a
failed command leaves nothing behind.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    """Bad arguments or unusable input files (exit code 2)."""


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _count_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view counts, got {text!r}") from None
    if len(vals) < 2 or min(vals) < 1 or len(set(vals)) != len(vals):
        raise argparse.ArgumentTypeError("need at least two distinct positive view counts")
    return vals


def _refuse_existing(path: Path, force: bool):
    if path.exists() and not force:
        raise InputError(f"{path} already exists (pass --force to overwrite)")


# subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    import tomli

    from .scenes import SceneSpec, build_bundle, write_bundle

    values = {}
    if args.spec:
        values.update(tomli.loads(Path(args.spec).read_text()))
    for key, val in (("seed", args.seed), ("n_furniture", args.furniture), ("n_views", args.views),
                     ("trajectory", args.trajectory), ("voxel_size_fine", args.voxel_size)):
        if val is not None:
            values[key] = val
    if args.room is not None:
        values["room"] = tuple(args.room)
    unknown = sorted(set(values) - set(SceneSpec.__dataclass_fields__))
    if unknown:
        raise InputError(f"unknown scene spec keys: {', '.join(unknown)}")
    try:
        spec = SceneSpec(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scene spec: {exc}") from exc
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(f"{out} exists and is not empty (pass --force to overwrite)")
    bundle = build_bundle(spec)
    write_bundle(bundle, out, force=args.force)
    counts = ", ".join(f"{k} {int(v.values.size)}" for k, v in bundle.gt_tsdf.items())
    print(f"wrote {out}: {len(bundle.cameras)} views, voxels {counts}, "
          f"gt mesh {len(bundle.gt_mesh.faces)} faces")
    return EXIT_OK


def _config(args, **extra):
    from .pipeline import load_config

    overrides = {"seed": getattr(args, "seed", None), "steps": getattr(args, "steps", None),
                 "n_views": getattr(args, "max_views", None)}
    if getattr(args, "ablation", False):
        overrides["ablation"] = True
    overrides.update(extra)
    try:
        return load_config(args.config, overrides)
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"bad configuration: {exc}") from exc


def _bundle(path, with_depth=True):
    from .scenes import load_bundle

    p = Path(path)
    if not p.is_dir():
        raise InputError(f"scene directory {p} does not exist")
    try:
        return load_bundle(p, with_depth=with_depth)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read scene bundle {p}: {exc}") from exc


def cmd_train(args) -> int:
    from .pipeline import TrainScene, TrainingError, save_checkpoint, train_toy, write_loss_csv

    cfg = _config(args)
    weights = Path(args.out_weights)
    loss_path = Path(args.loss_csv) if args.loss_csv else weights.with_name("loss.csv")
    _refuse_existing(weights, args.force)
    _refuse_existing(loss_path, args.force)
    scenes = [TrainScene.from_bundle(_bundle(p)) for p in args.scenes]

    def log(step, rep):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step}: total {rep.total:.6f} (fusion {rep.fusion_sum:.4f}, "
                  f"occ {rep.occ_sum:.4f}, tsdf {rep.l_tsdf:.4f})", flush=True)

    try:
        model, history = train_toy(scenes, cfg, log=log)
    except TrainingError as exc:
        last = exc.step - 1
        print(f"error: training diverged at step {exc.step}; last finite step {last}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(weights, model)
    write_loss_csv(loss_path, history)
    print(f"wrote {weights} and {loss_path}; loss {history[0].total:.6f} -> {history[-1].total:.6f}")
    return EXIT_OK


def _model(args, cfg):
    from .pipeline import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(args.weights, cfg if args.config else None)
    except FileNotFoundError as exc:
        raise InputError(f"checkpoint {args.weights} not found") from exc
    except CheckpointError as exc:
        raise InputError(f"checkpoint mismatch: {exc}") from exc


def _reconstruct(model, cfg, bundle, k):
    from .pipeline import reconstruct_volume
    from .scenes import heldout_views

    images, cams, depths = heldout_views(bundle, k)
    rec = reconstruct_volume(images, cams, model, bundle.grids["coarse"], cfg)
    return rec, cams, depths


def cmd_reconstruct(args) -> int:
    import dataclasses

    from .geometry import write_ply

    out = Path(args.out)
    _refuse_existing(out, args.force)
    cfg = _config(args)
    model = _model(args, cfg)
    cfg = dataclasses.replace(cfg, ablation=bool(model.arch[4]))
    bundle = _bundle(args.scene, with_depth=False)
    rec, _, _ = _reconstruct(model, cfg, bundle, args.views)
    _atomic(out, lambda p: write_ply(p, rec.mesh))
    print(f"wrote {out}: {len(rec.mesh.vertices)} vertices, {len(rec.mesh.faces)} faces, "
          f"voxels per level {rec.counts}")
    return EXIT_OK


def _atomic(path: Path, writer):
    """Run ``writer`` on a temp path next to ``path``, then rename it into place."""
    import tempfile

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _mesh_scores(mesh, bundle):
    from .metrics import mesh_metrics, sample_points

    if not len(mesh.faces):
        raise ArithmeticError("reconstruction is empty; mesh metrics are undefined")
    return mesh_metrics(sample_points(mesh, seed=0), sample_points(bundle.gt_mesh, seed=0))


def _depth_scores(mesh, cams, depths):
    import numpy as np

    from .geometry import render_depth
    from .metrics import depth_metrics

    pred = np.stack([render_depth(mesh, c) for c in cams])
    return depth_metrics(pred, np.stack(depths))


def cmd_eval(args) -> int:
    import dataclasses

    from .geometry import read_ply
    from .metrics import metrics_csv
    from .pipeline import atomic_write
    from .scenes import heldout_views

    out = Path(args.out)
    _refuse_existing(out, args.force)
    bundle = _bundle(args.scene, with_depth=False)
    if bundle.gt_mesh is None:
        raise InputError(f"{args.scene} has no gt_mesh.ply")
    if args.mesh:
        try:
            mesh = read_ply(args.mesh)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read mesh {args.mesh}: {exc}") from exc
        _, cams, depths = heldout_views(bundle, args.views)
    else:
        if not args.weights:
            raise InputError("eval needs --weights or --mesh")
        cfg = _config(args)
        model = _model(args, cfg)
        cfg = dataclasses.replace(cfg, ablation=bool(model.arch[4]))
        rec, cams, depths = _reconstruct(model, cfg, bundle, args.views)
        mesh = rec.mesh
    mm = _mesh_scores(mesh, bundle)
    dm = _depth_scores(mesh, cams, depths)
    atomic_write(out, metrics_csv({"views": args.views, "mesh": mm, "depth": dm}))
    print(f"wrote {out}: F-score@5cm {mm.fscore:.4f}, chamfer {mm.chamfer:.4f} m, AbsRel {dm.abs_rel:.4f}")
    return EXIT_OK


def _read_rows(path):
    import csv

    from .metrics import MeshMetrics

    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            try:
                n = int(rec["views"])
                p, r, f = float(rec["prec"]), float(rec["recall"]), float(rec["fscore"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}: rows need views,prec,recall,fscore columns") from exc
            rows[n] = MeshMetrics(float(rec.get("acc") or "nan"), float(rec.get("comp") or "nan"),
                                  float(rec.get("chamfer") or "nan"), p, r, f)
    return rows


def cmd_stability(args) -> int:
    import dataclasses

    from .metrics import EvaluationError, stability_csv, stability_report
    from .pipeline import atomic_write

    out = Path(args.out)
    _refuse_existing(out, args.force)
    if args.rows:
        rows = _read_rows(args.rows)
    else:
        if not (args.weights and args.scene):
            raise InputError("stability needs --weights and --scene, or --rows")
        cfg = _config(args)
        model = _model(args, cfg)
        cfg = dataclasses.replace(cfg, ablation=bool(model.arch[4]))
        bundle = _bundle(args.scene, with_depth=False)
        rows = {}
        for k in args.view_sweep:
            rec, _, _ = _reconstruct(model, cfg, bundle, k)
            rows[k] = _mesh_scores(rec.mesh, bundle)
            print(f"{k} views: F-score@5cm {rows[k].fscore:.4f}", flush=True)
    try:
        report = stability_report(rows)
    except EvaluationError as exc:
        raise InputError(str(exc)) from exc
    atomic_write(out, stability_csv(rows, report))
    print(f"wrote {out}: CV {report.cv:.4f}%, mean PRR {report.mean_prr:.4f}%, "
          f"max drop {report.max_drop:.4f}%, SI {report.si:.5f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .scenes import verify_bundle

    bundle = _bundle(args.scene)
    failures = verify_bundle(bundle)
    for name, ok, detail in failures:
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in failures) else EXIT_INPUT


# argument parsing ------------------------------------------------------------------

def _add_common(p, force=True):
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap on numeric worker threads (count); falls back to $IPDR_THREADS")
    if force:
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _add_model(p, required=True):
    p.add_argument("--weights", required=required, help="checkpoint file written by `train`")
    p.add_argument("--config", default=None, help="pipeline config (flat TOML); must match the checkpoint")
    p.add_argument("--max-views", type=_positive_int, default=None,
                   help="keyframe budget per reconstruction (views)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ipdrecon", description="Desk-scale multi-view 3D reconstruction.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic room into a scene bundle")
    p.add_argument("--out", required=True, help="bundle directory to create")
    p.add_argument("--spec", default=None, help="scene spec file (flat TOML, keys as in scene.toml)")
    p.add_argument("--seed", type=int, default=None, help="scene and trajectory seed (integer)")
    p.add_argument("--room", type=float, nargs=3, default=None, metavar=("X", "Y", "Z"),
                   help="room extents (metres)")
    p.add_argument("--furniture", type=int, default=None, help="number of furniture primitives (count)")
    p.add_argument("--views", type=int, default=None, help="training views to render (count)")
    p.add_argument("--trajectory", choices=("circle", "perimeter"), default=None, help="camera loop shape")
    p.add_argument("--voxel-size", type=float, default=None, help="fine voxel edge (metres); coarser levels double it")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy model on scene bundles")
    p.add_argument("--scenes", nargs="+", required=True, help="scene bundle directories")
    p.add_argument("--config", default=None, help="pipeline config (flat TOML)")
    p.add_argument("--out-weights", required=True, help="checkpoint path to write")
    p.add_argument("--loss-csv", default=None, help="loss curve path (default: loss.csv beside the weights)")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps (count)")
    p.add_argument("--seed", type=int, default=None, help="initialization and sampling seed (integer)")
    p.add_argument("--ablation", action="store_true", help="disable PCE and ACM (plain back-projection)")
    p.add_argument("--log-every", type=int, default=25, help="print the loss every N steps (0 = silent)")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a mesh from held-out views of a scene")
    _add_model(p)
    p.add_argument("--scene", required=True, help="scene bundle directory")
    p.add_argument("--views", type=_positive_int, default=10, help="held-out views to render and use (count)")
    p.add_argument("--out", required=True, help="output mesh (PLY)")
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="mesh and depth metrics against the bundle ground truth")
    _add_model(p, required=False)
    p.add_argument("--mesh", default=None, help="evaluate this PLY instead of reconstructing")
    p.add_argument("--scene", required=True, help="scene bundle directory")
    p.add_argument("--views", type=_positive_int, default=10, help="held-out views (count)")
    p.add_argument("--out", required=True, help="metrics CSV")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stability", help="view-count sweep and stability metrics")
    _add_model(p, required=False)
    p.add_argument("--scene", default=None, help="scene bundle directory")
    p.add_argument("--view-sweep", type=_count_list, default=[6, 8, 10],
                   help="comma-separated held-out view counts (views)")
    p.add_argument("--rows", default=None,
                   help="CSV with views,prec,recall,fscore columns (fractions); skips reconstruction")
    p.add_argument("--out", required=True, help="stability CSV")
    _add_common(p)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("verify", help="check the invariants of a scene bundle")
    p.add_argument("--scene", required=True, help="scene bundle directory")
    _add_common(p, force=False)
    p.set_defaults(func=cmd_verify)
    return ap


def _thread_limit(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("IPDR_THREADS")
    if not env:
        return None
    try:
        return _positive_int(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise InputError(f"IPDR_THREADS must be a positive integer, got {env!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        limit = _thread_limit(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=limit):
            return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
