"""Command-line entry point: ``gct <subcommand> ...``.

Subcommands: train, eval, report, flawmap, make-split, gen-data.
Every error derived from :class:`GctError` exits with status 2 and a one-line
diagnostic on stderr; argparse usage errors also exit with 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import METHODS, PRESETS, TASKS, ExperimentConfig, build_config
from .errors import ConfigError, GctError

log = logging.getLogger("gct")

# Config fields that may be overridden with ``--set key=value``, mapped to their parser.
_NUMERIC = {
    "lambda_dc": float, "lambda_fc": float, "xi": float, "mu": float, "nu": int, "eta_dc": int,
    "lambda_mt": float, "eta_mt": int, "alpha_mt": float, "lr_task": float, "lr_flaw": float,
    "epochs_full": int, "batch_size": int, "labeled_per_batch": int, "n_train": int, "n_val": int,
    "image_size": int, "classes": int, "noise_sigma": float, "split_seed": int, "data_seed": int,
    "checkpoint_every": int,
}
_STRINGS = {"budget", "flaw_arch", "flaw_norm", "eval_model", "output_dir", "run_id", "split_manifest"}


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        if key in _NUMERIC:
            try:
                out[key] = _NUMERIC[key](value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r} as {_NUMERIC[key].__name__}") from None
        elif key in _STRINGS:
            out[key] = value
        elif key == "augment":
            out[key] = [v for v in value.split(",") if v]
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return out


def _config_from_args(args) -> ExperimentConfig:
    file_values = {}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = _parse_set(args.set)
    for key in ("method", "ratio", "seed", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    task = args.task or file_values.get("task", "synth_seg")
    if args.preset:
        # a named preset replaces the task default before file values and flags apply
        base = dict(PRESETS[args.preset])
        base.update({k: v for k, v in file_values.items()})
        file_values = base
    return build_config(task, file_values, overrides)


def cmd_train(args):
    from .baselines import flaw_gated_mt_fit, mt_fit, suponly_fit
    from .trainer import fit, prepare_run_dir

    cfg = _config_from_args(args)
    run_dir = prepare_run_dir(cfg)
    fits = {"gct": fit, "suponly": suponly_fit, "mt": mt_fit, "mt_flawgated": flaw_gated_mt_fit}
    _, _, rep = fits[cfg.method](cfg, run_dir=run_dir, cache_dir=args.cache_dir)
    print(f"run\t{run_dir}")
    print(f"best_{rep.metric_id}\t{rep.best_metric:.6f}")
    print(f"final_{rep.metric_id}\t{rep.final_metric:.6f}")
    return 0


def _load_run(run_dir, checkpoint=None):
    from .models import TaskSpec, build_flaw_detector, build_task_model, load_checkpoint

    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.snapshot")
    ckpt = Path(checkpoint) if checkpoint else run_dir / "best.ckpt"
    if not ckpt.exists():
        raise GctError(f"{ckpt}: checkpoint not found")
    payload = load_checkpoint(ckpt)
    spec = TaskSpec.from_dict(payload["meta"]["spec"])
    models = {}
    for name, state in payload["state"].items():
        if name == "flaw":
            continue
        m = build_task_model(spec, 0)
        m.load_state_dict(state)
        models[name] = m
    flaw = None
    if "flaw" in payload["state"]:
        from .trainer import flaw_detector_for

        flaw = flaw_detector_for(cfg, spec, 0)
        flaw.load_state_dict(payload["state"]["flaw"])
    return cfg, spec, models, flaw, payload


def cmd_eval(args):
    from .trainer import evaluate, load_task_data

    cfg, spec, models, _, payload = _load_run(args.run, args.checkpoint)
    data = load_task_data(cfg, args.cache_dir)
    print(f"# checkpoint epoch {payload['meta'].get('epoch')} step {payload['meta'].get('step')}")
    print(f"model\t{spec.metric}")
    for name in sorted(models):
        print(f"{name}\t{evaluate(models[name], data.val, spec.metric):.6f}")
    return 0


def cmd_report(args):
    from .reporting import report

    table = report(args.runs, args.out, use=args.use)
    print(table, end="")
    print(f"# wrote {Path(args.out) / 'report.txt'}, report.tsv, curves.png")
    return 0


def cmd_flawmap(args):
    import numpy as np

    from .flawmap import PipelineParams, pipeline_c
    from .reporting import dump_flawmaps, read_image, write_gray

    if args.run:
        from .trainer import load_task_data

        cfg, spec, models, flaw, _ = _load_run(args.run, args.checkpoint)
        if flaw is None:
            raise GctError(f"{args.run}: run has no flaw detector (method {cfg.method})")
        data = load_task_data(cfg, args.cache_dir)
        params = PipelineParams(cfg.pipeline_mu(spec.out_channels), cfg.nu)
        ids = args.samples or data.manifest.labeled_ids[:4]
        models = {k: v for k, v in models.items() if k in ("t1", "t2", "student", "teacher")}
        written = dump_flawmaps(models, flaw, data, ids, args.out, params)
        print(f"# wrote {len(written)} images to {args.out}")
        return 0
    if not (args.pred and args.label):
        raise ConfigError("flawmap needs either --run or both --pred and --label")
    pred, label = read_image(args.pred), read_image(args.label)
    if pred.shape != label.shape:
        raise ConfigError(f"--pred {pred.shape} and --label {label.shape} differ in shape")
    mu = args.mu if args.mu is not None else 1.0 / pred.shape[-1]
    out = pipeline_c(pred, label, PipelineParams(mu, args.nu))[..., 0]
    write_gray(args.out, out)
    print(f"# wrote {args.out}  min={out.min():.4f} max={out.max():.4f} mean={np.mean(out):.4f}")
    return 0


def cmd_make_split(args):
    from .data import make_split

    m = make_split(args.total, args.ratio, args.seed, dataset_id=args.dataset_id)
    m.save(args.out)
    print(f"labeled\t{len(m.labeled_ids)}\nunlabeled\t{len(m.unlabeled_ids)}\n# wrote {args.out}")
    return 0


def cmd_gen_data(args):
    import numpy as np

    from .data import synth_denoising, synth_segmentation

    if args.task == "synth_seg":
        ds = synth_segmentation(args.count, args.size, args.classes, args.seed)
    else:
        ds = synth_denoising(args.count, args.size, args.noise_sigma, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, images=ds.images, labels=ds.labels)
    print(f"images\t{ds.images.shape}\nlabels\t{ds.labels.shape}\n# wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gct", description="Guided collaborative training for pixel-wise tasks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration into a run directory")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--ratio", help="labeled fraction, e.g. 1/8")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset (default: the task's)")
    t.add_argument("--config", help="JSON config file; flags override its values")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("--output-dir", dest="output_dir")
    t.add_argument("--cache-dir", default=None, help="dataset cache directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run's checkpoint on its validation set")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", help="default: <run>/best.ckpt")
    e.add_argument("--cache-dir", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tabulate and plot completed runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", default="report")
    r.add_argument("--use", choices=("best", "final"), default="best")
    r.set_defaults(func=cmd_report)

    f = sub.add_parser("flawmap", help="write flaw-map images")
    f.add_argument("--run", help="run directory with a trained flaw detector")
    f.add_argument("--checkpoint")
    f.add_argument("--samples", type=int, nargs="*", help="training sample ids (default: first 4 labeled)")
    f.add_argument("--pred", help="prediction image (with --label: write the ground-truth flaw map)")
    f.add_argument("--label", help="label image")
    f.add_argument("--mu", type=float, help="default 1/channels")
    f.add_argument("--nu", type=int, default=1)
    f.add_argument("--out", required=True, help="output directory (--run) or image path")
    f.add_argument("--cache-dir", default=None)
    f.set_defaults(func=cmd_flawmap)

    s = sub.add_parser("make-split", help="write a labeled/unlabeled split manifest")
    s.add_argument("--total", type=int, required=True)
    s.add_argument("--ratio", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dataset-id", default="custom")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_split)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset as .npz")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--count", type=int, default=384)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except GctError as exc:
        print(f"gct {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
