"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation/usage problem, 2 runtime failure.
Every artifact-producing subcommand echoes its effective configuration to
config.json in the output directory; re-running from that file reproduces
the outputs byte for byte.
"""

import argparse
import os
import sys

from . import config as cfg
from . import rawio
from .data import build_dataset, load_manifest, load_split
from .errors import (ConfigurationError, DimensionError, TaskCTError, UsageError)
from .evaluation import (MethodAdapter, denoiser_adapter, fbp_adapter,
                         full_dose_adapter, identity_adapter, network_adapter,
                         records_to_tables_text, render_report, run_benchmark)
from .nets import load_checkpoint, save_checkpoint
from .train import pretrain_segmentation, train_joint, train_task_adaptive

OUT_ROOT_ENV = "TASKCT_OUT_ROOT"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here is exit 1
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_out(subcommand):
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return os.path.join(root, subcommand.replace("-", "_"))


def _add_common(p, subcommand):
    p.add_argument("--config", default=None, help="YAML/JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="dotted config override")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=_default_out(subcommand),
                   help=f"output directory (default under ${OUT_ROOT_ENV} or ./runs)")


def build_parser():
    parser = _Parser(prog="taskct", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", parents=[], help="build a low-dose dataset")
    _add_common(p, "simulate")
    p.add_argument("--count", type=int, default=None, help="number of samples")
    p.add_argument("--source", choices=("phantom", "volumes"), default=None)
    p.add_argument("--volume-dir", default=None, help="raw-slab volumes directory")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("pretrain-seg", help="pretrain the segmentation model")
    _add_common(p, "pretrain_seg")
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train-base", help="train the base U-Net (alpha = 0)")
    _add_common(p, "train_base")
    p.add_argument("--data", required=True)

    p = sub.add_parser("train-task-adaptive",
                       help="train reconstruction with the frozen task model")
    _add_common(p, "train_task_adaptive")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--task-model", default=None,
                   help="pretrained segmentation checkpoint (required for alpha > 0)")

    p = sub.add_parser("train-joint", help="jointly train both networks")
    _add_common(p, "train_joint")
    p.add_argument("--data", required=True)
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--init-task-from", default=None,
                   help="optional checkpoint to initialize the task branch from")

    p = sub.add_parser("evaluate", help="benchmark methods on the test split")
    _add_common(p, "evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--seg-model", required=True,
                   help="pretrained segmentation checkpoint for Dice scoring")
    p.add_argument("--recon", action="append", default=[], metavar="NAME=CKPT",
                   help="network rows, repeatable, evaluated in the given order")
    p.add_argument("--no-classical", action="store_true",
                   help="skip the FBP and reference-denoiser rows")
    p.add_argument("--gallery", type=int, default=None,
                   help="number of gallery samples (default from config)")

    p = sub.add_parser("report", help="re-render tables from results.json")
    p.add_argument("--results", required=True, help="path to results.json")
    p.add_argument("--out", default=_default_out("report"))

    p = sub.add_parser("repro-toy",
                       help="the complete desk-scale experiment in one run")
    _add_common(p, "repro_toy")
    return parser


def _load_cfg(args, profile=None):
    config = cfg.load_config(args.config, args.overrides, profile=profile)
    if args.seed is not None:
        config["seed"] = int(args.seed)
    return config


def _load_train_samples(data_dir):
    return list(load_split(data_dir, "train"))


def _cmd_simulate(args, config=None):
    config = config or _load_cfg(args)
    if args.count is not None:
        config["data"]["count"] = int(args.count)
    if args.source is not None:
        config["data"]["source"] = args.source
    if args.volume_dir is not None:
        config["data"]["volume_dir"] = args.volume_dir
    if args.workers is not None:
        config["workers"] = int(args.workers)
    geometry = cfg.geometry_from(config)
    noise = cfg.noise_from(config)
    manifest = build_dataset(
        source=config["data"]["source"],
        count=config["data"]["count"],
        geometry=geometry,
        noise=noise,
        split_ratio=config["data"]["split_ratio"],
        seed=config["seed"],
        out_dir=args.out,
        spec=cfg.phantom_from(config) if config["data"]["source"] == "phantom" else None,
        volume_dir=config["data"]["volume_dir"],
        workers=config["workers"],
    )
    cfg.echo_config(config, args.out)
    n_train = len(manifest.ids("train"))
    print(f"dataset: {len(manifest.sample_ids)} samples "
          f"({n_train} train / {len(manifest.sample_ids) - n_train} test) -> {args.out}")
    return 0


def _cmd_pretrain_seg(args, config=None):
    config = config or _load_cfg(args)
    samples = _load_train_samples(args.data)
    model, report = pretrain_segmentation(
        samples, cfg.train_from(config), net_config=cfg.seg_net_from(config),
        aug_noise_std=config["train"]["aug_noise_std"])
    rawio.ensure_dir(args.out)
    ckpt = os.path.join(args.out, "seg.ckpt")
    save_checkpoint(model, ckpt)
    report.checkpoint_path = ckpt
    rawio.write_json(os.path.join(args.out, "seg.report.json"), report.to_dict())
    cfg.echo_config(config, args.out)
    print(f"pretrained segmentation: best epoch {report.best_epoch}, "
          f"val loss {report.val_curve[report.best_epoch]:.4f} -> {ckpt}")
    return 0


def _train_recon(args, config, alpha, name, task_ckpt=None):
    samples = _load_train_samples(args.data)
    task_model = None
    if alpha > 0:
        if task_ckpt is None:
            raise UsageError("task-adaptive training with alpha > 0 needs --task-model")
        task_model = load_checkpoint(task_ckpt).freeze()
    model, report = train_task_adaptive(
        samples, task_model, alpha, cfg.train_from(config, weight=alpha),
        recon_config=cfg.recon_net_from(config))
    rawio.ensure_dir(args.out)
    ckpt = os.path.join(args.out, f"{name}.ckpt")
    save_checkpoint(model, ckpt)
    report.checkpoint_path = ckpt
    rawio.write_json(os.path.join(args.out, f"{name}.report.json"), report.to_dict())
    cfg.echo_config(config, args.out)
    print(f"trained {name}: best epoch {report.best_epoch}, "
          f"val loss {report.val_curve[report.best_epoch]:.5f} -> {ckpt}")
    return ckpt


def _cmd_train_base(args, config=None):
    config = config or _load_cfg(args)
    _train_recon(args, config, 0.0, "base")
    return 0


def _cmd_train_task_adaptive(args, config=None):
    config = config or _load_cfg(args)
    name = f"ta_a{args.alpha:g}"
    _train_recon(args, config, args.alpha, name, task_ckpt=args.task_model)
    return 0


def _cmd_train_joint(args, config=None):
    config = config or _load_cfg(args)
    samples = _load_train_samples(args.data)
    init_from = load_checkpoint(args.init_task_from) if args.init_task_from else None
    (recon, task), report = train_joint(
        samples, args.c, cfg.train_from(config, weight=args.c),
        recon_config=cfg.recon_net_from(config), seg_config=cfg.seg_net_from(config),
        init_task_from=init_from)
    rawio.ensure_dir(args.out)
    name = f"joint_c{args.c:g}"
    recon_ckpt = os.path.join(args.out, f"{name}.recon.ckpt")
    save_checkpoint(recon, recon_ckpt)
    save_checkpoint(task, os.path.join(args.out, f"{name}.task.ckpt"))
    report.checkpoint_path = recon_ckpt
    rawio.write_json(os.path.join(args.out, f"{name}.report.json"), report.to_dict())
    cfg.echo_config(config, args.out)
    print(f"trained {name}: best epoch {report.best_epoch} -> {recon_ckpt}")
    return 0


def _parse_recon_rows(pairs):
    rows = []
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--recon expects NAME=CKPT, got {item!r}")
        name, path = item.split("=", 1)
        rows.append((name, path))
    return rows


def _build_methods(config, geometry, recon_rows, include_classical=True):
    methods = [identity_adapter()]
    if include_classical:
        methods.append(fbp_adapter(geometry))
        methods.append(denoiser_adapter(sigma=config["eval"]["denoiser_sigma"]))
    for name, path in recon_rows:
        methods.append(network_adapter(name, load_checkpoint(path)))
    methods.append(full_dose_adapter())
    return methods


def _cmd_evaluate(args, config=None):
    config = config or _load_cfg(args)
    geometry = cfg.geometry_from(config)
    seg_model = load_checkpoint(args.seg_model).freeze()
    test_samples = list(load_split(args.data, "test"))
    methods = _build_methods(config, geometry, _parse_recon_rows(args.recon),
                             include_classical=not args.no_classical)
    records = run_benchmark(methods, test_samples, seg_model, geometry,
                            roi_radius=config["eval"]["roi_radius"])
    n_gallery = args.gallery if args.gallery is not None else config["eval"]["gallery_count"]
    gallery_ids = [s.sample_id for s in test_samples[:max(0, n_gallery)]]
    gallery = (gallery_ids, test_samples, methods, seg_model, geometry) if gallery_ids else None
    render_report(records, args.out, gallery=gallery)
    cfg.echo_config(config, args.out)
    print(records_to_tables_text(records))
    print(f"report -> {args.out}")
    return 0


def _cmd_report(args):
    from .evaluation import load_records
    records = load_records(args.results)
    render_report(records, args.out)
    print(records_to_tables_text(records))
    return 0


def _cmd_repro_toy(args):
    config = _load_cfg(args, profile=cfg.TOY_PROFILE)
    out = args.out
    rawio.ensure_dir(out)
    cfg.echo_config(config, out)
    data_dir = os.path.join(out, "dataset")
    ckpt_dir = rawio.ensure_dir(os.path.join(out, "ckpt"))
    geometry = cfg.geometry_from(config)

    print("[1/5] building dataset")
    build_dataset(
        source="phantom", count=config["data"]["count"], geometry=geometry,
        noise=cfg.noise_from(config), split_ratio=config["data"]["split_ratio"],
        seed=config["seed"], out_dir=data_dir, spec=cfg.phantom_from(config),
        workers=config["workers"])
    train_samples = _load_train_samples(data_dir)

    print("[2/5] pretraining segmentation")
    seg_model, seg_report = pretrain_segmentation(
        train_samples, cfg.train_from(config), net_config=cfg.seg_net_from(config),
        aug_noise_std=config["train"]["aug_noise_std"])
    save_checkpoint(seg_model, os.path.join(ckpt_dir, "seg.ckpt"))
    rawio.write_json(os.path.join(out, "seg.report.json"), seg_report.to_dict())
    seg_model.freeze()

    recon_rows = []
    alphas = (0.0, 0.5, 0.9)
    cs = (0.5, 0.9)
    print(f"[3/5] training reconstruction models (alpha in {alphas})")
    named = {}
    for alpha in alphas:
        name = "Base U-Net" if alpha == 0.0 else f"Task-adaptive a={alpha:g}"
        model, report = train_task_adaptive(
            train_samples, seg_model if alpha > 0 else None, alpha,
            cfg.train_from(config, weight=alpha), recon_config=cfg.recon_net_from(config))
        stem = "base" if alpha == 0.0 else f"ta_a{alpha:g}"
        save_checkpoint(model, os.path.join(ckpt_dir, f"{stem}.ckpt"))
        rawio.write_json(os.path.join(out, f"{stem}.report.json"), report.to_dict())
        named[name] = model
        print(f"    {name}: best epoch {report.best_epoch}")

    print(f"[4/5] joint-training baselines (C in {cs})")
    for c in cs:
        (recon, task), report = train_joint(
            train_samples, c, cfg.train_from(config, weight=c),
            recon_config=cfg.recon_net_from(config), seg_config=cfg.seg_net_from(config))
        stem = f"joint_c{c:g}"
        save_checkpoint(recon, os.path.join(ckpt_dir, f"{stem}.recon.ckpt"))
        save_checkpoint(task, os.path.join(ckpt_dir, f"{stem}.task.ckpt"))
        rawio.write_json(os.path.join(out, f"{stem}.report.json"), report.to_dict())
        named[f"Joint C={c:g}"] = recon
        print(f"    Joint C={c:g}: best epoch {report.best_epoch}")

    print("[5/5] evaluating")
    # row order mirrors the reference tables: classical methods, base, joint
    # sweep, task-adaptive sweep, full-dose reference last
    methods = [identity_adapter(), fbp_adapter(geometry),
               denoiser_adapter(sigma=config["eval"]["denoiser_sigma"]),
               network_adapter("Base U-Net", named["Base U-Net"])]
    methods += [network_adapter(f"Joint C={c:g}", named[f"Joint C={c:g}"]) for c in cs]
    methods += [network_adapter(f"Task-adaptive a={a:g}", named[f"Task-adaptive a={a:g}"])
                for a in alphas if a > 0]
    methods.append(full_dose_adapter())

    test_samples = list(load_split(data_dir, "test"))
    records = run_benchmark(methods, test_samples, seg_model, geometry,
                            roi_radius=config["eval"]["roi_radius"])
    gallery_ids = [s.sample_id for s in test_samples[:config["eval"]["gallery_count"]]]
    render_report(records, os.path.join(out, "report"),
                  gallery=(gallery_ids, test_samples, methods, seg_model, geometry))
    print(records_to_tables_text(records))
    print(f"artifacts -> {out}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "pretrain-seg": _cmd_pretrain_seg,
    "train-base": _cmd_train_base,
    "train-task-adaptive": _cmd_train_task_adaptive,
    "train-joint": _cmd_train_joint,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "repro-toy": _cmd_repro_toy,
}


def dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.subcommand](args)
    except (ConfigurationError, UsageError, DimensionError) as exc:
        print(f"taskct: {exc}", file=sys.stderr)
        return 1
    except TaskCTError as exc:
        print(f"taskct: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"taskct: unexpected failure: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
