"""Command line entry point: ``dparnet {simulate,train,eval,ablate,plot}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .core import ConfigurationError, DataIOError, FormatError, NumericalError, SmoothFieldSpec
from .data import TASK_KIND, DatasetManifest, build_dataset, make_synthetic_corpus
from .degrade import DegradationSpec
from .evaluation import benchmark_efficiency, evaluate, format_table
from .models import ModelConfig, Variant
from .train import TrainConfig, read_curve, train_dparnet, train_param_net, write_curve

logger = logging.getLogger("dparnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
VARIANT_CHOICES = ["full", "v1", "v2", "v3"]
ABLATION_ORDER = ["v1", "v2", "v3", "full"]


@dataclass
class DegradationTemplate:
    length_scale: float = 32.0
    max_disp: float = 4.0
    max_blur_sigma: float = 2.0
    warp_scale: float = 12.0
    randomize_span: bool = True
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    bit_depth: int = 16

    def spec(self, task: str) -> DegradationSpec:
        return DegradationSpec(kind=TASK_KIND[task], field=SmoothFieldSpec(self.length_scale),
                               max_disp=self.max_disp, max_blur_sigma=self.max_blur_sigma,
                               warp_scale=self.warp_scale)


@dataclass
class SyntheticCorpus:
    n_sequences: int = 0
    num_frames: int = 7
    height: int = 64
    width: int = 64
    channels: int = 1


@dataclass
class RunConfig:
    task: str = "denoise"
    seed: int = 0
    out: str = "runs"
    clean: Optional[str] = None
    data: Optional[str] = None
    degradation: DegradationTemplate = field(default_factory=DegradationTemplate)
    synthetic: SyntheticCorpus = field(default_factory=SyntheticCorpus)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


_SECTIONS = {"degradation": DegradationTemplate, "synthetic": SyntheticCorpus,
             "train": TrainConfig, "model": ModelConfig}


def _build_section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"invalid [{name}] section: {exc}") from exc


def load_run_config(path: Optional[str]) -> RunConfig:
    """Parse a YAML or JSON config file; unknown keys are errors."""
    if path is None:
        return RunConfig()
    try:
        payload = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise DataIOError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config file {path} must contain a mapping")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(payload) - top)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in config: {', '.join(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section [{key}] must be a mapping")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def _override(obj, **values):
    values = {k: v for k, v in values.items() if v is not None}
    return replace(obj, **values) if values else obj


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    cfg = _override(cfg, task=args.task, seed=args.seed, out=args.out,
                    clean=getattr(args, "clean", None), data=getattr(args, "data", None))
    if cfg.task not in TASK_KIND:
        raise ConfigurationError(f"unknown task {cfg.task!r}")
    cfg.train = _override(cfg.train, epochs=getattr(args, "epochs", None), lr=getattr(args, "lr", None),
                          batch_size=getattr(args, "batch_size", None), crop=getattr(args, "crop", None),
                          alpha1=getattr(args, "alpha1", None), alpha2=getattr(args, "alpha2", None),
                          vgg_weights=getattr(args, "vgg_weights", None), seed=cfg.seed)
    cfg.model = _override(cfg.model, base_channels=getattr(args, "base_channels", None),
                          rdb_layers=getattr(args, "rdb_layers", None),
                          wide_channels=getattr(args, "wide_channels", None),
                          param_channels=getattr(args, "param_channels", None),
                          variant=getattr(args, "variant", None))
    if getattr(args, "synthetic", None) is not None:
        size = getattr(args, "size", None) or (cfg.synthetic.height, cfg.synthetic.width)
        cfg.synthetic = _override(cfg.synthetic, n_sequences=args.synthetic, num_frames=args.frames,
                                  height=size[0], width=size[1], channels=args.channels)
    if getattr(args, "length_scale", None) is not None:
        cfg.degradation = replace(cfg.degradation, length_scale=args.length_scale)
    return cfg


def echo_config(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **cfg.to_dict()}
    (out / f"{command}.config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _setup_logging(out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        if getattr(h, "_dparnet", False):
            root.removeHandler(h)
            h.close()
    handler = logging.FileHandler(out / f"{command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    handler._dparnet = True
    root.addHandler(handler)


def _manifest(cfg: RunConfig) -> DatasetManifest:
    if cfg.data is None:
        raise ConfigurationError("--data (dataset directory with manifest.json) is required")
    manifest = DatasetManifest.load(cfg.data)
    if manifest.task != cfg.task:
        raise ConfigurationError(f"dataset task {manifest.task} does not match --task {cfg.task}")
    return manifest


def _model_config(cfg: RunConfig, manifest: DatasetManifest, variant=None) -> ModelConfig:
    channels = manifest.entries[0].C if manifest.entries else 1
    return replace(cfg.model, in_channels=channels,
                   variant=Variant.parse(variant) if variant is not None else cfg.model.variant)


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out, "simulate")
    _setup_logging(out, "simulate")
    clean = cfg.clean
    if cfg.synthetic.n_sequences > 0 and clean is None:
        clean = str(out / "clean_source")
        make_synthetic_corpus(clean, cfg.synthetic.n_sequences, cfg.synthetic.num_frames,
                              cfg.synthetic.height, cfg.synthetic.width, cfg.synthetic.channels,
                              seed=cfg.seed, bit_depth=cfg.degradation.bit_depth)
    if clean is None:
        raise ConfigurationError("--clean DIR or --synthetic N is required")
    if not Path(clean).is_dir():
        raise DataIOError(f"clean sequence directory {clean} does not exist")
    d = cfg.degradation
    manifest = build_dataset(clean, cfg.task, d.spec(cfg.task), out, cfg.seed,
                             test_fraction=d.test_fraction, val_fraction=d.val_fraction,
                             randomize_span=d.randomize_span, bit_depth=d.bit_depth)
    counts = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} sequences to {out} ({counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out, "train")
    manifest = _manifest(cfg)
    variant = Variant.parse(args.variant or cfg.model.variant)
    param_ckpt = load_checkpoint(args.param_ckpt) if args.param_ckpt else None
    if args.stage == "restore" and variant.needs_pmap and param_ckpt is None and not args.oracle_pmap:
        raise ConfigurationError(
            f"variant {variant.value} needs --param-ckpt or --oracle-pmap when --stage restore")
    _setup_logging(out, "train")
    if args.stage in ("param", "both"):
        ckpt = train_param_net(manifest, cfg.train, _model_config(cfg, manifest))
        save_checkpoint(ckpt, out / "param_net")
        write_curve(ckpt.train_curve, out / "param_net" / "curve.csv")
        param_ckpt = ckpt
        print(f"parameter network: best val MAE {ckpt.extra['best_val_mae']:.5f} at epoch {ckpt.epoch}")
    if args.stage in ("restore", "both"):
        ckpt = train_dparnet(manifest, cfg.train, variant, _model_config(cfg, manifest, variant),
                             param_ckpt, oracle_pmaps=args.oracle_pmap)
        target = out / f"dparnet_{variant.value}"
        save_checkpoint(ckpt, target)
        write_curve(ckpt.train_curve, target / "curve.csv")
        print(f"{variant.value}: best val PSNR {ckpt.extra['best_val_psnr']:.4f} dB at epoch {ckpt.epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out, "eval")
    _setup_logging(out, "eval")
    if not args.ckpt:
        raise ConfigurationError("--ckpt is required")
    ckpt = load_checkpoint(args.ckpt)
    restore = not args.efficiency or cfg.data is not None
    if restore:
        manifest = _manifest(cfg)
        param_ckpt = load_checkpoint(args.param_ckpt) if args.param_ckpt else None
        report = evaluate(ckpt, manifest, args.split, param_ckpt, args.oracle_pmap, out,
                          args.profile_column)
        (out / "metrics.txt").write_text(format_table(
            [{"model": r["seq_id"], **r} for r in report.per_sequence]
            + [{"model": "mean", **report.aggregate}]) + "\n")
        print(format_table([{"model": report.model_id, **report.aggregate}]))
    if args.efficiency:
        eff = benchmark_efficiency(ckpt, rounds=args.rounds)
        eff.save(out / "efficiency.json")
        print(f"params {eff.params_millions:.4f}M  FLOPs {eff.flops_e10:.4f}e10  time {eff.time_s:.4f}s")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    echo_config(cfg, out, "ablate")
    _setup_logging(out, "ablate")
    manifest = _manifest(cfg)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    param_ckpt = None
    if not args.oracle_pmap:
        param_ckpt = train_param_net(manifest, replace(cfg.train, seed=cfg.seed), _model_config(cfg, manifest))
        save_checkpoint(param_ckpt, out / "param_net")
        write_curve(param_ckpt.train_curve, out / "param_net" / "curve.csv")

    rows = []
    for name in ABLATION_ORDER:
        variant = Variant.parse(name)
        per_seed = []
        ckpt = None
        for seed in seeds:
            ckpt = train_dparnet(manifest, replace(cfg.train, seed=seed), variant,
                                 _model_config(cfg, manifest, variant), param_ckpt, args.oracle_pmap)
            run_dir = out / f"{variant.value}_seed{seed}"
            save_checkpoint(ckpt, run_dir)
            write_curve(ckpt.train_curve, run_dir / "curve.csv")
            report = evaluate(ckpt, manifest, args.split, param_ckpt, args.oracle_pmap)
            per_seed.append({"seed": seed, "best_val_psnr": ckpt.extra["best_val_psnr"], **report.aggregate})
        eff = benchmark_efficiency(ckpt, rounds=args.rounds)
        row = {"model": name, "variant": variant.value,
               "params": eff.params_millions, "flops": eff.flops_e10, "time": eff.time_s}
        for key in ("psnr", "ssim", "nrmse", "vi", "best_val_psnr"):
            row[key] = float(np.mean([r[key] for r in per_seed]))
        row["per_seed"] = per_seed
        rows.append(row)
        logger.info("ablation %s: %s", name, {k: v for k, v in row.items() if k != "per_seed"})
    (out / "ablation.json").write_text(json.dumps({"split": args.split, "seeds": seeds, "rows": rows}, indent=2) + "\n")
    table = format_table(rows, columns=("params", "flops", "time", "psnr", "ssim", "nrmse", "vi", "best_val_psnr"))
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    curves = []
    for path in args.curves:
        rows = read_curve(path)
        if not rows:
            raise ConfigurationError(f"curve file {path} is empty")
        metric = args.metric if args.metric in rows[0] else next(
            (k for k in ("val_psnr", "val_mae", "loss") if k in rows[0]), None)
        if metric is None:
            raise ConfigurationError(f"curve file {path} has no plottable column")
        curves.append((Path(path), rows, metric))
    ylabel = "PSNR" if all(m == "val_psnr" for _, _, m in curves) else curves[0][2]
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, rows, metric in curves:
        pts = [(r["epoch"], r[metric]) for r in rows if r.get(metric) is not None]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=path.parent.name if path.name == "curve.csv" else path.stem)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend()
    ax.grid(alpha=0.3)
    target = out / args.name
    fig.savefig(target, dpi=120, metadata={"Title": "training curves", "xlabel": "epoch", "ylabel": ylabel})
    plt.close(fig)
    (out / (Path(args.name).stem + ".json")).write_text(json.dumps(
        {"xlabel": "epoch", "ylabel": ylabel, "series": [str(p) for p, _, _ in curves]}, indent=2) + "\n")
    print(f"wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--out", help="output directory (everything is written here)")
    common.add_argument("--seed", type=int)
    common.add_argument("--task", choices=sorted(TASK_KIND))

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data", help="dataset directory containing manifest.json")
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--crop", type=int)
    training.add_argument("--alpha1", type=float)
    training.add_argument("--alpha2", type=float)
    training.add_argument("--vgg-weights", help="VGG-19 state dict path, or 'imagenet'")
    training.add_argument("--base-channels", type=int)
    training.add_argument("--rdb-layers", type=int)
    training.add_argument("--wide-channels", type=int)
    training.add_argument("--param-channels", type=int)
    training.add_argument("--oracle-pmap", action="store_true",
                          help="use ground-truth parameter maps instead of the parameter network")

    parser = argparse.ArgumentParser(prog="dparnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="synthesize a degraded/clean paired dataset")
    p.add_argument("--clean", help="directory of clean sequence directories")
    p.add_argument("--synthetic", type=int, help="generate N synthetic clean sequences instead of --clean")
    p.add_argument("--frames", type=int, help="frames per synthetic sequence")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--length-scale", type=float, help="spatial smoothness of parameter maps (pixels)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common, training], help="train the parameter and/or restoration net")
    p.add_argument("--stage", choices=("param", "restore", "both"), default="both")
    p.add_argument("--variant", choices=VARIANT_CHOICES)
    p.add_argument("--param-ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--param-ckpt")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--oracle-pmap", action="store_true")
    p.add_argument("--profile-column", type=int)
    p.add_argument("--efficiency", action="store_true")
    p.add_argument("--rounds", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, training], help="train and compare all four variants")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per variant")
    p.add_argument("--split", default="test")
    p.add_argument("--rounds", type=int, default=100)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", parents=[common], help="plot training curves")
    p.add_argument("curves", nargs="+")
    p.add_argument("--metric", default="val_psnr")
    p.add_argument("--name", default="curves.png")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIOError, FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
