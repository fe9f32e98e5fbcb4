"""Command line: train, eval, profile, inspect and synth-data."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import torch

from .checkpoint import CheckpointError, load_checkpoint_full, save_checkpoint
from .config import ConfigError, ModelConfig, load_profile
from .data import (SYNTH_CLASSES, ArrayDataset, DataError, data_root, load_cifar10_binary,
                   synth_event_dataset, synth_events)
from .energy import Profiler
from .model import MSViT, build_model, stage_shapes
from .train import (DivergenceError, History, TrainConfig, evaluate, optim_state_from_tensors,
                    optim_state_tensors, train_loop)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("train", "eval", "profile", "inspect", "synth-data")

log = logging.getLogger("msvit")


@dataclass
class DataSpec:
    dataset: Optional[str] = None
    classes: Optional[list[int]] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    per_class: int = 200
    test_per_class: int = 40
    sensor_size: int = 32
    normalize: bool = True


@dataclass
class RunConfig:
    command: str
    model: ModelConfig
    train: TrainConfig
    data: DataSpec
    out: Optional[Path] = None
    data_dir: Optional[str] = None
    checkpoint: Optional[Path] = None
    energy: bool = False
    ann_equivalent: bool = False
    profile_slice: int = 16
    resume: bool = False
    extra: dict = field(default_factory=dict)


def _section(cls, data: dict, name: str, problems: list[str]) -> dict:
    known = {f.name for f in fields(cls)}
    for k in sorted(set(data) - known):
        problems.append(f"unknown key '{name}.{k}'")
    return {k: v for k, v in data.items() if k in known}


def resolve(args: argparse.Namespace) -> RunConfig:
    """Merge config file, profile and flags; raise ConfigError listing every problem."""
    problems: list[str] = []
    file_data: dict = {}
    if args.config:
        try:
            file_data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(file_data, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
        # a bare model config (as written by inspect) is accepted too
        if "model" not in file_data and {"dims", "depths"} & set(file_data):
            file_data = {"model": file_data}
        for k in sorted(set(file_data) - {"model", "train", "data", "profile"}):
            problems.append(f"unknown key {k!r}")

    profile = args.profile or file_data.get("profile")
    model_cfg = ModelConfig()
    try:
        if profile:
            model_cfg = load_profile(profile)
        if "model" in file_data:
            merged = model_cfg.to_dict()
            merged.update(file_data["model"])
            model_cfg = ModelConfig.from_dict(merged)
    except ConfigError as e:
        problems += e.problems
    if args.timesteps is not None:
        model_cfg = model_cfg.replace(timesteps=args.timesteps)
    if args.seed is not None:
        model_cfg = model_cfg.replace(seed=args.seed)

    train_kw = _section(TrainConfig, file_data.get("train", {}), "train", problems)
    hyper = TrainConfig(**train_kw)
    for flag, attr in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "base_lr"),
                       ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            setattr(hyper, attr, getattr(args, flag))
    if args.deterministic:
        hyper.deterministic = True
    if getattr(args, "nondeterministic", False):
        hyper.deterministic = False
    if hyper.epochs < 1:
        problems.append("epochs must be >= 1")
    if hyper.batch_size < 1:
        problems.append("batch size must be >= 1")

    data_kw = _section(DataSpec, file_data.get("data", {}), "data", problems)
    spec = DataSpec(**data_kw)
    if getattr(args, "dataset", None):
        spec.dataset = args.dataset
    if getattr(args, "classes", None):
        try:
            spec.classes = [int(c) for c in args.classes.split(",")]
        except ValueError:
            problems.append(f"--classes must be comma-separated integers, got {args.classes!r}")
    for flag in ("train_limit", "test_limit", "per_class"):
        if getattr(args, flag, None) is not None:
            setattr(spec, flag, getattr(args, flag))
    if spec.dataset not in (None, "synth-events", "cifar10"):
        problems.append(f"unknown dataset {spec.dataset!r} (synth-events or cifar10)")
    if spec.dataset == "synth-events":
        if model_cfg.in_channels != 2:
            problems.append("synth-events needs a model with in_channels = 2")
        if model_cfg.num_classes != len(SYNTH_CLASSES):
            problems.append(f"synth-events needs num_classes = {len(SYNTH_CLASSES)}")
    if spec.dataset == "cifar10":
        n = len(spec.classes) if spec.classes else 10
        if model_cfg.num_classes != n:
            problems.append(f"cifar10 with {n} classes needs num_classes = {n}")
        if model_cfg.in_channels != 3 or tuple(model_cfg.img_size) != (32, 32):
            problems.append("cifar10 needs in_channels = 3 and img_size = [32, 32]")

    problems += model_cfg.problems()

    data_dir = getattr(args, "data_dir", None) or os.environ.get("MSVIT_DATA_DIR")
    if spec.dataset == "cifar10":
        if not data_dir:
            problems.append("cifar10 needs --data-dir or MSVIT_DATA_DIR")
        elif not Path(data_dir).is_dir():
            problems.append(f"data directory {data_dir} does not exist")

    out = Path(args.out) if getattr(args, "out", None) else None
    if args.command in ("train", "synth-data") and out is None:
        problems.append(f"{args.command} needs --out")
    if out is not None and out.exists() and not out.is_dir():
        problems.append(f"--out {out} exists and is not a directory")

    ckpt = getattr(args, "checkpoint", None)
    if args.command == "eval":
        ckpt = Path(ckpt) if ckpt else (out / "model.ckpt" if out else None)
        if ckpt is None:
            problems.append("eval needs --checkpoint or --out holding model.ckpt")
        elif not ckpt.is_file():
            problems.append(f"checkpoint {ckpt} not found")
        if spec.dataset is None:
            problems.append("eval needs --dataset")
    elif ckpt is not None:
        ckpt = Path(ckpt)
        if not ckpt.is_file():
            problems.append(f"checkpoint {ckpt} not found")

    if problems:
        raise ConfigError(problems)
    return RunConfig(command=args.command, model=model_cfg, train=hyper, data=spec, out=out,
                     data_dir=data_dir, checkpoint=ckpt, energy=getattr(args, "energy", False),
                     ann_equivalent=getattr(args, "ann_equivalent", False),
                     profile_slice=getattr(args, "slice", 16) or 16,
                     resume=getattr(args, "resume", False))


def load_split(run: RunConfig, split: str, cfg: ModelConfig) -> ArrayDataset:
    spec = run.data
    if spec.dataset == "synth-events":
        n = spec.per_class if split == "train" else spec.test_per_class
        seed = cfg.seed * 1_000_003 + (0 if split == "train" else 500_000)
        return synth_event_dataset(n, cfg.timesteps, spec.sensor_size, seed=seed,
                                   frame_size=cfg.img_size[0])
    if spec.dataset == "cifar10":
        limit = spec.train_limit if split == "train" else spec.test_limit
        return load_cifar10_binary(data_root(run.data_dir), split, spec.classes, limit,
                                   normalize=spec.normalize)
    raise DataError("no dataset configured")


# -- commands -------------------------------------------------------------------

def cmd_train(run: RunConfig) -> int:
    run.out.mkdir(parents=True, exist_ok=True)
    ckpt_path = run.out / "model.ckpt"
    model = build_model(run.model)
    state, start, history = None, 0, History(deterministic=run.train.deterministic)
    if run.resume and ckpt_path.is_file():
        model, meta, extra = load_checkpoint_full(ckpt_path, run.model)
        params = [p for p in model.parameters() if p.requires_grad]
        state = optim_state_from_tensors(extra, params)
        start = meta["epoch"] + 1
        history.rows = meta["history"]
        log.info("resuming from epoch %d", start)
    train = load_split(run, "train", run.model)
    test = load_split(run, "test", run.model)

    def on_epoch(epoch, st, hist):
        save_checkpoint(model, ckpt_path, meta={"epoch": epoch, "history": hist.rows},
                        extra=optim_state_tensors(st))
        (run.out / "metrics.csv").write_text(hist.to_csv())

    history, state = train_loop(model, train, run.train, eval_data=test, state=state,
                                start_epoch=start, history=history, on_epoch=on_epoch)
    final = evaluate(model, test, run.train.batch_size, topk=(1, 5))
    summary = {
        "config": run.model.to_dict(),
        "train": {k: getattr(run.train, k) for k in (f.name for f in fields(TrainConfig))},
        "parameters": model.num_parameters(),
        "steps": state.step,
        "skipped_steps": state.skipped,
        "final_eval": final,
        "train_samples": len(train),
        "eval_samples": len(test),
    }
    if not run.train.deterministic:
        summary["wall_ms"] = sum(r["wall_ms"] for r in history.rows)
    (run.out / "metrics.csv").write_text(history.to_csv())
    (run.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"final eval: top1 {final['top1']:.4f}  top5 {final['top5']:.4f}  "
          f"firing rate {final['firing_rate']:.4f}")
    return EXIT_OK


def _profile_run(model: MSViT, data: ArrayDataset, n: int, batch: int) -> Profiler:
    from .data import batches
    model.eval()
    sub = data.subset(slice(0, n))
    with Profiler() as prof, torch.no_grad():
        for x, _ in batches(sub, batch, None, 0, model.cfg.timesteps):
            model(x)
    return prof


def cmd_eval(run: RunConfig) -> int:
    model, _, _ = load_checkpoint_full(run.checkpoint)
    test = load_split(run, "test", model.cfg)
    res = evaluate(model, test, run.train.batch_size, topk=(1, 5))
    print(f"top1 {res['top1']:.4f}  top5 {res['top5']:.4f}  loss {res['loss']:.4f}  "
          f"firing rate {res['firing_rate']:.4f}")
    if run.energy:
        prof = _profile_run(model, test, len(test), run.train.batch_size)
        report = prof.report(model.cfg.timesteps)
        print(report.table())
        if run.out is not None:
            run.out.mkdir(parents=True, exist_ok=True)
            (run.out / "energy.json").write_text(report.to_json() + "\n")
    return EXIT_OK


def static_profile(cfg: ModelConfig) -> tuple[Profiler, MSViT]:
    """Per-layer FLOPs from one single-sample, single-step pass."""
    model = build_model(cfg.replace(timesteps=1))
    model.eval()
    x = torch.zeros(1, cfg.in_channels, *cfg.img_size)
    with Profiler() as prof, torch.no_grad():
        model(x)
    return prof, model


def _layer_params(model: MSViT) -> dict[str, int]:
    out = {}
    for name, m in model.named_modules():
        if hasattr(m, "weight") and hasattr(m, "path") and isinstance(m.weight, torch.nn.Parameter):
            out[name] = m.weight.numel()
    return out


def cmd_profile(run: RunConfig) -> int:
    cfg = run.model
    if run.checkpoint is not None:
        model, _, _ = load_checkpoint_full(run.checkpoint)
        cfg = model.cfg
    else:
        model = None
    prof, static_model = static_profile(cfg)
    params = _layer_params(static_model)
    rows = [("layer", "kind", "params", "FLOPs")]
    for c in prof.counters.values():
        rows.append((c.path + (" (MAC)" if c.entrance else ""), c.kind,
                     str(params.get(c.path, 0)), str(c.flops)))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    for i, r in enumerate(rows):
        print("  ".join(v.ljust(w) if j < 2 else v.rjust(w) for j, (v, w) in enumerate(zip(r, widths))))
        if i == 0:
            print("-" * (sum(widths) + 6))
    total_flops = sum(c.flops for c in prof.counters.values())
    print(f"\nparameters           {static_model.num_parameters()}")
    print(f"FLOPs/sample/step    {total_flops}")
    result: dict = {"parameters": static_model.num_parameters(), "flops": total_flops}
    if run.ann_equivalent:
        from .energy import ann_energy_pj
        ann = ann_energy_pj(total_flops)
        print(f"ANN-equivalent       {ann * 1e-9:.6f} mJ  (E_MAC x FLOPs)")
        result["ann_pj"] = ann
    if run.data.dataset is not None:
        model = model or build_model(cfg)
        data = load_split(run, "test", cfg)
        report = _profile_run(model, data, run.profile_slice, run.train.batch_size).report(
            cfg.timesteps)
        print()
        print(report.table())
        result["energy"] = report.to_dict()
    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        (run.out / "energy.json").write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def cmd_inspect(run: RunConfig) -> int:
    cfg = run.model
    from .model import count_parameters
    n = count_parameters(cfg)
    print(f"input        T={cfg.timesteps} C0={cfg.in_channels} "
          f"{cfg.img_size[0]}x{cfg.img_size[1]}")
    print(f"{'stage':<6} {'grid':>9} {'tokens':>7} {'dim':>5} {'depth':>5}  attention")
    for s in stage_shapes(cfg):
        grid = f"{s['grid'][0]}x{s['grid'][1]}"
        print(f"{s['stage']:<6} {grid:>9} {s['tokens']:>7} {s['dim']:>5} {s['depth']:>5}  "
              f"{s['attention']}")
    print(f"stage dims   {list(cfg.dims)}")
    print(f"depths       {list(cfg.depths)}")
    print(f"parameters   {n} ({n / 1e6:.2f}M)")
    print(f"config hash  {cfg.digest()[:16]}")
    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        (run.out / "config.json").write_text(cfg.canonical())
    return EXIT_OK


def cmd_synth_data(run: RunConfig) -> int:
    run.out.mkdir(parents=True, exist_ok=True)
    rows = ["file,class,label,seed,events"]
    for seed in range(run.data.per_class):
        for c, name in enumerate(SYNTH_CLASSES):
            s = synth_events(c, seed, run.data.sensor_size)
            fname = f"{name}_{seed:04d}.csv"
            (run.out / fname).write_text(s.to_csv())
            rows.append(f"{fname},{name},{c},{seed},{len(s)}")
    (run.out / "index.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {len(rows) - 1} streams to {run.out}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "profile": cmd_profile,
            "inspect": cmd_inspect, "synth-data": cmd_synth_data}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections: model, train, data)")
    common.add_argument("--profile", help="named model profile")
    common.add_argument("--data-dir", help="dataset root (default $MSVIT_DATA_DIR)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic kernels")
    common.add_argument("--timesteps", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float, help="base learning rate (scaled by batch/256)")
    common.add_argument("--dataset", help="synth-events or cifar10")
    common.add_argument("--classes", help="comma-separated CIFAR-10 class subset")
    common.add_argument("--train-limit", type=int)
    common.add_argument("--test-limit", type=int)
    common.add_argument("--per-class", type=int, help="synthetic streams per class")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="msvit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[common])
    sp.add_argument("--resume", action="store_true", help="continue from OUT/model.ckpt")
    sp.add_argument("--nondeterministic", action="store_true")
    sp = sub.add_parser("eval", parents=[common])
    sp.add_argument("--energy", action="store_true", help="attach the energy profiler")
    sp = sub.add_parser("profile", parents=[common])
    sp.add_argument("--ann-equivalent", action="store_true")
    sp.add_argument("--slice", type=int, default=16, help="samples to profile")
    sub.add_parser("inspect", parents=[common])
    sub.add_parser("synth-data", parents=[common])
    return p


def _snapshot(out: Optional[Path]) -> Optional[set]:
    if out is None or not out.is_dir():
        return None
    return set(out.iterdir())


def _cleanup(out: Optional[Path], before: Optional[set], existed: bool) -> None:
    if out is None or not out.exists():
        return
    if not existed:
        for f in sorted(out.rglob("*"), reverse=True):
            f.unlink() if f.is_file() else f.rmdir()
        out.rmdir()
        return
    for f in set(out.iterdir()) - (before or set()):
        if f.is_file():
            f.unlink()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve(args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    existed = run.out is not None and run.out.exists()
    before = _snapshot(run.out)
    if run.train.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        return HANDLERS[run.command](run)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        code = EXIT_DIVERGED
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        code = EXIT_CONFIG
    except (CheckpointError, DataError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_RUNTIME
    if not run.resume:
        _cleanup(run.out, before, existed)
    return code


if __name__ == "__main__":
    sys.exit(main())
