"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config, or input file),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import PRESETS, ViTConfig, parse_layout
from .errors import ValidationError, VitError

log = logging.getLogger("vitkit")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _model_flags(p, res_default):
    p.add_argument("--model", choices=sorted(PRESETS) + ["custom"], default="ti")
    p.add_argument("--width", type=int, help="custom model width")
    p.add_argument("--depth", type=int, help="custom model depth")
    p.add_argument("--heads", type=int, help="custom model heads")
    p.add_argument("--layout", help="NxP block layout, e.g. 12x2")
    p.add_argument("--stem", choices=["linear", "conv", "hmlp"], default="linear")
    p.add_argument("--stem-norm", choices=["bn", "ln", "none"])
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--res", type=int, default=res_default)
    p.add_argument("--classes", type=int)
    p.add_argument("--layerscale", type=float)
    p.add_argument("--sd", type=float, default=0.0)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")


def _train_flags(p):
    p.add_argument("--dataset", default="synthetic", help="'synthetic' or a CIFAR-10 binary file/directory")
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--opt", choices=["adamw", "sgd"], default="adamw")
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vitkit", description="Small numpy Vision Transformers with N x P block layouts.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter / FLOP / memory report")
    _model_flags(p, 224)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--format", choices=["json", "text"], default="json")

    p = sub.add_parser("train", help="supervised training from scratch")
    _model_flags(p, 32)
    _train_flags(p)

    p = sub.add_parser("pretrain-mim", help="masked patch regression pre-training")
    _model_flags(p, 32)
    _train_flags(p)
    p.add_argument("--mask-ratio", type=float, default=0.4)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint at a new resolution")
    _model_flags(p, 32)
    _train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tune", choices=["full", "attn", "ffn"], default="attn")

    p = sub.add_parser("bench", help="seq vs par branch-execution throughput")
    _model_flags(p, 224)
    p.set_defaults(layout="18x2")
    p.add_argument("--exec", default="seq,par")
    p.add_argument("--batch", type=_ints, default=[1])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)

    p = sub.add_parser("masktest", help="patch independence and masking commutation of a stem")
    p.add_argument("--stem", choices=["linear", "conv", "hmlp"], default="hmlp")
    p.add_argument("--stem-norm", choices=["bn", "ln", "none"], default="ln")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--ratio", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return ap


def config_from_args(a, num_classes=None) -> ViTConfig:
    if a.model == "custom":
        if not (a.width and a.depth and a.heads):
            raise UsageError("--model custom needs --width, --depth and --heads")
        width, depth, heads = a.width, a.depth, a.heads
    else:
        width, depth, heads = PRESETS[a.model]
    branches = 1
    if a.layout:
        depth, branches = parse_layout(a.layout)
    classes = a.classes or num_classes or 1000
    return ViTConfig(width=width, depth=depth, heads=heads, branches=branches, patch_size=a.patch,
                     image_size=a.res, num_classes=classes, sd_rate=a.sd, layerscale=a.layerscale,
                     stem_kind=a.stem, stem_norm=a.stem_norm, dtype=a.dtype).validate()


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) if not isinstance(obj, str) else obj
    if out:
        d = os.path.dirname(out)
        if d:
            os.makedirs(d, exist_ok=True)
        with open(out, "w") as f:
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def _datasets(a, image_size):
    from .data import load_cifar10, synth_dataset

    if a.dataset == "synthetic":
        return (synth_dataset(a.seed, a.n_train, image_size, 10, "train"),
                synth_dataset(a.seed, a.n_test, image_size, 10, "test"))
    train = load_cifar10(a.dataset, "train")
    try:
        test = load_cifar10(a.dataset, "test")
    except ValidationError:
        test = None
    if image_size != 32:
        raise UsageError("CIFAR-10 images are 32x32; use --res 32")
    return train.subset(a.n_train), (test.subset(a.n_test) if test is not None else None)


def _opt_cfg(a, model_name):
    from .config import PRESET_LR
    from .optim import OptimizerConfig

    lr = a.lr if a.lr is not None else (PRESET_LR.get(model_name, 1e-3) if a.opt == "adamw" else 1e-2)
    return OptimizerConfig(name=a.opt, lr=lr, weight_decay=a.wd, batch_size=a.batch_size)


def cmd_analyze(a):
    from .analyzer import count_flops, memory_estimate

    cfg = config_from_args(a)
    rep = count_flops(cfg, a.res)
    if a.format == "text":
        _emit(rep.to_text(), a.out)
        return
    d = rep.to_dict()
    d["memory"] = memory_estimate(cfg, a.res, a.batch)
    _emit(d, a.out)


def cmd_train(a):
    from .training import train

    train_set, test_set = _datasets(a, a.res)
    cfg = config_from_args(a, train_set.num_classes)
    out = a.out or "runs/train"
    model, rows = train(cfg, train_set, a.epochs, _opt_cfg(a, a.model), a.seed, test_set, out)
    _emit({"schema_version": "1", "config": cfg.to_dict(), "epochs": rows, "final": rows[-1],
           "checkpoint": os.path.join(out, "model.vtc"), "metrics": os.path.join(out, "metrics.csv")},
          os.path.join(out, "report.json"))


def cmd_pretrain_mim(a):
    import math

    from .checkpoint import save_checkpoint
    from .errors import TrainingError
    from .masking import init_mim_head, mim_loss, sample_mask
    from .model import build_model
    from .optim import make_optimizer
    from .rng import Rng

    train_set, _ = _datasets(a, a.res)
    cfg = config_from_args(a, train_set.num_classes)
    out = a.out or "runs/mim"
    os.makedirs(out, exist_ok=True)
    rng = Rng(a.seed)
    model = build_model(cfg, rng.fork("init"))
    head = init_mim_head(cfg.width, rng.fork("mim-head"), cfg.patch_size, cfg.in_channels, cfg.dtype)
    params = model.parameters() + [head.mask_token, head.weight, head.bias]
    opt_cfg = _opt_cfg(a, a.model)
    opt = make_optimizer(params, opt_cfg, a.epochs * math.ceil(len(train_set) / opt_cfg.batch_size))
    shuffle, masks, drop = rng.fork("shuffle"), rng.fork("masks"), rng.fork("droppath")
    lines = ["epoch,steps,lr,mim_loss"]
    for epoch in range(1, a.epochs + 1):
        total, n = 0.0, 0
        for x, _ in train_set.batches(opt_cfg.batch_size, shuffle):
            mask = sample_mask(masks, cfg.num_patches, a.mask_ratio)
            loss = mim_loss(model, x, mask, head, "train", drop)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite MIM loss at step {opt.step_count}")
            loss.backward()
            lr = opt.step()
            opt.zero_grad()
            total += val * len(x)
            n += len(x)
        lines.append(f"{epoch},{opt.step_count},{lr!r},{total / n!r}")
    with open(os.path.join(out, "mim_metrics.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    save_checkpoint(model, os.path.join(out, "model.vtc"))
    _emit({"schema_version": "1", "config": cfg.to_dict(), "final_mim_loss": float(lines[-1].split(",")[-1]),
           "checkpoint": os.path.join(out, "model.vtc")}, os.path.join(out, "report.json"))


def cmd_finetune(a):
    from .checkpoint import save_checkpoint, load_checkpoint
    from .finetune import finetune_resolution
    from .model import interpolate_pos_embed
    from .training import evaluate, write_metrics

    model = load_checkpoint(a.checkpoint)
    train_set, test_set = _datasets(a, a.res)
    before = evaluate(interpolate_pos_embed(model, a.res), test_set or train_set)
    tuned, report, rows = finetune_resolution(model, a.res, a.tune, _opt_cfg(a, a.model), train_set,
                                              a.epochs, a.seed, test_set)
    after = evaluate(tuned, test_set or train_set)
    out = a.out or "runs/finetune"
    os.makedirs(out, exist_ok=True)
    write_metrics(os.path.join(out, "metrics.csv"), rows)
    save_checkpoint(tuned, os.path.join(out, "model.vtc"))
    _emit({"schema_version": "1", "scope": a.tune, "resolution": a.res, "params": report.to_dict(),
           "before": {"loss": before[0], "acc": before[1]}, "after": {"loss": after[0], "acc": after[1]}},
          os.path.join(out, "report.json"))


def cmd_bench(a):
    from .bench import bench

    layouts = [s for s in a.layout.split(",") if s]
    base = config_from_args(argparse.Namespace(**{**vars(a), "layout": layouts[0]}))
    rep = bench(base, layouts, [m for m in a.exec.split(",") if m], a.batch, a.repeats, a.warmup, a.seed)
    if a.out and a.out.endswith(".json"):
        _emit(rep.to_dict(), a.out)
    else:
        _emit(rep.to_csv(), a.out)


def cmd_masktest(a):
    from .checks import run_masktest

    _emit(run_masktest(a.stem, a.stem_norm, a.width, a.trials, a.ratio, a.res, a.seed), a.out)


def cmd_gradcheck(a):
    from .checks import run_gradchecks
    from .errors import EvaluationError

    errs = run_gradchecks(a.trials, a.seed)
    ok = all(e <= a.tol for e in errs.values())
    _emit({"schema_version": "1", "tolerance": a.tol, "trials": a.trials, "max_rel_error": errs, "passed": ok},
          a.out)
    if not ok:
        raise EvaluationError(f"gradient check failed: {[k for k, e in errs.items() if e > a.tol]}")


COMMANDS = {"analyze": cmd_analyze, "train": cmd_train, "pretrain-mim": cmd_pretrain_mim,
            "finetune": cmd_finetune, "bench": cmd_bench, "masktest": cmd_masktest,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[a.command](a)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except VitError as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any unexpected failure is a runtime error
        log.debug("unhandled", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
