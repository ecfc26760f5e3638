"""Command-line surface over the analysis, verification and training modules.

Subcommands:
    count           parameter totals for a preset or config file
    flops           forward-pass cost at a given resolution and shift strategy
    gradcheck       finite-difference verification (ops, one block, or a model)
    equiv           padding-free vs zero-padding agreement battery
    train           run the synthetic-task harness from a config file
    export-weights  dump one head's effective mixing weight as CSV + PGM
    presets         list the built-in model configurations

Output is line-oriented ``key=value``; ``--json`` switches to a JSON document.
Exit codes: 0 success, 1 usage, 2 validation or I/O error, 3 failed check.
The GSWIN_SEED environment variable supplies the default seed where one
applies (gradcheck, equiv, and train configs that omit ``seed``).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Sequence

import numpy as np

from .analysis import (STRATEGIES, count_flops, count_params, export_weight_maps,
                       format_count)
from .checkpoint import model_config_from_mapping, model_from_checkpoint, parse_config_file
from .gradcheck import check_gradients, op_gradcheck_suite
from .model import DROP_PATH_RATES, PRESETS, GswinBlock, GswinModel, ModelConfig
from .sgu import init_sgu_params, multi_head_window_sgu, zero_padding_shift_oracle
from .tensor import Tensor
from .train import SyntheticTask, TrainConfig, cross_entropy, train
from .windows import WindowGrid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_CHECK_FAILED = 3

# Smallest legal four-stage model; finite differences over every parameter
# stay in CLI-friendly time only at this size.
GRADCHECK_CONFIG = ModelConfig(base_channels=4, depths=(1, 1, 1, 1), heads=2,
                               window=(4, 4), expansion=2, num_classes=2,
                               image_size=32)

_TRAIN_KEYS = {"lr", "weight_decay", "warmup_steps", "total_steps", "batch_size",
               "label_smoothing", "seed", "eval_every"}
_TASK_KEYS = {"train_size", "eval_size", "noise", "frequency", "task_seed"}
_MODEL_KEYS = {"model", "base_channels", "depths", "heads", "window", "expansion",
               "drop_path_rate", "rel_bias", "num_classes", "image_size"}


class _UsageError(Exception):
    pass


class _CheckFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception, not SystemExit(2)."""

    def error(self, message: str):
        raise _UsageError(message)


def _default_seed(fallback: int = 0) -> int:
    raw = os.environ.get("GSWIN_SEED")
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"GSWIN_SEED must be an integer, got {raw!r}") from None


def _emit(payload: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(payload, indent=2))
        return
    for key, value in payload.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                print(f"{key}.{sub}={v}")
        elif isinstance(value, list):
            print(f"{key}={','.join(str(v) for v in value)}")
        else:
            print(f"{key}={value}")


def _resolve_model(args) -> tuple[ModelConfig, str]:
    if args.model is not None:
        return PRESETS[args.model], args.model
    mapping = parse_config_file(args.config)
    unknown = set(mapping) - _MODEL_KEYS
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    return model_config_from_mapping(mapping), str(args.config)


# -- subcommands -----------------------------------------------------------------


def _cmd_count(args) -> int:
    config, label = _resolve_model(args)
    report = count_params(config)
    payload = {"model": label,
               "total_params": report.total_params,
               "params_human": format_count(report.total_params),
               "params": report.per_module,
               "convention": report.convention}
    _emit(payload, args.json)
    return EXIT_OK


def _cmd_flops(args) -> int:
    config, label = _resolve_model(args)
    report = count_flops(config, resolution=args.res, strategy=args.strategy)
    payload = {"model": label,
               "resolution": report.resolution,
               "strategy": report.strategy,
               "flops": report.flops,
               "flops_human": format_count(report.flops),
               "total_params": report.total_params,
               "convention": report.convention}
    _emit(payload, args.json)
    return EXIT_OK


def _block_gradcheck(seed: int) -> list[tuple[str, float]]:
    """One shifted block on an 8x8 map, every parameter plus the input."""
    rng = np.random.default_rng(seed)
    block = GswinBlock(dim=4, resolution=(8, 8), window=(4, 4), heads=2,
                       expansion=2, shifted=True, p_drop=0.0, rel_bias=True,
                       prefix="block", rng=rng, dtype=np.float64)
    for p in (block.sgu.w_win, block.sgu.b_win, block.sgu.rel_table):
        p.data += 0.3 * rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 8, 8, 4)), requires_grad=True)
    mask = rng.standard_normal((2, 8, 8, 4))

    def loss():
        return (block.forward(x, training=False, rng=None) * mask).sum()

    err = check_gradients(loss, [x] + block.parameters(), tol=1e-4, floor=1e-4)
    return [("block", err)]


def _model_gradcheck(seed: int) -> list[tuple[str, float]]:
    """Full four-stage model + smoothed cross-entropy, every parameter."""
    model = GswinModel(GRADCHECK_CONFIG, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        if p.name.endswith((".w_win", ".b_win", ".rel_table")):
            p.data += 0.3 * rng.standard_normal(p.shape)
    images = rng.standard_normal((2, 32, 32, 3))
    labels = np.array([0, 1])

    def loss():
        return cross_entropy(model.forward(Tensor(images)), labels, smoothing=0.1)

    err = check_gradients(loss, model.parameters(), tol=1e-4, floor=1e-4)
    return [("model", err)]


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    runners = {"ops": lambda: op_gradcheck_suite(seed=seed),
               "block": lambda: _block_gradcheck(seed),
               "model": lambda: _model_gradcheck(seed)}
    try:
        results = runners[args.scope]()
    except AssertionError as exc:
        raise _CheckFailure(f"gradcheck scope={args.scope}: {exc}") from None
    payload = {"scope": args.scope, "seed": seed, "checks": len(results),
               "errors": {name: f"{err:.3e}" for name, err in results},
               "worst_rel_err": f"{max(err for _, err in results):.3e}",
               "status": "ok"}
    _emit(payload, args.json)
    return EXIT_OK


def _equiv_case(rng: np.random.Generator, image: tuple[int, int], window: tuple[int, int],
                heads: int, shifted: bool) -> float:
    gate = heads * int(rng.integers(1, 4))
    params = init_sgu_params(window, heads, gate, rel_bias=True, prefix="equiv")
    for p in (params.w_win, params.b_win, params.rel_table):
        p.data[...] = rng.standard_normal(p.shape)
    offset = (window[0] // 2, window[1] // 2) if shifted else (0, 0)
    grid = WindowGrid(image, window, offset=offset)
    B = int(rng.integers(1, 3))
    x = Tensor(rng.standard_normal((B, image[0], image[1], 2 * gate)))
    fast = multi_head_window_sgu(x, params, grid)
    slow = zero_padding_shift_oracle(x, params, grid)
    return float(np.max(np.abs(fast.data - slow)))


def _cmd_equiv(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.seeds < 1:
        raise ValueError(f"--seeds must be >= 1, got {args.seeds}")
    window = (7, 7)
    fixed = [((14, 14), True), ((21, 28), True), ((7, 7), True)]
    cases: list[dict] = []
    worst = 0.0
    for i in range(args.seeds):
        rng = np.random.default_rng(seed + i)
        shapes = list(fixed)
        shapes.append(((int(rng.integers(7, 36)), int(rng.integers(7, 36))), True))
        shapes.append(((int(rng.integers(7, 36)), int(rng.integers(7, 36))), False))
        for image, shifted in shapes:
            heads = int(rng.choice([1, 2, 3]))
            diff = _equiv_case(rng, image, window, heads, shifted)
            worst = max(worst, diff)
            cases.append({"image": f"{image[0]}x{image[1]}", "shifted": shifted,
                          "heads": heads, "seed": seed + i, "max_abs_diff": diff})
    tol = 1e-12
    payload = {"seeds": args.seeds, "cases": len(cases), "tolerance": tol,
               "max_abs_diff": f"{worst:.3e}",
               "status": "ok" if worst < tol else "FAILED"}
    if args.json:
        payload["case_diffs"] = [dict(c, max_abs_diff=f"{c['max_abs_diff']:.3e}")
                                 for c in cases]
        print(json.dumps(payload, indent=2))
    else:
        for c in cases:
            print(f"case image={c['image']} shifted={c['shifted']} heads={c['heads']} "
                  f"seed={c['seed']} max_abs_diff={c['max_abs_diff']:.3e}")
        for key in ("seeds", "cases", "tolerance", "max_abs_diff", "status"):
            print(f"{key}={payload[key]}")
    if worst >= tol:
        raise _CheckFailure(f"padding-free vs zero-padding max diff {worst:.3e} >= {tol}")
    return EXIT_OK


def _split_train_mapping(mapping: dict[str, str]) -> tuple[dict, dict, dict]:
    unknown = set(mapping) - _MODEL_KEYS - _TRAIN_KEYS - _TASK_KEYS
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    model_kv = {k: v for k, v in mapping.items() if k in _MODEL_KEYS}
    train_kv = {k: v for k, v in mapping.items() if k in _TRAIN_KEYS}
    task_kv = {k: v for k, v in mapping.items() if k in _TASK_KEYS}
    return model_kv, train_kv, task_kv


def _cmd_train(args) -> int:
    mapping = parse_config_file(args.config)
    model_kv, train_kv, task_kv = _split_train_mapping(mapping)
    model_config = model_config_from_mapping(model_kv)

    tc_fields = {}
    for key in ("warmup_steps", "total_steps", "batch_size", "eval_every", "seed"):
        if key in train_kv:
            tc_fields[key] = int(train_kv[key])
    for key in ("lr", "weight_decay", "label_smoothing"):
        if key in train_kv:
            tc_fields[key] = float(train_kv[key])
    tc_fields.setdefault("seed", _default_seed())
    train_config = TrainConfig(**tc_fields)

    task_fields = {"classes": model_config.num_classes,
                   "image_size": model_config.image_size,
                   "seed": int(task_kv.get("task_seed", 0)),
                   "train_size": int(task_kv.get("train_size", 512)),
                   "eval_size": int(task_kv.get("eval_size", 256)),
                   "noise": float(task_kv.get("noise", 0.25)),
                   "frequency": float(task_kv.get("frequency", 4.0))}
    task = SyntheticTask(**task_fields)

    model = GswinModel(model_config, seed=train_config.seed)
    if not args.json:
        print(f"params={model.num_params()}")

    def report(step: int, lr: float, loss: float, acc: float) -> None:
        if not args.json:
            print(f"step={step} lr={lr:.3e} train_loss={loss:.4f} eval_acc={acc:.4f}")

    history = train(model, task, train_config, out_dir=args.out, on_eval=report)
    early = history.losses[:10]
    payload = {"steps": train_config.total_steps,
               "params": model.num_params(),
               "early_loss_mean": f"{float(np.mean(early)):.6f}",
               "final_loss": f"{history.losses[-1]:.6f}",
               "final_eval_acc": f"{history.final_eval_acc:.4f}",
               "out_dir": str(args.out)}
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        for key in ("early_loss_mean", "final_loss", "final_eval_acc", "out_dir"):
            print(f"{key}={payload[key]}")
    return EXIT_OK


def _cmd_export_weights(args) -> int:
    model = model_from_checkpoint(args.ckpt, image_size=args.res)
    prefix = args.out or f"weights_s{args.stage}_l{args.layer}_h{args.head}"
    csv_path, pgm_path = export_weight_maps(model, args.stage, args.layer,
                                            args.head, prefix)
    payload = {"stage": args.stage, "layer": args.layer, "head": args.head,
               "csv": str(csv_path), "pgm": str(pgm_path)}
    _emit(payload, args.json)
    return EXIT_OK


def _cmd_presets(args) -> int:
    if args.json:
        doc = {}
        for name, cfg in PRESETS.items():
            doc[name] = {"base_channels": cfg.base_channels,
                         "depths": list(cfg.depths),
                         "heads": cfg.heads,
                         "window": list(cfg.window),
                         "expansion": cfg.expansion,
                         "drop_path": DROP_PATH_RATES[name],
                         "params": count_params(cfg).total_params}
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    for name, cfg in PRESETS.items():
        depths = ",".join(str(d) for d in cfg.depths)
        params = format_count(count_params(cfg).total_params)
        print(f"{name}: C={cfg.base_channels} depths={depths} heads={cfg.heads} "
              f"window={cfg.window[0]}x{cfg.window[1]} params={params} "
              f"drop_path={cfg.drop_path_rate}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gswin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--json", action="store_true", help="emit a JSON document")
        p.set_defaults(func=func)
        return p

    def add_model_source(p: argparse.ArgumentParser) -> None:
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--model", choices=sorted(PRESETS), help="preset name")
        group.add_argument("--config", help="model config file (key = value lines)")

    p = add("count", _cmd_count, "parameter totals")
    add_model_source(p)

    p = add("flops", _cmd_flops, "forward-pass cost")
    add_model_source(p)
    p.add_argument("--res", type=int, default=224, help="square input resolution")
    p.add_argument("--strategy", choices=STRATEGIES, default="padding-free")

    p = add("gradcheck", _cmd_gradcheck, "finite-difference verification")
    p.add_argument("--scope", choices=("ops", "block", "model"), default="ops")
    p.add_argument("--seed", type=int, default=None)

    p = add("equiv", _cmd_equiv, "compare shifted gating against the padded oracle")
    p.add_argument("--seeds", type=int, default=10, help="random case batches")
    p.add_argument("--seed", type=int, default=None, help="base seed")

    p = add("train", _cmd_train, "run the training harness")
    p.add_argument("--config", required=True, help="model+train config file")
    p.add_argument("--out", default="gswin_run", help="artifact directory")

    p = add("export-weights", _cmd_export_weights, "write mixing-weight maps")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--res", type=int, default=224,
                   help="input resolution the checkpoint was built for")
    p.add_argument("--out", default=None, help="output path prefix")

    add("presets", _cmd_presets, "list built-in configurations")
    return parser


def run(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except RuntimeError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entry() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
