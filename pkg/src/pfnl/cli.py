"""Command-line interface.

Commands: ``synth`` (build a synthetic bank pair), ``train``, ``eval``,
``noise-sweep``, ``inspect``. Banks travel as a path prefix expanding to
``<prefix>.visual.ebnk`` / ``<prefix>.textual.ebnk``.

Exit codes: 0 success, 2 usage or invalid request, 3 I/O or file format,
4 numerical failure. Every command emits a run manifest (JSON file next to
its outputs, or on stdout for commands without an output path). ``--workers``
defaults to the PFNL_WORKERS environment variable, then 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib

from . import __version__
from .bank import ClassGallery, generate_synthetic, load_bank, save_bank
from .config import TrainConfig
from .errors import (BankDataError, BankFormatError, CheckpointFormatError, ConfigError,
                     DegenerateInputError, MiningError, NumericalError, PfnlError,
                     SamplingError)
from .trainer import (Checkpoint, evaluate, load_checkpoint, noise_sweep, save_checkpoint,
                      train, write_metrics_csv, write_sweep_csv)

# TrainConfig fields exposed as train flags; dashes map to underscores.
_TRAIN_FLAG_FIELDS = [
    "episodes", "way", "shot", "query", "seed", "noise_rate", "lr_text", "lr_vision",
    "beta1", "beta2", "adam_eps", "weight_decay", "lr_schedule", "reweight",
    "reweight_rounds", "lambda_fuse", "lambda_infer", "tau_temp", "tau_margin",
    "tau_calib", "gamma", "negatives", "styles", "attn_layers", "hidden",
    "activation", "hinge_mode", "negative_mode", "reg_scope",
]


def _crc_of(path) -> str:
    # bank and checkpoint files end with a stored CRC32 of their payload,
    # which makes the whole-file CRC a format constant; hash the payload
    # only so the manifest value actually identifies the content
    skip = 4 if str(path).endswith((".ebnk", ".ckpt")) else 0
    remaining = os.path.getsize(path) - skip
    crc = 0
    with open(path, "rb") as fh:
        while remaining > 0:
            chunk = fh.read(min(1 << 20, remaining))
            if not chunk:
                break
            remaining -= len(chunk)
            crc = zlib.crc32(chunk, crc)
    return f"{crc & 0xFFFFFFFF:#010x}"


def _manifest(command: str, config: dict, inputs: list, outputs: list,
              started: float) -> dict:
    return {
        "tool": "pfnl",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _crc_of(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.monotonic() - started, 3),
    }


def _write_manifest(manifest: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_as_dict(config: TrainConfig) -> dict:
    return dict(line.split("=", 1) for line in config.to_text().splitlines())


def _bank_paths(prefix: str) -> tuple[str, str]:
    return f"{prefix}.visual.ebnk", f"{prefix}.textual.ebnk"


def _load_bank_pair(prefix: str):
    vis_path, txt_path = _bank_paths(prefix)
    return load_bank(vis_path), load_bank(txt_path)


def _resolve_workers(value) -> int:
    if value is None:
        value = os.environ.get("PFNL_WORKERS", "1")
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(f"workers must be an integer, got {value!r}") from None
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    return workers


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.monotonic()
    try:
        sep = float(args.sep)
    except ValueError:
        raise ConfigError(f"--sep must be a number or 'inf', got {args.sep!r}") from None
    visual, textual = generate_synthetic(args.classes, args.per_class, args.dim,
                                         sep, args.seed, args.text_noise)
    vis_path, txt_path = _bank_paths(args.out)
    save_bank(visual, vis_path)
    save_bank(textual, txt_path)
    config = {"classes": args.classes, "per_class": args.per_class, "dim": args.dim,
              "sep": sep, "text_noise": args.text_noise, "seed": args.seed}
    manifest_path = f"{args.out}.manifest.json"
    _write_manifest(_manifest("synth", config, [],
                              [vis_path, txt_path, manifest_path], started),
                    manifest_path)
    print(f"wrote {vis_path} ({visual.n_records} records) and "
          f"{txt_path} ({textual.n_records} records), dim {visual.dim}")
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {name: getattr(args, name) for name in _TRAIN_FLAG_FIELDS
                 if getattr(args, name) is not None}
    config = config.merged(overrides).validate()
    visual, textual = _load_bank_pair(args.bank)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, rows = train(visual, textual, config, resume=resume)

    ckpt_path = f"{args.out}.ckpt"
    csv_path = f"{args.out}.metrics.csv"
    manifest_path = f"{args.out}.manifest.json"
    save_checkpoint(ckpt, ckpt_path)
    write_metrics_csv(rows, csv_path)
    inputs = list(_bank_paths(args.bank))
    if args.config:
        inputs.append(args.config)
    if args.resume:
        inputs.append(args.resume)
    _write_manifest(_manifest("train", _config_as_dict(config), inputs,
                              [ckpt_path, csv_path, manifest_path], started),
                    manifest_path)
    if rows:
        tail = rows[-min(50, len(rows)):]
        mean_loss = sum(r.loss_total for r in tail) / len(tail)
        mean_acc = sum(r.query_acc for r in tail) / len(tail)
        print(f"trained {len(rows)} episodes; trailing-{len(tail)} "
              f"loss {mean_loss:.4f} acc {mean_acc:.4f}")
    print(f"wrote {ckpt_path} and {csv_path}")
    return 0


def _eval_args(args, ckpt: Checkpoint):
    config = ckpt.config
    return dict(
        episodes=args.episodes,
        way=config.way,
        shot=args.shot if args.shot is not None else config.shot,
        query=args.query if args.query is not None else config.query,
        seed=args.seed,
        rounds=config.reweight_rounds,
        scorer=args.scorer,
        workers=_resolve_workers(args.workers),
    )


def cmd_eval(args) -> int:
    started = time.monotonic()
    ckpt = load_checkpoint(args.checkpoint)
    visual, textual = _load_bank_pair(args.bank)
    kw = _eval_args(args, ckpt)
    reweight = ckpt.config.reweight if args.reweight is None else args.reweight == "on"
    result = evaluate(visual, textual, ckpt.params, ckpt.config.hyperparams(),
                      noise_rate=args.noise_rate, reweight=reweight, **kw)
    report = {"episodes": result.episodes, "acc_mean": result.acc_mean,
              "acc_se": result.acc_se, "acc_ci95": result.acc_ci95,
              "noise_rate": args.noise_rate, "reweight": "on" if reweight else "off",
              "scorer": args.scorer}
    inputs = [args.checkpoint, *_bank_paths(args.bank)]
    config = {**report, "seed": args.seed}
    del config["acc_mean"], config["acc_se"], config["acc_ci95"]
    if args.out:
        json_path = f"{args.out}.eval.json"
        manifest_path = f"{args.out}.manifest.json"
        with open(json_path, "w", newline="") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(_manifest("eval", config, inputs, [json_path, manifest_path], started),
                        manifest_path)
        print(f"wrote {json_path}")
    else:
        report["manifest"] = _manifest("eval", config, inputs, [], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_noise_sweep(args) -> int:
    started = time.monotonic()
    ckpt = load_checkpoint(args.checkpoint)
    visual, textual = _load_bank_pair(args.bank)
    kw = _eval_args(args, ckpt)
    rows = noise_sweep(visual, textual, ckpt.params, ckpt.config.hyperparams(), **kw)
    csv_path = f"{args.out}.sweep.csv"
    manifest_path = f"{args.out}.manifest.json"
    write_sweep_csv(rows, csv_path)
    config = {"episodes": args.episodes, "seed": args.seed, "scorer": args.scorer,
              "shot": kw["shot"], "query": kw["query"]}
    _write_manifest(_manifest("noise-sweep", config,
                              [args.checkpoint, *_bank_paths(args.bank)],
                              [csv_path, manifest_path], started),
                    manifest_path)
    print(f"wrote {csv_path}")
    return 0


def cmd_inspect(args) -> int:
    started = time.monotonic()
    bank = load_bank(args.bank_file)
    counts = {}
    for ci in bank.class_index:
        counts[int(ci)] = counts.get(int(ci), 0) + 1
    norms = (bank.vectors ** 2).sum(axis=1) ** 0.5
    report = {
        "path": str(args.bank_file),
        "modality": bank.modality,
        "dim": bank.dim,
        "classes": bank.n_classes,
        "records": bank.n_records,
        "records_per_class_min": min(counts.values()),
        "records_per_class_max": max(counts.values()),
        "norm_min": float(norms.min()),
        "norm_max": float(norms.max()),
        "checksum": "ok",
        "class_names": bank.classes[:16],
    }
    if args.check_pair:
        other = load_bank(args.check_pair)
        report["class_table_match"] = other.classes == bank.classes
        if not report["class_table_match"]:
            print(json.dumps(report, indent=2, sort_keys=True))
            raise BankDataError("class tables differ between the two banks")
    # no output file: the manifest rides along on stdout
    report["manifest"] = _manifest("inspect", {"bank_file": str(args.bank_file)},
                                   [args.bank_file], [], started)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfnl",
        description="Few-shot adaptation over frozen embedding banks.")
    parser.add_argument("--version", action="version", version=f"pfnl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic visual/textual bank pair")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True, dest="per_class")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=str, required=True,
                   help="separation factor; higher is cleaner, inf is exact means")
    p.add_argument("--text-noise", type=float, default=1.0, dest="text_noise")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="episodic training on a bank pair")
    p.add_argument("--bank", required=True, help="bank path prefix")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--workers", default=None,
                   help="accepted for interface parity; training is serial")
    for name in _TRAIN_FLAG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)
    p.set_defaults(func=cmd_train)

    def eval_like(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--bank", required=True, help="bank path prefix")
        p.add_argument("--episodes", type=int, default=200)
        p.add_argument("--shot", type=int, default=None)
        p.add_argument("--query", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--scorer", choices=("fused", "modal"), default="fused")
        p.add_argument("--workers", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh episodes")
    eval_like(p)
    p.add_argument("--noise-rate", type=float, default=0.0, dest="noise_rate")
    p.add_argument("--reweight", choices=("on", "off"), default=None,
                   help="override the checkpoint's reweighting setting")
    p.add_argument("--out", help="optional output path prefix")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("noise-sweep",
                       help="paired reweighting on/off accuracy over the corruption grid")
    eval_like(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("inspect", help="validate and summarize a bank file")
    p.add_argument("bank_file")
    p.add_argument("--check-pair", dest="check_pair",
                   help="second bank that must share the class table")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SamplingError, MiningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (BankFormatError, BankDataError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except PfnlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
