"""Command-line pipeline: synth, train, eval, infer, gradcheck, attention-dump.

Configuration comes from an optional JSON file plus repeatable
`--set section.key=value` overrides applied on top; the effective config,
seed and tool version are echoed into every run directory so any result is
reproducible from the directory alone. Exit codes: 0 success, 2 config
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, frontend, synth
from .checkpoint import load_checkpoint
from .data import load_clips
from .inference import decode, dump_attention
from .model import ModelConfig, features_for_encoder, gct_forward, init_params, param_count
from .optim import finite_diff_check
from .training import Hyperparams, TrainingDiverged, compute_loss, evaluate, train


class ConfigError(ValueError):
    pass


PRESETS = {
    "toy": {"d_model": 64, "n_heads": 4, "d_ff": 128,
            "n_encoder_blocks": 2, "n_decoder_blocks": 2, "input_mode": "clip"},
    "paper-patches": {"d_model": 512, "n_heads": 8, "d_ff": 2048,
                      "n_encoder_blocks": 7, "n_decoder_blocks": 7, "input_mode": "patches"},
    "paper-clip": {"d_model": 512, "n_heads": 8, "d_ff": 2048,
                   "n_encoder_blocks": 4, "n_decoder_blocks": 4, "input_mode": "clip"},
}

MODEL_KEYS = {
    "input_mode", "n_encoder_blocks", "n_decoder_blocks", "d_model", "n_heads",
    "d_ff", "dropout", "max_len", "patch_time", "patch_freq", "n_mels",
    "max_enc_len", "use_pos_emb", "use_gcmlp", "dtype",
}
TRAIN_KEYS = {"lr", "momentum", "batch_size", "epochs", "val_fraction", "use_reverse"}


def _coerce(value: str):
    lowered = value.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def load_config(args) -> dict:
    config: dict = {"model": {}, "train": {}}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        for section in loaded:
            if section not in ("model", "train"):
                raise ConfigError(f"unknown config section '{section}'")
        config["model"].update(loaded.get("model", {}))
        config["train"].update(loaded.get("train", {}))
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})")
        config["model"].update(PRESETS[preset])
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        key, _, value = item.partition("=")
        section, _, name = key.partition(".")
        if section == "model" and name in MODEL_KEYS:
            config["model"][name] = _coerce(value)
        elif section == "train" and name in TRAIN_KEYS:
            config["train"][name] = _coerce(value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    for name in config["model"]:
        if name not in MODEL_KEYS:
            raise ConfigError(f"unknown config key 'model.{name}'")
    for name in config["train"]:
        if name not in TRAIN_KEYS:
            raise ConfigError(f"unknown config key 'train.{name}'")
    return config


def make_run_dir(out: str, command: str, seed: int, config: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(out) / f"{stamp}-{command}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = Path(out) / f"{stamp}-{command}-{suffix}"
    run_dir.mkdir(parents=True)
    (run_dir / "run.json").write_text(json.dumps({
        "command": command,
        "seed": seed,
        "version": __version__,
        "config": config,
    }, indent=2))
    return run_dir


def _model_config(config: dict, vocab_size: int, args) -> ModelConfig:
    fields = dict(config["model"])
    if getattr(args, "input_mode", None):
        fields["input_mode"] = args.input_mode
    if getattr(args, "no_pos_emb", False):
        fields["use_pos_emb"] = False
    if getattr(args, "no_gcmlp", False):
        fields["use_gcmlp"] = False
    if getattr(args, "max_len", None):
        fields["max_len"] = args.max_len
    try:
        return ModelConfig(vocab_size=vocab_size, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _hyperparams(config: dict, args) -> Hyperparams:
    fields = dict(config["train"])
    for key in ("lr", "momentum", "batch_size", "epochs", "val_fraction"):
        value = getattr(args, key, None)
        if value is not None:
            fields[key] = value
    if getattr(args, "transformer_baseline", False):
        fields["use_reverse"] = False
    try:
        return Hyperparams(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_synth(args) -> int:
    config = load_config(args)
    run_dir = make_run_dir(args.out, "synth", args.seed, config)
    manifest = synth.generate_dataset(
        n_clips=args.clips, n_classes=args.classes, max_events=args.max_events,
        seed=args.seed, out_dir=run_dir, total_frames=args.frames,
        noise_db=args.noise_db, min_gap=args.min_gap, emit_wav=args.wav,
    )
    print(f"wrote {args.clips} clips; manifest at {manifest}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    clips, vocab = load_clips(args.manifest)
    cfg = _model_config(config, vocab.size, args)
    hyper = _hyperparams(config, args)
    config["model"] = {k: v for k, v in cfg.to_dict().items() if k != "vocab_size"}
    config["train"] = hyper.to_dict()
    run_dir = make_run_dir(args.out, "train", args.seed, config)
    print(f"model parameters: {param_count(cfg)}")
    report = train(clips, vocab, cfg, hyper, seed=args.seed, out_dir=run_dir)
    last = report.epochs[-1].train.total if report.epochs else float("nan")
    print(f"trained {len(report.epochs)} epochs; final train total {last:.4f}")
    print(f"best checkpoint: {report.best_checkpoint}")
    return 0


def _load_for_eval(args):
    params, cfg, vocab, _ = load_checkpoint(args.checkpoint)
    clips, _ = load_clips(args.manifest, vocab)
    return params, cfg, vocab, clips


def cmd_eval(args) -> int:
    config = load_config(args)
    params, cfg, vocab, clips = _load_for_eval(args)
    run_dir = make_run_dir(args.out, "eval", args.seed, config)
    bundle, results = evaluate(params, cfg, vocab, clips, mode=args.mode,
                               alpha=args.alpha, jobs=args.jobs)
    (run_dir / "metrics.json").write_text(json.dumps(bundle, indent=2))
    _write_decodes(run_dir / "decodes.jsonl", clips, results, vocab)
    print(json.dumps(bundle, indent=2))
    return 0


def _write_decodes(path, clips, results, vocab) -> None:
    with open(path, "w") as fh:
        for clip, res in zip(clips, results):
            top5 = []
            for row in res.step_probs:
                order = np.lexsort((np.arange(row.size), -row))[:5]
                top5.append([[vocab.name(int(i)), float(row[i])] for i in order])
            fh.write(json.dumps({
                "clip": clip.path,
                "tokens": [vocab.name(t) for t in res.tokens],
                "truncated": res.truncated,
                "alpha": res.alpha,
                "per_step_top5": top5,
            }) + "\n")


def cmd_infer(args) -> int:
    config = load_config(args)
    params, cfg, vocab, clips = _load_for_eval(args)
    run_dir = make_run_dir(args.out, "infer", args.seed, config)
    results = [decode(c.features, params, cfg, mode=args.mode, alpha=args.alpha)
               for c in clips]
    _write_decodes(run_dir / "decodes.jsonl", clips, results, vocab)
    print(f"decoded {len(clips)} clips into {run_dir / 'decodes.jsonl'}")
    return 0


def cmd_gradcheck(args) -> int:
    config = load_config(args)
    run_dir = make_run_dir(args.out, "gradcheck", args.seed, config)
    fields = {"d_model": 8, "n_heads": 2, "d_ff": 16, "n_encoder_blocks": 1,
              "n_decoder_blocks": 1, "input_mode": "clip", "max_len": 4,
              "dropout": 0.0, "dtype": "float64"}
    fields.update(config["model"])
    cfg = _model_config({"model": fields, "train": {}}, vocab_size=6, args=args)
    rng = np.random.default_rng(args.seed)
    params = init_params(cfg, rng)
    features = rng.normal(size=(6, cfg.n_mels))
    label = [4, 5]
    from .data import encode_labels

    n_in, n_tgt, r_in, r_tgt = encode_labels(label, cfg.max_len)

    def loss():
        feats = features_for_encoder(features, cfg)
        p, p_rev, _ = gct_forward(feats, n_in, r_in, cfg, params)
        total, _ = compute_loss(p, p_rev, n_tgt, r_tgt)
        return total

    worst = finite_diff_check(loss, params, eps=1e-5)
    (run_dir / "gradcheck.json").write_text(json.dumps({"max_rel_err": worst}))
    print(f"worst relative gradient error: {worst:.3e}")
    if worst >= 1e-4:
        print("FAIL: gradient check exceeded 1e-4", file=sys.stderr)
        return 3
    return 0


def cmd_attention_dump(args) -> int:
    config = load_config(args)
    params, cfg, vocab, clips = _load_for_eval(args)
    run_dir = make_run_dir(args.out, "attention-dump", args.seed, config)
    clip = clips[args.index]
    result = decode(clip.features, params, cfg, mode=args.mode, alpha=args.alpha,
                    collect_attention=True)
    files = dump_attention(result, vocab, run_dir / "attention")
    print(f"decoded {clip.path} -> {[vocab.name(t) for t in result.tokens]}")
    print(f"wrote {len(files)} attention matrices under {run_dir / 'attention'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gct", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gct {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="runs", help="directory for run outputs")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)
    p.add_argument("--clips", type=int, default=50)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--max-events", type=int, default=4)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--noise-db", type=float, default=-30.0)
    p.add_argument("--min-gap", dest="min_gap", type=int, default=0,
                   help="minimum frames between consecutive onsets")
    p.add_argument("--wav", action="store_true", help="emit WAV audio instead of CSVs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--input-mode", choices=["patches", "clip"])
    p.add_argument("--no-pos-emb", action="store_true")
    p.add_argument("--no-gcmlp", action="store_true")
    p.add_argument("--transformer-baseline", action="store_true",
                   help="train the normal branch only")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a manifest and compute metrics")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["fbi", "normal", "reverse"], default="fbi")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="decode a manifest to JSON lines")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["fbi", "normal", "reverse"], default="fbi")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attention-dump", help="export decoder cross-attention CSVs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", type=int, default=0, help="clip index in the manifest")
    p.add_argument("--mode", choices=["fbi", "normal", "reverse"], default="fbi")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_attention_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
