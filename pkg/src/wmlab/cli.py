"""Command-line driver: one verb per pipeline stage."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiment, schemes, zoo
from .config import load_config
from .nets import MlpClassifier, load_weights
from .schemes import BitsMessage, load_key, load_message, save_message


def _load_cfg(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_zoo(args):
    cfg = _load_cfg(args)
    dataset = experiment.get_dataset(cfg)
    manifest = zoo.build_zoo(dataset, cfg.resolved_zoo(), cfg.zoo_count,
                             epochs=cfg.zoo_epochs, batch_size=cfg.batch,
                             lr=cfg.lr, workers=args.workers)
    accs = [e.accuracy for e in manifest.entries]
    print(f"zoo: {len(manifest.entries)} models in {manifest.directory} "
          f"(accuracy {min(accs):.4f}..{max(accs):.4f})")
    return 0


def cmd_embed(args):
    cfg = _load_cfg(args)
    dataset = experiment.get_dataset(cfg)
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    result, message, _ = experiment.run_embed_stage(cfg, dataset, out, args.workers)
    print(f"embed: scheme={result.scheme} epochs={result.epochs_run} "
          f"converged={result.converged} accuracy={result.final_accuracy:.4f} "
          f"embedding_loss={result.final_embedding_loss:.3e} ber={result.final_ber}")
    print(f"embed: artifacts in {out / 'embed'}")
    return 0


def cmd_extract(args):
    model, _ = load_weights(args.model, MlpClassifier)
    key = load_key(args.key)
    soft = schemes.extract_message(model, key)
    if args.out:
        bits = schemes.hard_bits(soft)
        save_message(args.out, BitsMessage(bits.astype(np.float64)))
    if args.message:
        message = load_message(args.message)
        loss = schemes.embedding_loss(soft, message)
        line = f"extract: embedding_loss={loss:.6g}"
        if isinstance(message, BitsMessage):
            line += f" ber={schemes.ber(soft, message):.4f}"
        print(line)
    else:
        print("extract: soft message "
              + " ".join(f"{v:.4f}" for v in soft[:16])
              + (" ..." if soft.size > 16 else ""))
    return 0


def cmd_attack(args):
    cfg = _load_cfg(args)
    dataset = experiment.get_dataset(cfg)
    out = cfg.resolved_output()
    edir = out / "embed"
    if not (edir / "model.bin").exists():
        print("attack: no embedded model found; run `wmlab embed` first",
              file=sys.stderr)
        return 2
    model, _ = load_weights(edir / "model.bin", MlpClassifier)
    key = load_key(edir / "key.bin")
    message = load_message(edir / "message.txt")
    result = schemes.EmbedResult(cfg.scheme, model, key, message, seed=cfg.seed)
    written = experiment.run_attack_stage(cfg, dataset, result, message, out,
                                          args.workers)
    print(f"attack: {len(written)} reports in {out / 'attacks'}")
    return 0


def cmd_verify(args):
    cfg = _load_cfg(args)
    dataset = experiment.get_dataset(cfg)
    out = cfg.resolved_output()
    edir = out / "embed"
    if not (edir / "model.bin").exists():
        print("verify: no embedded model found; run `wmlab embed` first",
              file=sys.stderr)
        return 2
    model, _ = load_weights(edir / "model.bin", MlpClassifier)
    key = load_key(edir / "key.bin")
    message = load_message(edir / "message.txt")
    result = schemes.EmbedResult(cfg.scheme, model, key, message, seed=cfg.seed)
    verdicts = experiment.run_verify_stage(cfg, dataset, result, message, out,
                                           args.workers)
    for v in verdicts:
        print(f"verify: {v['requirement']}: "
              f"{'PASS' if v['pass'] else 'FAIL'} ({v['metric']}={v['observed']})")
    return 0 if all(v["pass"] for v in verdicts) else 1


def cmd_report(args):
    cfg = _load_cfg(args)
    out = cfg.resolved_output()
    emitted = experiment.run_report_stage(out)
    print(f"report: {len(emitted)} plot-data files in {out / 'plots'}")
    return 0


def cmd_run(args):
    cfg = _load_cfg(args)
    bundle = experiment.run_experiment(cfg, workers=args.workers)
    print(json.dumps(bundle, indent=2, default=str))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="wmlab",
        description="White-box neural network watermarking lab")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="experiment config file (ini)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers for model generation")

    common(sub.add_parser("zoo", help="train the non-watermarked model zoo"))
    common(sub.add_parser("embed", help="embed a watermark per the config"))
    p = sub.add_parser("extract", help="extract a message from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--message", help="reference message file for BER/loss")
    p.add_argument("--out", help="write the decoded bit string here")
    p.add_argument("--seed", type=int, default=None)
    common(sub.add_parser("attack", help="run the configured attack list"))
    common(sub.add_parser("verify", help="run verification experiments"))
    common(sub.add_parser("report", help="re-derive plot-data CSV files"))
    common(sub.add_parser("run", help="full pipeline: embed, verify, attacks"))

    args = ap.parse_args(argv)
    handler = {"zoo": cmd_zoo, "embed": cmd_embed, "extract": cmd_extract,
               "attack": cmd_attack, "verify": cmd_verify,
               "report": cmd_report, "run": cmd_run}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
