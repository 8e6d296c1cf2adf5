"""End-to-end experiment driver: embed, verify, attack, report emission."""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np

from . import attacks, reports, schemes, verify, zoo
from .config import AttackSpec, ExperimentConfig, save_config
from .data import load_dataset
from .nets import WeightLayerKey, extract_features, save_weights
from .schemes import (BitsMessage, HidingConfig, ImageMessage,
                      extract_message, save_key, save_message)


def make_message(cfg: ExperimentConfig):
    rng = np.random.default_rng(np.random.SeedSequence([0x3E55, cfg.message_seed]))
    if cfg.message_kind == "bits":
        return BitsMessage.random(cfg.message_length, rng)
    if cfg.message_kind == "image":
        return ImageMessage.random(cfg.image_width, cfg.image_height, rng)
    raise ValueError(f"unknown message kind {cfg.message_kind!r}")


def get_dataset(cfg: ExperimentConfig):
    return load_dataset(cfg.dataset, cfg.data_path, seed=0)


def ensure_zoo(cfg: ExperimentConfig, dataset, workers=None) -> zoo.ZooManifest:
    zdir = cfg.resolved_zoo()
    if (zdir / "manifest.json").exists():
        return zoo.load_manifest(zdir)
    return zoo.build_zoo(dataset, zdir, cfg.zoo_count, epochs=cfg.zoo_epochs,
                         batch_size=cfg.batch, lr=cfg.lr, workers=workers)


def resolve_target_accuracy(cfg: ExperimentConfig, manifest) -> float:
    if cfg.target_accuracy is not None:
        return cfg.target_accuracy
    mean_acc = float(np.mean([e.accuracy for e in manifest.entries]))
    return mean_acc - 0.01


def hiding_config(cfg: ExperimentConfig, pool) -> HidingConfig:
    return HidingConfig(lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                        clip_limit=cfg.clip, critic_mode=cfg.critic,
                        nonwm_pool=pool)


def run_embed_stage(cfg: ExperimentConfig, dataset, out: Path, workers=None):
    message = make_message(cfg)
    common = dict(seed=cfg.seed, epochs=cfg.epochs, layer_index=cfg.layer,
                  batch_size=cfg.batch, lr=cfg.lr, eps_loss=cfg.eps_loss,
                  decay=cfg.weight_decay)
    manifest = None
    if cfg.scheme == "riga":
        manifest = ensure_zoo(cfg, dataset, workers)
        target = resolve_target_accuracy(cfg, manifest)
        pool = zoo.zoo_pool(manifest, WeightLayerKey(cfg.layer))
        result = schemes.riga_embed(dataset, message, hiding_config(cfg, pool),
                                    hiding_on=cfg.hiding,
                                    target_accuracy=target, **common)
    elif cfg.scheme == "uchida":
        result = schemes.uchida_embed(dataset, message, lam=cfg.lambda1,
                                      target_accuracy=cfg.target_accuracy or 0.95,
                                      **common)
    elif cfg.scheme == "deepsigns":
        result = schemes.deepsigns_embed(dataset, message, lam=cfg.lambda1,
                                         target_accuracy=cfg.target_accuracy or 0.95,
                                         **common)
    else:
        raise ValueError(f"unknown scheme {cfg.scheme!r}")
    edir = out / "embed"
    edir.mkdir(parents=True, exist_ok=True)
    save_weights(edir / "model.bin", result.model, cfg.seed)
    save_key(edir / "key.bin", result.key)
    save_message(edir / "message.txt", message)
    reports.write_embed_curves(result, edir)
    (edir / "result.json").write_text(json.dumps({
        "scheme": result.scheme, "seed": result.seed,
        "epochs_run": result.epochs_run, "converged": result.converged,
        "final_accuracy": result.final_accuracy,
        "final_embedding_loss": result.final_embedding_loss,
        "final_ber": result.final_ber,
    }, indent=2, sort_keys=True) + "\n")
    return result, message, manifest


def run_verify_stage(cfg: ExperimentConfig, dataset, result, message, out: Path,
                     workers=None):
    vdir = out / "verify"
    vdir.mkdir(parents=True, exist_ok=True)
    verdicts = []
    manifest = ensure_zoo(cfg, dataset, workers)
    pool = zoo.zoo_pool(manifest, result.key.feature_key)
    bers = verify.nontrivial_ownership(result.key, message, list(pool.raw))
    verdicts.append(verify.write_verdict(
        vdir / "verdict_nontrivial_ownership.json", "nontrivial-ownership",
        "mean BER on foreign models", [0.35, 0.65], float(bers.mean()),
        0.35 <= bers.mean() <= 0.65))
    soft = extract_message(result.model, result.key)
    loss = schemes.embedding_loss(soft, message)
    verdicts.append(verify.write_verdict(
        vdir / "verdict_embedding_loss.json", "embedding-recoverability",
        "final embedding loss", cfg.eps_loss, loss, loss < max(cfg.eps_loss, 0.1)))
    if isinstance(message, BitsMessage):
        b = schemes.ber(soft, message)
        verdicts.append(verify.write_verdict(
            vdir / "verdict_ber.json", "message-recovery", "BER", 0.0, b, b == 0.0))
    return verdicts


def _attack_common(cfg, spec):  # shared option parsing
    return int(spec.options.get("seed", cfg.seed))


def run_attack_stage(cfg: ExperimentConfig, dataset, result, message, out: Path,
                     workers=None):
    adir = out / "attacks"
    adir.mkdir(parents=True, exist_ok=True)
    written = []
    pool = None
    for spec in cfg.attacks:
        seed = _attack_common(cfg, spec)
        if spec.kind == "finetune":
            ft = attacks.FineTuneConfig(
                mode=spec.options.get("mode", "ftal"),
                schedule=spec.options.get("schedule", "fixed"),
                lr=float(spec.options.get("lr", cfg.lr)),
                epochs=int(spec.options.get("epochs", 100)))
            rep = attacks.finetune(result.model, result.key, message, ft,
                                   dataset, seed)
            written.append(reports.write_attack_report(rep, adir))
        elif spec.kind == "overwrite":
            ow = attacks.OverwriteConfig(
                scheme=spec.options.get("scheme", cfg.scheme),
                epochs=int(spec.options.get("epochs", 50)),
                message_length=int(spec.options.get("length", cfg.message_length)),
                lam=float(spec.options.get("lambda", cfg.lambda1)))
            if pool is None:
                manifest = ensure_zoo(cfg, dataset, workers)
                pool = zoo.zoo_pool(manifest, WeightLayerKey(cfg.layer))
            rep = attacks.overwrite(result.model, result.key, message, ow,
                                    dataset, pool, seed)
            written.append(reports.write_attack_report(rep, adir))
        elif spec.kind == "prune":
            ratios = [float(r) for r in
                      spec.options.get("ratios", "0.25,0.5,0.75,0.9").split(",")]
            order = spec.options.get("order", "ascending")
            entries = []
            for ratio in ratios:
                rep = attacks.prune(result.model, result.key, message, ratio,
                                    order, dataset, seed)
                row = rep.rows[0]
                entries.append((ratio, order, row["accuracy"], row["ber"],
                                row["embedding_loss"]))
                written.append(reports.write_attack_report(rep, adir))
            reports.write_prune_curve(entries, adir, f"prune_curve_{order}")
        elif spec.kind == "fineprune":
            fp = attacks.FinePruneConfig(
                prune_fraction=(float(spec.options["fraction"])
                                if "fraction" in spec.options else None),
                finetune=attacks.FineTuneConfig(
                    mode=spec.options.get("mode", "ftal"),
                    schedule=spec.options.get("schedule", "fixed"),
                    lr=float(spec.options.get("lr", cfg.lr)),
                    epochs=int(spec.options.get("epochs", 100))))
            rep = attacks.fine_prune(result.model, result.key, message, fp,
                                     dataset, seed)
            written.append(reports.write_attack_report(rep, adir))
        elif spec.kind == "property-inference":
            pi = attacks.PropertyInferenceConfig(
                n_train=int(spec.options.get("train", 64)),
                n_test=int(spec.options.get("test", 16)),
                detector_epochs=int(spec.options.get("detector_epochs", 40)))
            if pool is None:
                manifest = ensure_zoo(cfg, dataset, workers)
                pool = zoo.zoo_pool(manifest, WeightLayerKey(cfg.layer))
            res = attacks.property_inference(
                dataset, cfg.scheme, cfg.hiding, pi, pool, message, seed=seed,
                workers=workers, epochs=cfg.epochs, eps_loss=cfg.eps_loss,
                target_accuracy=cfg.target_accuracy or 0.95,
                decay=cfg.weight_decay, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                clip_limit=cfg.clip, critic_mode=cfg.critic)
            tag = f"{cfg.scheme}_{'hide' if cfg.hiding else 'nohide'}"
            reports.write_detection_curve(res.accuracy_curve, adir,
                                          f"detection_curve_{tag}")
            res.corpus.save(adir / f"corpus_{tag}.npz")
            written.append({"detection_final": res.final_accuracy})
        else:
            raise ValueError(f"unknown attack kind {spec.kind!r}")
    return written


def run_report_stage(out: Path):
    """Aggregate persisted run artifacts into plot-data CSV files."""
    pdir = out / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    emitted = []
    for cand in sorted((out / "attacks").glob("detection_curve_*.csv")) if (out / "attacks").exists() else []:
        emitted.append(shutil.copy(cand, pdir / cand.name))
    if (out / "attacks").exists():
        for cand in sorted((out / "attacks").glob("prune_curve_*.csv")):
            emitted.append(shutil.copy(cand, pdir / cand.name))
        for kind, col in (("overwrite", "embedding_loss"), ("finetune", "ber")):
            for csv_file in sorted((out / "attacks").glob(f"attack_*_{kind}*.csv")):
                emitted.append(shutil.copy(csv_file, pdir / csv_file.name))
    curves = out / "embed" / "embed_curves.csv"
    if curves.exists():
        emitted.append(shutil.copy(curves, pdir / "embed_curves.csv"))
    return [str(p) for p in emitted]


def run_experiment(cfg: ExperimentConfig, workers=None) -> dict:
    """Embed, verify, then attack per the config; every stage failure leaves
    partial outputs plus a machine-readable failure record."""
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    bundle = {"output": str(out)}
    stage = "setup"
    try:
        stage = "dataset"
        dataset = get_dataset(cfg)
        stage = "embed"
        result, message, _ = run_embed_stage(cfg, dataset, out, workers)
        bundle["embed"] = {"converged": result.converged,
                           "final_accuracy": result.final_accuracy,
                           "final_embedding_loss": result.final_embedding_loss,
                           "final_ber": result.final_ber}
        stage = "verify"
        verdicts = run_verify_stage(cfg, dataset, result, message, out, workers)
        bundle["verify"] = verdicts
        stage = "attacks"
        bundle["attacks"] = run_attack_stage(cfg, dataset, result, message,
                                             out, workers)
        stage = "report"
        bundle["plots"] = run_report_stage(out)
    except Exception as e:
        reports.write_failure_record(out, stage, e)
        raise
    (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True,
                                                default=str) + "\n")
    return bundle
