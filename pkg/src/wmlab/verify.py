"""Requirement-level verification: the covertness game, validity and
ownership experiments, and independent numeric oracles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import schemes
from .nets import extract_features
from .schemes import (EmbedResult, HidingConfig, ImageMessage, Message,
                      ber, embedding_loss, extract_message)


@dataclass
class GameOutcome:
    trials: int
    wins: int

    def __post_init__(self):
        if not 0 <= self.wins <= self.trials:
            raise ValueError(f"{self.wins} wins out of {self.trials} trials")

    @property
    def advantage(self) -> float:
        return self.wins / self.trials - 0.5


def covertness_game(embedder, detector_trainer, trials: int,
                    seed: int = 0) -> GameOutcome:
    """Distinguishing game against fresh models.

    Per trial a fair coin picks a fresh baseline (b=0) or fresh watermarked
    model (b=1); `embedder(b, trial)` returns that model's features, and the
    detector (trained beforehand on disjoint models) guesses b.
    """
    if trials < 20:
        raise ValueError(f"need at least 20 trials, got {trials}")
    rng = np.random.default_rng(np.random.SeedSequence([0x6A3E, seed]))
    guess = detector_trainer()
    wins = 0
    for trial in range(trials):
        b = int(rng.integers(2))
        features = embedder(b, trial)
        if int(guess(features)) == b:
            wins += 1
    return GameOutcome(trials, wins)


def validity_experiment(dataset, message: ImageMessage, cfg: HidingConfig,
                        seed_a: int, seed_b: int, **embed_kw):
    """Two parties embed the same message with identical settings, differing
    only by seed; returns (own-model loss, cross-model loss) for party A's
    extractor."""
    res_a = schemes.riga_embed(dataset, message, cfg, seed=seed_a, **embed_kw)
    res_b = schemes.riga_embed(dataset, message, cfg, seed=seed_b, **embed_kw)
    own = embedding_loss(extract_message(res_a.model, res_a.key), message)
    cross = embedding_loss(extract_message(res_b.model, res_a.key), message)
    return own, cross


def nontrivial_ownership(key, message: Message, foreign_features,
                         min_models: int = 20) -> np.ndarray:
    """BER of the fixed key against its true message on foreign models.

    `foreign_features` must exclude the key's own watermarked model."""
    feats = list(foreign_features)
    if len(feats) < min_models:
        raise ValueError(f"need at least {min_models} foreign models, got {len(feats)}")
    return np.array([ber(schemes.extract_from_features(q, key), message)
                     for q in feats])


def emd_oracle_1d(a, b) -> float:
    """Exact 1-D earth-mover distance between equal-size empirical samples:
    the mean absolute difference of the sorted values."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


def write_verdict(path, requirement: str, metric: str, threshold, observed,
                  passed: bool) -> dict:
    """One JSON verdict file per verified requirement."""
    verdict = {"requirement": requirement, "metric": metric,
               "threshold": threshold, "observed": observed,
               "pass": bool(passed)}
    Path(path).write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    return verdict
