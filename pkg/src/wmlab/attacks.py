"""Watermark removal and detection attacks.

Every removal attack clones the victim, optimizes without ever reading the
message extraction key, and checkpoints the watermark-layer features once
per epoch; BER and embedding loss are computed afterwards from those
snapshots, so reports are reproducible offline and the attacker/defender
information barrier holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from multiprocessing import Pool, cpu_count

import numpy as np

from . import schemes
from . import tensor as T
from .nets import (DetectorNet, ExtractorNet, MlpClassifier, WeightLayerKey,
                   extract_features, extract_features_t, sorted_features)
from .optim import AdamState, adam_step
from .schemes import (BitsMessage, ExtractionKey, Message, NonWmPool,
                      ber, embedding_loss, extract_from_features, random_like)
from .tensor import Tensor

BER_THRESHOLD = 0.15
LOSS_THRESHOLD = 0.1
MIN_POOL_PER_CLASS = 8


# ---------------------------------------------------------------------------
# configs and report
# ---------------------------------------------------------------------------

@dataclass
class FineTuneConfig:
    mode: str = "ftal"  # ftal | rtal
    schedule: str = "fixed"  # fixed | refit | doubling
    lr: float = schemes.DEFAULT_LR
    epochs: int = 100
    decay_rate: float = 0.9
    decay_every: int = 500  # steps
    double_every: int = 10  # epochs

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.mode not in ("ftal", "rtal"):
            raise ValueError(f"unknown fine-tune mode {self.mode!r}")
        if self.schedule not in ("fixed", "refit", "doubling"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int, epoch: int) -> float:
        """Learning rate for 0-based global step / epoch counters."""
        if self.schedule == "refit":
            return self.lr * self.decay_rate ** (step // self.decay_every)
        if self.schedule == "doubling":
            return self.lr * 2.0 ** (epoch // self.double_every)
        return self.lr


@dataclass
class OverwriteConfig:
    scheme: str = "riga"
    epochs: int = 50
    message_length: int = 64
    lam: float = schemes.DEFAULT_LAMBDA1


@dataclass
class PruneConfig:
    ratio: float
    order: str = "ascending"  # ascending: smallest magnitudes first

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"prune ratio must be in [0,1], got {self.ratio}")
        if self.order not in ("ascending", "descending"):
            raise ValueError(f"unknown prune order {self.order!r}")


@dataclass
class FinePruneConfig:
    prune_fraction: float | None = None  # None scans to the noticeable point
    accuracy_drop: float = 0.02
    scan_step: float = 0.05
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)


@dataclass
class PropertyInferenceConfig:
    n_train: int = 64  # models per class
    n_test: int = 16
    detector_epochs: int = 40
    detector_lr: float = 1e-3
    batch_size: int = 16
    augment: int = 8       # bootstrap resamples per model (1 = originals only)
    ensemble: int = 3      # independently seeded detectors, probs averaged
    val_models: int = 8    # per class, held out of training for epoch choice


@dataclass
class AttackReport:
    attack: str
    scheme: str
    seed: int
    epoch_cap: int
    rows: list[dict] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)
    final_model: MlpClassifier | None = None
    ber_threshold: float = BER_THRESHOLD
    loss_threshold: float = LOSS_THRESHOLD

    def add_row(self, step, lr, accuracy, features, key, message):
        soft = extract_from_features(features, key)
        row = {"step": step, "lr": lr, "accuracy": accuracy,
               "ber": ber(soft, message) if isinstance(message, BitsMessage) else None,
               "embedding_loss": embedding_loss(soft, message)}
        self.rows.append(row)
        self.snapshots.append(features)

    def crossing(self):
        """First row past either removal threshold, or None."""
        for row in self.rows:
            over_ber = row["ber"] is not None and row["ber"] > self.ber_threshold
            if over_ber or row["embedding_loss"] > self.loss_threshold:
                return row
        return None

    def summary(self) -> dict:
        cross = self.crossing()
        return {
            "attack": self.attack, "scheme": self.scheme, "seed": self.seed,
            "epoch_cap": self.epoch_cap,
            "ber_threshold": self.ber_threshold,
            "loss_threshold": self.loss_threshold,
            "crossing_step": None if cross is None else cross["step"],
            "crossing_accuracy": None if cross is None else cross["accuracy"],
            "final": self.rows[-1] if self.rows else None,
        }


def _report_rows(report: AttackReport, key, message, entries):
    """entries: (step, lr, accuracy, features) checkpoints, ordered by step."""
    for step, lr, acc, feats in entries:
        report.add_row(step, lr, acc, feats, key, message)
    return report


# ---------------------------------------------------------------------------
# fine-tuning (FTAL / RTAL, fixed / REFIT / doubling schedules)
# ---------------------------------------------------------------------------

def _reinit_output_layer(model: MlpClassifier, rng) -> None:
    fan_in = model.dims[-2]
    model.weights[-1].data[:] = rng.normal(0.0, 1.0 / np.sqrt(fan_in),
                                           size=model.weights[-1].data.shape)
    model.biases[-1].data[:] = 0.0


def _finetune_optimize(model, feature_key, cfg: FineTuneConfig, dataset, seed):
    """Task-only training; returns per-epoch (step, lr, accuracy, features)."""
    model = model.clone()
    rng = np.random.default_rng(np.random.SeedSequence([0xF7, seed]))
    if cfg.mode == "rtal" and cfg.epochs > 0:
        _reinit_output_layer(model, rng)
    task = schemes.design_loss(dataset)
    state = AdamState(lr=cfg.lr, beta1=schemes.DEFAULT_BETA1,
                      beta2=schemes.DEFAULT_BETA2)
    params = model.params()
    entries = [(0, cfg.lr_at(0, 0), model.accuracy(dataset.x_test, dataset.y_test),
                extract_features(model, feature_key))]
    step = 0
    for epoch in range(cfg.epochs):
        for idx in schemes.epoch_batches(task.n, schemes.DEFAULT_BATCH, rng):
            state.lr = cfg.lr_at(step, epoch)
            task.batch_loss(model, idx).backward()
            adam_step(params, state)
            step += 1
        entries.append((step, state.lr,
                        model.accuracy(dataset.x_test, dataset.y_test),
                        extract_features(model, feature_key)))
    return model, entries


def finetune(model: MlpClassifier, true_key: ExtractionKey, message: Message,
             cfg: FineTuneConfig, dataset, seed: int = 0) -> AttackReport:
    final, entries = _finetune_optimize(model, true_key.feature_key, cfg,
                                        dataset, seed)
    name = f"finetune-{cfg.mode}-{cfg.schedule}{cfg.lr:g}"
    report = AttackReport(name, true_key.scheme, seed, cfg.epochs)
    report.final_model = final
    return _report_rows(report, true_key, message, entries)


# ---------------------------------------------------------------------------
# overwriting
# ---------------------------------------------------------------------------

def _overwrite_optimize(model, feature_key, cfg: OverwriteConfig, dataset,
                        pool: NonWmPool | None, seed):
    """Embed a fresh watermark with a fresh key every epoch, as the attack
    prescribes; consumes only the model, the known feature key, and public
    training data."""
    model = model.clone()
    rng = np.random.default_rng(np.random.SeedSequence([0x0AA, seed]))
    task = schemes.design_loss(dataset)
    st_model = AdamState(lr=schemes.DEFAULT_LR, beta1=schemes.DEFAULT_BETA1,
                         beta2=schemes.DEFAULT_BETA2)
    params = model.params()
    flen = extract_features(model, feature_key).size
    t_new = cfg.message_length
    entries = [(0, schemes.DEFAULT_LR,
                model.accuracy(dataset.x_test, dataset.y_test),
                extract_features(model, feature_key))]
    step = 0
    for epoch in range(cfg.epochs):
        m_new = rng.integers(0, 2, t_new).astype(np.float64)
        if cfg.scheme == "riga":
            if pool is None or len(pool) == 0:
                raise ValueError("riga-style overwrite needs a model pool")
            ext = ExtractorNet.init([flen, *schemes.EXTRACTOR_HIDDEN, t_new],
                                    np.random.default_rng(
                                        np.random.SeedSequence([0x0AB, seed, epoch])))
            st_ext = AdamState(lr=schemes.DEFAULT_LR, beta1=schemes.DEFAULT_BETA1,
                               beta2=schemes.DEFAULT_BETA2)
            decoys = rng.integers(0, 2, size=(len(pool), t_new)).astype(np.float64)
        else:
            matrix = rng.normal(size=(t_new, flen))
        for idx in schemes.epoch_batches(task.n, schemes.DEFAULT_BATCH, rng):
            if cfg.scheme == "riga":
                q_now = extract_features(model, feature_key)
                j = int(rng.integers(len(pool)))
                pair = Tensor(np.stack([q_now, pool.raw[j]]))
                targets = np.stack([m_new, decoys[j]])
                T.multiply(T.binary_cross_entropy(ext.forward(pair), targets),
                           2.0).backward()
                adam_step(ext.params(), st_ext)
            t_loss = task.batch_loss(model, idx)
            qt = extract_features_t(model, feature_key)
            if cfg.scheme == "riga":
                soft = ext.forward(qt, train_params=False)
            else:
                soft = T.sigmoid(T.matmul(qt, Tensor(matrix.T)))
            w_loss = T.binary_cross_entropy(soft, m_new.reshape(1, -1))
            T.add(t_loss, T.multiply(w_loss, cfg.lam)).backward()
            adam_step(params, st_model)
            step += 1
        entries.append((step, schemes.DEFAULT_LR,
                        model.accuracy(dataset.x_test, dataset.y_test),
                        extract_features(model, feature_key)))
    return model, entries


def overwrite(model: MlpClassifier, true_key: ExtractionKey, message: Message,
              cfg: OverwriteConfig, dataset, pool: NonWmPool | None = None,
              seed: int = 0) -> AttackReport:
    final, entries = _overwrite_optimize(model, true_key.feature_key, cfg,
                                         dataset, pool, seed)
    name = f"overwrite-{cfg.scheme}-t{cfg.message_length}"
    report = AttackReport(name, true_key.scheme, seed, cfg.epochs)
    report.final_model = final
    return _report_rows(report, true_key, message, entries)


# ---------------------------------------------------------------------------
# magnitude pruning
# ---------------------------------------------------------------------------

def prune_weights(model: MlpClassifier, ratio: float, order: str = "ascending") -> MlpClassifier:
    """Zero exactly round(ratio * n) weights picked by absolute value.

    Biases are untouched; ties break toward the lower flat index. Ascending
    prunes the smallest magnitudes first, descending the largest.
    """
    cfg = PruneConfig(ratio, order)  # validates
    model = model.clone()
    flats = [w.data.reshape(-1) for w in model.weights]
    all_w = np.concatenate(flats)
    k = int(round(cfg.ratio * all_w.size))
    if k > 0:
        mags = np.abs(all_w)
        idx = np.argsort(mags if order == "ascending" else -mags, kind="stable")[:k]
        all_w[idx] = 0.0
        off = 0
        for f in flats:
            f[:] = all_w[off:off + f.size]
            off += f.size
    return model


def prune(model: MlpClassifier, true_key: ExtractionKey, message: Message,
          ratio: float, order: str = "ascending", dataset=None,
          seed: int = 0) -> AttackReport:
    pruned = prune_weights(model, ratio, order)
    report = AttackReport(f"prune-{order}-{ratio:g}", true_key.scheme, seed, 0)
    report.final_model = pruned
    acc = pruned.accuracy(dataset.x_test, dataset.y_test) if dataset is not None else float("nan")
    return _report_rows(report, true_key, message,
                        [(0, 0.0, acc, extract_features(pruned, true_key.feature_key))])


# ---------------------------------------------------------------------------
# fine-pruning
# ---------------------------------------------------------------------------

def _mean_activations(model: MlpClassifier, x: np.ndarray) -> list[np.ndarray]:
    """Mean post-relu activation per hidden unit, layer by layer."""
    h = x
    means = []
    for i in range(model.n_layers - 1):
        h = np.maximum(h @ model.weights[i].data + model.biases[i].data, 0.0)
        means.append(h.mean(axis=0))
    return means


def prune_units(model: MlpClassifier, fraction: float, dataset) -> MlpClassifier:
    """Zero the least-activated hidden units (whole neurons) on training data."""
    model = model.clone()
    if fraction <= 0:
        return model
    means = _mean_activations(model, dataset.x_train)
    ranked = sorted(((m, layer, j) for layer, lm in enumerate(means)
                     for j, m in enumerate(lm)), key=lambda t: (t[0], t[1], t[2]))
    n_units = len(ranked)
    for _, layer, j in ranked[:int(round(fraction * n_units))]:
        model.weights[layer].data[:, j] = 0.0
        model.biases[layer].data[j] = 0.0
        model.weights[layer + 1].data[j, :] = 0.0
    return model


def fine_prune(model: MlpClassifier, true_key: ExtractionKey, message: Message,
               cfg: FinePruneConfig, dataset, seed: int = 0) -> AttackReport:
    """Prune the least-activated units until the accuracy drop is noticeable,
    then fine-tune; degenerates to plain fine-tuning at fraction 0."""
    base_acc = model.accuracy(dataset.x_test, dataset.y_test)
    if cfg.prune_fraction is not None:
        fraction = cfg.prune_fraction
        pruned = prune_units(model, fraction, dataset)
    else:
        fraction = 0.0
        pruned = model.clone()
        f = cfg.scan_step
        while f < 1.0:
            cand = prune_units(model, f, dataset)
            fraction, pruned = f, cand
            if base_acc - cand.accuracy(dataset.x_test, dataset.y_test) > cfg.accuracy_drop:
                break
            f += cfg.scan_step
    report = finetune(pruned, true_key, message, cfg.finetune, dataset, seed)
    report.attack = f"fineprune-{fraction:g}-" + report.attack
    return report


# ---------------------------------------------------------------------------
# property inference
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    """Raw watermark-layer features of freshly trained models, half of them
    watermarked, split into detector train/test sets."""

    wm_train: np.ndarray
    non_train: np.ndarray
    wm_test: np.ndarray
    non_test: np.ndarray
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        np.savez_compressed(path, wm_train=self.wm_train, non_train=self.non_train,
                            wm_test=self.wm_test, non_test=self.non_test,
                            meta=np.array([repr(self.meta)]))

    @classmethod
    def load(cls, path) -> "Corpus":
        z = np.load(path, allow_pickle=False)
        return cls(z["wm_train"], z["non_train"], z["wm_test"], z["non_test"])


_CORPUS_WORK: dict = {}


def _init_corpus_worker(payload):
    _CORPUS_WORK.update(payload)


def _corpus_model_features(task):
    kind, seed = task
    w = _CORPUS_WORK
    ds = w["dataset"]
    fkey = WeightLayerKey(w["layer_index"])
    if kind == "non":
        model = schemes.train_baseline(ds, epochs=w["epochs"], seed=seed,
                                       decay=w["decay"])
        return extract_features(model, fkey)
    message = random_like(w["message"], np.random.default_rng(
        np.random.SeedSequence([0x3A6, seed])))
    common = dict(seed=seed, epochs=w["epochs"], layer_index=w["layer_index"],
                  eps_loss=w["eps_loss"], target_accuracy=w["target_accuracy"],
                  decay=w["decay"])
    if w["scheme"] == "uchida":
        result = schemes.uchida_embed(ds, message, **common)
    elif w["scheme"] == "deepsigns":
        result = schemes.deepsigns_embed(ds, message, **common)
    else:
        cfg = schemes.HidingConfig(lambda1=w["lambda1"], lambda2=w["lambda2"],
                                   clip_limit=w["clip_limit"],
                                   critic_mode=w["critic_mode"],
                                   nonwm_pool=w["pool"])
        result = schemes.riga_embed(ds, message, cfg, hiding_on=w["hiding_on"],
                                    **common)
    return extract_features(result.model, fkey)


def build_corpus(dataset, scheme: str, hiding_on: bool, n_train: int, n_test: int,
                 pool: NonWmPool | None, message: Message, *,
                 layer_index: int = schemes.DEFAULT_WM_LAYER,
                 epochs: int = 20, eps_loss: float = 1e-3,
                 target_accuracy: float = 0.95, decay: float = 0.0,
                 lambda1: float = schemes.DEFAULT_LAMBDA1,
                 lambda2: float = schemes.DEFAULT_LAMBDA2,
                 clip_limit: float = schemes.DEFAULT_CLIP,
                 critic_mode: str = "logloss",
                 seed: int = 0, workers: int | None = None) -> Corpus:
    """Train fresh watermarked and non-watermarked models in parallel and
    collect their watermark-layer features."""
    if n_train < MIN_POOL_PER_CLASS or n_test < 1:
        raise ValueError(f"need at least {MIN_POOL_PER_CLASS} training models "
                         f"per class and 1 test model, got {n_train}/{n_test}")
    total = n_train + n_test
    tasks = ([("wm", 7_000_000 + seed * 10_000 + i) for i in range(total)]
             + [("non", 8_000_000 + seed * 10_000 + i) for i in range(total)])
    payload = {"dataset": dataset, "scheme": scheme, "hiding_on": hiding_on,
               "pool": pool, "message": message, "layer_index": layer_index,
               "epochs": epochs, "eps_loss": eps_loss,
               "target_accuracy": target_accuracy, "decay": decay,
               "lambda1": lambda1, "lambda2": lambda2, "clip_limit": clip_limit,
               "critic_mode": critic_mode}
    workers = workers or cpu_count()
    if workers > 1:
        with Pool(workers, initializer=_init_corpus_worker, initargs=(payload,)) as p:
            feats = p.map(_corpus_model_features, tasks)
    else:
        _init_corpus_worker(payload)
        feats = [_corpus_model_features(t) for t in tasks]
    wm = np.stack(feats[:total])
    non = np.stack(feats[total:])
    return Corpus(wm[:n_train], non[:n_train], wm[n_train:], non[n_train:],
                  meta={"scheme": scheme, "hiding_on": hiding_on, "seed": seed,
                        "epochs": epochs})


class WatermarkDetector:
    """Ensemble of sorted-feature classifiers with input standardization
    fit on the training corpus; probabilities are averaged over members."""

    def __init__(self, nets: list[DetectorNet], mu: np.ndarray, sd: np.ndarray):
        self.nets = nets
        self.mu = mu
        self.sd = sd

    def _prep(self, features: np.ndarray) -> np.ndarray:
        feats = np.atleast_2d(features)
        s = np.sort(feats, axis=1)[:, ::-1]
        return (s - self.mu) / self.sd

    def prob_watermarked(self, features: np.ndarray) -> np.ndarray:
        x = self._prep(features)
        return np.mean([net.score_np(x)[:, 0] for net in self.nets], axis=0)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.prob_watermarked(features) >= 0.5).astype(np.int64)

    def accuracy(self, wm_feats: np.ndarray, non_feats: np.ndarray) -> float:
        correct = (self.predict(wm_feats) == 1).sum() + (self.predict(non_feats) == 0).sum()
        return float(correct) / (len(wm_feats) + len(non_feats))


@dataclass
class PropertyInferenceResult:
    accuracy_curve: list[float]  # held-out accuracy per detector epoch
    final_accuracy: float
    detector: WatermarkDetector
    corpus: Corpus


def _bootstrap_sorted(features: np.ndarray, copies: int, rng) -> np.ndarray:
    """Each model's weight sample, plus sorted bootstrap resamples of it."""
    out = []
    for q in features:
        out.append(np.sort(q)[::-1])
        for _ in range(copies - 1):
            out.append(np.sort(rng.choice(q, size=q.size, replace=True))[::-1])
    return np.stack(out)


def train_detector(corpus: Corpus, cfg: PropertyInferenceConfig,
                   seed: int = 0,
                   detector_hidden=schemes.DETECTOR_HIDDEN) -> PropertyInferenceResult:
    """Fresh detector ensemble trained on sorted, standardized corpus
    features; held-out accuracy recorded per epoch.

    The training corpus is enlarged with bootstrap resamples of each model's
    weights (the sorted profile is a statistic of the weight sample, so
    resampling preserves the class signal), a few training models per class
    are held out to pick the reporting epoch, and independently seeded
    detectors vote by probability averaging.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0xDE7, seed]))
    n_val = min(cfg.val_models, len(corpus.wm_train) // 4)
    wm_fit, wm_val = corpus.wm_train[n_val:], corpus.wm_train[:n_val]
    non_fit, non_val = corpus.non_train[n_val:], corpus.non_train[:n_val]
    copies = max(1, cfg.augment)
    xw = _bootstrap_sorted(wm_fit, copies, rng)
    xn = _bootstrap_sorted(non_fit, copies, rng)
    both = np.concatenate([xw, xn])
    mu, sd = both.mean(axis=0), both.std(axis=0) + 1e-12
    x = (both - mu) / sd
    y = np.concatenate([np.ones(len(xw)), np.zeros(len(xn))]).reshape(-1, 1)

    members = [DetectorNet.init([x.shape[1], *detector_hidden, 1],
                                np.random.default_rng(
                                    np.random.SeedSequence([0xDE8, seed, k])))
               for k in range(max(1, cfg.ensemble))]
    states = [AdamState(lr=cfg.detector_lr, beta1=schemes.DEFAULT_BETA1,
                        beta2=schemes.DEFAULT_BETA2) for _ in members]
    detector = WatermarkDetector(members, mu, sd)
    curve, val_curve = [], []
    best_val, best_epoch, best_weights = -1.0, -1, None
    for _ in range(cfg.detector_epochs):
        for net, state in zip(members, states):
            order = rng.permutation(len(x))
            params = net.params()
            for lo in range(0, len(x), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                T.binary_cross_entropy(net.forward(Tensor(x[idx])),
                                       y[idx]).backward()
                adam_step(params, state)
        curve.append(detector.accuracy(corpus.wm_test, corpus.non_test))
        if n_val:
            val_curve.append(detector.accuracy(wm_val, non_val))
            if val_curve[-1] > best_val:
                best_val = val_curve[-1]
                best_epoch = len(curve) - 1
                best_weights = [[(w.copy(), b.copy()) for w, b in net.layer_arrays()]
                                for net in members]
    if best_weights is not None:
        for net, layers in zip(members, best_weights):
            for (w, b), (bw, bb) in zip(zip(net.weights, net.biases), layers):
                w.data[:] = bw
                b.data[:] = bb
        best = best_epoch
    else:
        best = len(curve) - 1
    return PropertyInferenceResult(curve, curve[best], detector, corpus)


def property_inference(dataset, scheme: str, hiding_on: bool,
                       cfg: PropertyInferenceConfig, pool: NonWmPool | None,
                       message: Message, seed: int = 0,
                       workers: int | None = None,
                       **embed_kw) -> PropertyInferenceResult:
    """Full attack: build the model corpus, then train and score a detector."""
    corpus = build_corpus(dataset, scheme, hiding_on, cfg.n_train, cfg.n_test,
                          pool, message, seed=seed, workers=workers, **embed_kw)
    return train_detector(corpus, cfg, seed=seed)
