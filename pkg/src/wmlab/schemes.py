"""Watermark schemes: linear-projection baselines and the adversarial one.

All three schemes follow the same two-step extraction, a feature map picking
the cover data out of the model followed by a message extractor:

  * projection scheme on weights: soft message = sigmoid(Z q) with a secret
    Gaussian matrix Z over one layer's flattened weights;
  * projection scheme on activations: same extractor, but q is the
    activations of a layer on a secret trigger batch;
  * trained-extractor scheme: the extractor is an MLP trained alongside the
    target model, optionally with a GAN-style detector that pushes the
    watermarked weight distribution toward a non-watermarked population.

Embedding always means regularized training: task loss plus lambda-weighted
message distance, plus the hiding penalty when enabled.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import (ActivationKey, DetectorNet, ExtractorNet, FeatureKey,
                   MlpClassifier, WeightLayerKey, extract_features,
                   extract_features_t, pack_weights, sorted_features,
                   unpack_weights)
from .optim import AdamState, adam_step, clamp_weights
from .tensor import Tensor

log = logging.getLogger("wmlab")

DEFAULT_LAMBDA1 = 0.01
DEFAULT_LAMBDA2 = 0.1
DEFAULT_CLIP = 0.01
DEFAULT_LR = 1e-4
DEFAULT_BATCH = 100
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
EXTRACTOR_HIDDEN = (512, 256)
DETECTOR_HIDDEN = (256, 128)
DEFAULT_ARCH_HIDDEN = (128, 64)
DEFAULT_WM_LAYER = 1  # second-to-last fully-connected layer
EPOCH_CAP = 100


# ---------------------------------------------------------------------------
# messages and metrics
# ---------------------------------------------------------------------------

@dataclass
class BitsMessage:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.float64)
        if self.bits.size == 0:
            raise ValueError("empty message")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("bit values must be exactly 0 or 1")

    @property
    def t(self) -> int:
        return self.bits.size

    @property
    def values(self) -> np.ndarray:
        return self.bits

    @classmethod
    def random(cls, t: int, rng: np.random.Generator) -> "BitsMessage":
        return cls(rng.integers(0, 2, size=t).astype(np.float64))


@dataclass
class ImageMessage:
    pixels: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1)
        if self.pixels.size != self.width * self.height or self.pixels.size == 0:
            raise ValueError(f"{self.pixels.size} pixels for "
                             f"{self.width}x{self.height} image")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")

    @property
    def t(self) -> int:
        return self.pixels.size

    @property
    def values(self) -> np.ndarray:
        return self.pixels

    @classmethod
    def random(cls, width: int, height: int, rng: np.random.Generator) -> "ImageMessage":
        return cls(rng.uniform(0.0, 1.0, size=width * height), width, height)


Message = BitsMessage | ImageMessage


def random_like(message: Message, rng: np.random.Generator) -> Message:
    if isinstance(message, BitsMessage):
        return BitsMessage.random(message.t, rng)
    return ImageMessage.random(message.width, message.height, rng)


def hard_bits(soft: np.ndarray) -> np.ndarray:
    """Threshold decoding; a soft value of exactly 0.5 reads as bit 1."""
    return (np.asarray(soft) >= 0.5).astype(np.int64)


def ber(extracted: np.ndarray, message: BitsMessage) -> float:
    """Fraction of bits whose soft value is off by strictly more than 0.5."""
    extracted = np.asarray(extracted, dtype=np.float64)
    if extracted.size != message.t:
        raise ValueError(f"length mismatch: {extracted.size} vs {message.t}")
    return float((np.abs(extracted - message.bits) > 0.5).mean())


def embedding_loss(extracted: np.ndarray, message: Message) -> float:
    """Mean BCE for bit messages, mean squared pixel error for images."""
    extracted = np.asarray(extracted, dtype=np.float64)
    if extracted.size != message.t:
        raise ValueError(f"length mismatch: {extracted.size} vs {message.t}")
    if isinstance(message, BitsMessage):
        p = np.clip(extracted, T.EPS_PROB, 1.0 - T.EPS_PROB)
        m = message.bits
        return float(-(m * np.log(p) + (1 - m) * np.log(1 - p)).mean())
    return float(((extracted - message.pixels) ** 2).mean())


def message_distance_t(soft: Tensor, message: Message) -> Tensor:
    """The same distance as embedding_loss, as a differentiable node."""
    target = message.values.reshape(soft.data.shape)
    if isinstance(message, BitsMessage):
        return T.binary_cross_entropy(soft, target)
    return T.squared_error(soft, target)


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------

@dataclass
class ExtractionKey:
    scheme: str  # uchida | deepsigns | riga
    feature_key: FeatureKey
    matrix: np.ndarray | None = None
    extractor: ExtractorNet | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme in ("uchida", "deepsigns"):
            if self.matrix is None:
                raise ValueError(f"{self.scheme} key needs a projection matrix")
        elif self.scheme == "riga":
            if self.extractor is None:
                raise ValueError("riga key needs extractor parameters")
        else:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def t(self) -> int:
        if self.matrix is not None:
            return self.matrix.shape[0]
        return self.extractor.dims[-1]


def uchida_extract(q: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Soft message sigmoid(Z q) of the projection scheme."""
    from . import kernels
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if matrix.ndim != 2 or matrix.shape[1] != q.size:
        raise ValueError(f"projection {matrix.shape} does not match "
                         f"feature length {q.size}")
    return kernels.sigmoid(matrix @ q)


def riga_extract(q: np.ndarray, extractor: ExtractorNet) -> np.ndarray:
    """Soft message from the trained extractor network."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if extractor.dims[0] != q.size:
        raise ValueError(f"extractor input dim {extractor.dims[0]} does not "
                         f"match feature length {q.size}")
    return extractor.extract_np(q)


def extract_message(model: MlpClassifier, key: ExtractionKey) -> np.ndarray:
    q = extract_features(model, key.feature_key)
    if key.scheme == "riga":
        return riga_extract(q, key.extractor)
    return uchida_extract(q, key.matrix)


def extract_from_features(q: np.ndarray, key: ExtractionKey) -> np.ndarray:
    if key.scheme == "riga":
        return riga_extract(q, key.extractor)
    return uchida_extract(q, key.matrix)


# ---------------------------------------------------------------------------
# task training
# ---------------------------------------------------------------------------

@dataclass
class TaskLoss:
    """Categorical cross-entropy over minibatches of a labeled dataset."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.x.shape[0] == 0:
            raise ValueError("empty dataset")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def batch_loss(self, model: MlpClassifier, idx: np.ndarray) -> Tensor:
        logits = model.classify(Tensor(self.x[idx]))
        return T.softmax_cross_entropy(logits, self.y[idx])


def design_loss(dataset) -> TaskLoss:
    return TaskLoss(dataset.x_train, dataset.y_train, dataset.n_classes)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def train(loss: TaskLoss, model: MlpClassifier, epochs: int,
          batch_size: int = DEFAULT_BATCH, seed: int = 0,
          lr: float = DEFAULT_LR, decay: float = 0.0) -> MlpClassifier:
    """Plain task training with Adam; deterministic given the seed."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(np.random.SeedSequence([0x7EA1, seed]))
    state = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, decay=decay)
    params = model.params()
    for _ in range(epochs):
        for idx in epoch_batches(loss.n, batch_size, rng):
            loss.batch_loss(model, idx).backward()
            adam_step(params, state)
    return model


def default_arch(input_dim: int, n_classes: int) -> list[int]:
    return [input_dim, *DEFAULT_ARCH_HIDDEN, n_classes]


def new_classifier(dataset, seed: int) -> MlpClassifier:
    rng = np.random.default_rng(np.random.SeedSequence([0x1217, seed]))
    return MlpClassifier.init(default_arch(dataset.input_dim, dataset.n_classes), rng)


def train_baseline(dataset, epochs: int, seed: int,
                   batch_size: int = DEFAULT_BATCH, lr: float = DEFAULT_LR,
                   decay: float = 0.0) -> MlpClassifier:
    model = new_classifier(dataset, seed)
    return train(design_loss(dataset), model, epochs, batch_size, seed, lr, decay)


# ---------------------------------------------------------------------------
# non-watermarked pool and hiding
# ---------------------------------------------------------------------------

class NonWmPool:
    """Feature vectors of independently trained non-watermarked models."""

    def __init__(self, raw: np.ndarray):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] == 0:
            raise ValueError("pool needs a (models, features) matrix")
        self.raw = raw
        self.sorted = np.sort(raw, axis=1)[:, ::-1].copy()

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass
class HidingConfig:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    clip_limit: float = DEFAULT_CLIP
    critic_mode: str = "logloss"  # or "wasserstein"
    nonwm_pool: NonWmPool | None = None

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda coefficients must be nonnegative")
        if self.clip_limit <= 0:
            raise ValueError("clip limit must be positive")
        if self.critic_mode not in ("logloss", "wasserstein"):
            raise ValueError(f"unknown critic mode {self.critic_mode!r}")


def hide_step(target_q: np.ndarray, detector: DetectorNet, nonwm_q: np.ndarray,
              cfg: HidingConfig, state: AdamState) -> None:
    """One detector/critic ascent step on sorted features.

    Log-loss mode maximizes log D(non) + log(1 - D(wm)); critic mode
    maximizes C(non) - C(wm). Detector weights are clamped after the update
    in both modes to keep the critic Lipschitz.
    """
    if nonwm_q is None or np.asarray(nonwm_q).size == 0:
        raise ValueError("empty non-watermarked pool sample")
    pair = Tensor(np.stack([sorted_features(nonwm_q), sorted_features(target_q)]))
    if cfg.critic_mode == "wasserstein":
        scores = detector.forward(pair, critic=True)
        loss = T.subtract(T.mean(T.slice_rows(scores, 1, 2)),
                          T.mean(T.slice_rows(scores, 0, 1)))
    else:
        # -log D(non) - log(1 - D(wm)), via BCE against labels [1, 0]
        loss = T.multiply(T.binary_cross_entropy(detector.forward(pair),
                                                 np.array([[1.0], [0.0]])), 2.0)
    loss.backward()
    params = detector.params()
    adam_step(params, state)
    clamp_weights(params, cfg.clip_limit)


def detector_penalty_t(sorted_q: Tensor, detector: DetectorNet,
                       cfg: HidingConfig) -> Tensor:
    """Hiding term for the target update: -log D(wm) or -C(wm)."""
    if cfg.critic_mode == "wasserstein":
        return T.negate(T.mean(detector.forward(sorted_q, critic=True,
                                                train_params=False)))
    return T.binary_cross_entropy(detector.forward(sorted_q, train_params=False),
                                  np.ones((1, 1)))


def detector_gap_np(detector: DetectorNet, target_q: np.ndarray,
                    pool: NonWmPool, cfg: HidingConfig, n_eval: int = 8) -> float:
    """Mean detector separation between the target and pool samples."""
    s_w = sorted_features(target_q).reshape(1, -1)
    s_n = pool.sorted[:n_eval]
    critic = cfg.critic_mode == "wasserstein"
    d_w = detector.score_np(s_w, critic=critic).mean()
    d_n = detector.score_np(s_n, critic=critic).mean()
    return float(d_n - d_w)


def critic_emd_estimate(a: np.ndarray, b: np.ndarray,
                        hidden=(64, 32), steps: int = 1500,
                        lr: float = 1e-3, clip_limit: float = DEFAULT_CLIP,
                        seed: int = 0) -> float:
    """Earth-mover distance between two equal-size 1-D samples, via a
    clipped critic trained on the duality difference.

    The raw difference is rescaled by the critic's realized Lipschitz
    constant, measured as the steepest slope over the sample span.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    if a.shape != b.shape:
        raise ValueError(f"sample sizes differ: {a.shape[0]} vs {b.shape[0]}")
    rng = np.random.default_rng(np.random.SeedSequence([0xC11, seed]))
    critic = DetectorNet.init([1, *hidden, 1], rng)
    state = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2)
    ta, tb = Tensor(a), Tensor(b)
    for _ in range(steps):
        # maximize mean C(a) - mean C(b)
        loss = T.subtract(T.mean(critic.forward(tb, critic=True)),
                          T.mean(critic.forward(ta, critic=True)))
        loss.backward()
        adam_step(critic.params(), state)
        clamp_weights(critic.params(), clip_limit)
    diff = float(critic.score_np(a, critic=True).mean()
                 - critic.score_np(b, critic=True).mean())
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    grid = np.linspace(lo, hi, 1025).reshape(-1, 1)
    vals = critic.score_np(grid, critic=True)[:, 0]
    slopes = np.abs(np.diff(vals)) / (grid[1, 0] - grid[0, 0])
    k = float(slopes.max())
    if k < 1e-12:
        return 0.0
    return abs(diff) / k


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

@dataclass
class EmbedResult:
    scheme: str
    model: MlpClassifier
    key: ExtractionKey
    message: Message
    curves: list[dict] = field(default_factory=list)
    final_embedding_loss: float = float("nan")
    final_ber: float | None = None
    final_accuracy: float = float("nan")
    converged: bool = False
    epochs_run: int = 0
    seed: int = 0


def _epoch_row(epoch, task_loss, wm_loss, det_loss, acc, bit_err):
    return {"epoch": epoch, "task_loss": task_loss, "wm_loss": wm_loss,
            "det_loss": det_loss, "test_accuracy": acc, "ber": bit_err}


def _finalize(result: EmbedResult, dataset, eps_loss, target_accuracy,
              epochs_cap) -> EmbedResult:
    soft = extract_message(result.model, result.key)
    result.final_embedding_loss = embedding_loss(soft, result.message)
    result.final_ber = (ber(soft, result.message)
                        if isinstance(result.message, BitsMessage) else None)
    result.final_accuracy = result.model.accuracy(dataset.x_test, dataset.y_test)
    result.converged = (result.final_embedding_loss < eps_loss
                        and result.final_accuracy >= target_accuracy)
    if not result.converged and result.epochs_run >= epochs_cap:
        log.warning("embedding hit the %d-epoch cap without converging "
                    "(loss %.3g, accuracy %.3f); curves retained",
                    epochs_cap, result.final_embedding_loss, result.final_accuracy)
    return result


def _projection_embed(scheme: str, dataset, message: Message, lam: float,
                      seed: int, *, epochs: int, layer_index: int,
                      n_triggers: int = 16, batch_size: int = DEFAULT_BATCH,
                      lr: float = DEFAULT_LR, eps_loss: float = 1e-3,
                      target_accuracy: float = 0.95, initial_model=None,
                      epoch_hook=None, decay: float = 0.0) -> EmbedResult:
    ss = np.random.SeedSequence([0x0E0B if scheme == "uchida" else 0xDEE9, seed])
    r_model, r_key, r_shuffle, r_trig = [np.random.default_rng(s)
                                         for s in ss.spawn(4)]
    if initial_model is not None:
        model = initial_model.clone()
    else:
        model = MlpClassifier.init(default_arch(dataset.input_dim, dataset.n_classes),
                                   r_model)
    if scheme == "uchida":
        fkey: FeatureKey = WeightLayerKey(layer_index)
    else:
        fkey = ActivationKey(layer_index, dataset.sample_inputs(n_triggers, r_trig))
    flen = extract_features(model, fkey).size
    if message.t > flen:
        raise ValueError(f"message length {message.t} exceeds "
                         f"feature length {flen}")
    matrix = r_key.normal(0.0, 1.0, size=(message.t, flen))
    key = ExtractionKey(scheme, fkey, matrix=matrix, seed=seed)
    task = design_loss(dataset)
    state = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, decay=decay)
    params = model.params()
    result = EmbedResult(scheme, model, key, message, seed=seed)
    target = message.values.reshape(1, -1)
    for epoch in range(1, epochs + 1):
        task_sum = wm_sum = 0.0
        n_batches = 0
        for idx in epoch_batches(task.n, batch_size, r_shuffle):
            t_loss = task.batch_loss(model, idx)
            qt = extract_features_t(model, fkey)
            soft_t = T.sigmoid(T.matmul(qt, Tensor(matrix.T)))
            if isinstance(message, BitsMessage):
                w_loss = T.binary_cross_entropy(soft_t, target)
            else:
                w_loss = T.squared_error(soft_t, target)
            T.add(t_loss, T.multiply(w_loss, lam)).backward()
            adam_step(params, state)
            task_sum += t_loss.item()
            wm_sum += w_loss.item()
            n_batches += 1
        soft = extract_message(model, key)
        acc = model.accuracy(dataset.x_test, dataset.y_test)
        bit_err = ber(soft, message) if isinstance(message, BitsMessage) else None
        result.curves.append(_epoch_row(epoch, task_sum / n_batches,
                                        wm_sum / n_batches, None, acc, bit_err))
        result.epochs_run = epoch
        if epoch_hook is not None:
            epoch_hook(epoch, model)
        if embedding_loss(soft, message) < eps_loss and acc >= target_accuracy:
            break
    return _finalize(result, dataset, eps_loss, target_accuracy, epochs)


def uchida_embed(dataset, message: BitsMessage, lam: float = DEFAULT_LAMBDA1,
                 seed: int = 0, **kw) -> EmbedResult:
    """Embed via the weight-projection regularizer."""
    kw.setdefault("epochs", EPOCH_CAP)
    kw.setdefault("layer_index", DEFAULT_WM_LAYER)
    return _projection_embed("uchida", dataset, message, lam, seed, **kw)


def deepsigns_embed(dataset, message: BitsMessage, lam: float = DEFAULT_LAMBDA1,
                    seed: int = 0, **kw) -> EmbedResult:
    """Embed via the activation-projection regularizer on a trigger set."""
    kw.setdefault("epochs", EPOCH_CAP)
    kw.setdefault("layer_index", DEFAULT_WM_LAYER)
    return _projection_embed("deepsigns", dataset, message, lam, seed, **kw)


def riga_embed(dataset, message: Message, cfg: HidingConfig,
               hiding_on: bool = True, seed: int = 0, *,
               epochs: int = EPOCH_CAP, layer_index: int = DEFAULT_WM_LAYER,
               batch_size: int = DEFAULT_BATCH, lr: float = DEFAULT_LR,
               eps_loss: float = 1e-3, target_accuracy: float = 0.95,
               extractor_hidden=EXTRACTOR_HIDDEN,
               detector_hidden=DETECTOR_HIDDEN, initial_model=None,
               epoch_hook=None, decay: float = 0.0) -> EmbedResult:
    """Embed with the trained extractor, alternating three updates per batch:
    extractor fit (watermark to the message, pool models to their own fixed
    random messages), detector ascent when hiding, then the target update on
    task loss + lambda1 * message distance (+ lambda2 * hiding penalty).
    """
    if cfg.nonwm_pool is None or len(cfg.nonwm_pool) == 0:
        raise ValueError("hiding/embedding needs a non-watermarked pool")
    pool = cfg.nonwm_pool
    ss = np.random.SeedSequence([0x816A, seed])
    r_model, r_ext, r_det, r_mr, r_shuffle, r_pool = [np.random.default_rng(s)
                                                      for s in ss.spawn(6)]
    if initial_model is not None:
        model = initial_model.clone()
    else:
        model = MlpClassifier.init(default_arch(dataset.input_dim, dataset.n_classes),
                                   r_model)
    fkey = WeightLayerKey(layer_index)
    flen = extract_features(model, fkey).size
    if pool.raw.shape[1] != flen:
        raise ValueError(f"pool feature length {pool.raw.shape[1]} does not "
                         f"match watermark layer length {flen}")
    extractor = ExtractorNet.init([flen, *extractor_hidden, message.t], r_ext)
    detector = DetectorNet.init([flen, *detector_hidden, 1], r_det) if hiding_on else None
    # one fixed decoy message per pool model, drawn up front
    decoys = [random_like(message, r_mr) for _ in range(len(pool))]

    task = design_loss(dataset)
    st_model = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, decay=decay)
    st_ext = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2)
    st_det = AdamState(lr=lr, beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2)
    model_params = model.params()
    ext_params = extractor.params()

    result = EmbedResult("riga", model, None, message, seed=seed)
    for epoch in range(1, epochs + 1):
        task_sum = wm_sum = det_sum = 0.0
        n_batches = 0
        for idx in epoch_batches(task.n, batch_size, r_shuffle):
            q_now = extract_features(model, fkey)
            # extractor step: fit message on the target, decoys on the pool;
            # one batched forward, x2 turns the mean back into the sum of
            # the two per-message distances
            j = int(r_pool.integers(len(pool)))
            pair = Tensor(np.stack([q_now, pool.raw[j]]))
            targets = np.stack([message.values, decoys[j].values])
            soft_pair = extractor.forward(pair)
            if isinstance(message, BitsMessage):
                e_loss = T.multiply(T.binary_cross_entropy(soft_pair, targets), 2.0)
            else:
                e_loss = T.multiply(T.squared_error(soft_pair, targets), 2.0)
            e_loss.backward()
            adam_step(ext_params, st_ext)
            # detector step
            if hiding_on:
                jd = int(r_pool.integers(len(pool)))
                hide_step(q_now, detector, pool.raw[jd], cfg, st_det)
            # target step
            t_loss = task.batch_loss(model, idx)
            qt = extract_features_t(model, fkey)
            w_loss = message_distance_t(extractor.forward(qt, train_params=False),
                                        message)
            total = T.add(t_loss, T.multiply(w_loss, cfg.lambda1))
            if hiding_on:
                d_pen = detector_penalty_t(T.sort_descending(qt), detector, cfg)
                total = T.add(total, T.multiply(d_pen, cfg.lambda2))
                det_sum += d_pen.item()
            total.backward()
            adam_step(model_params, st_model)
            task_sum += t_loss.item()
            wm_sum += w_loss.item()
            n_batches += 1
        q = extract_features(model, fkey)
        soft = riga_extract(q, extractor)
        acc = model.accuracy(dataset.x_test, dataset.y_test)
        bit_err = ber(soft, message) if isinstance(message, BitsMessage) else None
        result.curves.append(_epoch_row(
            epoch, task_sum / n_batches, wm_sum / n_batches,
            det_sum / n_batches if hiding_on else None, acc, bit_err))
        result.epochs_run = epoch
        if epoch_hook is not None:
            epoch_hook(epoch, model)
        if embedding_loss(soft, message) < eps_loss and acc >= target_accuracy:
            break
    result.key = ExtractionKey("riga", fkey, extractor=extractor, seed=seed)
    return _finalize(result, dataset, eps_loss, target_accuracy, epochs)


# ---------------------------------------------------------------------------
# key and message files
# ---------------------------------------------------------------------------

def save_key(path, key: ExtractionKey) -> None:
    header = {"scheme": key.scheme, "t": key.t, "seed": key.seed}
    if isinstance(key.feature_key, WeightLayerKey):
        header["feature"] = {"kind": "weight", "layer": key.feature_key.layer_index}
        triggers = None
    else:
        fk = key.feature_key
        header["feature"] = {"kind": "activation", "layer": fk.layer_index,
                             "n_triggers": int(fk.trigger_inputs.shape[0]),
                             "input_dim": int(fk.trigger_inputs.shape[1])}
        triggers = fk.trigger_inputs
    if key.matrix is not None:
        header["kme"] = {"kind": "matrix", "feature_length": int(key.matrix.shape[1])}
    else:
        header["kme"] = {"kind": "extractor"}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        if triggers is not None:
            f.write(np.ascontiguousarray(triggers, dtype="<f8").tobytes())
        if key.matrix is not None:
            f.write(np.ascontiguousarray(key.matrix, dtype="<f8").tobytes())
        else:
            f.write(pack_weights(key.extractor.dims, key.extractor.layer_arrays(),
                                 key.seed))


def load_key(path) -> ExtractionKey:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    off = 0
    feat = header["feature"]
    if feat["kind"] == "weight":
        fkey: FeatureKey = WeightLayerKey(feat["layer"])
    else:
        n, d = feat["n_triggers"], feat["input_dim"]
        triggers = np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d)
        off = 8 * n * d
        fkey = ActivationKey(feat["layer"], triggers)
    if header["kme"]["kind"] == "matrix":
        t, flen = header["t"], header["kme"]["feature_length"]
        matrix = np.frombuffer(payload, dtype="<f8", count=t * flen,
                               offset=off).reshape(t, flen).copy()
        return ExtractionKey(header["scheme"], fkey, matrix=matrix,
                             seed=header["seed"])
    dims, _, layers = unpack_weights(payload[off:])
    return ExtractionKey(header["scheme"], fkey,
                         extractor=ExtractorNet(dims, layers), seed=header["seed"])


def save_message(path, message: Message) -> None:
    with open(path, "w") as f:
        if isinstance(message, BitsMessage):
            f.write("".join(str(int(b)) for b in message.bits) + "\n")
        else:
            f.write(f"{message.width} {message.height}\n")
            f.write(" ".join(repr(float(p)) for p in message.pixels) + "\n")


def load_message(path) -> Message:
    with open(path) as f:
        first = f.readline().strip()
        if set(first) <= {"0", "1"}:
            return BitsMessage(np.array([int(c) for c in first], dtype=np.float64))
        w, h = (int(v) for v in first.split())
        pixels = np.array([float(v) for v in f.readline().split()])
        return ImageMessage(pixels, w, h)
