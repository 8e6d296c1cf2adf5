"""Non-watermarked model zoo: parallel generation, manifest, feature pools."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from multiprocessing import Pool, cpu_count
from pathlib import Path

import numpy as np

from . import schemes
from .data import Dataset
from .nets import (FeatureKey, MlpClassifier, arch_hash, extract_features,
                   load_weights, save_weights)

MIN_ZOO = 8


@dataclass
class ZooEntry:
    file: str
    seed: int
    accuracy: float
    arch_hash: str


@dataclass
class ZooManifest:
    directory: str
    entries: list[ZooEntry]
    generation: dict

    def paths(self) -> list[Path]:
        return [Path(self.directory) / e.file for e in self.entries]

    @property
    def hash(self) -> str:
        return self.entries[0].arch_hash

    def save(self) -> Path:
        path = Path(self.directory) / "manifest.json"
        payload = {"generation": self.generation,
                   "entries": [asdict(e) for e in self.entries]}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path


def load_manifest(directory) -> ZooManifest:
    directory = Path(directory)
    payload = json.loads((directory / "manifest.json").read_text())
    entries = [ZooEntry(**e) for e in payload["entries"]]
    if not entries:
        raise ValueError(f"empty zoo manifest in {directory}")
    hashes = {e.arch_hash for e in entries}
    if len(hashes) > 1:
        raise ValueError(f"zoo mixes architectures: {sorted(hashes)}")
    for e in entries:
        if not (directory / e.file).exists():
            raise FileNotFoundError(f"zoo entry missing: {directory / e.file}")
    return ZooManifest(str(directory), entries, payload["generation"])


_WORK: dict = {}


def _init_worker(payload):
    _WORK.update(payload)


def _train_entry(task):
    seed, filename = task
    ds: Dataset = _WORK["dataset"]
    try:
        model = schemes.train_baseline(ds, epochs=_WORK["epochs"], seed=seed,
                                       batch_size=_WORK["batch_size"],
                                       lr=_WORK["lr"])
        path = Path(_WORK["directory"]) / filename
        save_weights(path, model, seed)
        acc = model.accuracy(ds.x_test, ds.y_test)
        return ZooEntry(filename, seed, acc, arch_hash(model.dims))
    except OSError as e:
        raise OSError(f"zoo entry {filename} (seed {seed}): {e}") from e


def build_zoo(dataset: Dataset, directory, count: int, epochs: int = 25,
              base_seed: int = 0, batch_size: int = schemes.DEFAULT_BATCH,
              lr: float = schemes.DEFAULT_LR, workers: int | None = None) -> ZooManifest:
    """Train `count` baselines with distinct seeds and persist them."""
    if count < MIN_ZOO:
        raise ValueError(f"zoo needs at least {MIN_ZOO} models, got {count}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tasks = [(base_seed + i, f"zoo_{base_seed + i:05d}.bin") for i in range(count)]
    payload = {"dataset": dataset, "epochs": epochs, "batch_size": batch_size,
               "lr": lr, "directory": str(directory)}
    workers = workers or min(cpu_count(), count)
    if workers > 1:
        with Pool(workers, initializer=_init_worker, initargs=(payload,)) as pool:
            entries = pool.map(_train_entry, tasks)
    else:
        _init_worker(payload)
        entries = [_train_entry(t) for t in tasks]
    entries.sort(key=lambda e: e.seed)
    manifest = ZooManifest(str(directory), entries, {
        "dataset": dataset.name, "count": count, "epochs": epochs,
        "batch_size": batch_size, "lr": lr, "base_seed": base_seed,
        "arch_hash": entries[0].arch_hash,
    })
    manifest.save()
    return manifest


def load_zoo_models(manifest: ZooManifest) -> list[MlpClassifier]:
    return [load_weights(p, MlpClassifier)[0] for p in manifest.paths()]


def zoo_pool(manifest: ZooManifest, key: FeatureKey,
             limit: int | None = None) -> schemes.NonWmPool:
    """Feature vectors of the zoo models under one feature key."""
    paths = manifest.paths()[:limit]
    feats = [extract_features(load_weights(p, MlpClassifier)[0], key) for p in paths]
    return schemes.NonWmPool(np.stack(feats))
