"""Synthetic prototype datasets and the CIFAR-10 binary reader.

Datasets on disk are a directory of ``.npy`` arrays plus ``meta.json``:
``train_x.npy``, ``train_y.npy``, ``val_x.npy``, ``val_y.npy``. Images are
stored channels-last, ``[N, H, W, C]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .netbuild import Batch

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000


@dataclass(frozen=True)
class DataSpec:
    classes: int = 4
    examples: int = 512
    shape: tuple[int, ...] = (8, 8, 3)
    noise: float = 1.0
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.classes < 2:
            raise ContractError("need at least 2 classes")
        if not 0 < self.val_fraction < 1:
            raise ContractError("val_fraction must lie in (0, 1)")
        n_val = int(round(self.examples * self.val_fraction))
        if n_val < 2 or self.examples - n_val < 2:
            raise ContractError(f"{self.examples} examples is too few to split into train and val")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")


@dataclass
class Dataset:
    train: Batch
    val: Batch
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train.inputs.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("classes", int(self.train.targets.max()) + 1))


def synthesize(spec: DataSpec) -> tuple[Dataset, np.ndarray]:
    """Build the dataset in memory; returns it with the class prototypes."""
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    prototypes = rng.standard_normal((spec.classes,) + tuple(spec.shape))
    labels = np.arange(spec.examples) % spec.classes
    rng.shuffle(labels)
    x = prototypes[labels] + spec.noise * rng.standard_normal((spec.examples,) + tuple(spec.shape))
    n_val = int(round(spec.examples * spec.val_fraction))
    meta = {"source": "synthetic", **asdict(spec), "shape": list(spec.shape)}
    ds = Dataset(Batch(x[n_val:], labels[n_val:]), Batch(x[:n_val], labels[:n_val]), meta)
    return ds, prototypes


def save_dataset(ds: Dataset, out: str | Path) -> list[Path]:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        arrays = {
            "train_x": ds.train.inputs,
            "train_y": ds.train.targets.astype(np.int64),
            "val_x": ds.val.inputs,
            "val_y": ds.val.targets.astype(np.int64),
        }
        written = []
        for name, arr in arrays.items():
            path = out / f"{name}.npy"
            np.save(path, arr, allow_pickle=False)
            written.append(path)
        meta_path = out / "meta.json"
        meta_path.write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
        written.append(meta_path)
    except OSError as exc:
        raise OSError(f"could not write dataset to {out}: {exc}") from exc
    return written


def gen_synthetic(spec: DataSpec, out: str | Path | None = None) -> Dataset:
    """Gaussian class prototypes plus isotropic noise; written to ``out`` if given."""
    ds, _ = synthesize(spec)
    if out is not None:
        save_dataset(ds, out)
    return ds


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
        arrays = {k: np.load(path / f"{k}.npy", allow_pickle=False) for k in ("train_x", "train_y", "val_x", "val_y")}
    except FileNotFoundError as exc:
        raise FormatError(f"{path} is not a dataset directory: {exc}") from exc
    return Dataset(Batch(arrays["train_x"], arrays["train_y"]), Batch(arrays["val_x"], arrays["val_y"]), meta)


def read_cifar10_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read one binary batch file into (uint8 images [N,32,32,3], uint8 labels)."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        whole = raw.size // CIFAR_RECORD
        raise FormatError(
            f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record; "
            f"trailing partial record at byte offset {whole * CIFAR_RECORD}"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def scale_images(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float64) / 255.0


def ingest_cifar10(directory: str | Path, n_train: int | None = None, n_val: int | None = None) -> Dataset:
    """Load ``data_batch_*.bin`` (train) and ``test_batch.bin`` (val).

    Pixels are scaled to [0, 1], then the per-channel training mean is
    subtracted from both splits. ``n_train``/``n_val`` keep the first records.
    """
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    if not train_files:
        raise FormatError(f"no data_batch_*.bin files in {directory}")
    parts = [read_cifar10_batch(f) for f in train_files]
    tx = np.concatenate([p[0] for p in parts])
    ty = np.concatenate([p[1] for p in parts])
    test_file = directory / "test_batch.bin"
    if test_file.exists():
        vx, vy = read_cifar10_batch(test_file)
    else:
        # no test split shipped; hold out the tail of the training records
        cut = max(2, len(tx) // 6)
        tx, vx, ty, vy = tx[:-cut], tx[-cut:], ty[:-cut], ty[-cut:]
    if n_train is not None:
        tx, ty = tx[:n_train], ty[:n_train]
    if n_val is not None:
        vx, vy = vx[:n_val], vy[:n_val]
    tx, vx = scale_images(tx), scale_images(vx)
    mean = tx.mean(axis=(0, 1, 2))
    meta = {"source": "cifar10", "classes": 10, "dir": str(directory), "channel_mean": mean.tolist()}
    return Dataset(Batch(tx - mean, ty.astype(np.int64)), Batch(vx - mean, vy.astype(np.int64)), meta)


def scoring_batch(ds: Dataset, n: int, seed: int) -> Batch:
    """Seeded subset of the training split used to score every architecture."""
    if n > len(ds.train):
        raise ContractError(f"scoring batch of {n} exceeds {len(ds.train)} training examples")
    rng = np.random.default_rng([seed, 0x5C0E])
    return ds.train.subset(np.sort(rng.choice(len(ds.train), size=n, replace=False)))
