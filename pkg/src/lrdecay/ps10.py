"""Pattern Separation 10: a synthetic 10-class dataset with known pattern complexity.

Every class owns a bank of *simple* patterns (few per class) and a bank of
*complex* patterns (many per class). A pattern is a colour, i.e. a point in
``[0, 1]^3``, painted uniformly over an ``H x W`` image. Images have six
channels: channels 0-2 carry a simple pattern and channels 3-5 a complex one.
Each clean example populates exactly one of the two slots and leaves the other
at zero.

Binary container (little-endian)::

    magic        4 bytes   b"PS10"
    version      u32       currently 1
    spec_len     u32       length of the spec block in bytes
    spec         bytes     UTF-8 JSON: Ps10Spec fields plus "split"
    n_examples   u32
    records      n_examples x {label u8, subset u8, pattern_id u32,
                               original_label u8, pixels f32[6][H][W]}

``pattern_id`` is ``0xFFFFFFFF`` for noise examples. The pattern bank is not
stored: it is a deterministic function of the spec and is regenerated on load.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import GenerationError, ValidationError

__all__ = [
    "Subset",
    "Ps10Spec",
    "PatternBank",
    "Example",
    "Ps10Dataset",
    "build_bank",
    "generate",
    "inject_noise",
    "complexity",
    "nearest_pattern_labels",
    "save",
    "load",
    "write_sidecar",
]

MAGIC = b"PS10"
VERSION = 1
NUM_CHANNELS = 6
NO_PATTERN = 0xFFFFFFFF

NOISE_SOURCES = ("fresh", "pattern", "dual")

_BANK_STREAM = {"simple": 11, "complex": 12}
_SPLIT_STREAM = {"train": 1, "test": 2}


class Subset(IntEnum):
    SIMPLE_ONLY = 0
    COMPLEX_ONLY = 1
    NOISE = 2


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class Ps10Spec:
    num_classes: int = 10
    simple_per_class: int = 10
    complex_per_class: int = 100
    examples_total: int = 10000
    noise_fraction: float = 0.0
    height: int = 32
    width: int = 32
    seed: int = 0
    margin: float = 0.05
    # "fresh": noise examples carry a uniformly drawn colour whose reference
    # class is its nearest bank pattern. "pattern": they reuse an exact bank
    # colour. "dual": like "fresh" but both slots get an independent uniform
    # colour, so nothing ties the example to any bank pattern; the reference
    # class comes from the complex slot. In every mode the label is resampled
    # away from the reference class.
    noise_source: str = "fresh"
    test_total: int = 2000

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.simple_per_class < 1 or self.complex_per_class < 1:
            raise ValidationError("patterns per class must be >= 1")
        if self.examples_total < self.num_classes:
            raise ValidationError(
                f"examples_total ({self.examples_total}) must be >= num_classes ({self.num_classes})"
            )
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValidationError("noise_fraction must lie in [0, 1)")
        if self.height < 1 or self.width < 1:
            raise ValidationError("spatial dims must be >= 1")
        if not self.margin > 0:
            raise ValidationError("margin must be positive")
        if self.noise_source not in NOISE_SOURCES:
            raise ValidationError(f"noise_source must be one of {NOISE_SOURCES}")
        if self.test_total < 0:
            raise ValidationError("test_total must be nonnegative")
        if self.num_classes > 255:
            raise ValidationError("at most 255 classes fit the u8 label field")

    @property
    def num_noise(self) -> int:
        return round_half_up(self.noise_fraction * self.examples_total)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Ps10Spec":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class PatternBank:
    """Per-class colour patterns; ``simple`` is ``(C, S, 3)``, ``complex`` is ``(C, K, 3)``."""

    simple: np.ndarray
    complex: np.ndarray

    def patterns(self, kind: str) -> np.ndarray:
        if kind not in ("simple", "complex"):
            raise ValidationError(f"unknown pattern kind {kind!r}")
        return self.simple if kind == "simple" else self.complex

    def complexity(self, kind: str) -> float:
        """Complexity in bits when patterns are drawn uniformly within each class."""
        bank = self.patterns(kind)
        c, k, _ = bank.shape
        return complexity(np.full((c, k), 1.0 / k))

    def min_interclass_distance(self, kind: str) -> float:
        bank = self.patterns(kind)
        c = bank.shape[0]
        best = np.inf
        for i in range(c):
            for j in range(i + 1, c):
                d = np.linalg.norm(bank[i][:, None, :] - bank[j][None, :, :], axis=-1)
                best = min(best, float(d.min()))
        return best

    def to_dict(self) -> dict:
        return {"simple": self.simple.tolist(), "complex": self.complex.tolist()}


def _sample_bank(rng, num_classes, per_class, margin, max_tries=10_000):
    total = num_classes * per_class
    accepted = np.empty((total, 3))
    owner = np.empty(total, dtype=np.int64)
    n = 0
    # Round-robin over classes so no class is starved late in the fill.
    for slot in range(total):
        cls = slot % num_classes
        for _ in range(max_tries):
            cand = rng.uniform(0.0, 1.0, size=3).astype(np.float32).astype(np.float64)
            if n:
                other = owner[:n] != cls
                if other.any():
                    d2 = ((accepted[:n][other] - cand) ** 2).sum(axis=1)
                    if d2.min() < margin * margin:
                        continue
                if (((accepted[:n] - cand) ** 2).sum(axis=1) == 0).any():
                    continue
            accepted[n] = cand
            owner[n] = cls
            n += 1
            break
        else:
            raise GenerationError(
                f"could not place pattern {slot} with margin {margin} after {max_tries} tries"
            )
    out = np.empty((num_classes, per_class, 3))
    for cls in range(num_classes):
        out[cls] = accepted[owner == cls]
    return out


def build_bank(spec: Ps10Spec) -> PatternBank:
    def stream(kind):
        return np.random.default_rng(np.random.SeedSequence([spec.seed, _BANK_STREAM[kind]]))

    simple = _sample_bank(stream("simple"), spec.num_classes, spec.simple_per_class, spec.margin)
    complex_ = _sample_bank(stream("complex"), spec.num_classes, spec.complex_per_class, spec.margin)
    return PatternBank(simple=simple, complex=complex_)


@dataclass(frozen=True)
class Example:
    color: np.ndarray  # the 6 per-channel values
    label: int
    subset: Subset
    pattern_id: int | None
    original_label: int
    height: int
    width: int

    @property
    def pixels(self) -> np.ndarray:
        """Image of shape ``(6, H, W)``; every channel is spatially constant."""
        return np.broadcast_to(
            self.color[:, None, None], (NUM_CHANNELS, self.height, self.width)
        ).copy()


@dataclass
class Ps10Dataset:
    spec: Ps10Spec
    bank: PatternBank
    split: str
    colors: np.ndarray  # (N, 6) float64, float32-representable
    labels: np.ndarray  # (N,) int64
    subsets: np.ndarray  # (N,) int64 Subset codes
    pattern_ids: np.ndarray  # (N,) int64, -1 for noise
    original_labels: np.ndarray  # (N,) int64

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i) -> Example:
        pid = int(self.pattern_ids[i])
        return Example(
            color=self.colors[i].copy(),
            label=int(self.labels[i]),
            subset=Subset(int(self.subsets[i])),
            pattern_id=None if pid < 0 else pid,
            original_label=int(self.original_labels[i]),
            height=self.spec.height,
            width=self.spec.width,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def examples(self) -> list[Example]:
        return list(self)

    @property
    def features(self) -> np.ndarray:
        """Flattened per-example inputs: the 6 channel values (lossless by spatial constancy)."""
        return self.colors

    def images(self, index=None) -> np.ndarray:
        colors = self.colors if index is None else self.colors[index]
        shape = (colors.shape[0], NUM_CHANNELS, self.spec.height, self.spec.width)
        return np.broadcast_to(colors.astype(np.float32)[:, :, None, None], shape).copy()

    def counts(self) -> dict:
        return {s.name: int((self.subsets == s).sum()) for s in Subset}

    def mask(self, subset: Subset) -> np.ndarray:
        return self.subsets == subset

    def subset_view(self, index) -> "Ps10Dataset":
        return replace(
            self,
            colors=self.colors[index],
            labels=self.labels[index],
            subsets=self.subsets[index],
            pattern_ids=self.pattern_ids[index],
            original_labels=self.original_labels[index],
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        _write(self, buf)
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def complexity(distributions, priors=None) -> float:
    """Expected class-conditional entropy ``sum_y P(y) H(P(x | y))`` in bits.

    ``distributions`` holds one probability vector per class (a 2-D array or a
    ragged list). ``priors`` defaults to uniform.
    """
    dists = [np.asarray(d, dtype=np.float64) for d in distributions]
    if not dists:
        raise ValidationError("need at least one class distribution")
    for i, d in enumerate(dists):
        if d.ndim != 1 or d.size == 0 or (d < 0).any() or not math.isclose(d.sum(), 1.0, abs_tol=1e-9):
            raise ValidationError(f"distribution for class {i} is not normalized")
    if priors is None:
        priors = np.full(len(dists), 1.0 / len(dists))
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (len(dists),) or (priors < 0).any() or not math.isclose(priors.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError("class priors are not normalized")
    total = 0.0
    for p_y, d in zip(priors, dists):
        nz = d[d > 0]
        total += p_y * float(-(nz * np.log2(nz)).sum())
    return total


def _balanced_labels(rng, n, num_classes):
    return rng.permutation(np.arange(n) % num_classes)


def _noisy_labels(rng, true_labels, num_classes):
    # Uniform over the num_classes - 1 incorrect classes.
    return (true_labels + rng.integers(1, num_classes, size=true_labels.shape[0])) % num_classes


def _place(colors, slots, values):
    colors[slots == 0, 0:3] = values[slots == 0]
    colors[slots == 1, 3:6] = values[slots == 1]


def generate(spec: Ps10Spec, split: str = "train") -> Ps10Dataset:
    """Draw one split. The test split is clean and has ``spec.test_total`` examples."""
    if split not in _SPLIT_STREAM:
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    bank = build_bank(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _SPLIT_STREAM[split]]))
    c = spec.num_classes

    if split == "train":
        n, n_noise = spec.examples_total, spec.num_noise
    else:
        n, n_noise = spec.test_total, 0
    n_clean = n - n_noise
    n_simple = n_clean - n_clean // 2

    slots = np.concatenate(
        [np.zeros(n_simple, np.int64), np.ones(n_clean - n_simple, np.int64), np.arange(n_noise) % 2]
    )
    true = np.concatenate([_balanced_labels(rng, n_clean, c), _balanced_labels(rng, n_noise, c)])
    pids = np.where(
        slots == 0,
        rng.integers(0, spec.simple_per_class, size=n),
        rng.integers(0, spec.complex_per_class, size=n),
    )
    values = np.empty((n, 3))
    on_simple = slots == 0
    values[on_simple] = bank.simple[true[on_simple], pids[on_simple]]
    values[~on_simple] = bank.complex[true[~on_simple], pids[~on_simple]]

    subsets = slots.copy()
    labels = true.copy()
    noise = np.arange(n) >= n_clean
    if spec.noise_source == "dual":
        slots[noise] = 1
    if n_noise:
        if spec.noise_source in ("fresh", "dual"):
            fresh = rng.uniform(0.0, 1.0, size=(n_noise, 3)).astype(np.float32).astype(np.float64)
            values[noise] = fresh
            true[noise] = _nearest_class(bank, fresh, slots[noise])
        labels[noise] = _noisy_labels(rng, true[noise], c)
        subsets[noise] = Subset.NOISE
        pids[noise] = -1

    colors = np.zeros((n, NUM_CHANNELS))
    _place(colors, slots, values.astype(np.float32).astype(np.float64))
    if n_noise and spec.noise_source == "dual":
        colors[noise, 0:3] = rng.uniform(0.0, 1.0, size=(n_noise, 3)).astype(np.float32)
    order = rng.permutation(n)
    return Ps10Dataset(
        spec=spec,
        bank=bank,
        split=split,
        colors=colors[order],
        labels=labels[order],
        subsets=subsets[order],
        pattern_ids=pids[order],
        original_labels=true[order],
    )


def inject_noise(dataset: Ps10Dataset, fraction: float, seed: int) -> Ps10Dataset:
    """Relabel ``round(fraction * N)`` clean examples to a uniformly drawn wrong class.

    Images are left untouched; the true label is kept in ``original_labels``.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValidationError("fraction must lie in [0, 1)")
    k = round_half_up(fraction * len(dataset))
    if k == 0:
        return dataset
    clean = np.flatnonzero(dataset.subsets != Subset.NOISE)
    if k > clean.size:
        raise ValidationError(f"cannot mark {k} examples noisy; only {clean.size} clean examples remain")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    chosen = np.sort(rng.choice(clean, size=k, replace=False))
    out = dataset.subset_view(slice(None))
    out.colors = dataset.colors.copy()
    out.labels = dataset.labels.copy()
    out.subsets = dataset.subsets.copy()
    out.pattern_ids = dataset.pattern_ids.copy()
    out.original_labels = dataset.original_labels.copy()

    out.original_labels[chosen] = dataset.labels[chosen]
    out.labels[chosen] = _noisy_labels(rng, dataset.labels[chosen], dataset.spec.num_classes)
    out.subsets[chosen] = Subset.NOISE
    out.pattern_ids[chosen] = -1
    return out


def _nearest_class(bank: PatternBank, values, slots, chunk: int = 4096) -> np.ndarray:
    out = np.empty(values.shape[0], dtype=np.int64)
    for slot, kind in ((0, "simple"), (1, "complex")):
        b = bank.patterns(kind)
        flat = b.reshape(-1, 3)
        owners = np.repeat(np.arange(b.shape[0]), b.shape[1])
        idx = np.flatnonzero(slots == slot)
        for start in range(0, idx.size, chunk):
            part = idx[start : start + chunk]
            d2 = ((values[part][:, None, :] - flat[None, :, :]) ** 2).sum(axis=-1)
            out[part] = owners[d2.argmin(axis=1)]
    return out


def nearest_pattern_labels(dataset: Ps10Dataset) -> np.ndarray:
    """Brute-force nearest bank pattern in whichever slot is populated."""
    complex_slot = np.abs(dataset.colors[:, 3:6]).sum(axis=1) > 0
    values = np.where(complex_slot[:, None], dataset.colors[:, 3:6], dataset.colors[:, 0:3])
    return _nearest_class(dataset.bank, values, complex_slot.astype(np.int64))


def _record_dtype(spec: Ps10Spec) -> np.dtype:
    return np.dtype(
        [
            ("label", "u1"),
            ("subset", "u1"),
            ("pattern_id", "<u4"),
            ("original_label", "u1"),
            ("pixels", "<f4", (NUM_CHANNELS, spec.height, spec.width)),
        ]
    )


def _spec_block(dataset: Ps10Dataset) -> bytes:
    payload = dict(dataset.spec.to_dict(), split=dataset.split)
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write(dataset: Ps10Dataset, fh, chunk: int = 1024):
    block = _spec_block(dataset)
    fh.write(MAGIC)
    fh.write(np.array([VERSION, len(block)], dtype="<u4").tobytes())
    fh.write(block)
    fh.write(np.array([len(dataset)], dtype="<u4").tobytes())
    dtype = _record_dtype(dataset.spec)
    for start in range(0, len(dataset), chunk):
        sl = slice(start, min(start + chunk, len(dataset)))
        rec = np.zeros(sl.stop - sl.start, dtype=dtype)
        rec["label"] = dataset.labels[sl]
        rec["subset"] = dataset.subsets[sl]
        pid = dataset.pattern_ids[sl]
        rec["pattern_id"] = np.where(pid < 0, NO_PATTERN, pid).astype(np.uint32)
        rec["original_label"] = dataset.original_labels[sl]
        rec["pixels"] = dataset.images(sl)
        fh.write(rec.tobytes())


def save(dataset: Ps10Dataset, path) -> None:
    with open(path, "wb") as fh:
        _write(dataset, fh)


def load(path) -> Ps10Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a PS10 file (bad magic)")
    version, spec_len = np.frombuffer(raw, dtype="<u4", count=2, offset=4)
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    off = 12
    meta = json.loads(raw[off : off + spec_len].decode("utf-8"))
    off += int(spec_len)
    split = meta.pop("split")
    spec = Ps10Spec.from_dict(meta)
    (n,) = np.frombuffer(raw, dtype="<u4", count=1, offset=off)
    off += 4
    dtype = _record_dtype(spec)
    if len(raw) - off != int(n) * dtype.itemsize:
        raise ValidationError(f"{path}: truncated or oversized record block")
    rec = np.frombuffer(raw, dtype=dtype, count=int(n), offset=off)
    pix = rec["pixels"].reshape(int(n), NUM_CHANNELS, -1)
    if n and (pix.max(axis=2) != pix.min(axis=2)).any():
        raise ValidationError(f"{path}: pixels are not spatially constant")
    pid = rec["pattern_id"].astype(np.int64)
    pid[rec["pattern_id"] == NO_PATTERN] = -1
    return Ps10Dataset(
        spec=spec,
        bank=build_bank(spec),
        split=split,
        colors=pix[:, :, 0].astype(np.float64),
        labels=rec["label"].astype(np.int64),
        subsets=rec["subset"].astype(np.int64),
        pattern_ids=pid,
        original_labels=rec["original_label"].astype(np.int64),
    )


def write_sidecar(dataset: Ps10Dataset, path, data_path=None) -> dict:
    doc = {
        "spec": dataset.spec.to_dict(),
        "split": dataset.split,
        "num_examples": len(dataset),
        "counts": dataset.counts(),
        "complexity_bits": {
            "simple": dataset.bank.complexity("simple"),
            "complex": dataset.bank.complexity("complex"),
        },
        "content_sha256": dataset.content_hash(),
        "bank": dataset.bank.to_dict(),
    }
    if data_path is not None:
        doc["data_file"] = Path(data_path).name
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
