"""Synthetic fine-grained images with a planted class-bearing patch.

Each image holds one framed class patch (an oriented binary grating whose
orientation encodes the label) at a random location, distractors that are
slices of random class patches, and low-amplitude background noise. A
partial view of the real patch looks like a distractor, so reading the label
means finding the whole patch. The ground-truth box is kept with the sample
so localization can be scored."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Region

SPLITS = {"train": 0, "test": 1}


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    image_side: int = 64
    patch_side: int = 16
    n_distractors: int = 2
    noise_amplitude: float = 0.3
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    channels: int = 1
    # grating period in pixels
    period: float = 6.0
    min_pattern_distance: float = 0.25

    def __post_init__(self):
        if self.n_classes < 2:
            raise SynthError("need at least two classes")
        if not 0 < self.patch_side < self.image_side:
            raise SynthError(f"patch side {self.patch_side} must be below image side {self.image_side}")
        if self.n_train < 1 or self.n_test < 1:
            raise SynthError("train and test counts must be at least 1")
        if self.n_distractors < 0 or self.noise_amplitude < 0 or self.channels < 1:
            raise SynthError("distractor count, noise amplitude and channels must be non-negative")


@dataclass
class Sample:
    image: np.ndarray  # (side, side, channels) float32 in [0, 1]
    label: int
    gt_region: Region
    seed: int = field(default=0, repr=False)


def _quantize(x: np.ndarray) -> np.ndarray:
    # multiples of 1/255 survive the 8-bit PGM round trip exactly
    return (np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _grating(side: int, theta: float, phase: float, period: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    return (wave > 0).astype(np.float32)


def make_class_pattern(class_id: int, patch_side: int, seed: int, n_classes: int = 8, period: float = 6.0) -> np.ndarray:
    """Framed binary grating at orientation class_id * pi / n_classes, seeded phase.

    The one-pixel bright frame marks the patch as the informative one; the
    grating inside carries the class.
    """
    if not 0 <= class_id < n_classes:
        raise SynthError(f"class id {class_id} out of range for {n_classes} classes")
    rng = np.random.default_rng([seed, class_id])
    patch = _grating(patch_side, np.pi * class_id / n_classes, rng.uniform(0, 2 * np.pi), period)
    patch[[0, -1], :] = 1.0
    patch[:, [0, -1]] = 1.0
    return patch


def class_patterns(config: SynthConfig) -> tuple[np.ndarray, int]:
    """All class templates plus the seed that produced them.

    Starting from the master seed, the seed is bumped until every pair of
    templates differs in at least ``min_pattern_distance`` of their pixels.
    """
    seed = config.seed
    for _ in range(1000):
        bank = np.stack(
            [make_class_pattern(c, config.patch_side, seed, config.n_classes, config.period) for c in range(config.n_classes)]
        )
        flat = bank.reshape(config.n_classes, -1)
        dist = (flat[:, None, :] != flat[None, :, :]).mean(axis=-1)
        off = dist[~np.eye(config.n_classes, dtype=bool)]
        if off.min() >= config.min_pattern_distance:
            return bank, seed
        seed += 1
    raise SynthError("could not find mutually distinct class patterns")


def _distractor(rng: np.random.Generator, patterns: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """A slice of a random class template over background noise.

    The slice keeps 3/8 to 5/8 of the template along one axis, cut from a
    random side, so it looks like a partial view of a real patch.
    """
    ps = patterns.shape[1]
    piece = noise.copy()
    template = patterns[int(rng.integers(len(patterns)))]
    width = int(rng.integers(3 * ps // 8, 5 * ps // 8 + 1))
    side = int(rng.integers(4))
    if side == 0:
        piece[:, :width] = template[:, :width]
    elif side == 1:
        piece[:, ps - width :] = template[:, ps - width :]
    elif side == 2:
        piece[:width] = template[:width]
    else:
        piece[ps - width :] = template[ps - width :]
    return piece


def _overlaps(a: tuple[int, int], b: tuple[int, int], side: int) -> bool:
    return abs(a[0] - b[0]) < side and abs(a[1] - b[1]) < side


def generate_sample(class_id: int, sample_seed: int, config: SynthConfig, patterns: np.ndarray | None = None) -> Sample:
    if not 0 <= class_id < config.n_classes:
        raise SynthError(f"class id {class_id} out of range for {config.n_classes} classes")
    if patterns is None:
        patterns, _ = class_patterns(config)
    rng = np.random.default_rng(sample_seed)
    side, ps = config.image_side, config.patch_side
    image = rng.uniform(0.0, config.noise_amplitude, size=(side, side)).astype(np.float32)

    span = side - ps + 1
    placed: list[tuple[int, int]] = [(int(rng.integers(span)), int(rng.integers(span)))]
    for _ in range(config.n_distractors):
        for _attempt in range(100):
            pos = (int(rng.integers(span)), int(rng.integers(span)))
            if not any(_overlaps(pos, q, ps) for q in placed):
                placed.append(pos)
                break
        else:
            raise SynthError(
                f"could not place {config.n_distractors} non-overlapping distractors; use fewer distractors"
            )
    for x, y in placed[1:]:
        image[y : y + ps, x : x + ps] = _distractor(rng, patterns, image[y : y + ps, x : x + ps])
    x, y = placed[0]
    image[y : y + ps, x : x + ps] = patterns[class_id]

    image = np.repeat(_quantize(image)[:, :, None], config.channels, axis=2)
    return Sample(image, int(class_id), Region(float(x), float(y), float(x + ps), float(y + ps)), int(sample_seed))


def sample_seed(master_seed: int, split: str, index: int) -> int:
    state = np.random.SeedSequence([master_seed, SPLITS[split], index]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


def generate_split(config: SynthConfig, split: str, patterns: np.ndarray | None = None) -> list[Sample]:
    n = config.n_train if split == "train" else config.n_test
    if patterns is None:
        patterns, _ = class_patterns(config)
    return [generate_sample(i % config.n_classes, sample_seed(config.seed, split, i), config, patterns) for i in range(n)]


def generate_dataset(config: SynthConfig) -> tuple[list[Sample], list[Sample]]:
    """Class-balanced train and test splits (label = index mod n_classes)."""
    patterns, _ = class_patterns(config)
    train_seeds = {sample_seed(config.seed, "train", i) for i in range(config.n_train)}
    test_seeds = {sample_seed(config.seed, "test", i) for i in range(config.n_test)}
    if len(train_seeds) != config.n_train or len(test_seeds) != config.n_test or train_seeds & test_seeds:
        raise SynthError("sample seed collision between or within splits")
    return generate_split(config, "train", patterns), generate_split(config, "test", patterns)


def nearest_template_accuracy(samples: list[Sample], config: SynthConfig, at_random: bool = False, seed: int = 0) -> float:
    """Accuracy of matching a patch-sized window against the class templates.

    With ``at_random`` the window is placed uniformly at random instead of at
    the ground-truth patch.
    """
    patterns, _ = class_patterns(config)
    flat = patterns.reshape(config.n_classes, -1)
    rng = np.random.default_rng(seed)
    ps = config.patch_side
    span = config.image_side - ps + 1
    hits = 0
    for s in samples:
        if at_random:
            x, y = int(rng.integers(span)), int(rng.integers(span))
        else:
            x, y = int(s.gt_region.x_min), int(s.gt_region.y_min)
        window = s.image[y : y + ps, x : x + ps, 0].reshape(1, -1)
        pred = int(np.argmin(((flat - window) ** 2).sum(axis=1)))
        hits += pred == s.label
    return hits / len(samples)


# ------------------------------------------------------------------ file I/O


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) from a float image in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    px = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM as an (H, W, 1) float32 array in [0, 1]."""
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    return (data.reshape(h, w, 1).astype(np.float32) / maxval).astype(np.float32)


def save_dataset(root, config: SynthConfig, train: list[Sample], test: list[Sample]) -> None:
    """Write ``meta.json`` plus ``<split>/img_%06d.ppm`` and ``<split>/labels.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    _, pattern_seed = class_patterns(config)
    meta = {
        "config": asdict(config),
        "pattern_seed": pattern_seed,
        "seeds": {"train": [s.seed for s in train], "test": [s.seed for s in test]},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for split, samples in (("train", train), ("test", test)):
        d = root / split
        d.mkdir(exist_ok=True)
        with open(d / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "label", "x_min", "y_min", "x_max", "y_max"])
            for i, s in enumerate(samples):
                write_pgm(d / f"img_{i:06d}.ppm", s.image)
                r = s.gt_region
                writer.writerow([i, s.label, int(r.x_min), int(r.y_min), int(r.x_max), int(r.y_max)])


def load_dataset(root) -> tuple[SynthConfig, list[Sample], list[Sample]]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    config = SynthConfig(**meta["config"])
    splits = []
    for split in ("train", "test"):
        d = root / split
        seeds = meta["seeds"][split]
        samples = []
        with open(d / "labels.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                i = int(row["index"])
                image = read_pgm(d / f"img_{i:06d}.ppm")
                if config.channels > 1:
                    image = np.repeat(image, config.channels, axis=2)
                region = Region(float(row["x_min"]), float(row["y_min"]), float(row["x_max"]), float(row["y_max"]))
                samples.append(Sample(image, int(row["label"]), region, int(seeds[i])))
        splits.append(samples)
    return config, splits[0], splits[1]
