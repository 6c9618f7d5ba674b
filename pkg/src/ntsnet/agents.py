"""Navigator, Teacher and Scrutinizer networks around a shared feature extractor.

The extractor is a small fully-convolutional stack (3x3 conv, optional
batch norm, ReLU, 2x2 max-pool). Its last map is the finest pyramid level;
extra stride-2 convolutions produce the coarser levels. The navigator turns
the pyramid into one informativeness score per anchor; teacher and
scrutinizer are fully-connected heads on pooled descriptors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import ParamSet, ShapeError, Tensor, ops
from .geometry import DESK_ANCHORS, AnchorSet, AnchorSpec, Proposal, nms_indices


STREAMS = ("image", "region")


@dataclass(frozen=True)
class ArchConfig:
    n_classes: int = 8
    input_side: int = 64
    region_side: int = 32
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 128)
    anchors: AnchorSpec = DESK_ANCHORS
    navigator_channels: int = 64
    teacher_hidden: int = 128
    n_scrutinized: int = 2
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.anchors.input_size != self.input_side:
            raise ValueError(
                f"anchor spec is for {self.anchors.input_size} px input, network for {self.input_side}"
            )
        pools = self.n_pools
        if pools > len(self.channels) or 2**pools * self.anchors.sides[0] != self.input_side:
            raise ValueError(
                f"input side {self.input_side} cannot be pooled down to the finest anchor map "
                f"{self.anchors.sides[0]} with {len(self.channels)} blocks"
            )
        if self.region_side % 2**pools:
            raise ValueError(f"region side {self.region_side} must be divisible by {2**pools}")
        if self.n_scrutinized < 0:
            raise ValueError("number of scrutinized regions must be non-negative")

    @property
    def n_pools(self) -> int:
        ratio = self.input_side / self.anchors.sides[0]
        return int(round(math.log2(ratio))) if ratio >= 1 else -1

    @property
    def descriptor_size(self) -> int:
        return self.channels[-1]

    @property
    def n_ratios(self) -> int:
        return len(self.anchors.ratios)


@dataclass
class FeatureBundle:
    pyramid: list[Tensor]
    descriptor: Tensor  # (N, D)


# ------------------------------------------------------------------ params


def init_params(arch: ArchConfig, seed: int = 0) -> ParamSet:
    """He-normal weights, zero biases; navigator heads start near zero."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, k, std=None):
        std = math.sqrt(2.0 / (cin * k * k)) if std is None else std
        p[f"{name}.w"] = rng.normal(0.0, std, size=(cout, cin, k, k))
        p[f"{name}.b"] = np.zeros(cout)

    def fc(name, cin, cout, std=None):
        std = math.sqrt(2.0 / cin) if std is None else std
        p[f"{name}.w"] = rng.normal(0.0, std, size=(cin, cout))
        p[f"{name}.b"] = np.zeros(cout)

    cin = arch.in_channels
    for i, cout in enumerate(arch.channels):
        conv(f"extractor.block{i}", cin, cout, 3)
        if arch.batch_norm:
            p[f"extractor.block{i}.bn.gamma"] = np.ones(cout)
            p[f"extractor.block{i}.bn.beta"] = np.zeros(cout)
            # full images and upsampled crops keep separate running statistics
            for stream in STREAMS:
                buffers[f"extractor.block{i}.bn.{stream}.running_mean"] = np.zeros(cout, dtype=np.float32)
                buffers[f"extractor.block{i}.bn.{stream}.running_var"] = np.ones(cout, dtype=np.float32)
        cin = cout
    top = arch.channels[-1]
    for level in range(1, len(arch.anchors.levels)):
        conv(f"extractor.tap{level}", top, top, 3)

    nc = arch.navigator_channels
    for level in range(len(arch.anchors.levels)):
        conv(f"navigator.lateral{level}", top, nc, 1)
        conv(f"navigator.head{level}", nc, arch.n_ratios, 1, std=0.01)

    d = arch.descriptor_size
    fc("teacher.fc1", d, arch.teacher_hidden)
    fc("teacher.fc2", arch.teacher_hidden, arch.n_classes, std=math.sqrt(1.0 / arch.teacher_hidden))
    fc("scrutinizer.fc", d * (arch.n_scrutinized + 1), arch.n_classes, std=math.sqrt(1.0 / (d * (arch.n_scrutinized + 1))))

    return ParamSet({n: Tensor(a.astype(np.float32)) for n, a in p.items()}, buffers)


# ---------------------------------------------------------------- forward


def to_nchw(images) -> np.ndarray:
    """(N, H, W, C) or (N, H, W) float images -> contiguous NCHW."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    if arr.ndim != 4:
        raise ShapeError("extract_features", f"expected a batch of images, got shape {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def extract_features(
    images,
    params: ParamSet,
    arch: ArchConfig,
    training: bool = False,
    update_stats: bool = False,
    with_pyramid: bool = True,
    stream: str | None = None,
) -> FeatureBundle:
    """Run the shared extractor on an NCHW batch (array or Tensor).

    Full images must be ``input_side`` square and yield the pyramid; region
    crops (``with_pyramid=False``) only need the pooled descriptor.
    ``stream`` picks the batch-norm running statistics ("image" or
    "region"); by default it follows ``with_pyramid``.
    """
    if stream is None:
        stream = "image" if with_pyramid else "region"
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}; expected one of {STREAMS}")
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    dtype = params["extractor.block0.w"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    if x.data.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError("extract_features", f"expected (N, {arch.in_channels}, H, W), got {x.shape}")
    if with_pyramid and x.shape[2:] != (arch.input_side, arch.input_side):
        raise ShapeError(
            "extract_features", f"input side {x.shape[2:]} does not match configured {arch.input_side}"
        )
    for i in range(len(arch.channels)):
        name = f"extractor.block{i}"
        x = ops.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding=1)
        if arch.batch_norm:
            x = ops.batch_norm(
                x,
                params[f"{name}.bn.gamma"],
                params[f"{name}.bn.beta"],
                params.buffers[f"{name}.bn.{stream}.running_mean"],
                params.buffers[f"{name}.bn.{stream}.running_var"],
                training=training,
                update_stats=update_stats,
            )
        x = ops.relu(x)
        if i < arch.n_pools:
            x = ops.max_pool2d(x)
    descriptor = ops.global_avg_pool(x)
    pyramid = [x]
    if with_pyramid:
        for level in range(1, len(arch.anchors.levels)):
            name = f"extractor.tap{level}"
            pyramid.append(ops.relu(ops.conv2d(pyramid[-1], params[f"{name}.w"], params[f"{name}.b"], stride=2, padding=1)))
    return FeatureBundle(pyramid, descriptor)


def navigator_forward(bundle: FeatureBundle, params: ParamSet, arch: ArchConfig, anchors: AnchorSet | None = None) -> Tensor:
    """Informativeness for every anchor, shape (N, A), in anchor enumeration order.

    Top-down pathway: each level's 1x1 lateral projection is summed with the
    nearest-upsampled result of the next coarser level; a 1x1 head then
    emits one score per ratio per cell.
    """
    sides = tuple(t.shape[2] for t in bundle.pyramid)
    if sides != arch.anchors.sides or any(t.shape[2] != t.shape[3] for t in bundle.pyramid):
        raise ShapeError("navigator_forward", f"pyramid sides {sides} do not match anchor levels {arch.anchors.sides}")
    n = bundle.pyramid[0].shape[0]
    merged: list[Tensor | None] = [None] * len(sides)
    for level in reversed(range(len(sides))):
        lat = ops.conv2d(bundle.pyramid[level], params[f"navigator.lateral{level}.w"], params[f"navigator.lateral{level}.b"])
        if level + 1 < len(sides):
            lat = ops.add(lat, ops.upsample_nearest(merged[level + 1], (sides[level], sides[level])))
        merged[level] = lat
    scores = []
    for level, side in enumerate(sides):
        h = ops.conv2d(ops.relu(merged[level]), params[f"navigator.head{level}.w"], params[f"navigator.head{level}.b"])
        # (N, R, s, s) -> (N, s, s, R): row, column, ratio order
        scores.append(ops.reshape(ops.transpose(h, (0, 2, 3, 1)), (n, side * side * arch.n_ratios)))
    out = ops.concat(scores, axis=1)
    if anchors is not None and len(anchors) != out.shape[1]:
        out = ops.take(out, anchors.slots, axis=1)
    return out


def propose(informativeness, anchors: AnchorSet, m: int, nms_threshold: float = 0.25) -> list[Proposal]:
    """Top-``m`` proposals after informativeness-ordered NMS."""
    if len(anchors) == 0:
        raise ValueError("no anchors to propose from")
    if m < 1:
        raise ValueError("need m >= 1")
    scores = np.asarray(informativeness, dtype=np.float64).reshape(-1)
    if scores.size != len(anchors):
        raise ShapeError("propose", f"{scores.size} scores for {len(anchors)} anchors")
    keep = nms_indices(anchors.boxes, scores, nms_threshold, max_keep=m)
    return [Proposal(anchors.region(int(i)), float(scores[i]), int(i)) for i in keep]


def teacher_logits(descriptors: Tensor, params: ParamSet) -> Tensor:
    h = ops.relu(ops.linear(descriptors, params["teacher.fc1.w"], params["teacher.fc1.b"]))
    return ops.linear(h, params["teacher.fc2.w"], params["teacher.fc2.b"])


def teacher_confidence(crops, params: ParamSet, arch: ArchConfig, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Class distributions (M, classes) and ground-truth confidences (M,) for region crops.

    ``crops`` is (M, side, side, C) as produced by ``crop_resize_batch``.
    """
    if not 0 <= label < arch.n_classes:
        raise ValueError(f"label {label} out of range for {arch.n_classes} classes")
    bundle = extract_features(to_nchw(crops), params, arch, with_pyramid=False)
    probs = ops.softmax(teacher_logits(bundle.descriptor, params)).data
    return probs, probs[:, label].copy()


def teaching_loss(region_confidences: Sequence[float], image_confidence: float) -> float:
    """-sum(log C(R_i)) - log C(X), each probability clamped at 1e-12."""
    c = np.clip(np.asarray(region_confidences, dtype=np.float64), 1e-12, None)
    return float(-np.log(c).sum() - np.log(max(float(image_confidence), 1e-12)))


def scrutinize_logits(full_descriptor: Tensor, region_descriptors: Sequence[Tensor], params: ParamSet, arch: ArchConfig) -> Tensor:
    """Fuse the image descriptor with K region descriptors (best first) into class logits."""
    if len(region_descriptors) != arch.n_scrutinized:
        raise ShapeError("scrutinize", f"expected {arch.n_scrutinized} region descriptors, got {len(region_descriptors)}")
    d = arch.descriptor_size
    for t in (full_descriptor, *region_descriptors):
        if t.data.ndim != 2 or t.shape[1] != d:
            raise ShapeError("scrutinize", f"descriptor shape {t.shape} does not have length {d}")
    fused = ops.concat([full_descriptor, *region_descriptors], axis=1) if region_descriptors else full_descriptor
    return ops.linear(fused, params["scrutinizer.fc.w"], params["scrutinizer.fc.b"])


def scrutinize(full_descriptor, region_descriptors, params: ParamSet, arch: ArchConfig) -> np.ndarray:
    full = full_descriptor if isinstance(full_descriptor, Tensor) else Tensor(np.atleast_2d(full_descriptor))
    regions = [r if isinstance(r, Tensor) else Tensor(np.atleast_2d(r)) for r in region_descriptors]
    return ops.softmax(scrutinize_logits(full, regions, params, arch)).data


def scrutinizing_loss(distribution: Sequence[float], label: int) -> float:
    p = float(np.asarray(distribution, dtype=np.float64).reshape(-1)[label])
    return float(-np.log(max(p, 1e-12)))
