"""Joint training of navigator, teacher and scrutinizer, plus evaluation.

One step over a batch: extract features of the full images, score every
anchor, keep the top-M after NMS, crop and re-extract those regions,
score them with the teacher, then combine

    L_total = L_I + lambda * L_S + mu * L_C

averaged over the batch, backpropagate once and take one momentum-SGD step.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import (
    ArchConfig,
    extract_features,
    init_params,
    navigator_forward,
    propose,
    scrutinize_logits,
    teacher_logits,
    to_nchw,
)
from .diffcore import OptimState, ParamSet, Tensor, no_grad, note_branch, ops, save_checkpoint, sgd_momentum_step
from .geometry import DESK_ANCHORS, AnchorSet, AnchorSpec, Proposal, crop_resize_batch, generate_anchors, iou_matrix
from .ranking import ScorePair, kendall_tau, navigation_loss_op
from .synthdata import Sample

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    n_regions: int = 6  # M
    n_scrutinized: int = 2  # K
    lam: float = 1.0  # weight of the scrutinizing loss
    mu: float = 1.0  # weight of the teaching loss
    nms_threshold: float = 0.25
    anchors: AnchorSpec = DESK_ANCHORS
    input_side: int = 64
    region_side: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 128)
    navigator_channels: int = 64
    teacher_hidden: int = 128
    batch_norm: bool = True
    lr: float = 0.001
    # epoch index at which lr drops by 10x; None -> 60% of ``epochs``
    lr_decay_epoch: int | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 12
    batch_size: int = 16
    seed: int = 0
    navigation_loss_enabled: bool = True
    margin: float = 1.0
    frozen: tuple[str, ...] = ()
    eval_batch_size: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "frozen", tuple(self.frozen))
        if self.n_regions < 1:
            raise ValueError("M (n_regions) must be at least 1")
        if not 0 <= self.n_scrutinized <= self.n_regions:
            raise ValueError(f"need 0 <= K <= M, got K={self.n_scrutinized}, M={self.n_regions}")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss weights lambda and mu must be non-negative")
        if not 0 < self.nms_threshold < 1:
            raise ValueError("NMS threshold must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")
        if self.anchors.input_size != self.input_side:
            raise ValueError("anchor spec input size differs from input side")

    def arch(self, n_classes: int, in_channels: int = 1) -> ArchConfig:
        return ArchConfig(
            n_classes=n_classes,
            input_side=self.input_side,
            region_side=self.region_side,
            in_channels=in_channels,
            channels=self.channels,
            anchors=self.anchors,
            navigator_channels=self.navigator_channels,
            teacher_hidden=self.teacher_hidden,
            n_scrutinized=self.n_scrutinized,
            batch_norm=self.batch_norm,
        )

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(math.ceil(0.6 * self.epochs))


def total_loss(l_i: float, l_s: float, l_c: float, lam: float = 1.0, mu: float = 1.0) -> float:
    return l_i + lam * l_s + mu * l_c


@dataclass
class StepReport:
    L_I: float
    L_C: float
    L_S: float
    L_total: float
    proposals: list[list[Proposal]]
    confidences: list[np.ndarray]
    shortfall: int = 0


@dataclass
class BatchForward:
    """Everything one batch forward produces; ``loss`` is the batch mean."""

    loss: Tensor
    L_I: float
    L_C: float
    L_S: float
    proposals: list[list[Proposal]]
    confidences: list[np.ndarray]
    shortfall: int


class NTSModel:
    """Bundle of architecture, anchors and training hyperparameters."""

    def __init__(self, config: TrainConfig, n_classes: int, in_channels: int = 1):
        self.config = config
        self.arch = config.arch(n_classes, in_channels)
        self.anchors: AnchorSet = generate_anchors(config.anchors)

    def init_params(self, seed: int | None = None) -> ParamSet:
        return init_params(self.arch, self.config.seed if seed is None else seed)

    # -------------------------------------------------------------- forward

    def forward(
        self,
        params: ParamSet,
        images: np.ndarray,
        labels: Sequence[int],
        training: bool = True,
        update_stats: bool = False,
    ) -> BatchForward:
        cfg, arch = self.config, self.arch
        labels = np.asarray(labels, dtype=np.intp).reshape(-1)
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, :, :, None]
        n = len(labels)
        if images.shape[0] != n:
            raise ValueError(f"{images.shape[0]} images for {n} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= arch.n_classes):
            raise ValueError(f"labels out of range for {arch.n_classes} classes")

        full = extract_features(to_nchw(images), params, arch, training=training, update_stats=update_stats)
        scores = navigator_forward(full, params, arch, self.anchors)
        a = scores.shape[1]
        sd = scores.data

        proposals = [propose(sd[i], self.anchors, cfg.n_regions, cfg.nms_threshold) for i in range(n)]
        chosen = [np.array([p.anchor_index for p in props], dtype=np.intp) for props in proposals]
        note_branch("propose", np.concatenate(chosen))
        shortfall = sum(cfg.n_regions - len(c) for c in chosen)

        crops = np.concatenate(
            [crop_resize_batch(images[i], self.anchors.boxes[chosen[i]], cfg.region_side) for i in range(n)]
        )
        offsets = np.concatenate([[0], np.cumsum([len(c) for c in chosen])])
        region = extract_features(
            to_nchw(crops), params, arch, training=training, update_stats=update_stats, with_pyramid=False
        )
        crop_logits = teacher_logits(region.descriptor, params)
        full_logits = teacher_logits(full.descriptor, params)

        crop_labels = np.repeat(labels, np.diff(offsets))
        z = crop_logits.data.astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        conf_all = probs[np.arange(len(crop_labels)), crop_labels]
        confidences = [conf_all[offsets[i] : offsets[i + 1]] for i in range(n)]
        for i, props in enumerate(proposals):
            for p, c in zip(props, confidences[i]):
                p.confidence = float(c)

        flat_scores = ops.reshape(scores, (n * a,))
        nav_terms = [
            navigation_loss_op(ops.take(flat_scores, i * a + chosen[i]), confidences[i], cfg.margin) for i in range(n)
        ]
        l_i = ops.sum_(ops.concat([ops.reshape(t, (1,)) for t in nav_terms]))
        l_c = ops.add(ops.sum_(ops.cross_entropy(crop_logits, crop_labels)), ops.sum_(ops.cross_entropy(full_logits, labels)))

        k = cfg.n_scrutinized
        region_desc = []
        for j in range(k):
            # short lists repeat their last region so the fused width stays fixed
            rows = [offsets[i] + min(j, len(chosen[i]) - 1) for i in range(n)]
            region_desc.append(ops.take(region.descriptor, rows, axis=0))
        s_logits = scrutinize_logits(full.descriptor, region_desc, params, arch)
        l_s = ops.sum_(ops.cross_entropy(s_logits, labels))

        # combine in float64 so the reported parts add up to the total
        l_i, l_c, l_s = (ops.cast(t, np.float64) for t in (l_i, l_c, l_s))
        terms = [ops.mul(l_s, cfg.lam), ops.mul(l_c, cfg.mu)]
        if cfg.navigation_loss_enabled:
            terms.insert(0, l_i)
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
        loss = ops.mul(total, 1.0 / n)
        return BatchForward(loss, l_i.item() / n, l_c.item() / n, l_s.item() / n, proposals, confidences, shortfall)

    def loss_graph(self, images, labels, training: bool = True) -> Callable[[ParamSet], Tensor]:
        """Closure params -> scalar batch loss, for gradient checking."""
        return lambda params: self.forward(params, images, labels, training=training).loss

    # ---------------------------------------------------------------- infer

    def infer(self, params: ParamSet, images: np.ndarray, k: int | None = None):
        """Eval-mode forward: class probabilities, top-M proposals with confidences."""
        cfg, arch = self.config, self.arch
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[:, :, :, None]
        with no_grad():
            full = extract_features(to_nchw(images), params, arch)
            scores = navigator_forward(full, params, arch, self.anchors).data
            proposals = [propose(scores[i], self.anchors, cfg.n_regions, cfg.nms_threshold) for i in range(len(images))]
            chosen = [np.array([p.anchor_index for p in props], dtype=np.intp) for props in proposals]
            crops = np.concatenate(
                [crop_resize_batch(images[i], self.anchors.boxes[chosen[i]], cfg.region_side) for i in range(len(images))]
            )
            offsets = np.concatenate([[0], np.cumsum([len(c) for c in chosen])])
            region = extract_features(to_nchw(crops), params, arch, with_pyramid=False)
            region_probs = ops.softmax(teacher_logits(region.descriptor, params)).data
            region_desc = [
                ops.take(region.descriptor, [offsets[i] + min(j, len(chosen[i]) - 1) for i in range(len(images))], axis=0)
                for j in range(cfg.n_scrutinized)
            ]
            probs = ops.softmax(scrutinize_logits(full.descriptor, region_desc, params, arch)).data
        region_probs = [region_probs[offsets[i] : offsets[i + 1]] for i in range(len(images))]
        return probs, proposals, region_probs


def _batch(samples: Sequence[Sample]):
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.intp)
    return images, labels


def train_step(samples: Sample | Sequence[Sample], params: ParamSet, state: OptimState, model: NTSModel) -> StepReport:
    """Forward, one backward, one momentum-SGD step on a batch (or a single sample)."""
    if isinstance(samples, Sample):
        samples = [samples]
    images, labels = _batch(samples)
    params.zero_grad()
    fwd = model.forward(params, images, labels, training=True, update_stats=True)
    fwd.loss.backward()
    sgd_momentum_step(params, state, frozen=model.config.frozen)
    l_total = fwd.loss.item()
    return StepReport(fwd.L_I, fwd.L_C, fwd.L_S, l_total, fwd.proposals, fwd.confidences, fwd.shortfall)


def localized(proposals: Sequence[Proposal], gt_region, k: int, threshold: float = 0.5) -> bool:
    """True when any of the first ``k`` proposals has IoU >= ``threshold`` with ``gt_region``."""
    if k <= 0 or not proposals:
        return False
    boxes = np.array([p.region.as_tuple() for p in proposals[:k]])
    return bool((iou_matrix(boxes, [gt_region.as_tuple()]) >= threshold).any())


def _evaluate_chunk(chunk: Sequence[Sample], params: ParamSet, model: NTSModel, k: int):
    images, labels = _batch(chunk)
    probs, proposals, region_probs = model.infer(params, images)
    # argmax picks the lowest class index on ties
    correct = int((probs.argmax(axis=1) == labels).sum())
    hits = 0
    taus = []
    for s, props, rp in zip(chunk, proposals, region_probs):
        if k > 0:
            hits += localized(props, s.gt_region, k)
        conf = rp[:, s.label]
        if len(props) >= 2 and len(np.unique(conf)) > 1:
            taus.append(kendall_tau(ScorePair([p.informativeness for p in props], conf)))
    return correct, hits, taus


def evaluate(
    samples: Sequence[Sample], params: ParamSet, model: NTSModel, recall_k: int | None = None, workers: int = 1
) -> dict:
    """Top-1 accuracy, localization recall@K (IoU >= 0.5) and mean Kendall tau.

    Recall uses the top-``recall_k`` proposals (default: the configured K);
    with K = 0 it is reported as None. Kendall tau is averaged over samples
    where it is defined. Chunks may be spread over ``workers`` threads;
    results are combined in chunk order, so they do not depend on it.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    k = model.config.n_scrutinized if recall_k is None else recall_k
    bs = model.config.eval_batch_size
    chunks = [samples[start : start + bs] for start in range(0, len(samples), bs)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _evaluate_chunk(c, params, model, k), chunks))
    else:
        parts = [_evaluate_chunk(c, params, model, k) for c in chunks]
    correct = sum(p[0] for p in parts)
    hits = sum(p[1] for p in parts)
    taus = [t for p in parts for t in p[2]]
    n = len(samples)
    return {
        "top1": correct / n,
        "recall_at_K": hits / n if k > 0 else None,
        "kendall_tau": float(np.mean(taus)) if taus else None,
    }


@dataclass
class TrainResult:
    params: ParamSet
    history: list[dict]
    initial_metrics: dict | None = None
    shortfall: int = 0


def train(
    train_set: Sequence[Sample],
    config: TrainConfig,
    test_set: Sequence[Sample] | None = None,
    params: ParamSet | None = None,
    checkpoint_dir: str | Path | None = None,
    history_path: str | Path | None = None,
    n_classes: int | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of seeded, shuffled training steps.

    Each epoch appends one history record with mean losses and, when a test
    set is given, its top-1, recall@K and mean Kendall tau. Metrics of the
    untrained model are returned separately as ``initial_metrics``.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if n_classes is None:
        n_classes = 1 + max(s.label for s in [*train_set, *(test_set or [])])
    model = NTSModel(config, n_classes, train_set[0].image.shape[-1])
    if params is None:
        params = model.init_params()
    state = OptimState(
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        decay_epoch=config.decay_epoch,
    )
    history: list[dict] = []
    initial = evaluate(test_set, params, model) if test_set and config.epochs > 0 else None
    if initial is not None:
        log.info("epoch 0: %s", initial)
    if history_path is not None:
        Path(history_path).write_text("")
    shortfall = 0
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch - 1
        order = rng.permutation(len(train_set))
        sums = np.zeros(4)
        steps = 0
        for step, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            rep = train_step(batch, params, state, model)
            if not np.isfinite(rep.L_total):
                raise NonFiniteLossError(epoch, step, rep.L_total)
            sums += (rep.L_I, rep.L_C, rep.L_S, rep.L_total)
            steps += 1
            shortfall += rep.shortfall
        means = sums / max(steps, 1)
        record = {
            "epoch": epoch,
            "mean_L_I": float(means[0]),
            "mean_L_C": float(means[1]),
            "mean_L_S": float(means[2]),
            "mean_L_total": float(means[3]),
        }
        metrics = evaluate(test_set, params, model) if test_set else {"top1": None, "recall_at_K": None, "kendall_tau": None}
        record.update(kendall_tau=metrics["kendall_tau"], top1=metrics["top1"], recall_at_K=metrics["recall_at_K"])
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if checkpoint_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:03d}.ntsc", params)
    return TrainResult(params, history, initial, shortfall)
