"""A miniature two-stage detector with a contrastive RoI branch.

Backbone (4 conv blocks) -> RPN -> RoIAlign -> two-fc RoI feature extractor,
followed by three parallel branches on the RoI feature ``x``: a cosine box
classifier, a class-agnostic box regressor and the contrastive projection
head. Training follows the two-stage recipe: base training on base classes,
then fine-tuning on a balanced K-shot set with the CPE loss added.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import geometry
from .cpe import CpeConfig, cpe_loss_tensor, total_finetune_loss
from .data import DetectionDataset, Record
from .heads import ContrastiveHead, CosineClassifier

log = logging.getLogger(__name__)

COMPONENTS = ("backbone", "rpn", "roi_feature_extractor", "box_predictors", "contrastive_head")
STAGES = ("base", "finetune")
# config fields that fix parameter shapes shared between the two stages
STRUCTURAL_KEYS = ("image_size", "anchor_sizes", "aspect_ratios", "feature_stride", "backbone_channels",
                   "roi_pool", "roi_dim")


@dataclass
class DetectorConfig:
    image_size: int = 96
    num_base_classes: int = 6
    num_novel_classes: int = 2
    anchor_sizes: tuple[float, ...] = (12.0, 24.0, 48.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    feature_stride: int = 8
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    rpn_pre_nms_topk: int = 300
    rpn_nms_threshold: float = 0.7
    rpn_post_nms_cap: int = 64
    rpn_batch_per_image: int = 64
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch_size: int = 32
    roi_fg_fraction: float = 0.25
    fg_iou_threshold: float = 0.5
    roi_pool: int = 7
    roi_dim: int = 256
    embed_dim: int = 128
    cosine_scale: float = 20.0
    freeze: dict[str, bool] = field(default_factory=lambda: {c: False for c in COMPONENTS})
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 100
    steps: int = 2000
    images_per_step: int = 4
    test_post_nms_cap: int = 128

    def __post_init__(self):
        self.anchor_sizes = tuple(float(a) for a in self.anchor_sizes)
        self.aspect_ratios = tuple(float(a) for a in self.aspect_ratios)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.rpn_post_nms_cap <= 0:
            raise ValueError("rpn_post_nms_cap must be positive")
        if self.roi_batch_size <= 0:
            raise ValueError("roi_batch_size must be positive")
        if not 0.0 < self.roi_fg_fraction < 1.0:
            raise ValueError("roi_fg_fraction must lie in (0, 1)")
        unknown = set(self.freeze) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown freeze flags: {sorted(unknown)}")
        self.freeze = {c: bool(self.freeze.get(c, False)) for c in COMPONENTS}

    def replace(self, **changes) -> "DetectorConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def strong_baseline_config(base: DetectorConfig, steps: int = 400) -> DetectorConfig:
    """Fine-tune config: frozen backbone, refined RPN/RoI, 2x proposal cap, half RoI batch."""
    half = max(1, base.roi_batch_size // 2)
    # the dropped half is background only: the foreground quota keeps its base-stage count
    fg_quota = int(base.roi_batch_size * base.roi_fg_fraction)
    return base.replace(
        rpn_post_nms_cap=2 * base.rpn_post_nms_cap,
        roi_batch_size=half,
        roi_fg_fraction=min(fg_quota / half, 0.99),
        freeze={"backbone": True, "rpn": False, "roi_feature_extractor": False,
                "box_predictors": False, "contrastive_head": False},
        steps=steps, warmup_steps=min(base.warmup_steps, steps // 10),
    )


def frozen_baseline_config(base: DetectorConfig, steps: int = 400) -> DetectorConfig:
    """Fine-tune config that only trains the box predictors (base-stage RPN/RoI specs)."""
    return base.replace(
        freeze={"backbone": True, "rpn": True, "roi_feature_extractor": True,
                "box_predictors": False, "contrastive_head": True},
        steps=steps, warmup_steps=min(base.warmup_steps, steps // 10),
    )


class TinyDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig, num_classes: int):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for i, cout in enumerate(cfg.backbone_channels):
            # total stride 8: the last block keeps resolution
            stride = 2 if i < 3 else 1
            layers += [nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU()]
            cin = cout
        self.num_anchors = len(cfg.anchor_sizes) * len(cfg.aspect_ratios)
        self.backbone = nn.Sequential(*layers)
        self.rpn = nn.ModuleDict({
            "conv": nn.Conv2d(cin, cin, 3, 1, 1),
            "cls": nn.Conv2d(cin, self.num_anchors, 1),
            "reg": nn.Conv2d(cin, 4 * self.num_anchors, 1),
        })
        self.roi_feature_extractor = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cin * cfg.roi_pool ** 2, cfg.roi_dim), nn.ReLU(),
            nn.Linear(cfg.roi_dim, cfg.roi_dim), nn.ReLU(),
        )
        self.box_predictors = nn.ModuleDict({
            "cls": CosineClassifier(cfg.roi_dim, num_classes, cfg.cosine_scale),
            "reg": nn.Linear(cfg.roi_dim, 4),
        })
        self.contrastive_head = ContrastiveHead(cfg.roi_dim, cfg.embed_dim)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        for m in (self.rpn["cls"], self.rpn["reg"]):
            nn.init.normal_(m.weight, 0.0, 0.01)
            nn.init.zeros_(m.bias)
        nn.init.normal_(self.box_predictors["reg"].weight, 0.0, 0.001)
        nn.init.zeros_(self.box_predictors["reg"].bias)

    def component(self, name: str) -> nn.Module:
        return getattr(self, name)

    def rpn_forward(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness logits ``(B, N)`` and deltas ``(B, N, 4)`` in (y, x, anchor) order."""
        h = F.relu(self.rpn["conv"](feats))
        b = feats.shape[0]
        obj = self.rpn["cls"](h).permute(0, 2, 3, 1).reshape(b, -1)
        reg = self.rpn["reg"](h).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return obj, reg


@dataclass
class DetectorState:
    cfg: DetectorConfig
    model: TinyDetector
    stage: str
    class_ids: list[int]  # classifier row k+1 -> dataset class id
    class_names: list[str]
    seed: int
    history: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().astype("<f4") for k, v in self.model.state_dict().items()}

    def component_arrays(self, component: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_arrays().items() if k.split(".")[0] == component}

    def clone(self) -> "DetectorState":
        return DetectorState(self.cfg, copy.deepcopy(self.model), self.stage, list(self.class_ids),
                             list(self.class_names), self.seed, list(self.history))


@dataclass
class Detection:
    box: geometry.Box
    class_id: int
    score: float


@dataclass
class RpnRoiStats:
    mean_positive_anchors: float
    mean_foreground_proposals: float
    num_images: int
    loss_history: list[dict] = field(default_factory=list)


def make_anchors(cfg: DetectorConfig) -> np.ndarray:
    n = cfg.image_size // cfg.feature_stride
    base = []
    for size in cfg.anchor_sizes:
        for ratio in cfg.aspect_ratios:
            w = size / math.sqrt(ratio)
            h = size * math.sqrt(ratio)
            base.append((-w / 2, -h / 2, w / 2, h / 2))
    base = np.array(base)
    c = (np.arange(n) + 0.5) * cfg.feature_stride
    cy, cx = np.meshgrid(c, c, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def _axis_weights(lo: np.ndarray, hi: np.ndarray, n_out: int, size: int, ratio: int) -> np.ndarray:
    """Bilinear sampling weights ``(R, n_out, size)`` along one axis.

    Each output bin averages ``ratio`` evenly spaced samples; samples beyond
    one cell outside the map contribute zero (RoIAlign boundary rules).
    """
    r = len(lo)
    bin_size = (hi - lo) / n_out
    offs = np.arange(n_out)[:, None] + (np.arange(ratio)[None, :] + 0.5) / ratio
    pos = lo[:, None, None] + offs[None] * bin_size[:, None, None]
    valid = (pos >= -1.0) & (pos <= size)
    pos = np.clip(pos, 0.0, None)
    low = np.floor(pos).astype(np.int64)
    edge = low >= size - 1
    low = np.where(edge, size - 1, low)
    high = np.where(edge, size - 1, low + 1)
    frac = np.where(edge, 0.0, pos - low)
    w = np.zeros((r, n_out, size))
    ri, pi, _ = np.indices(pos.shape)
    np.add.at(w, (ri[valid], pi[valid], low[valid]), (1.0 - frac)[valid])
    np.add.at(w, (ri[valid], pi[valid], high[valid]), frac[valid])
    return w / ratio


def roi_pool(feats: torch.Tensor, rois: Sequence[np.ndarray], output_size: int,
             spatial_scale: float, sampling_ratio: int = 2) -> torch.Tensor:
    """Pixel-aligned RoIAlign written as two separable interpolation matrices."""
    boxes = np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, 4) for r in rois])
    bidx = np.concatenate([np.full(len(r), b, dtype=np.int64) for b, r in enumerate(rois)])
    _, _, h, w = feats.shape
    scaled = boxes * spatial_scale - 0.5
    wx = _axis_weights(scaled[:, 0], scaled[:, 2], output_size, w, sampling_ratio)
    wy = _axis_weights(scaled[:, 1], scaled[:, 3], output_size, h, sampling_ratio)
    wx_t = torch.from_numpy(wx).to(feats.dtype)
    wy_t = torch.from_numpy(wy).to(feats.dtype)
    gathered = feats[torch.from_numpy(bidx)]
    return (wy_t[:, None] @ gathered) @ wx_t.transpose(1, 2)[:, None]


def _images_tensor(records: Sequence[Record], size: int) -> torch.Tensor:
    for r in records:
        if r.image.shape != (size, size):
            raise ValueError(f"image {r.name!r} has shape {r.image.shape}, expected {(size, size)}")
    arr = np.stack([r.image for r in records]).astype(np.float32) / 255.0
    return torch.from_numpy(arr)[:, None]


def _sample(indices: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(indices) <= n:
        return indices
    return np.sort(rng.choice(indices, size=n, replace=False))


def build_state(cfg: DetectorConfig, class_ids: Sequence[int], class_names: Sequence[str],
                seed: int) -> DetectorState:
    torch.manual_seed(seed)
    model = TinyDetector(cfg, len(class_ids))
    return DetectorState(cfg, model, "base", list(class_ids), list(class_names), seed)


class _Runner:
    """Forward passes shared by training, inference and statistics."""

    def __init__(self, state: DetectorState, cfg: DetectorConfig):
        self.state = state
        self.cfg = cfg
        self.model = state.model
        self.anchors = make_anchors(cfg)
        self.label_index = {c: k + 1 for k, c in enumerate(state.class_ids)}

    def anchor_labels(self, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """1 / 0 / -1 (ignore) per anchor plus matched gt index."""
        cfg = self.cfg
        labels = np.full(len(self.anchors), -1, dtype=np.int64)
        if len(gt) == 0:
            labels[:] = 0
            return labels, np.zeros(len(self.anchors), dtype=np.int64)
        m = geometry.iou_matrix(self.anchors, gt)
        best = m.argmax(axis=1)
        best_iou = m.max(axis=1)
        labels[best_iou < cfg.rpn_neg_iou] = 0
        labels[best_iou >= cfg.rpn_pos_iou] = 1
        # every gt keeps its highest-IoU anchors as positives
        gt_best = m.max(axis=0)
        for j in range(len(gt)):
            if gt_best[j] > 0:
                hit = np.flatnonzero(m[:, j] == gt_best[j])
                labels[hit] = 1
                best[hit] = j
        return labels, best

    def proposals(self, obj: torch.Tensor, reg: torch.Tensor, cap: int) -> list[np.ndarray]:
        cfg = self.cfg
        out = []
        obj_np = obj.detach().numpy().astype(np.float64)
        reg_np = reg.detach().numpy().astype(np.float64)
        for b in range(obj_np.shape[0]):
            scores = obj_np[b]
            k = min(cfg.rpn_pre_nms_topk, len(scores))
            top = np.lexsort((np.arange(len(scores)), -scores))[:k]
            boxes = geometry.clip_boxes(geometry.decode_deltas(self.anchors[top], reg_np[b, top]), cfg.image_size)
            ok = geometry.valid_mask(boxes, 2.0)
            boxes, sc = boxes[ok], scores[top][ok]
            keep = geometry.nms(boxes, sc, cfg.rpn_nms_threshold, cap)
            out.append(boxes[keep])
        return out

    def roi_features(self, feats: torch.Tensor, rois: list[np.ndarray]) -> torch.Tensor:
        pooled = roi_pool(feats, rois, self.cfg.roi_pool, 1.0 / self.cfg.feature_stride)
        return self.model.roi_feature_extractor(pooled)

    def rpn_loss(self, obj, reg, records, rng):
        cfg = self.cfg
        cls_terms, reg_terms, n_sampled, n_pos_total = [], [], 0, 0
        for b, rec in enumerate(records):
            labels, matched = self.anchor_labels(rec.boxes)
            pos = np.flatnonzero(labels == 1)
            neg = np.flatnonzero(labels == 0)
            n_pos_total += len(pos)
            pos = _sample(pos, int(cfg.rpn_batch_per_image * cfg.rpn_positive_fraction), rng)
            neg = _sample(neg, cfg.rpn_batch_per_image - len(pos), rng)
            idx = np.concatenate([pos, neg])
            target = torch.from_numpy((labels[idx] == 1).astype(np.float32))
            cls_terms.append(F.binary_cross_entropy_with_logits(obj[b, idx], target, reduction="sum"))
            if len(pos):
                t = geometry.encode_deltas(self.anchors[pos], rec.boxes[matched[pos]])
                reg_terms.append(F.smooth_l1_loss(reg[b, pos], torch.from_numpy(t.astype(np.float32)),
                                                  beta=1.0, reduction="sum"))
            n_sampled += len(idx)
        loss = torch.stack(cls_terms).sum()
        if reg_terms:
            loss = loss + torch.stack(reg_terms).sum()
        return loss / max(n_sampled, 1), n_pos_total

    def sample_rois(self, props: np.ndarray, rec: Record, rng: np.random.Generator):
        cfg = self.cfg
        rois = np.concatenate([props, rec.boxes]) if len(rec.boxes) else props
        gt_idx, u = geometry.match_arrays(rois, rec.boxes)
        fg = np.flatnonzero(u >= cfg.fg_iou_threshold) if len(rec.boxes) else np.zeros(0, dtype=np.int64)
        bg = np.flatnonzero(u < cfg.fg_iou_threshold) if len(rec.boxes) else np.arange(len(rois))
        fg = _sample(fg, int(cfg.roi_batch_size * cfg.roi_fg_fraction), rng)
        bg = _sample(bg, cfg.roi_batch_size - len(fg), rng)
        idx = np.concatenate([fg, bg]).astype(np.int64)
        is_fg = np.zeros(len(idx), dtype=bool)
        is_fg[:len(fg)] = True
        labels = np.full(len(idx), geometry.BACKGROUND, dtype=np.int64)
        if len(fg):
            labels[:len(fg)] = rec.labels[gt_idx[fg]]
        targets = np.zeros((len(idx), 4))
        if len(fg):
            targets[:len(fg)] = geometry.encode_deltas(rois[fg], rec.boxes[gt_idx[fg]])
        return rois[idx], labels, u[idx], is_fg, targets


def _check_components(state: DetectorState) -> None:
    for name in COMPONENTS:
        for p in state.model.component(name).parameters():
            p.requires_grad_(not state.cfg.freeze[name])


def _train(state: DetectorState, dataset: DetectionDataset, cpe_cfg: Optional[CpeConfig],
           seed: int, log_every: int = 0) -> DetectorState:
    cfg = state.cfg
    _check_components(state)
    params = [p for p in state.model.parameters() if p.requires_grad]
    if cfg.steps == 0 or not params:
        return state
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    decay_at = int(0.8 * cfg.steps)
    runner = _Runner(state, cfg)
    model = state.model
    model.train()
    lam = cpe_cfg.loss_weight if cpe_cfg is not None else 0.0
    for step in range(cfg.steps):
        lr = cfg.lr * min(1.0, (step + 1) / max(cfg.warmup_steps, 1))
        if step >= decay_at:
            lr *= 0.1
        for g in opt.param_groups:
            g["lr"] = lr
        picks = rng.integers(0, len(dataset), size=cfg.images_per_step)
        records = [dataset.records[int(i)] for i in picks]
        images = _images_tensor(records, cfg.image_size)
        feats = model.backbone(images)
        obj, reg = model.rpn_forward(feats)
        l_rpn, n_pos = runner.rpn_loss(obj, reg, records, rng)
        props = runner.proposals(obj, reg, cfg.rpn_post_nms_cap)
        rois, labels, us, fgs, targets = [], [], [], [], []
        for b, rec in enumerate(records):
            r, lab, u, is_fg, t = runner.sample_rois(props[b], rec, rng)
            rois.append(r)
            labels.append(lab)
            us.append(u)
            fgs.append(is_fg)
            targets.append(t)
        x = runner.roi_features(feats, rois)
        labels_np = np.concatenate(labels)
        fg_np = np.concatenate(fgs)
        cls_target = torch.from_numpy(np.array([runner.label_index.get(int(c), 0) for c in labels_np],
                                               dtype=np.int64))
        logits = model.box_predictors["cls"](x)
        l_cls = F.cross_entropy(logits, cls_target)
        deltas = model.box_predictors["reg"](x)
        fg_t = torch.from_numpy(fg_np)
        if fg_np.any():
            t = torch.from_numpy(np.concatenate(targets)[fg_np].astype(np.float32))
            l_reg = F.smooth_l1_loss(deltas[fg_t], t, beta=1.0, reduction="sum") / len(labels_np)
        else:
            l_reg = deltas.sum() * 0.0
        if cpe_cfg is not None and fg_np.any():
            z = model.contrastive_head(x[fg_t])
            u_t = torch.from_numpy(np.concatenate(us)[fg_np])
            y_t = torch.from_numpy(labels_np[fg_np])
            l_cpe = cpe_loss_tensor(z, u_t, y_t, cpe_cfg)
        else:
            l_cpe = x.sum() * 0.0
        loss = total_finetune_loss(l_rpn, l_cls, l_reg, l_cpe, lam)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        parts = {"rpn": l_rpn.item(), "cls": l_cls.item(), "reg": l_reg.item(), "cpe": l_cpe.item()}
        parts["total"] = float(total_finetune_loss(parts["rpn"], parts["cls"], parts["reg"], parts["cpe"], lam))
        parts["positive_anchors"] = n_pos / len(records)
        parts["foreground_rois"] = float(fg_np.sum()) / len(records)
        parts["sampled_rois"] = float(len(labels_np)) / len(records)
        state.history.append(parts)
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("step %d loss %.4f (rpn %.4f cls %.4f reg %.4f cpe %.4f)", step, parts["total"],
                     parts["rpn"], parts["cls"], parts["reg"], parts["cpe"])
    model.eval()
    return state


def train_base(dataset: DetectionDataset, cfg: DetectorConfig, seed: int = 0,
               log_every: int = 0) -> DetectorState:
    """Base-stage training on base classes only (no contrastive term)."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    base = set(dataset.base_ids)
    for r in dataset.records:
        bad = [int(c) for c in r.labels if int(c) not in base]
        if bad:
            raise ValueError(f"base training data holds novel class ids {sorted(set(bad))}")
    cfg = cfg.replace(num_base_classes=len(dataset.base_ids))
    state = build_state(cfg, dataset.base_ids, dataset.class_names, seed)
    return _train(state, dataset, None, seed, log_every)


def fine_tune(base_state: DetectorState, balanced_set: DetectionDataset, cfg: DetectorConfig,
              cpe_cfg: CpeConfig, seed: Optional[int] = None, log_every: int = 0) -> DetectorState:
    """Transfer a base detector to base+novel classes with ``L + lambda * L_CPE``."""
    if base_state.stage != "base":
        raise ValueError(f"fine_tune expects a base-stage state, got {base_state.stage!r}")
    if len(balanced_set) == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    seed = base_state.seed if seed is None else seed
    state = base_state.clone()
    novel = sorted(c for c in balanced_set.novel_ids if c not in state.class_ids)
    gen = torch.Generator().manual_seed(seed)
    if novel:
        state.model.box_predictors["cls"].expand(len(novel), gen)
    state.class_ids = state.class_ids + novel
    cfg = cfg.replace(num_novel_classes=len(novel), num_base_classes=len(base_state.class_ids))
    changed = [k for k in STRUCTURAL_KEYS if getattr(cfg, k) != getattr(base_state.cfg, k)]
    if changed:
        raise ValueError(f"fine-tune config changes the base architecture: {', '.join(changed)}")
    if cfg.embed_dim != base_state.cfg.embed_dim:
        # the head is never trained in the base stage, so a fresh one loses nothing
        torch.manual_seed(seed)
        state.model.contrastive_head = ContrastiveHead(cfg.roi_dim, cfg.embed_dim)
    if cpe_cfg.loss_weight == 0.0 and not cfg.freeze["contrastive_head"]:
        # with no contrastive term the head would only see weight decay
        cfg = cfg.replace(freeze={**cfg.freeze, "contrastive_head": True})
    state.cfg = cfg
    state.stage = "finetune"
    state.seed = seed
    state.history = []
    return _train(state, balanced_set, cpe_cfg, seed, log_every)


@torch.no_grad()
def detect(image: np.ndarray, state: DetectorState, score_threshold: float = 0.05,
           nms_threshold: float = 0.5, max_detections: int = 100) -> list[Detection]:
    return detect_batch([Record(np.asarray(image), np.zeros((0, 4)), np.zeros(0))], state,
                        score_threshold, nms_threshold, max_detections)[0]


@torch.no_grad()
def detect_batch(records: Sequence[Record], state: DetectorState, score_threshold: float = 0.05,
                 nms_threshold: float = 0.5, max_detections: int = 100) -> list[list[Detection]]:
    cfg = state.cfg
    model = state.model.eval()
    runner = _Runner(state, cfg)
    images = _images_tensor(records, cfg.image_size)
    feats = model.backbone(images)
    obj, reg = model.rpn_forward(feats)
    props = runner.proposals(obj, reg, cfg.test_post_nms_cap)
    out: list[list[Detection]] = []
    if sum(len(p) for p in props) == 0:
        return [[] for _ in records]
    x = runner.roi_features(feats, props)
    probs = F.softmax(model.box_predictors["cls"](x), dim=1).double().numpy()
    deltas = model.box_predictors["reg"](x).double().numpy()
    start = 0
    for p in props:
        n = len(p)
        pr, dl = probs[start:start + n], deltas[start:start + n]
        start += n
        boxes = geometry.clip_boxes(geometry.decode_deltas(p, dl), cfg.image_size) if n else p
        ok = geometry.valid_mask(boxes, 1.0) if n else np.zeros(0, dtype=bool)
        dets: list[Detection] = []
        for k, cid in enumerate(state.class_ids):
            sc = pr[:, k + 1]
            sel = np.flatnonzero((sc >= score_threshold) & ok)
            if len(sel) == 0:
                continue
            keep = geometry.nms(boxes[sel], sc[sel], nms_threshold)
            for j in keep:
                i = sel[j]
                dets.append(Detection(geometry.Box(*boxes[i]), int(cid), float(sc[i])))
        dets.sort(key=lambda d: -d.score)
        out.append(dets[:max_detections])
    return out


@torch.no_grad()
def proposal_embeddings(state: DetectorState, records: Sequence[Record],
                        cap: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contrastive embeddings of foreground RPN proposals: ``(z, u, y)``."""
    cfg = state.cfg
    model = state.model.eval()
    runner = _Runner(state, cfg)
    zs, us, ys = [], [], []
    for rec in records:
        if len(rec.boxes) == 0:
            continue
        images = _images_tensor([rec], cfg.image_size)
        feats = model.backbone(images)
        obj, reg = model.rpn_forward(feats)
        props = runner.proposals(obj, reg, cap or cfg.test_post_nms_cap)[0]
        if len(props) == 0:
            continue
        gt_idx, u = geometry.match_arrays(props, rec.boxes)
        fg = u >= cfg.fg_iou_threshold
        if not fg.any():
            continue
        x = runner.roi_features(feats, [props[fg]])
        zs.append(model.contrastive_head(x).double().numpy())
        us.append(u[fg])
        ys.append(rec.labels[gt_idx[fg]])
    if not zs:
        return np.zeros((0, cfg.embed_dim)), np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(zs), np.concatenate(us), np.concatenate(ys)


@torch.no_grad()
def collect_stats(state: DetectorState, dataset: DetectionDataset,
                  cfg: Optional[DetectorConfig] = None) -> RpnRoiStats:
    """Mean positive anchors and foreground RPN proposals per image."""
    cfg = cfg or state.cfg
    if len(dataset) == 0:
        return RpnRoiStats(0.0, 0.0, 0, list(state.history))
    model = state.model.eval()
    runner = _Runner(state, cfg)
    pos_total = 0
    fg_total = 0
    for rec in dataset.records:
        labels, _ = runner.anchor_labels(rec.boxes)
        pos_total += int((labels == 1).sum())
        feats = model.backbone(_images_tensor([rec], cfg.image_size))
        obj, reg = model.rpn_forward(feats)
        props = runner.proposals(obj, reg, cfg.rpn_post_nms_cap)[0]
        if len(props) and len(rec.boxes):
            _, u = geometry.match_arrays(props, rec.boxes)
            fg_total += int((u >= cfg.fg_iou_threshold).sum())
    n = len(dataset)
    return RpnRoiStats(pos_total / n, fg_total / n, n, list(state.history))


# checkpoint container: magic, u64 header length, JSON header, raw "<f4" blobs
_MAGIC = b"FSCECKPT\x01\n"


def save_checkpoint(state: DetectorState, path) -> str:
    """Write ``state`` and return the SHA-256 of the written bytes."""
    arrays = state.named_arrays()
    tensors, offset = [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(a.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = {
        "format": "fsce-checkpoint/1",
        "stage": state.stage,
        "seed": state.seed,
        "class_ids": state.class_ids,
        "class_names": state.class_names,
        "config": state.cfg.to_dict(),
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(arrays[t["name"]], dtype="<f4").tobytes() for t in tensors)
    data = _MAGIC + struct.pack("<Q", len(head)) + head + blob
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> DetectorState:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path} is not a detector checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + n])
    pos += n
    cfg = DetectorConfig.from_dict(header["config"])
    model = TinyDetector(cfg, len(header["class_ids"]))
    sd = {}
    for t in header["tensors"]:
        raw = data[pos + t["offset"]:pos + t["offset"] + t["nbytes"]]
        sd[t["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(t["shape"]).copy())
    model.load_state_dict(sd)
    model.eval()
    return DetectorState(cfg, model, header["stage"], list(header["class_ids"]),
                         list(header["class_names"]), int(header["seed"]))
