"""Box arithmetic, IoU, NMS and proposal-to-ground-truth matching.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates with ``x2 > x1`` and ``y2 > y1``. The scalar API operates on
:class:`Box` objects; the ``*_array`` helpers are the vectorised versions the
detector uses on ``(N, 4)`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

BACKGROUND = -1

# dx, dy, dw, dh scaling of regression targets (standard Faster R-CNN values)
BOX_CODER_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def shift(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class MatchResult:
    matched_gt_index: Optional[int]
    iou_u: float
    label_y: int


BoxesLike = Union[Sequence[Box], np.ndarray]


def as_array(boxes: BoxesLike) -> np.ndarray:
    """Return ``boxes`` as a float64 ``(N, 4)`` array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64, copy=False)
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() if isinstance(b, Box) else tuple(b) for b in boxes],
                    dtype=np.float64).reshape(-1, 4)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: BoxesLike, b: BoxesLike) -> np.ndarray:
    """Pairwise IoU between two box sets, shape ``(len(a), len(b))``."""
    a = as_array(a)
    b = as_array(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes: BoxesLike, scores: Sequence[float], iou_threshold: float,
        max_keep: Optional[int] = None) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (ties by lower index); a box is
    dropped when its IoU with an already kept box exceeds ``iou_threshold``.
    Returns kept indices in descending score order, at most ``max_keep``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    arr = as_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores differ in length")
    if arr.shape[0] == 0:
        return []
    if max_keep is None:
        max_keep = arr.shape[0]
    # lexsort: last key is primary; stable on index for equal scores
    order = np.lexsort((np.arange(len(scores)), -scores))
    x1, y1, x2, y2 = arr.T
    areas = (x2 - x1) * (y2 - y1)
    keep: list[int] = []
    while order.size > 0 and len(keep) < max_keep:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.maximum(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0)
        ih = np.maximum(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= iou_threshold]
    return keep


def match_proposals(proposals: BoxesLike, gt_boxes: BoxesLike, gt_labels: Sequence[int],
                    fg_iou_threshold: float = 0.5) -> list[MatchResult]:
    """Assign each proposal to its maximal-IoU ground truth.

    ``iou_u`` is always the maximal IoU. Proposals below ``fg_iou_threshold``
    (or with zero overlap) get ``matched_gt_index=None`` and the background
    label. IoU ties go to the lowest ground-truth index.
    """
    if not 0.0 < fg_iou_threshold < 1.0:
        raise ValueError(f"fg_iou_threshold must be in (0, 1), got {fg_iou_threshold}")
    idx, u = match_arrays(proposals, gt_boxes)
    labels = np.asarray(gt_labels, dtype=np.int64)
    results = []
    for k in range(len(u)):
        if idx[k] >= 0 and u[k] >= fg_iou_threshold:
            results.append(MatchResult(int(idx[k]), float(u[k]), int(labels[idx[k]])))
        else:
            results.append(MatchResult(None, float(u[k]), BACKGROUND))
    return results


def match_arrays(proposals: BoxesLike, gt_boxes: BoxesLike) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised argmax-IoU matching.

    Returns ``(gt_index, max_iou)``; ``gt_index`` is -1 when there are no
    ground truths.
    """
    p = as_array(proposals)
    g = as_array(gt_boxes)
    if g.shape[0] == 0:
        return np.full(p.shape[0], -1, dtype=np.int64), np.zeros(p.shape[0])
    m = iou_matrix(p, g)
    # np.argmax returns the first maximum, i.e. the lowest gt index on ties
    return m.argmax(axis=1).astype(np.int64), m.max(axis=1)


def encode_deltas(boxes: np.ndarray, targets: np.ndarray,
                  weights=BOX_CODER_WEIGHTS) -> np.ndarray:
    """(dx, dy, dw, dh) regression targets taking ``boxes`` onto ``targets``."""
    wx, wy, ww, wh = weights
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return np.stack([wx * (tcx - cx) / w, wy * (tcy - cy) / h,
                     ww * np.log(tw / w), wh * np.log(th / h)], axis=1)


def decode_deltas(boxes: np.ndarray, deltas: np.ndarray,
                  weights=BOX_CODER_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = np.minimum(deltas[:, 2] / ww, _MAX_LOG_SCALE)
    dh = np.minimum(deltas[:, 3] / wh, _MAX_LOG_SCALE)
    pcx = dx * w + cx
    pcy = dy * h + cy
    pw = np.exp(dw) * w
    ph = np.exp(dh) * h
    return np.stack([pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph], axis=1)


def clip_boxes(boxes: np.ndarray, size: int) -> np.ndarray:
    return np.clip(boxes, 0.0, float(size))


def valid_mask(boxes: np.ndarray, min_size: float = 1.0) -> np.ndarray:
    return ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
