"""Average precision, base/novel aggregation and embedding diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geometry
from .data import DetectionDataset, Record
from .detector import Detection, DetectorState, detect_batch, proposal_embeddings

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _gt_arrays(gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(gt, Record):
        return gt.boxes, gt.labels
    boxes, labels = gt
    return geometry.as_array(boxes), np.asarray(labels, dtype=np.int64).reshape(-1)


def _det_tuple(d) -> tuple[np.ndarray, int, float]:
    if isinstance(d, Detection):
        return np.array(d.box.as_tuple()), d.class_id, d.score
    box, cls, score = d
    if isinstance(box, geometry.Box):
        box = box.as_tuple()
    return np.asarray(box, dtype=np.float64), int(cls), float(score)


def match_detections(detections: Sequence[Sequence], ground_truths: Sequence, class_id: int,
                     iou_threshold: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy score-descending matching for one class.

    Returns ``(scores, is_tp, num_gt)`` with detections in descending score
    order (ties: earlier image, then earlier detection). Each ground truth is
    claimed at most once, by the best-overlapping unmatched candidate.
    """
    gts = [_gt_arrays(g) for g in ground_truths]
    gt_boxes = [b[l == class_id] for b, l in gts]
    num_gt = int(sum(len(b) for b in gt_boxes))
    cand = []
    for img, dets in enumerate(detections):
        for k, d in enumerate(dets):
            box, cls, score = _det_tuple(d)
            if cls == class_id:
                cand.append((-score, img, k, box))
    cand.sort(key=lambda c: (c[0], c[1], c[2]))
    taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    scores = np.array([-c[0] for c in cand], dtype=np.float64)
    is_tp = np.zeros(len(cand), dtype=bool)
    for n, (_, img, _, box) in enumerate(cand):
        g = gt_boxes[img]
        if len(g) == 0:
            continue
        ious = geometry.iou_matrix(box[None], g)[0]
        ious[taken[img]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            taken[img][j] = True
            is_tp[n] = True
    return scores, is_tp, num_gt


def ap_from_matches(is_tp: np.ndarray, num_gt: int, mode: str = "all-point") -> float:
    """Area under the precision envelope of a ranked TP/FP list."""
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if len(is_tp) == 0:
        return 0.0
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if mode == "voc11":
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0.0, 1.0, 11)]))
    if mode != "all-point":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence[Sequence], ground_truths: Sequence, iou_threshold: float = 0.5,
                      classes: Optional[Iterable[int]] = None, mode: str = "all-point") -> dict[int, float]:
    """Per-class AP. Classes without ground truth are absent from the result."""
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground truths cover different numbers of images")
    if classes is None:
        classes = sorted({int(c) for g in ground_truths for c in _gt_arrays(g)[1]})
    out = {}
    for c in classes:
        _, is_tp, num_gt = match_detections(detections, ground_truths, int(c), iou_threshold)
        if num_gt:
            out[int(c)] = ap_from_matches(is_tp, num_gt, mode)
    return out


def _tag(t: float) -> str:
    return f"AP{int(round(t * 100))}"


@dataclass
class EvalReport:
    thresholds: list[float]
    per_class: dict[str, dict[int, float]]  # "AP50" -> {class id: AP}
    class_names: list[str]
    novel_ids: list[int]
    base_ids: list[int]
    num_images: int
    num_instances: int
    seed: Optional[int] = None
    aggregates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = self._aggregate()

    def _mean(self, tag: str, ids: Sequence[int]) -> Optional[float]:
        vals = [self.per_class[tag][c] for c in ids if c in self.per_class.get(tag, {})]
        return float(np.mean(vals)) if vals else None

    def _aggregate(self) -> dict[str, float]:
        agg = {}
        groups = {"n": self.novel_ids, "b": self.base_ids,
                  "m": sorted(set(self.novel_ids) | set(self.base_ids))}
        for t in self.thresholds:
            tag = _tag(t)
            for prefix, ids in groups.items():
                v = self._mean(tag, ids)
                if v is not None:
                    agg[prefix + tag] = v
        if all(any(math.isclose(t, c) for t in self.thresholds) for c in COCO_THRESHOLDS):
            for prefix, ids in groups.items():
                per = []
                for c in ids:
                    vals = [self.per_class[_tag(t)].get(c) for t in COCO_THRESHOLDS]
                    if all(v is not None for v in vals):
                        per.append(float(np.mean(vals)))
                if per:
                    agg[prefix + "AP"] = float(np.mean(per))
        return agg

    def flat(self) -> dict[str, float]:
        out = dict(self.aggregates)
        for tag, vals in self.per_class.items():
            for c, v in sorted(vals.items()):
                out[f"{tag}/{self.class_names[c]}"] = v
        out["num_images"] = self.num_images
        out["num_instances"] = self.num_instances
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.flat().items():
            lines.append(f"{k} = {v}" if isinstance(v, int) else f"{k} = {v:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "per_class": {tag: {str(c): v for c, v in vals.items()} for tag, vals in self.per_class.items()},
            "class_names": self.class_names,
            "novel_ids": self.novel_ids,
            "base_ids": self.base_ids,
            "num_images": self.num_images,
            "num_instances": self.num_instances,
            "seed": self.seed,
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = {tag: {int(c): v for c, v in vals.items()} for tag, vals in d["per_class"].items()}
        return cls(d["thresholds"], per, d["class_names"], d["novel_ids"], d["base_ids"],
                   d["num_images"], d["num_instances"], d.get("seed"), d.get("aggregates", {}))

    def write(self, directory, stem: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        txt = directory / f"{stem}.txt"
        js = directory / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return txt, js


def run_detector(state: DetectorState, dataset: DetectionDataset, score_threshold: float = 0.05,
                 nms_threshold: float = 0.5, chunk: int = 16) -> list[list[Detection]]:
    dets: list[list[Detection]] = []
    for i in range(0, len(dataset), chunk):
        dets.extend(detect_batch(dataset.records[i:i + chunk], state, score_threshold, nms_threshold))
    return dets


def evaluate(state: DetectorState, dataset: DetectionDataset, thresholds: Sequence[float] = (0.5, 0.75),
             mode: str = "all-point") -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    present = {int(c) for r in dataset.records for c in r.labels}
    missing = sorted(present - set(state.class_ids))
    if missing:
        names = ", ".join(dataset.class_names[c] for c in missing)
        raise ValueError(f"{state.stage}-stage detector has no prototypes for classes: {names}")
    dets = run_detector(state, dataset)
    per_class = {}
    for t in thresholds:
        per_class[_tag(t)] = average_precision(dets, dataset.records, t, sorted(present), mode)
    novel = sorted(c for c in dataset.novel_ids if c in present)
    base = sorted(c for c in present if c not in dataset.novel_ids)
    n_inst = int(sum(len(r.labels) for r in dataset.records))
    return EvalReport([float(t) for t in thresholds], per_class, list(dataset.class_names), novel, base,
                      len(dataset), n_inst, state.seed)


@dataclass
class EmbeddingReportRow:
    class_id: int
    u: float
    z: np.ndarray


@dataclass
class ClusterStats:
    within: dict[int, float]
    cross: Optional[float]
    centroid_norms: dict[int, float]

    def mean_within(self, classes: Optional[Iterable[int]] = None) -> Optional[float]:
        keys = self.within.keys() if classes is None else [c for c in classes if c in self.within]
        vals = [self.within[c] for c in keys]
        return float(np.mean(vals)) if vals else None


def _normalize(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def cluster_statistics(rows: Sequence[EmbeddingReportRow]) -> ClusterStats:
    """Within-class and cross-class mean cosine similarity of embeddings."""
    if not rows:
        return ClusterStats({}, None, {})
    z = _normalize(np.stack([r.z for r in rows]))
    y = np.array([r.class_id for r in rows])
    sim = np.clip(z @ z.T, -1.0, 1.0)
    within, norms = {}, {}
    for c in sorted(set(y.tolist())):
        idx = np.flatnonzero(y == c)
        norms[int(c)] = float(np.linalg.norm(z[idx].mean(axis=0)))
        if len(idx) < 2:
            continue
        block = sim[np.ix_(idx, idx)]
        n = len(idx)
        within[int(c)] = float((block.sum() - np.trace(block)) / (n * (n - 1)))
    diff = y[:, None] != y[None, :]
    cross = float(sim[diff].mean()) if diff.any() else None
    return ClusterStats(within, cross, norms)


EMBEDDING_DIGITS = 9


def export_embeddings(state: DetectorState, dataset: DetectionDataset, max_images: int,
                      path=None, seed: int = 0) -> list[EmbeddingReportRow]:
    """Contrastive embeddings of foreground proposals from up to ``max_images`` images."""
    rng = np.random.default_rng(seed)
    n = min(max(max_images, 0), len(dataset))
    picks = np.sort(rng.choice(len(dataset), size=n, replace=False)) if n else np.zeros(0, dtype=int)
    z, u, y = proposal_embeddings(state, [dataset.records[int(i)] for i in picks])
    rows = [EmbeddingReportRow(int(y[i]), float(u[i]), z[i]) for i in range(len(y))]
    if path is not None:
        write_embeddings(rows, path, state.cfg.embed_dim)
    return rows


def write_embeddings(rows: Sequence[EmbeddingReportRow], path, embed_dim: int) -> None:
    header = ",".join(["class_id", "u"] + [f"z_{k}" for k in range(embed_dim)])
    lines = [header]
    for r in rows:
        vals = [str(r.class_id), f"{r.u:.{EMBEDDING_DIGITS}g}"]
        vals += [f"{v:.{EMBEDDING_DIGITS}g}" for v in r.z]
        lines.append(",".join(vals))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings(path) -> list[EmbeddingReportRow]:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        rows.append(EmbeddingReportRow(int(parts[0]), float(parts[1]), np.array(parts[2:], dtype=np.float64)))
    return rows
