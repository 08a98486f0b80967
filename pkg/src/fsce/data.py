"""Synthetic shape-detection datasets and the few-shot split protocol."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

SHAPES = ("square", "circle", "triangle", "diamond", "stripes", "frame", "cross", "ring")
DEFAULT_NOVEL = ("cross", "ring")
KSHOT_MENU = (1, 2, 3, 5, 10, 30)

MIN_SIZE, MAX_SIZE = 12, 48
MAX_OBJECTS = 4
PLACEMENT_RETRIES = 50
# minimum free pixels between two placed boxes
PLACEMENT_GAP = 2
BACKGROUND_MAX = 50
OBJECT_MIN = 150
# any pixel above this is object, below is background
FOREGROUND_LEVEL = 100

ANNOTATION_FILE = "annotations.txt"
CLASSES_FILE = "classes.txt"


@dataclass
class Record:
    image: np.ndarray  # (H, W) uint8
    boxes: np.ndarray  # (n, 4) float64, corner convention
    labels: np.ndarray  # (n,) int64
    name: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)


@dataclass
class DetectionDataset:
    class_names: list[str]
    novel_ids: frozenset[int]
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        self.novel_ids = frozenset(int(c) for c in self.novel_ids)
        n = len(self.class_names)
        if any(not 0 <= c < n for c in self.novel_ids):
            raise ValueError("novel id outside the class registry")
        for r in self.records:
            if r.labels.size and (r.labels.min() < 0 or r.labels.max() >= n):
                raise ValueError(f"annotation class id outside registry in {r.name!r}")

    @property
    def base_ids(self) -> list[int]:
        return [c for c in range(len(self.class_names)) if c not in self.novel_ids]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self) -> int:
        return int(self.records[0].image.shape[0]) if self.records else 0

    def __len__(self) -> int:
        return len(self.records)

    def instance_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in range(self.num_classes)}
        for r in self.records:
            for c in r.labels:
                counts[int(c)] += 1
        return counts

    def restrict(self, classes: Iterable[int]) -> "DetectionDataset":
        """Copy keeping only annotations whose class is in ``classes``."""
        keep = set(int(c) for c in classes)
        recs = []
        for r in self.records:
            m = np.array([int(c) in keep for c in r.labels], dtype=bool)
            recs.append(Record(r.image, r.boxes[m], r.labels[m], r.name))
        return DetectionDataset(list(self.class_names), self.novel_ids, recs)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.class_names).encode())
        h.update(repr(sorted(self.novel_ids)).encode())
        for r in self.records:
            h.update(r.image.tobytes())
            h.update(r.boxes.astype("<f8").tobytes())
            h.update(r.labels.astype("<i8").tobytes())
        return h.hexdigest()


def class_ids(names: Sequence[str], registry: Sequence[str]) -> list[int]:
    ids = []
    for n in names:
        if n not in registry:
            raise ValueError(f"unknown class {n!r}; known: {', '.join(registry)}")
        ids.append(list(registry).index(n))
    return ids


def shape_mask(kind: str, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(h, w)`` mask of one shape, cropped tight to its pixels."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    rx, ry = w / 2.0, h / 2.0
    nx, ny = (xs - cx) / rx, (ys - cy) / ry
    if kind == "square":
        m = np.ones((h, w), dtype=bool)
    elif kind == "circle":
        m = nx ** 2 + ny ** 2 <= 1.0
    elif kind == "triangle":
        m = np.abs(xs - cx) <= (ys + 1) / h * rx
    elif kind == "diamond":
        m = np.abs(nx) + np.abs(ny) <= 1.0
    elif kind == "stripes":
        period = int(rng.integers(3, 5))
        if rng.random() < 0.5:
            on = np.arange(h) % period < period - 1
            m = np.broadcast_to(on[:, None], (h, w)).copy()
        else:
            on = np.arange(w) % period < period - 1
            m = np.broadcast_to(on[None, :], (h, w)).copy()
    elif kind == "frame":
        t = max(2, min(w, h) // 6)
        m = np.ones((h, w), dtype=bool)
        m[t:h - t, t:w - t] = False
    elif kind == "cross":
        tx, ty = max(2, w // 3), max(2, h // 3)
        m = (np.abs(xs - cx) <= tx / 2.0) | (np.abs(ys - cy) <= ty / 2.0)
    elif kind == "ring":
        r2 = nx ** 2 + ny ** 2
        m = (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


class _ClassBag:
    """Draws class ids from seeded shuffled decks so counts stay balanced."""

    def __init__(self, classes: Sequence[int], rng: np.random.Generator):
        self.classes = list(classes)
        self.rng = rng
        self.deck: list[int] = []

    def draw(self) -> int:
        if not self.deck:
            self.deck = [self.classes[i] for i in self.rng.permutation(len(self.classes))]
        return int(self.deck.pop())


def _render_image(size: int, class_shapes: Sequence[str], bag: _ClassBag,
                  rng: np.random.Generator) -> Record:
    img = rng.integers(0, BACKGROUND_MAX + 1, size=(size, size)).astype(np.uint8)
    boxes: list[tuple[int, int, int, int]] = []
    labels: list[int] = []
    for _ in range(int(rng.integers(1, MAX_OBJECTS + 1))):
        cls = bag.draw()
        w = int(rng.integers(MIN_SIZE, min(MAX_SIZE, size) + 1))
        h = int(np.clip(round(w * rng.uniform(0.75, 1.33)), MIN_SIZE, min(MAX_SIZE, size)))
        mask = shape_mask(class_shapes[cls], w, h, rng)
        mh, mw = mask.shape
        for _ in range(PLACEMENT_RETRIES):
            x1 = int(rng.integers(0, size - mw + 1))
            y1 = int(rng.integers(0, size - mh + 1))
            box = (x1, y1, x1 + mw, y1 + mh)
            if all(_separated(box, b) for b in boxes):
                break
        else:
            continue
        level = int(rng.integers(OBJECT_MIN, 256))
        region = img[y1:y1 + mh, x1:x1 + mw]
        region[mask] = level
        boxes.append(box)
        labels.append(cls)
    return Record(img, np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels, dtype=np.int64))


def _separated(a, b) -> bool:
    g = PLACEMENT_GAP
    return (a[2] + g <= b[0] or b[2] + g <= a[0] or a[3] + g <= b[1] or b[3] + g <= a[1])


def generate_synthetic(num_images: int, class_shapes: Sequence[str] = SHAPES, image_size: int = 96,
                       seed: int = 0, novel: Sequence[str] = DEFAULT_NOVEL,
                       draw_classes: Optional[Sequence[int]] = None) -> DetectionDataset:
    """Draw ``num_images`` grayscale scenes of 1-4 non-overlapping shapes.

    ``draw_classes`` restricts which class ids are drawn (e.g. base-only
    training data); the registry always holds every class.
    """
    if len(class_shapes) < 2:
        raise ValueError("need at least two shape classes")
    if image_size < MAX_SIZE:
        raise ValueError(f"image_size must be at least {MAX_SIZE}")
    draw = list(range(len(class_shapes))) if draw_classes is None else [int(c) for c in draw_classes]
    novel_ids = class_ids([n for n in novel if n in class_shapes], class_shapes)
    rng = np.random.default_rng(seed)
    bag = _ClassBag(draw, rng)
    records = []
    for i in range(num_images):
        rec = _render_image(image_size, class_shapes, bag, rng)
        rec.name = f"{i:06d}"
        records.append(rec)
    return DetectionDataset(list(class_shapes), frozenset(novel_ids), records)


@dataclass
class KShotSplit:
    k: int
    seed: int
    dataset: DetectionDataset
    image_indices: list[int]
    counts: dict[int, int]


def build_kshot_split(dataset: DetectionDataset, novel_classes: Iterable[int], k: int,
                      seed: int = 0) -> KShotSplit:
    """Balanced K-shot set: exactly ``k`` annotated instances of every class.

    Classes are filled in id order from seeded shuffles of the images that
    contain them. When an image is selected, its instances are kept while
    their class quota is open; the rest are dropped from the annotations.
    """
    if k < 1:
        raise ValueError("k must be positive")
    novel = frozenset(int(c) for c in novel_classes)
    available = dataset.instance_counts()
    for c, n in available.items():
        if n < k:
            raise ValueError(f"class {dataset.class_names[c]!r} has {n} instances, fewer than K={k}")
    rng = np.random.default_rng(seed)
    counts = {c: 0 for c in range(dataset.num_classes)}
    kept: dict[int, list[int]] = {}
    for c in range(dataset.num_classes):
        candidates = [i for i, r in enumerate(dataset.records) if (r.labels == c).any() and i not in kept]
        for i in rng.permutation(len(candidates)):
            if counts[c] >= k:
                break
            idx = candidates[int(i)]
            rec = dataset.records[idx]
            take = []
            for j in rng.permutation(len(rec.labels)):
                lab = int(rec.labels[j])
                if counts[lab] < k:
                    counts[lab] += 1
                    take.append(int(j))
            if take:
                kept[idx] = sorted(take)
    order = sorted(kept)
    recs = [Record(dataset.records[i].image, dataset.records[i].boxes[kept[i]],
                   dataset.records[i].labels[kept[i]], dataset.records[i].name) for i in order]
    balanced = DetectionDataset(list(dataset.class_names), novel, recs)
    return KShotSplit(k, seed, balanced, order, balanced.instance_counts())


def save_dataset(dataset: DetectionDataset, root: os.PathLike, annotation_file: str = ANNOTATION_FILE) -> Path:
    """Write PNG images plus a line-per-image annotation file under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    novel = set(dataset.novel_ids)
    with open(root / CLASSES_FILE, "w") as f:
        for c, name in enumerate(dataset.class_names):
            f.write(f"{c} {name} {'novel' if c in novel else 'base'}\n")
    lines = []
    for r in dataset.records:
        rel = f"images/{r.name}.png"
        path = root / rel
        Image.fromarray(r.image).save(path, format="PNG")
        tokens = [rel]
        for (x1, y1, x2, y2), c in zip(r.boxes, r.labels):
            tokens.append(f"{int(c)} {int(round(x1))} {int(round(y1))} {int(round(x2))} {int(round(y2))}")
        lines.append(" ".join(tokens))
    ann = root / annotation_file
    ann.write_text("".join(line + "\n" for line in lines))
    return ann


def load_dataset(root: os.PathLike, annotation_file: str = ANNOTATION_FILE) -> DetectionDataset:
    root = Path(root)
    ann = root / annotation_file
    classes = root / CLASSES_FILE
    for p in (ann, classes):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file: {p}")
    names, novel = [], []
    for line in classes.read_text().splitlines():
        cid, name, kind = line.split()
        names.append(name)
        if kind == "novel":
            novel.append(int(cid))
    records = []
    for line in ann.read_text().splitlines():
        tokens = line.split()
        if not tokens:
            continue
        rel, rest = tokens[0], tokens[1:]
        if len(rest) % 5:
            raise ValueError(f"malformed annotation line for {rel}")
        vals = np.array(rest, dtype=np.int64).reshape(-1, 5)
        image = np.array(Image.open(root / rel).convert("L"))
        records.append(Record(image, vals[:, 1:].astype(np.float64), vals[:, 0], Path(rel).stem))
    return DetectionDataset(names, frozenset(novel), records)
