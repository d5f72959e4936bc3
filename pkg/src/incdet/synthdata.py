"""Deterministic synthetic scenes and the missing-annotation step filter.

A scene is a G x G grid of feature cells. Each object class renders a fixed
descriptor direction (its own channel) over a class-specific footprint shape,
on top of background noise. Incremental step datasets keep only scenes that
contain at least one new-class object and strip every annotation whose class
is not in the current step, while the rendered image stays untouched.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

CORPUS_FORMAT_VERSION = 1


class DataError(Exception):
    pass


@dataclass
class GenConfig:
    grid: int = 16
    noise_sigma: float = 0.1
    signal_amplitude: float = 1.5
    min_objects: int = 1
    max_objects: int = 4
    mix_prob: float = 0.7  # chance a follow-up object is drawn from the other class half
    max_overlap_iou: float = 0.3
    placement_retries: int = 30
    test_fraction: float = 0.2


@dataclass
class SceneObject:
    class_id: int
    box: np.ndarray  # xyxy in cell units
    mask: np.ndarray  # (G, G) bool


@dataclass
class Scene:
    cells: np.ndarray  # (G, G, F)
    objects: list


@dataclass
class Corpus:
    num_classes: int
    grid: int
    feat_dim: int
    seed: int
    train: list
    test: list  # fully annotated evaluation split


@dataclass
class StepDataset:
    """Training scenes for one step: images intact, labels restricted to Y^t."""

    step_index: int
    new_classes: tuple
    entries: list = field(default_factory=list)  # (scene, kept objects)


def feat_dim_for(num_classes):
    return num_classes + 2


def _footprint(class_id, rng):
    kind = class_id % 3
    if kind == 0:  # square
        side = int(rng.integers(2, 5))
        return np.ones((side, side), dtype=bool)
    if kind == 1:  # disc
        radius = float(rng.uniform(1.2, 2.2))
        size = int(np.ceil(radius * 2))
        yy, xx = np.mgrid[0:size, 0:size]
        c = (size - 1) / 2.0
        stamp = (yy - c) ** 2 + (xx - c) ** 2 <= radius**2
        return stamp
    # bar, horizontal or vertical
    length = int(rng.integers(3, 6))
    thickness = 2
    stamp = np.ones((thickness, length), dtype=bool)
    return stamp.T if rng.random() < 0.5 else stamp


def _box_iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area - inter)


def _pick_class(rng, num_classes, existing, mix_prob):
    if not existing:
        return int(rng.integers(0, num_classes))
    half = num_classes // 2
    lower = [c for c in range(num_classes) if c < half]
    upper = [c for c in range(num_classes) if c >= half]
    last_lower = existing[-1] < half
    if rng.random() < mix_prob:
        pool = upper if last_lower else lower
    else:
        pool = lower if last_lower else upper
    return int(pool[rng.integers(0, len(pool))])


def _generate_scene(rng, num_classes, config):
    g = config.grid
    f = feat_dim_for(num_classes)
    cells = rng.normal(0.0, config.noise_sigma, size=(g, g, f))
    objects = []
    n_target = int(rng.integers(config.min_objects, config.max_objects + 1))
    classes_so_far = []
    for k in range(n_target):
        cid = _pick_class(rng, num_classes, classes_so_far, config.mix_prob)
        stamp = _footprint(cid, rng)
        sh, sw = stamp.shape
        placed = False
        for _ in range(config.placement_retries):
            y0 = int(rng.integers(0, g - sh + 1))
            x0 = int(rng.integers(0, g - sw + 1))
            box = np.array([x0, y0, x0 + sw, y0 + sh], dtype=np.float64)
            if all(_box_iou(box, o.box) <= config.max_overlap_iou for o in objects):
                placed = True
                break
        if not placed:
            if k == 0:
                raise DataError("infeasible object placement after bounded retries")
            continue
        mask = np.zeros((g, g), dtype=bool)
        mask[y0 : y0 + sh, x0 : x0 + sw] = stamp
        cells[:, :, cid] += mask * config.signal_amplitude
        objects.append(SceneObject(cid, box, mask))
        classes_so_far.append(cid)
    return Scene(cells=cells, objects=objects)


def generate_corpus(num_classes, num_scenes, seed, config=None):
    """Deterministic corpus: num_scenes training scenes plus a fully annotated
    test split from a disjoint seed stream."""
    if num_classes < 2:
        raise DataError("need at least 2 classes")
    if num_scenes < 0:
        raise DataError("num_scenes must be >= 0")
    config = config or GenConfig()
    train = [
        _generate_scene(np.random.default_rng([seed, i]), num_classes, config)
        for i in range(num_scenes)
    ]
    n_test = int(round(config.test_fraction * num_scenes))
    test = [
        _generate_scene(np.random.default_rng([seed, 1_000_000 + i]), num_classes, config)
        for i in range(n_test)
    ]
    return Corpus(
        num_classes=num_classes,
        grid=config.grid,
        feat_dim=feat_dim_for(num_classes),
        seed=seed,
        train=train,
        test=test,
    )


def build_step_dataset(corpus, schedule, t):
    """Scenes with >= 1 new-class object; annotations outside Y^t removed."""
    new = tuple(schedule.new_classes(t))
    if not new:
        raise DataError(f"step {t} introduces no classes")
    entries = []
    for scene in corpus.train:
        kept = [o for o in scene.objects if o.class_id in new]
        if kept:
            entries.append((scene, kept))
    return StepDataset(step_index=t, new_classes=new, entries=entries)


def mixed_scene_fraction(corpus, schedule):
    """Fraction of training scenes containing classes from two different steps."""
    def step_of(cid):
        for t in range(1, schedule.num_steps + 1):
            if cid in schedule.new_classes(t):
                return t
        return None

    mixed = 0
    for scene in corpus.train:
        steps = {step_of(o.class_id) for o in scene.objects}
        if len(steps) > 1:
            mixed += 1
    return mixed / max(len(corpus.train), 1)


# ---------------------------------------------------------------------------
# serialization


def save_corpus(corpus, path):
    scenes = corpus.train + corpus.test
    images = np.stack([s.cells for s in scenes]) if scenes else np.zeros((0, 0, 0, 0))
    obj_scene, obj_class, obj_box, obj_mask = [], [], [], []
    for i, scene in enumerate(scenes):
        for o in scene.objects:
            obj_scene.append(i)
            obj_class.append(o.class_id)
            obj_box.append(o.box)
            obj_mask.append(o.mask.astype(np.uint8))
    g = corpus.grid
    np.savez(
        path,
        version=np.int64(CORPUS_FORMAT_VERSION),
        meta=np.array(
            [corpus.num_classes, corpus.grid, corpus.feat_dim, corpus.seed, len(corpus.train)],
            dtype=np.int64,
        ),
        images=images,
        obj_scene=np.asarray(obj_scene, dtype=np.int64),
        obj_class=np.asarray(obj_class, dtype=np.int64),
        obj_box=np.asarray(obj_box, dtype=np.float64).reshape(-1, 4),
        obj_mask=np.asarray(obj_mask, dtype=np.uint8).reshape(-1, g, g),
    )


def load_corpus(path):
    with np.load(path) as data:
        version = int(data["version"])
        if version != CORPUS_FORMAT_VERSION:
            raise DataError(f"unsupported corpus format version {version}")
        num_classes, grid, feat_dim, seed, n_train = (int(v) for v in data["meta"])
        images = data["images"]
        scenes = [Scene(cells=images[i].copy(), objects=[]) for i in range(images.shape[0])]
        for si, cid, box, mask in zip(
            data["obj_scene"], data["obj_class"], data["obj_box"], data["obj_mask"]
        ):
            scenes[int(si)].objects.append(
                SceneObject(int(cid), box.astype(np.float64), mask.astype(bool))
            )
    return Corpus(
        num_classes=num_classes,
        grid=grid,
        feat_dim=feat_dim,
        seed=seed,
        train=scenes[:n_train],
        test=scenes[n_train:],
    )


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
