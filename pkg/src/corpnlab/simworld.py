"""Synthetic detection world standing in for a frozen backbone.

Each category owns a unit-norm prototype vector. An anchor's feature is the
IOU-weighted sum of the prototypes of the objects it overlaps, plus isotropic
Gaussian noise. Novel prototypes are drawn around a direction rotated away
from the base cluster, so objectness learned on base classes transfers only
partially to novel ones.

Random streams are Philox generators keyed by ``(seed, stream, index)``; any
scene can be regenerated on its own, in any order.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, as_boxes, generate_anchors, pairwise_iou

EPISODE_FORMAT = "corpn-episode 1"

# stream ids for keyed generators
_WORLD, _TRAIN, _NOVEL_SUPPORT, _BASE_SUPPORT, _TEST, _NOISE, _PLACE = range(7)


class PlacementError(RuntimeError):
    pass


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent counter-based generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class WorldConfig:
    feature_dim: int = 16
    n_base: int = 8
    n_novel: int = 4
    novel_shift: float = 0.65
    proto_spread: float = 0.8
    noise: float = 0.1
    image_size: int = 64
    stride: int = 4
    scales: tuple = (16.0, 32.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    min_object: float = 14.0
    max_object: float = 36.0
    max_objects: int = 3
    max_overlap: float = 0.1
    novel_fraction: float = 0.5

    def __post_init__(self):
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if self.n_base < 1 or self.n_novel < 1:
            raise ValueError("need at least one base and one novel category")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class CategorySplit:
    base_classes: tuple
    novel_classes: tuple

    def __post_init__(self):
        if not self.base_classes or not self.novel_classes:
            raise ValueError("both base and novel classes must be nonempty")
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes must be disjoint")

    @property
    def all_classes(self) -> tuple:
        return tuple(self.base_classes) + tuple(self.novel_classes)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple  # of (category, Box)
    extent: int
    key: tuple = ()  # noise stream key

    @property
    def boxes(self) -> np.ndarray:
        return as_boxes([b for _, b in self.objects])

    @property
    def categories(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=int)


@dataclass
class World:
    config: WorldConfig
    seed: int
    prototypes: np.ndarray  # (n_base + n_novel) x D, base rows first
    split: CategorySplit
    anchors: np.ndarray = field(repr=False)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.prototypes.tobytes())
        h.update(self.anchors.tobytes())
        return h.hexdigest()


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_world(seed: int, n_base: int | None = None, n_novel: int | None = None,
               feature_dim: int | None = None, novel_shift: float | None = None,
               config: WorldConfig | None = None) -> World:
    """Sample category prototypes and the anchor grid.

    ``novel_shift`` in [0, 1] rotates the center of the novel prototype cloud
    away from the base center by ``novel_shift * 90`` degrees; at 0 both
    groups come from the same distribution.
    """
    cfg = config or WorldConfig()
    overrides = {k: v for k, v in dict(n_base=n_base, n_novel=n_novel, feature_dim=feature_dim,
                                       novel_shift=novel_shift).items() if v is not None}
    if overrides:
        cfg = WorldConfig(**{**cfg.__dict__, **overrides})
    rng = stream(seed, _WORLD)
    d = cfg.feature_dim
    base_dir = _unit(rng.normal(size=d))
    ortho = rng.normal(size=d)
    ortho = _unit(ortho - (ortho @ base_dir) * base_dir)
    theta = 0.5 * np.pi * cfg.novel_shift
    novel_dir = np.cos(theta) * base_dir + np.sin(theta) * ortho

    def cloud(center, n):
        return _unit(center[None, :] + cfg.proto_spread * rng.normal(size=(n, d)) / np.sqrt(d))

    protos = np.vstack([cloud(base_dir, cfg.n_base), cloud(novel_dir, cfg.n_novel)])
    split = CategorySplit(tuple(range(cfg.n_base)), tuple(range(cfg.n_base, cfg.n_base + cfg.n_novel)))
    grid = cfg.image_size // cfg.stride
    anchors = generate_anchors(grid, grid, cfg.stride, cfg.scales, cfg.ratios)
    return World(cfg, int(seed), protos, split, anchors)


def render_features(scene: Scene, world: World, anchors=None, noise: float | None = None) -> np.ndarray:
    """Anchor features, ``D x N_A``: IOU-weighted prototype blend plus noise."""
    anchors = world.anchors if anchors is None else as_boxes(anchors)
    sigma = world.config.noise if noise is None else noise
    d = world.feature_dim
    X = np.zeros((d, len(anchors)))
    if scene.objects:
        weights = pairwise_iou(anchors, scene.boxes)  # N_A x n_obj
        X += world.prototypes[scene.categories].T @ weights.T
    if sigma > 0:
        X += sigma * stream(world.seed, _NOISE, *scene.key).standard_normal((d, len(anchors)))
    return X


def _place(rng, cfg: WorldConfig, categories: Sequence[int], scene_id: str, key: tuple) -> Scene:
    objects = []
    boxes = []
    for c in categories:
        for _ in range(200):
            s = rng.uniform(cfg.min_object, cfg.max_object)
            r = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            w, h = s / np.sqrt(r), s * np.sqrt(r)
            if w > cfg.image_size or h > cfg.image_size:
                continue
            x1 = rng.uniform(0, cfg.image_size - w)
            y1 = rng.uniform(0, cfg.image_size - h)
            cand = np.array([x1, y1, x1 + w, y1 + h])
            if boxes and pairwise_iou(cand, np.array(boxes)).max() > cfg.max_overlap:
                continue
            boxes.append(cand)
            objects.append((int(c), Box.from_array(cand)))
            break
        else:
            raise PlacementError(f"could not place {len(categories)} objects in scene {scene_id}")
    return Scene(scene_id, tuple(objects), cfg.image_size, key)


def make_scene(world: World, seed: int, stream_id: int, index: int, categories: Sequence[int],
               scene_id: str) -> Scene:
    key = (seed, stream_id, index)
    return _place(stream(world.seed, _PLACE, *key), world.config, categories, scene_id, key)


@dataclass
class Episode:
    split: CategorySplit
    shots: int
    base_train: list
    novel_support: list
    base_support: list
    test: list

    def support(self, mode: str) -> list:
        if mode == "novel_only":
            return list(self.novel_support)
        if mode == "balanced":
            return list(self.base_support) + list(self.novel_support)
        raise ValueError(f"unknown fine-tuning mode {mode!r}")

    def all_scenes(self) -> list:
        return self.base_train + self.base_support + self.novel_support + self.test


def make_episode(world: World, split: CategorySplit | None = None, k: int = 1,
                 n_train_scenes: int = 100, n_test_scenes: int = 60, seed: int = 0) -> Episode:
    """Build base-training scenes, k-shot support scenes and mixed test scenes.

    Support scenes hold exactly one instance each, so every category gets
    exactly ``k`` support boxes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    split = split or world.split
    cfg = world.config
    base = np.array(split.base_classes)
    novel = np.array(split.novel_classes)

    def count(rng):
        return int(rng.integers(1, cfg.max_objects + 1))

    train = []
    for i in range(n_train_scenes):
        rng = stream(world.seed, _TRAIN, seed, i)
        cats = rng.choice(base, size=count(rng))
        train.append(make_scene(world, seed, _TRAIN, i, cats, f"train-{i:05d}"))

    novel_support = []
    base_support = []
    for group, classes, sid in ((novel_support, novel, _NOVEL_SUPPORT), (base_support, base, _BASE_SUPPORT)):
        label = "novel" if sid == _NOVEL_SUPPORT else "base"
        for c in classes:
            for shot in range(k):
                idx = int(c) * 10_000 + shot
                group.append(make_scene(world, seed, sid, idx, [int(c)], f"support-{label}-{c}-{shot}"))

    test = []
    for i in range(n_test_scenes):
        rng = stream(world.seed, _TEST, seed, i)
        n = count(rng)
        is_novel = rng.random(n) < cfg.novel_fraction
        cats = np.where(is_novel, rng.choice(novel, size=n), rng.choice(base, size=n))
        test.append(make_scene(world, seed, _TEST, i, cats, f"test-{i:05d}"))
    return Episode(split, k, train, novel_support, base_support, test)


def dumps_episode(episode: Episode) -> str:
    """Line-oriented export: ``scene_id category x1 y1 x2 y2`` per object.

    A header line names the format and version; ``#`` lines are comments.
    Scenes appear in the order base_train, base_support, novel_support, test.
    """
    lines = [EPISODE_FORMAT,
             "# base " + " ".join(str(c) for c in episode.split.base_classes),
             "# novel " + " ".join(str(c) for c in episode.split.novel_classes),
             f"# shots {episode.shots}"]
    for scene in episode.all_scenes():
        for c, b in scene.objects:
            lines.append(f"{scene.scene_id} {c} {b.x1!r} {b.y1!r} {b.x2!r} {b.y2!r}")
    return "\n".join(lines) + "\n"


def loads_episode_objects(text: str) -> list[tuple[str, int, Box]]:
    """Parse the export back into ``(scene_id, category, Box)`` tuples."""
    rows = []
    lines = text.splitlines()
    if not lines or lines[0].strip() != EPISODE_FORMAT:
        raise ValueError("not a corpn-episode v1 file")
    for n, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {n}: expected 6 fields, got {len(parts)}")
        rows.append((parts[0], int(parts[1]), Box(*(float(v) for v in parts[2:]))))
    return rows
