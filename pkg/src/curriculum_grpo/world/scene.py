"""Procedural symbolic scenes standing in for images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from curriculum_grpo.world.vocab import COLORS, SHAPES

# (color, shape) pairs that never occur in the in-domain split.
HELDOUT_COMBOS = frozenset(zip(COLORS, SHAPES))
ALL_COMBOS = tuple((c, s) for c in COLORS for s in SHAPES)
MAX_GRID = 9


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: tuple[int, int, int, int]

    def to_json(self) -> dict:
        return {"shape": self.shape, "color": self.color, "box": list(self.box)}

    @classmethod
    def from_json(cls, d: dict) -> "SceneObject":
        return cls(d["shape"], d["color"], tuple(int(v) for v in d["box"]))


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            x0, y0, x1, y1 = obj.box
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"object box {obj.box} outside {self.width}x{self.height} grid")

    @property
    def shapes(self) -> frozenset[str]:
        return frozenset(o.shape for o in self.objects)

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height,
                "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(int(d["width"]), int(d["height"]),
                   tuple(SceneObject.from_json(o) for o in d["objects"]))


@dataclass(frozen=True)
class SceneConfig:
    width: int = 8
    height: int = 8
    min_objects: int = 1
    max_objects: int = 3
    max_side: int = 4
    # "in" never draws a held-out combo; "heldout" forces at least one.
    combos: str = "in"

    def __post_init__(self) -> None:
        if not (2 <= self.width <= MAX_GRID and 2 <= self.height <= MAX_GRID):
            raise ValueError(f"grid must be between 2 and {MAX_GRID} cells per side")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.combos not in ("in", "heldout", "any"):
            raise ValueError(f"unknown combo policy {self.combos!r}")


IN_DOMAIN = SceneConfig()
# shifted by unseen attribute combinations and a larger grid; object counts stay in range
HELD_OUT = SceneConfig(width=9, height=9, combos="heldout")


def _random_box(rng: np.random.Generator, width: int, height: int, max_side: int):
    w = int(rng.integers(1, min(max_side, width) + 1))
    h = int(rng.integers(1, min(max_side, height) + 1))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return (x0, y0, x0 + w, y0 + h)


def generate_scene(rng: np.random.Generator, cfg: SceneConfig = IN_DOMAIN,
                   n_objects: int | None = None) -> SceneSpec:
    if n_objects is None:
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    in_combos = [c for c in ALL_COMBOS if c not in HELDOUT_COMBOS]
    out_combos = sorted(HELDOUT_COMBOS)
    objects = []
    for i in range(n_objects):
        if cfg.combos == "in":
            pool = in_combos
        elif cfg.combos == "heldout" and i == 0:
            pool = out_combos
        else:
            pool = list(ALL_COMBOS)
        color, shape = pool[int(rng.integers(len(pool)))]
        objects.append(SceneObject(shape, color, _random_box(rng, cfg.width, cfg.height, cfg.max_side)))
    order = rng.permutation(len(objects))
    return SceneSpec(cfg.width, cfg.height, tuple(objects[i] for i in order))


def random_box(rng: np.random.Generator, scene: SceneSpec, max_side: int = 4):
    return _random_box(rng, scene.width, scene.height, max_side)
