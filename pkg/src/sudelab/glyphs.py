"""Parametric 16x16 glyphs: the toy stand-in for a subject benchmark.

Categories carry public attributes (rotation, thickness, size) and a context
(background).  A subject adds private deformations: two notches cut out of
the glyph and a stretch of its main axis.  Rendering is anti-aliased by 4x4
supersampling and is a pure function of its GlyphSpec.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import (ATTRIBUTE_AXES, CATEGORY_NAMES, CONTEXT_AXES, Condition, attribute,
                           category as category_token, compose, context as context_token)

RES = 16
SUPERSAMPLE = 4
FOREGROUND = 1.0
BACKGROUND = {"dark": -1.0, "light": -0.2}
SIZE = {"small": 0.5, "large": 0.82}
HALF_WIDTH = {"thin": 0.1, "thick": 0.2}
NOTCH_RADIUS = 0.2

EXAMPLE_ATTRIBUTES = {"rotation": "rot0", "thickness": "thick", "size": "large"}
EXAMPLE_CONTEXT = "dark"


@dataclass(frozen=True)
class PrivateParams:
    notches: tuple[float, ...] = ()   # positions in [-1, 1] along the glyph's arms
    aspect: float = 0.0               # relative stretch of the main axis

    @property
    def is_default(self) -> bool:
        return not self.notches and self.aspect == 0.0

    def vector(self) -> np.ndarray:
        n = list(self.notches) + [0.0] * (2 - len(self.notches))
        return np.array([1.0 if self.notches else 0.0, n[0], n[1], self.aspect])


@dataclass(frozen=True)
class GlyphSpec:
    category: str
    rotation: str = "rot0"
    thickness: str = "thick"
    size: str = "large"
    background: str = "dark"
    private: PrivateParams = field(default_factory=PrivateParams)

    def __post_init__(self):
        if self.category not in CATEGORY_NAMES:
            raise ValueError(f"unknown category {self.category!r}")
        for axis, val in (("rotation", self.rotation), ("thickness", self.thickness),
                          ("size", self.size)):
            if val not in ATTRIBUTE_AXES[axis]:
                raise ValueError(f"bad {axis} {val!r}")
        if self.background not in CONTEXT_AXES["background"]:
            raise ValueError(f"bad background {self.background!r}")

    @property
    def attributes(self) -> dict[str, str]:
        return {"rotation": self.rotation, "thickness": self.thickness, "size": self.size}

    def condition(self) -> Condition:
        return compose(None, category_token(self.category),
                       [attribute(v) for v in self.attributes.values()],
                       [context_token(self.background)])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["private"] = {"notches": list(self.private.notches), "aspect": self.private.aspect}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GlyphSpec":
        p = d.get("private") or {}
        return cls(d["category"], d["rotation"], d["thickness"], d["size"], d["background"],
                   PrivateParams(tuple(p.get("notches", ())), float(p.get("aspect", 0.0))))


def _grid(res: int = RES, ss: int = SUPERSAMPLE) -> tuple[np.ndarray, np.ndarray]:
    n = res * ss
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    x, y = np.meshgrid(c, -c)  # y up
    return x, y


def _coverage(spec: GlyphSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    theta = np.deg2rad(45.0 if spec.rotation == "rot45" else 0.0)
    # rotate the sample points into the glyph's frame
    p = np.cos(theta) * x + np.sin(theta) * y
    q = -np.sin(theta) * x + np.cos(theta) * y
    s = SIZE[spec.size]
    w = HALF_WIDTH[spec.thickness]
    stretch = 1.0 + spec.private.aspect
    p = p / stretch
    cat = spec.category
    if cat == "bar":
        inside = (np.abs(p) <= s) & (np.abs(q) <= w)
    elif cat == "cross":
        inside = ((np.abs(p) <= s) & (np.abs(q) <= w)) | ((np.abs(q) <= s) & (np.abs(p) <= w))
    elif cat == "disc":
        minor = s * (0.4 if spec.thickness == "thin" else 0.62)
        inside = (p / s) ** 2 + (q / minor) ** 2 <= 1.0
    else:  # ring: elliptical outline
        a, b = s, 0.65 * s
        r = np.sqrt((p / a) ** 2 + (q / b) ** 2)
        inside = np.abs(r - 1.0) * b <= 0.75 * w
    for i, pos in enumerate(spec.private.notches):
        cx, cy = _notch_centre(cat, i, pos, s, w)
        inside &= (p - cx) ** 2 + (q - cy) ** 2 > NOTCH_RADIUS**2
    return inside.astype(np.float64)


def _notch_centre(cat: str, i: int, pos: float, s: float, w: float) -> tuple[float, float]:
    if cat == "ring":
        ang = np.pi * pos + (0.0 if i == 0 else np.pi)
        return s * np.cos(ang), 0.65 * s * np.sin(ang)
    if cat == "cross" and i == 1:
        return 0.0, pos * s
    if cat == "disc":
        minor = s * (0.4 if w == HALF_WIDTH["thin"] else 0.62)
        return pos * s * 0.75, (minor * 0.45 if i == 1 else -minor * 0.45)
    return pos * s, 0.0


def render(spec: GlyphSpec) -> np.ndarray:
    """Deterministic 16x16 grayscale image in [-1, 1]."""
    x, y = _grid()
    cov = _coverage(spec, x, y)
    cov = cov.reshape(RES, SUPERSAMPLE, RES, SUPERSAMPLE).mean(axis=(1, 3))
    bg = BACKGROUND[spec.background]
    return bg + cov * (FOREGROUND - bg)


def all_cells() -> list[GlyphSpec]:
    cells = []
    for cat, rot, th, sz, bg in itertools.product(CATEGORY_NAMES, *ATTRIBUTE_AXES.values(),
                                                  CONTEXT_AXES["background"]):
        cells.append(GlyphSpec(cat, rot, th, sz, bg))
    return cells


@dataclass
class GlyphDataset:
    specs: list[GlyphSpec]
    images: np.ndarray        # (n, 16, 16)
    conditions: list[Condition]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def save(self, directory: str | Path, config_hash: str = "") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {
            "config_hash": config_hash,
            "seed": self.seed,
            "resolution": [RES, RES],
            "dtype": "<f4",
            "items": [{"spec": s.to_dict(), "condition": c.describe()}
                      for s, c in zip(self.specs, self.conditions)],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        self.images.astype("<f4").tofile(d / "images.f32")

    @classmethod
    def load(cls, directory: str | Path) -> "GlyphDataset":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        specs = [GlyphSpec.from_dict(it["spec"]) for it in manifest["items"]]
        images = np.fromfile(d / "images.f32", dtype="<f4").astype(np.float64)
        images = images.reshape(len(specs), RES, RES)
        return cls(specs, images, [s.condition() for s in specs], manifest.get("seed", 0))


def gen_pretrain_set(seed: int = 0, per_condition: int = 8) -> GlyphDataset:
    """Every (category x attributes x context) cell, default private params."""
    if per_condition < 1:
        raise ValueError("per_condition must be >= 1")
    rng = np.random.default_rng(seed)
    cells = all_cells()
    specs = [c for c in cells for _ in range(per_condition)]
    order = rng.permutation(len(specs))
    specs = [specs[i] for i in order]
    images = np.stack([render(s) for s in specs])
    return GlyphDataset(specs, images, [s.condition() for s in specs], seed)


def random_private(rng: np.random.Generator) -> PrivateParams:
    notches = tuple(float(v) for v in rng.uniform(-0.8, 0.8, 2))
    return PrivateParams(notches, float(rng.uniform(-0.2, 0.2)))


def make_subject(category: str, seed: int) -> tuple[np.ndarray, GlyphSpec]:
    """One example image of a new subject plus its hidden spec (evaluation only)."""
    rng = np.random.default_rng([seed, CATEGORY_NAMES.index(category), 7919])
    spec = GlyphSpec(category, **EXAMPLE_ATTRIBUTES, background=EXAMPLE_CONTEXT,
                     private=random_private(rng))
    return render(spec), spec


def with_attributes(spec: GlyphSpec, **changes) -> GlyphSpec:
    return replace(spec, **changes)
