"""Synthetic shapes-world grounding corpus.

Scenes are flat-shaded colored shapes on a tinted noisy background. Every
object carries an exact mask, a tight box, a keypoint template under a
similarity transform and a closed-vocabulary caption. Generation is a pure
function of ``(seed, config)``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container

SHAPES = ("triangle", "square", "circle", "star", "cross")
COLORS = {
    "red": (230, 25, 25),
    "green": (30, 200, 50),
    "blue": (40, 80, 240),
    "yellow": (240, 225, 25),
    "magenta": (225, 50, 215),
    "cyan": (25, 215, 230),
    "orange": (255, 140, 0),
    "white": (240, 240, 240),
}
SIZE_WORDS = ("small", "medium", "large")
KEYPOINT_COUNTS = {"triangle": 3, "square": 4, "circle": 1, "star": 10, "cross": 12}
HELD_IN, HELD_OUT = "held_in", "held_out"


class Vocabulary:
    """Closed token vocabulary shared by text prompts and captions."""

    PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"

    def __init__(self, words: Sequence[str] | None = None):
        if words is None:
            words = [self.PAD, self.BOS, self.EOS, "<sep>", *COLORS, *SIZE_WORDS, *SHAPES, "object", "text", "what"]
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.index[self.PAD]

    @property
    def bos_id(self) -> int:
        return self.index[self.BOS]

    @property
    def eos_id(self) -> int:
        return self.index[self.EOS]

    def encode(self, text: str | Iterable[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            w = self.words[int(i)]
            if strip_special and w.startswith("<"):
                if w == self.EOS:
                    break
                continue
            out.append(w)
        return " ".join(out)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class CategorySpec:
    name: str
    shape_kind: str
    color: str
    frequency_rank: int
    split_tag: str = HELD_IN

    @property
    def held_out(self) -> bool:
        return self.split_tag == HELD_OUT


@dataclass
class SceneObject:
    category: CategorySpec
    box: np.ndarray  # (cx, cy, w, h), normalized
    mask: np.ndarray  # bool H x W, visible pixels
    keypoints: np.ndarray  # K x 2, normalized (x, y)
    visibility: np.ndarray  # K, bool
    caption_tokens: list[int]
    pose: tuple[float, float, float, float]  # pixel cx, cy, circumradius, angle (rad)

    @property
    def size_word(self) -> str:
        return VOCAB.words[self.caption_tokens[1]]


@dataclass
class GroundingSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    objects: list[SceneObject]
    phrases: list[str]
    seed: int

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def default_categories(n: int = 20, holdout_fraction: float = 0.25, seed: int = 0) -> tuple[CategorySpec, ...]:
    """Pick ``n`` (shape, color) pairs, assign Zipf ranks and mark a held-out subset.

    Every held-out category keeps its shape and its color represented among the
    held-in categories, so held-out names are new compositions of seen words.
    """
    colors = list(COLORS)
    pairs = []
    for j in range(len(colors)):
        for s, shape in enumerate(SHAPES):
            pairs.append((shape, colors[(s + j) % len(colors)]))
    if n > len(pairs) or n < 4:
        raise ValueError(f"category count must be in [4, {len(pairs)}], got {n}")
    pairs = pairs[:n]
    rng = np.random.default_rng(seed)
    ranks = rng.permutation(n) + 1
    n_out = int(round(holdout_fraction * n))
    if n_out < 2 or n - n_out < 2:
        raise ValueError(f"holdout fraction {holdout_fraction} leaves fewer than 2 categories on one side")
    held_out: set[int] = set()
    order = rng.permutation(n)
    # first pass spreads held-out categories over distinct shapes and colors
    for distinct in (True, False):
        for i in order:
            if len(held_out) == n_out:
                break
            if i in held_out:
                continue
            shape, color = pairs[i]
            if distinct and any(pairs[k][0] == shape or pairs[k][1] == color for k in held_out):
                continue
            rest = [pairs[k] for k in range(n) if k != i and k not in held_out]
            if any(p[0] == shape for p in rest) and any(p[1] == color for p in rest):
                held_out.add(int(i))
    if len(held_out) != n_out:
        raise ValueError("could not choose a compositional holdout set")
    return tuple(
        CategorySpec(
            name=f"{color} {shape}",
            shape_kind=shape,
            color=color,
            frequency_rank=int(ranks[i]),
            split_tag=HELD_OUT if i in held_out else HELD_IN,
        )
        for i, (shape, color) in enumerate(pairs)
    )


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 8
    categories: tuple[CategorySpec, ...] = field(default_factory=default_categories)
    zipf_exponent: float = 1.0
    scale_range: tuple[float, float] = (8.0, 20.0)
    max_rotation_deg: float = 20.0
    min_visible: float = 0.3
    noise_std: float = 0.02
    n_train: int = 5000
    n_val: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError(f"object count range [{self.min_objects}, {self.max_objects}] is invalid")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise ValueError("category names must be unique")
        kinds = [(c.shape_kind, c.color) for c in self.categories]
        if len(set(kinds)) != len(kinds):
            raise ValueError("(shape_kind, color) pairs must be unique")
        for c in self.categories:
            if c.shape_kind not in SHAPES or c.color not in COLORS:
                raise ValueError(f"unknown shape/color in category {c.name!r}")

    @property
    def held_in(self) -> list[CategorySpec]:
        return [c for c in self.categories if not c.held_out]

    @property
    def held_out(self) -> list[CategorySpec]:
        return [c for c in self.categories if c.held_out]

    def category(self, name: str) -> CategorySpec:
        for c in self.categories:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if "categories" in d:
            d["categories"] = tuple(CategorySpec(**c) for c in d["categories"])
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# shape templates (circumradius 1, y pointing down)


def _regular(n: int, radius: float = 1.0, start: float = -math.pi / 2) -> np.ndarray:
    a = start + 2 * math.pi * np.arange(n) / n
    return np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)


def _star() -> np.ndarray:
    outer = _regular(5, 1.0)
    inner = _regular(5, 0.45, start=-math.pi / 2 + math.pi / 5)
    pts = np.empty((10, 2))
    pts[0::2], pts[1::2] = outer, inner
    return pts


def _cross(a: float = 0.33) -> np.ndarray:
    return np.array(
        [[-a, -1], [a, -1], [a, -a], [1, -a], [1, a], [a, a], [a, 1], [-a, 1], [-a, a], [-1, a], [-1, -a], [-a, -a]],
        dtype=float,
    )


POLYGONS = {
    "triangle": _regular(3),
    "square": _regular(4, start=-math.pi / 4),
    "star": _star(),
    "cross": _cross(),
}
CIRCLE_RADIUS = 0.9
KEYPOINT_INSET = 0.75


def keypoint_template(shape_kind: str) -> np.ndarray:
    """Canonical keypoints of a shape in its unit frame (K x 2)."""
    if shape_kind == "circle":
        return np.zeros((1, 2))
    return POLYGONS[shape_kind] * KEYPOINT_INSET


def similarity(points: np.ndarray, cx: float, cy: float, scale: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T * scale + np.array([cx, cy])


def inverse_similarity(points: np.ndarray, cx: float, cy: float, scale: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    return ((points - np.array([cx, cy])) / scale) @ rot


def _inside_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd rule on pixel centers."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (py >= min(y0, y1)) & (py < max(y0, y1))
        xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def rasterize(shape_kind: str, cx: float, cy: float, scale: float, angle: float, size: int) -> np.ndarray:
    """Exact (non anti-aliased) mask of a posed shape, sampled at pixel centers."""
    mask = np.zeros((size, size), dtype=bool)
    r = scale + 1
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, size)
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, size)
    if x0 >= x1 or y0 >= y1:
        return mask
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px, py = xs + 0.5, ys + 0.5
    if shape_kind == "circle":
        sub = (px - cx) ** 2 + (py - cy) ** 2 <= (CIRCLE_RADIUS * scale) ** 2
    else:
        sub = _inside_polygon(px, py, similarity(POLYGONS[shape_kind], cx, cy, scale, angle))
    mask[y0:y1, x0:x1] = sub
    return mask


def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (cx, cy, w, h) box around the positive pixels."""
    h, w = mask.shape
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    x0, x1, y0, y1 = xs[0], xs[-1] + 1, ys[0], ys[-1] + 1
    return np.array([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])


def zipf_pmf(ranks: Sequence[int], exponent: float = 1.0) -> np.ndarray:
    p = np.asarray(ranks, dtype=float) ** -exponent
    return p / p.sum()


def sample_categories(rng: np.random.Generator, cats: Sequence[CategorySpec], n: int, exponent: float) -> list[CategorySpec]:
    p = zipf_pmf([c.frequency_rank for c in cats], exponent)
    return [cats[i] for i in rng.choice(len(cats), size=n, p=p)]


def size_word(scale: float, scale_range: tuple[float, float]) -> str:
    lo, hi = scale_range
    t = (scale - lo) / max(hi - lo, 1e-9)
    return SIZE_WORDS[min(int(t * 3), 2)]


def caption_for(cat: CategorySpec, word: str) -> list[int]:
    return VOCAB.encode([cat.color, word, cat.shape_kind])


def generate_scene(
    seed: int,
    config: DataConfig,
    pool: Sequence[CategorySpec] | None = None,
    required: Sequence[CategorySpec] | None = None,
    single_category: bool = False,
) -> GroundingSample:
    """Render one scene.

    ``pool`` restricts the categories that may appear (defaults to all);
    ``required`` forces the first object to come from that set;
    ``single_category`` makes every object share the first object's category.
    """
    config.validate()
    size = config.image_size
    pool = list(pool) if pool is not None else list(config.categories)
    if not pool:
        raise ValueError("empty category pool")
    rng = np.random.default_rng(seed)
    n_target = int(rng.integers(config.min_objects, config.max_objects + 1))

    tint = rng.uniform(0.0, 0.3, size=3)
    noise = rng.normal(0.0, config.noise_std, size=(size, size, 3))
    lo, hi = config.scale_range
    max_rot = math.radians(config.max_rotation_deg)

    placed: list[tuple[CategorySpec, np.ndarray, tuple[float, float, float, float]]] = []
    first = None
    for k in range(n_target):
        if k == 0 and required:
            cat = sample_categories(rng, list(required), 1, config.zipf_exponent)[0]
        elif single_category and first is not None:
            cat = first
        else:
            cat = sample_categories(rng, pool, 1, config.zipf_exponent)[0]
        for attempt in range(60):
            scale = float(rng.uniform(lo, hi))
            angle = float(rng.uniform(-max_rot, max_rot))
            margin = scale + 1
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            full = rasterize(cat.shape_kind, cx, cy, scale, angle, size)
            if attempt < 30 and any((full & m).any() for _, m, _ in placed):
                continue
            trial = placed + [(cat, full, (cx, cy, scale, angle))]
            if _visibility_ok(trial, config.min_visible):
                placed = trial
                break
        else:
            if k == 0:
                raise RuntimeError(f"could not place any object for seed {seed}")
            continue
        if first is None:
            first = cat

    image = np.broadcast_to(tint, (size, size, 3)).copy()
    for cat, full, _ in placed:
        image[full] = np.array(COLORS[cat.color]) / 255.0
    image = np.clip(image + noise, 0.0, 1.0)
    image = (np.round(image * 255.0).astype(np.uint8).astype(np.float32)) / 255.0

    objects = []
    visible = _visible_masks([m for _, m, _ in placed])
    cover = np.full((size, size), -1, dtype=np.int64)
    for i, (_, full, _) in enumerate(placed):
        cover[full] = i
    for i, ((cat, _, pose), vis) in enumerate(zip(placed, visible)):
        box = mask_to_box(vis)
        cx, cy, scale, angle = pose
        kp_px = similarity(keypoint_template(cat.shape_kind), cx, cy, scale, angle)
        kp = kp_px / size
        x0, y0 = box[0] - box[2] / 2, box[1] - box[3] / 2
        x1, y1 = box[0] + box[2] / 2, box[1] + box[3] / 2
        ix = np.clip(np.floor(kp_px[:, 0]).astype(int), 0, size - 1)
        iy = np.clip(np.floor(kp_px[:, 1]).astype(int), 0, size - 1)
        not_covered = cover[iy, ix] <= i
        in_box = (kp[:, 0] >= x0) & (kp[:, 0] <= x1) & (kp[:, 1] >= y0) & (kp[:, 1] <= y1)
        objects.append(
            SceneObject(
                category=cat,
                box=box,
                mask=vis,
                keypoints=kp,
                visibility=not_covered & in_box,
                caption_tokens=caption_for(cat, size_word(scale, config.scale_range)),
                pose=pose,
            )
        )
    phrases = list(dict.fromkeys(o.category.name for o in objects))
    return GroundingSample(image=image, objects=objects, phrases=phrases, seed=int(seed))


def _visible_masks(full: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    later = np.zeros_like(full[0]) if full else None
    for m in reversed(full):
        out.append(m & ~later)
        later = later | m
    return out[::-1]


def _visibility_ok(placed, min_visible: float) -> bool:
    for (_, full, _), vis in zip(placed, _visible_masks([m for _, m, _ in placed])):
        area = full.sum()
        if area == 0 or vis.sum() < min_visible * area:
            return False
        box = mask_to_box(vis) * vis.shape[0]
        if box[2] < 6 or box[3] < 6:
            return False
    return True


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    name: str
    config: DataConfig
    seeds: list[int]
    pool: list[CategorySpec] | None = None
    required: list[CategorySpec] | None = None
    single_category: bool = False

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, i: int) -> GroundingSample:
        return generate_scene(self.seeds[i], self.config, self.pool, self.required, self.single_category)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


SPLIT_SEED_OFFSETS = {"train": 0, "val_held_in": 10_000_000, "val_held_out": 20_000_000, "val_counting": 30_000_000}


def make_splits(config: DataConfig) -> dict[str, Split]:
    """Train / held-in val / held-out val splits.

    Train scenes draw only held-in categories; every held-out val scene has at
    least one held-out object.
    """
    config.validate()
    held_in, held_out = config.held_in, config.held_out
    if len(held_in) < 2 or len(held_out) < 2:
        raise ValueError(f"holdout leaves {len(held_in)} held-in / {len(held_out)} held-out categories; need >= 2 each")
    base = config.seed * 100_000_000

    def seeds(name: str, n: int) -> list[int]:
        return [base + SPLIT_SEED_OFFSETS[name] + i for i in range(n)]

    return {
        "train": Split("train", config, seeds("train", config.n_train), pool=held_in),
        "val_held_in": Split("val_held_in", config, seeds("val_held_in", config.n_val), pool=held_in),
        "val_held_out": Split(
            "val_held_out", config, seeds("val_held_out", config.n_val), pool=list(config.categories), required=held_out
        ),
    }


def counting_split(config: DataConfig, n: int | None = None) -> Split:
    """Single-category scenes over held-in categories, for exemplar counting."""
    n = config.n_val if n is None else n
    base = config.seed * 100_000_000 + SPLIT_SEED_OFFSETS["val_counting"]
    return Split("val_counting", config, [base + i for i in range(n)], pool=config.held_in, single_category=True)


def save_split(directory: str | Path, split: Split) -> None:
    """Write a split as ``samples.bin`` (named arrays) plus ``split.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [c.name for c in split.config.categories]
    images, boxes, cats, owners, kps, vis, caps, masks, poses = [], [], [], [], [], [], [], [], []
    kmax = max(KEYPOINT_COUNTS.values())
    for si, s in enumerate(split):
        images.append(np.round(s.image * 255).astype(np.uint8))
        for o in s.objects:
            owners.append(si)
            boxes.append(o.box)
            cats.append(names.index(o.category.name))
            kp = np.zeros((kmax, 2))
            kp[: len(o.keypoints)] = o.keypoints
            kv = np.zeros(kmax, dtype=np.uint8)
            kv[: len(o.visibility)] = o.visibility
            kps.append(kp)
            vis.append(kv)
            caps.append(o.caption_tokens)
            masks.append(np.packbits(o.mask.reshape(-1)))
            poses.append(o.pose)
    arrays = {
        "images": np.stack(images),
        "seeds": np.asarray(split.seeds, dtype=np.int64),
        "object_owner": np.asarray(owners, dtype=np.int64),
        "object_box": np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        "object_category": np.asarray(cats, dtype=np.int64),
        "object_keypoints": np.asarray(kps, dtype=np.float64).reshape(-1, kmax, 2),
        "object_visibility": np.asarray(vis, dtype=np.uint8).reshape(-1, kmax),
        "object_caption": np.asarray(caps, dtype=np.int64).reshape(-1, 3),
        "object_mask_bits": np.asarray(masks, dtype=np.uint8),
        "object_pose": np.asarray(poses, dtype=np.float64).reshape(-1, 4),
    }
    container.save(directory / "samples.bin", arrays, {"split": split.name})
    sidecar = {
        "split": split.name,
        "categories": [dataclasses.asdict(c) for c in split.config.categories],
        "seeds": list(split.seeds),
        "config": split.config.to_dict(),
        "config_hash": split.config.digest(),
        "pool": None if split.pool is None else [c.name for c in split.pool],
        "required": None if split.required is None else [c.name for c in split.required],
        "single_category": split.single_category,
        "vocabulary": VOCAB.words,
    }
    (directory / "split.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_split(directory: str | Path) -> tuple[Split, list[GroundingSample]]:
    directory = Path(directory)
    side = json.loads((directory / "split.json").read_text())
    config = DataConfig.from_dict(side["config"])
    by_name = {c.name: c for c in config.categories}
    split = Split(
        side["split"],
        config,
        side["seeds"],
        pool=None if side["pool"] is None else [by_name[n] for n in side["pool"]],
        required=None if side["required"] is None else [by_name[n] for n in side["required"]],
        single_category=side["single_category"],
    )
    arr, _ = container.load(directory / "samples.bin")
    size = config.image_size
    samples = [
        GroundingSample(image=img.astype(np.float32) / 255.0, objects=[], phrases=[], seed=int(seed))
        for img, seed in zip(arr["images"], arr["seeds"])
    ]
    cats = config.categories
    for j, owner in enumerate(arr["object_owner"]):
        cat = cats[int(arr["object_category"][j])]
        k = KEYPOINT_COUNTS[cat.shape_kind]
        mask = np.unpackbits(arr["object_mask_bits"][j])[: size * size].reshape(size, size).astype(bool)
        samples[owner].objects.append(
            SceneObject(
                category=cat,
                box=arr["object_box"][j],
                mask=mask,
                keypoints=arr["object_keypoints"][j][:k],
                visibility=arr["object_visibility"][j][:k].astype(bool),
                caption_tokens=[int(t) for t in arr["object_caption"][j]],
                pose=tuple(float(v) for v in arr["object_pose"][j]),
            )
        )
    for s in samples:
        s.phrases = list(dict.fromkeys(o.category.name for o in s.objects))
    return split, samples
