"""Synthetic referring-expression data: coloured shapes, templated expressions, RES/GRES labels.

Every sample is a pure function of ``(dataset seed, sample index, regime, image size)``.
Expressions come from a closed grammar::

    NP      := "the" [size] [color] SHAPE [LOC] [REL]
    LOC     := "on the left" | "on the right"
    REL     := ("above" | "below") "the" [size] [color] SHAPE
    PLURAL  := "all the" [size] [color] (SHAPES | "shapes")
    EXPR    := NP | PLURAL | NP "and" NP

``resolve`` evaluates an expression against a scene and is what the generator uses to
guarantee that each emitted expression denotes exactly its target set.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ssp_sam.errors import DataError, InvalidInputError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles"}

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
# half-extent as a fraction of the canvas
RADIUS = {"small": 0.08, "large": 0.14}

PAD, UNK = "<pad>", "<unk>"
LEXICON = (
    ("the", "all", "and", "on", "left", "right", "above", "below", "shapes")
    + SIZES
    + COLORS
    + SHAPES
    + tuple(PLURALS.values())
)
VOCAB = (PAD, UNK) + tuple(sorted(LEXICON))
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}

GRES_KIND_PROBS = {"single": 0.5, "multi": 0.3, "none": 0.2}
RELATION_PROB = 0.25
MIN_REL_GAP = 0.1


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cx: float
    cy: float
    radius: float  # normalized half-extent

    @property
    def half(self) -> str:
        return "left" if self.cx < 0.5 else "right"


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    canvas: int
    seed: int
    kind: str = "single"  # "single" | "multi" | "none"
    target_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray  # 3xHxW float32 in [0, 1]
    expression: str
    token_ids: np.ndarray  # L int64
    word_mask: np.ndarray  # L bool
    gt_mask: np.ndarray  # HxW bool
    gt_box: np.ndarray  # (cx, cy, w, h) normalized, zeros for no-target
    is_no_target: bool
    target_count: int
    split: str = "train"
    scene: SceneSpec | None = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------- scenes


def _sample_kind(rng: np.random.Generator, regime: str) -> str:
    if regime == "res":
        return "single"
    if regime != "gres":
        raise InvalidInputError(f"unknown regime {regime!r}")
    u = rng.random()
    if u < GRES_KIND_PROBS["single"]:
        return "single"
    if u < GRES_KIND_PROBS["single"] + GRES_KIND_PROBS["multi"]:
        return "multi"
    return "none"


def _place_objects(rng: np.random.Generator, n: int, canvas: int) -> list[SceneObject]:
    gap = 2.0 / canvas
    for _ in range(200):
        objects: list[SceneObject] = []
        keys = set()
        for _ in range(n):
            for _ in range(100):
                shape = SHAPES[rng.integers(len(SHAPES))]
                color = COLORS[rng.integers(len(COLORS))]
                size = SIZES[rng.integers(len(SIZES))]
                r = RADIUS[size]
                lo, hi = r + 1.0 / canvas, 1.0 - r - 1.0 / canvas
                cx, cy = rng.uniform(lo, hi, size=2)
                obj = SceneObject(shape, color, size, float(cx), float(cy), r)
                if (shape, color, size, obj.half) in keys:
                    continue
                # bounding squares must stay apart, which keeps masks disjoint
                if any(
                    max(abs(o.cx - obj.cx), abs(o.cy - obj.cy)) < o.radius + obj.radius + gap
                    for o in objects
                ):
                    continue
                objects.append(obj)
                keys.add((shape, color, size, obj.half))
                break
            else:
                break
        if len(objects) == n:
            return objects
    raise DataError(f"could not place {n} objects on a {canvas}px canvas")


def generate_scene(seed: int, regime: str = "res", canvas: int = 64) -> SceneSpec:
    """Draw a scene and its query plan (kind and target set) from ``seed``."""
    rng = np.random.default_rng(seed)
    kind = _sample_kind(rng, regime)
    lo = 2 if kind == "multi" else 1
    n = int(rng.integers(lo, 6))
    objects = _place_objects(rng, n, canvas)
    scene = SceneSpec(tuple(objects), canvas, seed, kind)
    targets = _choose_targets(scene, rng)
    return SceneSpec(scene.objects, canvas, seed, kind, targets)


def _choose_targets(scene: SceneSpec, rng: np.random.Generator) -> tuple[int, ...]:
    n = len(scene.objects)
    if scene.kind == "single":
        return (int(rng.integers(n)),)
    if scene.kind == "none":
        return ()
    groups = _plural_groups(scene)
    if groups and rng.random() < 0.5:
        _, members = groups[int(rng.integers(len(groups)))]
        return tuple(members)
    pair = rng.choice(n, size=2, replace=False)
    return tuple(sorted(int(i) for i in pair))


def _plural_groups(scene: SceneSpec) -> list[tuple[tuple[str | None, str | None, str | None], list[int]]]:
    groups = []
    seen = set()
    for size in (None,) + SIZES:
        for color in (None,) + COLORS:
            for shape in (None,) + SHAPES:
                if size is None and color is None and shape is None:
                    continue
                members = [
                    i
                    for i, o in enumerate(scene.objects)
                    if (size is None or o.size == size)
                    and (color is None or o.color == color)
                    and (shape is None or o.shape == shape)
                ]
                if len(members) >= 2 and tuple(members) not in seen:
                    seen.add(tuple(members))
                    groups.append(((size, color, shape), members))
    return groups


# ---------------------------------------------------------------- rendering


def _object_mask(obj: SceneObject, canvas: int) -> np.ndarray:
    coords = (np.arange(canvas) + 0.5) / canvas
    dx = coords[None, :] - obj.cx
    dy = coords[:, None] - obj.cy
    r = obj.radius
    if obj.shape == "circle":
        return dx**2 + dy**2 <= r**2
    if obj.shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if obj.shape == "triangle":
        # apex up, base on the bottom edge of the bounding square
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise InvalidInputError(f"unknown shape {obj.shape!r}")


def render(scene: SceneSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Hard-rasterize ``scene``; returns a 3xHxW float32 image and one bool mask per object."""
    s = scene.canvas
    image = np.zeros((3, s, s), dtype=np.float32)
    masks = []
    for obj in scene.objects:
        m = _object_mask(obj, s)
        image[:, m] = np.asarray(RGB[obj.color], dtype=np.float32)[:, None]
        masks.append(m)
    return image, masks


def mask_to_corners(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Pixel-unit (x1, y1, x2, y2) envelope of a mask, exclusive max; zeros if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def corners_to_cxcywh(corners: Sequence[float], size: int) -> np.ndarray:
    x1, y1, x2, y2 = corners
    if x2 <= x1 or y2 <= y1:
        return np.zeros(4, dtype=np.float32)
    return np.array([(x1 + x2) / 2 / size, (y1 + y2) / 2 / size, (x2 - x1) / size, (y2 - y1) / size], dtype=np.float32)


# ---------------------------------------------------------------- expressions


def _matches(obj: SceneObject, size: str | None, color: str | None, shape: str | None) -> bool:
    return (size is None or obj.size == size) and (color is None or obj.color == color) and (shape is None or obj.shape == shape)


def _np_words(obj: SceneObject, use_size: bool, use_color: bool) -> list[str]:
    words = ["the"]
    if use_size:
        words.append(obj.size)
    if use_color:
        words.append(obj.color)
    words.append(obj.shape)
    return words


_NP_VARIANTS = ((False, False, False), (False, True, False), (True, False, False), (True, True, False),
                (False, False, True), (False, True, True), (True, False, True), (True, True, True))


def describe(scene: SceneSpec, target: int) -> str:
    """Shortest attribute (then attribute + half) noun phrase that picks out ``target`` alone."""
    obj = scene.objects[target]
    for use_size, use_color, use_loc in _NP_VARIANTS:
        words = _np_words(obj, use_size, use_color)
        if use_loc:
            words += ["on", "the", obj.half]
        text = " ".join(words)
        if resolve(text, scene) == frozenset({target}):
            return text
    raise DataError(f"no unique description for object {target} in scene seed {scene.seed}")


def _relational(scene: SceneSpec, target: int, rng: np.random.Generator) -> str | None:
    obj = scene.objects[target]
    anchors = []
    for j, other in enumerate(scene.objects):
        if j == target or abs(other.cy - obj.cy) < MIN_REL_GAP:
            continue
        for use_size, use_color, _ in _NP_VARIANTS[:4]:
            anchor_np = " ".join(_np_words(other, use_size, use_color))
            if resolve(anchor_np, scene) == frozenset({j}):
                anchors.append((j, anchor_np))
                break
    if not anchors:
        return None
    j, anchor_np = anchors[int(rng.integers(len(anchors)))]
    rel = "above" if obj.cy < scene.objects[j].cy else "below"
    for use_size, use_color, _ in _NP_VARIANTS[:4]:
        text = " ".join(_np_words(obj, use_size, use_color) + [rel, anchor_np])
        if resolve(text, scene) == frozenset({target}):
            return text
    return None


def _plural_text(size: str | None, color: str | None, shape: str | None) -> str:
    words = ["all", "the"]
    if size:
        words.append(size)
    if color:
        words.append(color)
    words.append(PLURALS[shape] if shape else "shapes")
    return " ".join(words)


def realize_expression(scene: SceneSpec, target_ids: Iterable[int] | None = None) -> str:
    """Render a templated expression denoting exactly ``target_ids`` in ``scene``.

    An empty target set yields a reference to a colour/shape pair absent from the scene.
    Template choice is seeded by the scene seed, so the result is deterministic.
    """
    targets = tuple(sorted(scene.target_ids if target_ids is None else target_ids))
    rng = np.random.default_rng([scene.seed, 7919])
    if not targets:
        present = {(o.color, o.shape) for o in scene.objects}
        absent = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in present]
        color, shape = absent[int(rng.integers(len(absent)))]
        return f"the {color} {shape}"
    if len(targets) == 1:
        if rng.random() < RELATION_PROB:
            text = _relational(scene, targets[0], rng)
            if text is not None:
                return text
        return describe(scene, targets[0])
    for key, members in _plural_groups(scene):
        if tuple(members) == targets:
            return _plural_text(*key)
    return " and ".join(describe(scene, t) for t in targets)


def _parse_np(words: list[str]) -> tuple[str | None, str | None, str | None, list[str]]:
    size = color = None
    i = 0
    if i < len(words) and words[i] in SIZES:
        size = words[i]
        i += 1
    if i < len(words) and words[i] in COLORS:
        color = words[i]
        i += 1
    if i >= len(words):
        raise InvalidInputError("noun phrase without a head noun")
    return size, color, words[i], words[i + 1:]


def _resolve_singular(words: list[str], scene: SceneSpec) -> frozenset[int]:
    if not words or words[0] != "the":
        raise InvalidInputError(f"expected 'the': {' '.join(words)!r}")
    size, color, shape, rest = _parse_np(words[1:])
    if shape not in SHAPES:
        raise InvalidInputError(f"unknown noun {shape!r}")
    hits = {i for i, o in enumerate(scene.objects) if _matches(o, size, color, shape)}
    if rest[:2] == ["on", "the"] and len(rest) >= 3 and rest[2] in ("left", "right"):
        hits = {i for i in hits if scene.objects[i].half == rest[2]}
        rest = rest[3:]
    if rest and rest[0] in ("above", "below"):
        anchor = _resolve_singular(rest[1:], scene)
        if len(anchor) != 1:
            return frozenset()
        ay = scene.objects[next(iter(anchor))].cy
        if rest[0] == "above":
            hits = {i for i in hits if scene.objects[i].cy < ay}
        else:
            hits = {i for i in hits if scene.objects[i].cy > ay}
        rest = []
    if rest:
        raise InvalidInputError(f"trailing words {' '.join(rest)!r}")
    return frozenset(hits)


def resolve(text: str, scene: SceneSpec) -> frozenset[int]:
    """Set of object indices ``text`` denotes in ``scene`` under the template grammar."""
    words = text.split()
    if "and" in words:
        parts = " ".join(words).split(" and ")
        out: set[int] = set()
        for part in parts:
            hit = _resolve_singular(part.split(), scene)
            if len(hit) != 1:
                return frozenset()
            out |= hit
        return frozenset(out)
    if words[:2] == ["all", "the"]:
        size, color, noun, rest = _parse_np(words[2:])
        if rest:
            raise InvalidInputError(f"trailing words {' '.join(rest)!r}")
        shape = None if noun == "shapes" else next(s for s, p in PLURALS.items() if p == noun)
        return frozenset(i for i, o in enumerate(scene.objects) if _matches(o, size, color, shape))
    return _resolve_singular(words, scene)


# ---------------------------------------------------------------- tokens


def tokenize(text: str, max_tokens: int = 20) -> tuple[np.ndarray, np.ndarray]:
    words = text.split()
    if not words:
        raise InvalidInputError("empty expression")
    if len(words) > max_tokens:
        raise InvalidInputError(f"expression has {len(words)} words, limit is {max_tokens}")
    ids = np.zeros(max_tokens, dtype=np.int64)
    mask = np.zeros(max_tokens, dtype=bool)
    for i, w in enumerate(words):
        ids[i] = WORD_TO_ID.get(w, WORD_TO_ID[UNK])
        mask[i] = True
    return ids, mask


def detokenize(token_ids: np.ndarray, word_mask: np.ndarray) -> str:
    return " ".join(VOCAB[int(t)] for t, m in zip(token_ids, word_mask) if m)


# ---------------------------------------------------------------- samples


def merge_targets(masks: Sequence[np.ndarray], canvas: int) -> tuple[np.ndarray, np.ndarray]:
    from ssp_sam.metrics import merge_gres_targets

    merged, corners = merge_gres_targets(list(masks), [mask_to_corners(m) for m in masks], shape=(canvas, canvas))
    return merged, corners_to_cxcywh(corners, canvas)


def sample_seed(dataset_seed: int, index: int) -> int:
    # disjoint index ranges map to disjoint seeds
    return dataset_seed * 10_000_000 + index


def make_sample(index: int, dataset_seed: int = 0, regime: str = "res", image_size: int = 64,
                max_tokens: int = 20, split: str = "train") -> Sample:
    scene = generate_scene(sample_seed(dataset_seed, index), regime, image_size)
    image, masks = render(scene)
    text = realize_expression(scene)
    ids, wmask = tokenize(text, max_tokens)
    gt_mask, gt_box = merge_targets([masks[i] for i in scene.target_ids], image_size)
    return Sample(
        id=f"{index:06d}",
        image=image,
        expression=text,
        token_ids=ids,
        word_mask=wmask,
        gt_mask=gt_mask,
        gt_box=gt_box,
        is_no_target=not scene.target_ids,
        target_count=len(scene.target_ids),
        split=split,
        scene=scene,
    )


def split_of(index: int, size: int, val_fraction: float = 0.1, test_fraction: float = 0.1) -> str:
    n_val = int(round(size * val_fraction))
    n_test = int(round(size * test_fraction))
    n_train = size - n_val - n_test
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_samples(size: int, regime: str = "res", seed: int = 0, image_size: int = 64,
                     max_tokens: int = 20, val_fraction: float = 0.1, test_fraction: float = 0.1,
                     start: int = 0) -> list[Sample]:
    return [
        make_sample(i, seed, regime, image_size, max_tokens, split_of(i, size, val_fraction, test_fraction))
        for i in range(start, size)
    ]


# ---------------------------------------------------------------- disk layout


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_dataset(root: str | os.PathLike, size: int, regime: str = "res", seed: int = 0,
                  image_size: int = 64, max_tokens: int = 20, val_fraction: float = 0.1,
                  test_fraction: float = 0.1) -> dict[str, int]:
    """Write ``images/``, ``masks/``, ``annotations.jsonl`` and ``vocab.txt`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    counts = {"train": 0, "val": 0, "test": 0}
    for i in range(size):
        s = make_sample(i, seed, regime, image_size, max_tokens, split_of(i, size, val_fraction, test_fraction))
        rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.gt_mask.astype(np.uint8) * 255, mode="L").save(root / "masks" / f"{s.id}.png")
        lines.append(json.dumps({
            "id": s.id,
            "expression": s.expression,
            "box": [round(float(v), 6) for v in s.gt_box],
            "is_no_target": s.is_no_target,
            "target_count": s.target_count,
            "split": s.split,
        }))
        counts[s.split] += 1
    _atomic_write_text(root / "annotations.jsonl", "\n".join(lines) + "\n")
    _atomic_write_text(root / "vocab.txt", "\n".join(VOCAB) + "\n")
    return counts


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_annotations(root: str | os.PathLike) -> list[dict]:
    path = Path(root) / "annotations.jsonl"
    if not path.exists():
        raise DataError(f"missing {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_dataset(root: str | os.PathLike, split: str | None = None, max_tokens: int = 20,
                 limit: int | None = None) -> list[Sample]:
    root = Path(root)
    vocab_path = root / "vocab.txt"
    if vocab_path.exists() and tuple(vocab_path.read_text().split()) != VOCAB:
        raise DataError(f"{vocab_path} does not match the built-in lexicon")
    out = []
    for ann in read_annotations(root):
        if split is not None and ann["split"] != split:
            continue
        image = load_image(root / "images" / f"{ann['id']}.png")
        with Image.open(root / "masks" / f"{ann['id']}.png") as im:
            gt_mask = np.asarray(im.convert("L")) > 127
        ids, wmask = tokenize(ann["expression"], max_tokens)
        out.append(Sample(
            id=ann["id"],
            image=image,
            expression=ann["expression"],
            token_ids=ids,
            word_mask=wmask,
            gt_mask=gt_mask,
            gt_box=np.asarray(ann["box"], dtype=np.float32),
            is_no_target=bool(ann["is_no_target"]),
            target_count=int(ann["target_count"]),
            split=ann["split"],
        ))
        if limit is not None and len(out) >= limit:
            break
    return out
