"""Synthetic desk scenes, referring-expression corpus, proposals, and splits.

A Scene is the stand-in for a photographed tabletop: a pixel canvas holding
colored objects with 2D boxes and metric 3D extents.  Expressions are built
from templates over attribute words and a fixed spatial-relation vocabulary,
and every emitted expression is checked against an exhaustive oracle so that
exactly one object in the scene satisfies it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("cup", "bottle", "glass", "can", "book", "box")
COLORS = ("red", "green", "blue", "orange", "yellow", "white")
SIZE_CLASSES = ("small", "large")

# Per-category word pools: first entry is the primary word used for captions,
# the rest are synonyms mixed into queries.  Pools are disjoint across
# categories so attribute-only expressions stay unambiguous.
CATEGORY_WORDS = {
    "cup": ("cup", "mug", "teacup"),
    "bottle": ("bottle", "flask", "canteen"),
    "glass": ("glass", "tumbler", "goblet"),
    "can": ("can", "tin", "canister"),
    "book": ("book", "novel", "paperback"),
    "box": ("box", "crate", "carton"),
}

BINARY_RELATIONS = ("left of", "right of", "above", "below", "next to")
GLOBAL_RELATIONS = ("left", "right", "leftmost", "rightmost", "middle")

# Approximate metric footprint (w, h, d in meters) per category, scaled by
# size class for grasp planning.
_BASE_EXTENT = {
    "cup": (0.08, 0.10, 0.08),
    "bottle": (0.07, 0.24, 0.07),
    "glass": (0.07, 0.12, 0.07),
    "can": (0.066, 0.12, 0.066),
    "book": (0.15, 0.21, 0.03),
    "box": (0.20, 0.15, 0.14),
}
_SIZE_SCALE = {"small": 0.8, "large": 1.3}


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed on the canvas without overlap."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class ObjectExtent:
    width: float
    height: float
    depth: float

    def __post_init__(self):
        if min(self.width, self.height, self.depth) <= 0.0:
            raise ValueError("extent dimensions must be strictly positive")

    def as_list(self) -> list[float]:
        return [self.width, self.height, self.depth]


@dataclass(frozen=True)
class SceneObject:
    id: str
    category: str
    color: str
    size_class: str
    bbox: BoundingBox
    extent: ObjectExtent

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size_class not in SIZE_CLASSES:
            raise ValueError(f"unknown size class {self.size_class!r}")
        if self.bbox.area <= 0.0:
            raise ValueError("object box must have positive area")

    @property
    def attributes(self) -> tuple[str, str, str]:
        return (self.category, self.color, self.size_class)


@dataclass(frozen=True)
class Scene:
    id: str
    width: int
    height: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("canvas dimensions must be positive")
        if not self.objects:
            raise ValueError("scene needs at least one object")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a scene")
        for o in self.objects:
            b = o.bbox
            if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                raise ValueError(f"object {o.id} outside canvas bounds")

    def object_by_id(self, object_id: str) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)


@dataclass(frozen=True)
class GroundedExpression:
    """A referring expression paired with the object it denotes.

    ``context_object_id`` names the ground-truth relation context for binary
    spatial expressions (absent for attribute-only and whole-image forms); it
    feeds positive-pair selection when training the spatial ranker.
    """

    text: str
    target_object_id: str
    kind: str  # semantic_only | spatio_semantic
    context_object_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("semantic_only", "spatio_semantic"):
            raise ValueError(f"unknown expression kind {self.kind!r}")


@dataclass(frozen=True)
class ProposalSet:
    scene_id: str
    boxes: tuple[BoundingBox, ...]
    mode: str  # ground_truth | degraded

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("proposal set must be non-empty")
        if self.mode not in ("ground_truth", "degraded"):
            raise ValueError(f"unknown proposal mode {self.mode!r}")


@dataclass(frozen=True)
class SceneConfig:
    min_objects: int = 5
    max_objects: int = 12
    width: int = 640
    height: int = 480
    categories: tuple[str, ...] = CATEGORIES
    colors: tuple[str, ...] = COLORS
    size_classes: tuple[str, ...] = SIZE_CLASSES
    # Categories/colors are drawn from a small per-scene palette so that
    # same-type objects recur, mirroring cluttered-table photos.
    scene_category_pool: int = 3
    scene_color_pool: int = 3
    max_overlap_iou: float = 0.2
    placement_attempts: int = 200

    def __post_init__(self):
        if not (1 <= self.min_objects <= self.max_objects <= 20):
            raise ValueError("object count range must lie within [1, 20]")


@dataclass(frozen=True)
class ExpressionConfig:
    semantic_fraction: float = 0.6  # target share of semantic_only expressions
    synonym_rate: float = 0.3       # chance a non-primary category word is used
    max_per_object: int = 3


@dataclass
class SceneRecord:
    """A scene together with its generated expressions (one corpus entry)."""

    scene: Scene
    expressions: list[GroundedExpression] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _pixel_size(rng: np.random.Generator, size_class: str) -> tuple[float, float]:
    if size_class == "small":
        w = rng.uniform(36.0, 58.0)
        h = rng.uniform(36.0, 58.0)
    else:
        w = rng.uniform(68.0, 104.0)
        h = rng.uniform(68.0, 104.0)
    return w, h


def _make_extent(rng: np.random.Generator, category: str, size_class: str) -> ObjectExtent:
    base = _BASE_EXTENT[category]
    scale = _SIZE_SCALE[size_class] * rng.uniform(0.9, 1.1)
    return ObjectExtent(base[0] * scale, base[1] * scale, base[2] * scale)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Generate one synthetic scene, deterministic in (config, seed).

    Objects are rejection-placed so no pair overlaps by more than
    ``config.max_overlap_iou``; when four or more objects are requested at
    least one attribute-duplicate pair is planted so spatial disambiguation
    is exercised.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))

    cat_pool = list(rng.choice(config.categories,
                               size=min(config.scene_category_pool, len(config.categories)),
                               replace=False))
    color_pool = list(rng.choice(config.colors,
                                 size=min(config.scene_color_pool, len(config.colors)),
                                 replace=False))

    attrs = []
    for _ in range(count):
        attrs.append((str(rng.choice(cat_pool)),
                      str(rng.choice(color_pool)),
                      str(rng.choice(config.size_classes))))
    if count >= 4:
        has_duplicate = len(set(attrs)) < len(attrs)
        if not has_duplicate:
            attrs[1] = attrs[0]

    objects: list[SceneObject] = []
    boxes: list[BoundingBox] = []
    for i, (category, color, size_class) in enumerate(attrs):
        w, h = _pixel_size(rng, size_class)
        if w >= config.width or h >= config.height:
            raise PlacementError(
                f"canvas {config.width}x{config.height} too small for object of size {w:.0f}x{h:.0f}")
        placed = None
        for _ in range(config.placement_attempts):
            x = rng.uniform(0.0, config.width - w)
            y = rng.uniform(0.0, config.height - h)
            candidate = BoundingBox(x, y, x + w, y + h)
            if all(box_iou(candidate, b) <= config.max_overlap_iou for b in boxes):
                placed = candidate
                break
        if placed is None:
            raise PlacementError(
                f"could not place object {i + 1}/{count} on a "
                f"{config.width}x{config.height} canvas within "
                f"{config.placement_attempts} attempts")
        boxes.append(placed)
        objects.append(SceneObject(
            id=f"obj-{i}",
            category=category,
            color=color,
            size_class=size_class,
            bbox=placed,
            extent=_make_extent(rng, category, size_class),
        ))

    return Scene(id=f"scene-{seed:08d}", width=config.width, height=config.height,
                 objects=tuple(objects))


# ---------------------------------------------------------------------------
# Expression generation + uniqueness oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Descriptor:
    """Attribute constraints: any of the fields may be None (unconstrained)."""

    category_word: str
    color: str | None = None
    size_class: str | None = None

    def matches(self, obj: SceneObject) -> bool:
        if self.category_word not in CATEGORY_WORDS[obj.category]:
            return False
        if self.color is not None and obj.color != self.color:
            return False
        if self.size_class is not None and obj.size_class != self.size_class:
            return False
        return True

    def words(self) -> list[str]:
        out = []
        if self.size_class is not None:
            out.append(self.size_class)
        if self.color is not None:
            out.append(self.color)
        out.append(self.category_word)
        return out


def _relation_holds(relation: str, target: SceneObject, context: SceneObject) -> bool:
    tx, ty = target.bbox.center
    cx, cy = context.bbox.center
    if relation == "left of":
        return tx < cx
    if relation == "right of":
        return tx > cx
    if relation == "above":
        return ty < cy
    if relation == "below":
        return ty > cy
    raise ValueError(f"not a directional relation: {relation}")


def _satisfiers(scene: Scene, descriptor: _Descriptor,
                relation: str | None = None,
                context_descriptor: _Descriptor | None = None) -> list[SceneObject]:
    """Exhaustively enumerate the objects consistent with an expression.

    This is the generation-time oracle: it interprets the structured form of
    an expression over every object in the scene, independently of how the
    generator chose the target.
    """
    matching = [o for o in scene.objects if descriptor.matches(o)]
    if relation is None:
        return matching

    if relation in GLOBAL_RELATIONS:
        if not matching:
            return []
        xs = [o.bbox.center[0] for o in matching]
        if relation in ("left", "leftmost"):
            best = min(xs)
            return [o for o in matching if o.bbox.center[0] == best]
        if relation in ("right", "rightmost"):
            best = max(xs)
            return [o for o in matching if o.bbox.center[0] == best]
        # middle: unique median by center x (well-defined for odd counts)
        if len(matching) % 2 == 0:
            return []
        order = sorted(matching, key=lambda o: o.bbox.center[0])
        return [order[len(order) // 2]]

    assert context_descriptor is not None
    contexts = [o for o in scene.objects if context_descriptor.matches(o)]
    if len(contexts) != 1:
        return []
    context = contexts[0]
    candidates = [o for o in matching if o.id != context.id]
    if relation == "next to":
        if not candidates:
            return []
        def dist(o: SceneObject) -> float:
            ox, oy = o.bbox.center
            cx, cy = context.bbox.center
            return math.hypot(ox - cx, oy - cy)
        ordered = sorted(candidates, key=dist)
        if len(ordered) > 1 and dist(ordered[0]) > 0.6 * dist(ordered[1]):
            return []  # nearest is not clearly separated; ambiguous to a human
        return [ordered[0]]
    return [o for o in candidates if _relation_holds(relation, o, context)]


def _category_word(rng: np.random.Generator, category: str, synonym_rate: float) -> str:
    pool = CATEGORY_WORDS[category]
    if len(pool) > 1 and rng.random() < synonym_rate:
        return str(pool[int(rng.integers(1, len(pool)))])
    return pool[0]


def _descriptor_options(obj: SceneObject, word: str) -> list[_Descriptor]:
    # Simplest first; the generator picks the first unique one.
    return [
        _Descriptor(word),
        _Descriptor(word, color=obj.color),
        _Descriptor(word, size_class=obj.size_class),
        _Descriptor(word, color=obj.color, size_class=obj.size_class),
    ]


def _unique_descriptor(scene: Scene, obj: SceneObject, word: str) -> _Descriptor | None:
    for desc in _descriptor_options(obj, word):
        hits = _satisfiers(scene, desc)
        if len(hits) == 1 and hits[0].id == obj.id:
            return desc
    return None


def _full_descriptor(obj: SceneObject, word: str) -> _Descriptor:
    return _Descriptor(word, color=obj.color, size_class=obj.size_class)


def generate_expressions(scene: Scene, seed: int,
                         config: ExpressionConfig | None = None) -> list[GroundedExpression]:
    """Emit uniquely-satisfiable expressions for a scene.

    Attribute-unique objects get ``semantic_only`` descriptions; objects that
    share their full attribute triple with another get ``spatio_semantic``
    descriptions built from the fixed relation vocabulary.  Every candidate
    is validated by the exhaustive oracle before it is emitted.
    """
    config = config or ExpressionConfig()
    rng = np.random.default_rng(seed)
    semantic: list[GroundedExpression] = []
    spatial: list[GroundedExpression] = []

    for obj in scene.objects:
        word = _category_word(rng, obj.category, config.synonym_rate)
        unique = _unique_descriptor(scene, obj, word)
        if unique is not None:
            variants = [unique]
            color_form = _Descriptor(word, color=obj.color)
            if color_form != unique:
                hits = _satisfiers(scene, color_form)
                if len(hits) == 1 and hits[0].id == obj.id:
                    variants.append(color_form)
            full = _full_descriptor(obj, word)
            if full not in variants and rng.random() < 0.35:
                hits = _satisfiers(scene, full)
                if len(hits) == 1 and hits[0].id == obj.id:
                    variants.append(full)
            semantic.extend(GroundedExpression(
                text="the " + " ".join(v.words()),
                target_object_id=obj.id,
                kind="semantic_only",
            ) for v in variants)
            continue

        spatial.extend(_spatial_expressions(scene, obj, word, rng, config))

    # Downsample the over-represented side toward the configured proportions.
    if spatial and semantic:
        f = config.semantic_fraction
        want_semantic = int(math.ceil(len(spatial) * f / max(1e-9, 1.0 - f)))
        want_spatial = int(math.ceil(len(semantic) * (1.0 - f) / max(1e-9, f)))
        if len(semantic) > want_semantic:
            keep = sorted(rng.choice(len(semantic), size=want_semantic, replace=False))
            semantic = [semantic[i] for i in keep]
        elif len(spatial) > want_spatial:
            keep = sorted(rng.choice(len(spatial), size=want_spatial, replace=False))
            spatial = [spatial[i] for i in keep]

    return semantic + spatial


def _spatial_expressions(scene: Scene, obj: SceneObject, word: str,
                         rng: np.random.Generator,
                         config: ExpressionConfig) -> list[GroundedExpression]:
    # Coarse-to-fine attribute forms; each candidate is oracle-validated, so
    # a coarser form is kept only when the relation still pins down the target.
    granularities = [_Descriptor(word), _Descriptor(word, color=obj.color),
                     _full_descriptor(obj, word)]
    descriptors: list[_Descriptor] = []
    for desc in granularities:
        if desc not in descriptors:
            descriptors.append(desc)
    options: list[GroundedExpression] = []

    # Whole-image forms: left/right for a pair, leftmost/rightmost/middle beyond.
    for descriptor in descriptors:
        group_size = len(_satisfiers(scene, descriptor))
        if group_size < 2:
            continue
        for relation in GLOBAL_RELATIONS:
            if group_size == 2 and relation in ("leftmost", "rightmost", "middle"):
                continue
            if group_size > 2 and relation in ("left", "right"):
                continue
            hits = _satisfiers(scene, descriptor, relation)
            if len(hits) == 1 and hits[0].id == obj.id:
                options.append(GroundedExpression(
                    text=f"the {relation} " + " ".join(descriptor.words()),
                    target_object_id=obj.id,
                    kind="spatio_semantic",
                ))
    # Binary forms against a uniquely describable anchor object.
    descriptor = descriptors[-1]
    group = _satisfiers(scene, descriptor)
    anchors = []
    for other in scene.objects:
        if other.id == obj.id or other in group:
            continue
        other_word = _category_word(rng, other.category, config.synonym_rate)
        anchor_desc = _unique_descriptor(scene, other, other_word)
        if anchor_desc is not None:
            anchors.append((other, anchor_desc))
    if anchors:
        order = rng.permutation(len(anchors))
        for idx in order[:3]:
            other, anchor_desc = anchors[int(idx)]
            relations = list(BINARY_RELATIONS)
            rng.shuffle(relations)
            for relation in relations:
                hits = _satisfiers(scene, descriptor, relation, anchor_desc)
                if len(hits) == 1 and hits[0].id == obj.id:
                    options.append(GroundedExpression(
                        text=("the " + " ".join(descriptor.words())
                              + f" {relation} the " + " ".join(anchor_desc.words())),
                        target_object_id=obj.id,
                        kind="spatio_semantic",
                        context_object_id=other.id,
                    ))
                    break

    if len(options) > config.max_per_object:
        keep = sorted(rng.choice(len(options), size=config.max_per_object, replace=False))
        options = [options[i] for i in keep]
    return options


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------

def make_proposals(scene: Scene, mode: str, seed: int) -> ProposalSet:
    """Ground-truth boxes, or jittered boxes plus floor(n/3) spurious ones."""
    if mode == "ground_truth":
        return ProposalSet(scene_id=scene.id,
                           boxes=tuple(o.bbox for o in scene.objects),
                           mode=mode)
    if mode != "degraded":
        raise ValueError(f"unknown proposal mode {mode!r}")

    rng = np.random.default_rng(seed)
    boxes: list[BoundingBox] = []
    for obj in scene.objects:
        b = obj.bbox
        dx = 0.1 * b.width
        dy = 0.1 * b.height
        x_min = min(max(b.x_min + rng.uniform(-dx, dx), 0.0), scene.width)
        x_max = min(max(b.x_max + rng.uniform(-dx, dx), 0.0), scene.width)
        y_min = min(max(b.y_min + rng.uniform(-dy, dy), 0.0), scene.height)
        y_max = min(max(b.y_max + rng.uniform(-dy, dy), 0.0), scene.height)
        boxes.append(BoundingBox(x_min, y_min, x_max, y_max))

    n_spurious = len(scene.objects) // 3
    for _ in range(n_spurious):
        w = rng.uniform(30.0, 110.0)
        h = rng.uniform(30.0, 110.0)
        x = rng.uniform(0.0, scene.width - w)
        y = rng.uniform(0.0, scene.height - h)
        boxes.append(BoundingBox(x, y, x + w, y + h))

    return ProposalSet(scene_id=scene.id, boxes=tuple(boxes), mode=mode)


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------

def split_dataset(corpus: list[SceneRecord], ratios: tuple[float, float, float],
                  seed: int) -> tuple[list[SceneRecord], list[SceneRecord], list[SceneRecord]]:
    """Partition a corpus by scene with largest-remainder sizing."""
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    if len(corpus) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} scenes, got {len(corpus)}")

    n = len(corpus)
    quotas = [r * n for r in ratios]
    sizes = [int(math.floor(q)) for q in quotas]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in remainders[: n - sum(sizes)]:
        sizes[i] += 1

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [corpus[int(i)] for i in order]
    a = shuffled[: sizes[0]]
    b = shuffled[sizes[0]: sizes[0] + sizes[1]]
    c = shuffled[sizes[0] + sizes[1]:]
    return a, b, c


# ---------------------------------------------------------------------------
# Corpus persistence (one UTF-8 JSON file per scene)
# ---------------------------------------------------------------------------

def scene_record_to_dict(record: SceneRecord) -> dict:
    scene = record.scene
    out = {
        "id": scene.id,
        "width": scene.width,
        "height": scene.height,
        "objects": [
            {
                "id": o.id,
                "category": o.category,
                "color": o.color,
                "size_class": o.size_class,
                "bbox": o.bbox.as_list(),
                "extent": o.extent.as_list(),
            }
            for o in scene.objects
        ],
        "expressions": [],
    }
    for e in record.expressions:
        entry = {"text": e.text, "target": e.target_object_id, "kind": e.kind}
        if e.context_object_id is not None:
            entry["context"] = e.context_object_id
        out["expressions"].append(entry)
    return out


def scene_record_from_dict(data: dict) -> SceneRecord:
    objects = tuple(
        SceneObject(
            id=o["id"],
            category=o["category"],
            color=o["color"],
            size_class=o["size_class"],
            bbox=BoundingBox(*o["bbox"]),
            extent=ObjectExtent(*o["extent"]),
        )
        for o in data["objects"]
    )
    scene = Scene(id=data["id"], width=data["width"], height=data["height"], objects=objects)
    expressions = [
        GroundedExpression(
            text=e["text"],
            target_object_id=e["target"],
            kind=e["kind"],
            context_object_id=e.get("context"),
        )
        for e in data.get("expressions", [])
    ]
    return SceneRecord(scene=scene, expressions=expressions)


def save_corpus(directory: str | Path, records: list[SceneRecord]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for record in records:
        path = directory / f"{record.scene.id}.json"
        path.write_text(json.dumps(scene_record_to_dict(record), indent=1) + "\n",
                        encoding="utf-8")


def load_corpus(directory: str | Path) -> list[SceneRecord]:
    directory = Path(directory)
    records = []
    for path in sorted(directory.glob("*.json")):
        if path.name == "partitions.json":
            continue
        records.append(scene_record_from_dict(json.loads(path.read_text(encoding="utf-8"))))
    return records


def load_scene_file(path: str | Path) -> SceneRecord:
    return scene_record_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def generate_corpus(n_scenes: int, seed: int,
                    scene_config: SceneConfig | None = None,
                    expression_config: ExpressionConfig | None = None) -> list[SceneRecord]:
    """Generate ``n_scenes`` scene records from consecutive derived seeds."""
    scene_config = scene_config or SceneConfig()
    records = []
    for i in range(n_scenes):
        scene_seed = seed + i
        scene = generate_scene(scene_config, scene_seed)
        expressions = generate_expressions(scene, seed=scene_seed ^ 0x5EED, config=expression_config)
        records.append(SceneRecord(scene=scene, expressions=expressions))
    return records
