"""Region representation: attribute features and normalized box encodings.

The feature extractor is the pluggable seam where a learned CNN would sit in
a camera-backed deployment.  The default extractor encodes the attributes of
the best-overlapping scene object as IoU-scaled one-hot blocks, so degraded
proposals carry proportionally noisier appearance information.
"""

from __future__ import annotations

import numpy as np

from .scene import CATEGORIES, COLORS, SIZE_CLASSES, BoundingBox, Scene, box_iou

DEFAULT_FEATURE_DIM = 64
BOX_ENCODING_DIM = 5
_ATTR_DIM = len(CATEGORIES) + len(COLORS) + len(SIZE_CLASSES)
MIN_FEATURE_DIM = _ATTR_DIM + BOX_ENCODING_DIM


def encode_bbox(box: BoundingBox, width: float, height: float) -> np.ndarray:
    """Normalized box encoding [x_min/W, y_min/H, x_max/W, y_max/H, area ratio]."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    if box.x_min < 0 or box.y_min < 0 or box.x_max > width or box.y_max > height:
        raise ValueError(f"box {box} outside image bounds {width}x{height}")
    e1 = box.x_min / width
    e2 = box.y_min / height
    e3 = box.x_max / width
    e4 = box.y_max / height
    return np.array([e1, e2, e3, e4, (e3 - e1) * (e4 - e2)], dtype=np.float64)


class AttributeFeaturizer:
    """Deterministic stand-in for a learned region-appearance encoder.

    Layout: one-hot category, color, and size blocks scaled by the IoU of the
    best-overlapping object, then the 5-entry box encoding, zero-padded to
    ``dim``.
    """

    def __init__(self, dim: int = DEFAULT_FEATURE_DIM):
        if dim < MIN_FEATURE_DIM:
            raise ValueError(f"feature dim must be >= {MIN_FEATURE_DIM}")
        self.dim = dim

    def features(self, scene: Scene, box: BoundingBox) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.float64)
        best_iou = 0.0
        best_obj = None
        for obj in scene.objects:
            iou = box_iou(box, obj.bbox)
            if iou > best_iou:
                best_iou = iou
                best_obj = obj
        if best_obj is not None:
            out[CATEGORIES.index(best_obj.category)] = best_iou
            out[len(CATEGORIES) + COLORS.index(best_obj.color)] = best_iou
            offset = len(CATEGORIES) + len(COLORS)
            out[offset + SIZE_CLASSES.index(best_obj.size_class)] = best_iou
        out[_ATTR_DIM:_ATTR_DIM + BOX_ENCODING_DIM] = encode_bbox(box, scene.width, scene.height)
        return out


_default = AttributeFeaturizer()


def extract_features(scene: Scene, box: BoundingBox) -> np.ndarray:
    """Features from the shipped default extractor (d=64)."""
    return _default.features(scene, box)


def whole_image_region(scene: Scene, featurizer: AttributeFeaturizer | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Global-context pseudo-region: mean object feature + full-canvas encoding."""
    featurizer = featurizer or _default
    feats = np.stack([featurizer.features(scene, o.bbox) for o in scene.objects])
    encoding = np.array([0.0, 0.0, 1.0, 1.0, 1.0], dtype=np.float64)
    return feats.mean(axis=0), encoding
