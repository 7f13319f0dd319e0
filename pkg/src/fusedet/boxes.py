"""Axis-aligned box utilities shared by the generator, detector and attacks.

Boxes are (x_min, y_min, x_max, y_max) in pixels (image plane) or in grid
cells (bird's-eye view).  The image plane and the BEV grid cover the same
ground rectangle, so a box moves between the two frames by pure scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def box_area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def iou(box_a, box_b) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes."""
    ix1 = max(box_a[0], box_b[0])
    iy1 = max(box_a[1], box_b[1])
    ix2 = min(box_a[2], box_b[2])
    iy2 = min(box_a[3], box_b[3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = box_area(box_a) + box_area(box_b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IOU, shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, ids, iou_threshold: float):
    """Greedy non-maximum suppression.

    Candidates are visited in decreasing score order (ties broken by
    ascending id); a candidate is suppressed iff its IOU with an already
    kept box is >= `iou_threshold`.  Returns indices into the input arrays.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    order = np.lexsort((ids, -scores))
    kept = []
    kept_boxes = []
    for idx in order:
        box = boxes[idx]
        if any(iou(box, kb) >= iou_threshold for kb in kept_boxes):
            continue
        kept.append(int(idx))
        kept_boxes.append(box)
    return kept


def clip_box(box, width, height):
    return (
        float(min(max(box[0], 0.0), width)),
        float(min(max(box[1], 0.0), height)),
        float(min(max(box[2], 0.0), width)),
        float(min(max(box[3], 0.0), height)),
    )


def encode_deltas(anchors, boxes) -> np.ndarray:
    """Box regression targets (dx, dy, dw, dh) of `boxes` relative to `anchors`."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    bw = np.maximum(b[:, 2] - b[:, 0], 1e-6)
    bh = np.maximum(b[:, 3] - b[:, 1], 1e-6)
    bcx, bcy = b[:, 0] + bw / 2, b[:, 1] + bh / 2
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_deltas(anchors, deltas, clamp: float = 4.0) -> np.ndarray:
    """Inverse of `encode_deltas`; delta magnitudes are clamped to ±clamp.

    A tight clamp bounds how far a decoded box can stray from its anchor,
    which keeps box regression from amplifying small input perturbations
    into large localization shifts.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.clip(np.asarray(deltas, dtype=np.float64).reshape(-1, 4), -clamp, clamp)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + aw / 2, a[:, 1] + ah / 2
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass(frozen=True)
class Projection:
    """Fixed camera model linking image pixels to BEV grid cells (pure scaling)."""

    sx: float  # cells per pixel, horizontal
    sy: float  # cells per pixel, vertical

    def image_to_bev(self, box):
        return (box[0] * self.sx, box[1] * self.sy, box[2] * self.sx, box[3] * self.sy)

    def bev_to_image(self, box):
        return (box[0] / self.sx, box[1] / self.sy, box[2] / self.sx, box[3] / self.sy)


def make_projection(image_hw, bev_hw) -> Projection:
    h, w = image_hw
    hb, wb = bev_hw
    return Projection(sx=wb / w, sy=hb / h)


@dataclass(frozen=True)
class AnchorGrid:
    """Dense anchor boxes on the fused feature grid.

    Anchor id layout matches the RPN head output: template-major, then
    row-major over feature cells (id = t*hf*wf + i*wf + j).
    """

    feat_h: int
    feat_w: int
    stride: int
    templates: tuple  # ((w, h) in pixels, ...)
    image_hw: tuple

    @property
    def n_anchors(self) -> int:
        return len(self.templates) * self.feat_h * self.feat_w

    def boxes(self) -> np.ndarray:
        ih, iw = self.image_hw
        ys = (np.arange(self.feat_h) + 0.5) * self.stride
        xs = (np.arange(self.feat_w) + 0.5) * self.stride
        cx, cy = np.meshgrid(xs, ys)  # (hf, wf)
        out = []
        for tw, th in self.templates:
            x1 = np.clip(cx - tw / 2, 0, iw)
            y1 = np.clip(cy - th / 2, 0, ih)
            x2 = np.clip(cx + tw / 2, 0, iw)
            y2 = np.clip(cy + th / 2, 0, ih)
            out.append(np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4))
        return np.concatenate(out, axis=0)
