"""End-to-end detection pipeline.

Order of operations per scene:

  1. per-modality feature extraction and fusion,
  2. RPN objectness + box deltas over the dense anchor grid,
  3. LIDAR gate: anchors whose BEV footprint holds no returns are dropped
     (geometric plausibility check, independent of any network output),
  4. top-N surviving anchors by objectness, decoded into proposals,
  5. stage-2 ROI classification and box refinement,
  6. greedy NMS, then the final score threshold.

`detect()` / `Detector.detect()` is the only view of the model an attacker
gets to observe; everything upstream is internal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md
from .boxes import decode_deltas, iou, make_projection
from .boxes import nms as greedy_nms


@dataclass(frozen=True)
class Detection:
    box: tuple       # (x_min, y_min, x_max, y_max) image pixels
    score: float     # stage-2 class probability, in (0, 1)
    class_id: int    # 1 = vehicle, 2 = pedestrian/cyclist
    anchor_id: int   # anchor that produced the proposal (bookkeeping only)


def filter_anchors_without_lidar(anchor_boxes, bev_occupancy, projection,
                                 min_points: int = 1) -> np.ndarray:
    """Keep-mask over anchors: the projected footprint must contain returns.

    The footprint is the anchor box mapped to the BEV grid and expanded to
    whole cells (floor of the min corner, ceil of the max), so an anchor
    that overlaps any occupied region always sees that occupancy.  Empty
    projected footprints are dropped.
    """
    occ = np.asarray(bev_occupancy, dtype=np.float64)
    hb, wb = occ.shape
    integral = np.zeros((hb + 1, wb + 1))
    integral[1:, 1:] = occ.cumsum(axis=0).cumsum(axis=1)
    boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    u1 = np.clip(np.floor(boxes[:, 0] * projection.sx).astype(np.int64), 0, wb)
    v1 = np.clip(np.floor(boxes[:, 1] * projection.sy).astype(np.int64), 0, hb)
    u2 = np.clip(np.ceil(boxes[:, 2] * projection.sx).astype(np.int64), 0, wb)
    v2 = np.clip(np.ceil(boxes[:, 3] * projection.sy).astype(np.int64), 0, hb)
    counts = (integral[v2, u2] - integral[v1, u2]
              - integral[v2, u1] + integral[v1, u1])
    nonempty = (u2 > u1) & (v2 > v1)
    return nonempty & (counts >= min_points)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rpn_propose(pvars: dict, fused: "ad.Var", bev_occupancy, config):
    """Stage-1 proposals from the fused map.

    Returns (proposal_boxes (N,4), anchor_ids (N,), obj_logits Var (A,),
    reg_deltas Var (A,4)).  N <= top_n; candidates are ranked by objectness
    (ties broken by ascending anchor id) after the LIDAR gate.
    """
    obj, reg = md.rpn_forward(pvars, fused, config)
    anchors = config.anchor_grid().boxes()
    if config.lidar_filter:
        proj = make_projection(config.image_size, np.shape(bev_occupancy))
        keep = filter_anchors_without_lidar(anchors, bev_occupancy, proj,
                                            config.lidar_min_points)
    else:
        keep = np.ones(len(anchors), dtype=bool)
    ids = np.nonzero(keep)[0]
    if ids.size == 0:
        return np.zeros((0, 4)), ids, obj, reg
    order = np.lexsort((ids, -obj.data[ids]))
    top = ids[order[: config.top_n]]
    boxes = decode_deltas(anchors[top], reg.data[top], clamp=config.delta_clamp)
    h, w = config.image_size
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
    solid = (boxes[:, 2] - boxes[:, 0] >= 2) & (boxes[:, 3] - boxes[:, 1] >= 2)
    return boxes[solid], top[solid], obj, reg


def detect(params: "md.DetectorParams", config: "md.DetectorConfig",
           image, bev) -> list:
    """Run the full pipeline on one scene; returns final Detections.

    Output is sorted by descending score and already thresholded at
    config.detection_threshold (inclusive).
    """
    with ad.no_grad():
        pvars = md.as_vars(params, trainable=False)
        img = ad.const(np.ascontiguousarray(
            np.transpose(np.asarray(image, dtype=np.float64), (2, 0, 1))))
        bv = ad.const(np.asarray(bev, dtype=np.float64))
        fi, fb = md.extract_features(pvars, img, bv, config)
        fused = md.fuse_features(fi, fb, config.fusion, rng=None)
        pboxes, pids, _, _ = rpn_propose(pvars, fused, np.asarray(bev)[0], config)
        if len(pboxes) == 0:
            return []
        logits, deltas = md.stage2_forward(pvars, fused, pboxes, config)
    probs = _softmax_rows(logits.data)
    cls = probs[:, 1:].argmax(axis=1) + 1
    scores = probs[np.arange(len(pboxes)), cls]
    refined = decode_deltas(pboxes, deltas.data, clamp=config.delta_clamp)
    h, w = config.image_size
    refined[:, 0::2] = np.clip(refined[:, 0::2], 0, w)
    refined[:, 1::2] = np.clip(refined[:, 1::2], 0, h)
    kept = greedy_nms(refined, scores, np.arange(len(pboxes)), config.nms_iou)
    return [
        Detection(box=tuple(float(v) for v in refined[i]),
                  score=float(scores[i]), class_id=int(cls[i]),
                  anchor_id=int(pids[i]))
        for i in kept
        if scores[i] >= config.detection_threshold
    ]


class Detector:
    """Weights + config bundled behind the attacker-visible `detect` call."""

    def __init__(self, params: "md.DetectorParams", config: "md.DetectorConfig"):
        self.params = params
        self.config = config

    def detect(self, image, bev) -> list:
        return detect(self.params, self.config, image, bev)

    def detect_scene(self, scene) -> list:
        return self.detect(scene.image, scene.bev)

    def save(self, path, meta: dict | None = None) -> None:
        md.save_checkpoint(path, self.params, self.config, meta)

    @classmethod
    def load(cls, path) -> "Detector":
        params, config, _ = md.load_checkpoint(path)
        return cls(params, config)


def match_detections(detections, objects, iou_threshold: float = 0.5):
    """Greedily pair detections with ground truth at the given IOU.

    Detections are visited in score order; each ground-truth object can be
    claimed once.  Returns (pairs, unmatched_detections, missed_objects)
    where pairs is a list of (detection, object, iou).
    """
    free = list(range(len(objects)))
    pairs, extras = [], []
    for det in sorted(detections, key=lambda d: -d.score):
        best_j, best_iou = -1, iou_threshold
        for j in free:
            v = iou(det.box, objects[j].image_box)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            free.remove(best_j)
            pairs.append((det, objects[best_j], best_iou))
        else:
            extras.append(det)
    return pairs, extras, [objects[j] for j in free]
