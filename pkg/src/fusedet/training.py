"""Detector training: anchor matching, ROI sampling, losses, Adam loop.

Randomness discipline: every stochastic choice at step t draws from its own
generator seeded by (seed, stream, t).  Streams that a variant does not use
are simply never created, so e.g. training with an identity image-augment
consumes exactly the same draws as training with no augment at all and
produces bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as md
from .boxes import clip_box, encode_deltas, iou_matrix

# rng stream tags
_STREAM_SCENE = 1
_STREAM_SAMPLE = 2
_STREAM_FUSION = 3
_STREAM_AUGMENT = 4
_STREAM_ADVERSARY = 5
_STREAM_LOSS = 6


class TrainingDiverged(Exception):
    """Loss became non-finite or exploded; carries the offending step index."""

    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 6000
    lr: float = 2e-3
    warmup: int = 50              # linear LR ramp-in, in steps
    final_lr_scale: float = 0.2   # cosine decay floor relative to lr
    seed: int = 0
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 32           # anchors sampled per step
    roi_batch: int = 32           # stage-2 boxes sampled per step
    roi_pos_fraction: float = 0.33
    jitter: float = 0.15          # ROI positive box jitter (relative)
    s2_reg_weight: float = 2.0    # stage-2 refinement loss weight
    grad_clip: float = 5.0
    mine_after: int = 100         # steps before stage-2 trains on RPN proposals
    divergence_threshold: float = 1e6


@dataclass
class Targets:
    """One step's supervision, fixed before any forward pass."""

    anchor_idx: np.ndarray
    anchor_cls: np.ndarray
    pos_anchor_idx: np.ndarray
    pos_anchor_deltas: np.ndarray
    roi_boxes: np.ndarray
    roi_cls: np.ndarray
    pos_roi_rows: np.ndarray
    pos_roi_deltas: np.ndarray


def match_anchors(objects, anchor_boxes, pos_iou: float, neg_iou: float):
    """Label every anchor: 1 positive, 0 negative, -1 ignore.

    An anchor is positive when its best IOU reaches pos_iou; the single
    best anchor of each ground-truth object is forced positive so no
    object goes unsupervised.  Returns (labels, gt_index_per_anchor).
    """
    n = len(anchor_boxes)
    labels = np.zeros(n, dtype=np.int8)
    gt_idx = np.full(n, -1, dtype=np.int64)
    if not objects:
        return labels, gt_idx
    gt = np.asarray([o.image_box for o in objects], dtype=np.float64)
    m = iou_matrix(anchor_boxes, gt)
    best = m.argmax(axis=1)
    best_iou = m[np.arange(n), best]
    gt_idx[:] = best
    labels[best_iou >= neg_iou] = -1
    labels[best_iou >= pos_iou] = 1
    forced = m.argmax(axis=0)
    labels[forced] = 1
    gt_idx[forced] = np.arange(len(objects))
    return labels, gt_idx


def _jitter_box(box, rng, amount, image_hw):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx = (x1 + x2) / 2 + rng.uniform(-amount, amount) * w
    cy = (y1 + y2) / 2 + rng.uniform(-amount, amount) * h
    w *= np.exp(rng.uniform(-amount, amount))
    h *= np.exp(rng.uniform(-amount, amount))
    ih, iw = image_hw
    return clip_box((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), iw, ih)


def _background_cells(scene):
    """BEV cells that are occupied but lie outside every object footprint."""
    occ = scene.bev[0] > 0
    for obj in scene.objects:
        u1, v1, u2, v2 = obj.bev_box
        occ[int(np.floor(v1)):int(np.ceil(v2)), int(np.floor(u1)):int(np.ceil(u2))] = False
    return np.argwhere(occ)  # rows of (v, u)


def _negative_box(scene, rng, image_hw, bg_cells):
    """A background ROI: half the time anchored on clutter returns."""
    ih, iw = image_hw
    w = rng.uniform(12, 40)
    h = rng.uniform(10, 28)
    if len(bg_cells) and rng.random() < 0.5:
        v, u = bg_cells[rng.integers(len(bg_cells))]
        hb, wb = scene.bev.shape[1:]
        cx = (u + 0.5) * iw / wb
        cy = (v + 0.5) * ih / hb
    else:
        cx = rng.uniform(0, iw)
        cy = rng.uniform(0, ih)
    return clip_box((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), iw, ih)


def sample_targets(scene, anchor_boxes, labels, gt_idx, rng, tcfg: TrainConfig,
                   config: "md.DetectorConfig", proposals=None) -> Targets:
    """Draw one step's anchor and ROI supervision.

    `proposals` (boxes from the current RPN, optional) supply hard stage-2
    examples: whatever the first stage currently proposes gets labeled by
    IOU against ground truth and pushed through the classifier.
    """
    pos_ids = np.nonzero(labels == 1)[0]
    neg_ids = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos_ids), tcfg.rpn_batch // 2)
    pos_sel = (rng.choice(pos_ids, size=n_pos, replace=False)
               if n_pos else np.empty(0, dtype=np.int64))
    n_neg = min(tcfg.rpn_batch - n_pos, len(neg_ids))
    neg_sel = rng.choice(neg_ids, size=n_neg, replace=False)
    anchor_idx = np.concatenate([pos_sel, neg_sel])
    anchor_cls = np.concatenate([np.ones(len(pos_sel)), np.zeros(len(neg_sel))])
    if len(pos_sel):
        gt_boxes = np.asarray([scene.objects[gt_idx[i]].image_box for i in pos_sel])
        pos_deltas = encode_deltas(anchor_boxes[pos_sel], gt_boxes)
    else:
        pos_deltas = np.zeros((0, 4))

    ih, iw = config.image_size
    gt_all = np.asarray([o.image_box for o in scene.objects], dtype=np.float64)
    rois, roi_cls, pos_rows, pos_roi_deltas = [], [], [], []
    if scene.objects:
        n_roi_pos = int(round(tcfg.roi_batch * tcfg.roi_pos_fraction))
        for i in range(n_roi_pos):
            obj = scene.objects[i % len(scene.objects)]
            box = _jitter_box(obj.image_box, rng, tcfg.jitter, (ih, iw))
            pos_rows.append(len(rois))
            pos_roi_deltas.append(encode_deltas([box], [obj.image_box])[0])
            rois.append(box)
            roi_cls.append(obj.class_id)

    if proposals is not None and len(proposals):
        if len(gt_all):
            prop_iou = iou_matrix(proposals, gt_all)
            best = prop_iou.argmax(axis=1)
            best_iou = prop_iou[np.arange(len(proposals)), best]
        else:
            best = np.zeros(len(proposals), dtype=np.int64)
            best_iou = np.zeros(len(proposals))
        hard_pos = np.nonzero(best_iou >= tcfg.rpn_pos_iou)[0]
        # stage-2 treats every badly-localized proposal as background, so a
        # box merely overlapping an object cannot keep a confident score
        hard_neg = np.nonzero(best_iou < tcfg.rpn_pos_iou)[0]
        for i in hard_pos[:8]:
            obj = scene.objects[best[i]]
            box = tuple(float(v) for v in proposals[i])
            pos_rows.append(len(rois))
            pos_roi_deltas.append(encode_deltas([box], [obj.image_box])[0])
            rois.append(box)
            roi_cls.append(obj.class_id)
        room = max(tcfg.roi_batch - len(rois) - 4, 0)
        # proposals arrive objectness-sorted: keep the hardest half, then a
        # random draw from the rest for coverage
        n_top = min(room // 2, len(hard_neg))
        rest = hard_neg[n_top:]
        extra = (rng.choice(rest, size=min(room - n_top, len(rest)), replace=False)
                 if len(rest) and room > n_top else np.empty(0, dtype=np.int64))
        for i in np.concatenate([hard_neg[:n_top], extra]).astype(np.int64):
            rois.append(tuple(float(v) for v in proposals[i]))
            roi_cls.append(0)

    bg_cells = _background_cells(scene)
    while len(rois) < tcfg.roi_batch:
        for _ in range(10):
            box = _negative_box(scene, rng, (ih, iw), bg_cells)
            if len(gt_all) == 0 or iou_matrix([box], gt_all).max() < tcfg.rpn_neg_iou:
                break
        rois.append(box)
        roi_cls.append(0)

    return Targets(
        anchor_idx=anchor_idx,
        anchor_cls=anchor_cls,
        pos_anchor_idx=pos_sel,
        pos_anchor_deltas=pos_deltas,
        roi_boxes=np.asarray(rois, dtype=np.float64),
        roi_cls=np.asarray(roi_cls, dtype=np.int64),
        pos_roi_rows=np.asarray(pos_rows, dtype=np.int64),
        pos_roi_deltas=(np.asarray(pos_roi_deltas)
                        if pos_roi_deltas else np.zeros((0, 4))),
    )


def class_nll(logits: "ad.Var", classes: np.ndarray) -> "ad.Var":
    """Mean cross-entropy of row-wise class targets."""
    n, c = logits.shape
    logp = ad.log_softmax(logits)
    flat = ad.reshape(logp, (-1,))
    picked = ad.gather(flat, np.arange(n) * c + classes)
    return -ad.vmean(picked)


def scene_loss(pvars: dict, image_chw: np.ndarray, bev: np.ndarray,
               targets: Targets, config: "md.DetectorConfig",
               lel_pick: int | None = None, s2_reg_weight: float = 2.0) -> "ad.Var":
    """Full supervised loss for one scene under fixed targets."""
    fi, fb = md.extract_features(pvars, ad.const(image_chw), ad.const(bev), config)
    fused = md.fuse_features(fi, fb, config.fusion, pick=lel_pick)
    obj, reg = md.rpn_forward(pvars, fused, config)

    obj_sel = ad.gather(obj, targets.anchor_idx)
    loss = ad.vmean(ad.bce_with_logits(obj_sel, targets.anchor_cls))
    if len(targets.pos_anchor_idx):
        reg_sel = ad.gather(reg, targets.pos_anchor_idx, axis=0)
        loss = loss + ad.vmean(ad.smooth_l1(reg_sel - ad.const(targets.pos_anchor_deltas)))

    logits, deltas = md.stage2_forward(pvars, fused, targets.roi_boxes, config)
    loss = loss + class_nll(logits, targets.roi_cls)
    if len(targets.pos_roi_rows):
        d_sel = ad.gather(deltas, targets.pos_roi_rows, axis=0)
        loss = loss + ad.vmean(
            ad.smooth_l1(d_sel - ad.const(targets.pos_roi_deltas))) * s2_reg_weight
    return loss


class Adam:
    def __init__(self, arrays: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, arrays: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            arrays[k] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _clip_grads(grads: dict, max_norm: float) -> None:
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def _to_chw64(image) -> np.ndarray:
    return np.ascontiguousarray(
        np.transpose(np.asarray(image, dtype=np.float64), (2, 0, 1)))


def _mine_proposals(params, config, image, bev) -> np.ndarray:
    """Current RPN proposals (inference path, no gradients) for hard examples."""
    from .detector import rpn_propose

    with ad.no_grad():
        pvars = md.as_vars(params, trainable=False)
        fi, fb = md.extract_features(pvars, ad.const(_to_chw64(image)),
                                     ad.const(np.asarray(bev, np.float64)), config)
        fused = md.fuse_features(fi, fb, config.fusion)
        boxes, _, _, _ = rpn_propose(pvars, fused, np.asarray(bev)[0], config)
    return boxes


def standard_loss_builder(pvars, image_chw, bev, targets, config, lel_pick, step,
                          tcfg):
    return scene_loss(pvars, image_chw, bev, targets, config, lel_pick,
                      s2_reg_weight=tcfg.s2_reg_weight)


def _lr_at(step: int, tcfg: TrainConfig) -> float:
    ramp = min(1.0, (step + 1) / max(tcfg.warmup, 1))
    span = max(tcfg.steps - tcfg.warmup, 1)
    progress = min(max(step - tcfg.warmup, 0) / span, 1.0)
    lo = tcfg.final_lr_scale
    cos = lo + (1.0 - lo) * 0.5 * (1.0 + np.cos(np.pi * progress))
    return tcfg.lr * ramp * cos


def train_detector(scenes, config: "md.DetectorConfig", tcfg: TrainConfig,
                   augment=None, adversary=None, loss_builder=None,
                   progress=None):
    """Train from scratch on a fixed scene pool.

    augment:      callable(image_hw3, rng) -> image; applied to the camera
                  image before every step (sensor corruption training).
    adversary:    callable(params, config, image_hw3, scene, rng) -> image;
                  runs after augment (adversarial training).
    loss_builder: callable(pvars, image_chw, bev, targets, config, lel_pick,
                  step, tcfg) -> scalar Var; defaults to the standard loss.

    Returns (params, info) where params have been rounded through float32,
    exactly matching what a checkpoint of this model would load back.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    build = loss_builder or standard_loss_builder
    params = md.init_params(config, seed=tcfg.seed)
    opt = Adam(params.arrays)
    anchors = config.anchor_grid().boxes()
    match_cache = {}
    history = []

    for step in range(tcfg.steps):
        pick_rng = np.random.default_rng([tcfg.seed, _STREAM_SCENE, step])
        scene = scenes[int(pick_rng.integers(len(scenes)))]
        if scene.scene_id not in match_cache:
            match_cache[scene.scene_id] = match_anchors(
                scene.objects, anchors, tcfg.rpn_pos_iou, tcfg.rpn_neg_iou)
        labels, gt_idx = match_cache[scene.scene_id]

        image = scene.image
        if augment is not None:
            image = augment(image, np.random.default_rng(
                [tcfg.seed, _STREAM_AUGMENT, step]))
        if adversary is not None:
            image = adversary(params, config, image, scene, np.random.default_rng(
                [tcfg.seed, _STREAM_ADVERSARY, step]))

        proposals = None
        if step >= tcfg.mine_after:
            proposals = _mine_proposals(params, config, image, scene.bev)
        sample_rng = np.random.default_rng([tcfg.seed, _STREAM_SAMPLE, step])
        targets = sample_targets(scene, anchors, labels, gt_idx, sample_rng,
                                 tcfg, config, proposals=proposals)

        lel_pick = None
        if config.fusion == "lel":
            lel_pick = int(np.random.default_rng(
                [tcfg.seed, _STREAM_FUSION, step]).integers(3))

        pvars = md.as_vars(params, trainable=True)
        loss = build(pvars, _to_chw64(image), np.asarray(scene.bev, np.float64),
                     targets, config, lel_pick, step, tcfg)
        value = float(loss.data)
        if not np.isfinite(value) or value > tcfg.divergence_threshold:
            raise TrainingDiverged(step, value)
        loss.backward()
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                 for k, v in pvars.items()}
        _clip_grads(grads, tcfg.grad_clip)
        opt.step(params.arrays, grads, _lr_at(step, tcfg))
        history.append(value)
        if progress is not None and (step + 1) % 100 == 0:
            progress(step + 1, value)

    return params.quantized(), {"loss_history": history}
