"""Image-side adversarial attacks against the fusion detector.

Three attack families share one mechanical core:

* disappearance — an additive perturbation delta (optionally masked to the
  victim objects) minimizes the non-background softmax mass of the boxes
  the detector currently shows, plus ``epsilon`` times the L2 norm of
  delta; epsilon is tuned by binary search so the reported perturbation
  is approximately the least-distorted one that still succeeds.
* spoofing — the perturbation pushes a chosen empty-but-LIDAR-occupied
  region toward a confident detection of a chosen class, by jointly raising
  nearby anchor objectness/regression (stage 1) and the class probability
  of the target box (stage 2).
* universal patch — one replacement patch, optimized sequentially over a
  scene pool with a decaying distortion weight, that suppresses detection
  of whatever object it is pasted onto, on scenes never seen in training.

The attacker is white-box for gradients but only *observes* the model
through ``detect()`` — the post-NMS, thresholded view.  No code path here
reads proposal lists or pre-NMS scores to choose its targets.  All inner
optimization is plain gradient descent with a backtracking line search, so
the loss never increases across accepted steps.  The perturbed image is
clipped to [0, 1] before every model evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import arrayio
from . import autodiff as ad
from . import model as md
from .boxes import encode_deltas, iou, iou_matrix, make_projection
from .detector import Detector, detect, filter_anchors_without_lidar

__all__ = [
    "ALL_TARGETS",
    "AttackConfig",
    "AttackOutcome",
    "EpsilonSchedule",
    "Patch",
    "Perturbation",
    "SpoofTargetError",
    "UnattackableError",
    "apply_patch",
    "binary_search_epsilon",
    "disappearance_loss",
    "disappearance_loss_grad",
    "greedy_disappearance",
    "patch_placements",
    "propose_spoof_target",
    "random_patch",
    "spoof_attack",
    "spoof_loss",
    "spoof_loss_grad",
    "universal_patch",
    "update_epsilon",
]

ALL_TARGETS = "all"

ROUTE_STAGE2 = "stage2"
ROUTE_RPN = "rpn"


class UnattackableError(Exception):
    """The attack failed even at the loosest distortion weight."""

    def __init__(self, eps_lo: float, eps_hi: float):
        super().__init__(
            f"attack failed even at epsilon={eps_lo} (search bounds "
            f"[{eps_lo}, {eps_hi}]); target is unattackable at these bounds"
        )
        self.eps_lo = eps_lo
        self.eps_hi = eps_hi


class SpoofTargetError(ValueError):
    """The requested spoof target violates a precondition by design."""


# -- configuration -------------------------------------------------------

@dataclass(frozen=True)
class EpsilonSchedule:
    """Geometric decay eps_i = max(floor, eps0 * gamma**i)."""

    eps0: float = 1.0
    floor: float = 0.05
    gamma: float = 0.9

    def __post_init__(self):
        if not (self.eps0 > self.floor > 0.0):
            raise ValueError("schedule requires eps0 > floor > 0")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("schedule requires decay rate in (0, 1)")


def update_epsilon(i: int, schedule: EpsilonSchedule) -> float:
    """Distortion weight at step i; non-increasing, bottoms out at floor."""
    return max(schedule.floor, schedule.eps0 * schedule.gamma ** max(int(i), 0))


@dataclass(frozen=True)
class AttackConfig:
    """Knobs shared by the attack families.

    Disappearance: the outer loop re-reads ``detect()`` at most
    ``max_outer_iterations`` times; each outer iteration descends the loss
    for ``inner_steps`` accepted steps (repeated up to ``stall_rounds``
    times if the top visible box refuses to budge).  ``eps_lo``/``eps_hi``
    bound the binary search over the distortion weight;
    ``epsilon_search_iters = 0`` disables the search and runs once at
    ``eps_lo``.

    Spoofing: ``alpha`` down-weights the stage-2 term relative to the
    stage-1 (RPN) term; ``spoof_anchor_count`` anchors nearest the target
    are recruited.

    Patch: ``patch_steps`` is the total number of (scene, descent) steps
    of the sequential optimizer — ``None`` means ``patch_sweeps`` passes
    over the training pool — with the distortion weight following the
    geometric ``patch_eps*`` schedule.  The optimizer is restarted
    ``patch_restarts`` times from different random patches and the
    candidate that suppresses the most training-pool objects is returned
    (restart quality varies a lot; the training pool predicts held-out
    potency well).
    """

    max_outer_iterations: int = 12
    inner_steps: int = 8
    step_size: float = 8.0
    eps_lo: float = 1e-3
    eps_hi: float = 1.0
    epsilon_search_iters: int = 3
    k: int = 5
    alpha: float = 0.1
    success_iou: float = 0.5
    success_score: float | None = None      # None -> detector threshold
    route: str = ROUTE_STAGE2
    stall_rounds: int = 3
    spoof_anchor_count: int = 3
    spoof_reg_weight: float = 1.0
    patch_shape: tuple = (12, 20)
    patch_steps: int | None = None
    patch_sweeps: int = 25
    patch_inner_steps: int = 4
    patch_eps0: float = 1e-3
    patch_eps_floor: float = 1e-6
    patch_eps_gamma: float = 0.9
    patch_seed: int = 0
    patch_classes: tuple = (1,)
    patch_restarts: int = 3
    patch_rpn_weight: float = 0.25  # weight of the anchor-objectness term
    patch_anchor_cap: int = 24      # attacked anchors per visible object

    def __post_init__(self):
        if not (0.0 <= self.eps_lo <= self.eps_hi):
            raise ValueError("epsilon bounds must satisfy 0 <= eps_lo <= eps_hi")
        for name in ("max_outer_iterations", "inner_steps", "k", "stall_rounds",
                     "spoof_anchor_count", "patch_sweeps", "patch_inner_steps",
                     "patch_restarts", "patch_anchor_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patch_rpn_weight < 0.0:
            raise ValueError("patch_rpn_weight must be >= 0")
        if self.alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        if self.route not in (ROUTE_STAGE2, ROUTE_RPN):
            raise ValueError(f"route must be '{ROUTE_STAGE2}' or '{ROUTE_RPN}'")
        if self.patch_steps is not None and self.patch_steps < 0:
            raise ValueError("patch_steps must be >= 0")

    def patch_schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.patch_eps0, self.patch_eps_floor,
                               self.patch_eps_gamma)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "AttackConfig":
        d = dict(d)
        d["patch_shape"] = tuple(d["patch_shape"])
        d["patch_classes"] = tuple(d["patch_classes"])
        return AttackConfig(**d)


# -- payloads ------------------------------------------------------------

@dataclass
class Perturbation:
    """Additive image perturbation, stored at checkpoint (float32) precision.

    ``delta`` is (H, W, 3); when ``mask`` is present, delta is zero outside
    it.  Application always clips image + delta to [0, 1].
    """

    delta: np.ndarray
    mask: np.ndarray | None = None
    epsilon: float = 0.0

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.delta.ndim != 3 or self.delta.shape[2] != 3:
            raise ValueError(f"delta must be (H, W, 3), got {self.delta.shape}")
        if self.mask is not None:
            self.mask = (np.asarray(self.mask) != 0)
            if self.mask.shape != self.delta.shape[:2]:
                raise ValueError("mask shape must match delta's spatial shape")
            if np.any(self.delta[~self.mask] != 0):
                raise ValueError("delta must be zero outside the mask")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def apply(self, image) -> np.ndarray:
        """Perturbed image, clipped to the valid range."""
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.delta.shape:
            raise ValueError(f"image shape {img.shape} != delta {self.delta.shape}")
        return np.clip(img + self.delta.astype(np.float64), 0.0, 1.0)

    def save(self, path) -> None:
        arrays = {"delta": self.delta}
        if self.mask is not None:
            arrays["mask"] = self.mask.astype(np.float32)
        arrayio.save_arrays(path, arrays,
                            {"kind": "perturbation", "epsilon": float(self.epsilon)})

    @classmethod
    def load(cls, path) -> "Perturbation":
        arrays, meta = arrayio.load_arrays(path)
        mask = arrays.get("mask")
        return cls(delta=arrays["delta"],
                   mask=None if mask is None else mask != 0,
                   epsilon=float(meta.get("epsilon", 0.0)))


@dataclass
class Patch:
    """Replacement patch: values in [0, 1] that overwrite image pixels.

    A single patch is shared across scenes; per-scene state is limited to
    placements — (object_id, region) pairs naming where it is pasted.  When
    ``placements`` has no entry for a scene, placements are derived from the
    ``patchable_region`` of that scene's objects of the listed classes.
    """

    delta: np.ndarray
    classes: tuple = (1,)
    placements: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        if self.delta.ndim != 3 or self.delta.shape[2] != 3:
            raise ValueError(f"patch must be (p_h, p_w, 3), got {self.delta.shape}")
        if self.delta.shape[0] < 1 or self.delta.shape[1] < 1:
            raise ValueError("patch sides must be positive")
        if self.delta.min() < 0.0 or self.delta.max() > 1.0:
            raise ValueError("patch values must lie in [0, 1]")
        self.classes = tuple(int(c) for c in self.classes)

    @property
    def shape(self) -> tuple:
        return self.delta.shape[:2]

    def placements_for(self, scene) -> list:
        if scene.scene_id in self.placements:
            return list(self.placements[scene.scene_id])
        return patch_placements(scene, self.classes)

    def save(self, path) -> None:
        arrayio.save_arrays(
            path, {"delta": self.delta},
            {"kind": "patch", "classes": list(self.classes),
             "placements": {sid: [[int(oid), [int(v) for v in region]]
                                  for oid, region in places]
                            for sid, places in self.placements.items()}})

    @classmethod
    def load(cls, path) -> "Patch":
        arrays, meta = arrayio.load_arrays(path)
        placements = {
            sid: [(int(oid), tuple(region)) for oid, region in places]
            for sid, places in meta.get("placements", {}).items()}
        return cls(delta=arrays["delta"],
                   classes=tuple(meta.get("classes", (1,))),
                   placements=placements)


@dataclass
class AttackOutcome:
    """Result of one attack run.

    ``success`` is only set after the predicate has been re-checked from
    scratch on the float32 payload exactly as it would be persisted, so a
    saved outcome always reproduces.  ``trace`` holds (loss, top_score)
    pairs, one per completed descent round.
    """

    kind: str
    scene_id: str
    success: bool
    iterations_used: int
    perturbation: object
    distortion: float
    trace: list = field(default_factory=list)
    epsilon: float | None = None
    detail: dict = field(default_factory=dict)

    def record(self, config_hash: str = "") -> dict:
        """Flat line-record of this run (one JSON object per line on disk)."""
        return {
            "scene_id": self.scene_id,
            "attack": self.kind,
            "success": bool(self.success),
            "iterations": int(self.iterations_used),
            "distortion": float(self.distortion),
            "config_hash": config_hash,
        }


def per_pixel_l2(image_a, image_b) -> float:
    """Euclidean norm of the image difference divided by the pixel count.

    The canonical distortion metric for every reported attack; see the
    analysis module for the aggregate statistics built on it.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    n_pixels = a.shape[0] * a.shape[1]
    return float(np.sqrt(((a - b) ** 2).sum()) / n_pixels)


# -- shared forward machinery ---------------------------------------------

class _SceneForward:
    """Per-(model, scene) cache for image-side gradient evaluations.

    The BEV branch never depends on the image perturbation, so its feature
    map is computed once and reused as a constant in every loss graph; only
    the image branch, fusion, and heads are rebuilt per evaluation.
    """

    def __init__(self, params, config, image, bev):
        self.params = params
        self.config = config
        self.image = np.asarray(image, dtype=np.float64)
        self.bev = np.asarray(bev, dtype=np.float64)
        self.pvars = md.as_vars(params, trainable=False)
        with ad.no_grad():
            self.feat_bev = md.bev_branch(self.pvars, ad.const(self.bev),
                                          config).data
        self.anchors = config.anchor_grid().boxes()
        if config.lidar_filter:
            proj = make_projection(config.image_size, self.bev.shape[1:])
            self.anchor_keep = filter_anchors_without_lidar(
                self.anchors, self.bev[0], proj, config.lidar_min_points)
        else:
            self.anchor_keep = np.ones(len(self.anchors), dtype=bool)

    @classmethod
    def for_scene(cls, detector: Detector, scene) -> "_SceneForward":
        return cls(detector.params, detector.config, scene.image, scene.bev)

    def fused(self, image_hwc: "ad.Var") -> "ad.Var":
        chw = ad.transpose(image_hwc, (2, 0, 1))
        fi = md.image_branch(self.pvars, chw, self.config)
        return md.fuse_features(fi, ad.const(self.feat_bev), self.config.fusion)

    def adv_image(self, delta: "ad.Var") -> "ad.Var":
        return ad.clip(ad.const(self.image) + delta, 0.0, 1.0)

    def detect_with_delta(self, delta: np.ndarray) -> list:
        adv = np.clip(self.image + delta, 0.0, 1.0)
        return detect(self.params, self.config, adv, self.bev)

    def detect_image(self, image: np.ndarray) -> list:
        return detect(self.params, self.config, image, self.bev)


def _nonbackground_mass(ctx: _SceneForward, fused: "ad.Var", boxes) -> "ad.Var":
    """Sum over boxes of the stage-2 softmax mass on non-background classes."""
    logits, _ = md.stage2_forward(ctx.pvars, fused, boxes, ctx.config)
    probs = ad.softmax(logits)
    n, c = probs.shape
    idx = (np.arange(n)[:, None] * c + np.arange(1, c)[None, :]).ravel()
    return ad.vsum(ad.gather(ad.reshape(probs, (-1,)), idx))


def _objectness_mass(ctx: _SceneForward, fused: "ad.Var", anchor_ids) -> "ad.Var":
    """Sum of RPN objectness probabilities at the given anchors."""
    obj, _ = md.rpn_forward(ctx.pvars, fused, ctx.config)
    return ad.vsum(ad.sigmoid(ad.gather(obj, np.asarray(anchor_ids, dtype=np.int64))))


# Probability-mass losses flatten once the detector is confident (their
# gradient carries a p*(1-p) factor), which freezes the descent exactly on
# the strongest detections.  The greedy loop therefore descends a clamped
# logit-margin form of the same quantity: constant slope until the window
# sits _MARGIN_KAPPA logits below background, at which point the detection
# is dead several times over.

_MARGIN_KAPPA = 6.0


def _suppression_margin(ctx: _SceneForward, fused: "ad.Var", boxes) -> "ad.Var":
    """Sum over boxes of clamped log-odds of non-background vs background."""
    logits, _ = md.stage2_forward(ctx.pvars, fused, boxes, ctx.config)
    n, c = logits.shape
    logp = ad.log_softmax(logits)
    flat = ad.reshape(logp, (-1,))
    bg = ad.gather(flat, np.arange(n) * c)
    nb_idx = (np.arange(n)[:, None] * c + np.arange(1, c)[None, :]).ravel()
    nonbg = ad.reshape(ad.gather(flat, nb_idx), (n, c - 1))
    with ad.no_grad():
        shift = nonbg.data.max(axis=1)
    lse = ad.log(ad.vsum(ad.exp(nonbg + ad.const(-shift[:, None])), axis=1))
    margin = lse + ad.const(shift) + bg * -1.0
    return ad.vsum(ad.maximum(margin + ad.const(_MARGIN_KAPPA), ad.const(0.0)))


def _objectness_margin(ctx: _SceneForward, fused: "ad.Var", anchor_ids) -> "ad.Var":
    """Sum of clamped RPN objectness logits at the given anchors."""
    obj, _ = md.rpn_forward(ctx.pvars, fused, ctx.config)
    sel = ad.gather(obj, np.asarray(anchor_ids, dtype=np.int64))
    return ad.vsum(ad.maximum(sel + ad.const(_MARGIN_KAPPA), ad.const(0.0)))


def _masked(delta: "ad.Var", mask: np.ndarray | None) -> "ad.Var":
    if mask is None:
        return delta
    return delta * ad.const(mask.astype(np.float64)[:, :, None])


# -- backtracking descent --------------------------------------------------

_MAX_BACKTRACKS = 6
_STEP_GROW = 1.3
_MIN_IMPROVEMENT = 1e-10


def _image_box_projection(image, mask3=None):
    """Keep image + delta inside [0, 1] (and inside the mask support).

    Without this the optimizer walks delta far outside the valid pixel
    range, where the clip in the forward pass zeroes the gradient and
    freezes the descent.
    """
    def project(d):
        if mask3 is not None:
            d = d * mask3
        return np.clip(image + d, 0.0, 1.0) - image
    return project


def _descend(objective, x0: np.ndarray, steps: int, step_size: float,
             project=None):
    """Normalized-gradient descent with a backtracking line search.

    ``objective(Var) -> Var`` is rebuilt per evaluation.  A candidate step
    of length ``t`` along -grad/|grad| is accepted only if it does not
    increase the loss; otherwise ``t`` halves (up to a fixed ladder) and,
    failing that, descent stops.  Returns (x, value, accepted_values).
    """
    project = project if project is not None else (lambda a: a)
    x = project(np.array(x0, dtype=np.float64, copy=True))

    def value_at(arr):
        with ad.no_grad():
            return float(objective(ad.const(arr)).data)

    cur = value_at(x)
    accepted = [cur]
    lr = step_size
    for _ in range(steps):
        v = ad.param(x)
        loss = objective(v)
        loss.backward()
        g = v.grad
        gnorm = float(np.sqrt((g * g).sum()))
        if not np.isfinite(gnorm) or gnorm == 0.0:
            break
        direction = g / gnorm
        t = lr
        moved = False
        for _ in range(_MAX_BACKTRACKS):
            cand = project(x - t * direction)
            cv = value_at(cand)
            if cv <= cur - _MIN_IMPROVEMENT:
                x, cur = cand, cv
                lr = min(t * _STEP_GROW, step_size * 4.0)
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        accepted.append(cur)
    return x, cur, accepted


# -- disappearance ----------------------------------------------------------


def _disappearance_objective(ctx, delta, target_boxes, epsilon, mask,
                             route=ROUTE_STAGE2, anchor_ids=None):
    deff = _masked(delta, mask)
    fused = ctx.fused(ctx.adv_image(deff))
    if route == ROUTE_RPN:
        score = _objectness_mass(ctx, fused, anchor_ids)
    else:
        score = _nonbackground_mass(ctx, fused, target_boxes)
    if epsilon == 0.0:
        return score
    return score + ad.l2norm(deff) * float(epsilon)


def disappearance_loss(scene, delta, target_boxes, epsilon, detector,
                       mask=None) -> float:
    """Sum of non-background softmax mass over the target boxes, plus
    ``epsilon`` times the L2 norm of delta over its (masked) support.

    The perturbed image is clipped to [0, 1] before evaluation.  With
    delta = 0 this is exactly the model's non-background mass at the boxes.
    """
    value, _ = disappearance_loss_grad(scene, delta, target_boxes, epsilon,
                                       detector, mask=mask, need_grad=False)
    return value


def disappearance_loss_grad(scene, delta, target_boxes, epsilon, detector,
                            mask=None, need_grad=True):
    """(loss value, d loss / d delta); the analytic-gradient companion."""
    if len(target_boxes) == 0:
        raise ValueError("target_boxes must be nonempty")
    ctx = _SceneForward.for_scene(detector, scene)
    delta = np.asarray(delta, dtype=np.float64)
    if not need_grad:
        with ad.no_grad():
            loss = _disappearance_objective(ctx, ad.const(delta), target_boxes,
                                            epsilon, mask)
        return float(loss.data), None
    v = ad.param(delta)
    loss = _disappearance_objective(ctx, v, target_boxes, epsilon, mask)
    value = float(loss.data)
    loss.backward()
    return value, v.grad


def _resolve_targets(scene, targets) -> list:
    if isinstance(targets, str):
        if targets != ALL_TARGETS:
            raise ValueError(f"targets must be object ids or '{ALL_TARGETS}'")
        return list(range(len(scene.objects)))
    ids = [int(t) for t in targets]
    for t in ids:
        if not (0 <= t < len(scene.objects)):
            raise ValueError(
                f"target id {t} not in scene ({len(scene.objects)} objects)")
    if not ids:
        raise ValueError("empty target list")
    return ids


def _target_mask(scene, target_ids, pad: int = 2) -> np.ndarray:
    """Binary support mask covering the target objects' boxes (padded)."""
    h, w = scene.image.shape[:2]
    mask = np.zeros((h, w), dtype=bool)
    for t in target_ids:
        x1, y1, x2, y2 = scene.objects[t].image_box
        xa = max(int(np.floor(x1)) - pad, 0)
        ya = max(int(np.floor(y1)) - pad, 0)
        xb = min(int(np.ceil(x2)) + pad, w)
        yb = min(int(np.ceil(y2)) + pad, h)
        mask[ya:yb, xa:xb] = True
    return mask


def _visible_targets(detections, gt_boxes, iou_threshold, score_floor):
    """Detections (score-sorted) overlapping any target ground-truth box."""
    out = []
    for d in detections:
        if d.score < score_floor:
            continue
        if any(iou(d.box, g) >= iou_threshold for g in gt_boxes):
            out.append(d)
    return out


def _greedy_at_epsilon(ctx, gt_boxes, mask, epsilon, config, score_floor):
    """One full greedy disappearance run at a fixed distortion weight.

    Outer iteration: read detect(), take the top-k visible boxes overlapping
    the targets, descend the loss until the top visible box changes identity
    or disappears (the greedy dichotomy), re-read detect().  Returns
    (delta, iterations_used, trace, stalled, top_sequence) where
    top_sequence is the top visible box's anchor id at each outer read —
    consecutive entries always differ, since an iteration only completes
    once the top box dies or is replaced.
    """
    delta = np.zeros_like(ctx.image)
    mask3 = mask.astype(np.float64)[:, :, None] if mask is not None else None
    project = _image_box_projection(ctx.image, mask3)
    trace = []
    top_sequence = []
    stalled = False
    visible = _visible_targets(ctx.detect_with_delta(delta), gt_boxes,
                               config.success_iou, score_floor)
    iterations = 0
    # The attack set accumulates every box the detector has shown so far
    # (it only ever holds post-NMS outputs): pressure stays on boxes already
    # suppressed, which prevents earlier victims from resurfacing while the
    # loop chases later ones.  Each visible box contributes two stage-2
    # windows — the reported box and its anchor's footprint — because the
    # internal proposal window (not visible to the attacker) lies between
    # the two.
    seen_keys = set()
    attack_boxes = []
    attack_anchors = []
    for _ in range(config.max_outer_iterations):
        if not visible:
            break
        iterations += 1
        top_identity = visible[0].anchor_id
        top_sequence.append(top_identity)
        for det in visible[: config.k]:
            key = (det.anchor_id, tuple(round(c, 1) for c in det.box))
            if key in seen_keys:
                continue
            seen_keys.add(key)
            attack_boxes.append(det.box)
            attack_boxes.append(tuple(ctx.anchors[det.anchor_id]))
            attack_anchors.append(det.anchor_id)
        boxes = list(attack_boxes[-8 * config.k:])
        anchor_ids = list(dict.fromkeys(attack_anchors[-4 * config.k:]))

        def objective(v):
            deff = _masked(v, mask)
            fused = ctx.fused(ctx.adv_image(deff))
            if config.route == ROUTE_RPN:
                score = _objectness_margin(ctx, fused, anchor_ids)
            else:
                score = _suppression_margin(ctx, fused, boxes)
            if epsilon == 0.0:
                return score
            return score + ad.l2norm(deff) * float(epsilon)

        changed = False
        for _ in range(config.stall_rounds):
            delta, value, _ = _descend(objective, delta, config.inner_steps,
                                       config.step_size, project)
            now = _visible_targets(ctx.detect_with_delta(delta), gt_boxes,
                                   config.success_iou, score_floor)
            trace.append((value, now[0].score if now else 0.0))
            if not now or now[0].anchor_id != top_identity:
                changed = True
                break
        visible = now
        if not changed:
            stalled = True
            break
    return delta, iterations, trace, stalled, top_sequence


def greedy_disappearance(scene, targets, config: AttackConfig,
                         detector: Detector) -> AttackOutcome:
    """Make the target objects (ids, or ``"all"``) vanish from detect().

    Success: no detection at or above the score floor has IOU >=
    ``config.success_iou`` with any target object.  When ``targets`` names a
    subset of the scene, delta is masked to those objects' regions.  The
    distortion weight is binary-searched between ``eps_lo`` and ``eps_hi``
    (largest weight that still succeeds = least distortion); the returned
    outcome is re-verified from the float32 perturbation exactly as saved.
    """
    target_ids = _resolve_targets(scene, targets)
    selective = not isinstance(targets, str)
    mask = _target_mask(scene, target_ids) if selective else None
    gt_boxes = [scene.objects[t].image_box for t in target_ids]
    ctx = _SceneForward.for_scene(detector, scene)
    score_floor = (config.success_score if config.success_score is not None
                   else detector.config.detection_threshold)

    runs = {}

    def runner(eps):
        if eps not in runs:
            delta, iters, trace, stalled, tops = _greedy_at_epsilon(
                ctx, gt_boxes, mask, eps, config, score_floor)
            ok = not _visible_targets(ctx.detect_with_delta(delta), gt_boxes,
                                      config.success_iou, score_floor)
            runs[eps] = (delta, iters, trace, stalled, tops, ok)
        return runs[eps][5]

    if config.epsilon_search_iters <= 0:
        chosen_eps = config.eps_lo
        runner(chosen_eps)
    else:
        try:
            chosen_eps = binary_search_epsilon(
                runner, config.eps_lo, config.eps_hi,
                config.epsilon_search_iters)
        except UnattackableError:
            chosen_eps = config.eps_lo
    delta, iterations, trace, stalled, top_sequence, _ = runs[chosen_eps]

    pert = Perturbation(delta=delta.astype(np.float32), mask=mask,
                        epsilon=chosen_eps)
    adv = pert.apply(ctx.image)
    success = not _visible_targets(ctx.detect_image(adv), gt_boxes,
                                   config.success_iou, score_floor)
    return AttackOutcome(
        kind="disappearance",
        scene_id=scene.scene_id,
        success=success,
        iterations_used=iterations,
        perturbation=pert,
        distortion=per_pixel_l2(adv, ctx.image),
        trace=trace,
        epsilon=chosen_eps,
        detail={"targets": target_ids, "route": config.route,
                "masked": mask is not None, "stalled": stalled,
                "top_sequence": top_sequence, "runs_evaluated": len(runs)},
    )


def binary_search_epsilon(attack_runner, eps_lo: float, eps_hi: float,
                          iters: int) -> float:
    """Largest distortion weight in [eps_lo, eps_hi] at which the attack
    still succeeds, within (eps_hi - eps_lo) / 2**iters.

    ``attack_runner(eps)`` may return a boolean or anything with a
    ``success`` attribute.  Success is assumed monotone (harder as the
    weight grows).  Raises UnattackableError when even eps_lo fails.
    """
    if not (0.0 <= eps_lo <= eps_hi):
        raise ValueError("bounds must satisfy 0 <= eps_lo <= eps_hi")
    if iters < 0:
        raise ValueError("iters must be >= 0")

    def succeeded(eps):
        result = attack_runner(eps)
        return bool(getattr(result, "success", result))

    if succeeded(eps_hi):
        return eps_hi
    if not succeeded(eps_lo):
        raise UnattackableError(eps_lo, eps_hi)
    lo, hi = eps_lo, eps_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if succeeded(mid):
            lo = mid
        else:
            hi = mid
    return lo


# -- spoofing ----------------------------------------------------------------


def _bev_region_points(bev_occupancy, box, projection) -> float:
    """LIDAR return count inside the box's whole-cell BEV footprint."""
    occ = np.asarray(bev_occupancy, dtype=np.float64)
    hb, wb = occ.shape
    u1 = int(np.clip(np.floor(box[0] * projection.sx), 0, wb))
    v1 = int(np.clip(np.floor(box[1] * projection.sy), 0, hb))
    u2 = int(np.clip(np.ceil(box[2] * projection.sx), 0, wb))
    v2 = int(np.clip(np.ceil(box[3] * projection.sy), 0, hb))
    if u2 <= u1 or v2 <= v1:
        return 0.0
    return float(occ[v1:v2, u1:u2].sum())


def _validate_spoof_target(ctx, target_box, target_class, objects):
    h, w = ctx.config.image_size
    x1, y1, x2, y2 = target_box
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise ValueError(f"target box {target_box} outside the {w}x{h} image")
    if target_class not in range(1, ctx.config.n_classes):
        raise ValueError(f"target class must be a foreground class, "
                         f"got {target_class}")
    proj = make_projection(ctx.config.image_size, ctx.bev.shape[1:])
    points = _bev_region_points(ctx.bev[0], target_box, proj)
    if points < ctx.config.lidar_min_points:
        raise SpoofTargetError(
            f"target region has no BEV occupancy ({points:.0f} returns); the "
            f"LIDAR filter would drop it — refused before optimization")
    overlaps = [iou(target_box, obj.image_box) for obj in objects]
    if overlaps and max(overlaps) > 0.0:
        raise SpoofTargetError(
            f"target box overlaps a real object (IOU {max(overlaps):.2f}); a "
            f"spoof must match no ground truth")


def _spoof_anchor_ids(ctx, target_box, count: int) -> np.ndarray:
    """Best LIDAR-surviving anchors by IOU with the target box."""
    candidates = np.nonzero(ctx.anchor_keep)[0]
    overlap = np.array([iou(ctx.anchors[a], target_box) for a in candidates])
    order = np.argsort(-overlap)
    chosen = candidates[order[:count]]
    chosen = chosen[overlap[order[:count]] > 0.0]
    if chosen.size == 0:
        raise SpoofTargetError(
            "no LIDAR-surviving anchor overlaps the target box")
    return chosen


def _spoof_objective(ctx, delta, target_box, target_class, alpha,
                     anchor_ids, reg_weight):
    fused = ctx.fused(ctx.adv_image(delta))
    obj, reg = md.rpn_forward(ctx.pvars, fused, ctx.config)
    ids = np.asarray(anchor_ids, dtype=np.int64)
    obj_term = ad.vmean(ad.bce_with_logits(ad.gather(obj, ids),
                                           np.ones(len(ids))))
    targets = encode_deltas(ctx.anchors[ids],
                            np.repeat([target_box], len(ids), axis=0))
    reg_err = ad.gather(reg, ids) + ad.const(-targets)
    reg_term = ad.vmean(ad.vsum(ad.smooth_l1(reg_err), axis=1))
    loss = obj_term + reg_term * float(reg_weight)
    if alpha == 0.0:
        return loss
    # Second stage sees crops near the target (the proposals the RPN term
    # drives there), so score it at the target window: the target class
    # must win there, and the refinement deltas must vanish so the box
    # stays on the target instead of being pushed away.
    logits, deltas = md.stage2_forward(ctx.pvars, fused, [target_box],
                                       ctx.config)
    logp = ad.log_softmax(logits)
    nll_term = ad.vsum(ad.gather(ad.reshape(logp, (-1,)),
                                 np.asarray([int(target_class)]))) * -1.0
    refine_term = ad.vsum(ad.smooth_l1(deltas))
    stage2 = nll_term + refine_term * float(reg_weight)
    return loss + stage2 * float(alpha)


def spoof_loss(scene, delta, target_box, target_class, alpha,
               detector: Detector, anchor_count: int = 3,
               reg_weight: float = 1.0) -> float:
    """Stage-1 term (objectness + box regression toward the target) plus
    ``alpha`` times the stage-2 negative log-probability of the target
    class at the target box.

    The stage-1 term dominates by construction (alpha scales stage 2 down):
    a proposal must exist before its classification matters.  Requires the
    target region to hold LIDAR returns, otherwise the anchor filter would
    discard every relevant proposal and the loss is refused.
    """
    value, _ = spoof_loss_grad(scene, delta, target_box, target_class, alpha,
                               detector, anchor_count=anchor_count,
                               reg_weight=reg_weight, need_grad=False)
    return value


def spoof_loss_grad(scene, delta, target_box, target_class, alpha,
                    detector: Detector, anchor_count: int = 3,
                    reg_weight: float = 1.0, need_grad=True):
    """(loss value, d loss / d delta) for the spoofing objective."""
    ctx = _SceneForward.for_scene(detector, scene)
    _validate_spoof_target(ctx, target_box, target_class, [])
    anchor_ids = _spoof_anchor_ids(ctx, target_box, anchor_count)
    delta = np.asarray(delta, dtype=np.float64)
    if not need_grad:
        with ad.no_grad():
            loss = _spoof_objective(ctx, ad.const(delta), target_box,
                                    target_class, alpha, anchor_ids,
                                    reg_weight)
        return float(loss.data), None
    v = ad.param(delta)
    loss = _spoof_objective(ctx, v, target_box, target_class, alpha,
                            anchor_ids, reg_weight)
    value = float(loss.data)
    loss.backward()
    return value, v.grad


def _spoof_hit(detections, target_box, target_class, objects, iou_threshold,
               score_floor):
    """Detection satisfying the spoof success predicate, or None."""
    for d in detections:
        if d.class_id != target_class or d.score < score_floor:
            continue
        if iou(d.box, target_box) < iou_threshold:
            continue
        if any(iou(d.box, obj.image_box) > 0.0 for obj in objects):
            continue
        return d
    return None


def spoof_attack(scene, target_box, target_class, config: AttackConfig,
                 detector: Detector) -> AttackOutcome:
    """Conjure a detection of ``target_class`` at ``target_box``.

    Success: detect() reports a box with IOU >= ``config.success_iou``
    against the target, the right class, score at or above the threshold,
    and zero IOU against every real object.  Targets without LIDAR returns
    under their footprint, or overlapping a real object, are rejected
    before any optimization.
    """
    target_box = tuple(float(v) for v in target_box)
    ctx = _SceneForward.for_scene(detector, scene)
    _validate_spoof_target(ctx, target_box, target_class, scene.objects)
    anchor_ids = _spoof_anchor_ids(ctx, target_box, config.spoof_anchor_count)
    score_floor = (config.success_score if config.success_score is not None
                   else detector.config.detection_threshold)

    def objective(v):
        return _spoof_objective(ctx, v, target_box, target_class,
                                config.alpha, anchor_ids,
                                config.spoof_reg_weight)

    # Gradient descent alone dies in flat regions (inactive units around
    # empty road see no gradient), so seed the anchor neighborhood with
    # faint noise and kick it harder whenever a descent accepts no step.
    rng = np.random.default_rng([0x5F00F, scene.seed])
    h, w = ctx.image.shape[:2]
    region = np.zeros((h, w, 1), dtype=np.float64)
    for a in anchor_ids:
        x1, y1, x2, y2 = ctx.anchors[a]
        region[max(0, int(y1) - 8):min(h, int(np.ceil(y2)) + 8),
               max(0, int(x1) - 8):min(w, int(np.ceil(x2)) + 8)] = 1.0

    def kick(d, amplitude):
        return d + rng.uniform(-amplitude, amplitude, size=d.shape) * region

    project = _image_box_projection(ctx.image)
    delta = project(kick(np.zeros_like(ctx.image), 0.02))
    trace = []
    iterations = 0
    stalls = 0
    for _ in range(config.max_outer_iterations):
        dets = ctx.detect_with_delta(delta)
        # Optimize past the bare threshold so the success survives the
        # float32 round trip of the stored perturbation.
        hit = _spoof_hit(dets, target_box, target_class, scene.objects,
                         config.success_iou, score_floor + 0.05)
        if hit is not None:
            break
        iterations += 1
        delta, value, accepted = _descend(objective, delta,
                                          config.inner_steps,
                                          config.step_size,
                                          project=project)
        if len(accepted) <= 1:
            stalls += 1
            delta = project(kick(delta, min(0.25, 0.05 * stalls)))
        overlap_scores = [d.score for d in ctx.detect_with_delta(delta)
                          if iou(d.box, target_box) >= config.success_iou]
        trace.append((value, max(overlap_scores, default=0.0)))

    pert = Perturbation(delta=delta.astype(np.float32), epsilon=0.0)
    adv = pert.apply(ctx.image)
    hit = _spoof_hit(ctx.detect_image(adv), target_box, target_class,
                     scene.objects, config.success_iou, score_floor)
    return AttackOutcome(
        kind="spoof",
        scene_id=scene.scene_id,
        success=hit is not None,
        iterations_used=iterations,
        perturbation=pert,
        distortion=per_pixel_l2(adv, ctx.image),
        trace=trace,
        epsilon=None,
        detail={"target_box": list(target_box),
                "target_class": int(target_class),
                "anchor_ids": [int(a) for a in anchor_ids],
                "hit_score": None if hit is None else hit.score},
    )


def propose_spoof_target(scene, rng, detector_config, size_range=None,
                         target_class: int = 1, tries: int = 60):
    """A spoofable (target_box, target_class) in this scene, or None.

    Samples occupied BEV cells (clutter returns), back-projects to an image
    location, and sizes a class-shaped box there (0.8-1.2x the class
    template unless ``size_range`` overrides it); keeps the first candidate
    that stays in bounds, has LIDAR support under its whole footprint span,
    and touches no real object.
    """
    if size_range is None:
        tw, th = detector_config.anchor_templates[int(target_class) - 1]
        size_range = ((0.8 * tw, 1.2 * tw), (0.8 * th, 1.2 * th))
    occ = np.asarray(scene.bev[0], dtype=np.float64)
    proj = make_projection(detector_config.image_size, occ.shape)
    gt_bev = np.zeros_like(occ, dtype=bool)
    for obj in scene.objects:
        u1, v1, u2, v2 = obj.bev_box
        gt_bev[int(np.floor(v1)):int(np.ceil(v2)),
               int(np.floor(u1)):int(np.ceil(u2))] = True
    cells = np.argwhere((occ > 0) & ~gt_bev)
    if len(cells) == 0:
        return None
    h, w = detector_config.image_size
    (w_lo, w_hi), (h_lo, h_hi) = size_range
    for _ in range(tries):
        v, u = cells[rng.integers(len(cells))]
        cx, cy = (u + 0.5) / proj.sx, (v + 0.5) / proj.sy
        bw = rng.uniform(w_lo, w_hi)
        bh = rng.uniform(h_lo, h_hi)
        box = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
        if not (0 <= box[0] < box[2] <= w and 0 <= box[1] < box[3] <= h):
            continue
        if any(iou(box, obj.image_box) > 0.0 for obj in scene.objects):
            continue
        if _bev_region_points(occ, box, proj) < detector_config.lidar_min_points:
            continue
        return tuple(float(x) for x in box), int(target_class)
    return None


# -- universal patch ---------------------------------------------------------


def patch_placements(scene, classes) -> list:
    """(object_id, patchable_region) for each object of the given classes."""
    return [(i, tuple(int(v) for v in obj.patchable_region))
            for i, obj in enumerate(scene.objects)
            if obj.class_id in classes]


def _validate_region(region, image_hw):
    x, y, w, h = region
    ih, iw = image_hw
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > iw or y + h > ih:
        raise ValueError(f"patch placement {region} outside the "
                         f"{iw}x{ih} image")


def _patched_image(image, patch_delta: "ad.Var", regions) -> "ad.Var":
    """Paste the (resized) patch over each region; differentiable in patch."""
    image = np.asarray(image, dtype=np.float64)
    out = ad.const(image)
    ph, pw = patch_delta.shape[:2]
    chw = ad.transpose(patch_delta, (2, 0, 1))
    for _, region in regions:
        _validate_region(region, image.shape[:2])
        x, y, w, h = (int(v) for v in region)
        ay = ad.interp_matrix(h, ph)
        ax = ad.interp_matrix(w, pw)
        resized = ad.transpose(ad.interp2d(chw, ay, ax), (1, 2, 0))
        out = ad.paste(out, resized, y, x)
    return out


def apply_patch(scene, patch: Patch):
    """Operator P: paste the patch over each placement of the scene.

    Each placement region receives a bilinear resize of the patch, which
    *replaces* the pixels there; all other pixels and the LIDAR input are
    untouched.  Returns a new scene with the patched image.
    """
    regions = patch.placements_for(scene)
    with ad.no_grad():
        img = _patched_image(scene.image,
                             ad.const(patch.delta.astype(np.float64)),
                             regions)
        patched = img.data
    return dataclasses.replace(
        scene, image=patched.astype(scene.image.dtype))


def random_patch(shape, seed: int, classes=(1,)) -> Patch:
    """Uniform-random patch in [0, 1]; the no-optimization baseline."""
    rng = np.random.default_rng(seed)
    ph, pw = shape
    return Patch(delta=rng.uniform(0.0, 1.0, size=(ph, pw, 3)),
                 classes=classes)


def _gt_overlapping_anchors(anchors, gt_box, min_iou, cap):
    """Ids of up to ``cap`` anchors with IOU >= min_iou against gt_box."""
    ious = iou_matrix(anchors, [gt_box])[:, 0]
    return np.nonzero(ious >= min_iou)[0][:cap]


def _patch_potency(delta, scenes, placements, contexts, config, detector,
                   score_floor):
    """Fraction of patched objects suppressed across ``scenes``."""
    n_obj = n_gone = 0
    for scene in scenes:
        regions = placements[scene.scene_id]
        if scene.scene_id not in contexts:
            contexts[scene.scene_id] = _SceneForward.for_scene(detector, scene)
        ctx = contexts[scene.scene_id]
        with ad.no_grad():
            patched = _patched_image(scene.image, ad.const(delta),
                                     regions).data
        dets = ctx.detect_image(patched)
        for oid, _ in regions:
            n_obj += 1
            gt = scene.objects[oid].image_box
            if not any(iou(d.box, gt) >= config.success_iou
                       and d.score >= score_floor for d in dets):
                n_gone += 1
    return n_gone / max(n_obj, 1)


def _optimize_patch_once(scenes, placements, contexts, config, detector,
                         seed, score_floor):
    """One sequential optimization pass; returns the final float64 patch."""
    anchors = detector.config.anchor_grid().boxes()
    ph, pw = config.patch_shape
    delta = np.random.default_rng(seed).uniform(0.0, 1.0, size=(ph, pw, 3))
    n_steps = (config.patch_steps if config.patch_steps is not None
               else config.patch_sweeps * len(scenes))
    schedule = config.patch_schedule()

    def clip01(a):
        return np.clip(a, 0.0, 1.0)

    for i in range(n_steps):
        scene = scenes[i % len(scenes)]
        if scene.scene_id not in contexts:
            contexts[scene.scene_id] = _SceneForward.for_scene(detector, scene)
        ctx = contexts[scene.scene_id]
        regions = placements[scene.scene_id]
        gt_boxes = [scene.objects[oid].image_box for oid, _ in regions]
        epsilon = update_epsilon(i, schedule)

        with ad.no_grad():
            patched = _patched_image(scene.image, ad.const(delta),
                                     regions).data
        visible = _visible_targets(ctx.detect_image(patched), gt_boxes,
                                   config.success_iou, score_floor)
        if not visible:
            continue
        # Attack set: the reported boxes plus, for every object still
        # visible, the anchor windows overlapping it — suppressing the
        # whole neighborhood stops the detection from re-emerging at a
        # sibling anchor — and the objectness of those same anchors, which
        # pushes the object's proposals out of the stage-2 shortlist
        # entirely.
        boxes = [d.box for d in visible[: config.k]]
        anchor_ids = []
        for gi, gt in enumerate(gt_boxes):
            if not any(iou(d.box, gt) >= config.success_iou
                       for d in visible[: config.k]):
                continue
            ids = _gt_overlapping_anchors(anchors, gt, config.success_iou,
                                          config.patch_anchor_cap)
            anchor_ids.extend(int(a) for a in ids)
            boxes.extend(tuple(anchors[a]) for a in ids)
        aidx = np.asarray(sorted(set(anchor_ids)), dtype=np.int64)

        def objective(v):
            img = _patched_image(scene.image, v, regions)
            fused = ctx.fused(img)
            loss = _nonbackground_mass(ctx, fused, boxes)
            if len(aidx) and config.patch_rpn_weight > 0.0:
                obj, _ = md.rpn_forward(ctx.pvars, fused, ctx.config)
                sel = ad.gather(obj, aidx)
                # softplus(logit): bce toward zero objectness
                loss = loss + (ad.vsum(ad.log(ad.exp(sel) + 1.0))
                               * float(config.patch_rpn_weight))
            diff = img + ad.const(-ctx.image)
            return loss + ad.l2norm(diff) * float(epsilon)

        delta, _, _ = _descend(objective, delta, config.patch_inner_steps,
                               config.step_size, project=clip01)
    return np.clip(delta, 0.0, 1.0)


def universal_patch(train_scenes, config: AttackConfig,
                    detector: Detector) -> Patch:
    """Sequential patch optimization over a scene pool.

    Starting from a uniform-random patch, repeatedly: take the next scene
    (cyclic), paste the patch on its patchable objects, read the top-k
    visible boxes still overlapping those objects, and descend the
    disappearance loss with the scheduled distortion weight.  The patch is
    projected back into [0, 1] after every step; no p-norm projection is
    applied to the induced image change — the schedule alone controls
    distortion.  The whole pass runs ``patch_restarts`` times from
    different random initializations and the strongest candidate on the
    training pool wins.
    """
    scenes = list(train_scenes)
    if not scenes:
        raise ValueError("training pool must be nonempty")
    placements = {}
    for s in scenes:
        placements[s.scene_id] = patch_placements(s, config.patch_classes)
        if not placements[s.scene_id]:
            raise ValueError(f"scene {s.scene_id} has no patchable object of "
                             f"classes {config.patch_classes}")
    score_floor = (config.success_score if config.success_score is not None
                   else detector.config.detection_threshold)
    contexts = {}
    best, best_potency = None, -1.0
    for restart in range(config.patch_restarts):
        delta = _optimize_patch_once(scenes, placements, contexts, config,
                                     detector, config.patch_seed + restart,
                                     score_floor)
        potency = _patch_potency(delta, scenes, placements, contexts, config,
                                 detector, score_floor)
        if potency > best_potency:
            best, best_potency = delta, potency
    return Patch(delta=best.astype(np.float32), classes=config.patch_classes)
