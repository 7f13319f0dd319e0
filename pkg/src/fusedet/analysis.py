"""Sensor-reliance measurement, benign detection quality, and attack-suite
statistics.

The swap experiment pairs every scene's camera image with every scene's
LIDAR input (all n-squared ordered combinations, diagonal included) and asks
which sensor the reported detections follow: a detection is LIDAR-consistent
when it overlaps the ground truth of the scene that supplied the LIDAR, and
spurious when it overlaps neither side's ground truth.  Oracle stubs that
read exactly one modality calibrate the two extremes of the measurement —
a LIDAR-only reader always follows the LIDAR side, an image-only reader
agrees with it only by chance overlap.

Attack suites run one attack per scene (or per proposed spoof target),
persist one flat record per run, and reduce them to a success rate plus
distortion statistics; every aggregate is recomputable from the persisted
records alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .attacks import (
    ALL_TARGETS,
    AttackConfig,
    greedy_disappearance,
    per_pixel_l2,
    propose_spoof_target,
    spoof_attack,
)
from .boxes import iou
from .detector import Detection, Detector

__all__ = [
    "ATTACK_KINDS",
    "DetectionQuality",
    "DistortionStats",
    "OracleStub",
    "SwapStats",
    "attack_config_hash",
    "evaluate_attack_suite",
    "evaluate_detector",
    "format_suite_summary",
    "format_swap_stats",
    "image_only_stub",
    "lidar_only_stub",
    "load_records",
    "per_pixel_l2",
    "suite_summary_from_records",
    "swap_chance_rate",
    "swap_experiment",
    "write_records",
]

ATTACK_KINDS = ("disappearance", "spoof")


# -- detection quality --------------------------------------------------------


@dataclass(frozen=True)
class DetectionQuality:
    """Benign metrics of a detector on a labeled scene set.

    ``ap`` is 11-point interpolated average precision at the matching IOU,
    pooled over classes with class-aware greedy matching; ``recall`` and
    ``precision`` are taken at the detector's own operating threshold.
    """

    recall: float
    precision: float
    ap: float
    n_objects: int
    n_detections: int


def evaluate_detector(detector, scenes, iou_threshold: float = 0.5
                      ) -> DetectionQuality:
    """Recall / precision / average precision over a scene set.

    Detections are matched greedily (highest score first) to unclaimed
    ground-truth objects of the same class at IOU >= ``iou_threshold``.
    """
    scored = []                     # (score, matched) per detection, pooled
    n_gt = 0
    n_matched = 0
    for scene in scenes:
        dets = detector.detect_scene(scene)
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        claimed = [False] * len(scene.objects)
        n_gt += len(scene.objects)
        for i in order:
            d = dets[i]
            best_gi, best_v = -1, 0.0
            for gi, obj in enumerate(scene.objects):
                if claimed[gi] or obj.class_id != d.class_id:
                    continue
                v = iou(d.box, obj.image_box)
                if v >= iou_threshold and v > best_v:
                    best_gi, best_v = gi, v
            if best_gi >= 0:
                claimed[best_gi] = True
                scored.append((d.score, True))
            else:
                scored.append((d.score, False))
        n_matched += sum(claimed)
    if n_gt == 0:
        raise ValueError("evaluation needs at least one ground-truth object")

    scored.sort(key=lambda t: -t[0])
    flags = np.array([m for _, m in scored], dtype=bool)
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(scored) + 1)
    recalls = tp / n_gt
    precisions = tp / ranks
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        at_least = precisions[recalls >= r]
        ap += (float(at_least.max()) if at_least.size else 0.0) / 11.0

    return DetectionQuality(
        recall=n_matched / n_gt,
        precision=(n_matched / len(scored)) if scored else 0.0,
        ap=ap,
        n_objects=n_gt,
        n_detections=len(scored),
    )


# -- sensor swap experiment ---------------------------------------------------


@dataclass(frozen=True)
class SwapStats:
    """Aggregate of one image/LIDAR swap sweep.

    ``frac_lidar_consistent`` is the fraction of detections matching the
    ground truth of the chosen truth side (the LIDAR side unless the sweep
    ran with ``image_side_truth=True``; ``ground_truth_side`` records which).
    ``frac_spurious`` is the fraction matching neither side's ground truth.
    """

    n_scenes: int
    n_combinations: int
    frac_lidar_consistent: float
    frac_spurious: float
    n_detections: int
    ground_truth_side: str = "lidar"

    def __post_init__(self):
        full, off_diag = self.n_scenes**2, self.n_scenes**2 - self.n_scenes
        if self.n_combinations not in (full, off_diag):
            raise ValueError(
                f"{self.n_combinations} combinations inconsistent with "
                f"{self.n_scenes} scenes (expected {full} or {off_diag})")
        for name in ("frac_lidar_consistent", "frac_spurious"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.ground_truth_side not in ("lidar", "image"):
            raise ValueError("ground_truth_side must be 'lidar' or 'image'")


def swap_experiment(scenes, detector, *, include_diagonal: bool = True,
                    image_side_truth: bool = False,
                    iou_threshold: float = 0.5) -> SwapStats:
    """Run detect() on every ordered (image_i, LIDAR_j) pairing.

    A detection counts as consistent when it reaches ``iou_threshold``
    against some ground-truth box of the LIDAR-side scene j (or of the
    image-side scene i under ``image_side_truth``); it counts as spurious
    when it matches neither scene's ground truth.
    """
    scenes = list(scenes)
    if len(scenes) < 2:
        raise ValueError("the swap experiment needs at least two scenes")
    n_pairs = n_dets = n_consistent = n_spurious = 0
    for si in scenes:
        for sj in scenes:
            if not include_diagonal and si.scene_id == sj.scene_id:
                continue
            n_pairs += 1
            truth, other = (si, sj) if image_side_truth else (sj, si)
            for d in detector.detect(si.image, sj.bev):
                n_dets += 1
                hit_truth = any(iou(d.box, o.image_box) >= iou_threshold
                                for o in truth.objects)
                hit_other = any(iou(d.box, o.image_box) >= iou_threshold
                                for o in other.objects)
                n_consistent += hit_truth
                n_spurious += not (hit_truth or hit_other)
    return SwapStats(
        n_scenes=len(scenes),
        n_combinations=n_pairs,
        frac_lidar_consistent=(n_consistent / n_dets) if n_dets else 0.0,
        frac_spurious=(n_spurious / n_dets) if n_dets else 0.0,
        n_detections=n_dets,
        ground_truth_side="image" if image_side_truth else "lidar",
    )


def swap_chance_rate(scenes, *, include_diagonal: bool = True,
                     iou_threshold: float = 0.5) -> float:
    """What a perfect image-only detector would score in the swap sweep:
    the fraction of image-side ground-truth boxes that happen to overlap
    some LIDAR-side ground-truth box, counted directly over all pairings."""
    scenes = list(scenes)
    hits = total = 0
    for si in scenes:
        for sj in scenes:
            if not include_diagonal and si.scene_id == sj.scene_id:
                continue
            for o in si.objects:
                total += 1
                hits += any(iou(o.image_box, g.image_box) >= iou_threshold
                            for g in sj.objects)
    return (hits / total) if total else 0.0


class OracleStub:
    """Perfect-recall detector wired to exactly one modality.

    It recognizes inputs byte-for-byte from its construction scenes and
    reports that scene's ground truth with score 1.0, so it demonstrably
    reads nothing else: keyed to the BEV it always follows the LIDAR side
    of a swapped pair, keyed to the image it follows the image side.
    """

    def __init__(self, scenes, side: str):
        if side not in ("lidar", "image"):
            raise ValueError("side must be 'lidar' or 'image'")
        self.side = side
        self._table = {}
        for scene in scenes:
            key = np.ascontiguousarray(
                scene.bev if side == "lidar" else scene.image).tobytes()
            self._table[key] = [
                (tuple(float(v) for v in o.image_box), int(o.class_id))
                for o in scene.objects]

    def detect(self, image, bev):
        source = bev if self.side == "lidar" else image
        key = np.ascontiguousarray(np.asarray(source)).tobytes()
        if key not in self._table:
            raise ValueError(
                f"{self.side}-only stub got an input outside its scene set")
        return [Detection(box=b, score=1.0, class_id=c, anchor_id=-1)
                for b, c in self._table[key]]

    def detect_scene(self, scene):
        return self.detect(scene.image, scene.bev)


def lidar_only_stub(scenes) -> OracleStub:
    return OracleStub(scenes, "lidar")


def image_only_stub(scenes) -> OracleStub:
    return OracleStub(scenes, "image")


# -- distortion statistics ----------------------------------------------------


@dataclass(frozen=True)
class DistortionStats:
    """Per-run per-pixel-L2 values with their median / mean / max."""

    values: tuple = ()
    median: float = 0.0
    mean: float = 0.0
    max: float = 0.0

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise ValueError("distortions must be >= 0")
        if self.median > self.max:
            raise ValueError("median cannot exceed max")

    @classmethod
    def from_values(cls, values) -> "DistortionStats":
        values = tuple(float(v) for v in values)
        if not values:
            return cls()
        return cls(values=values,
                   median=float(np.median(values)),
                   mean=float(np.mean(values)),
                   max=float(np.max(values)))


# -- attack-suite evaluation --------------------------------------------------


def attack_config_hash(config: AttackConfig) -> str:
    """Stable short hash of an attack configuration, stored on each record."""
    blob = json.dumps(config.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_records(path, records) -> None:
    """One JSON object per line, keys sorted — byte-stable for fixed input."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    path.write_text(text)


def load_records(path) -> list:
    return [json.loads(line)
            for line in pathlib.Path(path).read_text().splitlines() if line]


def evaluate_attack_suite(detector: Detector, attack_kind: str, scenes,
                          config: AttackConfig, records_path=None,
                          spoof_salt: int = 77):
    """Run one attack per scene and aggregate the outcomes.

    ``disappearance`` attacks every object of every scene; ``spoof``
    proposes one target per scene (seeded by the scene seed and
    ``spoof_salt``) and skips scenes where no spoofable location exists.
    Returns (success_rate, DistortionStats over successful runs); when
    ``records_path`` is given, one flat record per run is persisted there
    and the aggregates are recomputable from that file alone.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("scenes must be nonempty")
    if attack_kind not in ATTACK_KINDS:
        raise ValueError(f"attack_kind must be one of {ATTACK_KINDS}, "
                         f"got {attack_kind!r}")
    chash = attack_config_hash(config)
    records, successes, success_distortions = [], [], []
    for scene in scenes:
        if attack_kind == "disappearance":
            outcome = greedy_disappearance(scene, ALL_TARGETS, config,
                                           detector)
        else:
            rng = np.random.default_rng([int(scene.seed), int(spoof_salt)])
            target = propose_spoof_target(scene, rng, detector.config)
            if target is None:
                continue
            outcome = spoof_attack(scene, target[0], target[1], config,
                                   detector)
        records.append(outcome.record(chash))
        successes.append(outcome.success)
        if outcome.success:
            success_distortions.append(outcome.distortion)
    if not records:
        raise ValueError("no attackable targets in the scene set")
    if records_path is not None:
        write_records(records_path, records)
    return (float(np.mean(successes)),
            DistortionStats.from_values(success_distortions))


def suite_summary_from_records(path):
    """Recompute (success_rate, DistortionStats) from a persisted record
    file; bit-identical to what evaluate_attack_suite returned for it."""
    records = load_records(path)
    if not records:
        raise ValueError(f"no records in {path}")
    successes = [bool(r["success"]) for r in records]
    distortions = [float(r["distortion"]) for r in records if r["success"]]
    return (float(np.mean(successes)),
            DistortionStats.from_values(distortions))


# -- human-readable renderings ------------------------------------------------


def format_swap_stats(stats: SwapStats) -> str:
    return (f"{stats.n_scenes} scenes -> {stats.n_combinations} image/LIDAR "
            f"pairings, {stats.n_detections} detections: "
            f"{100 * stats.frac_lidar_consistent:.1f}% consistent with the "
            f"{stats.ground_truth_side}-side ground truth, "
            f"{100 * stats.frac_spurious:.1f}% matching neither side")


def format_suite_summary(attack_kind: str, success_rate: float,
                         stats: DistortionStats) -> str:
    line = (f"{attack_kind}: {100 * success_rate:.1f}% success "
            f"({len(stats.values)} successful runs)")
    if stats.values:
        line += (f"; per-pixel L2 median {stats.median:.6f} "
                 f"mean {stats.mean:.6f} max {stats.max:.6f}")
    return line
