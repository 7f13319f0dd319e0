"""Reproducible synthetic camera+LIDAR scenes with ground-truth boxes.

Every scene is a deterministic function of (seed, spec).  The image plane
and the BEV grid view the same flat ground rectangle, linked by a fixed
scaling projection, so each object appears in both modalities at
projectively consistent positions.

The two modalities deliberately carry different signal:

  - LIDAR (BEV) is geometrically reliable: real objects produce a filled
    footprint of returns, normally at heights above
    ``CLUTTER_MAX_HEIGHT_NORM`` while clutter blobs and ground specks stay
    below it.  A configurable fraction of objects has a beam-absorbing
    surface: their footprint stays fully occupied (the anchor filter never
    deletes a real object) but every return reflects low, leaving a
    clutter-like height signature.
  - The image is texture-noisy and contains distractor blobs, but it is the
    only carrier of class identity (vehicles are blue-toned boxes with a
    roof band, pedestrians/cyclists are green-toned ellipses).

This split reproduces, at desk scale, a fusion model that leans on LIDAR
for "is there an object here" but still needs the camera to carry objects
whose returns are absorbed -- the regime in which camera-side perturbations
can both erase and conjure detections.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import arrayio

# class ids: 0 is background and never appears in ground truth
CLASS_BACKGROUND = 0
CLASS_VEHICLE = 1
CLASS_PEDESTRIAN = 2

# all clutter returns stay strictly below this normalized height; all real
# objects stay strictly above it (the anchor filter and the stage-2 head
# both depend on this margin existing in the data)
CLUTTER_MAX_HEIGHT_NORM = 0.5


class InfeasibleSceneSpec(Exception):
    """Requested objects cannot be placed without violating the overlap bound."""


@dataclass(frozen=True)
class GridSpec:
    """BEV rasterization extents and resolution."""

    x_extent: tuple = (0.0, 38.4)   # meters, maps to image width
    y_extent: tuple = (0.0, 25.6)   # meters, maps to image height
    nx: int = 96
    ny: int = 96
    z_max: float = 3.0

    @property
    def dx(self) -> float:
        return (self.x_extent[1] - self.x_extent[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_extent[1] - self.y_extent[0]) / self.ny


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    image_box: tuple          # (x_min, y_min, x_max, y_max) pixels
    bev_box: tuple            # (u_min, v_min, u_max, v_max) grid cells
    patchable_region: tuple   # (x, y, w, h) pixels, flat area inside image_box

    def __post_init__(self):
        x1, y1, x2, y2 = self.image_box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate image box {self.image_box}")
        u1, v1, u2, v2 = self.bev_box
        if not (u1 < u2 and v1 < v2):
            raise ValueError(f"degenerate bev box {self.bev_box}")
        px, py, pw, ph = self.patchable_region
        if not (pw > 0 and ph > 0 and px >= x1 - 1e-6 and py >= y1 - 1e-6
                and px + pw <= x2 + 1e-6 and py + ph <= y2 + 1e-6):
            raise ValueError("patchable_region must lie inside image_box")


@dataclass(eq=False)
class Scene:
    image: np.ndarray         # (H, W, 3) float32 in [0,1]
    bev: np.ndarray           # (2, Hb, Wb) float32: occupancy, normalized max height
    objects: list
    scene_id: str
    seed: int

    @property
    def image_hw(self):
        return self.image.shape[:2]

    @property
    def bev_hw(self):
        return self.bev.shape[1:]


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters; defaults give the standard toy world."""

    n_objects: int = 2
    image_size: tuple = (128, 192)          # (H, W)
    bev_size: tuple = (2, 96, 96)           # (C, Hb, Wb)
    grid: GridSpec = field(default_factory=GridSpec)
    vehicle_fraction: float = 0.55
    vehicle_w: tuple = (24.0, 44.0)         # image pixels
    vehicle_h: tuple = (14.0, 24.0)
    pedestrian_w: tuple = (10.0, 22.0)
    pedestrian_h: tuple = (16.0, 30.0)
    object_height_m: tuple = (1.6, 2.4)     # LIDAR return height of real objects
    blob_height_m: tuple = (0.45, 1.35)     # clutter blobs stay below objects
    speck_height_m: tuple = (0.1, 0.4)
    n_clutter_blobs: tuple = (1, 3)         # inclusive range
    speck_density: float = 0.004            # fraction of BEV cells
    n_distractors: tuple = (2, 4)           # image-only blobs
    background_noise: float = 0.05
    object_noise: float = 0.09
    lidar_absorption: float = 0.3           # P(object reflects only low returns)
    placement_margin: float = 6.0           # pixels between boxes and borders
    max_placement_tries: int = 300

    def validate(self):
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        h, w = self.image_size
        if h <= 0 or w <= 0 or any(s <= 0 for s in self.bev_size):
            raise ValueError("sizes must be positive")
        for lo, hi in (self.vehicle_w, self.vehicle_h, self.pedestrian_w,
                       self.pedestrian_h, self.object_height_m):
            if not (0 < lo < hi):
                raise ValueError("size ranges must be non-degenerate and positive")
        if self.object_height_m[0] / self.grid.z_max <= CLUTTER_MAX_HEIGHT_NORM:
            raise ValueError("object heights must normalize above the clutter ceiling")
        if self.blob_height_m[1] / self.grid.z_max >= CLUTTER_MAX_HEIGHT_NORM:
            raise ValueError("blob heights must normalize below the clutter ceiling")
        if not 0.0 <= self.lidar_absorption < 1.0:
            raise ValueError("lidar_absorption must be in [0, 1)")


def _f32(v: float) -> float:
    return float(np.float32(v))


def _f32box(box) -> tuple:
    return tuple(_f32(v) for v in box)


def pixels_to_meters(spec: SceneSpec):
    """(meters per pixel x, meters per pixel y) for the fixed camera model."""
    h, w = spec.image_size
    g = spec.grid
    return ((g.x_extent[1] - g.x_extent[0]) / w, (g.y_extent[1] - g.y_extent[0]) / h)


def image_box_to_bev(box, spec: SceneSpec):
    h, w = spec.image_size
    _, hb, wb = spec.bev_size
    sx, sy = wb / w, hb / h
    return (box[0] * sx, box[1] * sy, box[2] * sx, box[3] * sy)


def rasterize_bev(points, grid: GridSpec) -> np.ndarray:
    """Bin (x, y, z) points in meters into an occupancy + max-height grid.

    Points outside the extents are silently dropped.  The height channel
    holds max(z)/z_max per cell, clipped to [0,1]; empty cells are 0.
    """
    out = np.zeros((2, grid.ny, grid.nx), dtype=np.float32)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size == 0:
        return out
    u = np.floor((pts[:, 0] - grid.x_extent[0]) / grid.dx).astype(np.int64)
    v = np.floor((pts[:, 1] - grid.y_extent[0]) / grid.dy).astype(np.int64)
    keep = (u >= 0) & (u < grid.nx) & (v >= 0) & (v < grid.ny)
    u, v, z = u[keep], v[keep], pts[keep, 2]
    out[0, v, u] = 1.0
    znorm = np.clip(z / grid.z_max, 0.0, 1.0).astype(np.float32)
    np.maximum.at(out[1], (v, u), znorm)
    return out


def _smooth_noise(rng, h, w, coarse=(8, 12), amp=0.08):
    grid = rng.normal(0.0, 1.0, size=coarse)
    ys = np.linspace(0, coarse[0] - 1, h)
    xs = np.linspace(0, coarse[1] - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, coarse[0] - 1)
    x1 = np.minimum(x0 + 1, coarse[1] - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    up = (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
          + grid[np.ix_(y1, x0)] * fy * (1 - fx)
          + grid[np.ix_(y0, x1)] * (1 - fy) * fx
          + grid[np.ix_(y1, x1)] * fy * fx)
    return amp * up


def _ellipse_mask(h, w, box):
    x1, y1, x2, y2 = box
    cy, cx = (y1 + y2) / 2, (x1 + x2) / 2
    ry, rx = max((y2 - y1) / 2, 1e-6), max((x2 - x1) / 2, 1e-6)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect_mask(h, w, box):
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    m = np.zeros((h, w), dtype=bool)
    m[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = True
    return m


def _boxes_conflict(box, others, margin):
    x1, y1, x2, y2 = box
    grown = (x1 - margin, y1 - margin, x2 + margin, y2 + margin)
    for o in others:
        if not (grown[2] <= o[0] or o[2] <= grown[0]
                or grown[3] <= o[1] or o[3] <= grown[1]):
            return True
    return False


def _place_box(rng, spec, w_range, h_range, taken, tries_left):
    h, w = spec.image_size
    m = spec.placement_margin
    for _ in range(tries_left):
        bw = rng.uniform(*w_range)
        bh = rng.uniform(*h_range)
        x1 = rng.uniform(m, w - m - bw)
        y1 = rng.uniform(m, h - m - bh)
        box = (x1, y1, x1 + bw, y1 + bh)
        if not _boxes_conflict(box, taken, m):
            return box
    return None


def _draw_vehicle(image, box, rng, noise):
    h, w = image.shape[:2]
    body = _rect_mask(h, w, box)
    color = np.array([rng.uniform(0.05, 0.30), rng.uniform(0.05, 0.35),
                      rng.uniform(0.55, 0.95)])
    image[body] = color
    # darker roof/window band along the top third
    x1, y1, x2, y2 = box
    band = _rect_mask(h, w, (x1 + 2, y1 + 1, x2 - 2, y1 + (y2 - y1) * 0.35))
    image[band] = color * 0.45
    image[body] += rng.normal(0.0, noise, size=(int(body.sum()), 3))


def _draw_pedestrian(image, box, rng, noise):
    h, w = image.shape[:2]
    body = _ellipse_mask(h, w, box)
    color = np.array([rng.uniform(0.05, 0.30), rng.uniform(0.55, 0.95),
                      rng.uniform(0.05, 0.30)])
    image[body] = color
    image[body] += rng.normal(0.0, noise, size=(int(body.sum()), 3))


def _draw_distractor(image, box, rng, background_tone):
    h, w = image.shape[:2]
    mask = _ellipse_mask(h, w, box) if rng.random() < 0.5 else _rect_mask(h, w, box)
    if rng.random() < 0.5:
        # object-like saturated color: teaches that color alone is not an object
        color = (np.array([0.15, 0.15, 0.75]) if rng.random() < 0.5
                 else np.array([0.15, 0.75, 0.15]))
        color = color + rng.normal(0.0, 0.08, size=3)
    else:
        color = 0.4 * rng.uniform(0.0, 1.0, size=3) + 0.6 * background_tone
    image[mask] = np.clip(color, 0, 1)


def _object_points(rng, spec, bev_box, height_m):
    """LIDAR returns covering the full cell span of the object's BEV footprint.

    Every cell in floor(min)..ceil(max) gets a return, so any query box that
    intersects the footprint is guaranteed to find occupancy.
    """
    g = spec.grid
    u1, v1, u2, v2 = bev_box
    us = np.arange(int(np.floor(u1)), int(np.ceil(u2)))
    vs = np.arange(int(np.floor(v1)), int(np.ceil(v2)))
    uu, vv = np.meshgrid(us, vs)
    centers_u = uu.ravel() + 0.5
    centers_v = vv.ravel() + 0.5
    xs = g.x_extent[0] + centers_u * g.dx
    ys = g.y_extent[0] + centers_v * g.dy
    zs = height_m + rng.normal(0.0, 0.05, size=xs.size)
    zs = np.clip(zs, spec.object_height_m[0], g.z_max - 0.05)
    return np.stack([xs, ys, zs], axis=1)


def generate_scene(seed: int, spec: SceneSpec) -> Scene:
    """Deterministically build one scene from (seed, spec)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    _, hb, wb = spec.bev_size
    g = spec.grid

    # background texture
    tone = rng.uniform(0.32, 0.48)
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = tone
    image += rng.normal(0.0, 0.02, size=3)  # slight channel tint
    image += _smooth_noise(rng, h, w)[..., None]
    image += rng.normal(0.0, spec.background_noise, size=(h, w, 3))

    # image-only distractor blobs
    n_distr = int(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1))
    taken_boxes = []
    for _ in range(n_distr):
        box = _place_box(rng, spec, (10, 36), (8, 26), taken_boxes, 40)
        if box is None:
            continue
        _draw_distractor(image, box, rng, tone)
        taken_boxes.append(box)

    # objects: placement first (so failure costs nothing), then rendering
    object_boxes = []
    classes = []
    for _ in range(spec.n_objects):
        if rng.random() < spec.vehicle_fraction:
            cls, wr, hr = CLASS_VEHICLE, spec.vehicle_w, spec.vehicle_h
        else:
            cls, wr, hr = CLASS_PEDESTRIAN, spec.pedestrian_w, spec.pedestrian_h
        box = _place_box(rng, spec, wr, hr, object_boxes + taken_boxes,
                         spec.max_placement_tries)
        if box is None:
            raise InfeasibleSceneSpec(
                f"could not place object {len(object_boxes) + 1} of "
                f"{spec.n_objects} within {spec.max_placement_tries} tries"
            )
        object_boxes.append(box)
        classes.append(cls)

    points = []
    objects = []
    for cls, box in zip(classes, object_boxes):
        if cls == CLASS_VEHICLE:
            _draw_vehicle(image, box, rng, spec.object_noise)
        else:
            _draw_pedestrian(image, box, rng, spec.object_noise)
        bev_box = image_box_to_bev(box, spec)
        height = rng.uniform(*spec.object_height_m)
        pts = _object_points(rng, spec, bev_box, height)
        if rng.random() < spec.lidar_absorption:
            # Beam-absorbing surface: the footprint stays fully occupied
            # (the anchor filter must never delete a real object) but every
            # return reflects low, leaving a clutter-like height signature
            # -- the detector must carry such objects on image evidence.
            pts = pts.copy()
            pts[:, 2] = rng.uniform(*spec.blob_height_m, size=len(pts))
        points.append(pts)
        x1, y1, x2, y2 = box
        bw, bh = x2 - x1, y2 - y1
        px = int(round(x1 + 0.225 * bw))
        py = int(round(y1 + 0.3 * bh))
        pw = max(3, int(round(0.55 * bw)))
        ph = max(3, int(round(0.45 * bh)))
        pw = min(pw, int(np.floor(x2)) - px)
        ph = min(ph, int(np.floor(y2)) - py)
        objects.append(GroundTruthObject(
            class_id=cls,
            image_box=_f32box(box),
            bev_box=_f32box(bev_box),
            patchable_region=(px, py, pw, ph),
        ))

    # clutter blobs: LIDAR-only structures below the height ceiling
    n_blobs = int(rng.integers(spec.n_clutter_blobs[0], spec.n_clutter_blobs[1] + 1))
    for _ in range(n_blobs):
        box = _place_box(rng, spec, (10, 30), (8, 24), object_boxes, 60)
        if box is None:
            continue
        u1, v1, u2, v2 = image_box_to_bev(box, spec)
        us = np.arange(int(np.floor(u1)), int(np.ceil(u2)))
        vs = np.arange(int(np.floor(v1)), int(np.ceil(v2)))
        uu, vv = np.meshgrid(us, vs)
        keep = rng.random(uu.size) < 0.85
        cu, cv = uu.ravel()[keep] + 0.5, vv.ravel()[keep] + 0.5
        z = rng.uniform(*spec.blob_height_m, size=cu.size)
        points.append(np.stack([g.x_extent[0] + cu * g.dx,
                                g.y_extent[0] + cv * g.dy, z], axis=1))

    # sparse ground specks
    n_specks = int(round(spec.speck_density * hb * wb))
    if n_specks:
        cu = rng.uniform(0, wb, size=n_specks)
        cv = rng.uniform(0, hb, size=n_specks)
        z = rng.uniform(*spec.speck_height_m, size=n_specks)
        points.append(np.stack([g.x_extent[0] + cu * g.dx,
                                g.y_extent[0] + cv * g.dy, z], axis=1))

    all_points = np.concatenate(points, axis=0) if points else np.zeros((0, 3))
    bev = rasterize_bev(all_points, g)

    scene = Scene(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        bev=bev,
        objects=objects,
        scene_id=f"scene-{seed:08d}",
        seed=int(seed),
    )
    _check_scene(scene)
    return scene


def _check_scene(scene: Scene) -> None:
    h, w = scene.image_hw
    hb, wb = scene.bev_hw
    occ = scene.bev[0]
    for obj in scene.objects:
        x1, y1, x2, y2 = obj.image_box
        if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
            raise AssertionError(f"image box out of bounds: {obj.image_box}")
        u1, v1, u2, v2 = obj.bev_box
        if not (0 <= u1 < u2 <= wb and 0 <= v1 < v2 <= hb):
            raise AssertionError(f"bev box out of bounds: {obj.bev_box}")
        sl = occ[int(np.floor(v1)):int(np.ceil(v2)), int(np.floor(u1)):int(np.ceil(u2))]
        if sl.sum() < 1:
            raise AssertionError("object footprint has no LIDAR support")


def generate_dataset(spec: SceneSpec, n_scenes: int, base_seed: int,
                     n_objects_range=None) -> list:
    """Generate `n_scenes` scenes with seeds base_seed..base_seed+n-1.

    If `n_objects_range` = (lo, hi) is given, each scene's object count is
    drawn deterministically from its own seed.
    """
    scenes = []
    for i in range(n_scenes):
        seed = base_seed + i
        s = spec
        if n_objects_range is not None:
            pick = np.random.default_rng([seed, 0xC0]).integers(
                n_objects_range[0], n_objects_range[1] + 1)
            s = replace(spec, n_objects=int(pick))
        scenes.append(generate_scene(seed, s))
    return scenes


def save_dataset(scenes, path, meta=None) -> None:
    arrayio.write_dataset(path, scenes, meta=meta)


def load_dataset(path):
    """Returns (scenes, meta); raises arrayio.FormatError on corrupt files."""
    return arrayio.read_dataset(path)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bit-exact equality on every field (arrays included)."""
    if (a.scene_id != b.scene_id or a.seed != b.seed
            or a.image.shape != b.image.shape or a.bev.shape != b.bev.shape):
        return False
    if not (np.array_equal(a.image, b.image) and np.array_equal(a.bev, b.bev)):
        return False
    if len(a.objects) != len(b.objects):
        return False
    for oa, ob in zip(a.objects, b.objects):
        if (oa.class_id != ob.class_id or oa.image_box != ob.image_box
                or oa.bev_box != ob.bev_box
                or oa.patchable_region != ob.patchable_region):
            return False
    return True
