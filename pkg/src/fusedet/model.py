"""Two-stage camera+LIDAR fusion detector: parameters and forward passes.

Architecture (single scene, no batch dimension):

  image (3,128,192) --conv s2--> (10,64,96) --conv s2--> (14,32,48)
        --conv s1--> (16,32,48) --conv s1--> (16,32,48)
  bev   (2,96,96)   --conv s2--> (10,48,48) --conv s2--> (14,24,24)
        --conv s1--> (16,24,24) --conv s1--> (16,24,24) --resize--> (16,32,48)

  fused = fuse(image_feat, bev_feat)            # mean or latent-ensemble
  RPN:    3x3 conv -> 1x1 objectness (one logit per anchor)
                   -> 1x1 box deltas (4 per anchor)
  stage2: per-ROI bilinear crop of the fused map (16,P,P) -> fc -> class
          logits (background/vehicle/pedestrian) + box refinement deltas

All activations are leaky ReLU (slope 0.1) so gradients never die, which
keeps the image-side attack objectives well-conditioned everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

from . import arrayio
from . import autodiff as ad
from .boxes import AnchorGrid

FUSION_MODES = ("mean", "lel")


@dataclass(frozen=True)
class DetectorConfig:
    image_size: tuple = (128, 192)
    bev_size: tuple = (2, 96, 96)
    channels: tuple = (10, 14, 16, 16)
    rpn_hidden: int = 16
    anchor_templates: tuple = ((34.0, 19.0), (16.0, 23.0))
    feature_stride: int = 4
    n_classes: int = 3              # background + vehicle + pedestrian
    roi_size: int = 5
    fc_dim: int = 64
    fusion: str = "mean"
    detection_threshold: float = 0.5
    nms_iou: float = 0.45
    top_n: int = 64
    delta_clamp: float = 0.05       # max |box regression delta| at decode
    lidar_filter: bool = True
    lidar_min_points: int = 1

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")

    @property
    def feature_hw(self) -> tuple:
        h, w = self.image_size
        return (h // self.feature_stride, w // self.feature_stride)

    def anchor_grid(self) -> AnchorGrid:
        fh, fw = self.feature_hw
        return AnchorGrid(feat_h=fh, feat_w=fw, stride=self.feature_stride,
                          templates=self.anchor_templates, image_hw=self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DetectorConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["anchor_templates"] = tuple(tuple(t) for t in d["anchor_templates"])
        d["image_size"] = tuple(d["image_size"])
        d["bev_size"] = tuple(d["bev_size"])
        return DetectorConfig(**d)


@dataclass
class DetectorParams:
    """Named float64 weight arrays; the checkpoint file stores float32."""

    arrays: dict = field(default_factory=dict)

    def copy(self) -> "DetectorParams":
        return DetectorParams({k: v.copy() for k, v in self.arrays.items()})

    def quantized(self) -> "DetectorParams":
        """Round-trip through float32: exactly what a checkpoint preserves."""
        return DetectorParams(
            {k: v.astype(np.float32).astype(np.float64) for k, v in self.arrays.items()}
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def allclose(self, other: "DetectorParams", atol=0.0) -> bool:
        if self.arrays.keys() != other.arrays.keys():
            return False
        return all(np.allclose(self.arrays[k], other.arrays[k], atol=atol, rtol=0.0)
                   for k in self.arrays)


def _conv_shapes(config: DetectorConfig):
    c1, c2, c3, c4 = config.channels
    img_in = 3
    bev_in = config.bev_size[0]
    shapes = {}
    for branch, cin in (("img", img_in), ("bev", bev_in)):
        chain = [(cin, c1), (c1, c2), (c2, c3), (c3, c4)]
        for i, (a, b) in enumerate(chain, start=1):
            shapes[f"{branch}_c{i}_w"] = (b, a, 3, 3)
            shapes[f"{branch}_c{i}_b"] = (b,)
    ch = config.channels[-1]
    rh = config.rpn_hidden
    n_templates = len(config.anchor_templates)
    shapes["rpn_conv_w"] = (rh, ch, 3, 3)
    shapes["rpn_conv_b"] = (rh,)
    shapes["rpn_obj_w"] = (n_templates, rh, 1, 1)
    shapes["rpn_obj_b"] = (n_templates,)
    shapes["rpn_reg_w"] = (4 * n_templates, rh, 1, 1)
    shapes["rpn_reg_b"] = (4 * n_templates,)
    flat = ch * config.roi_size * config.roi_size
    shapes["fc_w"] = (flat, config.fc_dim)
    shapes["fc_b"] = (config.fc_dim,)
    shapes["cls_w"] = (config.fc_dim, config.n_classes)
    shapes["cls_b"] = (config.n_classes,)
    shapes["reg_w"] = (config.fc_dim, 4)
    shapes["reg_b"] = (4,)
    return shapes


def init_params(config: DetectorConfig, seed: int) -> DetectorParams:
    """He-style initialization; objectness bias starts at the background prior."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _conv_shapes(config).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            arrays[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    arrays["rpn_obj_b"] += -2.0  # most anchors are background
    return DetectorParams(arrays)


def as_vars(params: DetectorParams, trainable: bool) -> dict:
    make = ad.param if trainable else ad.const
    return {k: make(v) for k, v in params.arrays.items()}


@lru_cache(maxsize=8)
def _bev_resize_matrices(bev_feat_hw: tuple, fused_hw: tuple):
    (bh, bw), (fh, fw) = bev_feat_hw, fused_hw
    return ad.interp_matrix(fh, bh), ad.interp_matrix(fw, bw)


def _branch(pvars: dict, prefix: str, x: "ad.Var") -> "ad.Var":
    strides = (2, 2, 1, 1)
    for i, s in enumerate(strides, start=1):
        x = ad.conv2d(x, pvars[f"{prefix}_c{i}_w"], pvars[f"{prefix}_c{i}_b"],
                      stride=s, pad=1)
        x = ad.leaky_relu(x)
    return x


def image_branch(pvars: dict, image: "ad.Var", config: DetectorConfig) -> "ad.Var":
    """Image (3,H,W) -> feature map on the fused (C, H/4, W/4) grid."""
    return _branch(pvars, "img", image)


def bev_branch(pvars: dict, bev: "ad.Var", config: DetectorConfig) -> "ad.Var":
    """BEV (C,Hb,Wb) -> feature map resampled onto the image feature grid."""
    fb = _branch(pvars, "bev", bev)
    fh, fw = config.feature_hw
    if fb.shape[1:] != (fh, fw):
        ay, ax = _bev_resize_matrices(fb.shape[1:], (fh, fw))
        fb = ad.interp2d(fb, ay, ax)
    return fb


def extract_features(pvars: dict, image: "ad.Var", bev: "ad.Var",
                     config: DetectorConfig):
    """(image_feat, bev_feat), both on the fused (C, H/4, W/4) grid.

    `image` is (3,H,W), `bev` is (C,Hb,Wb); the BEV feature map is resampled
    onto the image feature grid so the two stay projectively aligned.
    """
    return image_branch(pvars, image, config), bev_branch(pvars, bev, config)


def fuse_features(feat_img: "ad.Var", feat_bev: "ad.Var", mode: str,
                  rng: np.random.Generator | None = None,
                  pick: int | None = None) -> "ad.Var":
    """Combine the two modality maps.

    mode "mean": elementwise average.
    mode "lel" (latent ensemble): during training one of {image-only,
    bev-only, mean} is selected uniformly (drawn from `rng`, or forced via
    `pick` in 0..2 when one draw must cover several forward passes); this
    keeps each single modality sufficient on its own.  At inference
    (no rng, no pick) the three ensemble branches are averaged.
    """
    if mode == "mean":
        return (feat_img + feat_bev) * 0.5
    if mode == "lel":
        if pick is None and rng is not None:
            pick = int(rng.integers(3))
        if pick is not None:
            if pick == 0:
                return feat_img
            if pick == 1:
                return feat_bev
            return (feat_img + feat_bev) * 0.5
        mean = (feat_img + feat_bev) * 0.5
        return (feat_img + feat_bev + mean) * (1.0 / 3.0)
    raise ValueError(f"unknown fusion mode {mode!r}")


def rpn_forward(pvars: dict, fused: "ad.Var", config: DetectorConfig):
    """(objectness_logits (A,), box_deltas (A,4)) in anchor-id order."""
    h = ad.leaky_relu(ad.conv2d(fused, pvars["rpn_conv_w"], pvars["rpn_conv_b"],
                                stride=1, pad=1))
    n_t = len(config.anchor_templates)
    obj = ad.conv2d(h, pvars["rpn_obj_w"], pvars["rpn_obj_b"], stride=1, pad=0)
    obj = ad.reshape(obj, (-1,))  # (T,hf,wf) flattens template-major
    reg = ad.conv2d(h, pvars["rpn_reg_w"], pvars["rpn_reg_b"], stride=1, pad=0)
    fh, fw = config.feature_hw
    reg = ad.reshape(reg, (n_t, 4, fh * fw))
    reg = ad.transpose(reg, (0, 2, 1))
    reg = ad.reshape(reg, (n_t * fh * fw, 4))
    return obj, reg


def roi_crop(fused: "ad.Var", box, config: DetectorConfig) -> "ad.Var":
    """Bilinear ROI-align crop of the fused map for one image-space box."""
    p = config.roi_size
    s = config.feature_stride
    fh, fw = config.feature_hw
    x1, y1, x2, y2 = box
    cy = (np.asarray([y1 + (i + 0.5) * (y2 - y1) / p for i in range(p)]) / s) - 0.5
    cx = (np.asarray([x1 + (j + 0.5) * (x2 - x1) / p for j in range(p)]) / s) - 0.5
    ay = ad.interp_matrix(p, fh, centers=cy)
    ax = ad.interp_matrix(p, fw, centers=cx)
    return ad.interp2d(fused, ay, ax)


def stage2_forward(pvars: dict, fused: "ad.Var", boxes, config: DetectorConfig):
    """Classify and refine each proposal box.

    Returns (class_logits (N,n_classes) Var, deltas (N,4) Var).  Boxes are
    constants; gradients flow into the fused features (and the weights).
    """
    crops = [ad.reshape(roi_crop(fused, b, config), (1, -1)) for b in boxes]
    flat = ad.concat(crops, axis=0) if len(crops) > 1 else crops[0]
    h = ad.leaky_relu(ad.add(ad.matmul(flat, pvars["fc_w"]), pvars["fc_b"]))
    logits = ad.add(ad.matmul(h, pvars["cls_w"]), pvars["cls_b"])
    deltas = ad.add(ad.matmul(h, pvars["reg_w"]), pvars["reg_b"])
    return logits, deltas


def save_checkpoint(path, params: DetectorParams, config: DetectorConfig,
                    meta: dict | None = None) -> None:
    arrays = {k: v.astype(np.float32) for k, v in params.arrays.items()}
    arrayio.save_arrays(path, arrays,
                        {"config": config.to_dict(), "extra": meta or {}})


def load_checkpoint(path):
    """Returns (params, config, extra_meta); float32 weights upcast to float64."""
    arrays, meta = arrayio.load_arrays(path)
    params = DetectorParams({k: v.astype(np.float64) for k, v in arrays.items()})
    config = DetectorConfig.from_dict(meta["config"])
    return params, config, meta.get("extra", {})
