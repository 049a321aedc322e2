"""Two-branch saliency / region-proposal model at desk scale.

Classification branch: a three-level conv backbone with a top-down lateral
merge gives ``Q`` feature maps at a quarter of the input resolution; a 1x1
head turns those into ``K`` saliency maps whose log-sum-exp pooling gives the
image-level logits.

Detection branch: RoiAlign features of every anchor feed a shared hidden
layer and two regressors (per-class confidence and box deltas). A
straight-through Gumbel-Softmax picks one refined box per class, the image is
cropped there, and a small conv classifier scores each crop for its class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..regions import AnchorSet, RefinedProposal, Box, apply_deltas_tensor, crop_resize, generate_anchors, roi_align
from ..sampling import CategoricalSample, gumbel_noise, st_gumbel_softmax
from ..tensor import Tensor

PARAM_GROUPS = ("backbone", "saliency", "det.hidden", "det.conf", "det.delta", "crop")
CLS_GROUPS = ("backbone", "saliency")


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (128, 128)
    num_classes: int = 4
    channels: tuple[int, int, int] = (16, 32, 32)
    fpn_channels: int = 32
    lse_r: float = 1.0
    slope: float = 0.1
    anchor_sizes: tuple[int, ...] = (16, 32, 64)
    anchor_strides: tuple[int, ...] = (8, 16, 32)
    anchor_ratios: tuple[float, ...] = (1.0,)
    roi_size: tuple[int, int] = (3, 3)
    det_hidden: int = 64
    # refinement limits: centre shift as a fraction of the anchor, log of the scale factor
    max_shift: float = 0.5
    max_log_scale: float = 0.7
    crop_size: tuple[int, int] = (64, 64)
    crop_channels: tuple[int, int, int, int] = (8, 16, 32, 32)

    def __post_init__(self):
        for name in ("image_size", "channels", "anchor_sizes", "anchor_strides", "anchor_ratios", "roi_size", "crop_size", "crop_channels"):
            setattr(self, name, tuple(getattr(self, name)))
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValueError(f"image size {self.image_size} must be divisible by 8")

    @property
    def map_size(self) -> tuple[int, int]:
        return self.image_size[0] // 4, self.image_size[1] // 4


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def lse_pool(maps: Tensor, r: float) -> Tensor:
    """Mean-normalised log-sum-exp over the last two axes.

    ``(1/r) * log(mean(exp(r * s)))``: equals the mean for r -> 0 and
    approaches the max as r grows.
    """
    lead = maps.shape[:-2]
    n = maps.shape[-2] * maps.shape[-1]
    flat = maps.reshape(lead + (n,))
    return (T.logsumexp(flat * r, axis=-1) - math.log(n)) * (1.0 / r)


@dataclass
class DetOutput:
    conf_logits: Tensor  # (B, K, N)
    boxes: Tensor  # (B, K, N, 4) refined proposals
    sample: CategoricalSample  # over N, leading dims (B, K)
    selected: Tensor  # (B, K, 4)
    z_logit: Tensor  # (B, K)

    def proposals(self, b: int = 0) -> list[RefinedProposal]:
        conf = T._sigmoid(self.conf_logits.data[b])
        boxes = self.boxes.data[b]
        k, n = conf.shape
        return [
            RefinedProposal(i, ci, float(conf[ci, i]), Box.from_array(boxes[ci, i]))
            for ci in range(k)
            for i in range(n)
        ]

    def selected_boxes(self, b: int = 0) -> list[Box]:
        return [Box.from_array(v) for v in self.selected.data[b]]


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * gain * math.sqrt(2.0 / fan_in)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    anchors: AnchorSet | None = None

    def __post_init__(self):
        c = self.config
        if self.anchors is None:
            self.anchors = generate_anchors(c.image_size, c.anchor_sizes, c.anchor_strides, c.anchor_ratios)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> Model:
        rng = np.random.default_rng(seed)
        c1, c2, c3 = config.channels
        q, k = config.fpn_channels, config.num_classes
        roi_dim = q * config.roi_size[0] * config.roi_size[1]
        hid = config.det_hidden
        k1, k2, k3, k4 = config.crop_channels
        shapes = {
            "backbone.conv1.w": ((c1, 3, 3, 3), 27),
            "backbone.conv1.b": ((c1,), 0),
            "backbone.conv2.w": ((c2, c1, 3, 3), 9 * c1),
            "backbone.conv2.b": ((c2,), 0),
            "backbone.conv3.w": ((c3, c2, 3, 3), 9 * c2),
            "backbone.conv3.b": ((c3,), 0),
            "backbone.lateral.w": ((q, c2, 1, 1), c2),
            "backbone.lateral.b": ((q,), 0),
            "backbone.top.w": ((q, c3, 1, 1), c3),
            "backbone.top.b": ((q,), 0),
            "saliency.w": ((k, q, 1, 1), q),
            "saliency.b": ((k,), 0),
            "det.hidden.w": ((roi_dim, hid), roi_dim),
            "det.hidden.b": ((hid,), 0),
            "det.conf.w": ((hid, k), hid),
            "det.conf.b": ((k,), 0),
            "det.delta.w": ((hid, 4 * k), hid),
            "det.delta.b": ((4 * k,), 0),
            "crop.conv1.w": ((k1, 3, 3, 3), 27),
            "crop.conv1.b": ((k1,), 0),
            "crop.conv2.w": ((k2, k1, 3, 3), 9 * k1),
            "crop.conv2.b": ((k2,), 0),
            "crop.conv3.w": ((k3, k2, 3, 3), 9 * k2),
            "crop.conv3.b": ((k3,), 0),
            "crop.conv4.w": ((k4, k3, 3, 3), 9 * k3),
            "crop.conv4.b": ((k4,), 0),
            "crop.fc.w": ((k4, k), k4),
            "crop.fc.b": ((k,), 0),
        }
        params = {}
        for name, (shape, fan_in) in shapes.items():
            if fan_in == 0:
                data = np.zeros(shape)
            elif name == "det.delta.w":
                # start with proposals equal to their anchors
                data = _he(rng, shape, fan_in, gain=0.01)
            else:
                data = _he(rng, shape, fan_in)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    # -- parameters -----------------------------------------------------------
    def group(self, prefix: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith(prefix + ".") or n == prefix]

    def parameters(self, groups=PARAM_GROUPS) -> list[Tensor]:
        return [p for g in groups for p in self.group(g)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mismatched = [
            f"{n}: checkpoint {None if n not in state else state[n].shape} vs model {p.shape}"
            for n, p in self.params.items()
            if n not in state or state[n].shape != p.shape
        ]
        extra = sorted(set(state) - set(self.params))
        if mismatched or extra:
            raise ValueError("incompatible checkpoint: " + "; ".join(mismatched + [f"unexpected {n}" for n in extra]))
        for n, p in self.params.items():
            p.data = np.array(state[n], dtype=np.float64)

    def save(self, path) -> None:
        T.save_checkpoint(path, self.params)

    def load(self, path) -> None:
        self.load_state(T.load_checkpoint(path))

    # -- forward ------------------------------------------------------------------
    def _conv(self, x: Tensor, name: str, pad: int = 1) -> Tensor:
        p = self.params
        return T.conv2d(x, p[name + ".w"], p[name + ".b"], stride=1, pad=pad)

    def features(self, images: Tensor) -> Tensor:
        """``x_FPN``: ``[B, Q, H/4, W/4]``."""
        s = self.config.slope
        x = avg_pool2(images)
        c1 = avg_pool2(T.leaky_relu(self._conv(x, "backbone.conv1"), s))
        c2 = T.leaky_relu(self._conv(c1, "backbone.conv2"), s)
        c3 = T.leaky_relu(self._conv(avg_pool2(c2), "backbone.conv3"), s)
        merged = self._conv(c2, "backbone.lateral", pad=0) + T.upsample_nearest(self._conv(c3, "backbone.top", pad=0), 2)
        return T.leaky_relu(merged, s)

    def saliency(self, feats: Tensor) -> Tensor:
        return self._conv(feats, "saliency", pad=0)

    def forward_cls(self, images) -> tuple[Tensor, Tensor, Tensor]:
        """Returns ``(x_S [B,K,h,w], y_logit [B,K], x_FPN)``."""
        images = _batched(images)
        feats = self.features(images)
        sal = self.saliency(feats)
        return sal, lse_pool(sal, self.config.lse_r), feats

    def det_heads(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Per-anchor confidence logits ``[B,K,N]`` and refined boxes ``[B,K,N,4]``."""
        c = self.config
        p = self.params
        b = feats.shape[0]
        n = len(self.anchors)
        rois = roi_align(feats, self.anchors.boxes, c.roi_size, spatial_scale=0.25)
        rois = rois.reshape(b, n, -1)
        hidden = T.leaky_relu(rois @ p["det.hidden.w"] + p["det.hidden.b"], c.slope)
        conf = (hidden @ p["det.conf.w"] + p["det.conf.b"]).transpose(0, 2, 1)
        raw = (hidden @ p["det.delta.w"] + p["det.delta.b"]).reshape(b, n, c.num_classes, 4)
        limits = np.array([c.max_shift, c.max_shift, c.max_log_scale, c.max_log_scale])
        deltas = T.tanh(raw) * limits
        boxes = apply_deltas_tensor(self.anchors.boxes, deltas.transpose(0, 2, 1, 3), c.image_size)
        return conf, boxes

    def crop_logits(self, crops: Tensor) -> Tensor:
        """Crop classifier: ``[M, 3, H_f, W_f]`` -> ``[M, K]``."""
        s = self.config.slope
        x = avg_pool2(crops)
        x = avg_pool2(T.leaky_relu(self._conv(x, "crop.conv1"), s))
        x = avg_pool2(T.leaky_relu(self._conv(x, "crop.conv2"), s))
        x = T.leaky_relu(self._conv(x, "crop.conv3"), s)
        x = T.leaky_relu(self._conv(x, "crop.conv4"), s)
        pooled = x.mean(axis=(2, 3))
        return pooled @ self.params["crop.fc.w"] + self.params["crop.fc.b"]

    def forward_det(
        self,
        images,
        feats: Tensor,
        tau: float,
        rng: np.random.Generator | None = None,
        noise: np.ndarray | None = None,
    ) -> DetOutput:
        images = _batched(images)
        k = self.config.num_classes
        conf, boxes = self.det_heads(feats)
        if noise is None:
            noise = gumbel_noise(rng, conf.shape)
        sample = st_gumbel_softmax(conf, tau, noise=noise)
        b, _, n = conf.shape
        selected = (boxes * sample.hard.reshape(b, k, n, 1)).sum(axis=2)
        crops = crop_resize(images, selected, self.config.crop_size)
        logits = self.crop_logits(crops.reshape((b * k,) + crops.shape[2:])).reshape(b, k, k)
        z = (logits * np.eye(k)).sum(axis=-1)
        return DetOutput(conf, boxes, sample, selected, z)


def _batched(images) -> Tensor:
    images = T.as_tensor(images)
    return images.reshape((1,) + images.shape) if images.ndim == 3 else images
