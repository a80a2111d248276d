"""Anchor-free YOLOX-style detector: CSP backbone, SPP, optional ViT block, PAFPN neck, decoupled heads."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from sonar_kd.core import ops
from sonar_kd.core.autodiff import Tensor, no_grad
from sonar_kd.core.boxes import DetBox, iou_xywh
from sonar_kd.core.nn import PRIOR_PROB, BaseConv, CSPLayer, Module, PredConv, SPPBottleneck
from sonar_kd.core.serialization import load_named_tensors, save_named_tensors
from sonar_kd.core.vit import ViTBlock, ViTConfig
from sonar_kd.errors import ConfigError, FormatError, MissingFileError, ShapeError
from sonar_kd.protocols import LayerInfo

logger = logging.getLogger(__name__)

DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_SCORE_THRESH = 0.3
DEFAULT_NMS_IOU = 0.45
CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.kdt"

# (width_mult, depth_mult) of the YOLOX family members used here.
PRESETS: Dict[str, Tuple[float, float]] = {
    "nano": (0.25, 0.33),
    "l": (1.0, 1.0),
}

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a detector bit-for-bit."""

    width_mult: float = 1.0
    depth_mult: float = 1.0
    num_classes: int = 1
    strides: Tuple[int, ...] = DEFAULT_STRIDES
    vit: Optional[ViTConfig] = None
    input_size: Tuple[int, int] = (640, 640)
    base_channels: int = 64
    base_depth: int = 3
    dtype: str = "float64"
    seed: int = 0
    act: str = "silu"

    def channels(self, multiple: int) -> int:
        return int(self.base_channels * self.width_mult * multiple)

    def depth(self, multiple: int = 1) -> int:
        return max(int(round(self.base_depth * self.depth_mult)), 1) * multiple

    @property
    def np_dtype(self) -> Any:
        return _DTYPES[self.dtype]

    def validate(self) -> None:
        if self.width_mult <= 0 or self.depth_mult <= 0:
            raise ConfigError(
                "width and depth multipliers must be positive",
                {"width_mult": self.width_mult, "depth_mult": self.depth_mult},
            )
        if self.channels(1) < 1:
            raise ConfigError(
                f"width {self.width_mult} x base {self.base_channels} leaves a stage without channels",
                {"width_mult": self.width_mult, "base_channels": self.base_channels},
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", {"num_classes": self.num_classes})
        if self.dtype not in _DTYPES:
            raise ConfigError(f"unsupported dtype {self.dtype!r}", {"dtype": self.dtype})
        s = tuple(self.strides)
        if len(s) != 3 or s[0] < 4 or s[0] & (s[0] - 1) or s[1] != 2 * s[0] or s[2] != 2 * s[1]:
            raise ConfigError(
                "strides must be three doublings of a power of two >= 4, e.g. (8, 16, 32)",
                {"strides": list(s)},
            )
        height, width = self.input_size
        if height % s[-1] or width % s[-1]:
            raise ConfigError(
                f"input size {height}x{width} is not divisible by stride {s[-1]}",
                {"input_size": [height, width], "max_stride": s[-1]},
            )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["strides"] = list(self.strides)
        data["input_size"] = list(self.input_size)
        data["vit"] = self.vit.to_dict() if self.vit is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        values = dict(data)
        values["strides"] = tuple(values.get("strides", DEFAULT_STRIDES))
        values["input_size"] = tuple(values.get("input_size", (640, 640)))
        vit = values.get("vit")
        values["vit"] = ViTConfig.from_dict(vit) if vit else None
        try:
            return cls(**values)
        except TypeError as exc:
            raise FormatError(f"invalid model spec: {exc}", {"keys": sorted(values)}) from exc


def preset(name: str, **overrides: Any) -> ModelSpec:
    """A ModelSpec for a named preset (``nano`` or ``l``) with optional field overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}", {"preset": name, "choices": sorted(PRESETS)})
    width, depth = PRESETS[name]
    return replace(ModelSpec(width_mult=width, depth_mult=depth), **overrides)


@dataclass
class ScaleLogits:
    cls: Tensor
    reg: Tensor
    obj: Tensor


@dataclass
class FpnLogits:
    """Raw head outputs for the three pyramid scales, finest first."""

    scales: List[ScaleLogits] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.scales[0].cls.shape[0]

    def arrays(self) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        return [(s.cls.data, s.reg.data, s.obj.data) for s in self.scales]

    def detach(self) -> "FpnLogits":
        return FpnLogits([ScaleLogits(s.cls.detach(), s.reg.detach(), s.obj.detach()) for s in self.scales])

    def image(self, index: int) -> "FpnLogits":
        """Logits of one batch element, keeping a leading dimension of 1."""
        return FpnLogits.from_arrays([tuple(a[index : index + 1] for a in triple) for triple in self.arrays()])

    @classmethod
    def from_arrays(cls, arrays: Sequence[Sequence[np.ndarray]], dtype: Any = None) -> "FpnLogits":
        return cls([ScaleLogits(*(Tensor(np.array(a, dtype=dtype)) for a in triple)) for triple in arrays])

    @classmethod
    def stack(cls, items: Sequence["FpnLogits"], dtype: Any = None) -> "FpnLogits":
        """Concatenate single- or multi-image logits along the batch axis."""
        per_item = [item.arrays() for item in items]
        merged = [
            tuple(np.concatenate([arrs[s][k] for arrs in per_item], axis=0) for k in range(3)) for s in range(len(per_item[0]))
        ]
        return cls.from_arrays(merged, dtype=dtype)


class Backbone(Module):
    """CSP-Darknet style feature extractor; the last stage ends in the SPP bottleneck."""

    def __init__(self, rng: np.random.Generator, spec: ModelSpec) -> None:
        dt, act = spec.np_dtype, spec.act
        base = spec.channels(1)
        self.stem = BaseConv(rng, 3, base, 3, stride=2, act=act, dtype=dt)
        self.early = []
        channels = base
        for _ in range(int(math.log2(spec.strides[0])) - 2):
            self.early.append(BaseConv(rng, channels, spec.channels(2), 3, stride=2, act=act, dtype=dt))
            self.early.append(CSPLayer(rng, spec.channels(2), spec.channels(2), spec.depth(), act=act, dtype=dt))
            channels = spec.channels(2)
        self.dark3_down = BaseConv(rng, channels, spec.channels(4), 3, stride=2, act=act, dtype=dt)
        self.dark3 = CSPLayer(rng, spec.channels(4), spec.channels(4), spec.depth(3), act=act, dtype=dt)
        self.dark4_down = BaseConv(rng, spec.channels(4), spec.channels(8), 3, stride=2, act=act, dtype=dt)
        self.dark4 = CSPLayer(rng, spec.channels(8), spec.channels(8), spec.depth(3), act=act, dtype=dt)
        self.dark5_down = BaseConv(rng, spec.channels(8), spec.channels(16), 3, stride=2, act=act, dtype=dt)
        self.dark5 = CSPLayer(rng, spec.channels(16), spec.channels(16), spec.depth(), shortcut=False, act=act, dtype=dt)
        self.spp = SPPBottleneck(rng, spec.channels(16), spec.channels(16), act=act, dtype=dt)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        x = self.stem(x)
        for layer in self.early:
            x = layer(x)
        c3 = self.dark3(self.dark3_down(x))
        c4 = self.dark4(self.dark4_down(c3))
        c5 = self.spp(self.dark5(self.dark5_down(c4)))
        return c3, c4, c5


class PAFPN(Module):
    """Top-down then bottom-up path aggregation over the three backbone outputs."""

    def __init__(self, rng: np.random.Generator, spec: ModelSpec) -> None:
        dt, act, n = spec.np_dtype, spec.act, spec.depth()
        c4, c8, c16 = spec.channels(4), spec.channels(8), spec.channels(16)
        self.lateral_conv0 = BaseConv(rng, c16, c8, 1, act=act, dtype=dt)
        self.c3_p4 = CSPLayer(rng, 2 * c8, c8, n, shortcut=False, act=act, dtype=dt)
        self.reduce_conv1 = BaseConv(rng, c8, c4, 1, act=act, dtype=dt)
        self.c3_p3 = CSPLayer(rng, 2 * c4, c4, n, shortcut=False, act=act, dtype=dt)
        self.bu_conv2 = BaseConv(rng, c4, c4, 3, stride=2, act=act, dtype=dt)
        self.c3_n3 = CSPLayer(rng, 2 * c4, c8, n, shortcut=False, act=act, dtype=dt)
        self.bu_conv1 = BaseConv(rng, c8, c8, 3, stride=2, act=act, dtype=dt)
        self.c3_n4 = CSPLayer(rng, 2 * c8, c16, n, shortcut=False, act=act, dtype=dt)

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        fpn_out0 = self.lateral_conv0(c5)
        f_out0 = self.c3_p4(ops.concat([ops.upsample_nearest(fpn_out0), c4], axis=1))
        fpn_out1 = self.reduce_conv1(f_out0)
        pan_out2 = self.c3_p3(ops.concat([ops.upsample_nearest(fpn_out1), c3], axis=1))
        pan_out1 = self.c3_n3(ops.concat([self.bu_conv2(pan_out2), fpn_out1], axis=1))
        pan_out0 = self.c3_n4(ops.concat([self.bu_conv1(pan_out1), fpn_out0], axis=1))
        return pan_out2, pan_out1, pan_out0


class HeadLevel(Module):
    """Decoupled head for one scale: shared 1x1 stem, then class and regression branches."""

    def __init__(self, rng: np.random.Generator, in_channels: int, spec: ModelSpec) -> None:
        dt, act = spec.np_dtype, spec.act
        hidden = spec.channels(4)
        prior_bias = -math.log((1.0 - PRIOR_PROB) / PRIOR_PROB)
        self.stem = BaseConv(rng, in_channels, hidden, 1, act=act, dtype=dt)
        self.cls_convs = [BaseConv(rng, hidden, hidden, 3, act=act, dtype=dt) for _ in range(2)]
        self.reg_convs = [BaseConv(rng, hidden, hidden, 3, act=act, dtype=dt) for _ in range(2)]
        self.cls_pred = PredConv(rng, hidden, spec.num_classes, prior_bias, dt)
        self.reg_pred = PredConv(rng, hidden, 4, 0.0, dt)
        self.obj_pred = PredConv(rng, hidden, 1, prior_bias, dt)

    def forward(self, x: Tensor) -> ScaleLogits:
        x = self.stem(x)
        cls_feat, reg_feat = x, x
        for conv in self.cls_convs:
            cls_feat = conv(cls_feat)
        for conv in self.reg_convs:
            reg_feat = conv(reg_feat)
        return ScaleLogits(self.cls_pred(cls_feat), self.reg_pred(reg_feat), self.obj_pred(reg_feat))


class Model(Module):
    def __init__(self, spec: ModelSpec) -> None:
        spec.validate()
        rng = np.random.default_rng(spec.seed)
        self.spec = spec
        self.backbone = Backbone(rng, spec)
        self.vit: Optional[ViTBlock] = None
        if spec.vit is not None:
            grid = (spec.input_size[0] // spec.strides[-1], spec.input_size[1] // spec.strides[-1])
            self.vit = ViTBlock(rng, spec.vit, spec.channels(16), grid, spec.np_dtype)
        self.neck = PAFPN(rng, spec)
        self.heads = [HeadLevel(rng, spec.channels(m), spec) for m in (4, 8, 16)]

    def forward(self, images: Tensor) -> FpnLogits:
        return forward(self, images)

    def inventory(self) -> List[LayerInfo]:
        return [LayerInfo(name=name, shape=list(p.shape), count=p.size) for name, p in self.named_parameters()]


def build_model(spec: ModelSpec) -> Model:
    """Build a detector with parameters drawn deterministically from ``spec.seed``."""
    model = Model(spec)
    logger.info(
        "Built detector (width %.2f, depth %.2f, vit %s): %d parameters",
        spec.width_mult,
        spec.depth_mult,
        "on" if spec.vit is not None else "off",
        model.num_parameters(),
    )
    return model


def forward(model: Model, images: Tensor) -> FpnLogits:
    """Run the network on ``images[N, 3, H, W]`` scaled to [0, 1]."""
    spec = model.spec
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError("images must be [N, 3, H, W]", {"shape": list(images.shape)})
    height, width = images.shape[2:]
    if height % spec.strides[-1] or width % spec.strides[-1]:
        raise ShapeError(
            f"input {height}x{width} is not divisible by stride {spec.strides[-1]}",
            {"height": height, "width": width, "max_stride": spec.strides[-1]},
        )
    if images.dtype != spec.np_dtype:
        images = Tensor(images.data.astype(spec.np_dtype))
    c3, c4, c5 = model.backbone(images)
    if model.vit is not None:
        c5 = model.vit(c5)
    features = model.neck(c3, c4, c5)
    return FpnLogits([head(f) for head, f in zip(model.heads, features)])


def to_input(images: Sequence[np.ndarray], dtype: Any = np.float64) -> Tensor:
    """Stack 8-bit images (HxW or HxWx3) into a ``[N, 3, H, W]`` tensor in [0, 1]; gray is replicated."""
    batch = []
    for image in images:
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError("images must be HxW or HxWx3", {"shape": list(arr.shape)})
        batch.append(arr.transpose(2, 0, 1))
    return Tensor(np.stack(batch).astype(dtype) / 255.0)


def decode(logits: FpnLogits, spec: ModelSpec, score_thresh: float = DEFAULT_SCORE_THRESH) -> List[List[DetBox]]:
    """Turn raw logits into scored boxes, one candidate per cell (its best class)."""
    per_image: List[List[DetBox]] = [[] for _ in range(logits.batch_size)]
    for stride, (cls, reg, obj) in zip(spec.strides, logits.arrays()):
        _, _, h, w = reg.shape
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        cls_prob = ops.stable_sigmoid(cls)
        best = cls_prob.argmax(axis=1)
        scores = ops.stable_sigmoid(obj[:, 0]) * np.take_along_axis(cls_prob, best[:, None], axis=1)[:, 0]
        with np.errstate(over="ignore"):
            cx = (reg[:, 0] + gx) * stride
            cy = (reg[:, 1] + gy) * stride
            bw = np.exp(reg[:, 2]) * stride
            bh = np.exp(reg[:, 3]) * stride
        for n in range(reg.shape[0]):
            ys, xs = np.nonzero(scores[n] >= score_thresh)
            for y, x in zip(ys, xs):
                per_image[n].append(
                    DetBox(
                        class_id=int(best[n, y, x]),
                        score=float(scores[n, y, x]),
                        cx=float(cx[n, y, x]),
                        cy=float(cy[n, y, x]),
                        w=float(bw[n, y, x]),
                        h=float(bh[n, y, x]),
                    )
                )
    return per_image


def _nms_key(box: DetBox) -> Tuple[float, float, float, float, float, int]:
    return (-box.score, box.cx, box.cy, box.w, box.h, box.class_id)


def nms(boxes: Sequence[DetBox], iou_thresh: float = DEFAULT_NMS_IOU) -> List[DetBox]:
    """Greedy per-class suppression; surviving same-class pairs overlap with IoU < ``iou_thresh``."""
    if not 0.0 < iou_thresh < 1.0:
        raise ConfigError("NMS IoU threshold must lie in (0, 1)", {"iou_thresh": iou_thresh})
    kept: List[DetBox] = []
    for box in sorted(boxes, key=_nms_key):
        xywh = box.to_xywh()
        if all(k.class_id != box.class_id or iou_xywh(k.to_xywh(), xywh) < iou_thresh for k in kept):
            kept.append(box)
    return kept


def predict(
    model: Model,
    images: Union[Tensor, Sequence[np.ndarray]],
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_iou: float = DEFAULT_NMS_IOU,
) -> List[List[DetBox]]:
    """forward, decode and nms without recording a graph."""
    batch = images if isinstance(images, Tensor) else to_input(images, model.spec.np_dtype)
    with no_grad():
        logits = forward(model, batch)
    return [nms(boxes, nms_iou) for boxes in decode(logits, model.spec, score_thresh)]


def save_checkpoint(model: Model, directory: Union[str, Path]) -> Path:
    """Write ``manifest.json`` (spec, seed, format version) and ``weights.kdt`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": model.spec.seed,
        "spec": model.spec.to_dict(),
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_named_tensors(directory / WEIGHTS_NAME, model.state_dict())
    logger.info("Saved checkpoint to %s", directory)
    return directory


def read_checkpoint_spec(directory: Union[str, Path]) -> ModelSpec:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingFileError(f"checkpoint manifest not found: {manifest_path}", {"path": str(manifest_path)})
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}", {"path": str(manifest_path)}) from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            "unsupported checkpoint format version",
            {"expected": CHECKPOINT_FORMAT_VERSION, "got": manifest.get("format_version")},
        )
    return ModelSpec.from_dict(manifest["spec"])


def load_checkpoint(directory: Union[str, Path]) -> Model:
    spec = read_checkpoint_spec(directory)
    model = Model(spec)
    model.load_state_dict(load_named_tensors(Path(directory) / WEIGHTS_NAME))
    logger.debug("Loaded checkpoint from %s", directory)
    return model
