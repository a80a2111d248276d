"""Typed records and protocols shared across modules."""

from typing import Any, Dict, List, Optional, TypedDict


class LayerInfo(TypedDict):
    """One row of a model's parameter inventory."""

    name: str
    shape: List[int]
    count: int


class LossRecord(TypedDict, total=False):
    """Losses of one training iteration."""

    iteration: int
    hard: float
    soft: float
    bbox: float
    obj: float
    cls: float
    total: float
    grad_norm: float


class ManifestEntry(TypedDict):
    """One sample of a dataset manifest."""

    image_id: str
    image: str
    annotation: str
    split: str
    provenance: str
    origin_id: str


class ErrorEnvelope(TypedDict):
    """Machine-readable error written to stderr by the CLI."""

    code: str
    message: str
    context: Dict[str, Any]


class RunConfig:
    """Type definition for the resolved command-line configuration."""

    command: str = ""
    config: Optional[str] = None
    verbose: bool = False
    seed: int = 0
    out: Optional[str] = None

    # make-dataset
    sigma: float = 127.5
    num_images: int = 200
    size: int = 64
    wall_ratio: float = 0.5
    import_dir: Optional[str] = None
    no_expand: bool = False
    image_format: str = "png"

    # model
    preset: str = "nano"
    vit: str = "off"
    vit_heads: int = 4
    vit_layers: int = 1
    vit_patch: int = 1
    no_pos_embed: bool = False
    base_channels: int = 16
    base_depth: int = 1
    num_classes: int = 1
    dtype: str = "float64"

    # train
    dataset: Optional[str] = None
    no_aug: bool = False
    kd: bool = False
    teacher_logits: Optional[str] = None
    iters: int = 200
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    clip_norm: Optional[float] = None
    batch_size: int = 8
    log_every: int = 10
    lambda_bbox: float = 0.5
    lambda_obj: float = 0.5
    lambda_cls: float = 0.5
    kd_mode: str = "additive"
    blend: float = 0.5
    kd_normalization: str = "sum"
    temperature: float = 1.0

    # dump-logits / eval / eval-video / infer
    checkpoint: Optional[str] = None
    split: str = "train"
    predictions: Optional[str] = None
    label: Optional[str] = None
    iou: float = 0.5
    score_thresh: float = 0.3
    nms_iou: float = 0.45
    frames: Optional[str] = None
    gt_timeline: Optional[str] = None
    image: Optional[str] = None
    annotated: Optional[str] = None
