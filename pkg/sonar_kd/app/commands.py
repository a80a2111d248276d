"""One function per CLI subcommand. Each takes the resolved RunConfig and a RichDisplay."""

import csv
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from sonar_kd.core.boxes import DetBox, GTBox
from sonar_kd.core.config import write_snapshot
from sonar_kd.core.dataaug import (
    Sample,
    augment_dataset,
    import_samples,
    list_images,
    load_dataset,
    load_image,
    read_annotations,
    resize,
    resize_image,
    save_dataset,
    split_dataset,
    synth_sonar,
)
from sonar_kd.core.detector import Model, build_model, load_checkpoint, predict, preset
from sonar_kd.core.distill import KDWeights
from sonar_kd.core.evalmetrics import (
    EvalReport,
    FrameEval,
    evaluate,
    match,
    read_predictions,
    read_timeline,
    report,
    report_to_csv,
    report_to_json,
    report_to_text,
    timeline_frame_eval,
    write_predictions,
)
from sonar_kd.core.logit_store import LogitStore, dump_teacher_logits, spec_hash
from sonar_kd.core.optim import SGDConfig
from sonar_kd.core.train import KDConfig, TrainConfig, train
from sonar_kd.core.vit import ViTConfig
from sonar_kd.errors import DatasetError, FormatError
from sonar_kd.protocols import LossRecord, RunConfig
from sonar_kd.ui.display import RichDisplay

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "hard", "soft", "bbox", "obj", "cls", "total", "grad_norm")
BOX_COLOR = (255, 64, 64)


def _split_counts(samples: Sequence[Sample]) -> Dict[str, Dict[str, int]]:
    counts: Dict[str, Dict[str, int]] = {}
    for split in ("train", "val", "test"):
        per_split = Counter(s.provenance for s in samples if s.split == split)
        counts[split] = dict(per_split)
    return counts


def make_dataset(cfg: RunConfig, ui: RichDisplay) -> None:
    if cfg.import_dir:
        samples = import_samples(cfg.import_dir, cfg.size)
    else:
        samples = synth_sonar(cfg.seed, cfg.num_images, cfg.size, cfg.wall_ratio)
    splits = split_dataset(samples, cfg.seed)
    assigned = [s for split in ("train", "val", "test") for s in splits[split]]
    if not cfg.no_expand:
        # Variants stay in their origin's split.
        assigned = augment_dataset(assigned, cfg.sigma, cfg.seed)
    assert cfg.out is not None
    save_dataset(assigned, cfg.out, cfg.image_format)
    write_snapshot(cfg, cfg.out)
    ui.show_dataset_summary(_split_counts(assigned), cfg.out)


def _input_size(samples: Sequence[Sample]) -> Tuple[int, int]:
    sizes = {(s.height, s.width) for s in samples}
    if len(sizes) != 1:
        raise DatasetError("training images must share one size", {"sizes": sorted(list(size) for size in sizes)})
    return sizes.pop()


def write_loss_log(path: Path, losses: Sequence[LossRecord]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in losses:
            writer.writerow({key: record.get(key, "") for key in LOSS_COLUMNS})


def run_train(cfg: RunConfig, ui: RichDisplay) -> None:
    assert cfg.dataset is not None and cfg.out is not None
    samples = load_dataset(cfg.dataset, split="train")
    if not samples:
        raise DatasetError("the dataset has no training split", {"dataset": cfg.dataset})
    vit = None
    if cfg.vit == "on":
        vit = ViTConfig(
            num_heads=cfg.vit_heads,
            num_encoder_layers=cfg.vit_layers,
            patch_size=cfg.vit_patch,
            use_positional_embedding=not cfg.no_pos_embed,
        )
    spec = preset(
        cfg.preset,
        vit=vit,
        input_size=_input_size(samples),
        base_channels=cfg.base_channels,
        base_depth=cfg.base_depth,
        num_classes=cfg.num_classes,
        dtype=cfg.dtype,
        seed=cfg.seed,
    )
    if cfg.kd and not cfg.no_aug:
        logger.info("Offline distillation reuses stored teacher logits, so online augmentation is off")
    train_cfg = TrainConfig(
        iters=cfg.iters,
        batch_size=cfg.batch_size,
        sgd=SGDConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm),
        seed=cfg.seed,
        augment=not (cfg.no_aug or cfg.kd),
        log_every=cfg.log_every,
    )
    store: Optional[LogitStore] = None
    kd: Optional[KDConfig] = None
    if cfg.kd:
        assert cfg.teacher_logits is not None
        store = LogitStore(cfg.teacher_logits, expected_hash=spec_hash(spec))
        weights = KDWeights(
            bbox=cfg.lambda_bbox,
            obj=cfg.lambda_obj,
            cls=cfg.lambda_cls,
            mode=cfg.kd_mode,
            blend=cfg.blend,
            normalization=cfg.kd_normalization,
            temperature=cfg.temperature,
        )
        kd = KDConfig(weights=weights, mode="offline", store=store)

    model = build_model(spec)
    if cfg.verbose:
        ui.show_inventory(model.inventory())
    out = Path(cfg.out)
    try:
        with ui.training_progress(train_cfg.iters) as progress:
            result = train(model, samples, train_cfg, kd=kd, checkpoint_dir=out, progress=progress)
    finally:
        if store is not None:
            store.close()
    write_loss_log(out / "losses.csv", result.losses)
    write_snapshot(cfg, out)
    ui.show_training_summary(result.losses, str(result.checkpoint) if result.checkpoint else None)


def dump_logits(cfg: RunConfig, ui: RichDisplay) -> None:
    assert cfg.checkpoint is not None and cfg.dataset is not None and cfg.out is not None
    model = load_checkpoint(cfg.checkpoint)
    samples = [_fit(s, model) for s in load_dataset(cfg.dataset, split=cfg.split)]
    index = dump_teacher_logits(model, samples, cfg.out, batch_size=cfg.batch_size)
    write_snapshot(cfg, cfg.out)
    ui.console.print(f"Stored teacher logits for {len(samples)} images in [bold]{index.parent}[/]")


def _fit(sample: Sample, model: Model) -> Sample:
    size = tuple(model.spec.input_size)
    if (sample.height, sample.width) == size:
        return sample
    return resize(sample, (size[0], size[1]), model.spec.strides[-1])


def predict_samples(
    model: Model,
    samples: Sequence[Sample],
    score_thresh: float,
    nms_iou: float,
    batch_size: int = 8,
) -> List[List[DetBox]]:
    predictions: List[List[DetBox]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        predictions.extend(predict(model, [s.image for s in chunk], score_thresh, nms_iou))
    return predictions


def _write_reports(rows: List[Tuple[str, EvalReport]], out: Optional[str]) -> None:
    if not out:
        return
    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.csv").write_text(report_to_csv(rows), encoding="utf-8")
    (directory / "report.json").write_text(report_to_json(rows), encoding="utf-8")
    (directory / "report.txt").write_text(report_to_text(rows), encoding="utf-8")
    logger.info("Wrote reports to %s", directory)


def run_eval(cfg: RunConfig, ui: RichDisplay) -> None:
    assert cfg.dataset is not None
    samples = load_dataset(cfg.dataset, split=cfg.split)
    if cfg.predictions:
        root = Path(cfg.predictions)
        predictions = [read_predictions(root / f"{s.image_id}.txt", s.width, s.height) for s in samples]
        label = cfg.label or root.name
    else:
        assert cfg.checkpoint is not None
        model = load_checkpoint(cfg.checkpoint)
        samples = [_fit(s, model) for s in samples]
        predictions = predict_samples(model, samples, cfg.score_thresh, cfg.nms_iou)
        label = cfg.label or Path(cfg.checkpoint).name
    frames = evaluate(predictions, [list(s.boxes) for s in samples], cfg.iou)
    rows = [(label, report(frames))]
    _write_reports(rows, cfg.out)
    if cfg.out:
        write_snapshot(cfg, cfg.out)
    ui.show_report(rows, title=f"{cfg.split} split")


def run_eval_video(cfg: RunConfig, ui: RichDisplay) -> None:
    assert cfg.checkpoint is not None and cfg.frames is not None and cfg.gt_timeline is not None
    model = load_checkpoint(cfg.checkpoint)
    timeline = read_timeline(cfg.gt_timeline)
    paths = list_images(cfg.frames)
    unknown = [p.stem for p in paths if p.stem not in timeline]
    if unknown:
        raise FormatError("frames missing from the timeline", {"frames": unknown[:10], "timeline": cfg.gt_timeline})
    height, width = model.spec.input_size
    frames: List[FrameEval] = []
    wall_present: List[bool] = []
    for index, path in enumerate(paths):
        image = load_image(path)
        boxes = predict(model, [resize_image(image, (height, width))], cfg.score_thresh, cfg.nms_iou)[0]
        label = path.with_suffix(".txt")
        if label.is_file():
            gts: List[GTBox] = read_annotations(label, width, height)
            frames.append(match(boxes, gts, cfg.iou, index))
        else:
            frames.append(timeline_frame_eval(boxes, timeline[path.stem], index))
        wall_present.append(timeline[path.stem])
    rows = [(cfg.label or Path(cfg.frames).name, report(frames, wall_present))]
    _write_reports(rows, cfg.out)
    if cfg.out:
        write_snapshot(cfg, cfg.out)
    ui.show_report(rows, title="Video")


def draw_boxes(image: np.ndarray, boxes: Sequence[DetBox], scale: Tuple[float, float] = (1.0, 1.0)) -> Image.Image:
    """RGB copy of ``image`` with one rectangle and score label per box."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    sx, sy = scale
    for b in boxes:
        x0, y0 = (b.cx - b.w / 2.0) * sx, (b.cy - b.h / 2.0) * sy
        x1, y1 = (b.cx + b.w / 2.0) * sx, (b.cy + b.h / 2.0) * sy
        draw.rectangle([x0, y0, x1, y1], outline=BOX_COLOR, width=1)
        draw.text((x0 + 1, max(y0 - 10, 0)), f"{b.class_id}:{b.score:.2f}", fill=BOX_COLOR)
    return canvas


def run_infer(cfg: RunConfig, ui: RichDisplay) -> None:
    assert cfg.checkpoint is not None and cfg.image is not None and cfg.out is not None
    model = load_checkpoint(cfg.checkpoint)
    image = load_image(cfg.image)
    height, width = model.spec.input_size
    boxes = predict(model, [resize_image(image, (height, width))], cfg.score_thresh, cfg.nms_iou)[0]
    write_predictions(cfg.out, boxes, width, height)
    if cfg.annotated:
        scale = (image.shape[1] / width, image.shape[0] / height)
        path = Path(cfg.annotated)
        path.parent.mkdir(parents=True, exist_ok=True)
        draw_boxes(image, boxes, scale).save(path)
    ui.console.print(f"{len(boxes)} detections written to [bold]{cfg.out}[/]")


COMMAND_HANDLERS = {
    "make-dataset": make_dataset,
    "train": run_train,
    "dump-logits": dump_logits,
    "eval": run_eval,
    "eval-video": run_eval_video,
    "infer": run_infer,
}
