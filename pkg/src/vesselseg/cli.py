"""Command-line surface: ingest, synth, train, eval, predict.

Every command is file-in/file-out and reproducible: identical inputs and
config produce byte-identical outputs. Exit codes: 0 success, 1 usage or
config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import annot, imgproc, raster
from .errors import ConfigError, DataError, NumericError, VesselSegError
from .loss import LossConfig
from .metrics import evaluate_set
from .nn import (
    EncoderConfig,
    ModelConfig,
    build_model,
    load_weights,
    model_config_from_text,
    save_weights,
)
from .train import Sample, TrainConfig, predict, read_checkpoint, train

# ---------------------------------------------------------------------------
# Run configuration: flat key=value file, unknown keys rejected.

_CONFIG_SCHEMA: dict[str, tuple] = {
    # key: (parser, default) -- default None means required
    "data.dir": (str, None),
    "output_dir": (str, None),
    "model.block_kind": (str, "residual"),
    "model.stage_widths": (str, "16,32,64"),
    "model.blocks_per_stage": (int, 1),
    "model.decoder_kind": (str, "unet"),
    "model.fpn_width": (int, 32),
    "model.norm": (str, "none"),
    "model.seed": (int, 0),
    "model.init_encoder_from": (str, ""),
    "loss.kind": (str, "dice"),
    "loss.beta": (float, 0.9),
    "loss.gamma": (float, 2.0),
    "loss.alpha": (float, 0.5),
    "loss.epsilon_smooth": (float, 1.0),
    "train.batch_size": (int, 8),
    "train.learning_rate": (float, 1e-4),
    "train.epochs": (int, 100),
    "train.seed": (int, 0),
    "train.val_fraction": (float, 0.0),  # 0: keep the dataset's split column
    "train.optimizer": (str, "adam"),
    "train.momentum": (float, 0.0),
    "train.checkpoint_every": (int, 0),
    "eval.threshold": (float, 0.5),
}


def parse_run_config(path) -> dict:
    """Parse and validate a key=value run config; fill defaults."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    resolved: dict = {}
    for key, (cast, default) in _CONFIG_SCHEMA.items():
        if key in values:
            try:
                resolved[key] = cast(values[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}={values[key]!r}: {exc}") from exc
        elif default is None:
            raise ConfigError(f"config is missing required key {key!r}")
        else:
            resolved[key] = default
    return resolved


def render_config(resolved: dict) -> str:
    return "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved)) + "\n"


def _model_config_from_run(resolved: dict, input_hw: tuple[int, int]) -> ModelConfig:
    try:
        widths = tuple(int(w) for w in resolved["model.stage_widths"].split(","))
    except ValueError as exc:
        raise ConfigError(
            f"model.stage_widths must be comma-separated ints, got "
            f"{resolved['model.stage_widths']!r}"
        ) from exc
    encoder = EncoderConfig(
        block_kind=resolved["model.block_kind"],
        stage_widths=widths,
        blocks_per_stage=resolved["model.blocks_per_stage"],
    )
    return ModelConfig(
        encoder=encoder,
        decoder_kind=resolved["model.decoder_kind"],
        fpn_width=resolved["model.fpn_width"],
        norm=resolved["model.norm"],
        input_size=(3, input_hw[0], input_hw[1]),
        seed=resolved["model.seed"],
    )


def _loss_config_from_run(resolved: dict) -> LossConfig:
    try:
        return LossConfig(
            kind=resolved["loss.kind"],
            beta=resolved["loss.beta"],
            gamma=resolved["loss.gamma"],
            alpha=resolved["loss.alpha"],
            epsilon_smooth=resolved["loss.epsilon_smooth"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Dataset directory layout: images/, masks/, index.csv.


def write_dataset_dir(out_dir, entries) -> None:
    """Write (tile_id, image, mask, split) tuples as a dataset directory."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = ["tile_id,image,mask,split"]
    for tile_id, img, mask, split in sorted(entries, key=lambda e: e[0]):
        img_rel = f"images/{tile_id}.png"
        mask_rel = f"masks/{tile_id}.png"
        imgproc.save_image(img, out / img_rel)
        raster.save_mask(mask, out / mask_rel)
        rows.append(f"{tile_id},{img_rel},{mask_rel},{split}")
    (out / "index.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_samples(dataset_dir, stats: imgproc.NormalizationStats | None = None,
                 dtype=np.float32) -> list[Sample]:
    """Read a dataset directory into normalized in-memory samples."""
    root = Path(dataset_dir)
    index = root / "index.csv"
    if not index.is_file():
        raise DataError(f"{dataset_dir} has no index.csv")
    stats = stats or imgproc.NormalizationStats()
    samples = []
    lines = index.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != "tile_id,image,mask,split":
        raise DataError(f"{index}: unexpected header")
    for line in lines[1:]:
        tile_id, img_rel, mask_rel, split = line.split(",")
        img = imgproc.normalize(imgproc.decode_image(root / img_rel), stats)
        mask = raster.load_mask(root / mask_rel)
        samples.append(Sample(tile_id, img.astype(dtype), mask, split))
    return samples


def _assign_splits(tile_ids: list[str], val_fraction: float, seed: int) -> dict[str, str]:
    n_val = int(val_fraction * len(tile_ids) + 0.5)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = sorted(tile_ids)
    perm = rng.permutation(len(order))
    val = {order[int(i)] for i in perm[:n_val]}
    return {tid: ("val" if tid in val else "train") for tid in order}


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args) -> int:
    annotations = Path(args.annotations)
    images_dir = Path(args.images_dir)
    if not annotations.is_file():
        raise DataError(f"annotation file {annotations} not found")
    if not images_dir.is_dir():
        raise DataError(f"images directory {images_dir} not found")
    with open(annotations, "r", encoding="utf-8") as f:
        records = annot.parse_annotations(f)
    image_paths = {p.stem: str(p) for p in sorted(images_dir.glob("*.png"))}
    index = annot.filter_labeled(sorted(image_paths), records, image_paths)
    index = annot.split_train_val(index, args.val_fraction, args.seed)

    size = args.size
    entries = []
    for entry in index.entries:
        try:
            img = imgproc.decode_image(entry.image_path)
            h, w = img.shape[1], img.shape[2]
            mask = raster.build_class_mask(entry.record, annot.ClassLabel.BLOOD_VESSEL, w, h)
            img_small = imgproc.resize_bilinear(img, size, size)
            mask_small = raster.downsample_mask(mask, size, size)
        except VesselSegError as exc:
            raise type(exc)(f"tile {entry.tile_id!r}: {exc}") from exc
        entries.append((entry.tile_id, img_small, mask_small, entry.split.value))
    write_dataset_dir(args.out_dir, entries)
    print(f"total tiles: {len(image_paths)}, retained (blood-vessel annotated): {len(entries)}")
    print(f"dataset written to {args.out_dir}")
    return 0


def cmd_synth(args) -> int:
    if args.count <= 0:
        raise ConfigError(f"count must be positive, got {args.count}")
    pairs = imgproc.synth_vessels(args.seed, args.count, args.size, args.size)
    tile_ids = [f"synth{i:04d}" for i in range(args.count)]
    splits = _assign_splits(tile_ids, args.val_fraction, args.seed)
    entries = [
        (tid, img, mask, splits[tid]) for tid, (img, mask) in zip(tile_ids, pairs)
    ]
    write_dataset_dir(args.out_dir, entries)
    print(f"wrote {len(entries)} synthetic tiles to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    resolved = parse_run_config(args.config)
    samples = load_samples(resolved["data.dir"])
    if not samples:
        raise DataError(f"dataset {resolved['data.dir']} is empty")
    if resolved["train.val_fraction"] > 0.0:
        splits = _assign_splits([s.tile_id for s in samples],
                                resolved["train.val_fraction"], resolved["train.seed"])
        samples = [Sample(s.tile_id, s.image, s.mask, splits[s.tile_id]) for s in samples]
    h, w = samples[0].image.shape[1], samples[0].image.shape[2]
    model_cfg = _model_config_from_run(resolved, (h, w))
    model = build_model(model_cfg)
    init_from = resolved["model.init_encoder_from"]
    if init_from:
        load_weights(model, init_from, prefix="encoder.")
    train_cfg = TrainConfig(
        batch_size=resolved["train.batch_size"],
        learning_rate=resolved["train.learning_rate"],
        epochs=resolved["train.epochs"],
        seed=resolved["train.seed"],
        loss=_loss_config_from_run(resolved),
        optimizer=resolved["train.optimizer"],
        momentum=resolved["train.momentum"],
        checkpoint_every=resolved["train.checkpoint_every"],
        threshold=resolved["eval.threshold"],
    )
    out_dir = Path(resolved["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.cfg").write_text(render_config(resolved), encoding="utf-8")
    model, reports = train(model, samples, train_cfg, out_dir=out_dir, log=print)
    save_weights(model, out_dir / "weights_final.bin")
    last = reports[-1]
    print(f"done: val_iou={last.val_iou:.4f} val_dice={last.val_dice:.4f} "
          f"(run artifacts in {out_dir})")
    return 0


def _load_checkpoint_model(path):
    model_records, _opt, cfg_text = read_checkpoint(path)
    model = build_model(model_config_from_text(cfg_text))
    model.load_state(model_records)
    return model


def cmd_eval(args) -> int:
    model = _load_checkpoint_model(args.checkpoint)
    samples = load_samples(args.dataset_dir)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise DataError(f"no samples with split {args.split!r} in {args.dataset_dir}")
    triples = [(s.tile_id, s.image, s.mask) for s in samples]
    report = evaluate_set(model, triples, args.threshold, per_image=not args.global_pixels)
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
        print(f"metrics written to {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_predict(args) -> int:
    model = _load_checkpoint_model(args.checkpoint)
    img = imgproc.decode_image(args.image)
    img = imgproc.normalize(img, imgproc.NormalizationStats()).astype(np.float32)
    probs, mask = predict(model, img, args.threshold)
    raster.save_mask(mask, args.out_mask)
    prob_path = args.prob_out or str(Path(args.out_mask).with_suffix("")) + "_prob.png"
    prob_img = np.clip(np.rint(probs * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(prob_img, mode="L").save(prob_path, format="PNG")
    print(f"mask -> {args.out_mask}, probabilities -> {prob_path}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse, but usage errors exit 1 per our exit-code contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="vesselseg",
                     description="Desk-scale vessel segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="annotations + images -> dataset directory")
    p.add_argument("annotations", help="line-delimited annotation JSON file")
    p.add_argument("images_dir", help="directory of 8-bit RGB PNG tiles")
    p.add_argument("out_dir", help="dataset directory to create")
    p.add_argument("--size", type=int, default=128, help="output tile size (default 128)")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic vessel dataset")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train per a key=value run config")
    p.add_argument("config", help="run config file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset_dir")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--global-pixels", action="store_true",
                   help="pool confusion counts over all pixels instead of per-image means")
    p.add_argument("--out", default="", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("out_mask")
    p.add_argument("--prob-out", default="", help="probability map path (default: <out_mask>_prob.png)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
