"""U-Net and FPN segmentation models assembled from tensor ops.

Encoders are stacks of plain or residual conv stages separated by 2x2 max
pooling; decoders either mirror the encoder with skip concatenations (UNet)
or build a feature pyramid with 1x1 lateral projections and a top-down
upsample-and-add pathway (FPN). Output logits always match the input
spatial size.

Parameter names are hierarchical ("encoder.stage0.block1.conv2.weight"),
which makes prefix-filtered partial loading (e.g. encoder-only) natural.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    Tensor,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    maxpool_2x2,
    relu,
    upsample_bilinear_2x,
)


@dataclass(frozen=True)
class EncoderConfig:
    block_kind: str = "residual"  # plain | residual
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.block_kind not in ("plain", "residual"):
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if len(self.stage_widths) < 2:
            raise ConfigError("encoder needs at least 2 stages")
        if any(w <= 0 for w in self.stage_widths):
            raise ConfigError(f"stage widths must be positive, got {self.stage_widths}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")

    @property
    def stages(self) -> int:
        return len(self.stage_widths)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_kind: str = "unet"  # unet | fpn
    fpn_width: int = 32
    norm: str = "none"  # none | batchnorm
    input_size: tuple[int, int, int] = (3, 64, 64)  # (channels, H, W)
    seed: int = 0

    def __post_init__(self):
        if self.decoder_kind not in ("unet", "fpn"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.norm not in ("none", "batchnorm"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.decoder_kind == "fpn" and self.fpn_width <= 0:
            raise ConfigError(f"fpn_width must be positive, got {self.fpn_width}")
        c, h, w = self.input_size
        if c != 3:
            raise ConfigError(f"input must have 3 channels, got {c}")
        factor = 2 ** (self.encoder.stages - 1)
        if h % factor or w % factor:
            raise ConfigError(
                f"input {h}x{w} must be divisible by 2^(stages-1) = {factor}"
            )


class _Conv:
    """3x3 (or kxk) convolution with optional batchnorm, He fan-in init."""

    def __init__(self, model: "Model", name: str, in_ch: int, out_ch: int,
                 k: int = 3, with_norm: bool = False, init_scale: float = 1.0):
        self.model = model
        self.name = name
        self.k = k
        self.pad = k // 2
        std = init_scale * float(np.sqrt(2.0 / (in_ch * k * k)))
        w = model.rng.normal(0.0, std, size=(out_ch, in_ch, k, k))
        self.weight = model.add_param(f"{name}.weight", w)
        self.bias = model.add_param(f"{name}.bias", np.zeros(out_ch))
        self.norm = None
        if with_norm:
            self.gamma = model.add_param(f"{name}.bn.gamma", np.ones(out_ch))
            self.beta = model.add_param(f"{name}.bn.beta", np.zeros(out_ch))
            self.r_mean = model.add_buffer(f"{name}.bn.running_mean", np.zeros(out_ch))
            self.r_var = model.add_buffer(f"{name}.bn.running_var", np.ones(out_ch))
            self.norm = "batchnorm"

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)
        if self.norm:
            out = batchnorm(out, self.gamma, self.beta, self.r_mean, self.r_var,
                            training=self.model.training)
        return out


class _PlainBlock:
    def __init__(self, model, name, in_ch, out_ch, with_norm):
        self.conv = _Conv(model, f"{name}.conv", in_ch, out_ch, with_norm=with_norm)

    def __call__(self, x):
        return relu(self.conv(x))


class _ResidualBlock:
    """relu(F(x) + shortcut(x)) with F = conv3x3 -> relu -> conv3x3; the
    shortcut is a 1x1 projection when the channel count changes."""

    def __init__(self, model, name, in_ch, out_ch, with_norm):
        self.conv1 = _Conv(model, f"{name}.conv1", in_ch, out_ch, with_norm=with_norm)
        self.conv2 = _Conv(model, f"{name}.conv2", out_ch, out_ch, with_norm=with_norm)
        self.proj = None
        if in_ch != out_ch:
            self.proj = _Conv(model, f"{name}.proj", in_ch, out_ch, k=1, with_norm=with_norm)

    def __call__(self, x):
        main = self.conv2(relu(self.conv1(x)))
        shortcut = self.proj(x) if self.proj is not None else x
        return relu(add(main, shortcut))


class Model:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = False
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self._build()
        del self.rng  # init-time only

    # -- construction -----------------------------------------------------
    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(values.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        arr = values.astype(self.dtype)
        self.buffers[name] = arr
        return arr

    def _build(self) -> None:
        cfg = self.config
        enc = cfg.encoder
        with_norm = cfg.norm == "batchnorm"
        block_cls = _ResidualBlock if enc.block_kind == "residual" else _PlainBlock

        self.enc_stages: list[list] = []
        in_ch = cfg.input_size[0]
        for s, width in enumerate(enc.stage_widths):
            blocks = []
            for b in range(enc.blocks_per_stage):
                blocks.append(
                    block_cls(self, f"encoder.stage{s}.block{b}",
                              in_ch if b == 0 else width, width, with_norm)
                )
            self.enc_stages.append(blocks)
            in_ch = width

        widths = enc.stage_widths
        if cfg.decoder_kind == "unet":
            self.dec_blocks = []
            for s in range(enc.stages - 2, -1, -1):
                cat_ch = widths[s + 1] + widths[s]
                self.dec_blocks.append((
                    s,
                    _Conv(self, f"decoder.up{s}.conv1", cat_ch, widths[s], with_norm=with_norm),
                    _Conv(self, f"decoder.up{s}.conv2", widths[s], widths[s], with_norm=with_norm),
                ))
            head_in = widths[0]
        else:
            f = cfg.fpn_width
            self.laterals = [
                _Conv(self, f"decoder.lateral{s}", widths[s], f, k=1, with_norm=False)
                for s in range(enc.stages)
            ]
            self.smooths = [
                _Conv(self, f"decoder.smooth{s}", f, f, with_norm=with_norm)
                for s in range(enc.stages)
            ]
            self.fuse = _Conv(self, "decoder.fuse", f * enc.stages, f, with_norm=with_norm)
            head_in = f
        # Damped init keeps the initial logits near zero: a plain He head on
        # top of the accumulated decoder activations saturates the sigmoid
        # (especially after the FPN's additive top-down pathway), which kills
        # dice-loss gradients before training can start.
        self.head = _Conv(self, "head", head_in, 1, k=1, with_norm=False,
                          init_scale=0.1)

    # -- execution ---------------------------------------------------------
    def set_training(self, flag: bool) -> None:
        self.training = bool(flag)

    def _encode(self, x: Tensor) -> list[Tensor]:
        feats = []
        for s, blocks in enumerate(self.enc_stages):
            if s > 0:
                x = maxpool_2x2(x)
            for block in blocks:
                x = block(x)
            feats.append(x)
        return feats

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = self.config.input_size
        if x.data.ndim != 4 or x.shape[1:] != (c, h, w):
            raise ShapeError(
                f"forward expects (B, {c}, {h}, {w}), got {x.shape}"
            )
        if x.dtype.type is not self.dtype:
            raise ShapeError(
                f"forward input dtype {x.dtype} does not match model dtype "
                f"{np.dtype(self.dtype)}"
            )
        feats = self._encode(x)
        if self.config.decoder_kind == "unet":
            y = feats[-1]
            for s, conv1, conv2 in self.dec_blocks:
                y = concat_channels([upsample_bilinear_2x(y), feats[s]])
                y = relu(conv1(y))
                y = relu(conv2(y))
        else:
            pyramid = [None] * len(feats)
            pyramid[-1] = self.laterals[-1](feats[-1])
            for s in range(len(feats) - 2, -1, -1):
                pyramid[s] = add(self.laterals[s](feats[s]),
                                 upsample_bilinear_2x(pyramid[s + 1]))
            heads = []
            for s in range(len(feats)):
                level = relu(self.smooths[s](pyramid[s]))
                for _ in range(s):
                    level = upsample_bilinear_2x(level)
                heads.append(level)
            y = relu(self.fuse(concat_channels(heads)))
        return self.head(y)

    # -- state -------------------------------------------------------------
    def named_state(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state(self, records: dict[str, np.ndarray], prefix: str | None = None) -> None:
        """Copy arrays into matching parameters/buffers.

        With a prefix, only record names under it are considered and they
        must cover the model's prefixed entries exactly; everything else in
        the model is left untouched.
        """
        state = self.named_state()
        if prefix is None:
            wanted = set(state)
            offered = set(records)
        else:
            wanted = {n for n in state if n.startswith(prefix)}
            offered = {n for n in records if n.startswith(prefix)}
        if wanted != offered:
            missing = sorted(wanted - offered)
            extra = sorted(offered - wanted)
            parts = []
            if missing:
                parts.append(f"missing from file: {missing[:3]}")
            if extra:
                parts.append(f"unexpected in file: {extra[:3]}")
            raise DataError("weight name mismatch; " + "; ".join(parts))
        for name in sorted(wanted):
            src = records[name]
            dst = self.params[name].data if name in self.params else self.buffers[name]
            if src.shape != dst.shape:
                raise DataError(
                    f"parameter {name!r}: file shape {src.shape} != model shape {dst.shape}"
                )
            dst[...] = src.astype(dst.dtype)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    return Model(config, dtype=dtype)


# ---------------------------------------------------------------------------
# Weight archive: magic, version, count, named records, trailing CRC32.

_MAGIC = b"VSEGWTS\n"
_VERSION = 1
_DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "|u1"}
_TAG_FOR_KIND = {"f4": 1, "f8": 2, "u1": 3}


def write_records(records: dict[str, np.ndarray], path) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(records))]
    for name, arr in records.items():
        a = np.ascontiguousarray(arr)
        if a.dtype == np.float32:
            payload, tag = a.astype("<f4", copy=False), 1
        elif a.dtype == np.float64:
            payload, tag = a.astype("<f8", copy=False), 2
        elif a.dtype == np.uint8:
            payload, tag = a, 3
        else:
            raise DataError(f"record {name!r} has unsupported dtype {a.dtype}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", tag, a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(payload.tobytes())
    blob = b"".join(chunks)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(blob)


def read_records(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 12 or not blob.startswith(_MAGIC):
        raise DataError(f"{path}: not a weight archive (bad magic)")
    stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise DataError(f"{path}: checksum mismatch, file is corrupted")
    off = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, off)
    off += 8
    if version != _VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        if tag not in _DTYPE_TAGS:
            raise DataError(f"{path}: record {name!r} has unknown dtype tag {tag}")
        dt = np.dtype(_DTYPE_TAGS[tag])
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
        data = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(dims)
        off += nbytes
        records[name] = data.astype(data.dtype.newbyteorder("="))
    return records


def model_config_to_text(cfg: ModelConfig) -> str:
    """Canonical key=value rendering of a ModelConfig (checkpoint metadata)."""
    lines = [
        f"encoder.block_kind={cfg.encoder.block_kind}",
        f"encoder.stage_widths={','.join(str(w) for w in cfg.encoder.stage_widths)}",
        f"encoder.blocks_per_stage={cfg.encoder.blocks_per_stage}",
        f"decoder_kind={cfg.decoder_kind}",
        f"fpn_width={cfg.fpn_width}",
        f"norm={cfg.norm}",
        f"input_size={','.join(str(d) for d in cfg.input_size)}",
        f"seed={cfg.seed}",
    ]
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        encoder = EncoderConfig(
            block_kind=kv["encoder.block_kind"],
            stage_widths=tuple(int(w) for w in kv["encoder.stage_widths"].split(",")),
            blocks_per_stage=int(kv["encoder.blocks_per_stage"]),
        )
        return ModelConfig(
            encoder=encoder,
            decoder_kind=kv["decoder_kind"],
            fpn_width=int(kv["fpn_width"]),
            norm=kv["norm"],
            input_size=tuple(int(d) for d in kv["input_size"].split(",")),
            seed=int(kv["seed"]),
        )
    except KeyError as exc:
        raise DataError(f"model config text is missing key {exc}") from exc


def save_weights(model: Model, path) -> None:
    write_records(model.named_state(), path)


def load_weights(model: Model, path, prefix: str | None = None) -> Model:
    """Load parameters (and buffers) from a weight archive into the model.

    Full loads require an exact name/shape bijection; ``prefix`` restricts
    the match to one subtree, e.g. prefix="encoder." to initialize just the
    encoder from previously trained weights.
    """
    model.load_state(read_records(path), prefix=prefix)
    return model
