"""Deterministic training: optimizers, LR range test, loop, checkpoints.

A fixed seed fixes parameter init (model seed), the per-epoch shuffle, and
therefore the whole loss trajectory; two runs with identical config and
data produce byte-identical curves and checkpoint files.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, ShapeError
from .loss import LossConfig
from .metrics import evaluate_set, threshold
from .nn import Model, model_config_to_text, write_records, read_records
from .raster import Mask
from .tensor import Tape, Tensor, backward, no_grad, sigmoid


@dataclass(frozen=True)
class Sample:
    tile_id: str
    image: np.ndarray  # (3, H, W) float, already normalized
    mask: np.ndarray   # (H, W) uint8
    split: str         # train | val


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    epochs: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.0    # sgd only
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    checkpoint_every: int = 0  # 0: only the final epoch
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    val_iou: float
    val_dice: float
    wall_time: float


class SGD:
    """Plain SGD with optional momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= (p.dtype.type(self.lr) * v)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_records(self) -> dict[str, np.ndarray]:
        out = {f"optim.v.{n}": v for n, v in self.velocity.items()}
        out["optim.kind"] = np.frombuffer(b"sgd", dtype=np.uint8).copy()
        return out

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        for n in self.velocity:
            self.velocity[n][...] = records[f"optim.v.{n}"]


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            m_hat = m / dt(bc1)
            v_hat = v / dt(bc2)
            p.data -= dt(self.lr) * m_hat / (np.sqrt(v_hat) + dt(self.eps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_records(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{n}": m for n, m in self.m.items()}
        out.update({f"optim.v.{n}": v for n, v in self.v.items()})
        out["optim.t"] = np.array([self.t], dtype=np.float64)
        out["optim.kind"] = np.frombuffer(b"adam", dtype=np.uint8).copy()
        return out

    def load_state_records(self, records: dict[str, np.ndarray]) -> None:
        self.t = int(records["optim.t"][0])
        for n in self.m:
            self.m[n][...] = records[f"optim.m.{n}"]
            self.v[n][...] = records[f"optim.v.{n}"]


def make_optimizer(model_params: dict[str, Tensor], cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(model_params, cfg.learning_rate, cfg.momentum)
    return Adam(model_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                cfg.adam_eps)


def _stack_batch(samples: list[Sample], dtype) -> tuple[Tensor, np.ndarray]:
    imgs = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    targets = np.stack([s.mask for s in samples])[:, None].astype(dtype, copy=False)
    return Tensor(imgs), targets


def _batch_loss(model: Model, batch: list[Sample], loss_cfg: LossConfig) -> Tensor:
    x, targets = _stack_batch(batch, model.dtype)
    logits = model.forward(x)
    return loss_cfg.compute(logits, targets)


def lr_range_test(model, batches, lr_min: float, lr_max: float, steps: int,
                  loss_cfg: LossConfig | None = None, loss_fn=None,
                  momentum: float = 0.0,
                  history_out: list | None = None) -> float:
    """Geometric LR sweep; returns the lr at the steepest smoothed descent.

    One SGD step per point, lr swept from lr_min to lr_max over ``steps``
    points. Losses are EMA-smoothed (decay 0.9, seeded with the first
    value); the sweep stops early once the smoothed loss exceeds 4x its
    minimum. Model parameters (and buffers) are restored bitwise afterward.

    ``batches`` is cycled; each element is a list of Samples, or anything
    your ``loss_fn(model, batch)`` accepts. The default loss_fn runs
    forward + loss_cfg. Pass ``history_out`` to receive the recorded
    (lr, smoothed_loss) points, e.g. for plotting.
    """
    if not lr_min < lr_max:
        raise ValueError(f"need lr_min < lr_max, got {lr_min} >= {lr_max}")
    if steps < 10:
        raise ValueError(f"need at least 10 steps, got {steps}")
    if loss_fn is None:
        cfg = loss_cfg or LossConfig()
        loss_fn = lambda m, b: _batch_loss(m, b, cfg)  # noqa: E731

    params = model.parameters() if callable(getattr(model, "parameters", None)) \
        else model.params
    snapshot = {n: p.data.copy() for n, p in params.items()}
    buffers = getattr(model, "buffers", {})
    buf_snapshot = {n: b.copy() for n, b in buffers.items()}
    was_training = getattr(model, "training", False)
    if hasattr(model, "set_training"):
        model.set_training(True)

    opt = SGD(params, lr_min, momentum)
    ratio = (lr_max / lr_min) ** (1.0 / (steps - 1))
    history: list[tuple[float, float]] = []  # (lr, smoothed loss)
    ema = None
    best = math.inf
    try:
        for i in range(steps):
            lr_i = lr_min * ratio**i
            batch = batches[i % len(batches)]
            opt.zero_grad()
            with Tape():
                loss = loss_fn(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                if i == 0:
                    raise NumericError(f"loss diverged at lr_min={lr_min:g}")
                break
            ema = value if ema is None else 0.9 * ema + 0.1 * value
            history.append((lr_i, ema))
            best = min(best, ema)
            if ema > 4.0 * best:
                break
            backward(loss)
            opt.lr = lr_i
            opt.step()
    finally:
        for n, p in params.items():
            p.data[...] = snapshot[n]
            p.grad = None
        for n, b in buffers.items():
            b[...] = buf_snapshot[n]
        if hasattr(model, "set_training"):
            model.set_training(was_training)

    if history_out is not None:
        history_out.extend(history)
    if len(history) < 2:
        raise NumericError("LR sweep recorded fewer than 2 points")
    best_slope = math.inf
    best_idx = 0
    for i in range(len(history) - 1):
        (lr_a, s_a), (lr_b, s_b) = history[i], history[i + 1]
        slope = (s_b - s_a) / (math.log(lr_b) - math.log(lr_a))
        if slope < best_slope:
            best_slope = slope
            best_idx = i
    lr_a, lr_b = history[best_idx][0], history[best_idx + 1][0]
    return math.sqrt(lr_a * lr_b)


def train(model: Model, samples: list[Sample], cfg: TrainConfig,
          out_dir: str | Path | None = None, log=None) -> tuple[Model, list[EpochReport]]:
    """Run the full training loop; optionally write curves + checkpoints.

    Per epoch: seeded shuffle of the train split, mini-batches (last partial
    batch kept), forward -> loss -> backward -> optimizer step, then metrics
    on the val split.
    """
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not train_set or not val_set:
        raise ValueError(
            f"need >= 1 train and >= 1 val sample, got {len(train_set)}/{len(val_set)}"
        )
    opt = make_optimizer(model.params, cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    reports: list[EpochReport] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    val_triples = [(s.tile_id, s.image, s.mask) for s in val_set]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        model.set_training(True)
        perm = rng.permutation(len(train_set))
        total_loss = 0.0
        seen = 0
        for start in range(0, len(perm), cfg.batch_size):
            batch = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            opt.zero_grad()
            with Tape():
                loss = _batch_loss(model, batch, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            backward(loss)
            opt.step()
            total_loss += value * len(batch)
            seen += len(batch)
        model.set_training(False)
        val_loss = _eval_loss(model, val_set, cfg)
        report_metrics = evaluate_set(model, val_triples, cfg.threshold)
        wall = time.perf_counter() - t0
        report = EpochReport(epoch, total_loss / seen, val_loss,
                             report_metrics.mean_iou, report_metrics.mean_dice, wall)
        reports.append(report)
        if log is not None:
            log(f"epoch {epoch}: train_loss={report.train_loss:.6f} "
                f"val_loss={report.val_loss:.6f} val_iou={report.val_iou:.4f} "
                f"val_dice={report.val_dice:.4f} ({wall:.2f}s)")
        if out_path is not None:
            is_last = epoch == cfg.epochs - 1
            if is_last or (cfg.checkpoint_every > 0
                           and (epoch + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(model, opt, out_path / f"ckpt_epoch{epoch:03d}.bin")
    if out_path is not None:
        write_curves(reports, out_path / "curves.csv")
    return model, reports


def _eval_loss(model: Model, val_set: list[Sample], cfg: TrainConfig) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(val_set), cfg.batch_size):
            batch = val_set[start:start + cfg.batch_size]
            total += _batch_loss(model, batch, cfg.loss).item() * len(batch)
    return total / len(val_set)


def write_curves(reports: list[EpochReport], path, include_wall_time: bool = False) -> None:
    """CSV of per-epoch losses/metrics.

    Wall times are confined to logs by default (written as 0.0) so that
    identical seeded runs produce byte-identical files; pass
    include_wall_time=True for human-facing output.
    """
    lines = ["epoch,train_loss,val_loss,val_iou,val_dice,wall_time_s"]
    for r in reports:
        wall = r.wall_time if include_wall_time else 0.0
        lines.append(
            f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_iou!r},{r.val_dice!r},{wall!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def predict(model: Model, image: np.ndarray, t: float = 0.5) -> tuple[np.ndarray, Mask]:
    """Probability map and thresholded mask for one normalized image."""
    c, h, w = model.config.input_size
    img = np.asarray(image)
    if img.shape != (c, h, w):
        raise ShapeError(f"predict expects image of shape {(c, h, w)}, got {img.shape}")
    was_training = model.training
    model.set_training(False)
    try:
        with no_grad():
            probs = sigmoid(model.forward(Tensor(img[None].astype(model.dtype)))).data[0, 0]
    finally:
        model.set_training(was_training)
    return probs, threshold(probs, t)


# ---------------------------------------------------------------------------
# Checkpoints: model state + optimizer section + embedded model config.


def save_checkpoint(model: Model, optimizer, path) -> None:
    records = dict(model.named_state())
    records.update(optimizer.state_records())
    cfg_text = model_config_to_text(model.config)
    records["meta.model_config"] = np.frombuffer(cfg_text.encode("utf-8"), dtype=np.uint8).copy()
    write_records(records, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], str]:
    """Split a checkpoint archive into (model records, optimizer records,
    model config text)."""
    records = read_records(path)
    cfg_rec = records.pop("meta.model_config", None)
    if cfg_rec is None:
        raise DataError(f"{path}: not a checkpoint (no embedded model config)")
    model_records = {n: a for n, a in records.items() if not n.startswith("optim.")}
    opt_records = {n: a for n, a in records.items() if n.startswith("optim.")}
    cfg_text = cfg_rec.tobytes().decode("utf-8")
    return model_records, opt_records, cfg_text
