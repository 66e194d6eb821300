"""SGD training with a poly schedule, mIoU evaluation, checkpoints, and ablations."""

from __future__ import annotations

import csv
import ctypes
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .modules import LossConfig, seg_losses
from .synth import SynthScene, stack, synth_dataset
from .tensor import DTYPE, DimensionError, Param, Tape, Tensor, load_fdlt, save_fdlt
from .toynet import ToyNet, ToyNetConfig, predict

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "iter", "lr", "loss_total", "loss_seg", "loss_edge"]
TEST_SEED_OFFSET = 1_000_003

# glibc mallopt parameter ids
_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3


def retain_freed_memory() -> bool:
    """Ask glibc to keep freed heap pages instead of returning them to the OS.

    Every training step allocates and frees the same multi-megabyte buffers;
    with default settings a good share of the step goes to page faults on
    memory that was just released. The setting is process-wide and only
    affects speed. Returns False where mallopt is unavailable.
    """
    try:
        mallopt = ctypes.CDLL(None).mallopt
    except (OSError, AttributeError):
        return False
    return all(mallopt(k, v) == 1 for k, v in (
        (_M_MMAP_THRESHOLD, 32 << 20),
        (_M_TRIM_THRESHOLD, 256 << 20),
        (_M_TOP_PAD, 64 << 20),
    ))


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Optional[str]):
        super().__init__(f"{message} (last good checkpoint: {last_good or 'none'})")
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    power: float = 0.9
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    threads: int = 1
    loss: LossConfig = field(default_factory=LossConfig)


def poly_lr(base_lr: float, it: int, total: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - it / total) ** power


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_weights: list[Optional[np.ndarray]] = field(default_factory=list)
    total_iters: int = 0

    @property
    def final_loss(self) -> float:
        return float(self.rows[-1]["loss_total"])

    def write_csv(self, path) -> None:
        _atomic_write_rows(path, LOG_HEADER, [[r[k] for k in LOG_HEADER] for r in self.rows])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _atomic_write_rows(path, header, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    os.replace(tmp, path)


class Sgd:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Param], momentum: float, weight_decay: float):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


def batch_gradients(net: ToyNet, images: np.ndarray, labels: np.ndarray, loss_cfg: LossConfig, threads: int = 1,
                    weights_out: Optional[list] = None):
    """Accumulate the batch-loss gradient into the net's params; returns (total, seg, edge).

    The batch loss is the mean of per-image losses, so splitting the batch into
    ``threads`` chunks and summing chunk gradients weighted by chunk size gives
    the same result. Chunks are reduced in index order. If ``weights_out`` is a
    list, the per-image encoder weights of the forward pass are appended to it.
    """
    B = len(images)
    chunks = np.array_split(np.arange(B), min(max(threads, 1), B))
    params = net.parameters()

    def run(idx):
        with Tape() as tape:
            logits, w = net.forward(Tensor(images[idx]), return_weights=True)
            losses = seg_losses(logits, labels[idx], loss_cfg)
        grads = tape.gradients(losses[0])
        return [grads.get(id(p)) for p in params], [float(l.data) for l in losses], w

    if len(chunks) == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(run, chunks))
    totals = np.zeros(3)
    for idx, (grads, losses, enc_w) in zip(chunks, results):
        if weights_out is not None and enc_w is not None:
            weights_out.append(enc_w.data)
        w = len(idx) / B
        for p, g in zip(params, grads):
            if g is not None:
                p.grad += g if w == 1.0 else w * g
        totals += w * np.asarray(losses)
    return tuple(float(t) for t in totals)


def train(
    net: ToyNet,
    data: Sequence[SynthScene],
    cfg: TrainConfig,
    out_dir=None,
) -> TrainLog:
    """Train in place; logs one row per iteration plus a closing row at iter == total (lr 0).

    The closing row carries the mean losses of the final epoch. Each epoch's
    encoder weight vector is the mean over that epoch's training forward
    passes (fdl only). With ``out_dir`` a checkpoint is written after every epoch.
    """
    retain_freed_memory()
    images, labels = stack(list(data))
    n = len(images)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    opt = Sgd(net.parameters(), cfg.momentum, cfg.weight_decay)
    shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    tlog = TrainLog(total_iters=total)
    last_good = None
    it = 0
    epoch_means = np.zeros(3)
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(n)
        sums = np.zeros(3)
        weights = []
        for b in range(per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = poly_lr(cfg.base_lr, it, total, cfg.power)
            net.zero_grad()
            losses = batch_gradients(net, images[idx], labels[idx], cfg.loss, cfg.threads, weights)
            if not all(math.isfinite(v) for v in losses) or not all(np.isfinite(p.grad).all() for p in opt.params):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} iter {it}", last_good)
            opt.step(lr)
            tlog.rows.append(dict(zip(LOG_HEADER, (epoch, it, lr, *losses))))
            sums += np.asarray(losses) * len(idx)
            it += 1
        epoch_means = sums / n
        tlog.epoch_losses.append(float(epoch_means[0]))
        tlog.epoch_weights.append(np.concatenate(weights).mean(axis=0) if weights else None)
        log.info("epoch %d loss %.5f", epoch, epoch_means[0])
        if out_dir is not None:
            save_checkpoint(out_dir, net)
            last_good = str(out_dir)
    tlog.rows.append(dict(zip(LOG_HEADER, (cfg.epochs, total, poly_lr(cfg.base_lr, total, total, cfg.power), *epoch_means))))
    return tlog


# ----------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MiouResult:
    iou: np.ndarray  # per class; nan where the class is absent from both pred and gt
    miou: float


def confusion_matrix(preds, gts, K: int) -> np.ndarray:
    cm = np.zeros((K, K), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise DimensionError(f"prediction {p.shape} and ground truth {g.shape} differ")
        cm += np.bincount(g.reshape(-1) * K + p.reshape(-1), minlength=K * K).reshape(K, K)
    return cm


def evaluate_miou(preds, gts, K: int) -> MiouResult:
    """Per-class IoU = TP / (TP + FP + FN); the mean skips classes absent from both."""
    cm = confusion_matrix(preds, gts, K)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(K, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    miou = float(iou[present].mean()) if present.any() else 0.0
    return MiouResult(iou, miou)


def evaluate_net(net: ToyNet, scenes: Sequence[SynthScene]) -> MiouResult:
    images, labels = stack(list(scenes))
    return evaluate_miou(predict(net, images), labels, net.cfg.classes)


# ----------------------------------------------------------------------------
# checkpoints


def _role(name: str) -> str:
    if name.endswith("bias") or name.endswith("beta"):
        return "bias"
    if name.endswith("alpha") or name.endswith("gamma"):
        return "scale"
    return "weight"


def save_checkpoint(out_dir, net: ToyNet) -> None:
    """Directory of FDLT tensors + ``manifest.txt`` + ``config.json``, replaced atomically."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".", dir=out_dir.parent))
    lines = []
    for name, p in net.params.items():
        save_fdlt(tmp / f"{name}.fdlt", p.data)
        lines.append(f"{name}\t{'x'.join(map(str, p.shape))}\t{_role(name)}")
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (tmp / "config.json").write_text(net.cfg.to_json() + "\n", encoding="utf-8")
    old = None
    if out_dir.exists():
        old = out_dir.with_name(out_dir.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(out_dir, old)
    os.replace(tmp, out_dir)
    if old is not None:
        shutil.rmtree(old)


def load_checkpoint(ckpt_dir) -> ToyNet:
    ckpt_dir = Path(ckpt_dir)
    cfg = ToyNetConfig.from_json((ckpt_dir / "config.json").read_text(encoding="utf-8"))
    net = ToyNet.create(cfg, seed=0)
    for line in (ckpt_dir / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, shape, _ = line.split("\t")
        arr = load_fdlt(ckpt_dir / f"{name}.fdlt").data
        expected = tuple(int(s) for s in shape.split("x")) if shape else ()
        if arr.shape != expected or name not in net.params:
            raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, manifest says {expected}")
        net.params[name].data[...] = arr
    return net


# ----------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationConfig:
    net: ToyNetConfig = ToyNetConfig()
    train: TrainConfig = TrainConfig()
    train_count: int = 200
    test_count: int = 100
    style: str = "night"


def datasets_for_seed(seed: int, cfg: AblationConfig) -> tuple[list[SynthScene], list[SynthScene]]:
    size, K = cfg.net.input_size, cfg.net.classes
    return (
        synth_dataset(cfg.train_count, seed, cfg.style, size, K),
        synth_dataset(cfg.test_count, seed + TEST_SEED_OFFSET, cfg.style, size, K),
    )


def run_one(variant: str, seed: int, cfg: AblationConfig, data=None) -> float:
    train_set, test_set = data if data is not None else datasets_for_seed(seed, cfg)
    net = ToyNet.create(cfg.net.with_variant(variant), seed=seed)
    train(net, train_set, TrainConfig(**{**cfg.train.__dict__, "seed": seed}))
    return evaluate_net(net, test_set).miou


def ablation_run(variants: Sequence[str], seeds: Sequence[int], cfg: AblationConfig = AblationConfig()) -> list[tuple[str, int, float]]:
    """Train every variant on every seed; each seed fixes data, init and shuffling for all variants."""
    rows = []
    for seed in seeds:
        data = datasets_for_seed(seed, cfg)
        for v in variants:
            miou = run_one(v, seed, cfg, data)
            log.info("variant %s seed %d miou %.4f", v, seed, miou)
            rows.append((v, seed, miou))
    return rows


def summarize(rows: Sequence[tuple[str, int, float]]) -> dict[str, tuple[float, float]]:
    """Per-variant (mean, population std) of mIoU."""
    out = {}
    for v in dict.fromkeys(r[0] for r in rows):
        vals = np.array([r[2] for r in rows if r[0] == v])
        out[v] = (float(vals.mean()), float(vals.std()))
    return out


def write_ablation_csv(path, rows) -> None:
    _atomic_write_rows(path, ["variant", "seed", "miou"], rows)
