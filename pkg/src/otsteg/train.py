"""Training loop for the hiding/reveal pair: data, schedule, optimizer, checkpoints.

The loop is deliberately plain: load a directory of netpbm images, draw
distinct (cover, secret) pairs per step, augment, run the combined objective
from net.joint_losses, and update every trainable array with a decoupled
weight-decay adaptive-moment step under a cosine learning-rate schedule.
Everything is keyed off derive_seed so two runs with the same config produce
byte-identical metrics CSVs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mcot
from . import metrics as mt
from . import net as nn
from .core import SeededRng, derive_seed, load_image, require_image, save_image

ADAM_EPS = 1e-8
MODEL_MAGIC = b"STGO"
MODEL_VERSION = 1
DATASET_SUFFIXES = (".pgm", ".ppm")

CSV_COLUMNS = (
    "epoch",
    "lr",
    "L_h",
    "L_r",
    "L_T",
    "L_total",
    "psnr_cover_stego",
    "psnr_secret_recovery",
    "ssim_cover_stego",
    "ssim_secret_recovery",
)


class DatasetError(Exception):
    pass


class CheckpointFormatError(Exception):
    pass


# --- data -----------------------------------------------------------------------


def load_dataset(directory) -> list[np.ndarray]:
    """Read every PGM/PPM file under directory (sorted by name) as 3xHxW.

    Gray images are replicated to three channels so the nets see one layout.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in DATASET_SUFFIXES)
    if len(paths) < 2:
        raise DatasetError(
            f"dataset needs at least 2 images, found {len(paths)} in {directory}"
        )
    images = []
    for p in paths:
        img = load_image(p)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        images.append(img)
    return images


def synthetic_images(count: int = 16, side: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Deterministic smooth color images with extreme brightness/contrast spread.

    Each image blends gradients with a low-frequency wave, then lands in one
    of four exposure classes (very dark, very bright, nearly flat, full
    range). The spread of per-image statistics is what separates the two
    bridge modes during the transport ablation: a content-dependent bridge
    input inherits the spread, a transported one does not.
    """
    images = []
    ys, xs = np.mgrid[0:side, 0:side] / float(side)
    for k in range(count):
        rng = SeededRng(derive_seed(seed, 11, k))
        img = np.empty((3, side, side))
        for c in range(3):
            u = rng.uniforms(6)
            img[c] = (
                u[0]
                + (u[1] - 0.5) * xs
                + (u[2] - 0.5) * ys
                + 0.35 * np.sin(2.0 * np.pi * ((1 + 2 * u[3]) * xs + (1 + 2 * u[4]) * ys) + 2 * np.pi * u[5])
            )
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo)
        v = SeededRng(derive_seed(seed, 13, k)).uniforms(2)
        m = k % 4
        if m == 0:
            img = 0.02 + (0.12 + 0.08 * v[0]) * img
        elif m == 1:
            img = 0.82 + (0.12 + 0.05 * v[0]) * img
        elif m == 2:
            img = 0.46 + (0.04 + 0.04 * v[0]) * img
        images.append(np.clip(img, 0.0, 1.0))
    return images


def textured_images(count: int = 16, side: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Deterministic high-diversity images: waves, checkers, terraces, blobs.

    A plain mean-image predictor scores poorly on this set, so training is
    forced to push actual content through the reveal path. Used where key
    sensitivity of the recovery matters more than stego polish.
    """
    images = []
    ys, xs = np.mgrid[0:side, 0:side] / float(side)
    for k in range(count):
        rng = SeededRng(derive_seed(seed, 11, k))
        kind = k % 4
        img = np.empty((3, side, side))
        for c in range(3):
            u = rng.uniforms(8)
            if kind == 0:
                plane = (
                    u[0] + (u[1] - 0.5) * xs + (u[2] - 0.5) * ys
                    + 0.35 * np.sin(2 * np.pi * ((1 + 3 * u[3]) * xs + (1 + 3 * u[4]) * ys) + 2 * np.pi * u[5])
                )
            elif kind == 1:
                period = 2 + int(u[0] * 6)
                cells = np.add.outer(np.arange(side) // period, np.arange(side) // period)
                plane = u[2] + (u[3] - u[2]) * ((cells + int(u[1] * 2)) % 2)
            elif kind == 2:
                raw = np.sin(2 * np.pi * ((1 + 3 * u[0]) * xs + (1 + 3 * u[1]) * ys) + 2 * np.pi * u[2])
                levels = 2 + int(u[3] * 3)
                plane = np.floor((raw + 1.0) / 2.0 * levels) / levels
            else:
                plane = np.zeros((side, side))
                for _ in range(3):
                    v = rng.uniforms(4)
                    width = 0.05 + 0.15 * v[2]
                    plane += v[3] * np.exp(-(((xs - v[0]) ** 2 + (ys - v[1]) ** 2) / (2 * width**2)))
            img[c] = plane
        lo, hi = img.min(), img.max()
        images.append((img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5))
    return images


def write_synthetic_dataset(directory, count: int = 16, side: int = 32, seed: int = 0) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(synthetic_images(count, side, seed)):
        p = directory / f"synthetic_{k:03d}.ppm"
        save_image(img, p)
        paths.append(p)
    return paths


def augment(image: np.ndarray, crop: int, rng: SeededRng) -> np.ndarray:
    """Random crop to crop x crop, horizontal flip p=0.5, rotation snapped 0/90."""
    image = require_image(image)
    h, w = image.shape[1:]
    if h < crop or w < crop:
        raise DatasetError(f"image {h}x{w} is smaller than the crop size {crop}")
    u = rng.uniforms(4)
    top = int(u[0] * (h - crop + 1))
    left = int(u[1] * (w - crop + 1))
    out = image[:, top : top + crop, left : left + crop]
    if u[2] < 0.5:
        out = out[:, :, ::-1]
    if u[3] * 90.0 >= 45.0:
        out = np.rot90(out, axes=(1, 2))
    return np.ascontiguousarray(out)


def center_crop(image: np.ndarray, crop: int) -> np.ndarray:
    image = require_image(image)
    h, w = image.shape[1:]
    if h < crop or w < crop:
        raise DatasetError(f"image {h}x{w} is smaller than the crop size {crop}")
    top = (h - crop) // 2
    left = (w - crop) // 2
    return np.ascontiguousarray(image[:, top : top + crop, left : left + crop])


# --- schedule and optimizer ----------------------------------------------------------


def cosine_lr(epoch: int, horizon: int, cfg: nn.TrainConfig) -> float:
    """Cosine decay from lr_init at epoch 0 to lr_final at epoch horizon-1."""
    if horizon <= 1:
        return cfg.lr_init
    t = min(max(epoch, 0), horizon - 1) / (horizon - 1)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


@dataclass
class Optimizer:
    """Decoupled weight-decay adaptive-moment updates over a flat param dict."""

    cfg: nn.TrainConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for key, p in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m = self.m[key]
            v = self.v[key]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + self.cfg.weight_decay * p)


def _trainable_views(
    hiding: nn.NetParams,
    reveal_net: nn.NetParams,
    mlps: list[mcot.MlpTransport] | None,
    b2_stores: list[np.ndarray],
) -> dict[str, np.ndarray]:
    """Flat name -> array map over every trainable tensor.

    Scalar MLP output biases live in the caller's 1-element stores so the
    optimizer can mutate them in place like everything else.
    """
    views = {}
    for name, arr in hiding.params.items():
        views["h." + name] = arr
    for name, arr in reveal_net.params.items():
        views["r." + name] = arr
    if mlps is not None:
        for i, m in enumerate(mlps):
            views[f"m{i}.w1"] = m.w1
            views[f"m{i}.b1"] = m.b1
            views[f"m{i}.w2"] = m.w2
            views[f"m{i}.b2"] = b2_stores[i]
    return views


def _flat_grads(result: nn.StepResult) -> dict[str, np.ndarray]:
    grads = {}
    for name, g in result.hiding_grads.items():
        grads["h." + name] = g
    for name, g in result.reveal_grads.items():
        grads["r." + name] = g
    if result.mlp_grads is not None:
        for i, g in enumerate(result.mlp_grads):
            grads[f"m{i}.w1"] = g["w1"]
            grads[f"m{i}.b1"] = g["b1"]
            grads[f"m{i}.w2"] = g["w2"]
            grads[f"m{i}.b2"] = np.asarray(g["b2"], dtype=np.float64).reshape(1)
    return grads


# --- the loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    hiding: nn.NetParams
    reveal_net: nn.NetParams
    mlps: list[mcot.MlpTransport] | None
    history: list[dict]
    epochs_done: int


def init_mlps(cfg: nn.TrainConfig, channels: int) -> list[mcot.MlpTransport]:
    return [
        mcot.init_mlp(cfg.mlp_hidden, SeededRng(derive_seed(cfg.seed, 4, i)))
        for i in range(channels)
    ]


EVAL_PAIRS = 4


def _eval_row(
    images: list[np.ndarray],
    hiding: nn.NetParams,
    reveal_net: nn.NetParams,
    cfg: nn.TrainConfig,
) -> dict:
    """Fixed probe pairs scored after each epoch; the noise seeds never vary.

    Averaging over a few pairs keeps the reported quality from hinging on a
    single cover/secret draw.
    """
    pairs = min(EVAL_PAIRS, len(images) // 2)
    acc = {"psnr_cover_stego": 0.0, "psnr_secret_recovery": 0.0,
           "ssim_cover_stego": 0.0, "ssim_secret_recovery": 0.0}
    for k in range(pairs):
        cover = center_crop(images[2 * k], cfg.patch_size)
        secret = center_crop(images[2 * k + 1], cfg.patch_size)
        stego, result = nn.hide(cover, secret, hiding, use_mcot=cfg.use_mcot)
        recovery = nn.reveal(stego, result.plans if cfg.use_mcot else None, reveal_net)
        acc["psnr_cover_stego"] += mt.psnr_y(cover, stego) / pairs
        acc["psnr_secret_recovery"] += mt.psnr_y(secret, recovery) / pairs
        try:
            acc["ssim_cover_stego"] += mt.ssim(cover, stego) / pairs
            acc["ssim_secret_recovery"] += mt.ssim(secret, recovery) / pairs
        except ValueError:
            acc["ssim_cover_stego"] = math.nan
            acc["ssim_secret_recovery"] = math.nan
    return acc


def train(
    images: list[np.ndarray],
    cfg: nn.TrainConfig,
    hiding: nn.NetParams | None = None,
    reveal_net: nn.NetParams | None = None,
    mlps: list[mcot.MlpTransport] | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Run cfg.epochs epochs; returns nets, surrogates and per-epoch history.

    Passing nets in (with start_epoch) continues a previous run: epoch
    numbering and the cosine horizon extend instead of restarting.
    """
    cfg.validate()
    if len(images) < 2:
        raise DatasetError("training needs at least 2 images to draw distinct pairs")
    if hiding is None:
        hiding = nn.build_hiding_net(cfg)
    if reveal_net is None:
        reveal_net = nn.build_reveal_net(cfg)
    if cfg.use_mcot and mlps is None:
        mlps = init_mlps(cfg, hiding.bridge_channels)
    if not cfg.use_mcot:
        mlps = None

    b2_stores = [np.array([m.b2]) for m in mlps] if mlps is not None else []
    params = _trainable_views(hiding, reveal_net, mlps, b2_stores)
    opt = Optimizer(cfg)
    horizon = start_epoch + cfg.epochs
    steps_per_epoch = max(1, len(images) // cfg.batch)
    history = []

    for epoch in range(start_epoch, horizon):
        lr = cosine_lr(epoch, horizon, cfg)
        sums = {"L_h": 0.0, "L_r": 0.0, "L_T": 0.0, "L_total": 0.0}
        for step in range(steps_per_epoch):
            covers = []
            secrets = []
            seeds = []
            for b in range(cfg.batch):
                rng = SeededRng(derive_seed(cfg.seed, epoch, step, b))
                pick = rng.permutation(len(images))
                covers.append(augment(images[pick[0]], cfg.patch_size, rng))
                secrets.append(augment(images[pick[1]], cfg.patch_size, rng))
                seeds.append(hiding.noise_seed)
            result = nn.joint_losses(
                hiding,
                reveal_net,
                mlps,
                np.stack(covers),
                np.stack(secrets),
                cfg,
                seeds,
            )
            opt.step(params, _flat_grads(result), lr)
            if mlps is not None:
                for i, m in enumerate(mlps):
                    m.b2 = float(b2_stores[i][0])
            sums["L_h"] += result.lh
            sums["L_r"] += result.lr
            sums["L_T"] += result.lt
            sums["L_total"] += result.total
        row = {"epoch": epoch, "lr": lr}
        for key, total in sums.items():
            row[key] = total / steps_per_epoch
        row.update(_eval_row(images, hiding, reveal_net, cfg))
        history.append(row)

    return TrainResult(hiding, reveal_net, mlps, history, horizon)


def metrics_csv(history: list[dict]) -> str:
    """Render per-epoch rows with repr floats so identical runs match byte-for-byte."""
    lines = [",".join(CSV_COLUMNS)]
    for row in history:
        cells = [str(int(row["epoch"]))]
        cells += [repr(float(row[c])) for c in CSV_COLUMNS[1:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# --- checkpoints ----------------------------------------------------------------------


def _pack_net(net: nn.NetParams) -> bytes:
    blob = [struct.pack("<IBQI", net.in_channels, int(net.use_skips),
                        net.noise_seed, len(net.stages))]
    for s in net.stages:
        code = 0 if s.spatial_factor < 1 else 1
        blob.append(struct.pack("<IIB", s.in_channels, s.out_channels, code))
    for arr in net.params.values():
        blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(blob)


def _unpack_net(buf: bytes, offset: int) -> tuple[nn.NetParams, int]:
    in_channels, use_skips, noise_seed, n_stages = struct.unpack_from("<IBQI", buf, offset)
    offset += struct.calcsize("<IBQI")
    stages = []
    for _ in range(n_stages):
        cin, cout, code = struct.unpack_from("<IIB", buf, offset)
        offset += struct.calcsize("<IIB")
        stages.append(nn.StageSpec(cin, cout, 0.5 if code == 0 else 2.0))
    params = {}
    for k, s in enumerate(stages):
        prefix = f"enc{k}" if k < nn.ENCODER_STAGES else f"dec{k - nn.ENCODER_STAGES}"
        for suffix, shape in (
            ("w", (s.out_channels, s.in_channels, 3, 3)),
            ("b", (s.out_channels,)),
        ):
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(buf):
                raise CheckpointFormatError("checkpoint truncated inside parameter data")
            params[f"{prefix}.{suffix}"] = (
                np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
                .reshape(shape)
                .copy()
            )
            offset = end
    net = nn.NetParams(stages=stages, params=params, in_channels=in_channels,
                       use_skips=bool(use_skips), noise_seed=noise_seed)
    return net, offset


def save_checkpoint(
    path,
    hiding: nn.NetParams,
    reveal_net: nn.NetParams,
    mlps: list[mcot.MlpTransport] | None,
    cfg: nn.TrainConfig,
    epochs_done: int,
) -> None:
    blob = [
        MODEL_MAGIC,
        struct.pack(
            "<BBIIII",
            MODEL_VERSION,
            int(cfg.use_mcot),
            cfg.patch_size,
            cfg.base_width,
            cfg.mlp_hidden,
            epochs_done,
        ),
        _pack_net(hiding),
        _pack_net(reveal_net),
    ]
    if cfg.use_mcot:
        if mlps is None:
            raise ValueError("use_mcot checkpoints must include the MLP surrogates")
        blob.append(struct.pack("<II", len(mlps), mlps[0].hidden))
        for m in mlps:
            for arr in (m.w1, m.b1, m.w2, np.array([m.b2])):
                blob.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path) -> tuple[nn.NetParams, nn.NetParams, list[mcot.MlpTransport] | None, dict]:
    """Restore both nets, the surrogates, and the config header fields."""
    buf = Path(path).read_bytes()
    if len(buf) < 4 + struct.calcsize("<BBIIII"):
        raise CheckpointFormatError("checkpoint shorter than its fixed header")
    if buf[:4] != MODEL_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {buf[:4]!r}")
    version, use_mcot, patch, base, hidden, epochs_done = struct.unpack_from("<BBIIII", buf, 4)
    if version != MODEL_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    offset = 4 + struct.calcsize("<BBIIII")
    hiding, offset = _unpack_net(buf, offset)
    reveal_net, offset = _unpack_net(buf, offset)
    mlps = None
    if use_mcot:
        if offset + 8 > len(buf):
            raise CheckpointFormatError("checkpoint truncated before MLP block")
        n_mlps, mlp_hidden = struct.unpack_from("<II", buf, offset)
        offset += 8
        mlps = []
        for _ in range(n_mlps):
            arrs = []
            for count in (mlp_hidden, mlp_hidden, mlp_hidden, 1):
                end = offset + 8 * count
                if end > len(buf):
                    raise CheckpointFormatError("checkpoint truncated inside MLP data")
                arrs.append(np.frombuffer(buf, dtype="<f8", count=count, offset=offset).copy())
                offset = end
            mlps.append(
                mcot.MlpTransport(
                    w1=arrs[0][:, None],
                    b1=arrs[1],
                    w2=arrs[2][None, :],
                    b2=float(arrs[3][0]),
                    hidden=mlp_hidden,
                )
            )
    if offset != len(buf):
        raise CheckpointFormatError("checkpoint has trailing bytes")
    for net in (hiding, reveal_net):
        for arr in net.params.values():
            if not np.all(np.isfinite(arr)):
                raise CheckpointFormatError("checkpoint holds non-finite parameters")
    meta = {
        "use_mcot": bool(use_mcot),
        "patch_size": patch,
        "base_width": base,
        "mlp_hidden": hidden,
        "epochs_done": epochs_done,
    }
    return hiding, reveal_net, mlps, meta
