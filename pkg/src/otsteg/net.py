"""Hiding and reveal convolutional networks with a transport bridge.

Both nets share one shape recipe: four 3x3 stride-2 encoder stages that
double the channel count (base width 8 gives 8-16-32-64 from the input),
a bridge acting on the bottleneck, and four nearest-upsample + 3x3 decoder
stages back to three output channels, clamped to [0, 1]. The hiding net
eats cover and secret concatenated (6 channels) and uses concatenative
skip connections; the reveal net eats the stego image (3 channels) and is
deliberately skip-free so everything it learns must pass through the
key-permuted bridge. All forward/backward passes are hand-written numpy
and verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import mcot
from . import transport as tr
from .core import SeededRng, derive_seed, require_image

LEAKY_SLOPE = 0.2
ENCODER_STAGES = 4


class KeyMismatchError(Exception):
    """Key plans do not fit the network's bridge shape."""


@dataclass
class TrainConfig:
    """Hyperparameters for the optimizer, schedule, and architecture."""

    epochs: int = 50
    batch: int = 4
    seed: int = 0
    patch_size: int = 32
    base_width: int = 8
    use_mcot: bool = True
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    charbonnier_eps: float = 1e-6
    charbonnier_literal: bool = False
    mlp_hidden: int = 8

    def validate(self) -> "TrainConfig":
        if self.patch_size % 16 != 0 or self.patch_size < 16:
            raise ValueError(f"patch_size must be a positive multiple of 16, got {self.patch_size}")
        if self.epochs < 1 or self.batch < 1 or self.base_width < 1 or self.mlp_hidden < 1:
            raise ValueError("epochs, batch, base_width, and mlp_hidden must be positive")
        if not (0 < self.lr_final <= self.lr_init):
            raise ValueError("need 0 < lr_final <= lr_init")
        if self.charbonnier_eps <= 0:
            raise ValueError("charbonnier_eps must be positive")
        return self


@dataclass
class StageSpec:
    in_channels: int
    out_channels: int
    spatial_factor: float  # 0.5 halves resolution, 2.0 doubles it


@dataclass
class NetParams:
    """Stage layout plus a flat name-to-array parameter dict.

    Dict insertion order is the declaration order used by checkpoints:
    enc0.w, enc0.b, ..., dec3.w, dec3.b.
    """

    stages: list[StageSpec]
    params: dict[str, np.ndarray]
    in_channels: int
    use_skips: bool
    # One noise realization is bound to the model at build time. Training,
    # eval and hide all transport onto it, so the correct key always restores
    # the bridge arrangement the decoder was trained on; a wrong key cannot.
    noise_seed: int = 0

    @property
    def bridge_channels(self) -> int:
        return self.stages[ENCODER_STAGES - 1].out_channels

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _init_params(stages: list[StageSpec], rng: SeededRng) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    last = len(stages) - 1
    for k, stage in enumerate(stages):
        name = f"enc{k}" if k < ENCODER_STAGES else f"dec{k - ENCODER_STAGES}"
        fan_in = stage.in_channels * 9
        scale = np.sqrt(2.0 / fan_in)
        if k == last:
            # small weights and a mid-range bias keep the initial output
            # away from the clamp boundaries
            scale *= 0.1
        w = rng.normals(stage.out_channels * stage.in_channels * 9).reshape(
            stage.out_channels, stage.in_channels, 3, 3
        ) * scale
        b = np.full(stage.out_channels, 0.5) if k == last else np.zeros(stage.out_channels)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def _stage_plan(in_channels: int, base_width: int, use_skips: bool) -> list[StageSpec]:
    widths = [base_width * 2**k for k in range(ENCODER_STAGES)]
    stages = [StageSpec(in_channels, widths[0], 0.5)]
    for k in range(ENCODER_STAGES - 1):
        stages.append(StageSpec(widths[k], widths[k + 1], 0.5))
    up_in = widths[::-1]  # 64, 32, 16, 8 at base width 8
    for k in range(ENCODER_STAGES):
        cin = up_in[k]
        if use_skips and k < ENCODER_STAGES - 1:
            cin += up_in[k + 1]  # concatenated encoder activation
        cout = 3 if k == ENCODER_STAGES - 1 else up_in[k + 1]
        stages.append(StageSpec(cin, cout, 2.0))
    return stages


def build_hiding_net(cfg: TrainConfig) -> NetParams:
    """Cover-and-secret to stego net: 6 input channels, skip connections."""
    cfg.validate()
    stages = _stage_plan(6, cfg.base_width, use_skips=True)
    rng = SeededRng(derive_seed(cfg.seed, 1))
    net = NetParams(stages, _init_params(stages, rng), in_channels=6, use_skips=True,
                    noise_seed=derive_seed(cfg.seed, 5))
    # The first decoder stage starts blind to the bridge: its input slice is
    # zeroed so early training leans on the skip path and only grows bridge
    # weights where they pay off. Without this the decoder is dominated at
    # init by whatever scale the bridge emits.
    net.params["dec0.w"][:, : net.bridge_channels] = 0.0
    return net


def build_reveal_net(cfg: TrainConfig) -> NetParams:
    """Stego to recovery net: 3 input channels, no skips, key-fed bridge."""
    cfg.validate()
    stages = _stage_plan(3, cfg.base_width, use_skips=False)
    rng = SeededRng(derive_seed(cfg.seed, 2))
    return NetParams(stages, _init_params(stages, rng), in_channels=3, use_skips=False,
                     noise_seed=derive_seed(cfg.seed, 5))


# --- primitive layers ------------------------------------------------------

_COL_INDEX_CACHE: dict[tuple, np.ndarray] = {}


def _col_indices(cin: int, h: int, w: int, stride: int) -> np.ndarray:
    """Flat indices into the zero-padded (cin, h+2, w+2) plane per column entry."""
    key = (cin, h, w, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2, w + 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    c = np.arange(cin)[None, None, :, None, None] * (hp * wp)
    r = (np.arange(ho) * stride)[:, None, None, None, None] + np.arange(3)[None, None, None, :, None]
    q = (np.arange(wo) * stride)[None, :, None, None, None] + np.arange(3)[None, None, None, None, :]
    flat = (c + r * wp + q).reshape(ho * wo, cin * 9)
    _COL_INDEX_CACHE[key] = flat
    return flat


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """3x3 convolution with zero padding 1; x is (batch, cin, h, w)."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, ho * wo, cin * 9)
    out = cols @ w.reshape(cout, -1).T + b
    out = out.transpose(0, 2, 1).reshape(bsz, cout, ho, wo)
    return out, (cols, x.shape, w, stride, ho, wo)


def conv_backward(dout: np.ndarray, cache):
    cols, x_shape, w, stride, ho, wo = cache
    bsz, cin, h, wd = x_shape
    cout = w.shape[0]
    dmat = dout.reshape(bsz, cout, ho * wo).transpose(0, 2, 1)  # (b, hw, cout)
    dw = np.tensordot(dmat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dmat.sum(axis=(0, 1))
    dcols = dmat @ w.reshape(cout, -1)  # (b, hw, cin*9)
    idx = _col_indices(cin, h, wd, stride).ravel()
    hp, wp = h + 2, wd + 2
    dxp = np.empty((bsz, cin, hp, wp))
    for i in range(bsz):
        dxp[i] = np.bincount(idx, weights=dcols[i].ravel(), minlength=cin * hp * wp).reshape(
            cin, hp, wp
        )
    return dxp[:, :, 1:-1, 1:-1], dw, db


def leaky_forward(z: np.ndarray):
    mask = z > 0.0
    return np.where(mask, z, LEAKY_SLOPE * z), mask


def leaky_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dout, LEAKY_SLOPE * dout)


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    bsz, c, h2, w2 = dout.shape
    return dout.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# --- bridges ----------------------------------------------------------------


class IdentityBridge:
    """Pass-through bridge used by the no-transport ablation."""

    def forward(self, latent: np.ndarray) -> np.ndarray:
        self.latent = latent
        return latent

    def backward(self, dbridged: np.ndarray) -> np.ndarray:
        return dbridged


class InjectBridge:
    """Replace the latent with precomputed values; inference only."""

    def __init__(self, values: np.ndarray):
        self.values = values

    def forward(self, latent: np.ndarray) -> np.ndarray:
        self.latent = latent
        return self.values.reshape(latent.shape)

    def backward(self, dbridged: np.ndarray) -> np.ndarray:
        return np.zeros_like(dbridged)


class McotBridge:
    """Transport bridge: swap each channel row for rank-matched fresh noise.

    One seed per sample; noise and matchings agree exactly with
    mcot.mcot_forward on the same seed. grad_mode "straight_through" copies
    the downstream gradient onto the latent (the matching is monotone, so
    pushing a latent entry pushes its matched noise rank the same way);
    "stop" returns zeros, the true gradient of the substituted forward,
    which is what finite differences can verify.
    """

    def __init__(self, seeds: list[int], grad_mode: str = "straight_through",
                 fixed: tuple[np.ndarray, np.ndarray] | None = None):
        if grad_mode not in ("straight_through", "stop"):
            raise ValueError(f"unknown grad_mode {grad_mode!r}")
        self.seeds = list(seeds)
        self.grad_mode = grad_mode
        self.fixed = fixed
        self.noise: np.ndarray | None = None  # (b, c, n)
        self.perms: np.ndarray | None = None  # (b, c, n)
        self.latents: np.ndarray | None = None
        self.transported: np.ndarray | None = None

    def forward(self, latent: np.ndarray) -> np.ndarray:
        bsz, c, h, w = latent.shape
        n = h * w
        lat = latent.reshape(bsz, c, n)
        if self.fixed is not None:
            noise, perms = self.fixed
        else:
            if len(self.seeds) != bsz:
                raise ValueError(f"bridge has {len(self.seeds)} seeds for batch {bsz}")
            noise = np.empty((bsz, c, n))
            for i, seed in enumerate(self.seeds):
                noise[i] = mcot.draw_noise(SeededRng(seed), c, n)
            order_x = np.argsort(lat, axis=-1, kind="stable")
            order_y = np.argsort(noise, axis=-1, kind="stable")
            perms = np.empty_like(order_x)
            np.put_along_axis(perms, order_x, order_y, axis=-1)
        transported = np.take_along_axis(noise, perms, axis=-1)
        self.noise, self.perms = noise, perms
        self.latents, self.transported = lat, transported
        return transported.reshape(latent.shape)

    def backward(self, dbridged: np.ndarray) -> np.ndarray:
        if self.grad_mode == "stop":
            return np.zeros_like(dbridged)
        return dbridged


class KeyBridge:
    """Reveal-side bridge: rearrange each channel row by the inverted matching."""

    def __init__(self, perms: np.ndarray):
        self.perms = np.asarray(perms)
        if self.perms.ndim != 3:
            raise ValueError("perms must be (batch, channels, points)")
        self.inv = np.empty_like(self.perms)
        np.put_along_axis(
            self.inv, self.perms, np.broadcast_to(np.arange(self.perms.shape[-1]), self.perms.shape), axis=-1
        )

    def forward(self, latent: np.ndarray) -> np.ndarray:
        bsz, c, h, w = latent.shape
        if self.perms.shape != (bsz, c, h * w):
            raise KeyMismatchError(
                f"key shape {self.perms.shape} does not fit bridge ({bsz}, {c}, {h * w})"
            )
        lat = latent.reshape(bsz, c, h * w)
        return np.take_along_axis(lat, self.inv, axis=-1).reshape(latent.shape)

    def backward(self, dbridged: np.ndarray) -> np.ndarray:
        shape = dbridged.shape
        d = dbridged.reshape(self.perms.shape)
        return np.take_along_axis(d, self.perms, axis=-1).reshape(shape)


# --- forward / backward ------------------------------------------------------


@dataclass
class NetCache:
    conv: list
    leaky: list
    skips_used: list[bool]
    bridge: object | None
    latent_shape: tuple
    clamp_pre: np.ndarray
    x_shape: tuple


def net_forward(net: NetParams, x: np.ndarray, bridge=None):
    """Run the net on a (batch, in_channels, h, w) tensor; returns (y, cache)."""
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ValueError(f"expected (batch, {net.in_channels}, h, w), got {x.shape}")
    conv_caches = []
    leaky_caches = []
    acts = []
    h = x
    for k in range(ENCODER_STAGES):
        z, cc = conv_forward(h, net.params[f"enc{k}.w"], net.params[f"enc{k}.b"], stride=2)
        h, lc = leaky_forward(z)
        conv_caches.append(cc)
        leaky_caches.append(lc)
        acts.append(h)
    latent_shape = h.shape
    if bridge is not None:
        h = bridge.forward(h)
    skips_used = []
    for k in range(ENCODER_STAGES):
        h = upsample2(h)
        used = net.use_skips and k < ENCODER_STAGES - 1
        if used:
            h = np.concatenate([h, acts[ENCODER_STAGES - 2 - k]], axis=1)
        skips_used.append(used)
        z, cc = conv_forward(h, net.params[f"dec{k}.w"], net.params[f"dec{k}.b"], stride=1)
        conv_caches.append(cc)
        if k < ENCODER_STAGES - 1:
            h, lc = leaky_forward(z)
            leaky_caches.append(lc)
        else:
            h = z
            leaky_caches.append(None)
    y = np.clip(h, 0.0, 1.0)
    cache = NetCache(conv_caches, leaky_caches, skips_used, bridge, latent_shape, h, x.shape)
    return y, cache


def net_backward(net: NetParams, cache: NetCache, dy: np.ndarray, latent_extra_grad=None):
    """Gradients of a scalar loss: returns (dx, param grads dict).

    latent_extra_grad, if given, is added to the gradient arriving at the
    bridge input (the encoder-side latent).
    """
    grads: dict[str, np.ndarray] = {}
    dh = np.where((cache.clamp_pre > 0.0) & (cache.clamp_pre < 1.0), dy, 0.0)
    skip_grads: dict[int, np.ndarray] = {}
    for k in range(ENCODER_STAGES - 1, -1, -1):
        lc = cache.leaky[ENCODER_STAGES + k]
        dz = dh if lc is None else leaky_backward(dh, lc)
        dx, dw, db = conv_backward(dz, cache.conv[ENCODER_STAGES + k])
        grads[f"dec{k}.w"] = dw
        grads[f"dec{k}.b"] = db
        if cache.skips_used[k]:
            skip_channels = net.stages[ENCODER_STAGES - 2 - k].out_channels
            skip_grads[ENCODER_STAGES - 2 - k] = dx[:, -skip_channels:]
            dx = dx[:, :-skip_channels]
        dh = upsample2_backward(dx)
    dlatent = cache.bridge.backward(dh) if cache.bridge is not None else dh
    if latent_extra_grad is not None:
        dlatent = dlatent + latent_extra_grad
    dact = dlatent
    for k in range(ENCODER_STAGES - 1, -1, -1):
        if k in skip_grads:
            dact = dact + skip_grads[k]
        dz = leaky_backward(dact, cache.leaky[k])
        dact, dw, db = conv_backward(dz, cache.conv[k])
        grads[f"enc{k}.w"] = dw
        grads[f"enc{k}.b"] = db
    return dact, grads


# --- losses ------------------------------------------------------------------


def charbonnier(a: np.ndarray, b: np.ndarray, eps: float, literal: bool = False):
    """Smoothed deviation between tensors and its gradient w.r.t. a.

    Default form sqrt(mean(d^2) + eps^2): the floor at a = b is exactly eps
    and for a constant difference it reduces to the RMS error. The literal
    variant sqrt(mean(d^2)) + eps^2 keeps the smoothing outside the root.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = a - b
    ms = float(np.mean(d * d))
    if literal:
        root = np.sqrt(ms)
        loss = root + eps * eps
        grad = d / max(root, 1e-300) / d.size
    else:
        loss = float(np.sqrt(ms + eps * eps))
        grad = d / (d.size * loss)
    return loss, grad


def loss_hiding(cover: np.ndarray, stego: np.ndarray, eps: float, literal: bool = False) -> float:
    """How far the stego image strays from the cover."""
    return charbonnier(stego, cover, eps, literal)[0]


def loss_reveal(secret: np.ndarray, recovery: np.ndarray, eps: float, literal: bool = False) -> float:
    """How far the recovered secret strays from the original."""
    return charbonnier(recovery, secret, eps, literal)[0]


def loss_total(lh: float, lr: float, lt: float) -> float:
    """Unweighted three-term sum."""
    for v in (lh, lr, lt):
        if not np.isfinite(v):
            raise ValueError("loss components must be finite")
    return lh + lr + lt


# --- end-to-end step graph ----------------------------------------------------


@dataclass
class StepResult:
    lh: float
    lr: float
    lt: float
    total: float
    stego: np.ndarray
    recovery: np.ndarray
    hiding_grads: dict[str, np.ndarray] | None = None
    reveal_grads: dict[str, np.ndarray] | None = None
    mlp_grads: list[dict[str, np.ndarray]] | None = None
    bridge: McotBridge | None = None


def joint_losses(
    hiding: NetParams,
    reveal_net: NetParams,
    mlps: list[mcot.MlpTransport] | None,
    cover: np.ndarray,
    secret: np.ndarray,
    cfg: TrainConfig,
    sample_seeds: list[int],
    with_grads: bool = True,
    bridge_grad_mode: str = "straight_through",
    fixed_bridge: tuple[np.ndarray, np.ndarray] | None = None,
    transport_feedback: bool = True,
) -> StepResult:
    """One full pass of the combined objective on a batch.

    Computes stego and recovery, the three loss terms, and (optionally)
    gradients for both nets and the per-channel MLP surrogates. The reveal
    net consumes the matchings produced by the hiding bridge, exactly as a
    file key would deliver them.
    """
    if cover.shape != secret.shape:
        raise ValueError("cover and secret batches must share a shape")
    x = np.concatenate([cover, secret], axis=1)
    if cfg.use_mcot:
        hb = McotBridge(sample_seeds, grad_mode=bridge_grad_mode, fixed=fixed_bridge)
    else:
        hb = IdentityBridge()
    stego, hcache = net_forward(hiding, x, hb)
    lh, dlh_dstego = charbonnier(stego, cover, cfg.charbonnier_eps, cfg.charbonnier_literal)

    if cfg.use_mcot:
        rb = KeyBridge(hb.perms)
    else:
        rb = None
    recovery, rcache = net_forward(reveal_net, stego, rb)
    lr, dlr_drec = charbonnier(recovery, secret, cfg.charbonnier_eps, cfg.charbonnier_literal)

    lt = 0.0
    mlp_grads = None
    latent_extra = None
    if cfg.use_mcot:
        if mlps is None:
            raise ValueError("mlps are required when use_mcot is set")
        bsz = cover.shape[0]
        mlp_grads = [
            {"w1": np.zeros_like(m.w1), "b1": np.zeros_like(m.b1),
             "w2": np.zeros_like(m.w2), "b2": np.zeros(())}
            for m in mlps
        ]
        dlat = np.zeros_like(hb.latents)
        for i in range(bsz):
            loss_i, grads_i, dlat_i = mcot.transport_loss_and_grads(
                hb.latents[i], mlps, hb.transported[i]
            )
            lt += loss_i / bsz
            dlat[i] = dlat_i / bsz
            for ch, g in enumerate(grads_i):
                for key in ("w1", "b1", "w2", "b2"):
                    mlp_grads[ch][key] += g[key] / bsz
        if transport_feedback:
            latent_extra = dlat.reshape(hcache.latent_shape)
    total = loss_total(lh, lr, lt)

    result = StepResult(lh=lh, lr=lr, lt=lt, total=total, stego=stego, recovery=recovery,
                        bridge=hb if cfg.use_mcot else None)
    if not with_grads:
        return result
    dstego_from_reveal, rgrads = net_backward(reveal_net, rcache, dlr_drec)
    _, hgrads = net_backward(hiding, hcache, dlh_dstego + dstego_from_reveal, latent_extra)
    result.hiding_grads = hgrads
    result.reveal_grads = rgrads
    result.mlp_grads = mlp_grads
    return result


# --- public hide / reveal ------------------------------------------------------


def hide(
    cover: np.ndarray,
    secret: np.ndarray,
    net: NetParams,
    rng: SeededRng | None = None,
    use_mcot: bool = True,
    mode: str = "exact",
    epsilon: float | None = None,
) -> tuple[np.ndarray, mcot.McotResult]:
    """Embed secret into cover; returns the stego image and the bridge outcome.

    rng=None transports onto the net's own bound noise realization, which is
    what the decoder trained against. mode="entropic" swaps the bridge for
    regularized transport (dense plans, not exportable as a key). With
    use_mcot off, the result carries identity plans so the caller can treat
    both modes uniformly (and still export a key).
    """
    cover = require_image(cover, 3)
    secret = require_image(secret, 3)
    if cover.shape != secret.shape:
        raise ValueError(f"cover {cover.shape} and secret {secret.shape} differ")
    if mode not in ("exact", "entropic"):
        raise ValueError(f"unknown transport mode {mode!r}")
    x = np.concatenate([cover, secret])[None]
    if use_mcot and mode == "entropic":
        if rng is None:
            rng = SeededRng(net.noise_seed)
        probe = IdentityBridge()
        net_forward(net, x, probe)
        c, h, w = probe.latent.shape[1:]
        result = mcot.mcot_forward(
            probe.latent[0].reshape(c, h * w), rng, mode="entropic", epsilon=epsilon
        )
        stego, _ = net_forward(net, x, InjectBridge(result.transported[None]))
        return stego[0], result
    if use_mcot:
        if rng is None:
            rng = SeededRng(net.noise_seed)
        bridge = McotBridge([rng.seed], grad_mode="stop")
        stego, _ = net_forward(net, x, bridge)
        lat, noise, perms = bridge.latents[0], bridge.noise[0], bridge.perms[0]
        plans = []
        for i in range(lat.shape[0]):
            cost = float(np.mean((lat[i] - noise[i][perms[i]]) ** 2))
            n = perms[i].size
            coupling = np.zeros((n, n))
            coupling[np.arange(n), perms[i]] = 1.0 / n
            plans.append(tr.TransportPlan(coupling, cost, tr.KIND_PERMUTATION, perms[i].copy()))
        result = mcot.McotResult(bridge.transported[0].copy(), plans, noise.copy())
    else:
        bridge = IdentityBridge()
        stego, _ = net_forward(net, x, bridge)
        c, h, w = bridge.latent.shape[1:]
        n = h * w
        # identity plans: nothing moved, the noise slot holds the latent itself
        lat = bridge.latent[0].reshape(c, n)
        coupling = np.eye(n) / n
        plans = [
            tr.TransportPlan(coupling.copy(), 0.0, tr.KIND_PERMUTATION, np.arange(n))
            for _ in range(c)
        ]
        result = mcot.McotResult(lat.copy(), plans, lat.copy())
    return stego[0], result


def reveal(stego: np.ndarray, plans: list[tr.TransportPlan] | None, net: NetParams) -> np.ndarray:
    """Recover the secret from a stego image using the key's plans.

    plans=None runs the identity bridge (the no-transport ablation).
    """
    stego = require_image(stego, 3)
    h, w = stego.shape[1:]
    side = h // 2**ENCODER_STAGES
    n = side * (w // 2**ENCODER_STAGES)
    c = net.bridge_channels
    bridge = None
    if plans is not None:
        if len(plans) != c:
            raise KeyMismatchError(f"key has {len(plans)} channels, bridge needs {c}")
        perms = []
        for plan in plans:
            if plan.perm is None or plan.perm.size != n:
                raise KeyMismatchError(
                    f"key rows have {0 if plan.perm is None else plan.perm.size} points, bridge needs {n}"
                )
            perms.append(plan.perm)
        bridge = KeyBridge(np.asarray(perms)[None, :, :])
    y, _ = net_forward(net, stego[None], bridge)
    return y[0]


# --- verification and probes ----------------------------------------------------


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    rng: SeededRng,
    count: int = 32,
    step: float = 1e-5,
    corrupt: str | None = None,
) -> float:
    """Max relative error of analytic gradients vs central differences.

    loss_fn() -> (loss, grads) must read the live arrays in params, so an
    in-place parameter nudge changes its value. count random positions are
    probed. corrupt names a key whose analytic gradient is deliberately
    damaged (and probing is confined to it), to prove the checker can fail.
    """
    keys = [corrupt] if corrupt is not None else sorted(params)
    sizes = [params[k].size for k in keys]
    total = sum(sizes)
    bounds = np.cumsum(sizes)
    _, grads = loss_fn()
    worst = 0.0
    for _ in range(count):
        flat = rng.randint(total)
        which = int(np.searchsorted(bounds, flat, side="right"))
        key = keys[which]
        offset = flat - (0 if which == 0 else int(bounds[which - 1]))
        analytic = float(np.asarray(grads[key]).ravel()[offset])
        if corrupt == key:
            analytic = analytic * 3.0 + 0.1
        array = params[key]
        base = float(array.flat[offset])
        array.flat[offset] = base + step
        up = loss_fn()[0]
        array.flat[offset] = base - step
        down = loss_fn()[0]
        array.flat[offset] = base
        fd = (up - down) / (2.0 * step)
        denom = max(abs(analytic), abs(fd), 1e-6)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst


def perturb_stego(
    stego: np.ndarray,
    kind: str,
    sigma: float = 0.0,
    rng: SeededRng | None = None,
) -> np.ndarray:
    """Deterministic robustness probes: quarter-turn or additive noise."""
    stego = require_image(stego)
    if kind == "rotate90":
        if stego.shape[1] != stego.shape[2]:
            raise ValueError("rotate90 needs a square image")
        return np.rot90(stego, k=1, axes=(1, 2)).copy()
    if kind == "gaussian":
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if sigma == 0.0:
            return stego.copy()
        if rng is None:
            raise ValueError("gaussian perturbation needs an rng")
        noise = rng.normals(stego.size).reshape(stego.shape)
        return np.clip(stego + sigma * noise, 0.0, 1.0)
    raise ValueError(f"unknown perturbation {kind!r}")
