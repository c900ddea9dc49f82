"""Per-channel transport of latent rows onto Gaussian noise, and its MLP surrogate.

Each channel row of a latent matrix is matched against a freshly drawn
standard-normal row of the same length; the transported row is the noise
gathered through the matching, so its empirical distribution is exactly the
noise's (single peak) regardless of how multimodal the latent was. The
matchings double as a serializable key for the reveal path, and a small
noise-to-latent MLP is fit per channel as a smooth surrogate of the inverse
map; its fit quality is the transport loss used as a training signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import SeededRng
from . import transport as tr

SMOOTHING_EPS = 1e-6  # smooths |d| as sqrt(d^2 + eps^2); loss floor at a perfect fit

KEY_MAGIC = b"MCOT"
KEY_VERSION = 1


class KeyFormatError(Exception):
    """Key file is malformed: bad magic/version, wrong size, or invalid block."""


class DivergenceError(Exception):
    """MLP fit produced a non-finite loss."""


@dataclass
class McotResult:
    """Outcome of transporting every channel of a latent matrix.

    transported row i is the channel's matched noise (a permutation of
    noise row i in exact mode, a barycentric image in entropic mode).
    """

    transported: np.ndarray  # (channels, points)
    plans: list[tr.TransportPlan]
    noise: np.ndarray  # (channels, points), the drawn targets
    key_path: str | None = None


@dataclass
class MlpTransport:
    """2-layer ReLU MLP mapping a noise value to a latent value, elementwise."""

    w1: np.ndarray  # (hidden, 1)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (1, hidden)
    b2: float
    hidden: int

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64).reshape(self.hidden, 1)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(self.hidden)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(1, self.hidden)
        self.b2 = float(self.b2)


def mlp_forward(mlp: MlpTransport, z: np.ndarray) -> np.ndarray:
    """Apply w2 . relu(w1 z + b1) + b2 to each entry of a row."""
    z = np.asarray(z, dtype=np.float64)
    pre = z[:, None] * mlp.w1[:, 0][None, :] + mlp.b1[None, :]
    return np.maximum(pre, 0.0) @ mlp.w2[0] + mlp.b2


def draw_noise(rng: SeededRng, channels: int, points: int) -> np.ndarray:
    """Standard-normal matrix with one deterministic substream per channel.

    Row i comes from a fresh stream seeded with rng.seed XOR i, so channels
    can be processed independently and the draw depends only on the seed.
    Pass a distinctly seeded generator per call to get distinct noise.
    """
    noise = np.empty((channels, points), dtype=np.float64)
    for i in range(channels):
        noise[i] = SeededRng(rng.seed ^ i).normals(points)
    return noise


def mcot_forward(
    latent: np.ndarray,
    rng: SeededRng,
    mode: str = "exact",
    epsilon: float | None = None,
) -> McotResult:
    """Transport every latent row onto a drawn noise row of the same length.

    mode "exact" matches by permutation (rows become exact noise multisets);
    mode "entropic" uses the regularized solver at the given epsilon and
    produces barycentric images instead. Solver errors propagate.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2:
        raise ValueError(f"latent matrix must be (channels, points), got {latent.shape}")
    if not np.all(np.isfinite(latent)):
        raise ValueError("latent matrix contains non-finite entries")
    if mode not in ("exact", "entropic"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "entropic" and (epsilon is None or epsilon <= 0):
        raise ValueError("entropic mode needs a positive epsilon")

    channels, points = latent.shape
    noise = draw_noise(rng, channels, points)
    transported = np.empty_like(latent)
    plans = []
    for i in range(channels):
        x = tr.DiscreteDistribution(latent[i])
        y = tr.DiscreteDistribution(noise[i])
        c = tr.cost_matrix(x, y)
        if mode == "exact":
            plan = tr.solve_exact(c)
        else:
            plan = tr.solve_entropic(c, epsilon)
        transported[i] = tr.apply_plan(plan, x, y)
        plans.append(plan)
    return McotResult(transported=transported, plans=plans, noise=noise)


# --- key serialization ----------------------------------------------------


def export_key(result: McotResult, path: str) -> None:
    """Write the channel matchings as a binary key. Exact plans only."""
    perms = []
    for plan in result.plans:
        if plan.kind != tr.KIND_PERMUTATION or plan.perm is None:
            raise KeyFormatError("only exact permutation plans are serializable as keys")
        perms.append(plan.perm)
    channels = len(perms)
    if channels == 0:
        raise KeyFormatError("no plans to serialize")
    points = perms[0].size
    blob = bytearray()
    blob += KEY_MAGIC
    blob += bytes([KEY_VERSION])
    blob += struct.pack("<II", channels, points)
    for perm in perms:
        blob += np.asarray(perm, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    result.key_path = path


def import_key(path: str) -> list[tr.TransportPlan]:
    """Read a key file back into permutation plans.

    Costs are not serialized, so total_cost on the returned plans is nan.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    header = len(KEY_MAGIC) + 1 + 8
    if len(data) < header:
        raise KeyFormatError("key file shorter than its header")
    if data[: len(KEY_MAGIC)] != KEY_MAGIC:
        raise KeyFormatError(f"bad magic {data[:len(KEY_MAGIC)]!r}")
    version = data[len(KEY_MAGIC)]
    if version != KEY_VERSION:
        raise KeyFormatError(f"unsupported key version {version}")
    channels, points = struct.unpack_from("<II", data, len(KEY_MAGIC) + 1)
    if channels < 1 or points < 1:
        raise KeyFormatError(f"degenerate key dimensions {channels}x{points}")
    expected = header + 4 * channels * points
    if len(data) != expected:
        raise KeyFormatError(f"key payload is {len(data) - header} bytes, expected {expected - header}")
    plans = []
    for i in range(channels):
        start = header + 4 * i * points
        block = np.frombuffer(data, dtype="<u4", count=points, offset=start)
        if block.size and int(block.max()) >= points:
            raise KeyFormatError(f"channel {i}: index {int(block.max())} out of range for N={points}")
        perm = block.astype(np.int64)
        if np.unique(perm).size != points:
            raise KeyFormatError(f"channel {i}: block is not a permutation")
        coupling = np.zeros((points, points))
        coupling[np.arange(points), perm] = 1.0 / points
        plans.append(
            tr.TransportPlan(
                coupling=coupling,
                total_cost=float("nan"),
                kind=tr.KIND_PERMUTATION,
                perm=perm,
            )
        )
    return plans


# --- MLP surrogate fit and transport loss ---------------------------------


def _channel_loss_and_grads(
    mlp: MlpTransport, z: np.ndarray, target: np.ndarray
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Smoothed mean absolute deviation of mlp(z) from target, with gradients.

    Returns (loss, parameter gradients, d loss / d target).
    """
    n = z.size
    # overflow to inf is fine here; callers detect it as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        pre = z[:, None] * mlp.w1[:, 0][None, :] + mlp.b1[None, :]  # (n, hidden)
        act = np.maximum(pre, 0.0)
        out = act @ mlp.w2[0] + mlp.b2
        d = out - target
        s = np.sqrt(d * d + SMOOTHING_EPS * SMOOTHING_EPS)
    loss = float(np.mean(s))
    dout = d / s / n
    grads = {
        "w2": (dout @ act)[None, :],
        "b2": np.array(float(np.sum(dout))),
        "w1": ((dout[:, None] * mlp.w2[0][None, :] * (pre > 0.0)) * z[:, None]).sum(axis=0)[:, None],
        "b1": (dout[:, None] * mlp.w2[0][None, :] * (pre > 0.0)).sum(axis=0),
    }
    return loss, grads, -dout


def init_mlp(hidden: int, rng: SeededRng) -> MlpTransport:
    """He-style init for the 1 -> hidden -> 1 map; biases start at zero."""
    if hidden < 1:
        raise ValueError("hidden must be at least 1")
    w1 = rng.normals(hidden) * np.sqrt(2.0)
    w2 = rng.normals(hidden) * np.sqrt(2.0 / hidden)
    return MlpTransport(
        w1=w1[:, None], b1=np.zeros(hidden), w2=w2[None, :], b2=0.0, hidden=hidden
    )


def fit_mlp(
    noise_row: np.ndarray,
    latent_row: np.ndarray,
    hidden: int = 64,
    lr: float = 1e-2,
    epochs: int = 2000,
    rng: SeededRng | None = None,
) -> tuple[MlpTransport, list[float]]:
    """Full-batch gradient descent fitting mlp(noise_row) toward latent_row.

    noise_row must already be aligned with latent_row (pass the transported
    row so element j of both refers to the same matched pair). The step size
    halves when 50 epochs pass without relative improvement of 1e-4.
    """
    z = np.asarray(noise_row, dtype=np.float64).ravel()
    target = np.asarray(latent_row, dtype=np.float64).ravel()
    if z.size != target.size:
        raise ValueError(f"row lengths differ: {z.size} vs {target.size}")
    if rng is None:
        rng = SeededRng(0)
    mlp = init_mlp(hidden, rng)
    mlp.b2 = float(np.mean(target))  # start at the bias-only optimum
    history = []
    best = np.inf
    stale = 0
    step = lr
    for epoch in range(epochs):
        loss, grads, _ = _channel_loss_and_grads(mlp, z, target)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        history.append(loss)
        if loss < best * (1.0 - 1e-4):
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= 50:
                step *= 0.5
                stale = 0
        mlp.w1 -= step * grads["w1"]
        mlp.b1 -= step * grads["b1"]
        mlp.w2 -= step * grads["w2"]
        mlp.b2 -= step * float(grads["b2"])
    return mlp, history


def transport_loss(latents: np.ndarray, mlps: list[MlpTransport], noise: np.ndarray) -> float:
    """Mean over channels of the smoothed mean absolute deviation of mlp(noise)."""
    loss, _, _ = transport_loss_and_grads(latents, mlps, noise)
    return loss


def transport_loss_and_grads(
    latents: np.ndarray, mlps: list[MlpTransport], noise: np.ndarray
) -> tuple[float, list[dict[str, np.ndarray]], np.ndarray]:
    """transport_loss plus gradients w.r.t. every MLP parameter and the latents.

    Lets an outer optimizer train the surrogates jointly with the networks.
    """
    latents = np.asarray(latents, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if latents.shape != noise.shape:
        raise ValueError(f"latents {latents.shape} and noise {noise.shape} differ")
    if latents.ndim != 2 or len(mlps) != latents.shape[0]:
        raise ValueError("need one MLP per latent channel")
    channels = latents.shape[0]
    total = 0.0
    grads = []
    d_latents = np.empty_like(latents)
    for i in range(channels):
        loss_i, g_i, d_target = _channel_loss_and_grads(mlps[i], noise[i], latents[i])
        total += loss_i
        for key in g_i:
            g_i[key] = g_i[key] / channels
        grads.append(g_i)
        d_latents[i] = d_target / channels
    return total / channels, grads, d_latents


# --- peak structure of a row ----------------------------------------------


@dataclass
class UnimodalityReport:
    """Histogram of a row plus the peak count of its smoothed shape."""

    counts: np.ndarray
    bin_edges: np.ndarray
    smoothed: np.ndarray
    peak_count: int

    def to_csv(self) -> str:
        lines = ["bin_left,bin_right,count"]
        for left, right, count in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"{left!r},{right!r},{int(count)}")
        return "\n".join(lines) + "\n"


def _strict_peaks(values: np.ndarray) -> int:
    """Strict local maxima after collapsing plateaus; ends compare against 0."""
    runs = [float(values[0])]
    for v in values[1:]:
        if float(v) != runs[-1]:
            runs.append(float(v))
    runs = [0.0] + runs + [0.0]
    return sum(
        1
        for i in range(1, len(runs) - 1)
        if runs[i] > runs[i - 1] and runs[i] > runs[i + 1] and runs[i] > 0.0
    )


def unimodality_report(row: np.ndarray, bins: int = 16) -> UnimodalityReport:
    """Bin a row and count the peaks of the 3-bin-averaged histogram.

    Smoothing pads with zeros, so a mode sitting in an edge bin still
    registers; plateaus created by the averaging count as one peak.
    """
    row = np.asarray(row, dtype=np.float64).ravel()
    if row.size < 8:
        raise ValueError(f"need at least 8 samples, got {row.size}")
    counts, edges = np.histogram(row, bins=bins)
    padded = np.concatenate(([0.0], counts.astype(np.float64), [0.0]))
    smoothed = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    return UnimodalityReport(
        counts=counts,
        bin_edges=edges,
        smoothed=smoothed,
        peak_count=_strict_peaks(smoothed),
    )
