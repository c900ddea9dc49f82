"""Image tensors, binary Netpbm I/O, color conversion, and seeded randomness.

An image tensor is a float64 numpy array of shape (channels, height, width),
row-major within each plane, normalized to [0, 1] when loaded from an 8-bit
file. A latent matrix is the (channels, points) flattening of such a tensor.
All functions here are pure; a SeededRng instance is single-consumer.
"""

from __future__ import annotations

import math

import numpy as np

Y_WEIGHTS = (0.299, 0.587, 0.114)  # full-range BT.601 luma


class ImageIOError(Exception):
    """Base class for Netpbm file problems."""


class MalformedHeaderError(ImageIOError):
    """Magic, dimensions, or maxval could not be parsed or are unsupported."""


class ChannelCountError(ImageIOError):
    """File channel count differs from what the caller required."""


class TruncatedPayloadError(ImageIOError):
    """Pixel payload is shorter than the header promises."""


def require_image(t: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Validate an image tensor: 3-D float array, finite, optional channel count."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3:
        raise ValueError(f"image tensor must be (channels, height, width), got shape {t.shape}")
    if channels is not None and t.shape[0] != channels:
        raise ChannelCountError(f"expected {channels} channels, got {t.shape[0]}")
    if not np.all(np.isfinite(t)):
        raise ValueError("image tensor contains non-finite values")
    return t


def _parse_netpbm_header(data: bytes) -> tuple[int, int, int, int]:
    """Parse a P5/P6 header. Returns (channels, width, height, payload offset)."""
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise MalformedHeaderError(f"not a binary PGM/PPM file (magic {magic!r})")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise MalformedHeaderError("unterminated comment in header")
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise MalformedHeaderError(f"expected integer header field, got {token!r}")
        fields.append(int(token))
    # exactly one whitespace byte separates the maxval from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise MalformedHeaderError(f"unsupported maxval {maxval} (only 255)")
    return channels, width, height, pos


def load_image(path, expected_channels: int | None = None) -> np.ndarray:
    """Load a binary PGM (P5) or PPM (P6) file as a [0,1] tensor.

    Values are scaled by 1/255. Raises MalformedHeaderError,
    ChannelCountError, or TruncatedPayloadError, each for its own defect.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    channels, width, height, offset = _parse_netpbm_header(data)
    if expected_channels is not None and channels != expected_channels:
        raise ChannelCountError(
            f"{path}: expected {expected_channels} channels, file has {channels}"
        )
    need = channels * width * height
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header promises {need}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        t = raw.reshape(1, height, width)
    else:
        t = raw.reshape(height, width, 3).transpose(2, 0, 1)
    return t.astype(np.float64) / 255.0


def save_image(t: np.ndarray, path) -> None:
    """Write a 1- or 3-channel tensor as binary PGM/PPM, maxval 255.

    Values are clamped to [0,1], then quantized round-half-up to 8 bits.
    """
    t = require_image(t)
    channels, height, width = t.shape
    if channels not in (1, 3):
        raise ChannelCountError(f"can only save 1 or 3 channels, got {channels}")
    q = quantize_u8(t)
    if channels == 1:
        payload = q.reshape(height, width).tobytes()
        magic = b"P5"
    else:
        payload = q.transpose(1, 2, 0).tobytes()
        magic = b"P6"
    header = magic + b"\n%d %d\n255\n" % (width, height)
    with open(path, "wb") as fh:
        fh.write(header + payload)


def quantize_u8(t: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] and quantize round-half-up to uint8."""
    clamped = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack b's planes after a's. Heights and widths must match."""
    a = require_image(a)
    b = require_image(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial dims differ: {a.shape[1:]} vs {b.shape[1:]}")
    return np.concatenate([a, b], axis=0)


def reshape_to_matrix(t: np.ndarray) -> np.ndarray:
    """Flatten each channel plane row-major: (C,H,W) -> (C, H*W)."""
    t = require_image(t)
    c, h, w = t.shape
    return t.reshape(c, h * w).copy()


def reshape_to_tensor(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of reshape_to_matrix. height*width must equal the point count."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"latent matrix must be 2-D, got shape {m.shape}")
    c, n = m.shape
    if height * width != n:
        raise ValueError(f"{height}x{width} does not factor point count {n}")
    return m.reshape(c, height, width).copy()


def rgb_to_y(t: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B, shape (1,H,W)."""
    t = require_image(t, channels=3)
    w = np.asarray(Y_WEIGHTS)
    y = np.tensordot(w, t, axes=(0, 0))
    return y[np.newaxis, :, :]


# ---------------------------------------------------------------------------
# Seeded randomness.
#
# The raw stream is SplitMix64 used counter-style: draw k is
# mix64(seed + k * GAMMA) with 64-bit wraparound, so a stream is a pure
# function of (seed, position) and the integer sequence is bit-identical on
# every platform. Gaussians come from a Box-Muller adapter on top of it.
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = (1 << 64) - 1
_U53 = float(2.0**-53)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def box_muller(u1: float, u2: float) -> tuple[float, float]:
    """Box-Muller transform of a uniform pair, u1 in (0,1], u2 in [0,1]."""
    r = math.sqrt(-2.0 * math.log(u1))
    theta = 2.0 * math.pi * u2
    return r * math.cos(theta), r * math.sin(theta)


def derive_seed(*parts: int) -> int:
    """Fold integers into one well-mixed 64-bit seed, order-sensitively.

    Used to give each (run, epoch, step, sample) its own independent stream.
    """
    state = np.uint64(len(parts))
    with np.errstate(over="ignore"):
        for part in parts:
            state = _mix64(state + np.uint64(int(part) & _MASK64) * _GAMMA)
            state += _GAMMA
    return int(state)


class SeededRng:
    """Deterministic SplitMix64 stream with uniform and Gaussian adapters.

    Single-consumer: concurrent users must each own an instance. Two
    instances with the same seed produce identical sequences.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._pos = 0

    def _raw(self, count: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + count + 1, dtype=np.uint64)
        self._pos += count
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return float(self._raw(1)[0] >> np.uint64(11)) * _U53

    def uniforms(self, count: int) -> np.ndarray:
        """Array of doubles in [0, 1); same values as repeated uniform() calls."""
        return (self._raw(count) >> np.uint64(11)).astype(np.float64) * _U53

    def randint(self, n: int) -> int:
        """Integer in [0, n) via floor(uniform * n); bias is below 2^-53 * n."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of 0..n-1."""
        p = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            p[i], p[j] = p[j], p[i]
        return p

    def normals(self, count: int) -> np.ndarray:
        """Standard normal samples via Box-Muller on consecutive uniform pairs.

        Consumes two raw draws per pair; for odd counts the trailing sine
        value is discarded, never cached.
        """
        pairs = (count + 1) // 2
        raw = self._raw(2 * pairs)
        # (0,1] for the log, [0,1)-shifted-to-(0,1] for the angle as well
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = ((raw[1::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def normal(self) -> float:
        """Single standard normal draw (consumes one full pair)."""
        return float(self.normals(1)[0])


def gaussian_noise(rng: SeededRng, channels: int, height: int, width: int) -> np.ndarray:
    """i.i.d. standard normal tensor of shape (channels, height, width)."""
    if channels < 1 or height < 1 or width < 1:
        raise ValueError("gaussian_noise dims must be >= 1")
    return rng.normals(channels * height * width).reshape(channels, height, width)
