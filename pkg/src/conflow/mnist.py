"""Image-domain demonstrator: joint flow over a grayscale digit and the
residual that turns it into a colored version.

The grayscale branch is the representative; the color residual plays the
conformer role. Coupling is strictly one way: the grayscale UNet never sees
color features, so integrating the same grayscale noise with different
residual noise yields the exact same digit in different colors.

Digits come either from IDX files (the classic handwritten-digit format) or
from a built-in procedural stroke renderer, so the demo runs with no
downloads.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .model import time_embedding

MNIST_CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Procedural digit corpus
# ---------------------------------------------------------------------------

def _arc(cx, cy, r, a0, a1, k=48):
    ang = np.linspace(a0, a1, k)
    return np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)


def _line(x0, y0, x1, y1, k=32):
    s = np.linspace(0.0, 1.0, k)[:, None]
    return np.array([[x0, y0]]) * (1 - s) + np.array([[x1, y1]]) * s


def _poly(pts, k=24):
    pts = np.asarray(pts, dtype=np.float64)
    segs = [
        _line(pts[i, 0], pts[i, 1], pts[i + 1, 0], pts[i + 1, 1], k)
        for i in range(len(pts) - 1)
    ]
    return np.concatenate(segs, axis=0)


# Stroke templates in a unit box, y pointing down.
_PI = math.pi
_DIGIT_STROKES = {
    0: lambda: [_arc(0.5, 0.5, 0.30, 0.0, 2 * _PI, 96) * np.array([1.0, 1.25])
                + np.array([0.0, -0.125])],
    1: lambda: [_line(0.52, 0.12, 0.52, 0.88), _line(0.38, 0.26, 0.52, 0.12)],
    2: lambda: [_arc(0.5, 0.33, 0.22, 0.85 * _PI, 2.35 * _PI, 64),
                _line(0.62, 0.49, 0.26, 0.84), _line(0.26, 0.84, 0.74, 0.84)],
    3: lambda: [_arc(0.47, 0.32, 0.19, -0.75 * _PI, 0.6 * _PI, 56),
                _arc(0.47, 0.68, 0.21, -0.6 * _PI, 0.8 * _PI, 56)],
    4: lambda: [_line(0.63, 0.12, 0.63, 0.88), _line(0.63, 0.12, 0.26, 0.6),
                _line(0.26, 0.6, 0.8, 0.6)],
    5: lambda: [_line(0.7, 0.14, 0.33, 0.14), _line(0.33, 0.14, 0.31, 0.45),
                _arc(0.47, 0.63, 0.22, -0.55 * _PI, 0.85 * _PI, 64)],
    6: lambda: [_poly([(0.65, 0.12), (0.47, 0.34), (0.36, 0.58)]),
                _arc(0.5, 0.66, 0.2, 0.0, 2 * _PI, 72)],
    7: lambda: [_line(0.26, 0.15, 0.75, 0.15), _line(0.75, 0.15, 0.42, 0.88)],
    8: lambda: [_arc(0.5, 0.31, 0.17, 0.0, 2 * _PI, 64),
                _arc(0.5, 0.67, 0.2, 0.0, 2 * _PI, 72)],
    9: lambda: [_arc(0.5, 0.34, 0.19, 0.0, 2 * _PI, 64),
                _poly([(0.69, 0.36), (0.67, 0.6), (0.56, 0.88)])],
}


def _render_strokes(points: np.ndarray, thickness: float, size: int = 28) -> np.ndarray:
    """Distance-field rendering of a point cloud to a [0, 1] grayscale image."""
    px = points * (size - 1)
    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.stack([xs, ys], axis=-1).astype(np.float64)
    d2 = ((grid[:, :, None, :] - px[None, None, :, :]) ** 2).sum(-1)
    dist = np.sqrt(d2.min(axis=2))
    radius = thickness * (size - 1)
    return np.clip(1.0 - (dist - radius) / 1.3, 0.0, 1.0)


def synthetic_digits(
    n: int, rng: np.random.Generator, size: int = 28
) -> tuple[np.ndarray, np.ndarray]:
    """n procedurally drawn digits with random jitter. Returns (images, labels),
    images float32 (n, size, size) in [0, 1]."""
    images = np.zeros((n, size, size), dtype=np.float32)
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        strokes = np.concatenate(_DIGIT_STROKES[int(labels[i])](), axis=0)
        theta = rng.uniform(-0.12, 0.12)
        scale = rng.uniform(0.85, 1.1)
        shift = rng.uniform(-0.05, 0.05, size=2)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        pts = (strokes - 0.5) @ rot.T * scale + 0.5 + shift
        thickness = rng.uniform(0.045, 0.075)
        images[i] = _render_strokes(pts, thickness, size).astype(np.float32)
    return images, labels.astype(np.int64)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped): big-endian header, raw array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise ValueError(f"{path}: bad IDX magic")
    dtypes = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
              0x0D: ">f4", 0x0E: ">f8"}
    if dtype_code not in dtypes:
        raise ValueError(f"{path}: unknown IDX dtype code {dtype_code:#x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    arr = np.frombuffer(data[4 + 4 * ndim:], dtype=dtypes[dtype_code])
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header dims")
    return arr.reshape(dims)


def load_digits(source: str, n: int, seed: int = 0) -> np.ndarray:
    """Images float32 (n, 28, 28) in [0, 1] from 'synthetic' or an IDX path."""
    if source == "synthetic":
        images, _ = synthetic_digits(n, np.random.default_rng(seed))
        return images
    arr = read_idx(source)
    if arr.ndim != 3:
        raise ValueError(f"{source}: expected an image IDX file")
    if len(arr) < n:
        raise ValueError(f"{source}: only {len(arr)} images, need {n}")
    return (arr[:n].astype(np.float32) / 255.0)


def pad32(images: np.ndarray) -> np.ndarray:
    """Zero-pad (n, 28, 28) to (n, 32, 32) so three halvings stay integral."""
    if images.shape[1:] == (32, 32):
        return images
    n, h, w = images.shape
    out = np.zeros((n, 32, 32), dtype=images.dtype)
    oy, ox = (32 - h) // 2, (32 - w) // 2
    out[:, oy:oy + h, ox:ox + w] = images
    return out


def colorize(
    images: np.ndarray, rng: np.random.Generator, color_noise: float = 0.05
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign each digit a base color near pure R, G or B.

    Returns (gray, color, residual): gray (n, 1, H, W), color (n, 3, H, W)
    with channel c equal to weight_c * gray, and residual = gray - color.
    """
    n = images.shape[0]
    base = np.eye(3, dtype=np.float64)[rng.integers(0, 3, size=n)]
    weights = np.clip(base + rng.normal(0.0, color_noise, size=(n, 3)), 0.0, 1.0)
    gray = images[:, None].astype(np.float32)
    color = (weights[:, :, None, None] * gray).astype(np.float32)
    residual = gray - color
    return gray, color, residual.astype(np.float32)


# ---------------------------------------------------------------------------
# Dual UNet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MnistModelConfig:
    base_width: int = 16
    color_width_mult: int = 3
    depth: int = 3
    time_dim: int = 64
    residual_form: str = "gray_minus_color"  # or "color_minus_gray"

    def __post_init__(self):
        if self.residual_form not in ("gray_minus_color", "color_minus_gray"):
            raise ValueError(f"bad residual_form {self.residual_form!r}")
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be positive")


def _groups(ch: int) -> int:
    g = 8
    while ch % g:
        g //= 2
    return max(g, 1)


class _ResBlock(nn.Module):
    """3x3 conv block with a per-block time projection and a skip."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class _Branch(nn.Module):
    """One UNet. ``cross`` lists the widths of features injected from the
    other branch: stem, per-level encoder skips, and bottleneck. An empty
    list means a self-contained net."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        width: int,
        depth: int,
        time_dim: int,
        cross: Optional[list[int]] = None,
    ):
        super().__init__()
        self.depth = depth
        widths = [width * (2 ** i) for i in range(depth)]
        self.cross = cross
        self.stem = nn.Conv2d(c_in, width, 3, padding=1)
        self.time_stem = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.time_dim = time_dim

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        ch = width
        for i, w in enumerate(widths):
            self.enc.append(_ResBlock(ch, w, time_dim))
            ch = w
            if i < depth - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        mid_in = ch + (cross[-1] if cross else 0)
        self.mid = _ResBlock(mid_in, ch, time_dim)

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(depth)):
            skip_w = widths[i] + (cross[1 + i] if cross else 0)
            self.dec.append(_ResBlock(ch + skip_w, widths[i], time_dim))
            ch = widths[i]
            if i > 0:
                self.up.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(ch, ch, 3, padding=1),
                    )
                )

        head_in = width + (cross[0] if cross else 0)
        self.head_norm = nn.GroupNorm(_groups(head_in), head_in)
        self.head = nn.Conv2d(head_in, c_out, 3, padding=1)
        with torch.no_grad():
            self.head.weight.mul_(1e-3)
            self.head.bias.zero_()

    def forward(
        self, x: torch.Tensor, t: torch.Tensor, feed: Optional[dict] = None
    ) -> tuple[torch.Tensor, dict]:
        temb = self.time_stem(time_embedding(t, self.time_dim))
        taps = {"stem": None, "skips": [], "mid": None}
        h = self.stem(x)
        taps["stem"] = h
        skips = []
        for i in range(self.depth):
            h = self.enc[i](h, temb)
            skips.append(h)
            taps["skips"].append(h)
            if i < self.depth - 1:
                h = self.down[i](h)
        if feed is not None:
            h = torch.cat([h, feed["mid"]], dim=1)
        h = self.mid(h, temb)
        taps["mid"] = h
        for j, i in enumerate(reversed(range(self.depth))):
            skip = skips[i]
            if feed is not None:
                skip = torch.cat([skip, feed["skips"][i]], dim=1)
            h = self.dec[j](torch.cat([h, skip], dim=1), temb)
            if i > 0:
                h = self.up[j](h)
        if feed is not None:
            h = torch.cat([h, feed["stem"]], dim=1)
        return self.head(torch.nn.functional.silu(self.head_norm(h))), taps


class DualUnet(nn.Module):
    """Grayscale branch plus a color-residual branch that reads the grayscale
    stem, skips and bottleneck. Information never flows the other way."""

    def __init__(self, cfg: MnistModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        gray_widths = [w] + [w * (2 ** i) for i in range(cfg.depth)] + [w * (2 ** (cfg.depth - 1))]
        self.gray = _Branch(1, 1, w, cfg.depth, cfg.time_dim)
        self.color = _Branch(
            3, 3, w * cfg.color_width_mult, cfg.depth, cfg.time_dim,
            cross=gray_widths[:1 + cfg.depth] + [gray_widths[-1]],
        )

    def forward(
        self, g_t: torch.Tensor, y_t: torch.Tensor, t: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        g_hat, taps = self.gray(g_t, t)
        feed = {"stem": taps["stem"], "skips": taps["skips"], "mid": taps["mid"]}
        y_hat, _ = self.color(y_t, t, feed=feed)
        return g_hat, y_hat


# ---------------------------------------------------------------------------
# Training and sampling
# ---------------------------------------------------------------------------

@dataclass
class MnistTrainConfig:
    seed: int = 0
    n_images: int = 5000
    source: str = "synthetic"
    epochs: int = 4
    batch_size: int = 64
    learning_rate: float = 2e-4
    color_noise: float = 0.05
    model: MnistModelConfig = MnistModelConfig()


def train_mnist(
    cfg: MnistTrainConfig, quiet: bool = True
) -> tuple[DualUnet, list[dict]]:
    """Endpoint-regression training of the dual UNet.

    Per sample: t ~ U(0, 1), both states linearly interpolated between
    standard normal noise and the data, MSE on the two predicted endpoints.
    """
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    images = pad32(load_digits(cfg.source, cfg.n_images, seed=cfg.seed))
    gray, _, residual = colorize(images, rng, cfg.color_noise)
    g1 = torch.from_numpy(gray)
    y1 = torch.from_numpy(residual)

    model = DualUnet(cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: list[dict] = []
    n = len(images)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            gb, yb = g1[idx], y1[idx]
            b = len(idx)
            t = torch.from_numpy(rng.uniform(0.0, 1.0, size=b).astype(np.float32))
            g0 = torch.from_numpy(
                rng.standard_normal(gb.shape).astype(np.float32))
            y0 = torch.from_numpy(
                rng.standard_normal(yb.shape).astype(np.float32))
            tb = t[:, None, None, None]
            g_t = tb * gb + (1 - tb) * g0
            y_t = tb * yb + (1 - tb) * y0
            opt.zero_grad(set_to_none=True)
            g_hat, y_hat = model(g_t, y_t, t)
            loss_g = ((g_hat - gb) ** 2).mean()
            loss_y = ((y_hat - yb) ** 2).mean()
            loss = loss_g + loss_y
            loss.backward()
            opt.step()
            step += 1
            rec = {"step": step, "epoch": epoch, "loss": float(loss.detach()),
                   "loss_gray": float(loss_g.detach()),
                   "loss_color": float(loss_y.detach())}
            history.append(rec)
            if not quiet and step % 20 == 0:
                print(f"step {step} loss {rec['loss']:.4f}")
    return model, history


def save_mnist_checkpoint(path, model: DualUnet, extra: Optional[dict] = None) -> None:
    payload = {
        "version": MNIST_CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_mnist_checkpoint(path) -> DualUnet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != MNIST_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported image checkpoint version {payload.get('version')!r}")
    model = DualUnet(MnistModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model


def sample_mnist(
    model: DualUnet,
    n: int,
    n_steps: int,
    gray_seed: int,
    color_seed: int,
    size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the flow from seeded priors.

    The grayscale prior comes from ``gray_seed`` and the residual prior from
    ``color_seed``. Returns (gray, color) with color reconstructed from the
    residual per the model's configured form.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    g_rng = np.random.default_rng(gray_seed)
    c_rng = np.random.default_rng(color_seed)
    g = torch.from_numpy(g_rng.standard_normal((n, 1, size, size)).astype(np.float32))
    y = torch.from_numpy(c_rng.standard_normal((n, 3, size, size)).astype(np.float32))
    model.eval()
    dt = 1.0 / n_steps
    with torch.no_grad():
        for k in range(n_steps):
            t = k * dt
            tt = torch.full((n,), t, dtype=torch.float32)
            g_hat, y_hat = model(g, y, tt)
            step = min(dt, 1.0 - t)
            g = g + step * (g_hat - g) / (1.0 - t)
            y = y + step * (y_hat - y) / (1.0 - t)
    gray = g.numpy()
    residual = y.numpy()
    if model.cfg.residual_form == "gray_minus_color":
        color = gray - residual
    else:
        color = gray + residual
    return gray, color


def dominant_channels(
    color: np.ndarray, gray: np.ndarray, thresh: float = 0.25
) -> np.ndarray:
    """Per-sample dominant color channel, averaged over lit digit pixels."""
    out = np.zeros(len(color), dtype=np.int64)
    for i in range(len(color)):
        mask = gray[i, 0] > thresh
        if not mask.any():
            mask = gray[i, 0] > gray[i, 0].mean()
        means = color[i][:, mask].mean(axis=1)
        out[i] = int(np.argmax(means))
    return out


def argmax_maps(color: np.ndarray) -> np.ndarray:
    """Per-pixel channel argmax, (n, H, W) int array."""
    return color.argmax(axis=1)


def save_image_grid(path, gray: np.ndarray, color: np.ndarray) -> None:
    """PNG with grayscale samples on the top row, color reconstructions below."""
    from PIL import Image

    n, _, h, w = gray.shape
    canvas = np.zeros((2 * h + 6, n * w + 2 * (n - 1), 3), dtype=np.uint8)
    for i in range(n):
        x0 = i * (w + 2)
        g = np.clip(gray[i, 0], 0.0, 1.0)
        canvas[0:h, x0:x0 + w, :] = (g[:, :, None] * 255).astype(np.uint8)
        c = np.clip(color[i], 0.0, 1.0).transpose(1, 2, 0)
        canvas[h + 6:2 * h + 6, x0:x0 + w, :] = (c * 255).astype(np.uint8)
    Image.fromarray(canvas).save(path)
