"""3D encoder-decoder networks (surrogate, generator, victims) in plain numpy.

The networks are fully convolutional UNets: per level two (conv3x3x3,
instance norm, relu) stages, 2x max-pool downsampling, nearest-neighbor
upsampling and skip concatenation, and a 1x1x1 output head. All 3D kernels
span the z axis, so the networks aggregate cross-slice context; that
property is what the protection attacks and must not be reduced to
per-slice 2D convolutions.

Forward/backward passes are hand-written; the conv hot loops go through the
selected kernel backend. A forward with want_ctx=False stores nothing and
is reentrant with frozen parameters.
"""

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backend import get_backend

_NET_STREAM = 7001  # seed-sequence namespace for parameter init


class Param:
    """A named trainable tensor with its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float32)
        self.grad = np.zeros_like(self.value)


@dataclass(frozen=True)
class SegmenterSpec:
    """Surrogate/victim segmenter: Volume (C,D,H,W) -> logits (D,H,W,K)."""

    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 3
    seed: int = 0


@dataclass(frozen=True)
class GeneratorSpec:
    """Noise generator: Volume (C,D,H,W) -> raw noise in [-1,1], same shape."""

    in_channels: int = 1
    base_width: int = 8
    depth: int = 3
    seed: int = 0


VICTIM_VARIANTS = {
    "unet_small": {"base_width": 8, "depth": 3},
    "unet_wide": {"base_width": 16, "depth": 3},
    "unet_deep": {"base_width": 8, "depth": 4},
}


@dataclass(frozen=True)
class VictimSpec:
    """A victim architecture variant; width/depth default from the tag."""

    tag: str = "unet_small"
    in_channels: int = 1
    num_classes: int = 2
    base_width: Optional[int] = None
    depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.tag not in VICTIM_VARIANTS:
            raise ValueError(f"unknown victim tag {self.tag!r}; "
                             f"choose from {sorted(VICTIM_VARIANTS)}")
        defaults = VICTIM_VARIANTS[self.tag]
        if self.base_width is None:
            object.__setattr__(self, "base_width", defaults["base_width"])
        if self.depth is None:
            object.__setattr__(self, "depth", defaults["depth"])


def _bias_col(b):
    return b[:, None, None, None]


class Conv3d:
    """3x3x3 (pad 1) or 1x1x1 convolution, He-initialized."""

    def __init__(self, name, cin, cout, kernel, rng):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        self.kernel = kernel
        fan_in = cin * kernel ** 3
        std = np.sqrt(2.0 / fan_in)
        shape = (cout, cin, 3, 3, 3) if kernel == 3 else (cout, cin)
        self.w = Param(f"{name}.w", rng.normal(0.0, std, size=shape))
        self.b = Param(f"{name}.b", np.zeros(cout))

    def params(self):
        return [self.w, self.b]

    def forward(self, x, ctx):
        if self.kernel == 3:
            xpad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
            y = get_backend().conv3d_k3(xpad, self.w.value) + _bias_col(self.b.value)
            saved = xpad
        else:
            y = np.tensordot(self.w.value, x, axes=1) + _bias_col(self.b.value)
            saved = x
        if ctx is not None:
            ctx[self.w.name] = saved
        return y

    def backward(self, gy, ctx, need_input_grad=True, accumulate_param_grads=True):
        gy = np.ascontiguousarray(gy, dtype=np.float32)
        saved = ctx[self.w.name]
        if self.kernel == 3:
            if accumulate_param_grads:
                self.w.grad += get_backend().conv3d_k3_grad_w(saved, gy)
                self.b.grad += gy.sum(axis=(1, 2, 3))
            if not need_input_grad:
                return None
            # input grad = conv of padded gy with the spatially flipped,
            # channel-transposed kernel
            wt = np.ascontiguousarray(
                self.w.value[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
            )
            gypad = np.pad(gy, ((0, 0), (1, 1), (1, 1), (1, 1)))
            return get_backend().conv3d_k3(gypad, wt)
        if accumulate_param_grads:
            cout, cin = self.w.value.shape
            self.w.grad += gy.reshape(cout, -1) @ saved.reshape(cin, -1).T
            self.b.grad += gy.sum(axis=(1, 2, 3))
        if not need_input_grad:
            return None
        return np.tensordot(self.w.value.T, gy, axes=1)


class InstanceNorm:
    """Per-channel normalization over (D,H,W) with affine scale/shift."""

    EPS = 1e-5

    def __init__(self, name, channels):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, ctx):
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        var = x.var(axis=(1, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xh = (x - mu) * inv
        if ctx is not None:
            ctx[self.name] = (xh, inv)
        return _bias_col(self.gamma.value) * xh + _bias_col(self.beta.value)

    def backward(self, gy, ctx, accumulate_param_grads=True):
        xh, inv = ctx[self.name]
        if accumulate_param_grads:
            self.gamma.grad += (gy * xh).sum(axis=(1, 2, 3))
            self.beta.grad += gy.sum(axis=(1, 2, 3))
        gxh = gy * _bias_col(self.gamma.value)
        m1 = gxh.mean(axis=(1, 2, 3), keepdims=True)
        m2 = (gxh * xh).mean(axis=(1, 2, 3), keepdims=True)
        return inv * (gxh - m1 - xh * m2)


class ReLU:
    def __init__(self, name):
        self.name = name

    def forward(self, x, ctx):
        y = np.maximum(x, 0.0)
        if ctx is not None:
            ctx[self.name] = y
        return y

    def backward(self, gy, ctx):
        return gy * (ctx[self.name] > 0.0)


def maxpool2(x):
    """2x2x2 max pooling. Returns (pooled, argmax codes in 0..7)."""
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {x.shape}")
    blocks = (
        x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // 2, h // 2, w // 2, 8)
    )
    idx = blocks.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(gy, idx):
    c, d2, h2, w2 = gy.shape
    gblocks = np.zeros((c, d2, h2, w2, 8), dtype=gy.dtype)
    np.put_along_axis(gblocks, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = (
        gblocks.reshape(c, d2, h2, w2, 2, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3, 6)
        .reshape(c, d2 * 2, h2 * 2, w2 * 2)
    )
    return np.ascontiguousarray(gx)


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(gy):
    c, d, h, w = gy.shape
    return gy.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(2, 4, 6))


class ConvBlock:
    """(conv3 -> instance norm -> relu) twice."""

    def __init__(self, name, cin, cout, rng):
        self.conv1 = Conv3d(f"{name}.conv1", cin, cout, 3, rng)
        self.norm1 = InstanceNorm(f"{name}.norm1", cout)
        self.act1 = ReLU(f"{name}.act1")
        self.conv2 = Conv3d(f"{name}.conv2", cout, cout, 3, rng)
        self.norm2 = InstanceNorm(f"{name}.norm2", cout)
        self.act2 = ReLU(f"{name}.act2")

    def params(self):
        return self.conv1.params() + self.norm1.params() + self.conv2.params() + self.norm2.params()

    def forward(self, x, ctx):
        h = self.act1.forward(self.norm1.forward(self.conv1.forward(x, ctx), ctx), ctx)
        return self.act2.forward(self.norm2.forward(self.conv2.forward(h, ctx), ctx), ctx)

    def backward(self, gy, ctx, need_input_grad=True, accumulate_param_grads=True):
        g = self.act2.backward(gy, ctx)
        g = self.norm2.backward(g, ctx, accumulate_param_grads)
        g = self.conv2.backward(g, ctx, True, accumulate_param_grads)
        g = self.act1.backward(g, ctx)
        g = self.norm1.backward(g, ctx, accumulate_param_grads)
        return self.conv1.backward(g, ctx, need_input_grad, accumulate_param_grads)


class UNet3D:
    """Fully convolutional 3D UNet over channels-first volumes."""

    def __init__(self, in_channels, out_channels, base_width=8, depth=3, seed=0,
                 out_tanh=False):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.arch = {
            "in_channels": int(in_channels),
            "out_channels": int(out_channels),
            "base_width": int(base_width),
            "depth": int(depth),
            "out_tanh": bool(out_tanh),
        }
        self.seed = int(seed)
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((int(seed), _NET_STREAM)))
        )
        widths = [base_width * 2 ** l for l in range(depth + 1)]
        self.enc = []
        cin = in_channels
        for l in range(depth):
            self.enc.append(ConvBlock(f"enc{l}", cin, widths[l], rng))
            cin = widths[l]
        self.bottleneck = ConvBlock("bottleneck", widths[depth - 1], widths[depth], rng)
        self.dec = []
        for l in range(depth):
            self.dec.append(ConvBlock(f"dec{l}", widths[l] + widths[l + 1], widths[l], rng))
        self.head = Conv3d("head", widths[0], out_channels, 1, rng)
        self.out_tanh = out_tanh
        self.widths = widths

    # -- parameter plumbing ------------------------------------------------

    def params(self):
        out = []
        for block in self.enc:
            out.extend(block.params())
        out.extend(self.bottleneck.params())
        for block in self.dec:
            out.extend(block.params())
        out.extend(self.head.params())
        return out

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0.0

    def num_params(self):
        return int(sum(p.value.size for p in self.params()))

    def get_state(self):
        return {p.name: p.value.copy() for p in self.params()}

    def set_state(self, state):
        for p in self.params():
            src = state[p.name]
            if src.shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {src.shape} != {p.value.shape}")
            p.value[...] = src

    def fingerprint(self) -> str:
        crc = 0
        for p in self.params():
            crc = zlib.crc32(np.ascontiguousarray(p.value).tobytes(), crc)
        return f"{crc:08x}"

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x):
        c = self.arch["in_channels"]
        if x.ndim != 4 or x.shape[0] != c:
            raise ValueError(f"expected input ({c}, D, H, W), got shape {x.shape}")
        factor = 2 ** self.arch["depth"]
        for n in x.shape[1:]:
            if n % factor or n < factor:
                raise ValueError(
                    f"spatial shape {x.shape[1:]} must be divisible by {factor}"
                )

    def forward(self, x, want_ctx=False):
        """Returns (output (out_channels, D, H, W), ctx-or-None)."""
        x = np.ascontiguousarray(x, dtype=np.float32)
        self._check_input(x)
        ctx = {} if want_ctx else None
        depth = self.arch["depth"]
        skips = []
        h = x
        for l in range(depth):
            h = self.enc[l].forward(h, ctx)
            skips.append(h)
            h, idx = maxpool2(h)
            if ctx is not None:
                ctx[f"pool{l}"] = idx
        h = self.bottleneck.forward(h, ctx)
        for l in reversed(range(depth)):
            h = np.concatenate([skips[l], upsample2(h)], axis=0)
            h = self.dec[l].forward(h, ctx)
        y = self.head.forward(h, ctx)
        if self.out_tanh:
            y = np.tanh(y)
            if ctx is not None:
                ctx["tanh_out"] = y
        return y, ctx

    def backward(self, gy, ctx, need_input_grad=False, accumulate_param_grads=True):
        """Backpropagate d loss/d output; returns d loss/d input if asked."""
        g = np.ascontiguousarray(gy, dtype=np.float32)
        if self.out_tanh:
            t = ctx["tanh_out"]
            g = g * (1.0 - t * t)
        depth = self.arch["depth"]
        g = self.head.backward(g, ctx, True, accumulate_param_grads)
        skip_grads = [None] * depth
        for l in range(depth):
            g = self.dec[l].backward(g, ctx, True, accumulate_param_grads)
            skip_ch = self.widths[l]
            skip_grads[l] = g[:skip_ch]
            g = upsample2_backward(g[skip_ch:])
        g = self.bottleneck.backward(g, ctx, True, accumulate_param_grads)
        for l in reversed(range(depth)):
            g = maxpool2_backward(g, ctx[f"pool{l}"]) + skip_grads[l]
            last = l == 0 and not need_input_grad
            g = self.enc[l].backward(g, ctx, not last, accumulate_param_grads)
        return g if need_input_grad else None


def build_segmenter(spec: SegmenterSpec) -> UNet3D:
    """Deterministically initialized segmenter mapping volumes to logits."""
    return UNet3D(spec.in_channels, spec.num_classes, spec.base_width, spec.depth,
                  seed=spec.seed, out_tanh=False)


def build_generator(spec: GeneratorSpec) -> UNet3D:
    """Noise generator; tanh head bounds raw output to [-1, 1]."""
    return UNet3D(spec.in_channels, spec.in_channels, spec.base_width, spec.depth,
                  seed=spec.seed, out_tanh=True)


def build_victim(spec: VictimSpec) -> UNet3D:
    return UNet3D(spec.in_channels, spec.num_classes, spec.base_width, spec.depth,
                  seed=spec.seed, out_tanh=False)


def logits_to_channels_last(y: np.ndarray) -> np.ndarray:
    """Network output (K, D, H, W) -> logit convention (D, H, W, K)."""
    return np.ascontiguousarray(np.moveaxis(y, 0, -1))


def logits_grad_to_channels_first(g: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(g, -1, 0), dtype=np.float32)


class Adam:
    """Standard Adam with bias correction; float32 state."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"VSCKPT1\n"


def save_checkpoint(path, net: UNet3D, *, kind: str, step: int, extra=None):
    """Single-file parameter blob with a JSON header (arch, seed, step)."""
    params = net.params()
    blob = b"".join(np.ascontiguousarray(p.value).tobytes() for p in params)
    header = {
        "kind": kind,
        "arch": net.arch,
        "seed": net.seed,
        "step": int(step),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "blob_crc32": zlib.crc32(blob),
    }
    if extra:
        header["extra"] = extra
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(len(hdr).to_bytes(8, "little"))
        f.write(hdr)
        f.write(blob)


def load_checkpoint(path):
    """Returns (header dict, {param name: float32 array})."""
    raw = Path(path).read_bytes()
    if raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    hlen = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    blob = raw[off:]
    if zlib.crc32(blob) != header["blob_crc32"]:
        raise ValueError(f"{path}: checkpoint blob CRC mismatch")
    state = {}
    pos = 0
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        n = 4 * int(np.prod(shape))
        state[meta["name"]] = np.frombuffer(blob[pos:pos + n], dtype="<f4").reshape(shape)
        pos += n
    return header, state


def load_net(path) -> UNet3D:
    """Rebuild a network from a checkpoint (arch + weights)."""
    header, state = load_checkpoint(path)
    net = UNet3D(seed=header["seed"], **header["arch"])
    net.set_state(state)
    return net
