"""Toy-scale multi-view fusion operators in numpy.

Feature maps are H x W x C arrays.  Involution and the attention gate come
with hand-written backward passes; the three-encoder / shared-decoder U-Net
is forward only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError

WIDTHS = (16, 32, 64, 128)
ENCODERS = ("A", "B", "C")
OUT_CHANNELS = 64
IN_CHANNELS = 4  # RGB + mask


def feature_map(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidArgumentError(f"feature map must be H x W x C, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("feature map contains NaN or Inf")
    return x


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    # float32-exact values so weights survive the FUSW container unchanged
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# involution


@dataclass
class InvolutionSpec:
    """Involution with a two-layer kernel generator C -> C/r -> K*K*G."""

    kernel_size: int
    groups: int
    reduction: int
    w1: np.ndarray  # (C/r, C)
    b1: np.ndarray
    w2: np.ndarray  # (K*K*G, C/r)
    b2: np.ndarray

    @classmethod
    def init(cls, channels: int, kernel_size: int = 3, groups: int = 1,
             reduction: int = 4, seed: int = 0) -> "InvolutionSpec":
        hidden = max(channels // reduction, 1)
        rng = np.random.default_rng(seed)
        kk = kernel_size * kernel_size * groups
        return cls(kernel_size, groups, reduction,
                   _uniform(rng, (hidden, channels), channels), _uniform(rng, hidden, channels),
                   _uniform(rng, (kk, hidden), hidden), _uniform(rng, kk, hidden))

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def validate(self, channels: int):
        K, G = self.kernel_size, self.groups
        if K % 2 != 1 or K < 1:
            raise InvalidArgumentError("kernel size must be odd")
        if G < 1 or channels % G:
            raise InvalidArgumentError(f"{channels} channels not divisible into {G} groups")
        if self.reduction < 1:
            raise InvalidArgumentError("reduction ratio must be >= 1")
        if self.w1.shape[1] != channels:
            raise InvalidArgumentError(
                f"generator expects {self.w1.shape[1]} channels, input has {channels}")
        if self.w2.shape[0] != K * K * G or self.w2.shape[1] != self.w1.shape[0]:
            raise InvalidArgumentError("generator output does not match K*K*G")

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def _patches(x, K):
    p = K // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    return sliding_window_view(xp, (K, K), axis=(0, 1))  # H x W x C x K x K


def _involution_parts(x, spec):
    H, W, C = x.shape
    K, G = spec.kernel_size, spec.groups
    pre = x @ spec.w1.T + spec.b1
    hid = relu(pre)
    kern = (hid @ spec.w2.T + spec.b2).reshape(H, W, G, K, K)
    group_of = (np.arange(C) * G) // C
    return pre, hid, kern, group_of


def involution_forward(x, spec: InvolutionSpec) -> np.ndarray:
    x = feature_map(x)
    spec.validate(x.shape[2])
    _, _, kern, group_of = _involution_parts(x, spec)
    return np.einsum("hwcuv,hwcuv->hwc", kern[:, :, group_of], _patches(x, spec.kernel_size))


def involution_backward(x, spec: InvolutionSpec, upstream):
    """Gradients w.r.t. the input and the generator weights, kernel path included."""
    x = feature_map(x)
    spec.validate(x.shape[2])
    up = np.asarray(upstream, dtype=np.float64)
    H, W, C = x.shape
    K, G = spec.kernel_size, spec.groups
    pre, hid, kern, group_of = _involution_parts(x, spec)
    patches = _patches(x, K)

    d_kern = (up[..., None, None] * patches).reshape(H, W, G, C // G, K, K).sum(axis=3)
    d_patch = kern[:, :, group_of] * up[..., None, None]
    p = K // 2
    dxp = np.zeros((H + 2 * p, W + 2 * p, C))
    for u in range(K):
        for v in range(K):
            dxp[u:u + H, v:v + W] += d_patch[..., u, v]
    dx = dxp[p:p + H, p:p + W].copy()

    dk = d_kern.reshape(H * W, -1)
    hid2 = hid.reshape(H * W, -1)
    d_w2 = dk.T @ hid2
    d_b2 = dk.sum(0)
    d_pre = (dk @ spec.w2) * (pre.reshape(H * W, -1) > 0)
    d_w1 = d_pre.T @ x.reshape(H * W, C)
    d_b1 = d_pre.sum(0)
    dx += (d_pre @ spec.w1).reshape(H, W, C)
    return dx, {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


# ---------------------------------------------------------------------------
# attention gate


@dataclass
class GateWeights:
    w_g: np.ndarray  # (F, C_gate)
    b_g: np.ndarray
    w_x: np.ndarray  # (F, C_skip)
    b_x: np.ndarray
    psi: np.ndarray  # (F,)
    b_psi: float

    @classmethod
    def init(cls, skip_channels: int, gate_channels: int, inter: int | None = None,
             rng=None) -> "GateWeights":
        rng = np.random.default_rng(0) if rng is None else rng
        inter = inter or max(skip_channels // 2, 1)
        return cls(_uniform(rng, (inter, gate_channels), gate_channels),
                   _uniform(rng, inter, gate_channels),
                   _uniform(rng, (inter, skip_channels), skip_channels),
                   _uniform(rng, inter, skip_channels),
                   _uniform(rng, inter, inter), float(_uniform(rng, (), inter)))

    def params(self) -> dict:
        return {"w_g": self.w_g, "b_g": self.b_g, "w_x": self.w_x, "b_x": self.b_x,
                "psi": self.psi, "b_psi": np.array(self.b_psi)}


def _gate_parts(skip, gate, w):
    a = gate @ w.w_g.T + w.b_g + skip @ w.w_x.T + w.b_x
    h = relu(a)
    att = sigmoid(h @ w.psi + w.b_psi)
    return a, h, att


def _check_gate(skip, gate):
    skip, gate = feature_map(skip), feature_map(gate)
    if skip.shape[:2] != gate.shape[:2]:
        raise InvalidArgumentError(
            f"skip {skip.shape[:2]} and gate {gate.shape[:2]} spatial sizes differ")
    return skip, gate


def attention_gate(skip, gate, weights: GateWeights) -> np.ndarray:
    """skip * sigmoid(psi . relu(W_g gate + W_x skip)), one coefficient per pixel."""
    skip, gate = _check_gate(skip, gate)
    _, _, att = _gate_parts(skip, gate, weights)
    return skip * att[..., None]


def attention_gate_backward(skip, gate, weights: GateWeights, upstream):
    skip, gate = _check_gate(skip, gate)
    up = np.asarray(upstream, dtype=np.float64)
    a, h, att = _gate_parts(skip, gate, weights)
    dz = (up * skip).sum(-1) * att * (1 - att)
    da = dz[..., None] * weights.psi * (a > 0)
    d_skip = up * att[..., None] + da @ weights.w_x
    d_gate = da @ weights.w_g
    flat = da.reshape(-1, da.shape[-1])
    grads = {
        "w_g": flat.T @ gate.reshape(-1, gate.shape[-1]),
        "b_g": flat.sum(0),
        "w_x": flat.T @ skip.reshape(-1, skip.shape[-1]),
        "b_x": flat.sum(0),
        "psi": np.einsum("hw,hwf->f", dz, h),
        "b_psi": np.array(dz.sum()),
    }
    return d_skip, d_gate, grads


# ---------------------------------------------------------------------------
# MulEn-Unet


def conv3x3(x, w, b):
    """'same' 3x3 convolution; w is 3 x 3 x C_in x C_out."""
    return np.einsum("hwcuv,uvco->hwo", _patches(x, 3), w, optimize=True) + b


def max_pool2(x):
    H, W, C = x.shape
    return x.reshape(H // 2, 2, W // 2, 2, C).max(axis=(1, 3))


def conv_transpose2(x, w, b):
    """2x2 stride-2 transposed convolution; w is C_in x 2 x 2 x C_out."""
    H, W, _ = x.shape
    out = np.einsum("ijc,cabo->iajbo", x, w)
    return out.reshape(2 * H, 2 * W, w.shape[-1]) + b


def double_conv(x, p, prefix):
    x = relu(conv3x3(x, p[prefix + ".conv1.w"], p[prefix + ".conv1.b"]))
    return relu(conv3x3(x, p[prefix + ".conv2.w"], p[prefix + ".conv2.b"]))


def _gate_from(p, prefix):
    return GateWeights(p[prefix + ".w_g"], p[prefix + ".b_g"], p[prefix + ".w_x"],
                       p[prefix + ".b_x"], p[prefix + ".psi"], float(p[prefix + ".b_psi"]))


def init_mulen_weights(seed: int = 0, widths=WIDTHS, in_channels: int = IN_CHANNELS,
                       out_channels: int = OUT_CHANNELS,
                       share_encoders: bool = False) -> dict[str, np.ndarray]:
    """Seeded weights keyed by dotted names; ``share_encoders`` copies encoder A to B and C."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def dconv(prefix, cin, cout):
        p[prefix + ".conv1.w"] = _uniform(rng, (3, 3, cin, cout), 9 * cin)
        p[prefix + ".conv1.b"] = _uniform(rng, cout, 9 * cin)
        p[prefix + ".conv2.w"] = _uniform(rng, (3, 3, cout, cout), 9 * cout)
        p[prefix + ".conv2.b"] = _uniform(rng, cout, 9 * cout)

    for e in ENCODERS:
        cin = in_channels
        for lvl, wd in enumerate(widths):
            if share_encoders and e != ENCODERS[0]:
                for k in [k for k in p if k.startswith(f"enc{ENCODERS[0]}.{lvl}.")]:
                    p[k.replace(f"enc{ENCODERS[0]}.", f"enc{e}.", 1)] = p[k]
            else:
                dconv(f"enc{e}.{lvl}", cin, wd)
            cin = wd
    bottom = len(ENCODERS) * widths[-1]
    dconv("bottleneck", bottom, 2 * widths[-1])
    cin = 2 * widths[-1]
    for lvl in reversed(range(len(widths))):
        wd = widths[lvl]
        p[f"dec.{lvl}.up.w"] = _uniform(rng, (cin, 2, 2, wd), 4 * cin)
        p[f"dec.{lvl}.up.b"] = _uniform(rng, wd, 4 * cin)
        for e in ENCODERS:
            g = GateWeights.init(wd, wd, max(wd // 2, 1), rng)
            for k, v in g.params().items():
                p[f"dec.{lvl}.gate{e}.{k}"] = v
        dconv(f"dec.{lvl}", wd * (1 + len(ENCODERS)), wd)
        cin = wd
    p["head.w"] = _uniform(rng, (cin, out_channels), cin)
    p["head.b"] = _uniform(rng, out_channels, cin)
    return p


def mulen_unet_forward(views, weights: dict, return_features: bool = False):
    """Fuse three (H x W x 4) views into one H x W x 64 feature map.

    Three unshared encoders; their deepest features are concatenated and
    decoded by a single decoder whose skip connections take attention-gated
    features from every encoder at each level.
    """
    if len(views) != len(ENCODERS):
        raise InvalidArgumentError(f"expected {len(ENCODERS)} views, got {len(views)}")
    views = [feature_map(v) for v in views]
    depth = sum(1 for k in weights if k.startswith("dec.") and k.endswith(".up.w"))
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise InvalidArgumentError("views must share one shape")
    if shape[0] % 2**depth or shape[1] % 2**depth:
        raise InvalidArgumentError(f"H and W must be divisible by {2**depth}")

    skips = {e: [] for e in ENCODERS}
    bottoms = []
    for e, x in zip(ENCODERS, views):
        for lvl in range(depth):
            x = double_conv(x, weights, f"enc{e}.{lvl}")
            skips[e].append(x)
            x = max_pool2(x)
        bottoms.append(x)
    d = double_conv(np.concatenate(bottoms, axis=-1), weights, "bottleneck")
    for lvl in reversed(range(depth)):
        up = conv_transpose2(d, weights[f"dec.{lvl}.up.w"], weights[f"dec.{lvl}.up.b"])
        gated = [attention_gate(skips[e][lvl], up, _gate_from(weights, f"dec.{lvl}.gate{e}"))
                 for e in ENCODERS]
        d = double_conv(np.concatenate([up] + gated, axis=-1), weights, f"dec.{lvl}")
    out = d @ weights["head.w"] + weights["head.b"]
    if return_features:
        return out, {"skips": skips, "bottoms": bottoms}
    return out
