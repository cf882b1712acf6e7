"""The U-shaped detector: contrast-enhanced stem, four residual stages with
channel attention, three up-fusion layers and a prediction head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .lca import DEFAULT_PAIRING, PAIRINGS, LcaParams, local_contrast_attention
from .nn import functional as F
from .nn.layers import BatchNorm2d, ChannelConv1d, Conv2d, DepthwiseConv2d, Module, PReLU
from .nn.tape import FlopCounter, Tensor, count

LCA_INPUTS = ("standardized", "raw")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    blocks: tuple = (1, 2, 4, 8)
    lca: LcaParams = field(default_factory=LcaParams)
    input_size: tuple = (256, 256)
    use_lce: bool = True
    use_cae: bool = True
    lca_input: str = "standardized"
    pairing: str = DEFAULT_PAIRING

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError(f"blocks must be four positive integers, got {self.blocks}")
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ValueError(f"input size must be positive and divisible by 8, got {self.input_size}")
        if self.lca_input not in LCA_INPUTS:
            raise ValueError(f"lca_input must be one of {LCA_INPUTS}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {tuple(PAIRINGS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["input_size"] = list(self.input_size)
        lca = d.pop("lca")
        d.update(alpha=lca["alpha"], beta=lca["beta"], d=lca["d"])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        known = {f for f in cls.__dataclass_fields__} | {"alpha", "beta", "d"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        lca_kw = {k: raw.pop(k) for k in ("alpha", "beta", "d") if k in raw}
        if lca_kw:
            raw["lca"] = LcaParams(**lca_kw)
        return cls(**raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_lca(self, params: LcaParams) -> "ModelConfig":
        return replace(self, lca=params)


class CELayer(Module):
    """1x1 channel expansion, LCA-weighted depthwise branch, residual add, PReLU."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.expand = Conv2d(1, channels, 1, rng, bias=True, dtype=dtype)
        self.dw = DepthwiseConv2d(channels, 3, rng, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.act = PReLU(dtype=dtype)

    def forward(self, x, attention):
        f0 = self.expand(x)
        f0_e1 = F.mul(f0, attention)
        f0_e2 = self.bn(self.dw(f0_e1))
        return self.act(F.add(f0, f0_e2))


class SplitAttentionBlock(Module):
    """Residual block whose second convolution is a radix-2 split-attention unit.

    conv3x3(stride)-BN-ReLU, then two parallel conv3x3-BN branches fused by a
    softmax gate computed from their pooled sum, then shortcut add and ReLU.
    As in grouped split attention, each branch reads its own half of the
    channels (both read everything when the width is odd).
    """

    def __init__(self, cin: int, cout: int, stride: int, rng, dtype):
        super().__init__()
        self.cout = cout
        inter = max(cout // 2, 4)
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.split = cout // 2 if cout % 2 == 0 else None
        bin_ = cout if self.split is None else self.split
        self.branch = [Conv2d(bin_, cout, 3, rng, bias=False, dtype=dtype) for _ in range(2)]
        self.branch_bn = [BatchNorm2d(cout, dtype=dtype) for _ in range(2)]
        self.fc1 = Conv2d(cout, inter, 1, rng, bias=True, dtype=dtype)
        self.fc2 = Conv2d(inter, 2 * cout, 1, rng, bias=True, dtype=dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, padding=0, bias=False, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        if self.split is None:
            parts = (h, h)
        else:
            k = self.split
            parts = (F.getitem(h, (slice(None), slice(0, k))), F.getitem(h, (slice(None), slice(k, None))))
        u0, u1 = (bn(conv(p)) for p, conv, bn in zip(parts, self.branch, self.branch_bn))
        n, c = u0.shape[:2]
        s = F.reshape(F.global_avg_pool(F.add(u0, u1)), (n, c, 1, 1))
        z = F.relu(self.fc1(s))
        gate = F.softmax(F.reshape(self.fc2(z), (n, 2, c, 1, 1)), axis=1)
        v = F.add(F.mul(u0, F.getitem(gate, (slice(None), 0))),
                  F.mul(u1, F.getitem(gate, (slice(None), 1))))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return F.relu(F.add(v, shortcut))


class CAE(Module):
    """Channel attention: pooled descriptor, kernel-3 channel interaction,
    sigmoid gate, then ``F * w + F``.
    """

    def __init__(self, rng, dtype, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.conv = ChannelConv1d(rng, dtype=dtype)

    def forward(self, f):
        if not self.enabled:
            return f
        n, c = f.shape[:2]
        w = F.sigmoid(self.conv(F.global_avg_pool(f)))
        return F.add(F.mul(f, F.reshape(w, (n, c, 1, 1))), f)


class UpFusion(Module):
    """1x1 channel halving, BN, ReLU, bilinear x2, add the same-level skip."""

    def __init__(self, cin: int, cout: int, rng, dtype):
        super().__init__()
        self.reduce = Conv2d(cin, cout, 1, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, deep, skip):
        up = F.upsample_bilinear2x(F.relu(self.bn(self.reduce(deep))))
        if up.shape != skip.shape:
            raise DimensionError(f"up-fused map {up.shape} does not align with skip {skip.shape}")
        return F.add(up, skip)


class Head(Module):
    """conv3x3-BN-ReLU, 1x1 to one logit, sigmoid.

    The logit bias starts at ``logit(prior)`` so the initial output is
    mostly background instead of a uniform 0.5.
    """

    def __init__(self, channels: int, rng, dtype, prior: float = 0.01):
        super().__init__()
        self.conv3 = Conv2d(channels, channels, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self.conv1 = Conv2d(channels, 1, 1, rng, bias=True, dtype=dtype)
        self.conv1.bias.data[:] = np.log(prior / (1 - prior))

    def forward(self, f):
        return F.sigmoid(self.conv1(F.relu(self.bn(self.conv3(f)))))


class LcaeNet(Module):
    """Input ``(N, 1, H, W)`` standardized images, output ``(N, 1, H, W)`` probabilities.

    Stage widths are ``(C, 2C, 4C, 8C)`` at resolutions ``(H, H/2, H/4, H/8)``.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c = config.base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        self.ce = CELayer(c, rng, dtype)
        self.layers = []
        cin = c
        for i, (width, nblocks) in enumerate(zip(widths, config.blocks)):
            stride = 1 if i == 0 else 2
            blocks = [SplitAttentionBlock(cin if b == 0 else width, width, stride if b == 0 else 1, rng, dtype)
                      for b in range(nblocks)]
            self.layers.append(_Stage(blocks))
            cin = width
        self.cae = [CAE(rng, dtype, enabled=config.use_cae) for _ in widths]
        self.ups = [UpFusion(widths[i + 1], widths[i], rng, dtype) for i in range(3)]
        self.head = Head(c, rng, dtype)

    def attention(self, lca_source: np.ndarray) -> np.ndarray:
        """LCA weights ``(N, 1, H, W)`` for a batch; all ones when LCE is disabled."""
        src = np.asarray(lca_source)
        n, _, h, w = src.shape
        count("lca", 24 * n * h * w)
        if not self.config.use_lce:
            return np.ones((n, 1, h, w), dtype=self.dtype)
        with FlopCounter():  # the dense operator stack is not what gets counted
            weights = local_contrast_attention(src[:, 0], self.config.lca, self.config.pairing)
        return weights[:, None].astype(self.dtype)

    def forward(self, x, lca_source: np.ndarray | None = None) -> Tensor:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        _check_input(xd, self.config)
        if self.config.lca_input == "raw" and lca_source is None and self.config.use_lce:
            raise ValueError("model configured for raw-intensity LCA input; pass lca_source")
        att = self.attention(xd if lca_source is None else lca_source)
        f0e = ce_layer_forward(x, self, att)
        feats = encoder_forward(f0e, self)
        return decoder_forward(feats, self)


class _Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def _check_input(x: np.ndarray, config: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected (N, 1, H, W) grayscale batch, got {x.shape}")
    if tuple(x.shape[2:]) != config.input_size:
        raise DimensionError(f"input {x.shape[2:]} does not match configured size {config.input_size}")


def ce_layer_forward(x, net: LcaeNet, attention: np.ndarray | None = None) -> Tensor:
    """Contrast-enhanced stem. ``attention`` defaults to the LCA of ``x`` itself."""
    if attention is None:
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        _check_input(xd, net.config)
        attention = net.attention(xd)
    return net.ce(x, attention)


def cae_forward(f, module: CAE) -> Tensor:
    return module(f)


def encoder_forward(f0e, net: LcaeNet) -> list[Tensor]:
    """Four residual stages, each followed by its channel-attention enhancer."""
    h, w = f0e.shape[2:]
    if h % 8 or w % 8:
        raise DimensionError(f"spatial size {h}x{w} not divisible by 8")
    feats = []
    f = f0e
    for stage, cae in zip(net.layers, net.cae):
        f = stage(f)
        feats.append(cae(f))
    return feats


def decoder_forward(feats: list, net: LcaeNet) -> Tensor:
    """Up-fuse from the deepest enhanced map back to full resolution, then predict."""
    f = feats[3]
    for i in (2, 1, 0):
        f = net.ups[i](f, feats[i])
    return net.head(f)


def predict(prob, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: 1 strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (p > threshold).astype(np.uint8)


def count_params(net: Module) -> int:
    """Number of learnable scalars (running statistics excluded)."""
    return int(sum(p.data.size for p in net.parameters()))


def count_flops(net: LcaeNet, input_size: tuple | None = None) -> int:
    """Operations for one forward pass on a single image in inference mode.

    See :class:`lcaenet.nn.tape.FlopCounter` for the counting convention; the
    LCA map is charged 24 operations per pixel (four 5-op directional
    differences, two products and a sum, one sigmoid).
    """
    return flop_breakdown(net, input_size).total


def flop_breakdown(net: LcaeNet, input_size: tuple | None = None) -> FlopCounter:
    h, w = input_size or net.config.input_size
    was_training = net.training
    net.eval()
    cfg = net.config
    if (h, w) != cfg.input_size:
        net.config = replace(cfg, input_size=(h, w))
    try:
        with FlopCounter() as counter:
            net.forward(np.zeros((1, 1, h, w), dtype=net.dtype),
                        lca_source=np.zeros((1, 1, h, w)) if cfg.lca_input == "raw" else None)
    finally:
        net.config = cfg
        net.train(was_training)
    return counter
