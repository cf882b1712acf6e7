"""Parameter-holding layers built on :mod:`lcaenet.nn.functional`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import CheckpointError
from . import functional as F
from .tape import Tensor


class Module:
    """Minimal container: parameters are attributes holding grad-requiring
    tensors, submodules are attributes holding modules (or lists of them).
    Non-learnable state lives in ``_buffers``.
    """

    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise CheckpointError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {b.shape}")
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = Tensor(kaiming(rng, (cout, cin, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(kaiming(rng, (channels, kernel, kernel), kernel * kernel, dtype), requires_grad=True)

    def forward(self, x):
        return F.depthwise_conv2d(x, self.weight)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float64)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float64)

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class PReLU(Module):
    def __init__(self, init: float = 0.25, dtype=np.float32):
        super().__init__()
        self.slope = Tensor(np.full(1, init, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return F.prelu(x, self.slope)


class ChannelConv1d(Module):
    """Kernel-3 (by default) bias-free interaction across neighbouring channels."""

    def __init__(self, rng: np.random.Generator, kernel: int = 3, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(kernel)
        self.weight = Tensor(rng.uniform(-bound, bound, kernel).astype(dtype), requires_grad=True)

    def forward(self, v):
        return F.conv1d_channels(v, self.weight)
