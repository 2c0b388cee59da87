"""Strip pooling and local spatiotemporal convolution building blocks.

The dimensionality-reduction story: a frame-feature tensor [T, C, H, W]
is pooled along one spatial axis at a time (GBSP) into horizontal
[T, C, H] and vertical [T, C, W] strip features, so a plain 2-D
convolution over the (time, strip) plane can learn motion patterns.
The convolution optionally runs three parallel branches (square, 1-D
along strips, 1-D along time) whose kernels add; at inference the
branches collapse into one square kernel by center-aligned summation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_GEM_P = 6.5


# ---------------------------------------------------------------------------
# pooling reductions
# ---------------------------------------------------------------------------


@dataclass
class StripFeatures:
    """Width-pooled and height-pooled strip features of one clip."""

    horiz: Tensor  # [T, C, H]
    vert: Tensor  # [T, C, W]


def gbsp(f: Tensor, mode: str = "max", p: float = DEFAULT_GEM_P) -> StripFeatures:
    """Bidirectional strip pooling of f [T, C, H, W]."""
    if f.ndim != 4:
        raise ValueError(f"gbsp expects [T, C, H, W], got shape {f.shape}")
    return StripFeatures(
        horiz=T.reduce(f, (3,), mode, p=p),
        vert=T.reduce(f, (2,), mode, p=p),
    )


def gsp(f: Tensor, mode: str = "max", p: float = DEFAULT_GEM_P) -> Tensor:
    """Global spatial pooling of f [T, C, H, W] down to [T, C, 1]."""
    if f.ndim != 4:
        raise ValueError(f"gsp expects [T, C, H, W], got shape {f.shape}")
    return T.reduce(f, (2, 3), mode, p=p, keepdims=True).reshape((f.shape[0], f.shape[1], 1))


def gstp(f: Tensor, mode: str = "max", p: float = DEFAULT_GEM_P) -> Tensor:
    """Pool f [C, T, S] over the whole (time, strip) plane to [C]."""
    if f.ndim != 3:
        raise ValueError(f"gstp expects [C, T, S], got shape {f.shape}")
    return T.reduce(f, (1, 2), mode, p=p)


def lstp(f: Tensor, mode: str = "max", p: float = DEFAULT_GEM_P) -> Tensor:
    """Pool f [C, T, S] over time independently per strip, giving [C, S].

    Per-strip independence is the point: the most discriminative temporal
    position may differ from strip to strip.
    """
    if f.ndim != 3:
        raise ValueError(f"lstp expects [C, T, S], got shape {f.shape}")
    return T.reduce(f, (1,), mode, p=p)


def temporal_max(f: Tensor) -> Tensor:
    """Elementwise max over the frame axis of f [T, C, H, W] (set pooling)."""
    if f.ndim != 4:
        raise ValueError(f"temporal_max expects [T, C, H, W], got shape {f.shape}")
    return T.reduce(f, (0,), "max")


def horizontal_strip_pool(f: Tensor, n_strips: int) -> Tensor:
    """Split f [C, H, W] into n_strips equal horizontal bands; per band the
    feature is max + mean over the band (rows and all columns), giving
    [C, n_strips]."""
    if f.ndim != 3:
        raise ValueError(f"horizontal_strip_pool expects [C, H, W], got shape {f.shape}")
    c, h, w = f.shape
    if n_strips < 1 or h % n_strips != 0:
        raise ValueError(f"n_strips={n_strips} must divide feature height {h}")
    bands = f.reshape((c, n_strips, h // n_strips, w))
    return T.reduce(bands, (2, 3), "max") + T.reduce(bands, (2, 3), "mean")


# ---------------------------------------------------------------------------
# batch normalization layer state
# ---------------------------------------------------------------------------


class BatchNorm:
    """Learnable scale/shift plus running statistics for one channel axis."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            eps=self.eps,
            momentum=self.momentum,
        )

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


# ---------------------------------------------------------------------------
# local spatiotemporal convolution
# ---------------------------------------------------------------------------


@dataclass
class LstcKernelBank:
    """Kernels of one (possibly asymmetric) spatiotemporal conv layer.

    On the (T, S) plane the a x 1 kernel spans time (temporal branch) and
    the 1 x a kernel spans the strip axis (spatial branch). ``fused``,
    when set, is the center-aligned sum of all three and reproduces the
    three-branch output with a single convolution.
    """

    square: Tensor  # [C_out, C_in, a, a]
    spatial_1d: Tensor  # [C_out, C_in, 1, a]
    temporal_1d: Tensor  # [C_out, C_in, a, 1]
    bias: Tensor  # [C_out]
    asymmetric_enabled: bool = True
    fused: Tensor | None = None

    def __post_init__(self):
        cout, cin, a1, a2 = self.square.shape
        if a1 != a2:
            raise ValueError(f"square kernel must be square, got {a1}x{a2}")
        if a1 % 2 == 0:
            raise ValueError(f"kernel size must be odd for center alignment, got {a1}")
        if self.spatial_1d.shape != (cout, cin, 1, a1):
            raise ValueError(
                f"spatial_1d shape {self.spatial_1d.shape} != ({cout}, {cin}, 1, {a1})"
            )
        if self.temporal_1d.shape != (cout, cin, a1, 1):
            raise ValueError(
                f"temporal_1d shape {self.temporal_1d.shape} != ({cout}, {cin}, {a1}, 1)"
            )
        if self.bias.shape != (cout,):
            raise ValueError(f"bias shape {self.bias.shape} != ({cout},)")

    @property
    def kernel_size(self) -> int:
        return self.square.shape[2]

    @property
    def c_in(self) -> int:
        return self.square.shape[1]

    @property
    def c_out(self) -> int:
        return self.square.shape[0]

    def parameters(self):
        params = [("square", self.square), ("bias", self.bias)]
        if self.asymmetric_enabled:
            params += [("spatial_1d", self.spatial_1d), ("temporal_1d", self.temporal_1d)]
        return params


def random_bank(rng, c_in: int, c_out: int, a: int = 3, asymmetric: bool = True, scale: float | None = None) -> LstcKernelBank:
    """Fan-in scaled normal init for one kernel bank."""
    if scale is None:
        scale = float(np.sqrt(2.0 / (c_in * a * a)))
    return LstcKernelBank(
        square=Tensor(rng.normal(0.0, scale, size=(c_out, c_in, a, a)), requires_grad=True),
        spatial_1d=Tensor(rng.normal(0.0, scale, size=(c_out, c_in, 1, a)), requires_grad=True),
        temporal_1d=Tensor(rng.normal(0.0, scale, size=(c_out, c_in, a, 1)), requires_grad=True),
        bias=Tensor(np.zeros(c_out), requires_grad=True),
        asymmetric_enabled=asymmetric,
    )


def fuse_kernels(bank: LstcKernelBank) -> LstcKernelBank:
    """Collapse the three branches into one kernel by center-aligned addition."""
    if not bank.asymmetric_enabled:
        raise ValueError("fuse_kernels requires an asymmetric bank")
    a = bank.kernel_size
    if a % 2 == 0:
        raise ValueError(f"kernel size must be odd to fuse, got {a}")
    center = a // 2
    fused = bank.square.data.copy()
    fused[:, :, center, :] += bank.spatial_1d.data[:, :, 0, :]
    fused[:, :, :, center] += bank.temporal_1d.data[:, :, :, 0]
    return replace(bank, fused=Tensor(fused))


def conv_plane(x: Tensor, bank: LstcKernelBank, training: bool) -> Tensor:
    """Same-padded stride-1 conv of x [N, C_in, T, S] with the bank.

    Three parallel branches when asymmetric and no fused kernel is in
    play; a single convolution otherwise. Time length never shrinks.
    """
    a = bank.kernel_size
    c = a // 2
    if not bank.asymmetric_enabled:
        return T.conv2d(x, bank.square, bank.bias, pad=(c, c))
    if not training and bank.fused is not None:
        return T.conv2d(x, bank.fused, bank.bias, pad=(c, c))
    out = T.conv2d(x, bank.square, bank.bias, pad=(c, c))
    out = out + T.conv2d(x, bank.spatial_1d, None, pad=(0, c))
    out = out + T.conv2d(x, bank.temporal_1d, None, pad=(c, 0))
    return out


def lstc_forward(
    strip: Tensor,
    bank: LstcKernelBank,
    bn: BatchNorm | None = None,
    activation: str = "lrelu",
    training: bool = True,
    lrelu_slope: float = 0.01,
) -> Tensor:
    """One spatiotemporal conv layer on strip features [T, C_in, S].

    The (T, S) plane is the convolution plane; padding is `same` on both
    axes with stride 1, then batch norm, then leaky ReLU.
    """
    if strip.ndim != 3:
        raise ValueError(f"lstc_forward expects [T, C_in, S], got shape {strip.shape}")
    t_len, c_in, s_len = strip.shape
    if t_len < 1 or s_len < 1:
        raise ValueError(f"lstc_forward needs T >= 1 and S >= 1, got T={t_len}, S={s_len}")
    if c_in != bank.c_in:
        raise ValueError(f"strip channels {c_in} != bank C_in {bank.c_in}")

    x = strip.transpose((1, 0, 2)).reshape((1, c_in, t_len, s_len))
    out = conv_plane(x, bank, training)
    if bn is not None:
        out = bn(out, training)
    if activation == "lrelu":
        out = T.leaky_relu(out, lrelu_slope)
    elif activation is not None and activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return out.reshape((bank.c_out, t_len, s_len)).transpose((1, 0, 2))


class LstcLayer:
    """Kernel bank + batch norm + leaky ReLU acting on [N, C, T, S] batches."""

    def __init__(self, rng, c_in: int, c_out: int, a: int = 3, asymmetric: bool = True,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1, lrelu_slope: float = 0.01):
        self.bank = random_bank(rng, c_in, c_out, a, asymmetric)
        self.bn = BatchNorm(c_out, eps=bn_eps, momentum=bn_momentum)
        self.lrelu_slope = lrelu_slope

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = conv_plane(x, self.bank, training)
        out = self.bn(out, training)
        return T.leaky_relu(out, self.lrelu_slope)

    def fuse(self) -> None:
        if self.bank.asymmetric_enabled:
            self.bank = fuse_kernels(self.bank)

    def parameters(self):
        return [("bank." + n, t) for n, t in self.bank.parameters()] + [
            ("bn." + n, t) for n, t in self.bn.parameters()
        ]

    def buffers(self):
        return [("bn." + n, b) for n, b in self.bn.buffers()]


def fold_batchnorm(kernel: np.ndarray, bias: np.ndarray, bn: BatchNorm) -> tuple[np.ndarray, np.ndarray]:
    """Fold eval-mode batch norm into conv weights (deployment transform)."""
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    folded_kernel = kernel * scale[:, None, None, None]
    folded_bias = (bias - bn.running_mean) * scale + bn.beta.data
    return folded_kernel, folded_bias
