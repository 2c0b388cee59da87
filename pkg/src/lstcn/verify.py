"""Registered verification harnesses behind the gradcheck and fusecheck
CLI subcommands: finite-difference cases covering every differentiable
op plus a composite strip-pool -> strip-conv -> temporal-pool path, and
the fused-vs-three-branch kernel deviation sweep.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm, fuse_kernels, gbsp, lstc_forward, lstp, random_bank
from .tensor import GradCheckReport, Tensor, gradcheck, no_grad


def _t(rng, *shape, lo=-1.0, hi=1.0, positive=False) -> Tensor:
    if positive:
        return Tensor(rng.uniform(0.1, 1.5, size=shape), requires_grad=True)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def op_gradcheck_cases(rng) -> list[tuple[str, callable, list[Tensor]]]:
    """One (name, scalar function, inputs) case per differentiable op."""
    w_fixed = Tensor(rng.normal(size=(3, 5)))
    mask = Tensor(rng.normal(size=(2, 4, 3)))

    rm = rng.normal(size=3)
    rv = rng.uniform(0.5, 2.0, size=3)

    cases = [
        ("add", lambda a, b: ((a + b) * mask).sum(), [_t(rng, 2, 4, 3), _t(rng, 2, 1, 3)]),
        ("neg", lambda a: ((-a) * mask[0]).sum(), [_t(rng, 4, 3)]),
        ("sub", lambda a, b: ((a - b) ** 2).sum(), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        ("mul", lambda a, b: (a * b).sum(), [_t(rng, 2, 5), _t(rng, 2, 5)]),
        ("pow", lambda a: (a ** 3).sum(), [_t(rng, 3, 3)]),
        ("exp", lambda a: T.exp(a).sum(), [_t(rng, 3, 3)]),
        ("log", lambda a: T.log(a).sum(), [_t(rng, 3, 3, positive=True)]),
        ("sqrt", lambda a: T.sqrt(a).sum(), [_t(rng, 3, 3, positive=True)]),
        ("relu", lambda a: (T.relu(a) * mask[0]).sum(), [_t(rng, 4, 3)]),
        ("leaky_relu", lambda a: (T.leaky_relu(a, 0.01) ** 2).sum(), [_t(rng, 4, 4)]),
        ("matmul", lambda a, b: (a @ b).sum(), [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)]),
        ("linear", lambda x, w, b: (T.linear(x, w, b) ** 2).sum(),
         [_t(rng, 4, 5), _t(rng, 3, 5), _t(rng, 3)]),
        ("reshape", lambda a: (T.reshape(a, (6, 2)) * w_fixed[0, 0]).sum(), [_t(rng, 3, 4)]),
        ("transpose", lambda a: (T.transpose(a, (1, 0)) @ w_fixed).sum(), [_t(rng, 3, 4)]),
        ("slice", lambda a: (a[1:, ::2] ** 2).sum(), [_t(rng, 4, 6)]),
        ("concat", lambda a, b: (T.concat([a, b], axis=1) ** 2).sum(),
         [_t(rng, 2, 3), _t(rng, 2, 4)]),
        ("reduce_sum", lambda a: (T.reduce(a, (1,), "sum") ** 2).sum(), [_t(rng, 3, 5)]),
        ("reduce_mean", lambda a: (T.reduce(a, (0, 2), "mean") ** 2).sum(), [_t(rng, 3, 4, 2)]),
        ("reduce_max", lambda a: (T.reduce(a, (1,), "max") ** 2).sum(), [_t(rng, 3, 5)]),
        ("reduce_gem", lambda a: (T.reduce(a, (1, 2), "gem", p=3.5) ** 2).sum(),
         [_t(rng, 2, 4, 3, positive=True)]),
        ("log_softmax", lambda a: (T.log_softmax(a) * mask[0, :3, :]).sum(), [_t(rng, 3, 3)]),
        ("softmax_logits", lambda a: (T.softmax_logits(a) * mask[0, :3, :]).sum(),
         [_t(rng, 3, 3)]),
        ("conv2d", lambda x, k, b: (T.conv2d(x, k, b, pad=(1, 1)) ** 2).sum(),
         [_t(rng, 2, 2, 4, 4), _t(rng, 3, 2, 3, 3), _t(rng, 3)]),
        ("conv2d_strided", lambda x, k: (T.conv2d(x, k, stride=(2, 2)) ** 2).sum(),
         [_t(rng, 1, 2, 6, 6), _t(rng, 2, 2, 3, 3)]),
        ("maxpool2d", lambda x: (T.maxpool2d(x, (2, 2)) ** 2).sum(), [_t(rng, 2, 2, 4, 6)]),
        ("batchnorm_train", lambda x, g, b: (T.batchnorm(x, g, b, training=True) ** 2).sum(),
         [_t(rng, 5, 3, 4), _t(rng, 3, positive=True), _t(rng, 3)]),
        ("batchnorm_eval",
         lambda x, g, b: (T.batchnorm(x, g, b, rm, rv, training=False) ** 2).sum(),
         [_t(rng, 5, 3, 4), _t(rng, 3, positive=True), _t(rng, 3)]),
    ]
    return cases


def composite_case(rng, shape=(6, 4, 8, 6), c_out=3):
    """Strip pooling -> asymmetric strip conv (+BN) -> per-strip temporal
    pooling on a [T, C, H, W] clip feature tensor."""
    bank = random_bank(rng, c_in=shape[1], c_out=c_out, a=3, asymmetric=True)
    bn = BatchNorm(c_out)
    x = _t(rng, *shape)

    def f(clip, square, sp1d, t1d, bias, gamma, beta):
        strips = gbsp(clip, "max")
        out = lstc_forward(strips.horiz, bank, bn=bn, training=True)
        pooled = lstp(out.transpose((1, 0, 2)), "max")
        return (pooled ** 2).sum()

    inputs = [x, bank.square, bank.spatial_1d, bank.temporal_1d, bank.bias,
              bn.gamma, bn.beta]
    return f, inputs


def run_gradcheck_suite(trials: int = 3, tol: float = 1e-4,
                        seed: int = 0) -> list[tuple[str, GradCheckReport]]:
    """Every op case plus the composite path, ``trials`` random draws each;
    the reported result per case is the worst trial."""
    reports: list[tuple[str, GradCheckReport]] = []
    for trial in range(trials):
        rng = np.random.default_rng(seed + 1000 * trial)
        for name, f, inputs in op_gradcheck_cases(rng):
            rep = gradcheck(f, inputs, tol=tol)
            reports.append((f"{name}[{trial}]", rep))
        f, inputs = composite_case(rng)
        rep = gradcheck(f, inputs, tol=tol)
        reports.append((f"composite_gbsp_lstc_lstp[{trial}]", rep))
    worst: dict[str, GradCheckReport] = {}
    for tagged, rep in reports:
        name = tagged.rsplit("[", 1)[0]
        if name not in worst or rep.max_rel_err > worst[name].max_rel_err:
            worst[name] = rep
    return sorted(worst.items())


def run_fusion_check(trials: int = 100, seed: int = 0) -> float:
    """Max absolute deviation between fused-kernel inference and the
    three-branch sum over random banks and inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for _ in range(trials):
            c_in = int(rng.integers(1, 5))
            c_out = int(rng.integers(1, 5))
            a = int(rng.choice([3, 5]))
            t_len = int(rng.integers(3, 12))
            s_len = int(rng.integers(2, 10))
            bank = random_bank(rng, c_in, c_out, a, asymmetric=True, scale=1.0)
            fused = fuse_kernels(bank)
            strip = Tensor(rng.normal(size=(t_len, c_in, s_len)))
            three = lstc_forward(strip, bank, bn=None, activation="none", training=True)
            one = lstc_forward(strip, fused, bn=None, activation="none", training=False)
            worst = max(worst, float(np.abs(three.data - one.data).max()))
    return worst
