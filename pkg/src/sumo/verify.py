"""Finite-difference verification of every layer and of a tiny full model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, nn
from .train import generalized_dice_loss, one_hot


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _projection_loss(y, w):
    return float((y * w).sum())


def check_conv(rng, dilation=1, k=3, tol=1e-6) -> CheckResult:
    x = rng.standard_normal((2, 3, 16))
    layer = nn.ConvLayer(rng.standard_normal((4, 3, k)), rng.standard_normal(4), dilation)
    w = rng.standard_normal((2, 4, 16))

    def f(p):
        lyr = nn.ConvLayer(p["weight"], p["bias"], dilation)
        y = nn.conv1d(p["x"], lyr)
        gx, gw, gb = nn.conv1d_backward(p["x"], lyr, w)
        return _projection_loss(y, w), {"x": gx, "weight": gw, "bias": gb}

    rep = nn.grad_check(f, {"x": x, "weight": layer.weight, "bias": layer.bias}, tol)
    return CheckResult(f"conv1d(k={k}, d={dilation})", rep.max_error, tol)


def check_relu(rng, tol=1e-6) -> CheckResult:
    x = rng.standard_normal((2, 3, 16))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    w = rng.standard_normal(x.shape)
    rep = nn.grad_check(lambda p: (_projection_loss(nn.relu(p["x"]), w),
                                   {"x": nn.relu_backward(p["x"], w)}), {"x": x}, tol)
    return CheckResult("relu", rep.max_error, tol)


def check_batchnorm(rng, mode="train", tol=1e-5) -> CheckResult:
    C = 3
    x = rng.standard_normal((3, C, 16)) * 2 + 1
    gamma, beta = rng.standard_normal(C), rng.standard_normal(C)
    rm, rv = rng.standard_normal(C), rng.uniform(0.5, 2, C)
    w = rng.standard_normal(x.shape)

    def f(p):
        lyr = nn.BatchNormLayer(p["gamma"], p["beta"], rm.copy(), rv.copy(), mode=mode,
                                track_stats=False)
        y = nn.batchnorm1d(p["x"], lyr)
        gx, gg, gb = nn.batchnorm1d_backward(p["x"], lyr, w)
        return _projection_loss(y, w), {"x": gx, "gamma": gg, "beta": gb}

    rep = nn.grad_check(f, {"x": x, "gamma": gamma, "beta": beta}, tol)
    return CheckResult(f"batchnorm1d({mode})", rep.max_error, tol)


def check_maxpool(rng, width=4, tol=1e-6) -> CheckResult:
    x = rng.standard_normal((2, 3, 18))
    w = rng.standard_normal((2, 3, -(-18 // width)))

    def f(p):
        y, idx = nn.maxpool1d(p["x"], width)
        return _projection_loss(y, w), {"x": nn.maxpool1d_backward(w, idx, width, 18)}

    rep = nn.grad_check(f, {"x": x}, tol)
    return CheckResult(f"maxpool1d(w={width})", rep.max_error, tol)


def check_upsample(rng, factor=4, tol=1e-6) -> CheckResult:
    x = rng.standard_normal((2, 3, 5))
    target = 18
    w = rng.standard_normal((2, 3, target))
    rep = nn.grad_check(
        lambda p: (_projection_loss(nn.upsample_nn(p["x"], factor, target), w),
                   {"x": nn.upsample_nn_backward(w, factor, 5)}), {"x": x}, tol)
    return CheckResult(f"upsample_nn(f={factor})", rep.max_error, tol)


def check_concat(rng, tol=1e-6) -> CheckResult:
    a, b = rng.standard_normal((2, 2, 8)), rng.standard_normal((2, 3, 8))
    w = rng.standard_normal((2, 5, 8))

    def f(p):
        ga, gb = nn.concat_channels_backward(w, 2)
        return _projection_loss(nn.concat_channels(p["a"], p["b"]), w), {"a": ga, "b": gb}

    rep = nn.grad_check(f, {"a": a, "b": b}, tol)
    return CheckResult("concat_channels", rep.max_error, tol)


def check_softmax(rng, tol=1e-6) -> CheckResult:
    x = rng.standard_normal((2, 2, 16))
    w = rng.standard_normal(x.shape)

    def f(p):
        y = nn.softmax_channels(p["x"])
        return _projection_loss(y, w), {"x": nn.softmax_channels_backward(y, w)}

    rep = nn.grad_check(f, {"x": x}, tol)
    return CheckResult("softmax_channels", rep.max_error, tol)


def check_dice(rng, tol=1e-5) -> CheckResult:
    p = rng.uniform(0.05, 0.95, (1, 1, 32))
    p = np.concatenate([p, 1 - p], axis=1)
    r = one_hot((rng.random((1, 32)) < 0.3).astype(np.float64)).astype(np.float64)

    def f(q):
        loss, grad = generalized_dice_loss(q["p"], r)
        return loss, {"p": grad}

    rep = nn.grad_check(f, {"p": p}, tol)
    return CheckResult("generalized_dice_loss", rep.max_error, tol)


def tiny_arch() -> model.ArchConfig:
    return model.ArchConfig(levels=2, pool_widths=(4,), channels=(2, 4), dilations=(1, 1))


def check_model(rng, arch: model.ArchConfig | None = None, T=64, tol=1e-4) -> CheckResult:
    """Full model in train mode with the dice loss on top, parameters and input."""
    arch = arch or tiny_arch()
    params = model.build(arch, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    buffers = {k: v for k, v in params.tensors.items() if k not in params.trainable()}
    x = rng.standard_normal((2, 1, T))
    r = one_hot((rng.random((2, T)) < 0.3).astype(np.float64)).astype(np.float64)

    def f(p):
        tensors = dict(buffers)
        tensors.update({k: v for k, v in p.items() if k != "input"})
        mp = model.ModelParams(arch, tensors)
        tape = model.Tape("train")
        probs = model.forward(mp, p["input"], "train", tape, track_stats=False)
        loss, g = generalized_dice_loss(probs, r)
        grads = model.backward(mp, tape, g)
        grads["input"] = tape.grad_input
        return loss, grads

    trainable = dict(params.trainable())
    trainable["input"] = x
    rep = nn.grad_check(f, trainable, tol)
    return CheckResult(f"model(levels={arch.levels}, channels={list(arch.channels)}, T={T})",
                       rep.max_error, tol)


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_conv(rng), check_conv(rng, dilation=2, k=5), check_conv(rng, k=4),
        check_relu(rng), check_batchnorm(rng, "train"), check_batchnorm(rng, "eval"),
        check_maxpool(rng), check_maxpool(rng, width=1), check_upsample(rng),
        check_concat(rng), check_softmax(rng), check_dice(rng), check_model(rng),
    ]
