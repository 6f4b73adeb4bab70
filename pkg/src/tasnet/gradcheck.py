"""Finite-difference checks for every differentiable op and the end-to-end loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gradcheck
from .dsp import StftConfig, stft_magnitude
from .losses import LossConfig, batch_loss, combined_loss, p_law, si_snr
from .model import ModelConfig, SeparationModel

OP_TOL = 1e-4
E2E_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.worst < self.tol


def _t(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    data = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(data, requires_grad=True)


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]]:
    def conv(rng):
        groups = int(rng.choice([1, 2]))
        cin, cout = 2 * groups, 2 * groups
        P = int(rng.integers(1, 4))
        stride, dil, pad = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
        x = _t(rng, 2, cin, 11)
        w = _t(rng, cout, cin // groups, P)
        b = _t(rng, cout)
        out_w = Tensor(rng.standard_normal(ag.conv1d(x, w, b, stride, dil, pad, groups).shape))
        return (lambda: ag.sum(ag.conv1d(x, w, b, stride, dil, pad, groups) * out_w)), [x, w, b]

    def depthwise(rng):
        x, w = _t(rng, 2, 4, 9), _t(rng, 4, 1, 3)
        d = int(rng.integers(1, 3))
        out_w = Tensor(rng.standard_normal((2, 4, 9)))
        return (lambda: ag.sum(ag.conv1d(x, w, None, 1, d, d, 4) * out_w)), [x, w]

    def conv_t(rng):
        groups = int(rng.choice([1, 2]))
        cin, cout = 2 * groups, 3 * groups
        P = int(rng.integers(1, 5))
        stride, dil = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        extra = int(rng.integers(0, max(stride, dil)))
        x = _t(rng, 2, cin, 6)
        w = _t(rng, cin, cout // groups, P)
        b = _t(rng, cout)

        def f():
            return ag.conv1d_transposed(x, w, b, stride, dil, pad, groups, output_padding=extra)

        out_w = Tensor(rng.standard_normal(f().shape))
        return (lambda: ag.sum(f() * out_w)), [x, w, b]

    def prelu(rng):
        x, s = _away_from_zero(rng, 2, 3, 5), _t(rng, 3, low=0.05, high=0.5)
        out_w = Tensor(rng.standard_normal((2, 3, 5)))
        return (lambda: ag.sum(ag.prelu(x, s) * out_w)), [x, s]

    def unary(fn, make):
        def case(rng):
            x = make(rng)
            out_w = Tensor(rng.standard_normal(x.shape))
            return (lambda: ag.sum(fn(x) * out_w)), [x]
        return case

    def binary(fn):
        def case(rng):
            a, b = _t(rng, 3, 4), _t(rng, 3, 4)
            out_w = Tensor(rng.standard_normal((3, 4)))
            return (lambda: ag.sum(fn(a, b) * out_w)), [a, b]
        return case

    def maximum(rng):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        b.data = np.where(np.abs(a.data - b.data) < 0.1, b.data + 0.3, b.data)  # stay off the tie
        out_w = Tensor(rng.standard_normal((3, 4)))
        return (lambda: ag.sum(ag.maximum(a, b) * out_w)), [a, b]

    def div(rng):
        a, b = _t(rng, 5), _away_from_zero(rng, 5)
        return (lambda: ag.sum(ag.div(a, b))), [a, b]

    def scalar_broadcast(rng):
        a, s = _t(rng, 6), _t(rng)
        return (lambda: ag.sum(ag.mul(s, a) * a)), [a, s]

    def reductions(rng):
        x = _t(rng, 3, 4)
        out_w = Tensor(rng.standard_normal(4))
        return (lambda: ag.sum(ag.mean(x, axis=0) * out_w) + ag.l2_norm_sq(x) + ag.dot(x, x * x)), [x]

    def shape_ops(rng):
        x = _t(rng, 2, 3, 4)
        out_w = Tensor(rng.standard_normal((3, 2, 4)))
        return (lambda: ag.sum(ag.stack([x[:, 1], x[0].reshape(3, 4)[:2].reshape(2, 4), x[1, 0:2]], 0)
                               * out_w) + ag.sum(ag.pad_or_trim(x, 6) * ag.pad_or_trim(x, 6))), [x]

    def gln(rng):
        x = _t(rng, 2, 3, 5)
        g, b = _t(rng, 3), _t(rng, 3)
        out_w = Tensor(rng.standard_normal((2, 3, 5)))
        return (lambda: ag.sum(ag.global_layer_norm(x, g, b, 1e-8) * out_w)), [x, g, b]

    def stft(rng):
        x = _t(rng, 2, 70)
        cfg = StftConfig(32, 16)
        out_w = Tensor(rng.standard_normal(stft_magnitude(x, cfg).shape))
        return (lambda: ag.sum(stft_magnitude(x, cfg) * out_w)), [x]

    def sisnr(rng):
        est, ref = _t(rng, 40), Tensor(rng.standard_normal(40))
        return (lambda: si_snr(est, ref)), [est]

    def plaw(rng):
        est, ref = _t(rng, 80), Tensor(rng.standard_normal(80))
        cfg = LossConfig(stft=StftConfig(32, 16))
        return (lambda: p_law(est, ref, cfg)), [est]

    def combined(rng):
        C = int(rng.choice([2, 3]))
        est, ref = _t(rng, C, 64), Tensor(rng.standard_normal((C, 64)))
        cfg = LossConfig(stft=StftConfig(32, 16))
        return (lambda: combined_loss(est, ref, cfg)[0]), [est]

    return {
        "conv1d": conv,
        "conv1d_depthwise": depthwise,
        "conv1d_transposed": conv_t,
        "prelu": prelu,
        "sigmoid": unary(ag.sigmoid, lambda r: _t(r, 3, 4)),
        "abs": unary(ag.abs, lambda r: _away_from_zero(r, 3, 4)),
        "pow": unary(lambda x: ag.pow(x, 0.5), lambda r: _t(r, 3, 4, low=0.1, high=2.0)),
        "log10": unary(ag.log10, lambda r: _t(r, 6, low=0.1, high=3.0)),
        "scalar_mul": unary(lambda x: ag.scalar_mul(x, -2.5), lambda r: _t(r, 5)),
        "add": binary(ag.add),
        "sub": binary(ag.sub),
        "mul": binary(ag.mul),
        "div": div,
        "maximum": maximum,
        "scalar_broadcast": scalar_broadcast,
        "sum_mean_norm_dot": reductions,
        "reshape_getitem_stack_pad": shape_ops,
        "global_layer_norm": gln,
        "stft_magnitude": stft,
        "si_snr": sisnr,
        "p_law": plaw,
        "combined_loss": combined,
    }


OP_NAMES = tuple(_op_cases())


def check_op(name: str, instances: int = 5, seed: int = 0) -> CheckResult:
    case = _op_cases()[name]
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        fn, params = case(rng)
        worst = max(worst, gradcheck(fn, params, h=1e-4))
    return CheckResult(name, worst, OP_TOL, instances)


def tiny_config(variant: str) -> ModelConfig:
    depth = {"linear": 1, "prelu": 2, "dilated": 3, "glu": 2}[variant]
    return ModelConfig(N=6, L=4, S=2, C=2, I=depth, encoder_variant=variant, B=4, H=6, Sc=4, P_sep=3,
                       X=2, R=1)


def _e2e_instance(variant: str, rng):
    model = SeparationModel(tiny_config(variant), seed=int(rng.integers(1 << 30)), dtype=np.float64)
    # non-zero biases so every path carries signal
    for p in model.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    mixture = rng.standard_normal((1, 48))
    refs = rng.standard_normal((1, 2, 48))
    return model, mixture, refs


def check_end_to_end(variant: str, instances: int = 5, seed: int = 0, per_param: int = 2,
                     h: float = 1e-6, kink_margin: float = 1e-5) -> CheckResult:
    """Loss gradient w.r.t. a few sampled entries of every parameter of a tiny float64 model.

    Instances with a PReLU/abs input closer than ``kink_margin`` to zero are
    redrawn, since central differences straddling a kink are meaningless.
    """
    cfg = LossConfig(stft=StftConfig(16, 8))
    worst = 0.0
    done = 0
    draw = 0
    while done < instances:
        rng = np.random.default_rng([seed, draw, 99])
        draw += 1
        model, mixture, refs = _e2e_instance(variant, rng)

        def fn():
            est = model(Tensor(mixture))
            return batch_loss(est, refs, cfg)[0]

        with ag.no_grad(), ag.track_kinks() as margins:
            fn()
        if min(margins, default=np.inf) < kink_margin:
            continue
        picks = {}
        for p in model.parameters():
            flat = rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False)
            picks[p.node_id] = [np.unravel_index(int(k), p.shape) for k in flat]
        worst = max(worst, gradcheck(fn, model.parameters(), h=h, indices=lambda p: picks[p.node_id]))
        done += 1
    return CheckResult(f"end_to_end[{variant}]", worst, E2E_TOL, instances)


def run_suite(instances: int = 5, seed: int = 0) -> list[CheckResult]:
    results = [check_op(name, instances, seed) for name in OP_NAMES]
    results += [check_end_to_end(v, instances, seed) for v in ("linear", "prelu", "dilated", "glu")]
    return results
