"""Finite-difference verification registry behind the gradcheck command.

Each registered op gets a small double-precision probe whose analytic
gradient is compared against central differences; the tiny end-to-end block
check differentiates a decoder block through every parameter and both input
streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import DecoderBlock
from .config import ModelConfig
from .layers import GroupNorm, MultiHeadAttention
from .tensor import ParamStore, Tensor, _make, grad_check
from .train import bce_loss

OP_TOL = 1e-4
BLOCK_TOL = 1e-3
FD_H = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def _u(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape))


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.2, 2.0, size=shape))


def _op_cases(rng):
    x34 = lambda: _u(rng, 3, 4)
    return [
        ("add", lambda: grad_check(
            lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))),
            [x34(), x34()], FD_H, OP_TOL)),
        ("sub", lambda: grad_check(
            lambda a, b: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))),
            [x34(), x34()], FD_H, OP_TOL)),
        ("mul", lambda: grad_check(
            lambda a, b: T.tsum(T.mul(T.mul(a, b), T.mul(a, b))),
            [x34(), x34()], FD_H, OP_TOL)),
        ("div", lambda: grad_check(
            lambda a, b: T.tsum(T.div(a, b)), [x34(), _pos(rng, 3, 4)], FD_H, OP_TOL)),
        ("matmul", lambda: grad_check(
            lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))),
            [_u(rng, 3, 4), _u(rng, 4, 2)], FD_H, OP_TOL)),
        ("relu", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.relu(a), T.relu(a))), x34(), FD_H, OP_TOL)),
        ("gelu", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.gelu(a), T.gelu(a))), x34(), FD_H, OP_TOL)),
        ("sigmoid", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.sigmoid(a), T.sigmoid(a))), x34(), FD_H, OP_TOL)),
        ("exp", lambda: grad_check(
            lambda a: T.tsum(T.exp(a)), x34(), FD_H, OP_TOL)),
        ("log", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.log(a), T.log(a))), _pos(rng, 3, 4), FD_H, OP_TOL)),
        ("sqrt", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.sqrt(a), a)), _pos(rng, 3, 4), FD_H, OP_TOL)),
        ("power", lambda: grad_check(
            lambda a: T.tsum(T.power(a, 3.0)), x34(), FD_H, OP_TOL)),
        ("clip", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.clip(a, -1.0, 1.0), a)), x34(), FD_H, OP_TOL)),
        ("softmax", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.softmax(a, -1), T.softmax(a, -1))),
            x34(), FD_H, OP_TOL)),
        ("layer_norm", lambda: grad_check(
            lambda a, g, b: T.tsum(T.mul(T.layer_norm(a, g, b), a)),
            [x34(), _pos(rng, 4), _u(rng, 4)], FD_H, OP_TOL)),
        ("sum", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.tsum(a, axis=1, keepdims=True), a)),
            x34(), FD_H, OP_TOL)),
        ("mean", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.tmean(a, axis=0, keepdims=True), a)),
            x34(), FD_H, OP_TOL)),
        ("reshape", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.reshape(a, (4, 3)), T.reshape(a, (4, 3)))),
            x34(), FD_H, OP_TOL)),
        ("transpose", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.transpose(a), T.transpose(a))),
            x34(), FD_H, OP_TOL)),
        ("concat", lambda: grad_check(
            lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=1),
                                      T.concat([a, b], axis=1))),
            [_u(rng, 3, 2), _u(rng, 3, 3)], FD_H, OP_TOL)),
        ("pad2d_reflect", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.pad2d(a, 2, "reflect"), T.pad2d(a, 2, "reflect"))),
            _u(rng, 1, 2, 4, 4), FD_H, OP_TOL)),
        ("conv2d", lambda: grad_check(
            lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b, stride=2, padding=1),
                                         T.conv2d(x, w, b, stride=2, padding=1))),
            [_u(rng, 2, 2, 5, 5), Tensor(rng.uniform(-1, 1, size=(3, 2, 3, 3))),
             _u(rng, 3)], FD_H, OP_TOL)),
        ("bilinear_resize", lambda: grad_check(
            lambda a: T.tsum(T.mul(T.bilinear_resize(a, 5, 7, True),
                                   T.bilinear_resize(a, 5, 7, True))),
            _u(rng, 1, 2, 3, 4), FD_H, OP_TOL)),
        ("group_norm", lambda: _group_norm_check(rng)),
        ("attention", lambda: _attention_check(rng)),
        ("bce_loss", lambda: grad_check(
            lambda m, g: bce_loss(T.sigmoid(m), T.sigmoid(g)),
            [x34(), x34()], FD_H, OP_TOL)),
    ]


def _amplify(store: ParamStore, rng) -> None:
    # fresh-init weights are 0.02-scale, which makes losses (and thus FD
    # signal) vanish quadratically; draw O(1) weights so a wrong gradient
    # cannot hide below tolerance
    for _, t in store.items():
        t.data = rng.uniform(-0.5, 0.5, size=t.shape)


def _group_norm_check(rng):
    store = ParamStore()
    gn = GroupNorm(store, "gn", 4, 2)
    _amplify(store, rng)
    x = Tensor(rng.uniform(-2, 2, size=(2, 4, 3, 3)))
    return grad_check(
        lambda *_: T.tsum(T.mul(gn(x), x)),
        [x, gn.gamma, gn.beta], FD_H, OP_TOL)


def _attention_check(rng):
    store = ParamStore()
    attn = MultiHeadAttention(store, "attn", 4, 2, np.random.default_rng(0))
    _amplify(store, rng)
    q = Tensor(rng.uniform(-1, 1, size=(3, 1, 4)))
    k = Tensor(rng.uniform(-1, 1, size=(3, 1, 4)))
    v = Tensor(rng.uniform(-1, 1, size=(3, 1, 4)))
    xs = [q, k, v] + store.tensors()
    return grad_check(lambda *_: T.tsum(T.mul(attn(q, k, v)[0], attn(q, k, v)[0])),
                      xs, FD_H, OP_TOL)


def run_op_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, runner in _op_cases(rng):
        rep = runner()
        results.append(CheckResult(name, rep.max_rel_err, rep.tol))
    return results


def run_block_check(seed: int = 0) -> CheckResult:
    """End-to-end check of one decoder block: 4 tokens, batch 1, 8 channels,
    2 heads; loss = sum(contour) + sum(semantic); all parameters and both
    input streams are differentiated."""
    cfg = ModelConfig(channels=8, heads=2, blocks=1, enc_channels=(4, 4, 8, 8),
                      enc_groups=2, res=(16, 16), dtype="float64")
    store = ParamStore()
    block = DecoderBlock(store, cfg, np.random.default_rng(seed), "block")
    rng = np.random.default_rng(seed + 1)
    _amplify(store, rng)
    hr = Tensor(rng.uniform(-1, 1, size=(4, 1, 8)))
    lr = Tensor(rng.uniform(-1, 1, size=(4, 1, 8)))

    def loss(*_):
        out = block(hr, lr)
        return T.tsum(out.contour) + T.tsum(out.semantic)

    rep = grad_check(loss, [hr, lr] + store.tensors(), FD_H, BLOCK_TOL)
    return CheckResult("block_end_to_end", rep.max_rel_err, rep.tol)


def buggy_check(seed: int = 0) -> CheckResult:
    """Deliberately broken op (sign-flipped vjp); the detector must flag it."""
    rng = np.random.default_rng(seed)

    def broken_double(x):
        return _make(x.data * 2.0, (x,), lambda g: (-2.0 * g,))

    rep = grad_check(lambda a: T.tsum(broken_double(a)),
                     Tensor(rng.uniform(-2, 2, size=(3,))), FD_H, OP_TOL)
    return CheckResult("injected_bug_probe", rep.max_rel_err, rep.tol)


def run_all(seed: int = 0, include_block: bool = True,
            inject_bug: bool = False) -> list[CheckResult]:
    results = run_op_checks(seed)
    if include_block:
        results.append(run_block_check(seed))
    if inject_bug:
        results.append(buggy_check(seed))
    return results
