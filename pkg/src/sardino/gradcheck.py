"""Finite-difference battery over every differentiable operator plus one
end-to-end composite, used by both the test suite and the `gradcheck` CLI
command.

All checks run in double precision. Each case reduces the op's output to a
scalar through a fixed random weighting so that one backward pass exercises
the whole output gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

OP_TOLERANCE = 1e-3
COMPOSITE_TOLERANCE = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ag.reduce_sum(out * Tensor(np.asarray(w, dtype=out.data.dtype)))


def _op_cases(rng: np.random.Generator):
    """(name, f, x) triples; f maps the checked Tensor to a scalar Tensor."""
    f64 = np.float64

    def arr(*shape, scale=1.0, offset=0.0):
        return (offset + scale * rng.normal(size=shape)).astype(f64)

    def t(a, grad=True):
        return Tensor(a, requires_grad=grad, dtype=f64)

    cases = []

    def case(name, f, x):
        cases.append((name, f, Tensor(x, requires_grad=True, dtype=f64)))

    a34 = arr(3, 4)
    b34 = arr(3, 4, offset=3.0)  # offset keeps div/log/sqrt away from zero
    w34 = arr(3, 4)
    case("add", lambda x: _weighted(x + t(a34, False), w34), arr(3, 4))
    case("sub", lambda x: _weighted(t(a34, False) - x, w34), arr(3, 4))
    case("mul", lambda x: _weighted(x * t(a34, False), w34), arr(3, 4))
    case("div", lambda x: _weighted(x / t(b34, False), w34), arr(3, 4))
    case("div_denominator", lambda x: _weighted(t(a34, False) / x, w34),
         arr(3, 4, offset=3.0))
    case("power", lambda x: _weighted(ag.power(x, 3.0), w34), arr(3, 4, offset=2.0))
    case("exp", lambda x: _weighted(ag.exp(x), w34), arr(3, 4, scale=0.5))
    case("log", lambda x: _weighted(ag.log(x), w34), arr(3, 4, offset=3.0))
    case("sqrt", lambda x: _weighted(ag.sqrt(x), w34), arr(3, 4, offset=3.0))
    # keep relu inputs away from the kink
    relu_in = arr(3, 4)
    relu_in[np.abs(relu_in) < 0.2] += 0.5
    case("relu", lambda x: _weighted(ag.relu(x), w34), relu_in)
    case("gelu", lambda x: _weighted(ag.gelu(x), w34), arr(3, 4))

    w24 = arr(2, 12)
    w43 = arr(4, 3)
    w22 = arr(2, 2)
    w64 = arr(6, 4)
    case("reshape", lambda x: _weighted(ag.reshape(x, (2, 12)), w24), arr(4, 6))
    case("transpose", lambda x: _weighted(ag.transpose(x, (1, 0)), w43),
         arr(3, 4))
    case("getitem", lambda x: _weighted(x[1:3, ::2], w22), arr(4, 4))
    case("concat", lambda x: _weighted(ag.concat([x, t(a34, False)], axis=0),
                                       w64), arr(3, 4))

    w3 = arr(3)
    w4 = arr(4)
    case("reduce_sum", lambda x: _weighted(ag.reduce_sum(x, axis=1), w3),
         arr(3, 4))
    case("reduce_mean", lambda x: _weighted(ag.reduce_mean(x, axis=0), w4),
         arr(3, 4))
    # spread values so max/min argpoints are isolated
    ext_in = np.linspace(-2.0, 2.0, 12).reshape(3, 4) + 0.01 * arr(3, 4)
    case("reduce_max", lambda x: _weighted(ag.reduce_max(x, axis=1), w3),
         ext_in.copy())
    case("reduce_min", lambda x: _weighted(ag.reduce_min(x, axis=1), w3),
         ext_in.copy())

    m_rhs = arr(4, 5)
    m_lhs = arr(3, 4)
    w35 = arr(3, 5)
    case("matmul_lhs", lambda x: _weighted(ag.matmul(x, t(m_rhs, False)), w35),
         arr(3, 4))
    case("matmul_rhs", lambda x: _weighted(ag.matmul(t(m_lhs, False), x), w35),
         arr(4, 5))

    w_sm = arr(3, 5)
    case("softmax", lambda x: _weighted(ag.softmax(x, axis=-1), w_sm), arr(3, 5))
    case("log_softmax", lambda x: _weighted(ag.log_softmax(x, axis=-1), w_sm),
         arr(3, 5))

    ln_g = Tensor(arr(6), requires_grad=False, dtype=f64)
    ln_b = Tensor(arr(6), requires_grad=False, dtype=f64)
    w26 = arr(2, 6)
    case("layer_norm", lambda x: _weighted(ag.layer_norm(x, ln_g, ln_b), w26),
         arr(2, 6))

    bn_g = Tensor(arr(3), requires_grad=False, dtype=f64)
    bn_b = Tensor(arr(3), requires_grad=False, dtype=f64)
    w_bn = arr(2, 3, 4, 4)

    def bn(x):
        mean = np.zeros(3, dtype=f64)
        var = np.ones(3, dtype=f64)
        return _weighted(ag.batch_norm2d(x, bn_g, bn_b, mean, var,
                                         training=True), w_bn)
    case("batch_norm2d", bn, arr(2, 3, 4, 4))

    cw = Tensor(arr(4, 3, 3, 3, scale=0.5), requires_grad=False, dtype=f64)
    cb = Tensor(arr(4, scale=0.1), requires_grad=False, dtype=f64)
    w_conv = arr(2, 4, 6, 6)
    case("conv2d_input",
         lambda x: _weighted(ag.conv2d(x, cw, cb, stride=1, padding=1), w_conv),
         arr(2, 3, 6, 6))
    cx = Tensor(arr(2, 3, 6, 6), requires_grad=False, dtype=f64)
    case("conv2d_weight",
         lambda w: _weighted(ag.conv2d(cx, w, cb, stride=1, padding=1), w_conv),
         arr(4, 3, 3, 3, scale=0.5))
    w_convs = arr(2, 4, 3, 3)
    case("conv2d_strided",
         lambda x: _weighted(ag.conv2d(x, cw, cb, stride=2, padding=1), w_convs),
         arr(2, 3, 6, 6))

    # well-separated values keep the pooling argmax stable under perturbation
    pool_in = np.arange(2 * 3 * 6 * 6, dtype=f64).reshape(2, 3, 6, 6)
    pool_in += 0.05 * arr(2, 3, 6, 6)
    w_pool = arr(2, 3, 3, 3)
    case("max_pool2d", lambda x: _weighted(ag.max_pool2d(x), w_pool), pool_in)

    w_up = arr(1, 2, 8, 8)
    case("bilinear_upsample2x",
         lambda x: _weighted(ag.bilinear_upsample2x(x), w_up), arr(1, 2, 4, 4))

    targets = rng.integers(0, 5, size=6)
    case("cross_entropy", lambda x: ag.cross_entropy(x, targets), arr(6, 5))
    targets4 = rng.integers(0, 5, size=(2, 3, 3))
    case("cross_entropy_spatial", lambda x: ag.cross_entropy(x, targets4),
         arr(2, 5, 3, 3))
    onehot = (rng.random((4, 5)) < 0.4).astype(f64)
    case("sigmoid_bce_with_logits",
         lambda x: ag.sigmoid_bce_with_logits(x, onehot), arr(4, 5))

    return cases


def _composite_case(rng: np.random.Generator):
    """Desk encoder feeding the token decoder and a pixel cross-entropy,
    checked along random input directions so the whole input gradient path
    is exercised without perturbing every pixel."""
    from .decoders import TokenDecoder
    from .vit import ViTConfig, VisionTransformer

    cfg = ViTConfig.desk()
    with ag.double_precision():
        vit = VisionTransformer(cfg, np.random.default_rng(0))
        decoder = TokenDecoder(cfg.embed_dim, 11, np.random.default_rng(1))
    base = rng.normal(size=(1, cfg.in_channels, cfg.image_size,
                            cfg.image_size)).astype(np.float64)
    n_dirs = 24
    proj = rng.normal(size=(base.size, n_dirs)).astype(np.float64) / np.sqrt(base.size)
    out_side = cfg.image_size // cfg.patch_size * 16
    labels = rng.integers(0, 11, size=(1, out_side, out_side))

    def f(v: Tensor) -> Tensor:
        delta = ag.reshape(ag.matmul(ag.reshape(v, (1, n_dirs)),
                                     Tensor(proj.T, dtype=np.float64)),
                           base.shape)
        x = Tensor(base, dtype=np.float64) + delta
        out = vit(x)
        tokens = ag.transpose(out.patch_tokens, (0, 3, 1, 2))
        logits = decoder(tokens)
        return ag.cross_entropy(logits, labels)

    return "composite_vit_token_decoder", f, Tensor(
        np.zeros(n_dirs, dtype=np.float64), requires_grad=True, dtype=np.float64)


def run_battery(seed: int = 0, include_composite: bool = True,
                eps: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with ag.double_precision():
        for name, f, x in _op_cases(rng):
            err = ag.gradient_check(f, x, eps=eps)
            results.append(CheckResult(name, err, OP_TOLERANCE))
        if include_composite:
            name, f, x = _composite_case(rng)
            err = ag.gradient_check(f, x, eps=eps)
            results.append(CheckResult(name, err, COMPOSITE_TOLERANCE))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<{width}}  max rel err "
                     f"{r.max_rel_err:.3e}  (tol {r.tolerance:g})")
    failed = [r.name for r in results if not r.passed]
    if failed:
        lines.append(f"{len(failed)} of {len(results)} checks failed: "
                     + ", ".join(failed))
    else:
        lines.append(f"all {len(results)} gradient checks passed")
    return "\n".join(lines)
