"""Module-tagged finite-difference gradient suites.

Every case builds a scalar objective ``sum(out * R)`` with a fixed random
weighting ``R`` so that no coordinate of the gradient is structurally tiny,
then checks all inputs and parameters against central differences in
float64. A 32-bit run is informational: it compares float32 analytic
gradients with the float64 ones instead of gating on a tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import nn, ops
from .attention import MMCA, MMCAConfig, mmca
from .blocks import MMSSB, TVSSM, MMSSGConfig, mm_ssb, mm_ssg_stack, tv_ssm
from .detector import DetectionTargets, DetectorConfig, SurrogateDetector
from .gradcheck import grad_check
from .losses import CharbonnierConfig, TACConfig, charbonnier_loss, detection_loss, tac_loss
from .ssm import SSMParams, scan3d, selective_scan_1d, selective_scan_core
from .tensor import Tensor, backward

MODULES = ("substrate", "ssm", "attention", "blocks", "losses")
TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator, type], tuple[Callable[..., Tensor], list[Tensor]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    module: str
    build: Builder


@dataclass
class GradResult:
    name: str
    module: str
    max_rel_error: float
    passed: bool
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.module:<10} {self.name:<28} max_rel_err={self.max_rel_error:.3e}  ({self.seconds:.1f}s)"


def _t(rng, shape, dtype, lo=-1.0, hi=1.0, grad=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=grad)


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(r.astype(out.dtype))))


def _generic_point(mod, rng, gain: float = 1.0):
    """Move scan parameters off their near-memoryless init so every coordinate has a sizeable gradient.

    At initialization the scan step sizes are ~1e-2 and the skip gain ``D``
    dominates the output, which leaves the ``A_log`` and ``dt_proj`` gradients
    near the roundoff floor of a 1e-5 central difference.
    ``gain`` additionally scales every weight matrix and kernel.
    """
    for name, p in mod.named_parameters():
        if name.endswith("A_log"):
            p.data = rng.uniform(-2.0, -0.5, p.shape).astype(p.dtype)
        elif name.endswith("dt_proj.bias"):
            dt = rng.uniform(0.3, 1.0, p.shape)
            p.data = (dt + np.log(-np.expm1(-dt))).astype(p.dtype)
        elif name.endswith(".D") or name == "D":
            p.data = rng.uniform(-0.5, 0.5, p.shape).astype(p.dtype)
        elif name.endswith("B_proj.weight") or name.endswith("C_proj.weight"):
            p.data = (p.data * 2.0).astype(p.dtype)
        elif gain != 1.0 and name.endswith("weight") and p.ndim >= 2:
            p.data = (p.data * gain).astype(p.dtype)
    return mod


def _unary_case(fn, lo=-2.0, hi=2.0, shape=(3, 4)) -> Builder:
    def build(rng, dtype):
        x = _t(rng, shape, dtype, lo, hi)
        r = rng.standard_normal(fn(x).shape)
        return (lambda x: _weighted(fn(x), r)), [x]
    return build


def _binary_case(fn, shape_a=(3, 4), shape_b=(3, 4), lo_b=-1.0, hi_b=1.0) -> Builder:
    def build(rng, dtype):
        a = _t(rng, shape_a, dtype)
        b = _t(rng, shape_b, dtype, lo_b, hi_b)
        r = rng.standard_normal(fn(a, b).shape)
        return (lambda a, b: _weighted(fn(a, b), r)), [a, b]
    return build


def _module_case(make, forward, in_shapes) -> Builder:
    """Check the listed inputs plus every parameter of the module built by ``make``."""
    def build(rng, dtype):
        mod = _generic_point(make(rng).to(dtype), rng)
        xs = [_t(rng, s, dtype) for s in in_shapes]
        params = mod.parameters()
        n = len(xs)
        out_shape = forward(mod, *xs).shape
        r = rng.standard_normal(out_shape)
        return (lambda *a: _weighted(forward(mod, *a[:n]), r)), xs + params
    return build


def _substrate_cases() -> list[GradCase]:
    def c(name, build):
        return GradCase(name, "substrate", build)

    def mm3(rng, dtype):
        a, b = _t(rng, (2, 3, 4), dtype), _t(rng, (2, 4, 5), dtype)
        r = rng.standard_normal((2, 3, 5))
        return (lambda a, b: _weighted(ops.matmul(a, b), r)), [a, b]

    def getitem_case(rng, dtype):
        x = _t(rng, (5, 4), dtype)
        idx = (np.array([0, 2, 2, 4]), slice(1, 3))
        r = rng.standard_normal((4, 2))
        return (lambda x: _weighted(ops.getitem(x, idx), r)), [x]

    def take_case(rng, dtype):
        x = _t(rng, (5, 3), dtype)
        idx = np.array([4, 0, 0, 2])
        r = rng.standard_normal((4, 3))
        return (lambda x: _weighted(ops.take(x, idx, axis=0), r)), [x]

    def embedding_case(rng, dtype):
        table = _t(rng, (6, 3), dtype)
        r = rng.standard_normal((4, 3))
        return (lambda t: _weighted(ops.embedding(t, [1, 5, 1, 0]), r)), [table]

    def concat_case(rng, dtype):
        a, b = _t(rng, (3, 2), dtype), _t(rng, (3, 4), dtype)
        r = rng.standard_normal((3, 6))
        return (lambda a, b: _weighted(ops.concat([a, b], axis=-1), r)), [a, b]

    def bcast_case(rng, dtype):
        x = _t(rng, (4,), dtype)
        r = rng.standard_normal((2, 3, 4))
        return (lambda x: _weighted(ops.broadcast_to(x, (2, 3, 4)), r)), [x]

    def ce_case(rng, dtype):
        z = _t(rng, (5, 3), dtype, -2, 2)
        return (lambda z: ops.cross_entropy(z, [0, 2, 1, 1, 0])), [z]

    def bce_case(rng, dtype):
        z = _t(rng, (6,), dtype, -3, 3)
        t = np.array([1, 0, 1, 0, 0, 1], dtype=dtype)
        return (lambda z: ops.sum(ops.bce_with_logits(z, t))), [z]

    def ln_case(rng, dtype):
        x = _t(rng, (3, 3, 5), dtype, -2, 2)
        g, b = _t(rng, (5,), dtype, 0.5, 1.5), _t(rng, (5,), dtype)
        r = rng.standard_normal((3, 3, 5))
        return (lambda x, g, b: _weighted(ops.layer_norm(x, g, b), r)), [x, g, b]

    def conv_case(stride, padding):
        def build(rng, dtype):
            x = _t(rng, (6, 5, 2), dtype)
            k = _t(rng, (3, 3, 2, 3), dtype)
            b = _t(rng, (3,), dtype)
            shape = ops.conv2d(x, k, b, stride, padding).shape
            r = rng.standard_normal(shape)
            return (lambda x, k, b: _weighted(ops.conv2d(x, k, b, stride, padding), r)), [x, k, b]
        return build

    def dw_case(rng, dtype):
        x = _t(rng, (5, 4, 3), dtype)
        k, b = _t(rng, (3, 3, 3), dtype), _t(rng, (3,), dtype)
        r = rng.standard_normal((5, 4, 3))
        return (lambda x, k, b: _weighted(ops.depthwise_conv2d(x, k, b), r)), [x, k, b]

    def sum_axis(rng, dtype):
        x = _t(rng, (3, 4, 2), dtype)
        r = rng.standard_normal((3, 2))
        return (lambda x: _weighted(ops.sum(x, axis=1), r)), [x]

    def mean_axis(rng, dtype):
        x = _t(rng, (3, 4), dtype)
        r = rng.standard_normal((4,))
        return (lambda x: _weighted(ops.mean(x, axis=0), r)), [x]

    return [
        c("add", _binary_case(ops.add)),
        c("add_channel", _binary_case(ops.add, (3, 4), (4,))),
        c("sub", _binary_case(ops.sub)),
        c("mul", _binary_case(ops.mul)),
        c("mul_scalar_tensor", _binary_case(ops.mul, (3, 4), ())),
        c("div", _binary_case(ops.div, lo_b=0.5, hi_b=2.0)),
        c("exp", _unary_case(ops.exp)),
        c("log", _unary_case(ops.log, 0.3, 3.0)),
        c("sqrt", _unary_case(ops.sqrt, 0.3, 3.0)),
        c("sigmoid", _unary_case(ops.sigmoid, -4, 4)),
        c("silu", _unary_case(ops.silu, -4, 4)),
        c("softplus", _unary_case(ops.softplus, -4, 4)),
        c("clamp_min", _unary_case(lambda x: ops.clamp_min(x, 0.05), 0.1, 2.0)),
        c("clamp", _unary_case(lambda x: ops.clamp(x, -0.5, 0.5), -0.4, 0.4)),
        c("smooth_l1", _unary_case(ops.smooth_l1, -0.9, 0.9)),
        c("smooth_l1_linear", _unary_case(ops.smooth_l1, 1.2, 3.0)),
        c("neg", _unary_case(ops.neg)),
        c("matmul", _binary_case(ops.matmul, (3, 4), (4, 2))),
        c("matmul_batched", mm3),
        c("reshape", _unary_case(lambda x: ops.reshape(x, (2, 6)))),
        c("transpose", _unary_case(lambda x: ops.transpose(x, (1, 0)))),
        c("getitem", getitem_case),
        c("take", take_case),
        c("embedding", embedding_case),
        c("concat", concat_case),
        c("broadcast_to", bcast_case),
        c("sum_axis", sum_axis),
        c("mean_axis", mean_axis),
        c("softmax", _unary_case(ops.softmax)),
        c("log_softmax", _unary_case(ops.log_softmax)),
        c("cross_entropy", ce_case),
        c("bce_with_logits", bce_case),
        c("layer_norm", ln_case),
        c("conv2d", conv_case(1, 1)),
        c("conv2d_stride2", conv_case(2, 1)),
        c("conv2d_valid", conv_case(1, 0)),
        c("depthwise_conv2d", dw_case),
        c("linear", _module_case(lambda rng: nn.Linear(rng, 3, 4), lambda m, x: m(x), [(5, 3)])),
    ]


def _ssm_cases() -> list[GradCase]:
    def core(rng, dtype):
        L, E, N = 7, 3, 2
        u = _t(rng, (L, E), dtype)
        delta = _t(rng, (L, E), dtype, 0.05, 0.8)
        A = _t(rng, (E, N), dtype, -1.5, -0.2)
        B, C = _t(rng, (L, N), dtype), _t(rng, (L, N), dtype)
        D = _t(rng, (E,), dtype)
        r = rng.standard_normal((L, E))
        return (lambda *a: _weighted(selective_scan_core(*a), r)), [u, delta, A, B, C, D]

    def scan3d_case(rng, dtype):
        c = 3
        spatial = [_generic_point(SSMParams(rng, c, 2).to(dtype), rng) for _ in range(4)]
        text = _generic_point(SSMParams(rng, c, 2).to(dtype), rng)
        img = _t(rng, (3, 4, c), dtype)
        txt = _t(rng, (3, c), dtype)
        params = [p for m in (*spatial, text) for p in m.parameters()]
        r = rng.standard_normal((3, 4, c))
        return (lambda i, t, *_: _weighted(scan3d(i, t, spatial, text).y, r)), [img, txt] + params

    return [
        GradCase("selective_scan_core", "ssm", core),
        GradCase("selective_scan_1d", "ssm", _module_case(
            lambda rng: SSMParams(rng, 4, 3), lambda m, x: selective_scan_1d(x, m), [(9, 4)])),
        GradCase("scan3d", "ssm", scan3d_case),
    ]


def _attention_cases() -> list[GradCase]:
    def case(query_from):
        def build(rng, dtype):
            cfg = MMCAConfig(embed_dim=4, num_heads=2, query_from=query_from)
            mod = MMCA(rng, cfg).to(dtype)
            fused, maskf = _t(rng, (3, 3, 4), dtype), _t(rng, (3, 3, 4), dtype)
            text = _t(rng, (5, 4), dtype)
            gate = Tensor(rng.uniform(0.2, 1.0, size=(3, 3)).astype(dtype))
            r = rng.standard_normal((3, 3, 4))
            fn = lambda f, m, t, *_: _weighted(mmca(t, f, m, t, gate, mod), r)  # noqa: E731
            return fn, [fused, maskf, text] + mod.parameters()
        return build

    return [GradCase("mmca_text_query", "attention", case("text")),
            GradCase("mmca_visual_query", "attention", case("visual"))]


def _blocks_cases() -> list[GradCase]:
    attn = MMCAConfig(embed_dim=4, num_heads=2)

    def tv(rng, dtype):
        mod = _generic_point(TVSSM(rng, 4, 6, 2).to(dtype), rng, gain=2.0)
        fi, fm, ft = _t(rng, (3, 3, 4), dtype), _t(rng, (3, 3, 4), dtype), _t(rng, (5, 4), dtype)
        r = rng.standard_normal((3, 3, 4))
        return (lambda a, b, c, *_: _weighted(tv_ssm(a, b, c, mod), r)), [fi, fm, ft] + mod.parameters()

    def block(rng, dtype):
        mod = _generic_point(MMSSB(rng, 4, 6, 2, attn).to(dtype), rng)
        fi, fm, ft = _t(rng, (3, 3, 4), dtype), _t(rng, (3, 3, 4), dtype), _t(rng, (5, 4), dtype)
        gate = Tensor(rng.uniform(0.2, 1.0, size=(3, 3)).astype(dtype))
        r = rng.standard_normal((3, 3, 4))
        return (lambda a, b, c, *_: _weighted(mm_ssb(a, b, c, gate, mod), r)), [fi, fm, ft] + mod.parameters()

    def stack(rng, dtype):
        cfg = MMSSGConfig(blocks_per_group=1, num_groups=2)
        mods = [_generic_point(MMSSB(rng, 4, 6, 2, attn).to(dtype), rng) for _ in range(cfg.depth)]
        fi, fm, ft = _t(rng, (3, 3, 4), dtype), _t(rng, (3, 3, 4), dtype), _t(rng, (5, 4), dtype)
        gate = Tensor(rng.uniform(0.2, 1.0, size=(3, 3)).astype(dtype))
        r = rng.standard_normal((3, 3, 4))
        params = [p for m in mods for p in m.parameters()]
        fn = lambda a, b, c, *_: _weighted(mm_ssg_stack(a, b, c, gate, cfg, mods), r)  # noqa: E731
        return fn, [fi, fm, ft] + params

    def wide_stack(rng, dtype):
        # 6x6x8 end-to-end with respect to the three feature inputs only; the
        # parameters are covered exhaustively by the smaller stack above
        cfg = MMSSGConfig(blocks_per_group=1, num_groups=2)
        mods = [_generic_point(MMSSB(rng, 8, 16, 2, MMCAConfig(8, 2)).to(dtype), rng) for _ in range(cfg.depth)]
        for m in mods:
            m.requires_grad_(False)
        fi, fm, ft = _t(rng, (6, 6, 8), dtype), _t(rng, (6, 6, 8), dtype), _t(rng, (5, 8), dtype)
        gate = Tensor(rng.uniform(0.2, 1.0, size=(6, 6)).astype(dtype))
        r = rng.standard_normal((6, 6, 8))
        return (lambda a, b, c: _weighted(mm_ssg_stack(a, b, c, gate, cfg, mods), r)), [fi, fm, ft]

    return [GradCase("tv_ssm", "blocks", tv), GradCase("mm_ssb", "blocks", block),
            GradCase("mm_ssb_depth2", "blocks", stack), GradCase("mm_ssb_depth2_6x6x8", "blocks", wide_stack)]


def _targets() -> DetectionTargets:
    # boxes sized so matched anchors sit well inside the positive band and the
    # regression residuals stay clear of the smooth-L1 kink
    return DetectionTargets(np.array([[3.0, 2.0, 15.0, 13.0], [17.0, 18.0, 30.0, 29.0]]),
                            np.array([0, 2]), (32, 32))


def _detector(rng, dtype, trainable: bool) -> SurrogateDetector:
    det = SurrogateDetector(DetectorConfig(width=4), seed=int(rng.integers(1 << 30))).to(dtype)
    return _generic_point(det, rng, gain=3.0).requires_grad_(trainable)


def _offset(rng, x: np.ndarray) -> np.ndarray:
    """A reference image at least 0.05 away from ``x`` everywhere, clear of the Charbonnier curvature peak."""
    sign = rng.choice([-1.0, 1.0], size=x.shape)
    return (x + sign * rng.uniform(0.05, 0.3, size=x.shape)).astype(x.dtype)


def _losses_cases() -> list[GradCase]:
    def charb(rng, dtype):
        i_hat = _t(rng, (4, 4, 3), dtype, 0, 1)
        f, v = _offset(rng, i_hat.data), _offset(rng, i_hat.data)
        cfg = CharbonnierConfig(alpha=0.3, beta=0.7)
        return (lambda i: charbonnier_loss(i, f, v, cfg)), [i_hat]

    def det_image(rng, dtype):
        det = _detector(rng, dtype, False)
        img = _t(rng, (32, 32, 3), dtype, 0, 1)
        return (lambda x: detection_loss(x, _targets(), det)[0]), [img]

    def det_params(rng, dtype):
        det = _detector(rng, dtype, True)
        img = Tensor(rng.uniform(0, 1, (32, 32, 3)).astype(dtype))
        return (lambda *_: detection_loss(img, _targets(), det)[0]), det.parameters()

    def tac(rng, dtype):
        det = _detector(rng, dtype, False)
        img = _t(rng, (32, 32, 3), dtype, 0, 1)
        f, v = _offset(rng, img.data), _offset(rng, img.data)
        cfg = TACConfig(CharbonnierConfig(alpha=0.3, beta=0.7), detector=det)
        return (lambda x: tac_loss(x, f, v, _targets(), cfg)[0]), [img]

    return [GradCase("charbonnier", "losses", charb), GradCase("detection_loss_image", "losses", det_image),
            GradCase("detection_loss_params", "losses", det_params), GradCase("tac_loss", "losses", tac)]


def all_cases() -> list[GradCase]:
    return _substrate_cases() + _ssm_cases() + _attention_cases() + _blocks_cases() + _losses_cases()


def select(module: str = "all") -> list[GradCase]:
    if module != "all" and module not in MODULES:
        raise ValueError(f"unknown module tag {module!r}; choose from {', '.join(('all',) + MODULES)}")
    return [c for c in all_cases() if module == "all" or c.module == module]


def _analytic(case: GradCase, seed: int, dtype) -> list[np.ndarray]:
    f, inputs = case.build(np.random.default_rng(seed), dtype)
    backward(f(*inputs))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs if t.requires_grad]


def run_case(case: GradCase, precision: int = 64, seed: int = 0, tol: float = TOLERANCE) -> GradResult:
    """64-bit: central-difference check. 32-bit: float32 vs float64 analytic gradients (never fails)."""
    start = time.perf_counter()
    if precision == 64:
        f, inputs = case.build(np.random.default_rng(seed), np.float64)
        err = grad_check(f, inputs)
        passed = err < tol
    elif precision == 32:
        g32 = _analytic(case, seed, np.float32)
        g64 = _analytic(case, seed, np.float64)
        err = 0.0
        for a, b in zip(g32, g64):
            diff = np.abs(a.astype(np.float64) - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
            err = max(err, float(diff.max(initial=0.0)))
        passed = True
    else:
        raise ValueError("precision must be 32 or 64")
    return GradResult(case.name, case.module, float(err), passed, time.perf_counter() - start)


def run_suites(module: str = "all", precision: int = 64, seed: int = 0,
               on_result: Callable[[GradResult], None] | None = None) -> list[GradResult]:
    results = []
    for case in select(module):
        res = run_case(case, precision, seed)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results


def summarize(results: Iterable[GradResult]) -> tuple[int, int]:
    results = list(results)
    return sum(r.passed for r in results), len(results)
