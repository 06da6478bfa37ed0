"""Slow, independent reference implementations for cross-checking fast paths.

Everything in this module favors literal index-by-index summation over the
vectorized routines used elsewhere, so a bug would have to be made twice,
in two different shapes, to slip through.  Domain guards keep the quadratic
and quartic loops affordable.  Reports serialize to JSON lines so harnesses
can collect them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ConvKernel, Tape, Tensor
from . import tensor as T

ORACLE_MAX_HW = 16
ORACLE_MAX_CH = 8


class OracleDomainError(ValueError):
    """Input exceeds the size band the slow oracles are meant for."""


def _guard_size(h: int, w: int, *channel_counts: int) -> None:
    if h > ORACLE_MAX_HW or w > ORACLE_MAX_HW:
        raise OracleDomainError(f"oracle input {h}x{w} exceeds {ORACLE_MAX_HW}x{ORACLE_MAX_HW}")
    for c in channel_counts:
        if c > ORACLE_MAX_CH:
            raise OracleDomainError(f"oracle channel count {c} exceeds {ORACLE_MAX_CH}")


# ---------------------------------------------------------------------------
# direct convolution and CRF quantities
# ---------------------------------------------------------------------------

def direct_conv(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Cross-correlation as a literal quadruple loop with scalar accumulation."""
    _guard_size(x.height, x.width, x.channels, kernel.out_channels)
    if kernel.in_channels != x.channels:
        raise T.ShapeError(f"direct_conv: kernel expects {kernel.in_channels} channels, "
                           f"input has {x.channels}")
    kh, kw = kernel.ksize
    s, p = kernel.stride, kernel.padding
    ho = T.conv_output_size(x.height, kh, s, p)
    wo = T.conv_output_size(x.width, kw, s, p)
    if ho < 1 or wo < 1:
        raise T.ShapeError("direct_conv: kernel does not fit input")
    out = np.zeros((kernel.out_channels, ho, wo))
    for oy in range(ho):
        for ox in range(wo):
            for co in range(kernel.out_channels):
                acc = 0.0
                for ky in range(kh):
                    iy = oy * s + ky - p
                    if iy < 0 or iy >= x.height:
                        continue
                    for kx in range(kw):
                        ix = ox * s + kx - p
                        if ix < 0 or ix >= x.width:
                            continue
                        for ci in range(x.channels):
                            acc += kernel.values[co, ci, ky, kx] * x.data[ci, iy, ix]
                out[co, oy, ox] = acc
    return Tensor(out)


def _linear_vectors(kern: ConvKernel) -> np.ndarray:
    """Per-offset vector form of a linear kernel: sum over its input axis."""
    return kern.values.sum(axis=1)


def direct_pairwise_potential(hidden: Sequence[Tensor], params, emitter: int,
                              receiver: int) -> np.ndarray:
    """Expected pairwise potential by explicit double summation.

    For each pixel i and each in-bounds footprint neighbor j the three terms
    (bilinear, receiver-linear, emitter-linear) are evaluated with plain
    vector products and added up.  Returns an (H, W) array.
    """
    h_r, h_e = hidden[receiver], hidden[emitter]
    _guard_size(h_r.height, h_r.width, h_r.channels, h_e.channels)
    pair = (emitter, receiver)
    lmat = params.pairwise[pair].values
    recv_vec = _linear_vectors(params.lin_emit[pair])
    emit_vec = _linear_vectors(params.lin_recv[pair])
    kh, kw = params.pairwise[pair].ksize
    py, px = kh // 2, kw // 2
    if h_e.channels != h_r.channels:
        raise T.ShapeError("pairwise potential needs equal channel counts across scales")
    out = np.zeros((h_r.height, h_r.width))
    for iy in range(h_r.height):
        for ix in range(h_r.width):
            acc = 0.0
            for ky in range(kh):
                jy = iy + ky - py
                if jy < 0 or jy >= h_e.height:
                    continue
                for kx in range(kw):
                    jx = ix + kx - px
                    if jx < 0 or jx >= h_e.width:
                        continue
                    acc += float(h_r.data[:, iy, ix] @ lmat[:, :, ky, kx] @ h_e.data[:, jy, jx])
                    acc += float(h_r.data[:, iy, ix] @ recv_vec[:, ky, kx])
                    acc += float(h_e.data[:, jy, jx] @ emit_vec[:, ky, kx])
            out[iy, ix] = acc
    return out


def direct_message(h_e: Tensor, pairwise: ConvKernel, lin_emit: ConvKernel) -> np.ndarray:
    """Reference-path message by explicit summation: L-term plus linear term."""
    _guard_size(h_e.height, h_e.width, h_e.channels, pairwise.out_channels)
    kh, kw = pairwise.ksize
    py, px = kh // 2, kw // 2
    recv_vec = _linear_vectors(lin_emit)
    c_r = pairwise.out_channels
    out = np.zeros((c_r, h_e.height, h_e.width))
    for cr in range(c_r):
        for iy in range(h_e.height):
            for ix in range(h_e.width):
                acc = 0.0
                for ky in range(kh):
                    jy = iy + ky - py
                    if jy < 0 or jy >= h_e.height:
                        continue
                    for kx in range(kw):
                        jx = ix + kx - px
                        if jx < 0 or jx >= h_e.width:
                            continue
                        for ce in range(h_e.channels):
                            acc += pairwise.values[cr, ce, ky, kx] * h_e.data[ce, jy, jx]
                        acc += recv_vec[cr, ky, kx]
                out[cr, iy, ix] = acc
    return out


# ---------------------------------------------------------------------------
# finite differences and fixed points
# ---------------------------------------------------------------------------

def finite_diff_grad(fn: Callable[[], float], arrays: Sequence[np.ndarray],
                     step: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of ``fn`` with respect to each array.

    Arrays are perturbed in place and restored; ``fn`` takes no arguments and
    must read the current array contents.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = fn()
            flat[i] = old - step
            fm = fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def finite_diff_coords(fn: Callable[[], float], arr: np.ndarray,
                       coords: Sequence[int], step: float = 1e-4) -> np.ndarray:
    """Central differences at selected flat coordinates of one array."""
    flat = arr.reshape(-1)
    out = np.zeros(len(coords))
    for n, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + step
        fp = fn()
        flat[i] = old - step
        fm = fn()
        flat[i] = old
        out[n] = (fp - fm) / (2.0 * step)
    return out


def fixed_point_residual(feats: Sequence[Tensor], params, state) -> float:
    """Max-abs change one more reference sweep would make to ``state``."""
    from .crf import run_reference_inference
    nxt = run_reference_inference(feats, params, sweeps=1, init=state.hidden)
    return max(float(np.abs(a.data - b.data).max())
               for a, b in zip(nxt.hidden, state.hidden))


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise relative error with a floor guarding near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

@dataclass
class OracleReport:
    check: str
    instance: str
    value: float
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps({"check": self.check, "instance": self.instance,
                           "value": self.value, "tolerance": self.tolerance,
                           "passed": self.passed}, sort_keys=True)


def _report(check: str, instance: str, value: float, tol: float) -> OracleReport:
    value = float(value)
    return OracleReport(check, instance, value, tol, bool(value <= tol and math.isfinite(value)))


def suite_conv(seed: int = 0, instances: int = 30) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for n in range(instances):
        ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 11)), int(rng.integers(3, 11))
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.choice([1, 2]))
        p = int(rng.integers(0, (k + 1) // 2 + 1))
        if T.conv_output_size(h, k, s, p) < 1 or T.conv_output_size(w, k, s, p) < 1:
            continue
        x = Tensor(rng.standard_normal((ci, h, w)))
        kern = ConvKernel(rng.standard_normal((co, ci, k, k)), stride=s, padding=p)
        err = np.abs(T.conv2d(x, kern).data - direct_conv(x, kern).data).max()
        reports.append(_report("conv_vs_direct", f"seed{seed}_i{n}", err, 1e-6))
    return reports


def suite_adjoint(seed: int = 0, instances: int = 20) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for n in range(instances):
        ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(4, 13)), int(rng.integers(4, 13))
        k = int(rng.choice([2, 3, 4]))
        s = int(rng.choice([1, 2]))
        p = int(rng.integers(0, k // 2 + 1))
        # the adjoint pairing holds on sizes conv covers without remainder;
        # trim so the stride tiles exactly
        h -= (h + 2 * p - k) % s
        w -= (w + 2 * p - k) % s
        if T.conv_output_size(h, k, s, p) < 1 or T.conv_output_size(w, k, s, p) < 1:
            continue
        kern = ConvKernel(rng.standard_normal((co, ci, k, k)), stride=s, padding=p)
        a = Tensor(rng.standard_normal((ci, h, w)))
        fwd = T.conv2d(a, kern)
        b = Tensor(rng.standard_normal(fwd.shape))
        lhs = float((fwd.data * b.data).sum())
        rhs = float((a.data * T.deconv2d(b, kern).data).sum())
        scale = max(abs(lhs), abs(rhs), 1.0)
        reports.append(_report("conv_deconv_adjoint", f"seed{seed}_i{n}",
                               abs(lhs - rhs) / scale, 1e-9))
    return reports


def _op_grad_check(rng, build) -> float:
    """Finite-diff the tape gradient of a scalar built by ``build(tape)``."""
    tape = Tape()
    out, inputs = build(tape)
    seed_grad = rng.standard_normal(out.shape)
    grads = tape.backward({out: seed_grad})

    def value() -> float:
        t2 = Tape()
        out2, _ = build(t2)
        return float((out2.data * seed_grad).sum())

    worst = 0.0
    for obj in inputs:
        arr = T.param_array(obj)
        fd = finite_diff_grad(value, [arr])[0]
        an = grads.get(obj, np.zeros_like(arr))
        worst = max(worst, max_rel_err(fd, an))
    return worst


def suite_gradients(seed: int = 0, instances: int = 10) -> list[OracleReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for n in range(instances):
        x = Tensor(rng.standard_normal((2, 5, 5)))
        y = Tensor(rng.standard_normal((2, 5, 5)))
        kern = ConvKernel(rng.standard_normal((3, 2, 3, 3)), stride=1, padding=1)
        dkern = ConvKernel(rng.standard_normal((2, 3, 4, 4)), stride=2, padding=1)
        bias = Tensor(rng.standard_normal((3, 1, 1)))

        cases = {
            "conv2d": lambda tp: (T.conv2d(x, kern, tp), [x, kern]),
            "deconv2d": lambda tp: (T.deconv2d(x, dkern, tp), [x, dkern]),
            "maxpool": lambda tp: (T.maxpool(x, 2, 1, tp), [x]),
            "sigmoid": lambda tp: (T.sigmoid(x, tp), [x]),
            "tanh": lambda tp: (T.tanh(x, tp), [x]),
            "mul": lambda tp: (T.mul(x, y, tp), [x, y]),
            "add": lambda tp: (T.add(x, y, tp), [x, y]),
            "add_bias": lambda tp: (T.add_bias(T.conv2d(x, kern, tp), bias, tp), [bias]),
            "smul": lambda tp: (T.smul(x, 0.37, tp), [x]),
            "concat": lambda tp: (T.concat_channels([x, y], tp), [x, y]),
            "tsum": lambda tp: (T.tsum(x, tp), [x]),
        }
        for name, build in cases.items():
            err = _op_grad_check(rng, build)
            reports.append(_report(f"grad_{name}", f"seed{seed}_i{n}", err, 1e-3))
    return reports


def suite_meanfield(seed: int = 0, instances: int = 15) -> list[OracleReport]:
    from .crf import (AgCrfParams, expected_pairwise_potential, gate_expectation,
                      run_reference_inference)
    rng = np.random.default_rng(seed)
    reports = []
    for n in range(instances):
        s_count = int(rng.integers(2, 4))
        c = int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        feats = [Tensor(rng.standard_normal((c, h, w))) for _ in range(s_count)]
        params = AgCrfParams.random([c] * s_count, rng, scale=0.2)
        # conv realization vs literal double sum
        worst = 0.0
        for (e, r) in params.pairs():
            fast = expected_pairwise_potential(feats, params, e, r).data[0]
            slow = direct_pairwise_potential(feats, params, e, r)
            worst = max(worst, float(np.abs(fast - slow).max()))
        reports.append(_report("potential_vs_direct", f"seed{seed}_i{n}", worst, 1e-6))
        # gate symmetry
        m = expected_pairwise_potential(feats, params, 0, 1)
        sym = np.abs(gate_expectation(m, 1.0).data + gate_expectation(m, -1.0).data - 1.0).max()
        reports.append(_report("gate_symmetry", f"seed{seed}_i{n}", sym, 1e-12))
        # contraction regime: residual shrinks monotonically
        cparams = params.contraction_scaled(0.5)
        residuals = []
        state = run_reference_inference(feats, cparams, sweeps=1)
        for _ in range(6):
            residuals.append(fixed_point_residual(feats, cparams, state))
            state = run_reference_inference(feats, cparams, sweeps=1, init=state.hidden)
        growth = max((residuals[i + 1] - residuals[i] for i in range(len(residuals) - 1)),
                     default=0.0)
        reports.append(_report("contraction_monotone", f"seed{seed}_i{n}",
                               max(growth, 0.0), 0.0))
    return reports


SUITES = {
    "conv": suite_conv,
    "adjoint": suite_adjoint,
    "gradients": suite_gradients,
    "meanfield": suite_meanfield,
}


def run_suites(name: str = "all", seed: int = 0) -> list[OracleReport]:
    if name == "all":
        reports = []
        for fn in SUITES.values():
            reports.extend(fn(seed=seed))
        return reports
    if name not in SUITES:
        raise ValueError(f"unknown suite '{name}', expected one of {sorted(SUITES)} or 'all'")
    return SUITES[name](seed=seed)
