"""Gated mean-field inference over sets of aligned multi-scale feature maps.

The model couples per-scale hidden feature fields through pairwise kernels,
with one latent binary gate per pixel and ordered scale pair deciding whether
that pair exchanges information there.  Two inference realizations live here:

* ``run_reference_inference`` - the exact mean-field update written as plain
  numpy arithmetic.  Gates take their closed-form expectation (a sigmoid of
  the expected pairwise potential) and hidden means are refreshed sweep by
  sweep.  This path is the semantic anchor the fast path is checked against.
* ``run_unrolled_inference`` - the trainable realization built from taped
  tensor ops, one simultaneous update per iteration, with the gate computed
  from a learned combination of feature maps.  Three variants: ``flag``
  (gates from current hidden estimates), ``plag`` (gates from the observed
  features only), and ``plain_crf`` (gates pinned fully open).

Both paths share one parameter object so they can be compared kernel for
kernel.  Energies are diagnostic only; training never differentiates them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (ConvKernel, ShapeError, Tape, Tensor, add, conv2d, mul,
                     sigmoid, smul)
from .tensor import _stable_sigmoid

FLAG = "flag"
PLAG = "plag"
PLAIN_CRF = "plain_crf"
VARIANTS = (FLAG, PLAG, PLAIN_CRF)


def _ordered_pairs(num_scales: int) -> list[tuple[int, int]]:
    return [(e, r) for r in range(num_scales) for e in range(num_scales) if e != r]


@dataclass
class AgCrfParams:
    """Parameters of one gated CRF block over ``len(channels)`` scales.

    Per ordered pair (emitter, receiver):

    * ``pairwise``  - the bilinear coupling kernel, (C_r, C_e, k, k).
    * ``lin_emit``  - linear kernel applied to emitter features, same shape.
    * ``lin_recv``  - linear kernel applied to receiver features, (C_r, C_r, k, k).

    The reference path derives its per-offset linear coefficient vectors from
    the same two linear kernels by summing over their input axis, which keeps
    one parameter set serving both inference realizations.  ``unary`` holds
    one positive scalar per scale (or a learnable 1x1 kernel for the unrolled
    path).  ``gate_sign`` selects the sigmoid sign convention used when the
    reference path turns expected potentials into gate expectations.
    """

    channels: tuple[int, ...]
    pairwise: dict[tuple[int, int], ConvKernel]
    lin_emit: dict[tuple[int, int], ConvKernel]
    lin_recv: dict[tuple[int, int], ConvKernel]
    unary: tuple = ()
    iterations: int = 1
    variant: str = FLAG
    gate_sign: float = 1.0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if not self.unary:
            self.unary = tuple(0.1 for _ in self.channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}', expected one of {VARIANTS}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.gate_sign not in (1.0, -1.0):
            raise ValueError(f"gate_sign must be +1 or -1, got {self.gate_sign}")
        if len(self.unary) != len(self.channels):
            raise ShapeError("need one unary weight per scale")
        for a in self.unary:
            if isinstance(a, ConvKernel):
                continue
            if float(a) <= 0.0:
                raise ValueError(f"scalar unary weight must be positive, got {a}")
        for (e, r) in self.pairs():
            c_e, c_r = self.channels[e], self.channels[r]
            self._check_kernel(self.pairwise[(e, r)], (c_r, c_e), f"pairwise[{e}->{r}]")
            self._check_kernel(self.lin_emit[(e, r)], (c_r, c_e), f"lin_emit[{e}->{r}]")
            self._check_kernel(self.lin_recv[(e, r)], (c_r, c_r), f"lin_recv[{e}->{r}]")

    @staticmethod
    def _check_kernel(kern: ConvKernel, out_in: tuple[int, int], name: str) -> None:
        kh, kw = kern.ksize
        if (kern.out_channels, kern.in_channels) != out_in:
            raise ShapeError(f"{name}: expected channel map {out_in}, "
                             f"got {(kern.out_channels, kern.in_channels)}")
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"{name}: kernels must be square with odd size, got {kern.ksize}")
        if kern.stride != 1 or kern.padding != kh // 2:
            raise ShapeError(f"{name}: need stride 1 and padding {kh // 2} so the "
                             f"footprint stays centered")

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    def pairs(self) -> list[tuple[int, int]]:
        return _ordered_pairs(self.num_scales)

    @classmethod
    def zeros(cls, channels: Sequence[int], kernel_size: int = 3,
              iterations: int = 1, variant: str = FLAG, unary_weight: float = 0.1,
              gate_sign: float = 1.0) -> "AgCrfParams":
        channels = tuple(int(c) for c in channels)
        k = int(kernel_size)
        pw, le, lr = {}, {}, {}
        for (e, r) in _ordered_pairs(len(channels)):
            c_e, c_r = channels[e], channels[r]
            pw[(e, r)] = ConvKernel.zeros(c_r, c_e, k, k, stride=1, padding=k // 2)
            le[(e, r)] = ConvKernel.zeros(c_r, c_e, k, k, stride=1, padding=k // 2)
            lr[(e, r)] = ConvKernel.zeros(c_r, c_r, k, k, stride=1, padding=k // 2)
        return cls(channels, pw, le, lr, tuple(unary_weight for _ in channels),
                   iterations, variant, gate_sign)

    @classmethod
    def random(cls, channels: Sequence[int], rng: np.random.Generator,
               scale: float = 0.1, kernel_size: int = 3, iterations: int = 1,
               variant: str = FLAG, unary_weight: float = 0.1,
               gate_sign: float = 1.0) -> "AgCrfParams":
        out = cls.zeros(channels, kernel_size, iterations, variant, unary_weight, gate_sign)
        for table in (out.pairwise, out.lin_emit, out.lin_recv):
            for kern in table.values():
                kern.values[...] = scale * rng.standard_normal(kern.values.shape)
        return out

    def copy(self) -> "AgCrfParams":
        def dup(table):
            return {p: ConvKernel(k.values.copy(), k.stride, k.padding)
                    for p, k in table.items()}
        unary = tuple(ConvKernel(a.values.copy(), a.stride, a.padding)
                      if isinstance(a, ConvKernel) else float(a) for a in self.unary)
        return AgCrfParams(self.channels, dup(self.pairwise), dup(self.lin_emit),
                           dup(self.lin_recv), unary, self.iterations, self.variant,
                           self.gate_sign)

    def contraction_scaled(self, target: float) -> "AgCrfParams":
        """Copy with kernels shrunk so a reference sweep contracts by ``target``.

        The hidden update gains at most (1/a) * sum_e |L_er| per receiver, so
        scaling every kernel by target * a / max_r sum_e |L_er| (absolute
        tap-sum operator bound) pulls the sweep map inside a contraction.
        """
        if not (0.0 < target < 1.0):
            raise ValueError(f"contraction target must be in (0, 1), got {target}")
        worst = 0.0
        for r in range(self.num_scales):
            bound = sum(float(np.abs(self.pairwise[(e, r)].values).sum(axis=(1, 2, 3)).max())
                        for e in range(self.num_scales) if e != r)
            worst = max(worst, bound)
        out = self.copy()
        a_min = min(float(a) for a in out.unary if not isinstance(a, ConvKernel))
        if worst > 0.0:
            gamma = target * a_min / worst
            for table in (out.pairwise, out.lin_emit, out.lin_recv):
                for kern in table.values():
                    kern.values *= gamma
        return out


@dataclass
class MeanFieldState:
    """Inference output: per-scale hidden means plus the last gate maps."""

    hidden: list[Tensor]
    gates: dict[tuple[int, int], Tensor]


@dataclass
class GateAssignment:
    """A hard 0/1 gate value per pixel and ordered pair, for energy evaluation."""

    maps: dict[tuple[int, int], np.ndarray]

    @classmethod
    def constant(cls, params: AgCrfParams, height: int, width: int,
                 value: float) -> "GateAssignment":
        v = float(value)
        if v not in (0.0, 1.0):
            raise ValueError(f"gate assignments are binary, got {value}")
        return cls({p: np.full((height, width), v) for p in params.pairs()})


# ---------------------------------------------------------------------------
# energies (diagnostics only)
# ---------------------------------------------------------------------------

def unary_energy(hidden, feats, weight: float) -> float:
    """Unary potential total: -(weight / 2) * sum of squared deviations."""
    w = float(weight)
    if w <= 0.0:
        raise ValueError(f"unary weight must be positive, got {weight}")
    h = hidden.data if isinstance(hidden, Tensor) else np.asarray(hidden, dtype=np.float64)
    f = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
    if h.shape != f.shape:
        raise ShapeError(f"unary_energy: shape mismatch {h.shape} vs {f.shape}")
    d = h - f
    return -0.5 * w * float((d * d).sum())


def pairwise_energy(h_r, h_e, kmat: np.ndarray) -> float:
    """Bilinear-form potential of one (receiver, emitter) feature pair.

    ``kmat`` is the augmented coupling matrix over (features, 1) vectors; its
    bottom-right entry must be exactly 1 so the open-gate constant is carried.
    Decomposes as h_r' L h_e + h_r' u + v' h_e + 1.
    """
    h_r = np.asarray(h_r, dtype=np.float64).reshape(-1)
    h_e = np.asarray(h_e, dtype=np.float64).reshape(-1)
    if kmat.shape != (h_r.size + 1, h_e.size + 1):
        raise ShapeError(f"pairwise_energy: coupling matrix must be "
                         f"{(h_r.size + 1, h_e.size + 1)}, got {kmat.shape}")
    if kmat[-1, -1] != 1.0:
        raise ValueError("pairwise_energy: bottom-right coupling entry must be 1")
    return float(np.append(h_r, 1.0) @ kmat @ np.append(h_e, 1.0))


def pair_matrix(params: AgCrfParams, emitter: int, receiver: int,
                ky: int, kx: int) -> np.ndarray:
    """Augmented coupling matrix for one footprint offset of one pair."""
    c_e, c_r = params.channels[emitter], params.channels[receiver]
    if c_e != c_r:
        raise ShapeError("coupling matrices need equal channel counts across scales")
    pair = (emitter, receiver)
    kmat = np.zeros((c_r + 1, c_e + 1))
    kmat[:c_r, :c_e] = params.pairwise[pair].values[:, :, ky, kx]
    kmat[:c_r, -1] = params.lin_emit[pair].values[:, :, ky, kx].sum(axis=1)
    kmat[-1, :c_e] = params.lin_recv[pair].values[:, :, ky, kx].sum(axis=1)
    kmat[-1, -1] = 1.0
    return kmat


def total_energy(hidden: Sequence[Tensor], gates: GateAssignment,
                 feats: Sequence[Tensor], params: AgCrfParams) -> float:
    """Full (negated-cost) energy of a joint configuration: unary + gated pairwise."""
    total = 0.0
    for s, (h, f) in enumerate(zip(hidden, feats)):
        total += unary_energy(h, f, float(params.unary[s]))
    for (e, r) in params.pairs():
        g = gates.maps[(e, r)]
        h_r, h_e = hidden[r], hidden[e]
        kh, kw = params.pairwise[(e, r)].ksize
        py, px = kh // 2, kw // 2
        for iy in range(h_r.height):
            for ix in range(h_r.width):
                if g[iy, ix] == 0.0:
                    continue
                for ky in range(kh):
                    jy = iy + ky - py
                    if jy < 0 or jy >= h_e.height:
                        continue
                    for kx in range(kw):
                        jx = ix + kx - px
                        if jx < 0 or jx >= h_e.width:
                            continue
                        kmat = pair_matrix(params, e, r, ky, kx)
                        total += g[iy, ix] * pairwise_energy(
                            h_r.data[:, iy, ix], h_e.data[:, jy, jx], kmat)
    return total


# ---------------------------------------------------------------------------
# reference mean-field path (pure numpy, exact update expressions)
# ---------------------------------------------------------------------------

def expected_pairwise_potential(hidden: Sequence[Tensor], params: AgCrfParams,
                                emitter: int, receiver: int) -> Tensor:
    """Per-pixel expected pairwise potential, realized with conv2d calls.

    For pixel i this sums, over the kernel footprint j, the bilinear term
    h_r(i) . (L h_e(j)), the receiver-linear term h_r(i) . u(i-j), and the
    emitter-linear term h_e(j) . v(i-j), where u and v are the per-offset
    vectors derived from the two linear kernels.  Returns a 1-channel map.
    """
    h_r, h_e = hidden[receiver], hidden[emitter]
    if h_r.channels != h_e.channels:
        raise ShapeError("expected_pairwise_potential needs equal channel counts "
                         "across scales; the unrolled path has no such restriction")
    pair = (emitter, receiver)
    bilinear = conv2d(h_e, params.pairwise[pair])
    recv_field = conv2d(Tensor.ones_like(h_e), params.lin_emit[pair])
    emit_vec = params.lin_recv[pair].values.sum(axis=1)
    emit_kernel = ConvKernel(emit_vec[np.newaxis],
                             stride=1, padding=params.lin_recv[pair].padding)
    emit_term = conv2d(h_e, emit_kernel)
    m = ((h_r.data * bilinear.data).sum(axis=0)
         + (h_r.data * recv_field.data).sum(axis=0)
         + emit_term.data[0])
    return Tensor(m[np.newaxis])


def gate_expectation(potential: Tensor, sign: float = 1.0) -> Tensor:
    """Gate posterior mean: sigmoid of the signed expected potential."""
    if float(sign) not in (1.0, -1.0):
        raise ValueError(f"gate sign must be +1 or -1, got {sign}")
    return Tensor(_stable_sigmoid(float(sign) * potential.data))


def reference_message(hidden_e: Tensor, params: AgCrfParams, emitter: int,
                      receiver: int) -> Tensor:
    """Message into the receiver: bilinear term plus per-offset linear term."""
    pair = (emitter, receiver)
    bilinear = conv2d(hidden_e, params.pairwise[pair])
    linear = conv2d(Tensor.ones_like(hidden_e), params.lin_emit[pair])
    return Tensor(bilinear.data + linear.data)


def mean_field_update(feats: Tensor, weight: float,
                      incoming: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Closed-form hidden-mean refresh: feats + (1/a) * sum of gated messages."""
    a = float(weight)
    if a <= 0.0:
        raise ValueError(f"unary weight a must be positive, got {weight}")
    acc = np.zeros_like(feats.data)
    for gate, message in incoming:
        if message.shape != feats.shape:
            raise ShapeError(f"message shape {message.shape} does not match "
                             f"features {feats.shape}")
        if gate.shape != (1, feats.height, feats.width):
            raise ShapeError(f"gate must be a 1-channel map, got {gate.shape}")
        acc += gate.data * message.data
    return Tensor(feats.data + acc / a)


def run_reference_inference(feats: Sequence[Tensor], params: AgCrfParams,
                            sweeps: int | None = None,
                            init: Sequence[Tensor] | None = None,
                            force_gate: float | None = None,
                            schedule: str = "sequential") -> MeanFieldState:
    """Exact mean-field sweeps with closed-form gate expectations.

    Hidden means start at the observed features (or ``init``).  Each sweep
    refreshes every receiver scale; the default schedule walks receivers
    sequentially in scale order so later updates see earlier ones, while
    ``schedule="simultaneous"`` refreshes all receivers from the sweep-start
    state (the order-free variant symmetry arguments apply to).
    ``force_gate`` clamps every gate to a constant, bypassing expectations.
    """
    if params.variant != FLAG:
        raise ValueError("reference inference is defined for the fully-latent "
                         f"'{FLAG}' variant, got '{params.variant}'")
    if schedule not in ("sequential", "simultaneous"):
        raise ValueError(f"unknown schedule '{schedule}'")
    _check_scale_set(feats, params)
    for a in params.unary:
        if isinstance(a, ConvKernel):
            raise ValueError("reference inference needs scalar unary weights")
    n = params.num_scales
    hidden = list(init) if init is not None else list(feats)
    if len(hidden) != n:
        raise ShapeError(f"init must provide {n} scales, got {len(hidden)}")
    gates: dict[tuple[int, int], Tensor] = {}
    height, width = feats[0].height, feats[0].width
    total_sweeps = params.iterations if sweeps is None else int(sweeps)

    def gated_message(state: Sequence[Tensor], e: int, r: int) -> tuple[Tensor, Tensor]:
        if force_gate is not None:
            alpha = Tensor.full(1, height, width, float(force_gate))
        else:
            m = expected_pairwise_potential(state, params, e, r)
            alpha = gate_expectation(m, params.gate_sign)
        return alpha, reference_message(state[e], params, e, r)

    for _ in range(total_sweeps):
        if schedule == "sequential":
            for r in range(n):
                incoming = []
                for e in range(n):
                    if e == r:
                        continue
                    alpha, msg = gated_message(hidden, e, r)
                    gates[(e, r)] = alpha
                    incoming.append((alpha, msg))
                if incoming:
                    hidden[r] = mean_field_update(feats[r], float(params.unary[r]), incoming)
        else:
            snapshot = list(hidden)
            for r in range(n):
                incoming = []
                for e in range(n):
                    if e == r:
                        continue
                    alpha, msg = gated_message(snapshot, e, r)
                    gates[(e, r)] = alpha
                    incoming.append((alpha, msg))
                if incoming:
                    hidden[r] = mean_field_update(feats[r], float(params.unary[r]), incoming)
    return MeanFieldState(hidden, gates)


def _check_scale_set(feats: Sequence[Tensor], params: AgCrfParams) -> None:
    if len(feats) != params.num_scales:
        raise ShapeError(f"expected {params.num_scales} scales, got {len(feats)}")
    if not feats:
        raise ShapeError("empty scale set")
    hw = (feats[0].height, feats[0].width)
    for s, f in enumerate(feats):
        if (f.height, f.width) != hw:
            raise ShapeError(f"scale {s} has size {(f.height, f.width)}, expected {hw}; "
                             f"scales must be spatially aligned before inference")
        if f.channels != params.channels[s]:
            raise ShapeError(f"scale {s} has {f.channels} channels, "
                             f"params expect {params.channels[s]}")


# ---------------------------------------------------------------------------
# unrolled trainable path (taped tensor ops, simultaneous updates)
# ---------------------------------------------------------------------------

def run_unrolled_inference(feats: Sequence[Tensor], params: AgCrfParams,
                           tape: Tape | None = None,
                           init: Sequence[Tensor] | None = None,
                           force_gate: float | None = None) -> MeanFieldState:
    """Unrolled gated message passing as a differentiable op graph.

    Per iteration every receiver is refreshed from the previous iteration's
    state (simultaneous update).  The message keeps only the bilinear
    convolution; gates multiply it channelwise and the gated sum, scaled by
    the unary weight, is added back onto the observed features.  Gate
    pre-activations follow the variant: ``flag`` combines the receiver's
    hidden state with the message plus both linear convolutions, ``plag``
    evaluates the same expression on the observed features only, and
    ``plain_crf`` skips the gate entirely (alpha = 1).
    """
    _check_scale_set(feats, params)
    n = params.num_scales
    hidden = list(init) if init is not None else list(feats)
    if len(hidden) != n:
        raise ShapeError(f"init must provide {n} scales, got {len(hidden)}")
    gates: dict[tuple[int, int], Tensor] = {}

    def gate_for(state: Sequence[Tensor], msg: Tensor, e: int, r: int) -> Tensor:
        pair = (e, r)
        if force_gate is not None:
            return Tensor(np.full_like(msg.data, float(force_gate)))
        if params.variant == PLAIN_CRF:
            return Tensor(np.ones_like(msg.data))
        if params.variant == FLAG:
            bilinear = mul(state[r], msg, tape)
            emit_term = conv2d(state[e], params.lin_emit[pair], tape)
            recv_term = conv2d(state[r], params.lin_recv[pair], tape)
        else:  # PLAG: same expression, observed features only
            bilinear = mul(feats[r], conv2d(feats[e], params.pairwise[pair], tape), tape)
            emit_term = conv2d(feats[e], params.lin_emit[pair], tape)
            recv_term = conv2d(feats[r], params.lin_recv[pair], tape)
        pre = add(add(bilinear, emit_term, tape), recv_term, tape)
        return sigmoid(pre, tape)

    old_note = tape.note if tape is not None else ""
    for _ in range(params.iterations):
        refreshed = []
        for r in range(n):
            total = None
            for e in range(n):
                if e == r:
                    continue
                if tape is not None:
                    tape.note = "message"
                msg = conv2d(hidden[e], params.pairwise[(e, r)], tape)
                if tape is not None:
                    tape.note = "gate"
                alpha = gate_for(hidden, msg, e, r)
                gates[(e, r)] = alpha
                if tape is not None:
                    tape.note = "update"
                gated = mul(alpha, msg, tape)
                total = gated if total is None else add(total, gated, tape)
            if total is None:
                refreshed.append(hidden[r])
                continue
            a = params.unary[r]
            if isinstance(a, ConvKernel):
                contribution = conv2d(total, a, tape)
            else:
                contribution = smul(total, float(a), tape)
            refreshed.append(add(feats[r], contribution, tape))
        hidden = refreshed
    if tape is not None:
        tape.note = old_note
    return MeanFieldState(hidden, gates)


@dataclass
class VariantReport:
    """Side-by-side diagnostics for the latent vs observed gate variants."""

    hidden_divergence: list[float]
    first_gate_gap: float
    plag_gate_shift: float
    flag_gate_shift: float


def compare_variants(feats: Sequence[Tensor], flag_params: AgCrfParams,
                     plag_params: AgCrfParams, rng: np.random.Generator | None = None,
                     perturbation: float = 0.1) -> VariantReport:
    """Run both gate variants and measure how their outputs and gates differ.

    Also perturbs the hidden-state initialization to expose the defining
    difference: observed-feature gates must not move, latent gates may.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out_flag = run_unrolled_inference(feats, flag_params)
    out_plag = run_unrolled_inference(feats, plag_params)
    divergence = [float(np.abs(a.data - b.data).max())
                  for a, b in zip(out_flag.hidden, out_plag.hidden)]

    one_f = dataclasses.replace(flag_params, iterations=1)
    one_p = dataclasses.replace(plag_params, iterations=1)
    base_f = run_unrolled_inference(feats, one_f)
    base_p = run_unrolled_inference(feats, one_p)
    first_gap = max(float(np.abs(base_f.gates[p].data - base_p.gates[p].data).max())
                    for p in one_f.pairs())

    shaken = [Tensor(f.data + perturbation * rng.standard_normal(f.shape)) for f in feats]
    pert_f = run_unrolled_inference(feats, one_f, init=shaken)
    pert_p = run_unrolled_inference(feats, one_p, init=shaken)
    plag_shift = max(float(np.abs(pert_p.gates[p].data - base_p.gates[p].data).max())
                     for p in one_p.pairs())
    flag_shift = max(float(np.abs(pert_f.gates[p].data - base_f.gates[p].data).max())
                     for p in one_f.pairs())
    return VariantReport(divergence, first_gap, plag_shift, flag_shift)
