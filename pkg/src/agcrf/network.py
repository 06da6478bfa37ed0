"""Two-level multi-scale contour network with gated-CRF feature fusion.

A small front-end CNN downsamples the image and exposes taps at chosen
layers.  Each tap is decomposed three ways (learned upsampling, same-scale
convolution, max-pool then upsampling), the three aligned branches are fused
by a gated CRF block, and a second gated block fuses the per-tap outputs.
Every fusion output feeds a sigmoid contour head upsampled back to input
resolution; the final map is the plain mean of all heads.

Ablation wiring is configuration, not separate code paths: ``baseline``
drops the hierarchy entirely (aligned taps, concat, one head), ``no_agcrf``
keeps the hierarchy but fuses by concatenation, ``plain_crf``/``plag``/
``flag`` select the gate variant, and ``no_deep_sup`` only changes which
heads the training loss touches.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .crf import AgCrfParams, run_unrolled_inference
from .tensor import (ConvKernel, ShapeError, Tape, Tensor, add_bias,
                     concat_channels, conv2d, deconv2d, maxpool, relu, sigmoid,
                     tanh)

ABLATIONS = ("flag", "plag", "plain_crf", "no_agcrf", "baseline", "no_deep_sup")

_ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid, "linear": None}


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale network wiring; every field round-trips through JSON."""

    ablation: str = "flag"
    image_channels: int = 1
    frontend_channels: tuple[int, ...] = (8, 12, 16, 16)
    frontend_strides: tuple[int, ...] = (2, 2, 2, 2)
    frontend_kernel: int = 3
    activation: str = "tanh"  # smooth by default so finite-difference checks stay clean
    taps: tuple[int, ...] = (2, 3, 4)
    branch_channels: int = 8
    fuse_channels: int = 8
    crf_kernel: int = 3
    crf_iterations: int = 1
    unary_weight: float = 0.1
    learned_unary: bool = False
    gate_sign: float = 1.0

    # --- ablation wiring -------------------------------------------------
    @property
    def uses_hierarchy(self) -> bool:
        return self.ablation != "baseline"

    @property
    def uses_crf(self) -> bool:
        return self.ablation not in ("baseline", "no_agcrf")

    @property
    def crf_variant(self) -> str:
        if self.ablation in ("plain_crf", "plag"):
            return self.ablation
        return "flag"

    @property
    def deep_supervision(self) -> bool:
        return self.ablation != "no_deep_sup"

    def scale_at_tap(self, tap: int) -> int:
        return int(np.prod(self.frontend_strides[:tap], dtype=np.int64))

    @property
    def tap_scales(self) -> tuple[int, ...]:
        return tuple(self.scale_at_tap(t) for t in self.taps)

    @property
    def min_input_multiple(self) -> int:
        return 2 * max(self.tap_scales)

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation '{self.ablation}', expected one of {ABLATIONS}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if len(self.frontend_channels) != len(self.frontend_strides):
            raise ValueError("frontend_channels and frontend_strides must align")
        if not self.taps or list(self.taps) != sorted(set(self.taps)):
            raise ValueError(f"taps must be strictly increasing, got {self.taps}")
        if self.taps[0] < 1 or self.taps[-1] > len(self.frontend_channels):
            raise ValueError(f"taps {self.taps} out of range for "
                             f"{len(self.frontend_channels)} front-end layers")
        for s in self.frontend_strides:
            if s not in (1, 2):
                raise ValueError(f"front-end strides must be 1 or 2, got {s}")
        for t in self.taps:
            if self.scale_at_tap(t) < 2:
                raise ValueError(f"tap {t} sits above any stride-2 layer; every tap "
                                 f"needs at least 2x total downsampling")
        if self.gate_sign not in (1.0, -1.0):
            raise ValueError(f"gate_sign must be +1 or -1, got {self.gate_sign}")
        if self.unary_weight <= 0:
            raise ValueError("unary_weight must be positive")

    # --- serialization ----------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls.from_values(raw)

    @classmethod
    def from_values(cls, raw: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            v = raw[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ModelConfig":
        """Build from a flat key=value string mapping (config-file form)."""
        parsed: dict = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            text = raw[f.name].strip()
            if f.name in ("frontend_channels", "frontend_strides", "taps"):
                parsed[f.name] = tuple(int(tok) for tok in text.split(",") if tok.strip())
            elif f.name in ("ablation", "activation"):
                parsed[f.name] = text
            elif f.name == "learned_unary":
                parsed[f.name] = text.lower() in ("1", "true", "yes")
            elif f.name == "gate_sign":
                parsed[f.name] = {"plus": 1.0, "minus": -1.0}.get(text, None) or float(text)
            elif f.name in ("unary_weight",):
                parsed[f.name] = float(text)
            else:
                parsed[f.name] = int(text)
        return cls.from_values(parsed)

    @staticmethod
    def field_names() -> set[str]:
        return {f.name for f in dataclasses.fields(ModelConfig)}


@dataclass
class PredictionSet:
    """All sigmoid contour maps of one forward pass plus their plain mean."""

    heads: list[Tensor]
    fused: Tensor


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    limit = 1.0 / np.sqrt(max(int(fan_in), 1))
    return rng.uniform(-limit, limit, size=shape)


class _ConvLayer:
    def __init__(self, weight: ConvKernel, bias: Tensor | None, activation: str | None):
        self.weight = weight
        self.bias = bias
        self.activation = activation

    def apply(self, x: Tensor, tape: Tape | None) -> Tensor:
        y = conv2d(x, self.weight, tape)
        if self.bias is not None:
            y = add_bias(y, self.bias, tape)
        act = _ACTIVATIONS.get(self.activation or "linear")
        return act(y, tape) if act is not None else y


class _DeconvLayer:
    """Learned upsampler; ``ratio == 1`` is a pass-through."""

    def __init__(self, weight: ConvKernel | None, bias: Tensor | None):
        self.weight = weight
        self.bias = bias

    def apply(self, x: Tensor, tape: Tape | None) -> Tensor:
        if self.weight is None:
            return x
        y = deconv2d(x, self.weight, tape)
        if self.bias is not None:
            y = add_bias(y, self.bias, tape)
        return y


class ThreeWayBranches:
    """The three-scale decomposition of one tapped feature map.

    An input at resolution H comes out as three aligned maps at 2H: a learned
    stride-2 upsampling (finer), a same-scale 3x3 convolution then learned
    2x alignment (same), and a 2x max-pool then learned 4x alignment
    (coarser).
    """

    def __init__(self, deconv_fine: _DeconvLayer, conv_same: _ConvLayer,
                 align_same: _DeconvLayer, align_coarse: _DeconvLayer):
        self.deconv_fine = deconv_fine
        self.conv_same = conv_same
        self.align_same = align_same
        self.align_coarse = align_coarse

    def decompose(self, feat: Tensor, tape: Tape | None) -> tuple[Tensor, Tensor, Tensor]:
        fine = self.deconv_fine.apply(feat, tape)
        same = self.align_same.apply(self.conv_same.apply(feat, tape), tape)
        coarse = self.align_coarse.apply(maxpool(feat, 2, 2, tape), tape)
        return fine, same, coarse


def three_way_decompose(feat: Tensor, branches: ThreeWayBranches,
                        tape: Tape | None = None) -> tuple[Tensor, Tensor, Tensor]:
    return branches.decompose(feat, tape)


def level1_fuse(branches_out: Sequence[Tensor], crf_params: AgCrfParams | None,
                combiner: _ConvLayer, tape: Tape | None = None) -> Tensor:
    """Fuse the three decomposed branches: gated CRF (or passthrough) + 1x1 conv."""
    scales = list(branches_out)
    if crf_params is not None:
        scales = run_unrolled_inference(scales, crf_params, tape).hidden
    return combiner.apply(concat_channels(scales, tape), tape)


def level2_fuse(feats: Sequence[Tensor], crf_params: AgCrfParams | None,
                combiner: _ConvLayer, tape: Tape | None = None) -> Tensor:
    """Fuse the per-tap outputs; a single input passes through unchanged."""
    feats = list(feats)
    if len(feats) == 1:
        return feats[0]
    if crf_params is not None:
        feats = run_unrolled_inference(feats, crf_params, tape).hidden
    return combiner.apply(concat_channels(feats, tape), tape)


class _Head:
    """1x1 conv to one channel, learned upsampling to input size, sigmoid."""

    def __init__(self, conv: _ConvLayer, up: _DeconvLayer):
        self.conv = conv
        self.up = up

    def apply(self, feat: Tensor, tape: Tape | None) -> Tensor:
        return sigmoid(self.up.apply(self.conv.apply(feat, tape), tape), tape)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class ContourNet:
    """Trainable contour detector; see the module docstring for the wiring."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(0) if rng is None else rng
        self._params: dict[str, Tensor | ConvKernel] = {}

        cfg = config
        self.frontend: list[_ConvLayer] = []
        in_ch = cfg.image_channels
        for i, (ch, st) in enumerate(zip(cfg.frontend_channels, cfg.frontend_strides), 1):
            self.frontend.append(self._conv_layer(
                f"frontend{i}", rng, ch, in_ch, cfg.frontend_kernel, st,
                cfg.frontend_kernel // 2, cfg.activation))
            in_ch = ch
        tap_channels = [cfg.frontend_channels[t - 1] for t in cfg.taps]
        scales = list(cfg.tap_scales)

        self.heads: list[_Head] = []
        if not cfg.uses_hierarchy:
            self.base_aligners = [
                self._upsampler(f"align_tap{t}", rng, ch, ch, sc // scales[0])
                for t, ch, sc in zip(cfg.taps, tap_channels, scales)]
            self.base_combiner = self._conv_layer(
                "combine", rng, cfg.fuse_channels, sum(tap_channels), 1, 1, 0, None)
            self.heads.append(self._head("head1", rng, cfg.fuse_channels, scales[0]))
            return

        self.branches: list[ThreeWayBranches] = []
        self.level1_params: list[AgCrfParams | None] = []
        self.level1_combiners: list[_ConvLayer] = []
        for idx, (t, ch) in enumerate(zip(cfg.taps, tap_channels)):
            self.branches.append(self._branches(f"tap{t}", rng, ch, cfg.branch_channels))
            self.level1_params.append(
                self._crf_params(f"level1_tap{t}", rng, [cfg.branch_channels] * 3)
                if cfg.uses_crf else None)
            self.level1_combiners.append(self._conv_layer(
                f"fuse_tap{t}", rng, cfg.fuse_channels, 3 * cfg.branch_channels, 1, 1, 0, None))
            self.heads.append(self._head(f"head{idx + 1}", rng, cfg.fuse_channels,
                                         scales[idx] // 2))
        n_taps = len(cfg.taps)
        self.level2_aligners = [
            self._upsampler(f"level2_align_tap{t}", rng, cfg.fuse_channels,
                            cfg.fuse_channels, sc // scales[0])
            for t, sc in zip(cfg.taps, scales)]
        self.level2_params = (self._crf_params("level2", rng, [cfg.fuse_channels] * n_taps)
                              if cfg.uses_crf else None)
        self.level2_combiner = self._conv_layer(
            "level2_fuse", rng, cfg.fuse_channels, n_taps * cfg.fuse_channels, 1, 1, 0, None)
        self.heads.append(self._head(f"head{n_taps + 1}", rng, cfg.fuse_channels,
                                     scales[0] // 2))

    # --- parameter construction -------------------------------------------
    def _register(self, name: str, param) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        self._params[name] = param

    def _conv_layer(self, name: str, rng, out_ch: int, in_ch: int, k: int,
                    stride: int, padding: int, activation: str | None) -> _ConvLayer:
        weight = ConvKernel(_uniform(rng, (out_ch, in_ch, k, k), in_ch * k * k),
                            stride=stride, padding=padding)
        bias = Tensor(np.zeros((out_ch, 1, 1)))
        self._register(f"{name}.weight", weight)
        self._register(f"{name}.bias", bias)
        return _ConvLayer(weight, bias, activation)

    def _upsampler(self, name: str, rng, in_ch: int, out_ch: int, ratio: int) -> _DeconvLayer:
        if ratio == 1:
            return _DeconvLayer(None, None)
        if ratio % 2 != 0:
            raise ValueError(f"{name}: upsampling ratio must be 1 or even, got {ratio}")
        k, s, p = 2 * ratio, ratio, ratio // 2
        weight = ConvKernel(_uniform(rng, (in_ch, out_ch, k, k), in_ch * k * k // (s * s)),
                            stride=s, padding=p)
        bias = Tensor(np.zeros((out_ch, 1, 1)))
        self._register(f"{name}.weight", weight)
        self._register(f"{name}.bias", bias)
        return _DeconvLayer(weight, bias)

    def _branches(self, name: str, rng, in_ch: int, bc: int) -> ThreeWayBranches:
        fine_w = ConvKernel(_uniform(rng, (in_ch, bc, 4, 4), in_ch * 4), stride=2, padding=1)
        fine_b = Tensor(np.zeros((bc, 1, 1)))
        self._register(f"{name}.fine.weight", fine_w)
        self._register(f"{name}.fine.bias", fine_b)
        conv_same = self._conv_layer(f"{name}.same", rng, bc, in_ch, 3, 1, 1, None)
        align_same = self._upsampler(f"{name}.same_up", rng, bc, bc, 2)
        align_coarse = self._upsampler(f"{name}.coarse_up", rng, in_ch, bc, 4)
        return ThreeWayBranches(_DeconvLayer(fine_w, fine_b), conv_same,
                                align_same, align_coarse)

    def _crf_params(self, name: str, rng, channels: list[int]) -> AgCrfParams:
        cfg = self.config
        params = AgCrfParams.zeros(channels, cfg.crf_kernel, cfg.crf_iterations,
                                   cfg.crf_variant, cfg.unary_weight, cfg.gate_sign)
        if cfg.learned_unary:
            unary = []
            for c in channels:
                vals = np.zeros((c, c, 1, 1))
                vals[np.arange(c), np.arange(c), 0, 0] = cfg.unary_weight
                unary.append(ConvKernel(vals, stride=1, padding=0))
            params = dataclasses.replace(params, unary=tuple(unary))
        for (e, r) in params.pairs():
            self._register(f"{name}.e{e}r{r}.pairwise", params.pairwise[(e, r)])
            self._register(f"{name}.e{e}r{r}.lin_emit", params.lin_emit[(e, r)])
            self._register(f"{name}.e{e}r{r}.lin_recv", params.lin_recv[(e, r)])
        if cfg.learned_unary:
            for s, kern in enumerate(params.unary):
                self._register(f"{name}.unary{s}", kern)
        return params

    def _head(self, name: str, rng, in_ch: int, ratio: int) -> _Head:
        conv = self._conv_layer(f"{name}.conv", rng, 1, in_ch, 1, 1, 0, None)
        up = self._upsampler(f"{name}.up", rng, 1, 1, ratio)
        return _Head(conv, up)

    # --- inference ----------------------------------------------------------
    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def parameters(self) -> dict[str, Tensor | ConvKernel]:
        return dict(self._params)

    def gradients(self, grads_by_obj: dict) -> dict[str, np.ndarray]:
        """Name-keyed gradient arrays, zero-filled for untouched parameters."""
        from .tensor import param_array
        out = {}
        for name, param in self._params.items():
            g = grads_by_obj.get(param)
            out[name] = g if g is not None else np.zeros_like(param_array(param))
        return out

    def _check_input(self, image: Tensor) -> None:
        cfg = self.config
        if image.channels != cfg.image_channels:
            raise ShapeError(f"model expects {cfg.image_channels}-channel images, "
                             f"got {image.channels}")
        # multiples of twice the deepest scale keep every tap even-sized, so
        # the pool/upsample pairs rebuild sizes exactly
        m = self.config.min_input_multiple
        for d, side in ((image.height, "height"), (image.width, "width")):
            if d < m or d % m != 0:
                raise ShapeError(f"input {side} {d} must be a positive multiple of {m}")

    def forward(self, image: Tensor, tape: Tape | None = None) -> PredictionSet:
        if not isinstance(image, Tensor):
            image = Tensor(image)
        self._check_input(image)
        cfg = self.config
        acts = []
        h = image
        for layer in self.frontend:
            h = layer.apply(h, tape)
            acts.append(h)
        taps = [acts[t - 1] for t in cfg.taps]

        if not cfg.uses_hierarchy:
            aligned = [up.apply(f, tape) for up, f in zip(self.base_aligners, taps)]
            fused = self.base_combiner.apply(concat_channels(aligned, tape), tape)
            heads = [self.heads[0].apply(fused, tape)]
        else:
            level1_outs = []
            for branch, params, comb, feat in zip(self.branches, self.level1_params,
                                                  self.level1_combiners, taps):
                level1_outs.append(level1_fuse(branch.decompose(feat, tape),
                                               params, comb, tape))
            heads = [head.apply(out, tape)
                     for head, out in zip(self.heads, level1_outs)]
            aligned = [up.apply(f, tape) for up, f in zip(self.level2_aligners, level1_outs)]
            top = level2_fuse(aligned, self.level2_params, self.level2_combiner, tape)
            heads.append(self.heads[-1].apply(top, tape))

        fused = Tensor(np.mean(np.stack([p.data for p in heads]), axis=0))
        return PredictionSet(heads, fused)


def build_ablation(name: str, base: ModelConfig | None = None,
                   rng: np.random.Generator | None = None) -> ContourNet:
    """Instantiate one named ablation on top of a shared base configuration."""
    cfg = dataclasses.replace(base if base is not None else ModelConfig(), ablation=name)
    return ContourNet(cfg, rng)
