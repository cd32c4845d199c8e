"""WaveMix-Lite blocks and models, spec-string parsing, parameter counts.

Model strings follow the notation "WaveMix-Lite-E/L" with an optional
parenthesized option list: ff N, mul N, level N, up deconv|bilinear,
mixer dwt|maxpool|dft|none.  The classifier is stem -> blocks -> global
average pool -> linear; the segmenter replaces the head with one 2x
transposed conv per stride-2 stem conv followed by a 1x1 projection.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import Parameter, ShapeError, Tensor, add, linear
from .ops import (BatchNorm2d, Conv2dLayer, ConvTranspose2dLayer, gelu,
                  global_avg_pool, upsample_bilinear)
from .wavelets import MixerKind, mix


class SpecError(ValueError):
    """Malformed or inconsistent model specification."""


@dataclass
class ModelSpec:
    embed: int = 32
    depth: int = 7
    ff: int = 0                      # 0 means "default to embed"
    mul: int = 2
    levels: int = 1
    mixer: str = "dwt"
    expansion: str = "deconv"        # deconv | upsample
    in_channels: int = 3
    classes: int = 10
    task: str = "classify"           # classify | segment
    stem_strides: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.ff == 0:
            self.ff = self.embed

    def validate(self):
        if self.embed % 4:
            raise SpecError(f"embedding dim {self.embed} not divisible by 4")
        if self.depth < 1:
            raise SpecError(f"depth must be >= 1, got {self.depth}")
        if self.mul < 1:
            raise SpecError(f"mul must be >= 1, got {self.mul}")
        if self.mixer not in ("dwt", "maxpool", "dft", "identity"):
            raise SpecError(f"unknown mixer {self.mixer!r}")
        if self.expansion not in ("deconv", "upsample"):
            raise SpecError(f"unknown expansion {self.expansion!r}")
        if self.expansion == "upsample" and self.ff != self.embed:
            raise SpecError(
                f"upsample expansion requires ff == embed, got ff={self.ff}, embed={self.embed}")
        if self.task not in ("classify", "segment"):
            raise SpecError(f"unknown task {self.task!r}")
        for s in self.stem_strides:
            if s not in (1, 2):
                raise SpecError(f"stem strides must be 1 or 2, got {self.stem_strides}")
        return self

    def mixer_kind(self) -> MixerKind:
        return MixerKind(self.mixer, self.levels if self.mixer == "dwt" else 1)


_SPEC_RE = re.compile(r"^\s*WaveMix-Lite-(\d+)\s*/\s*(\d+)\s*(?:\(([^)]*)\))?\s*$")
_OPT_NUM_RE = re.compile(r"^(ff|mul|level)\s*=?\s*(\d+)$")
_OPT_WORD_RE = re.compile(r"^(up|mixer)\s*=?\s*([a-z]+)$")


def parse_model_spec(s: str, defaults: ModelSpec | None = None) -> ModelSpec:
    """Parse a model-notation string into a ModelSpec.

    Fields not expressible in the string (channels, classes, task, stem
    strides) come from ``defaults``.
    """
    m = _SPEC_RE.match(s)
    if not m:
        raise SpecError(f"malformed model spec {s!r}")
    base = defaults if defaults is not None else ModelSpec()
    embed, depth = int(m.group(1)), int(m.group(2))
    spec = replace(base, embed=embed, depth=depth, ff=embed)
    explicit_ff = False
    if m.group(3):
        for raw in m.group(3).split(","):
            opt = raw.strip()
            if not opt:
                raise SpecError(f"empty option in {s!r}")
            num = _OPT_NUM_RE.match(opt)
            word = _OPT_WORD_RE.match(opt)
            if num:
                key, val = num.group(1), int(num.group(2))
                if key == "ff":
                    spec.ff = val
                    explicit_ff = True
                elif key == "mul":
                    spec.mul = val
                else:
                    spec.levels = val
            elif word:
                key, val = word.group(1), word.group(2)
                if key == "up":
                    if val not in ("deconv", "bilinear"):
                        raise SpecError(f"unknown expansion {val!r} in {s!r}")
                    spec.expansion = "deconv" if val == "deconv" else "upsample"
                else:
                    if val not in ("dwt", "maxpool", "dft", "none"):
                        raise SpecError(f"unknown mixer {val!r} in {s!r}")
                    spec.mixer = "identity" if val == "none" else val
            else:
                raise SpecError(f"malformed option {opt!r} in {s!r}")
    if spec.expansion == "upsample":
        if explicit_ff and spec.ff != spec.embed:
            raise SpecError(f"upsample expansion requires ff == embed in {s!r}")
        spec.ff = spec.embed
    return spec.validate()


def format_model_spec(spec: ModelSpec) -> str:
    opts = []
    if spec.ff != spec.embed:
        opts.append(f"ff {spec.ff}")
    if spec.mul != 2:
        opts.append(f"mul {spec.mul}")
    if spec.levels != 1:
        opts.append(f"level {spec.levels}")
    if spec.expansion != "deconv":
        opts.append("up bilinear")
    if spec.mixer != "dwt":
        opts.append(f"mixer {'none' if spec.mixer == 'identity' else spec.mixer}")
    tail = f" ({', '.join(opts)})" if opts else ""
    return f"WaveMix-Lite-{spec.embed}/{spec.depth}{tail}"


class WaveMixBlock:
    """Residual token-mixing block.

    y = x + bn(expand(mlp2(gelu(mlp1(mix(reduce(x)))))))

    reduce cuts channels to E/4 so that a level-1 DWT restores E channels
    at half resolution.  Mixers that keep resolution (identity, dft) skip
    the expansion stage, which forces the MLP output back to E channels.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        e, mul, ff = spec.embed, spec.mul, spec.ff
        kind = spec.mixer_kind()
        self.kind = kind
        self.expansion = spec.expansion
        mix_out = kind.out_shape((1, e // 4, 0, 0))[1]
        needs_expand = kind.downscale > 1
        ff_eff = ff if (needs_expand and spec.expansion == "deconv") else e

        self.reduce = Conv2dLayer(e, e // 4, 1, rng=rng, dtype=dtype)
        self.mlp1 = Conv2dLayer(mix_out, mul * e, 1, rng=rng, dtype=dtype)
        self.mlp2 = Conv2dLayer(mul * e, ff_eff, 1, rng=rng, dtype=dtype)
        self.expand: list[ConvTranspose2dLayer] = []
        if needs_expand and spec.expansion == "deconv":
            c_prev = ff_eff
            for _ in range(kind.levels if kind.kind == "dwt" else 1):
                self.expand.append(ConvTranspose2dLayer(c_prev, e, 4, 2, 1, rng=rng, dtype=dtype))
                c_prev = e
        self.upsample_factor = kind.downscale if (needs_expand and spec.expansion == "upsample") else 1
        self.bn = BatchNorm2d(e, dtype=dtype)

    def parameters(self):
        out = []
        for name, layer in [("reduce", self.reduce), ("mlp1", self.mlp1), ("mlp2", self.mlp2)]:
            out.extend((f"{name}.{p}", t) for p, t in layer.parameters())
        for i, layer in enumerate(self.expand):
            out.extend((f"expand.{i}.{p}", t) for p, t in layer.parameters())
        out.extend((f"bn.{p}", t) for p, t in self.bn.parameters())
        return out

    def __call__(self, x: Tensor) -> Tensor:
        t = self.reduce(x)
        t = mix(t, self.kind)
        t = self.mlp1(t)
        t = gelu(t)
        t = self.mlp2(t)
        for layer in self.expand:
            t = layer(t)
        if self.upsample_factor > 1:
            t = upsample_bilinear(t, self.upsample_factor)
        t = self.bn(t)
        return add(t, x)


class WaveMixModel:
    """Stem, block stack, and task head with a named parameter registry."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        e = spec.embed
        s0, s1 = spec.stem_strides
        self.stem1 = Conv2dLayer(spec.in_channels, e // 2, 3, stride=s0, padding=1, rng=rng, dtype=dtype)
        self.stem2 = Conv2dLayer(e // 2, e, 3, stride=s1, padding=1, rng=rng, dtype=dtype)
        self.blocks = [WaveMixBlock(spec, rng, dtype) for _ in range(spec.depth)]
        self.head_deconvs: list[ConvTranspose2dLayer] = []
        if spec.task == "classify":
            self.head_w = Parameter(_fc_init(rng, spec.classes, e, dtype))
            self.head_b = Parameter(np.zeros(spec.classes, dtype=dtype))
        else:
            for s in spec.stem_strides:
                if s == 2:
                    self.head_deconvs.append(ConvTranspose2dLayer(e, e, 4, 2, 1, rng=rng, dtype=dtype))
            self.head_proj = Conv2dLayer(e, spec.classes, 1, rng=rng, dtype=dtype)
        self._register()

    def _register(self):
        reg: dict[str, Parameter] = {}

        def put(prefix, pairs):
            for suffix, p in pairs:
                name = f"{prefix}.{suffix}"
                p.name = name
                reg[name] = p

        put("stem.conv1", self.stem1.parameters())
        put("stem.conv2", self.stem2.parameters())
        for i, b in enumerate(self.blocks):
            put(f"blocks.{i}", b.parameters())
        if self.spec.task == "classify":
            put("head.fc", [("weight", self.head_w), ("bias", self.head_b)])
        else:
            for j, d in enumerate(self.head_deconvs):
                put(f"head.deconv.{j}", d.parameters())
            put("head.proj", self.head_proj.parameters())
        self.params = reg

    # -- mode handling ------------------------------------------------

    def train(self):
        for b in self.blocks:
            b.bn.training = True
        return self

    def eval(self):
        for b in self.blocks:
            b.bn.training = False
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------

    def required_divisor(self) -> int:
        stride_prod = self.spec.stem_strides[0] * self.spec.stem_strides[1]
        return stride_prod * self.spec.mixer_kind().downscale

    def _check_input(self, x: Tensor):
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"model expects {self.spec.in_channels} input channels, got {c}")
        div = self.required_divisor()
        if h % div or w % div:
            raise ShapeError(
                f"input {h}x{w} incompatible: stem strides {self.spec.stem_strides} and "
                f"mixer {self.spec.mixer!r} require H and W divisible by {div}")

    def features(self, x: Tensor) -> Tensor:
        self._check_input(x)
        t = self.stem1(x)
        t = self.stem2(t)
        for b in self.blocks:
            t = b(t)
        return t

    def __call__(self, x: Tensor) -> Tensor:
        t = self.features(x)
        if self.spec.task == "classify":
            t = global_avg_pool(t)
            return linear(t, self.head_w, self.head_b)
        for d in self.head_deconvs:
            t = d(t)
        return self.head_proj(t)


def _fc_init(rng: np.random.Generator, c_out: int, c_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / c_in)
    return rng.uniform(-bound, bound, size=(c_out, c_in)).astype(dtype)


def param_count(model: WaveMixModel):
    """Total scalar count plus a stem/blocks/head breakdown."""
    sections = {"stem": 0, "blocks": 0, "head": 0}
    for name, p in model.params.items():
        sections[name.split(".", 1)[0]] += p.data.size
    total = sum(sections.values())
    return total, sections


def stem_strides_for(h: int, w: int, max_side: int = 64) -> tuple[int, int]:
    """Stride-2 stem convs until the smaller input side is <= max_side."""
    strides = [1, 1]
    side = min(h, w)
    for i in range(2):
        if side > max_side:
            strides[i] = 2
            side //= 2
    return tuple(strides)
