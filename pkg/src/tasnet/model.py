"""Conv-TasNet with optional deep (PReLU, dilated or gated) encoder/decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import AudioBuffer, num_frames

VARIANTS = ("linear", "prelu", "dilated", "glu")
DEFAULT_DEPTH = {"linear": 1, "prelu": 4, "dilated": 5, "glu": 4}


@dataclass
class ModelConfig:
    N: int = 512
    L: int = 16
    S: int = 8
    C: int = 2
    I: int = 1
    encoder_variant: str = "linear"
    enc_dilations: list[int] = field(default_factory=list)
    B: int = 128
    H: int = 512
    Sc: int = 128
    P_sep: int = 3
    X: int = 8
    R: int = 3
    gln_eps: float = 1e-8

    def __post_init__(self):
        if self.encoder_variant not in VARIANTS:
            raise ValueError(f"encoder_variant must be one of {VARIANTS}, got {self.encoder_variant!r}")
        if self.I < 1:
            raise ValueError(f"depth I must be >= 1, got {self.I}")
        if self.encoder_variant == "linear" and self.I != 1:
            raise ValueError("the linear variant has depth I=1")
        if not 0 < self.S <= self.L:
            raise ValueError(f"stride S={self.S} must be in (0, L={self.L}]")
        if self.P_sep % 2 == 0:
            raise ValueError("separator kernel size must be odd for symmetric padding")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if not self.enc_dilations:
            if self.encoder_variant == "dilated":
                self.enc_dilations = [2**i for i in range(self.I - 1)]
            else:
                self.enc_dilations = [1] * (self.I - 1)
        self.enc_dilations = [int(d) for d in self.enc_dilations]
        if len(self.enc_dilations) != self.I - 1:
            raise ValueError(f"enc_dilations needs I-1={self.I - 1} entries, got {self.enc_dilations}")
        if self.encoder_variant != "dilated" and any(d != 1 for d in self.enc_dilations):
            raise ValueError("enc_dilations other than 1 are only valid for the dilated variant")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def preset_config(preset: str, variant: str = "linear", depth: int | None = None, **overrides) -> ModelConfig:
    """Named architecture presets: ``paper`` (Table-scale) and ``desk`` (CPU-sized)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if preset == "paper":
        base = dict(N=512, L=16, S=8, B=128, H=512, Sc=128, P_sep=3, X=8, R=3, C=2)
    elif preset == "desk":
        base = dict(N=64, L=16, S=8, B=32, H=64, Sc=32, P_sep=3, X=4, R=2, C=2)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    I = DEFAULT_DEPTH[variant] if depth is None else depth
    if variant == "linear" and I != 1:
        variant = "prelu"
    base.update(I=I, encoder_variant=variant)
    base.update(overrides)
    return ModelConfig(**base)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    N, B, H, Sc, P, C = cfg.N, cfg.B, cfg.H, cfg.Sc, cfg.P_sep, cfg.C
    total = 2 * N * cfg.L
    if cfg.encoder_variant == "glu":
        deep = 2 * N * N * 3 + 2 * N
    else:
        deep = N * N * 3 + N
    total += 2 * (cfg.I - 1) * deep
    block = (B * H + H) + H + 2 * H + (H * P + H) + H + 2 * H + (H * B + B) + (H * Sc + Sc)
    total += 2 * N + (N * B + B) + cfg.R * cfg.X * block + Sc + (Sc * C * N + C * N)
    return total


# -- layers -----------------------------------------------------------------


class Module:
    """Parameter container; parameters are enumerated in attribute-assignment order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(n, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class Conv1d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, dilation=1, padding=0, groups=1,
                 bias=True, dtype=np.float32):
        self.weight = _uniform(rng, (cout, cin // groups, kernel), cin // groups * kernel, dtype)
        self.bias = _zeros(cout, dtype) if bias else None
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias, self.stride, self.dilation, self.padding, self.groups)


class ConvTranspose1d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, dilation=1, padding=0, groups=1,
                 bias=True, dtype=np.float32):
        self.weight = _uniform(rng, (cin, cout // groups, kernel), cout // groups * kernel, dtype)
        self.bias = _zeros(cout, dtype) if bias else None
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d_transposed(x, self.weight, self.bias, self.stride, self.dilation,
                                    self.padding, self.groups)


class PReLU(Module):
    def __init__(self, channels, dtype=np.float32, init=0.25):
        self.slopes = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.prelu(x, self.slopes)


class GlobalLayerNorm(Module):
    def __init__(self, channels, eps=1e-8, dtype=np.float32):
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = _zeros(channels, dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.global_layer_norm(x, self.gain, self.bias, self.eps)


class DeepLayer(Module):
    """Kernel-3, length-preserving conv (or transposed conv) followed by PReLU."""

    def __init__(self, n, dilation, rng, transposed=False, dtype=np.float32):
        conv = ConvTranspose1d if transposed else Conv1d
        self.conv = conv(n, n, 3, rng, dilation=dilation, padding=dilation, bias=False, dtype=dtype)
        self.act = PReLU(n, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.act(self.conv(x))


class GLULayer(Module):
    """``convA(x) * sigmoid(gLN(convB(x)))`` with kernel-3 length-preserving convs."""

    def __init__(self, n, dilation, rng, transposed=False, eps=1e-8, dtype=np.float32):
        conv = ConvTranspose1d if transposed else Conv1d
        self.linear = conv(n, n, 3, rng, dilation=dilation, padding=dilation, bias=False, dtype=dtype)
        self.gate = conv(n, n, 3, rng, dilation=dilation, padding=dilation, bias=False, dtype=dtype)
        self.norm = GlobalLayerNorm(n, eps, dtype)
        self.last_gate: np.ndarray | None = None
        self.record_gate = False

    def __call__(self, x: Tensor) -> Tensor:
        g = ag.sigmoid(self.norm(self.gate(x)))
        if self.record_gate:
            self.last_gate = g.data.copy()
        return self.linear(x) * g


class ConvBlock(Module):
    """TCN block: 1x1 -> PReLU -> gLN -> depthwise dilated -> PReLU -> gLN -> residual/skip 1x1."""

    def __init__(self, cfg: ModelConfig, dilation, rng, dtype=np.float32):
        B, H, P = cfg.B, cfg.H, cfg.P_sep
        self.inp = Conv1d(B, H, 1, rng, dtype=dtype)
        self.act1 = PReLU(H, dtype)
        self.norm1 = GlobalLayerNorm(H, cfg.gln_eps, dtype)
        self.depthwise = Conv1d(H, H, P, rng, dilation=dilation, padding=dilation * (P - 1) // 2,
                                groups=H, dtype=dtype)
        self.act2 = PReLU(H, dtype)
        self.norm2 = GlobalLayerNorm(H, cfg.gln_eps, dtype)
        self.res = Conv1d(H, B, 1, rng, dtype=dtype)
        self.skip = Conv1d(H, cfg.Sc, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = self.norm1(self.act1(self.inp(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.res(y), self.skip(y)


class Separator(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.norm = GlobalLayerNorm(cfg.N, cfg.gln_eps, dtype)
        self.bottleneck = Conv1d(cfg.N, cfg.B, 1, rng, dtype=dtype)
        self.blocks = [ConvBlock(cfg, 2**b, rng, dtype) for _ in range(cfg.R) for b in range(cfg.X)]
        self.act = PReLU(cfg.Sc, dtype)
        self.mask = Conv1d(cfg.Sc, cfg.C * cfg.N, 1, rng, dtype=dtype)

    def __call__(self, E: Tensor) -> Tensor:
        """[B, N, K] -> masks [B, C, N, K] in (0, 1)."""
        y = self.bottleneck(self.norm(E))
        skip_sum = None
        for block in self.blocks:
            y, skip = block(y)
            skip_sum = skip if skip_sum is None else skip_sum + skip
        logits = self.mask(self.act(skip_sum))
        batch, _, K = logits.shape
        return ag.sigmoid(logits.reshape(batch, self.cfg.C, self.cfg.N, K))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.first = Conv1d(1, cfg.N, cfg.L, rng, stride=cfg.S, bias=False, dtype=dtype)
        layer = GLULayer if cfg.encoder_variant == "glu" else DeepLayer
        kwargs = {"eps": cfg.gln_eps} if layer is GLULayer else {}
        self.layers = [layer(cfg.N, d, rng, dtype=dtype, **kwargs) for d in cfg.enc_dilations]

    def __call__(self, x: Tensor) -> Tensor:
        h = self.first(x)
        for layer in self.layers:
            h = layer(h)
        return h


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        layer = GLULayer if cfg.encoder_variant == "glu" else DeepLayer
        kwargs = {"eps": cfg.gln_eps} if layer is GLULayer else {}
        self.layers = [layer(cfg.N, d, rng, transposed=True, dtype=dtype, **kwargs)
                       for d in reversed(cfg.enc_dilations)]
        self.last = ConvTranspose1d(cfg.N, 1, cfg.L, rng, stride=cfg.S, bias=False, dtype=dtype)

    def __call__(self, D: Tensor) -> Tensor:
        h = D
        for layer in self.layers:
            h = layer(h)
        return self.last(h)


class SeparationModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.dtype = np.dtype(dtype).type
        self.encoder = Encoder(cfg, rng, self.dtype)
        self.separator = Separator(cfg, rng, self.dtype)
        self.decoder = Decoder(cfg, rng, self.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "SeparationModel":
        self.dtype = np.dtype(dtype).type
        for p in self.parameters():
            p.data = p.data.astype(self.dtype)
            p.grad = None
        return self

    def _as_batch(self, x) -> Tensor:
        if isinstance(x, AudioBuffer):
            x = x.samples
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 1:
            x = x.reshape(1, x.shape[0])
        if x.shape[-1] < self.config.L:
            raise ValueError(f"input has {x.shape[-1]} samples, fewer than the frame length L={self.config.L}")
        return x

    def encode(self, x) -> Tensor:
        """Waveform [B, T] -> latent [B, N, K]; the input is end-padded to whole frames."""
        x = self._as_batch(x)
        cfg = self.config
        K = num_frames(x.shape[-1], cfg.L, cfg.S)
        x = ag.pad_or_trim(x, (K - 1) * cfg.S + cfg.L)
        return self.encoder(x.reshape(x.shape[0], 1, x.shape[-1]))

    def separate_latent(self, E: Tensor) -> Tensor:
        return self.separator(E)

    def decode(self, D: Tensor, T: int) -> Tensor:
        """Latent [M, N, K] -> waveform [M, T]."""
        y = self.decoder(D)
        y = y.reshape(y.shape[0], y.shape[-1])
        return ag.pad_or_trim(y, T)

    def forward(self, x) -> Tensor:
        """Mixture [B, T] -> estimated sources [B, C, T]."""
        x = self._as_batch(x)
        batch, T = x.shape
        E = self.encode(x)
        masks = self.separate_latent(E)
        C = self.config.C
        D = ag.stack([masks[:, c] * E for c in range(C)], axis=1)
        K = E.shape[-1]
        y = self.decode(D.reshape(batch * C, self.config.N, K), T)
        return y.reshape(batch, C, T)

    __call__ = forward

    def separate(self, x: AudioBuffer) -> list[AudioBuffer]:
        with ag.no_grad():
            y = self.forward(x)
        return [AudioBuffer(y.data[0, c].astype(np.float32), x.sample_rate) for c in range(self.config.C)]

    def gated_layers(self) -> list[tuple[str, GLULayer]]:
        out = [(f"encoder.layers.{i}", l) for i, l in enumerate(self.encoder.layers) if isinstance(l, GLULayer)]
        out += [(f"decoder.layers.{i}", l) for i, l in enumerate(self.decoder.layers) if isinstance(l, GLULayer)]
        return out

