"""Diffusion U-Net with expression cross-attention and a control branch.

The base network ``UNet`` predicts v from a noisy image and its step.  Every
attention block runs self-attention and, when expression tokens are given,
an extra attention of the same queries against the four expression tokens;
its value projection starts at zero so attaching it changes nothing.  The
``ControlBranch`` is a copy of the encoder that also sees the control signal
and returns one zero-initialized residual per skip connection.

Tensors are NCHW; steps ``tau`` are 1-based integers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

NUM_TOKENS = 4


@dataclass
class RendererConfig:
    image_channels: int = 3
    base_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 1
    attention_levels: tuple[int, ...] = (1, 2)
    num_heads: int = 1
    token_width: int = 64
    expression_dim: int = 8
    control_channels: int = 73
    mode: str = "prior"  # "prior": frozen base + control branch; "scratch": direct input conditioning
    use_expression: bool = True
    groups: int = 8
    prediction: str = "v"

    def __post_init__(self):
        self.channel_mult = tuple(int(c) for c in self.channel_mult)
        self.attention_levels = tuple(int(a) for a in self.attention_levels)
        if self.mode not in ("prior", "scratch"):
            raise ValueError(f"unknown renderer mode {self.mode!r}")
        if self.prediction != "v":
            raise ValueError("only v-prediction is supported")
        if not self.attention_levels:
            raise ValueError("need at least one attention level")
        if any(not 0 <= a < len(self.channel_mult) for a in self.attention_levels):
            raise ValueError("attention level out of range")

    @property
    def num_levels(self) -> int:
        return len(self.channel_mult)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_levels"] = list(self.attention_levels)
        return d


def timestep_embedding(tau: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) steps: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = tau.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """Scaled dot-product attention over (B, N, C) queries and (B, M, C) keys/values."""
    B, N, C = q.shape
    M = k.shape[1]
    d = C // heads
    qh = q.reshape(B, N, heads, d).transpose(1, 2)
    kh = k.reshape(B, M, heads, d).transpose(1, 2)
    vh = v.reshape(B, M, heads, d).transpose(1, 2)
    # fused kernel; same result as softmax(q k^T / sqrt(d)) v (see attention_weights)
    return F.scaled_dot_product_attention(qh, kh, vh).transpose(1, 2).reshape(B, N, C)


def attention_weights(q: torch.Tensor, k: torch.Tensor, heads: int = 1) -> torch.Tensor:
    B, N, C = q.shape
    d = C // heads
    qh = q.reshape(B, N, heads, d).transpose(1, 2)
    kh = k.reshape(B, k.shape[1], heads, d).transpose(1, 2)
    return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)


def expression_attention(z: torch.Tensor, tokens: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor,
                         w_v: torch.Tensor, heads: int = 1, queries: torch.Tensor | None = None) -> torch.Tensor:
    """``Z + attention(Q, W_k f, W_v f)`` for features Z (B, N, C) and tokens f (B, T, d).

    Queries are ``queries`` if given (the block's existing Q), else ``Z W_q^T``.
    Projection matrices follow ``nn.Linear`` layout (out, in).
    """
    q = z @ w_q.T if queries is None else queries
    return z + attention(q, tokens @ w_k.T, tokens @ w_v.T, heads)


class ExpressionEncoder(nn.Module):
    """Affine map from an expression code to ``NUM_TOKENS`` tokens of width d."""

    def __init__(self, expression_dim: int, token_width: int):
        super().__init__()
        self.expression_dim = expression_dim
        self.token_width = token_width
        self.linear = nn.Linear(expression_dim, NUM_TOKENS * token_width)

    def forward(self, z_exp: torch.Tensor) -> torch.Tensor:
        if z_exp.shape[-1] != self.expression_dim:
            raise ValueError(f"expression code has {z_exp.shape[-1]} entries, expected {self.expression_dim}")
        return self.linear(z_exp).reshape(*z_exp.shape[:-1], NUM_TOKENS, self.token_width)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = zero_module(nn.Conv2d(cout, cout, 3, padding=1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Self-attention with an optional added expression cross-attention sharing Q."""

    def __init__(self, channels: int, heads: int, groups: int, token_width: int | None):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(min(groups, channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = zero_module(nn.Linear(channels, channels))
        if token_width:
            self.exp_k = nn.Linear(token_width, channels, bias=False)
            self.exp_v = zero_module(nn.Linear(token_width, channels, bias=False))
        else:
            self.exp_k = self.exp_v = None

    @property
    def has_expression(self) -> bool:
        return self.exp_k is not None

    def forward(self, x, tokens=None):
        B, C, H, W = x.shape
        h = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        q = self.to_q(h)
        z = attention(q, self.to_k(h), self.to_v(h), self.heads)
        if tokens is not None and self.exp_k is not None:
            z = expression_attention(z, tokens, self.to_q.weight, self.exp_k.weight, self.exp_v.weight,
                                     self.heads, queries=q)
        out = self.to_out(z).transpose(1, 2).reshape(B, C, H, W)
        return x + out


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, emb=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    """Input convolution, time embedding and the down path; returns skip features."""

    def __init__(self, cfg: RendererConfig, in_channels: int, token_width: int | None):
        super().__init__()
        ch0 = cfg.base_channels
        emb_dim = 4 * ch0
        self.emb_in = ch0
        self.time_mlp = nn.Sequential(nn.Linear(ch0, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(in_channels, ch0, 3, padding=1)
        self.blocks = nn.ModuleList()
        self.skip_channels = [ch0]
        ch = ch0
        for level, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.num_res_blocks):
                layers = nn.ModuleList([ResBlock(ch, ch0 * mult, emb_dim, cfg.groups)])
                ch = ch0 * mult
                if level in cfg.attention_levels:
                    layers.append(AttentionBlock(ch, cfg.num_heads, cfg.groups, token_width))
                self.blocks.append(layers)
                self.skip_channels.append(ch)
            if level != cfg.num_levels - 1:
                self.blocks.append(nn.ModuleList([Downsample(ch)]))
                self.skip_channels.append(ch)
        self.out_channels = ch

    def embed(self, tau: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(tau, self.emb_in).to(self.conv_in.weight.dtype))

    def forward(self, h, emb, tokens=None, extra=None):
        h = self.conv_in(h)
        if extra is not None:
            h = h + extra
        skips = [h]
        for layers in self.blocks:
            for layer in layers:
                h = layer(h, tokens) if isinstance(layer, AttentionBlock) else layer(h, emb)
            skips.append(h)
        return h, skips


class UNet(nn.Module):
    """Base denoiser: x_tau, tau (+ tokens, skip residuals, direct control) -> v."""

    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        token_width = cfg.token_width if cfg.use_expression else None
        in_ch = cfg.image_channels + (cfg.control_channels if cfg.mode == "scratch" else 0)
        self.encoder = Encoder(cfg, in_ch, token_width)
        ch = self.encoder.out_channels
        emb_dim = 4 * cfg.base_channels
        self.mid = nn.ModuleList([ResBlock(ch, ch, emb_dim, cfg.groups),
                                  AttentionBlock(ch, cfg.num_heads, cfg.groups, token_width)])
        skip_ch = list(self.encoder.skip_channels)
        self.up = nn.ModuleList()
        ch0 = cfg.base_channels
        for level in reversed(range(cfg.num_levels)):
            out = ch0 * cfg.channel_mult[level]
            for i in range(cfg.num_res_blocks + 1):
                layers = nn.ModuleList([ResBlock(ch + skip_ch.pop(), out, emb_dim, cfg.groups)])
                ch = out
                if level in cfg.attention_levels:
                    layers.append(AttentionBlock(ch, cfg.num_heads, cfg.groups, token_width))
                if level != 0 and i == cfg.num_res_blocks:
                    layers.append(Upsample(ch))
                self.up.append(layers)
        self.norm_out = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.conv_out = zero_module(nn.Conv2d(ch, cfg.image_channels, 3, padding=1))

    @property
    def num_skips(self) -> int:
        return len(self.encoder.skip_channels)

    def attention_blocks(self) -> list[AttentionBlock]:
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]

    def expression_parameters(self) -> list[nn.Parameter]:
        return [p for b in self.attention_blocks() if b.has_expression for p in (b.exp_k.weight, b.exp_v.weight)]

    def base_parameters(self) -> list[nn.Parameter]:
        exp = {id(p) for p in self.expression_parameters()}
        return [p for p in self.parameters() if id(p) not in exp]

    def forward(self, x, tau, tokens=None, residuals=None, control=None):
        if self.cfg.mode == "scratch":
            if control is None:
                raise ValueError("scratch mode conditions on the control signal directly")
            x = torch.cat([x, control.to(x.dtype)], dim=1)
        elif control is not None:
            raise ValueError("prior-mode base network takes control only through residuals")
        emb = self.encoder.embed(tau)
        h, skips = self.encoder(x, emb, tokens)
        if residuals is not None:
            if len(residuals) != len(skips):
                raise ValueError(f"got {len(residuals)} residuals for {len(skips)} skip connections")
            skips = [s + r for s, r in zip(skips, residuals)]
        for layer in self.mid:
            h = layer(h, tokens) if isinstance(layer, AttentionBlock) else layer(h, emb)
        for layers in self.up:
            h = torch.cat([h, skips.pop()], dim=1)
            for layer in layers:
                if isinstance(layer, AttentionBlock):
                    h = layer(h, tokens)
                elif isinstance(layer, Upsample):
                    h = layer(h)
                else:
                    h = layer(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class ControlBranch(nn.Module):
    """Trainable encoder copy fed with x_tau plus the projected control signal."""

    def __init__(self, cfg: RendererConfig, base: UNet | None = None):
        super().__init__()
        if base is not None:
            self.encoder = copy.deepcopy(base.encoder)
            for b in self.encoder.modules():
                if isinstance(b, AttentionBlock):
                    b.exp_k = b.exp_v = None
        else:
            self.encoder = Encoder(cfg, cfg.image_channels, None)
        self.control_in = nn.Conv2d(cfg.control_channels, cfg.base_channels, 3, padding=1)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in self.encoder.skip_channels)
        self.control_channels = cfg.control_channels

    def forward(self, x, tau, control):
        if control.shape[1] != self.control_channels:
            raise ValueError(f"control has {control.shape[1]} channels, expected {self.control_channels}")
        emb = self.encoder.embed(tau)
        _, skips = self.encoder(x, emb, None, extra=self.control_in(control.to(x.dtype)))
        return [zc(s) for zc, s in zip(self.zero_convs, skips)]


class DeferredRenderer(nn.Module):
    """Base U-Net plus expression encoder and (prior mode) control branch."""

    def __init__(self, cfg: RendererConfig, base: UNet | None = None):
        super().__init__()
        self.cfg = cfg
        self.base = base if base is not None else UNet(cfg)
        self.expression = ExpressionEncoder(cfg.expression_dim, cfg.token_width) if cfg.use_expression else None
        self.control = ControlBranch(cfg, self.base) if cfg.mode == "prior" else None

    def tokens(self, z_exp):
        return None if self.expression is None else self.expression(z_exp)

    def forward(self, x, tau, control, z_exp=None):
        tokens = self.tokens(z_exp) if z_exp is not None else None
        if self.cfg.mode == "prior":
            return self.base(x, tau, tokens, residuals=self.control(x, tau, control))
        return self.base(x, tau, tokens, control=control)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {"base": self.base.base_parameters(), "expression": self.base.expression_parameters()}
        if self.expression is not None:
            groups["expression"] = groups["expression"] + list(self.expression.parameters())
        groups["control"] = list(self.control.parameters()) if self.control is not None else []
        return groups


# ------------------------------------------------------------ functional API


def encode_expression(z_exp: torch.Tensor, renderer: DeferredRenderer) -> torch.Tensor:
    if renderer.expression is None:
        raise ValueError("renderer was built without expression conditioning")
    return renderer.expression(z_exp)


def control_branch(x_tau, tau, control, renderer: DeferredRenderer) -> list[torch.Tensor]:
    if renderer.control is None:
        raise ValueError("renderer has no control branch in scratch mode")
    return renderer.control(x_tau, tau, control)


def denoise(x_tau, tau, tokens, residuals, renderer: DeferredRenderer, control=None) -> torch.Tensor:
    """v prediction of the base network given tokens and skip residuals (or direct control)."""
    if renderer.cfg.mode == "scratch":
        return renderer.base(x_tau, tau, tokens, control=control)
    return renderer.base(x_tau, tau, tokens, residuals=residuals)


def architecture_summary(module: nn.Module, sample_shape=(1, 3, 64, 64)) -> str:
    """Per-layer output shapes and parameter counts as plain text."""
    lines = []
    hooks = []

    def hook(name):
        def fn(mod, inp, out):
            shape = tuple(out.shape) if torch.is_tensor(out) else type(out).__name__
            own = sum(p.numel() for p in mod.parameters(recurse=False))
            lines.append(f"{name:<48s} {str(shape):<22s} {own:>9d}")
        return fn

    for name, mod in module.named_modules():
        if name and not list(mod.children()):
            hooks.append(mod.register_forward_hook(hook(name)))
    cfg = module.cfg
    x = torch.zeros(sample_shape)
    tau = torch.ones(sample_shape[0], dtype=torch.long)
    control = torch.zeros(sample_shape[0], cfg.control_channels, *sample_shape[2:])
    z = torch.zeros(sample_shape[0], cfg.expression_dim)
    with torch.no_grad():
        if isinstance(module, DeferredRenderer):
            module(x, tau, control, z)
        else:
            module(x, tau, control=control if cfg.mode == "scratch" else None)
    for h in hooks:
        h.remove()
    total = sum(p.numel() for p in module.parameters())
    base = module.base if isinstance(module, DeferredRenderer) else module
    n_exp = sum(b.has_expression for b in base.attention_blocks())
    header = [
        f"config {cfg.to_dict()}",
        f"parameters {total}",
        f"attention_blocks {len(base.attention_blocks())}",
        f"expression_attention_layers {n_exp}",
        f"skip_connections {base.num_skips}",
        f"{'layer':<48s} {'output':<22s} {'params':>9s}",
    ]
    return "\n".join(header + lines) + "\n"
