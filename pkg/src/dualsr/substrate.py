"""Differentiable building blocks shared by the generator and discriminator.

Everything here is pure given its inputs: spectral normalization returns an
updated state instead of mutating shared state, and randomness always comes
through an explicit ``torch.Generator``. Verification helpers (`gradcheck`,
`module_gradcheck`) compare autograd gradients against central differences
and are meant to run at double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "ContractError",
    "GradientError",
    "ConvSpec",
    "check_tensor4",
    "conv2d",
    "Conv2dLayer",
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "SpectralState",
    "init_spectral_state",
    "spectral_normalize",
    "SNConv2d",
    "time_embedding",
    "gradcheck",
    "module_gradcheck",
]


class ContractError(ValueError):
    """An input violates an operation's stated shape or value contract."""


class GradientError(RuntimeError):
    """A gradient check hit a non-finite analytic gradient."""


def check_tensor4(x: Tensor, name: str = "input") -> Tensor:
    if x.dim() != 4:
        raise ContractError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ContractError(f"{name} has an empty dimension: {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ContractError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    has_bias: bool = True

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Contract-checked 2-D convolution; output size follows `spec.out_size`."""
    check_tensor4(x, "conv input")
    if x.shape[1] != spec.in_channels:
        raise ContractError(
            f"conv input has {x.shape[1]} channels, spec expects {spec.in_channels} "
            f"(input shape {tuple(x.shape)})"
        )
    expected_w = (spec.out_channels, spec.in_channels, *spec.kernel)
    if tuple(weight.shape) != expected_w:
        raise ContractError(
            f"conv weight shape {tuple(weight.shape)} does not match spec {expected_w}"
        )
    if spec.has_bias == (bias is None):
        raise ContractError(f"spec.has_bias={spec.has_bias} but bias was {'omitted' if bias is None else 'given'}")
    out = F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)
    return check_tensor4(out, "conv output")


class Conv2dLayer(nn.Module):
    """Learnable convolution whose forward goes through the `conv2d` contract."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, (kernel, kernel), stride, padding, bias)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            fan_in = in_channels * kernel * kernel
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


class MultiHeadSelfAttention(nn.Module):
    """Raw multi-head self-attention over (B, N, D) token sequences.

    Permutation-equivariant: there is no positional term inside this op.
    """

    def __init__(self, model_dim: int, num_heads: int, bias: bool = True):
        super().__init__()
        if model_dim % num_heads != 0:
            raise ContractError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.model_dim = model_dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(model_dim, model_dim, bias=bias)
        # softmax is shift-invariant across keys, so a key bias is a dead parameter
        self.k_proj = nn.Linear(model_dim, model_dim, bias=False)
        self.v_proj = nn.Linear(model_dim, model_dim, bias=bias)
        self.o_proj = nn.Linear(model_dim, model_dim, bias=bias)

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.dim() != 3 or tokens.shape[-1] != self.model_dim:
            raise ContractError(
                f"tokens must be (B, N, {self.model_dim}), got {tuple(tokens.shape)}"
            )
        b, n, d = tokens.shape
        h = self.num_heads
        hd = d // h
        q = self.q_proj(tokens).view(b, n, h, hd).transpose(1, 2)
        k = self.k_proj(tokens).view(b, n, h, hd).transpose(1, 2)
        v = self.v_proj(tokens).view(b, n, h, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o_proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: norm -> attention -> residual; norm -> MLP -> residual."""

    def __init__(self, model_dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(model_dim)
        self.attn = MultiHeadSelfAttention(model_dim, num_heads)
        self.norm2 = nn.LayerNorm(model_dim)
        hidden = int(model_dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(model_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, model_dim),
        )

    def forward(self, tokens: Tensor) -> Tensor:
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens


@dataclass
class SpectralState:
    """Power-iteration state: left singular vector estimate plus the raw weight view."""

    u: Tensor
    weight: Tensor


def _l2norm(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / (v.norm() + eps)


def init_spectral_state(weight: Tensor, generator: torch.Generator | None = None) -> SpectralState:
    if weight.dim() != 2:
        raise ContractError(f"spectral state needs a 2-D weight view, got {tuple(weight.shape)}")
    u = torch.randn(weight.shape[0], generator=generator, dtype=weight.dtype)
    return SpectralState(u=_l2norm(u), weight=weight)


def spectral_normalize(state: SpectralState, n_power_iters: int) -> tuple[Tensor, SpectralState]:
    """Divide the weight by its estimated largest singular value.

    Runs `n_power_iters` power-iteration steps starting from `state.u`, then
    returns (weight / sigma, updated state). Sigma is differentiable in the
    weight; the singular vectors are treated as constants.
    """
    if n_power_iters < 1:
        raise ContractError(f"n_power_iters must be >= 1, got {n_power_iters}")
    w = state.weight
    if w.dim() != 2:
        raise ContractError(f"weight view must be 2-D, got {tuple(w.shape)}")
    if float(w.detach().abs().max()) == 0.0:
        raise ContractError("power iteration is undefined for an all-zero weight matrix")
    with torch.no_grad():
        wd = w.detach()
        u = state.u.to(wd.dtype)
        for _ in range(n_power_iters):
            v = _l2norm(wd.t().mv(u))
            u = _l2norm(wd.mv(v))
    sigma = torch.dot(u, w.mv(v))
    return w / sigma, SpectralState(u=u, weight=w)


class SNConv2d(nn.Module):
    """Convolution whose matricized weight (out, in*kh*kw) is spectrally normalized.

    `power_iterate` advances the persisted singular-vector estimates (warm
    start, normally once per training step); `forward` normalizes with the
    current estimates without touching them, so inference is deterministic.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.register_buffer("u", _l2norm(torch.randn(out_channels)))
        self.register_buffer("v", torch.zeros(in_channels * kernel * kernel))
        self.power_iterate(1)

    def weight_matrix(self) -> Tensor:
        return self.weight.view(self.weight.shape[0], -1)

    @torch.no_grad()
    def power_iterate(self, n: int = 1) -> None:
        w = self.weight_matrix().detach()
        u = self.u
        for _ in range(n):
            v = _l2norm(w.t().mv(u))
            u = _l2norm(w.mv(v))
        self.u.copy_(u)
        self.v.copy_(v)

    def sigma(self) -> Tensor:
        return torch.dot(self.u, self.weight_matrix().mv(self.v))

    def normalized_weight(self) -> Tensor:
        return self.weight / self.sigma()

    def forward(self, x: Tensor) -> Tensor:
        check_tensor4(x, "SNConv2d input")
        return F.conv2d(x, self.normalized_weight(), self.bias,
                        stride=self.stride, padding=self.padding)


def time_embedding(t: float, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Sinusoidal timestep embedding: interleaved sin/cos at 10000^(-2i/dim).

    Deterministic in (t, dim); every component lies in [-1, 1].
    """
    if dim % 2 != 0:
        raise ContractError(f"embedding dim must be even, got {dim}")
    i = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.pow(10000.0, -2.0 * i / dim)
    angles = float(t) * freqs
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=1).reshape(-1)
    return emb.to(dtype)


def _sample_coords(sizes: list[int], n_samples: int | None, generator: torch.Generator) -> list[tuple[int, int]]:
    total = sum(sizes)
    if n_samples is None or n_samples >= total:
        return [(li, j) for li, size in enumerate(sizes) for j in range(size)]
    flat = torch.randperm(total, generator=generator)[:n_samples].tolist()
    offsets = []
    acc = 0
    for size in sizes:
        offsets.append(acc)
        acc += size
    coords = []
    for f in flat:
        li = max(i for i, off in enumerate(offsets) if off <= f)
        coords.append((li, f - offsets[li]))
    return coords


def _max_rel_error(closure, leaves: list[Tensor], names: list[str], eps: float,
                   n_samples: int | None, generator: torch.Generator) -> float:
    scalar = closure()
    grads = torch.autograd.grad(scalar, leaves, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, leaves)]
    for name, g in zip(names, grads):
        if not torch.isfinite(g).all():
            bad = int(torch.nonzero(~torch.isfinite(g.reshape(-1)))[0])
            raise GradientError(f"non-finite analytic gradient for {name} at flat index {bad}")

    coords = _sample_coords([leaf.numel() for leaf in leaves], n_samples, generator)
    max_err = 0.0
    with torch.no_grad():
        for li, j in coords:
            flat = leaves[li].view(-1)
            old = float(flat[j])
            flat[j] = old + eps
            f_plus = float(closure())
            flat[j] = old - eps
            f_minus = float(closure())
            flat[j] = old
            fd = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(grads[li].reshape(-1)[j])
            err = abs(analytic - fd) / (abs(analytic) + abs(fd) + 1e-12)
            max_err = max(max_err, err)
    return max_err


def _check_eps(eps: float) -> None:
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")


def gradcheck(fn, inputs, eps: float = 1e-4, n_samples: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences at `inputs`.

    `fn` maps the input tensors to a tensor of any shape; the output is
    reduced through a fixed random projection so the whole Jacobian is
    probed. Only inputs with requires_grad=True are differentiated; the
    error is max over sampled coordinates of
    |analytic - fd| / (|analytic| + |fd| + 1e-12).
    """
    _check_eps(eps)
    work = []
    for x in inputs:
        t = x.detach().clone().contiguous().requires_grad_(x.requires_grad)
        work.append(t)
    leaves = [t for t in work if t.requires_grad]
    if not leaves:
        raise ContractError("gradcheck needs at least one input with requires_grad=True")
    names = [f"input[{i}]" for i, t in enumerate(work) if t.requires_grad]
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out0 = fn(*work)
    proj = torch.randn(out0.shape, generator=gen, dtype=out0.dtype)

    def closure():
        return (fn(*work) * proj).sum()

    return _max_rel_error(closure, leaves, names, eps, n_samples, gen)


def module_gradcheck(module: nn.Module, inputs, eps: float = 1e-4,
                     n_samples: int | None = None, seed: int = 0) -> float:
    """Gradcheck of a module's output with respect to its trainable parameters."""
    _check_eps(eps)
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not named:
        raise ContractError("module has no trainable parameters")
    names = [n for n, _ in named]
    leaves = [p for _, p in named]
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out0 = module(*inputs)
    proj = torch.randn(out0.shape, generator=gen, dtype=out0.dtype)

    def closure():
        return (module(*inputs) * proj).sum()

    return _max_rel_error(closure, leaves, names, eps, n_samples, gen)
