"""Tensor primitives on top of ``torch``.

The numeric value type throughout the package is ``torch.Tensor``. This module
adds what the training code relies on beyond plain torch: shape/domain
contracts with readable errors, a finite-difference gradient checker that
knows about ReLU/hinge kinks, the SGD and Adam update rules, the step learning
rate schedule, and seeded weight initialisation.

Ops that have a kink (``relu``, ``leaky_relu``, ``amax``) report their branch
pattern to an active :class:`KinkMonitor`, which is how :func:`gradcheck`
decides which coordinates to skip.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ContractError, DimensionError, DomainError, NumericalError

# ---------------------------------------------------------------------------
# precision
# ---------------------------------------------------------------------------

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_precision(name: str) -> None:
    """Set the tensor-wide precision mode ("float32" or "float64")."""
    try:
        torch.set_default_dtype(_DTYPES[name])
    except KeyError:
        raise ContractError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


@contextmanager
def precision(name: str):
    old = torch.get_default_dtype()
    set_precision(name)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        n_bad = int((~torch.isfinite(t)).sum())
        raise NumericalError(f"{what} has {n_bad} non-finite value(s) (shape {tuple(t.shape)})")
    return t


# ---------------------------------------------------------------------------
# kink bookkeeping for gradcheck
# ---------------------------------------------------------------------------

_monitors: list["KinkMonitor"] = []


class KinkMonitor:
    """Records the branch pattern of every kinked op evaluated while active."""

    def __init__(self):
        self.patterns: list[Tensor] = []

    def __enter__(self):
        _monitors.append(self)
        return self

    def __exit__(self, *exc):
        _monitors.remove(self)

    def same_branches(self, other: "KinkMonitor") -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        return all(a.shape == b.shape and torch.equal(a, b) for a, b in zip(self.patterns, other.patterns))


def _record(pattern: Tensor) -> None:
    for m in _monitors:
        m.patterns.append(pattern.detach().clone())


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``; ``weight`` is
    ``C_out x C_in x k x k``.
    """
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if weight.dim() != 4:
        raise DimensionError(f"conv2d: kernels must be 4-d, got {tuple(weight.shape)}")
    batched = x.dim() == 4
    if not batched and x.dim() != 3:
        raise DimensionError(f"conv2d: input must be 3-d or 4-d, got {tuple(x.shape)}")
    c_in, h, w = x.shape[-3:]
    if weight.shape[1] != c_in:
        raise DimensionError(
            f"conv2d: input has {c_in} channels but kernels {tuple(weight.shape)} expect {weight.shape[1]}"
        )
    k_h, k_w = weight.shape[2:]
    if k_h > h + 2 * pad or k_w > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {k_h}x{k_w} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    out = F.conv2d(x if batched else x.unsqueeze(0), weight, bias, stride=stride, padding=pad)
    return out if batched else out.squeeze(0)


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"{name}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    return a * b


def relu(x: Tensor) -> Tensor:
    if _monitors:
        _record(x > 0)
    return torch.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if _monitors:
        _record(x > 0)
    return F.leaky_relu(x, slope)


def exp(x: Tensor) -> Tensor:
    return torch.exp(x)


def log(x: Tensor) -> Tensor:
    if (x <= 0).any():
        raise DomainError(f"log: {int((x <= 0).sum())} non-positive input(s)")
    return torch.log(x)


def power(x: Tensor, p: float) -> Tensor:
    if float(p) != int(p) and (x < 0).any():
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    if p < 0 and (x == 0).any():
        raise DomainError(f"power: zero base with negative exponent {p}")
    return torch.pow(x, p)


def sum(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim, keepdim=keepdim)


def mean(x: Tensor, dim=None, keepdim: bool = False) -> Tensor:
    return x.mean() if dim is None else x.mean(dim, keepdim=keepdim)


def amax(x: Tensor, dim: int, keepdim: bool = False) -> Tensor:
    if _monitors:
        _record(x.argmax(dim))
    return x.amax(dim, keepdim=keepdim)


def logsumexp(x: Tensor, dim: int = -1, keepdim: bool = False) -> Tensor:
    # shift is a constant for the gradient; detaching keeps argmax ties out of the kink record
    shift = x.detach().amax(dim, keepdim=True)
    out = shift + torch.log(torch.exp(x - shift).sum(dim, keepdim=True))
    return out if keepdim else out.squeeze(dim)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    return x - logsumexp(x, dim, keepdim=True)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    shifted = torch.exp(x - x.detach().amax(dim, keepdim=True))
    return shifted / shifted.sum(dim, keepdim=True)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def avg_pool2(x: Tensor) -> Tensor:
    return F.avg_pool2d(x, 2)


def batch_norm(x, scale, shift, running_mean, running_var, training: bool, momentum: float = 0.1, eps: float = 1e-5):
    return F.batch_norm(x, running_mean, running_var, scale, shift, training, momentum, eps)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def init_uniform_(t: Tensor, fan_in: int, generator: torch.Generator | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(init_uniform_(torch.empty(d_out, d_in), d_in, generator))
        self.bias = nn.Parameter(init_uniform_(torch.empty(d_out), d_in, generator)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, k, stride=1, pad=None, bias=True, generator=None):
        super().__init__()
        fan_in = c_in * k * k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = nn.Parameter(init_uniform_(torch.empty(c_out, c_in, k, k), fan_in, generator))
        self.bias = nn.Parameter(init_uniform_(torch.empty(c_out), fan_in, generator)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(nn.Module):
    """Per-channel batch normalisation with learned scale/shift (scale=1, shift=0 at init)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.scale, self.shift, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from a scalar loss."""
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    loss.backward()


@dataclass
class GradcheckReport:
    max_rel_error: float
    n_checked: int
    skipped: list[int] = field(default_factory=list)
    worst_index: int | None = None


def gradcheck_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                     kink_radius: float = 10.0) -> GradcheckReport:
    """Compare autodiff gradients of scalar ``f`` at ``x`` with central differences.

    A coordinate is skipped when any kinked op inside ``f`` changes branch
    anywhere in ``x +- kink_radius*eps`` along that coordinate.
    """
    if eps <= 0:
        raise ContractError("gradcheck: eps must be positive")
    x0 = x.detach().clone()
    xg = x0.clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ContractError(f"gradcheck: f must return a scalar, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NumericalError("gradcheck: f(x) is not finite")
    (analytic,) = torch.autograd.grad(out.reshape(()), xg, allow_unused=True)
    analytic = torch.zeros_like(x0) if analytic is None else analytic
    analytic = analytic.reshape(-1)

    flat = x0.reshape(-1)

    def probe(i, delta):
        y = flat.clone()
        y[i] += delta
        with KinkMonitor() as mon:
            val = f(y.view_as(x0))
        return float(val), mon

    worst, worst_i, skipped = 0.0, None, []
    with torch.no_grad():
        for i in range(flat.numel()):
            f_plus, m_plus = probe(i, eps)
            f_minus, m_minus = probe(i, -eps)
            _, m_far_plus = probe(i, kink_radius * eps)
            _, m_far_minus = probe(i, -kink_radius * eps)
            if not (m_plus.same_branches(m_minus) and m_far_plus.same_branches(m_plus)
                    and m_far_minus.same_branches(m_minus)):
                skipped.append(i)
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst, worst_i = err, i
    return GradcheckReport(worst, flat.numel() - len(skipped), skipped, worst_i)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, kink_radius: float = 10.0) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    return gradcheck_report(f, x, eps, kink_radius).max_rel_error


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

def _check_grads(grads: Sequence[Tensor], names: Sequence[str] | None = None) -> None:
    bad = [names[i] if names else str(i) for i, g in enumerate(grads) if not torch.isfinite(g).all()]
    if bad:
        raise NumericalError(f"update refused: non-finite gradient in {', '.join(bad)}")


@torch.no_grad()
def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor], buffers: Sequence[Tensor],
             lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """In place: ``v = momentum*v + grad + wd*param; param -= lr*v``."""
    _check_grads(grads)
    for p, g, v in zip(params, grads, buffers):
        if p.shape != g.shape or v.shape != p.shape:
            raise DimensionError(f"sgd_step: param {tuple(p.shape)}, grad {tuple(g.shape)}, buffer {tuple(v.shape)}")
        v.mul_(momentum).add_(g).add_(p, alpha=weight_decay)
        p.sub_(v, alpha=lr)


@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], m: Sequence[Tensor], v: Sequence[Tensor],
              step: int, lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> int:
    """Bias-corrected Adam update in place; returns the new step count."""
    _check_grads(grads)
    t = step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m_i, v_i in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        m_i.mul_(beta1).add_(g, alpha=1 - beta1)
        v_i.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        denom = (v_i / c2).sqrt_().add_(eps)
        p.sub_((m_i / c1) / denom, alpha=lr)
    return t


class _Optimizer:
    def __init__(self, params: Mapping[str, Tensor]):
        self.names = list(params)
        self.params = [params[n] for n in self.names]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[Tensor]:
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        _check_grads(grads, self.names)
        return grads


class SGD(_Optimizer):
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        super().__init__(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buffers = [torch.zeros_like(p) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        sgd_step(self.params, self._grads(), self.buffers, self.lr, self.momentum, self.weight_decay)
        self.steps += 1

    def state_tensors(self) -> dict[str, Tensor]:
        return {f"momentum/{n}": b for n, b in zip(self.names, self.buffers)}

    def state_meta(self) -> dict:
        return {"kind": "sgd", "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "steps": self.steps}

    def load_state(self, tensors: Mapping[str, Tensor], meta: Mapping) -> None:
        for n, b in zip(self.names, self.buffers):
            b.copy_(torch.as_tensor(tensors[f"momentum/{n}"]))
        self.lr, self.steps = meta["lr"], meta["steps"]


class Adam(_Optimizer):
    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1: float = 0.5, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        self.steps = adam_step(self.params, self._grads(), self.m, self.v, self.steps, self.lr,
                               self.beta1, self.beta2, self.eps)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {f"m/{n}": t for n, t in zip(self.names, self.m)}
        out.update({f"v/{n}": t for n, t in zip(self.names, self.v)})
        return out

    def state_meta(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "steps": self.steps}

    def load_state(self, tensors: Mapping[str, Tensor], meta: Mapping) -> None:
        for n, m_i, v_i in zip(self.names, self.m, self.v):
            m_i.copy_(torch.as_tensor(tensors[f"m/{n}"]))
            v_i.copy_(torch.as_tensor(tensors[f"v/{n}"]))
        self.lr, self.steps = meta["lr"], meta["steps"]


def lr_schedule(epoch: int, base_lr: float, milestones: Iterable[int] = (), factor: float = 0.1) -> float:
    """Step decay; a milestone takes effect at the epoch equal to it."""
    milestones = list(milestones)
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ContractError(f"milestones must be strictly increasing: {milestones}")
    n = len([m for m in milestones if m <= epoch])
    return base_lr * factor ** n


def checksum(tensors: nn.Module | Mapping[str, Tensor] | Iterable[Tensor]) -> str:
    """SHA-256 over the raw bytes of parameters (in order); for frozen-weight checks."""
    if isinstance(tensors, nn.Module):
        tensors = [p for _, p in tensors.named_parameters()]
    elif isinstance(tensors, Mapping):
        tensors = [tensors[k] for k in sorted(tensors)]
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
