"""Differentiable building blocks on top of torch autograd.

Dense and recurrent blocks with seeded initialisation, a fail-fast Adam
wrapper, a guarded ``backward`` and a central finite-difference gradient
checker that is independent of autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericalError, UsageError

ACTIVATIONS = {"selu": F.selu, "linear": None}


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63))
    return gen


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    table = {"float32": torch.float32, "float64": torch.float64}
    if name not in table:
        raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(table)}")
    return table[name]


def trunc_normal_fan_in_(weight: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    fan_in = weight.shape[1]
    std = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return nn.init.trunc_normal_(weight, 0.0, std, -2 * std, 2 * std, generator=generator)


class DenseBlock(nn.Module):
    """Stack of affine layers with an activation between them.

    ``widths`` includes the input width, so ``DenseBlock([2, 4, 1])`` maps
    2 -> 4 -> 1. The activation is applied after every layer except the last.
    """

    def __init__(self, widths: Sequence[int], activation: str = "selu", name: str = "dense",
                 generator: torch.Generator | None = None):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"{name}: widths must be >= 2 positive integers, got {widths}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"{name}: unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.name = name
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        for layer in self.layers:
            trunc_normal_fan_in_(layer.weight, generator)
            nn.init.zeros_(layer.bias)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ConfigError(f"{self.name}: expected input width {self.in_width}, got {x.shape[-1]}")
        act = ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if act is not None and i < last:
                x = act(x)
        return x


class RecurrentCell(nn.Module):
    """Gated recurrent unit (update + reset gates) over ``(state, input)``.

    Input weights use truncated-normal fan-in init; each gate's recurrent
    block is orthogonal.
    """

    def __init__(self, input_width: int, state_width: int, name: str = "gru",
                 generator: torch.Generator | None = None):
        super().__init__()
        if input_width <= 0 or state_width <= 0:
            raise ConfigError(f"{name}: widths must be positive")
        self.input_width = input_width
        self.state_width = state_width
        self.name = name
        self.cell = nn.GRUCell(input_width, state_width)
        with torch.no_grad():
            trunc_normal_fan_in_(self.cell.weight_ih, generator)
            for block in self.cell.weight_hh.view(3, state_width, state_width):
                nn.init.orthogonal_(block, generator=generator)
            self.cell.bias_ih.zero_()
            self.cell.bias_hh.zero_()

    def forward(self, state: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_width:
            raise ConfigError(f"{self.name}: expected input width {self.input_width}, got {x.shape[-1]}")
        if state.shape[-1] != self.state_width:
            raise ConfigError(f"{self.name}: expected state width {self.state_width}, got {state.shape[-1]}")
        return self.cell(x, state)


def backward(loss: torch.Tensor) -> None:
    """``loss.backward()`` that reports reuse of a freed graph as a UsageError."""
    if loss.dim() != 0:
        raise UsageError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise UsageError("loss was not produced by recorded operations")
    try:
        loss.backward()
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise UsageError("backward called twice on a consumed computation record") from exc
        raise


def zero_gradients(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


class Adam:
    """Adam with per-parameter paths, fail-fast on non-finite gradients.

    Gradient-norm clipping is applied only when ``clip_norm`` is set.
    """

    def __init__(self, named_params: Sequence[tuple[str, nn.Parameter]], lr: float,
                 clip_norm: float | None = None, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.clip_norm = clip_norm
        self.lr = lr
        self.inner = torch.optim.Adam(self.params, lr=lr, eps=eps)
        self.step_count = 0

    def zero_grad(self) -> None:
        zero_gradients(self.params)

    def apply(self) -> float:
        """Take one step; returns the pre-clipping global gradient norm."""
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in {name}", path=name)
        grads = [p.grad for p in self.params if p.grad is not None]
        norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])) if grads else torch.tensor(0.0)
        if self.clip_norm:
            scale = min(1.0, self.clip_norm / (float(norm) + 1e-6))
            if scale < 1.0:
                saved = [g.clone() for g in grads]
                for g in grads:
                    g.mul_(scale)
                self.inner.step()
                for g, s in zip(grads, saved):
                    g.copy_(s)
                self.step_count += 1
                return float(norm)
        self.inner.step()
        self.step_count += 1
        return float(norm)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in zip(self.names, self.params):
            st = self.inner.state.get(p)
            if not st:
                continue
            out[f"{name}/exp_avg"] = st["exp_avg"]
            out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{name}/step"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int) -> None:
        for name, p in zip(self.names, self.params):
            key = f"{name}/exp_avg"
            if key not in tensors:
                continue
            self.inner.state[p] = {
                "step": torch.tensor(float(tensors[f"{name}/step"][0])),
                "exp_avg": tensors[key].to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"{name}/exp_avg_sq"].to(p.dtype).clone(),
            }
        self.step_count = step_count


@dataclass
class FDReport:
    step: float
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.tolerance}

    @property
    def ok(self) -> bool:
        return not self.failures


def fd_check(loss_fn: Callable[[], torch.Tensor], named_params: Sequence[tuple[str, torch.Tensor]],
             step: float = 1e-5, tolerance: float = 1e-4, max_entries: int | None = None,
             seed: int = 0) -> FDReport:
    """Compare autograd gradients with central finite differences.

    ``loss_fn`` must be deterministic (reseed any noise inside it). The error
    for a parameter is ``max|g_ad - g_fd| / max(|g_ad|_inf, |g_fd|_inf)`` over
    the checked entries. ``max_entries`` subsamples large tensors.
    """
    params = [p for _, p in named_params]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite loss at base point", path="<base>")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    report = FDReport(step=step, tolerance=tolerance)
    for (name, p), g in zip(named_params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = np.sort(rng.choice(flat.numel(), size=max_entries, replace=False))
        analytic = g.reshape(-1)[idx].detach().double()
        numeric = torch.empty(len(idx), dtype=torch.float64)
        for j, i in enumerate(idx):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn()
                flat[i] = orig - step
                down = loss_fn()
                flat[i] = orig
            if not (torch.isfinite(up) and torch.isfinite(down)):
                raise NumericalError(f"non-finite loss while perturbing {name}[{i}]", path=name)
            numeric[j] = (up.double() - down.double()) / (2 * step)
        scale = max(analytic.abs().max().item(), numeric.abs().max().item()) if len(idx) else 0.0
        report.errors[name] = (analytic - numeric).abs().max().item() / scale if scale > 0 else 0.0
    return report
