"""Sharpness-aware minimization around a first-order base optimizer.

One step:

1. g = grad L(w)
2. e = rho * g / ||g||  (global L2 norm over all parameters)
3. g_sam = grad L(w + e)
4. restore w and apply the base update with g_sam

When ||g|| = 0 the perturbation is skipped and g is used directly; rho = 0
reduces to the plain base update with a single gradient evaluation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch

from liverdx.errors import ConfigError, NonFiniteLossError


@dataclass
class SamConfig:
    rho: float = 0.05
    lr: float = 1e-5
    base: str = "adam"  # "adam" or "sgd"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    enabled: bool = True

    def validate(self):
        if self.rho < 0:
            raise ConfigError("rho must be nonnegative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.base not in ("adam", "sgd"):
            raise ConfigError(f"unknown base optimizer {self.base!r}")
        return self

    @property
    def effective_rho(self):
        return self.rho if self.enabled else 0.0

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d


def _base_optimizer(params, cfg: SamConfig):
    if cfg.base == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    return torch.optim.SGD(params, lr=cfg.lr)


class SAM:
    """Two-pass SAM step driving a base optimizer.

    ``closure`` must zero nothing itself: it evaluates the loss, calls
    ``backward()`` and returns the loss tensor. Gradients are zeroed here.
    """

    def __init__(self, params, cfg: SamConfig | None = None):
        self.cfg = (cfg or SamConfig()).validate()
        self.params = [p for p in params if p.requires_grad]
        self.base = _base_optimizer(self.params, self.cfg)
        self.grad_evals = 0

    def set_lr(self, lr):
        for group in self.base.param_groups:
            group["lr"] = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _evaluate(self, closure):
        self.zero_grad()
        with torch.enable_grad():
            loss = closure()
        self.grad_evals += 1
        value = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss {value}")
        for p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLossError(f"non-finite gradient in parameter of shape {tuple(p.shape)}")
        return value

    def grad_norm(self):
        norms = [p.grad.detach().norm(2) for p in self.params if p.grad is not None]
        if not norms:
            return 0.0
        return float(torch.linalg.vector_norm(torch.stack(norms)))

    def step(self, closure):
        """Run one step; returns the loss at the unperturbed weights."""
        loss = self._evaluate(closure)
        rho = self.cfg.effective_rho
        if rho > 0:
            norm = self.grad_norm()
            if norm > 0:
                saved = [p.detach().clone() for p in self.params]
                with torch.no_grad():
                    for p in self.params:
                        if p.grad is not None:
                            p.add_(p.grad, alpha=rho / norm)
                try:
                    self._evaluate(closure)
                finally:
                    with torch.no_grad():
                        for p, w in zip(self.params, saved):
                            p.copy_(w)
        self.base.step()
        return loss

    def state_dict(self):
        # deep copy: torch may alias moment buffers between a saved and a loaded state
        return copy.deepcopy({"base": self.base.state_dict(), "grad_evals": self.grad_evals})

    def load_state_dict(self, state):
        self.base.load_state_dict(state["base"])
        self.grad_evals = int(state.get("grad_evals", 0))


def sam_step(optimizer: SAM, closure):
    return optimizer.step(closure)
