import math
import logging
from typing import Dict, Iterable, Mapping, Tuple

import torch
from pydantic import BaseModel, ConfigDict, PositiveFloat, conint, model_validator

from app.helpers.exception_handler import NumericError

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class LrSchedule(BaseModel):
    """Linear warmup from lr_start to lr_peak, then cosine decay to lr_final at total_epochs."""

    warmup_epochs: conint(ge=0) = 10
    lr_start: PositiveFloat = 5e-5
    lr_peak: PositiveFloat = 5e-4
    lr_final: PositiveFloat = 1.5e-4
    total_epochs: conint(ge=1) = 200

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_horizon(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup_epochs cannot exceed total_epochs")
        return self

    @classmethod
    def constant(cls, lr: float, total_epochs: int) -> "LrSchedule":
        return cls(warmup_epochs=0, lr_start=lr, lr_peak=lr, lr_final=lr, total_epochs=total_epochs)

    def lr(self, epoch: float) -> float:
        """Learning rate at a (fractional) epoch; clamped outside [0, total_epochs]."""
        e = min(max(float(epoch), 0.0), float(self.total_epochs))
        if self.warmup_epochs > 0 and e < self.warmup_epochs:
            return self.lr_start + (self.lr_peak - self.lr_start) * e / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span == 0:
            return self.lr_final
        progress = (e - self.warmup_epochs) / span
        return self.lr_final + 0.5 * (self.lr_peak - self.lr_final) * (1.0 + math.cos(math.pi * progress))


class OptimizerState:
    """
    AdamW (decoupled weight decay) over a fixed, named parameter set.

    Gradients are materialised as zeros for every parameter by `zero_grad` so
    parameters that did not take part in a step still receive the decay and
    moment updates.
    """

    def __init__(
        self,
        named_params: Iterable[Tuple[str, torch.nn.Parameter]],
        weight_decay: float,
        lr: float = 1e-3,
        betas: Tuple[float, float] = ADAM_BETAS,
        eps: float = ADAM_EPS,
    ):
        self.params: Dict[str, torch.nn.Parameter] = dict(named_params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.weight_decay = weight_decay
        self.lr = lr
        self.step_count = 0
        self.optimizer = torch.optim.AdamW(
            list(self.params.values()),
            lr=lr,
            betas=betas,
            eps=eps,
            weight_decay=weight_decay,
            foreach=False,
        )

    def zero_grad(self) -> None:
        for param in self.params.values():
            if param.grad is None:
                param.grad = torch.zeros_like(param)
            else:
                param.grad.zero_()

    def moments(self) -> Dict[str, torch.Tensor]:
        tensors = {}
        for name, param in self.params.items():
            state = self.optimizer.state.get(param)
            if not state:
                continue
            tensors[f"{name}.exp_avg"] = state["exp_avg"].detach().clone()
            tensors[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
        return tensors

    def steps(self) -> Dict[str, float]:
        return {
            name: float(self.optimizer.state[param]["step"])
            for name, param in self.params.items()
            if self.optimizer.state.get(param)
        }

    def restore(self, moments: Mapping[str, torch.Tensor], steps: Mapping[str, float], step_count: int, lr: float):
        names = list(self.params)
        state = {}
        for idx, name in enumerate(names):
            if name not in steps:
                continue
            state[idx] = {
                "step": torch.tensor(steps[name], dtype=torch.get_default_dtype()),
                "exp_avg": moments[f"{name}.exp_avg"].clone(),
                "exp_avg_sq": moments[f"{name}.exp_avg_sq"].clone(),
            }
        groups = self.optimizer.state_dict()["param_groups"]
        self.optimizer.load_state_dict({"state": state, "param_groups": groups})
        self.step_count = step_count
        self.lr = lr


def adamw_step(state: OptimizerState, params: Mapping[str, torch.nn.Parameter], lr: float) -> OptimizerState:
    """
    One AdamW update of `params` (all registered in `state`) at learning rate `lr`.

    Registered parameters outside `params` keep their values and moments.
    """
    for name, param in params.items():
        if name not in state.params:
            raise ValueError(f"parameter {name} is not registered with the optimizer")
        if param.grad is None:
            raise NumericError("missing gradient", {"parameter": name})
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    # torch skips parameters without a gradient
    held = {name: p.grad for name, p in state.params.items() if name not in params}
    for name in held:
        state.params[name].grad = None
    try:
        state.optimizer.step()
    finally:
        for name, grad in held.items():
            state.params[name].grad = grad
    state.step_count += 1
    state.lr = lr
    return state
