import logging
from typing import Callable, List, Mapping, Tuple

import torch

from app.core.nn import record_kink_inputs
from app.helpers.exception_handler import NumericError

logger = logging.getLogger(__name__)

RELATIVE_FLOOR = 1e-6
# coordinates moving a non-smooth input closer than KINK_RADIUS * epsilon to its kink are skipped
KINK_RADIUS = 10.0


@torch.no_grad()
def _evaluate(loss_fn: Callable[[], torch.Tensor]) -> Tuple[float, List[torch.Tensor]]:
    with record_kink_inputs() as kink_inputs:
        value = float(loss_fn())
    if value != value or value in (float("inf"), float("-inf")):
        raise NumericError("non-finite loss during gradient check")
    return value, kink_inputs


def _near_kink(center: List[torch.Tensor], near: List[torch.Tensor], moved: List[torch.Tensor]) -> bool:
    if len(moved) != len(center):
        return True
    return any(bool((n & (m != c)).any()) for c, n, m in zip(center, near, moved))


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.nn.Parameter],
    epsilon: float = 1e-5,
) -> float:
    """
    Worst relative error between reverse-mode gradients and central differences.

    `loss_fn` must be deterministic and read the parameters in place (dropout off).
    A coordinate is skipped when perturbing it changes an input of a non-smooth
    op (selu, absolute) whose magnitude at the unperturbed point is below
    KINK_RADIUS * epsilon.
    """
    for param in params.values():
        param.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss during gradient check")
    loss.backward()
    analytic = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }

    _, center = _evaluate(loss_fn)
    near = [x.abs() < KINK_RADIUS * epsilon for x in center]
    worst = 0.0
    skipped = 0
    for name, param in params.items():
        flat = param.data.view(-1)
        grad = analytic[name].view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + epsilon
            plus, moved_plus = _evaluate(loss_fn)
            flat[i] = original - epsilon
            minus, moved_minus = _evaluate(loss_fn)
            flat[i] = original

            if _near_kink(center, near, moved_plus) or _near_kink(center, near, moved_minus):
                skipped += 1
                continue

            numeric = (plus - minus) / (2 * epsilon)
            exact = grad[i].item()
            denom = max(abs(exact), abs(numeric), RELATIVE_FLOOR)
            worst = max(worst, abs(exact - numeric) / denom)

    logger.debug("grad check: worst relative error %.3e, %d kink coordinates skipped", worst, skipped)
    return worst
