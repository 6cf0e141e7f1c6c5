"""
Limited-memory BFGS over flat numpy vectors.

The objective is any callable mapping a point to an ``Evaluation`` (value,
gradient and an optional payload the caller wants back). Numerical errors
raised by the objective at a trial point are treated as a rejected step.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import AutodiffError

logger = logging.getLogger(__name__)


class Evaluation(NamedTuple):
    loss: float
    grad: np.ndarray
    payload: Any = None


Objective = Callable[[np.ndarray], Evaluation]


class LbfgsOptions(BaseModel):
    """Tuning knobs for ``lbfgs_step``."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    history_size: int = Field(default=10, ge=1)
    max_line_search_evals: int = Field(default=20, ge=1)
    armijo_c: float = Field(default=1e-4, gt=0, lt=1)
    backtrack_factor: float = Field(default=0.5, gt=0, lt=1)
    curvature_eps: float = Field(default=1e-10, ge=0)
    fallback_scale: float = Field(default=1e-3, gt=0)
    inner_iterations: int = Field(default=20, ge=1, description="L-BFGS updates per attack iteration")
    tolerance_grad: float = Field(default=1e-7, ge=0)
    tolerance_change: float = Field(default=1e-9, ge=0)


@dataclass
class LbfgsMemory:
    """Curvature pairs plus the evaluation cached at the current point."""

    history_size: int = 10
    pairs: Deque[Tuple[np.ndarray, np.ndarray]] = field(default_factory=deque)
    _cached_point: Optional[np.ndarray] = None
    _cached: Optional[Evaluation] = None

    def __post_init__(self):
        self.pairs = deque(self.pairs, maxlen=self.history_size)

    def direction(self, gradient: np.ndarray) -> np.ndarray:
        """Two-loop recursion: approximate -H g from the stored pairs."""
        q = gradient.copy()
        alphas: List[float] = []
        rhos: List[float] = []
        for s, y in reversed(self.pairs):
            rho = 1.0 / float(y @ s)
            alpha = rho * float(s @ q)
            q -= alpha * y
            alphas.append(alpha)
            rhos.append(rho)
        if self.pairs:
            s, y = self.pairs[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y), alpha, rho in zip(self.pairs, reversed(alphas), reversed(rhos)):
            beta = rho * float(y @ q)
            q += (alpha - beta) * s
        return -q

    def update(self, s: np.ndarray, y: np.ndarray, eps: float = 1e-10) -> bool:
        """Store (s, y) when it satisfies the curvature condition."""
        if float(s @ y) > eps:
            self.pairs.append((s, y))
            return True
        return False

    def remember(self, point: np.ndarray, evaluation: Evaluation) -> None:
        self._cached_point = point
        self._cached = evaluation

    def recall(self, point: np.ndarray) -> Optional[Evaluation]:
        if self._cached_point is not None and np.array_equal(self._cached_point, point):
            return self._cached
        return None

    def forget(self) -> None:
        self._cached_point = None
        self._cached = None


@dataclass
class LineSearchResult:
    accepted: bool
    step: float
    point: Optional[np.ndarray]
    evaluation: Optional[Evaluation]
    evaluations: int


def _safe_evaluate(objective: Objective, point: np.ndarray) -> Optional[Evaluation]:
    try:
        evaluation = objective(point)
    except (AutodiffError, FloatingPointError) as exc:
        logger.debug(f"Trial point rejected: {exc}")
        return None
    if not np.isfinite(evaluation.loss) or not np.all(np.isfinite(evaluation.grad)):
        return None
    return evaluation


def armijo_backtracking(
    objective: Objective,
    point: np.ndarray,
    loss: float,
    gradient: np.ndarray,
    direction: np.ndarray,
    initial_step: float,
    options: LbfgsOptions,
) -> LineSearchResult:
    """Shrink the step until f(x + t d) <= f(x) + c t g.d or the budget runs out."""
    slope = float(gradient @ direction)
    step = initial_step
    for attempt in range(1, options.max_line_search_evals + 1):
        trial = point + step * direction
        evaluation = _safe_evaluate(objective, trial)
        if evaluation is not None and evaluation.loss <= loss + options.armijo_c * step * slope:
            return LineSearchResult(True, step, trial, evaluation, attempt)
        step *= options.backtrack_factor
    return LineSearchResult(False, step, None, None, options.max_line_search_evals)


@dataclass
class LbfgsStep:
    point: np.ndarray
    evaluation: Optional[Evaluation]
    step: float
    evaluations: int
    fallback: bool = False
    stored_pair: bool = False


def lbfgs_step(
    objective: Objective,
    point: np.ndarray,
    current: Evaluation,
    memory: LbfgsMemory,
    eta: float,
    options: LbfgsOptions,
) -> LbfgsStep:
    """One L-BFGS iteration from ``point`` whose evaluation is ``current``.

    With an empty history the direction is -g and the first trial step is
    ``eta * min(1, 1 / |g|_1)``; afterwards the line search starts at ``eta``.
    If the line search fails the step falls back to a steepest-descent move of
    length ``eta * options.fallback_scale``.
    """
    flat_point = point.reshape(-1)
    gradient = current.grad.reshape(-1)
    grad_norm = float(np.linalg.norm(gradient))
    if grad_norm == 0.0:
        return LbfgsStep(point=point.copy(), evaluation=current, step=0.0, evaluations=0)

    if memory.pairs:
        direction = memory.direction(gradient)
        initial_step = eta
        if float(gradient @ direction) >= 0.0:
            logger.debug("L-BFGS direction is not a descent direction; resetting history")
            memory.pairs.clear()
    if not memory.pairs:
        direction = -gradient
        initial_step = eta * min(1.0, 1.0 / float(np.abs(gradient).sum()))

    search = armijo_backtracking(
        lambda x: objective(x.reshape(point.shape)),
        flat_point,
        current.loss,
        gradient,
        direction,
        initial_step,
        options,
    )
    if not search.accepted:
        fallback = eta * options.fallback_scale
        new_point = flat_point - fallback * gradient / grad_norm
        logger.warning(
            f"Line search failed after {search.evaluations} evaluations; "
            f"taking a steepest-descent step of length {fallback:g}"
        )
        return LbfgsStep(
            point=new_point.reshape(point.shape),
            evaluation=None,
            step=fallback,
            evaluations=search.evaluations,
            fallback=True,
        )

    s = search.point - flat_point
    y = search.evaluation.grad.reshape(-1) - gradient
    stored = memory.update(s, y, options.curvature_eps)
    return LbfgsStep(
        point=search.point.reshape(point.shape),
        evaluation=search.evaluation,
        step=search.step,
        evaluations=search.evaluations,
        stored_pair=stored,
    )


@dataclass
class LbfgsRun:
    point: np.ndarray
    evaluation: Optional[Evaluation]
    steps: int
    last: Optional[LbfgsStep] = None

    @property
    def fallback(self) -> bool:
        return self.last is not None and self.last.fallback


def lbfgs_iterate(
    objective: Objective,
    point: np.ndarray,
    current: Evaluation,
    memory: LbfgsMemory,
    eta: float,
    options: LbfgsOptions,
) -> LbfgsRun:
    """Up to ``options.inner_iterations`` L-BFGS steps from ``point``.

    Ends early once max|g| <= ``tolerance_grad``, once the move or the loss
    change drops below ``tolerance_change``, or after a fallback step (whose
    end point has not been evaluated).
    """
    run = LbfgsRun(point=point, evaluation=current, steps=0)
    for _ in range(options.inner_iterations):
        if float(np.abs(run.evaluation.grad).max()) <= options.tolerance_grad:
            break
        outcome = lbfgs_step(objective, run.point, run.evaluation, memory, eta, options)
        previous = run
        run = LbfgsRun(point=outcome.point, evaluation=outcome.evaluation, steps=run.steps + 1, last=outcome)
        if outcome.fallback:
            break
        moved = float(np.abs(outcome.point - previous.point).max())
        change = abs(previous.evaluation.loss - outcome.evaluation.loss)
        if moved <= options.tolerance_change or change < options.tolerance_change:
            break
    return run


def minimize(
    objective: Objective,
    start: np.ndarray,
    iterations: int,
    eta: float = 1.0,
    options: Optional[LbfgsOptions] = None,
) -> Tuple[np.ndarray, List[float]]:
    """Run ``iterations`` L-BFGS steps; returns the final point and the loss before each step."""
    options = options or LbfgsOptions()
    memory = LbfgsMemory(options.history_size)
    point = np.array(start, dtype=np.float64)
    current = objective(point)
    losses: List[float] = []
    for _ in range(iterations):
        losses.append(current.loss)
        outcome = lbfgs_step(objective, point, current, memory, eta, options)
        point = outcome.point
        current = outcome.evaluation if outcome.evaluation is not None else objective(point)
    return point, losses
