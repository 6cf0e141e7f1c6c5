"""
Gradient-matching reconstruction with early stopping.

Given the gradient a batch-1 client shared, the attacker infers the label
from the output-layer gradient, then optimizes a Gaussian dummy image so the
model's gradient on it matches the shared one. The squared distance between
the two gradient sets is the attack loss; a stop controller watches it after
every update.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.autodiff import GradientSet, Tensor, add, grad, square, sub, sum_all
from src.errors import (
    AttackAborted,
    AutodiffError,
    ControllerError,
    DegenerateGradientError,
    MisalignedGradientError,
)
from src.models import Model, weight_gradients
from src.optim import Evaluation, LbfgsMemory, LbfgsOptions, lbfgs_iterate
from src.stopping import ControllerSpec, StopController, build_controller

logger = logging.getLogger(__name__)

StopCause = Literal["threshold", "plateau", "exhausted", "error"]


class AttackConfig(BaseModel):
    """Parameters of one reconstruction run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iterations: int = Field(default=300, ge=1, description="Iteration budget N")
    learning_rate: float = Field(default=1.0, gt=0, description="Attack learning rate eta")
    optimizer: Literal["sgd", "lbfgs"] = "lbfgs"
    dummy_seed: int = Field(default=0, ge=0)
    lbfgs: LbfgsOptions = LbfgsOptions()
    controller: ControllerSpec = ControllerSpec()
    snapshot_every: int = Field(default=0, ge=0, description="Keep x' every k iterations; 0 disables")


@dataclass
class AttackState:
    x: np.ndarray
    label: int
    iteration: int = 0
    loss: Optional[float] = None
    dummy_gradients: Optional[GradientSet] = None
    memory: Optional[LbfgsMemory] = None
    diagnostics: List[str] = field(default_factory=list)


@dataclass
class AttackResult:
    x: np.ndarray
    label: int
    iterations: int
    loss_history: List[float]
    duration_s: float
    cause: StopCause
    dummy_seed: int = 0
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    diagnostics: List[str] = field(default_factory=list)


class GradientMatchingObjective:
    """Dist(x') = sum over parameters of |grad_W(x') - target|^2.

    Args:
        gradient_fn: Maps a dummy image to its gradient set. It must build the
            graph back to the image so Dist can be differentiated in x'.
        target: The shared gradient being matched.
    """

    def __init__(self, gradient_fn: Callable[[Tensor], GradientSet], target: GradientSet):
        self.gradient_fn = gradient_fn
        self.target = target.detached()

    @classmethod
    def for_model(cls, model: Model, target: GradientSet, label: int) -> "GradientMatchingObjective":
        return cls(lambda image: weight_gradients(model, image, label, build_graph=True), target)

    def distance(self, image: Tensor) -> Tuple[Tensor, GradientSet]:
        dummy = self.gradient_fn(image)
        return gradient_distance(dummy, self.target), dummy

    def __call__(self, x: np.ndarray) -> Evaluation:
        leaf = Tensor(x, requires_grad=True, name="dummy")
        dist, dummy = self.distance(leaf)
        (grad_x,) = grad(dist, [leaf])
        return Evaluation(dist.item(), grad_x.numpy(), dummy.detached())


def infer_label(grads: GradientSet) -> int:
    """Read the true label off the output-layer gradient (last entry).

    Under softmax cross-entropy with non-negative features, the true class's
    row points opposite to every other row, so its dot product with each
    other row is <= 0. When exactly one row passes that test it is returned;
    otherwise the row with the smallest sum is.
    """
    rows = grads.tensors[-1].data
    rows = rows.reshape(rows.shape[0], -1)
    if not np.any(rows):
        raise DegenerateGradientError("output-layer gradient is identically zero")
    gram = rows @ rows.T
    off_diagonal = ~np.eye(rows.shape[0], dtype=bool)
    passing = [i for i in range(rows.shape[0]) if np.all(gram[i][off_diagonal[i]] <= 0)]
    if len(passing) == 1:
        return int(passing[0])
    logger.debug(f"Sign test inconclusive ({len(passing)} candidates); using row sums")
    return int(np.argmin(rows.sum(axis=1)))


def init_dummy(shape, seed: int) -> Tensor:
    """Standard-normal dummy image from a seeded generator."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(tuple(shape)), name="dummy")


def gradient_distance(dummy: GradientSet, target: GradientSet) -> Tensor:
    """Squared Euclidean distance between two aligned gradient sets."""
    if dummy.names != target.names or dummy.shapes != target.shapes:
        raise MisalignedGradientError(
            f"dummy gradients {list(zip(dummy.names, dummy.shapes))} do not match "
            f"target {list(zip(target.names, target.shapes))}"
        )
    total = None
    for (_, mine), (_, theirs) in zip(dummy, target):
        term = sum_all(square(sub(mine, theirs)))
        total = term if total is None else add(total, term)
    return total


def attack_step_sgd(state: AttackState, objective: GradientMatchingObjective, eta: float) -> AttackState:
    """x' <- x' - eta * dDist/dx'. The recorded loss is Dist before the update."""
    evaluation = objective(state.x)
    return replace(
        state,
        x=state.x - eta * evaluation.grad,
        iteration=state.iteration + 1,
        loss=evaluation.loss,
        dummy_gradients=evaluation.payload,
    )


def attack_step_lbfgs(
    state: AttackState,
    objective: GradientMatchingObjective,
    eta: float,
    options: Optional[LbfgsOptions] = None,
) -> AttackState:
    """One attack iteration of L-BFGS on Dist(x').

    An iteration is one optimizer step of up to ``options.inner_iterations``
    L-BFGS updates. The recorded loss is Dist before the first of them.
    """
    options = options or LbfgsOptions()
    memory = state.memory or LbfgsMemory(options.history_size)
    current = memory.recall(state.x) or objective(state.x)
    run = lbfgs_iterate(objective, state.x, current, memory, eta, options)

    diagnostics = state.diagnostics
    if run.fallback:
        diagnostics = diagnostics + [
            f"iteration {state.iteration + 1}: line search failed after "
            f"{run.last.evaluations} evaluations, steepest-descent fallback"
        ]
        memory.forget()
    else:
        memory.remember(run.point, run.evaluation)

    return replace(
        state,
        x=run.point,
        iteration=state.iteration + 1,
        loss=current.loss,
        dummy_gradients=current.payload,
        memory=memory,
        diagnostics=diagnostics,
    )


def run_attack(
    model: Model,
    target: GradientSet,
    config: AttackConfig,
    controller: Optional[StopController] = None,
) -> AttackResult:
    """Reconstruct the sample behind ``target``.

    Args:
        model: The shared global model.
        target: Gradient captured from a batch-1 client.
        config: Iteration budget, optimizer and seeds.
        controller: Fresh stop controller; built from ``config.controller``
            when omitted.

    Raises:
        AttackAborted: A step failed numerically. ``result`` holds the
            iterations completed so far with cause ``error``.
    """
    controller = controller or build_controller(config.controller)
    if controller.observations:
        raise ControllerError("run_attack needs a fresh controller")

    started = time.perf_counter()
    label = infer_label(target)
    objective = GradientMatchingObjective.for_model(model, target, label)
    state = AttackState(x=init_dummy(model.spec.input_shape, config.dummy_seed).numpy(), label=label)
    history: List[float] = []
    snapshots: Dict[int, np.ndarray] = {}
    cause: StopCause = "exhausted"

    def result(final_cause: StopCause) -> AttackResult:
        return AttackResult(
            x=state.x.copy(),
            label=label,
            iterations=len(history),
            loss_history=list(history),
            duration_s=time.perf_counter() - started,
            cause=final_cause,
            dummy_seed=config.dummy_seed,
            snapshots=snapshots,
            diagnostics=list(state.diagnostics),
        )

    for iteration in range(1, config.max_iterations + 1):
        try:
            if config.optimizer == "sgd":
                state = attack_step_sgd(state, objective, config.learning_rate)
            else:
                state = attack_step_lbfgs(state, objective, config.learning_rate, config.lbfgs)
            history.append(state.loss)
            decision = controller.observe(state.loss)
        except (AutodiffError, ControllerError, FloatingPointError) as exc:
            logger.error(f"Attack aborted at iteration {iteration}: {exc}")
            raise AttackAborted(f"attack aborted at iteration {iteration}: {exc}", result("error"), exc)

        logger.debug(f"iteration {iteration}: loss={state.loss:.6e}")
        if config.snapshot_every and iteration % config.snapshot_every == 0:
            snapshots[iteration] = state.x.copy()
        if decision.stop:
            cause = decision.cause
            break

    if config.snapshot_every and history:
        snapshots.setdefault(len(history), state.x.copy())
    return result(cause)
