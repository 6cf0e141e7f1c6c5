"""
Early-stopping controllers for the attack loop.

Each controller watches the per-iteration gradient distance and decides
whether the attack should end:

* ``ThresholdController`` stops once the loss drops strictly below T.
* ``PlateauController`` stops after P consecutive observations that do not
  strictly improve on the best loss seen so far.
* ``HybridController`` checks the threshold rule first, then the plateau rule.
* ``NeverStopController`` runs the attack to its iteration budget.
"""

import math
from enum import Enum
from typing import ClassVar, List, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import ControllerError
from src.utils import controller_label


class ControllerKind(str, Enum):
    NEVER = "never"
    THRESHOLD = "threshold"
    PLATEAU = "plateau"
    HYBRID = "hybrid"


class StopDecision(NamedTuple):
    stop: bool
    cause: Optional[str] = None


CONTINUE = StopDecision(False, None)


class ControllerSpec(BaseModel):
    """Kind and parameters of one controller configuration."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ControllerKind = ControllerKind.NEVER
    threshold: Optional[float] = Field(default=None, gt=0)
    patience: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_parameters(self) -> "ControllerSpec":
        needs_threshold = self.kind in (ControllerKind.THRESHOLD, ControllerKind.HYBRID)
        needs_patience = self.kind in (ControllerKind.PLATEAU, ControllerKind.HYBRID)
        if needs_threshold and self.threshold is None:
            raise ValueError(f"{self.kind.value} controller needs a threshold")
        if needs_patience and self.patience is None:
            raise ValueError(f"{self.kind.value} controller needs a patience")
        if not needs_threshold and self.threshold is not None:
            raise ValueError(f"{self.kind.value} controller takes no threshold")
        if not needs_patience and self.patience is not None:
            raise ValueError(f"{self.kind.value} controller takes no patience")
        return self

    @property
    def label(self) -> str:
        return controller_label(self.kind.value, self.threshold, self.patience)


class StopController:
    """Streaming stop rule over the monitored loss.

    Subclasses implement ``_decide``; the base class owns the shared state
    (plateau bookkeeping, the sticky ``early_stop`` flag) and input checks.
    """

    kind: ClassVar[ControllerKind]

    def __init__(self, threshold: Optional[float] = None, patience: Optional[int] = None):
        self.threshold = threshold
        self.patience = patience
        self.reset()

    def reset(self) -> "StopController":
        self.wait = 0
        self.plateau_start = False
        self.best = math.inf
        self.early_stop = False
        self.observations = 0
        return self

    @property
    def spec(self) -> ControllerSpec:
        return ControllerSpec(kind=self.kind, threshold=self.threshold, patience=self.patience)

    @property
    def label(self) -> str:
        return self.spec.label

    def observe(self, loss: float) -> StopDecision:
        if self.early_stop:
            raise ControllerError("controller already stopped; reset() before observing again")
        if not math.isfinite(loss) or loss < 0:
            raise ControllerError(f"monitored loss must be finite and >= 0, got {loss}")
        self.observations += 1
        decision = self._decide(float(loss))
        if decision.stop:
            self.early_stop = True
        return decision

    def _decide(self, loss: float) -> StopDecision:
        raise NotImplementedError

    def _below_threshold(self, loss: float) -> bool:
        return loss < self.threshold

    def _trapped_on_plateau(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.wait = 0
            self.plateau_start = False
        else:
            self.wait += 1
            self.plateau_start = True
        return self.wait == self.patience and self.plateau_start

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(label={self.label!r}, wait={self.wait}, "
            f"best={self.best}, early_stop={self.early_stop})"
        )


class NeverStopController(StopController):
    kind = ControllerKind.NEVER

    def _decide(self, loss: float) -> StopDecision:
        return CONTINUE


class ThresholdController(StopController):
    kind = ControllerKind.THRESHOLD

    def __init__(self, threshold: float):
        super().__init__(threshold=threshold)

    def _decide(self, loss: float) -> StopDecision:
        if self._below_threshold(loss):
            return StopDecision(True, "threshold")
        return CONTINUE


class PlateauController(StopController):
    kind = ControllerKind.PLATEAU

    def __init__(self, patience: int):
        super().__init__(patience=patience)

    def _decide(self, loss: float) -> StopDecision:
        if self._trapped_on_plateau(loss):
            return StopDecision(True, "plateau")
        return CONTINUE


class HybridController(StopController):
    kind = ControllerKind.HYBRID

    def __init__(self, threshold: float, patience: int):
        super().__init__(threshold=threshold, patience=patience)

    def _decide(self, loss: float) -> StopDecision:
        if self._below_threshold(loss):
            return StopDecision(True, "threshold")
        if self._trapped_on_plateau(loss):
            return StopDecision(True, "plateau")
        return CONTINUE


def build_controller(spec: ControllerSpec) -> StopController:
    """Fresh controller for ``spec``."""
    if spec.kind is ControllerKind.THRESHOLD:
        return ThresholdController(spec.threshold)
    if spec.kind is ControllerKind.PLATEAU:
        return PlateauController(spec.patience)
    if spec.kind is ControllerKind.HYBRID:
        return HybridController(spec.threshold, spec.patience)
    return NeverStopController()


def suggest_thresholds(
    loss_histories: Sequence[Sequence[float]],
    successes: Sequence[bool],
    count: int = 4,
) -> List[float]:
    """Decade-spaced thresholds calibrated on pilot runs.

    Starts at the decade above the median final loss of the successful pilot
    runs (all runs when none succeeded) and descends ``count`` decades.
    """
    if count < 1:
        raise ControllerError("count must be at least 1")
    if len(loss_histories) != len(successes):
        raise ControllerError("one success flag is needed per loss history")
    finals = [float(history[-1]) for history in loss_histories if len(history)]
    flags = [bool(flag) for history, flag in zip(loss_histories, successes) if len(history)]
    if not finals:
        raise ControllerError("no pilot loss histories to calibrate on")
    chosen = [loss for loss, ok in zip(finals, flags) if ok] or finals
    median = max(float(np.median(chosen)), 1e-300)
    top = math.floor(math.log10(median)) + 1
    return [float(f"1e{top - step}") for step in range(count)]
