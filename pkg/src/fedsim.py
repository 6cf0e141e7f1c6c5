"""
Single-round FedSGD simulation.

Clients compute the mean loss gradient over their local samples and the
server applies the sample-weighted average as one descent step. The attack
path captures a batch-1 client's update as its target gradient.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.autodiff import GradientSet, Tensor
from src.errors import EmptyDatasetError, MisalignedGradientError
from src.models import Model, weight_gradients

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientDataset:
    """Local samples held by one client: (H x W x C image, label) pairs."""

    client_id: str
    samples: Tuple[Tuple[np.ndarray, int], ...]

    def __post_init__(self):
        if len(self.samples) < 1:
            raise EmptyDatasetError(f"client {self.client_id!r} has no samples")

    @property
    def n_k(self) -> int:
        return len(self.samples)


class AggregationSpec(BaseModel):
    """Server-side parameters of one FedSGD round."""

    alpha: float = Field(gt=0, description="Global learning rate")
    clients: List[str] = Field(min_length=1, description="Ids of the selected clients")
    round_index: int = Field(default=0, ge=0)


def client_compute_update(model: Model, dataset: ClientDataset) -> GradientSet:
    """Mean weight gradient over the client's samples."""
    per_sample = [
        weight_gradients(model, Tensor(image), label, build_graph=False) for image, label in dataset.samples
    ]
    if len(per_sample) == 1:
        return per_sample[0]
    names = per_sample[0].names
    averaged = []
    for position in range(len(names)):
        stacked = np.stack([gradients.tensors[position].data for gradients in per_sample])
        averaged.append(stacked.sum(axis=0) / len(per_sample))
    return GradientSet.from_arrays(names, averaged)


def capture_target_gradient(model: Model, image: np.ndarray, label: int, client_id: str = "victim") -> GradientSet:
    """The update a batch-1 client shares, exactly as the server receives it."""
    return client_compute_update(model, ClientDataset(client_id, ((np.asarray(image), int(label)),)))


def _check_alignment(model: Model, gradients: GradientSet) -> None:
    expected = tuple((name, array.shape) for name, array in model.parameters)
    actual = tuple(zip(gradients.names, gradients.shapes))
    if expected != actual:
        raise MisalignedGradientError(f"update {list(actual)} does not match model parameters {list(expected)}")


def server_aggregate(model: Model, updates: Sequence[Tuple[GradientSet, int]], alpha: float) -> Model:
    """W <- W - alpha * sum_k (n_k / n) * grad_k. Returns a new model."""
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    total = sum(int(n_k) for _, n_k in updates)
    if total <= 0:
        raise EmptyDatasetError("aggregation needs at least one sample across clients")
    for gradients, _ in updates:
        _check_alignment(model, gradients)

    new_weights = []
    for position, (_, weight) in enumerate(model.parameters):
        step = np.zeros_like(weight)
        for gradients, n_k in updates:
            step += (n_k / total) * gradients.tensors[position].data
        new_weights.append(weight - alpha * step)
    return model.with_weights(new_weights)


def run_round(model: Model, clients: Dict[str, ClientDataset], spec: AggregationSpec) -> Model:
    """One FedSGD round over the selected clients."""
    missing = [client_id for client_id in spec.clients if client_id not in clients]
    if missing:
        raise KeyError(f"unknown clients {missing}")
    updates = []
    for client_id in spec.clients:
        dataset = clients[client_id]
        updates.append((client_compute_update(model, dataset), dataset.n_k))
    logger.info(f"Round {spec.round_index}: aggregated {len(updates)} client update(s)")
    return server_aggregate(model, updates, spec.alpha)
