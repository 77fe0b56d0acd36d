"""Loss terms for bidirectional stain translation: least-squares adversarial,
cycle, identity, structural (edge MSE), registered (MAE), and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda1: float = 1.0   # adversarial
    lambda2: float = 10.0  # cycle (forward + backward)
    lambda3: float = 5.0   # identity
    lambda4: float = 5.0   # structural
    lambda5: float = 10.0  # registered MAE, applied only on registered batches

    def __post_init__(self) -> None:
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_d: float = 0.0
    cycle_f: float = 0.0
    cycle_b: float = 0.0
    identity: float = 0.0
    structural: float = 0.0
    registered: float = 0.0
    total: float = 0.0

    FIELDS = ("adv_g", "adv_d", "cycle_f", "cycle_b", "identity",
              "structural", "registered", "total")

    def row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def structural_loss(input_edges: torch.Tensor, generated_edges: torch.Tensor) -> torch.Tensor:
    """MSE between the source image's edge map and the generator's predicted edges."""
    _check_shapes(input_edges, generated_edges)
    return F.mse_loss(generated_edges, input_edges)


def adversarial_loss(scores: torch.Tensor, target_real: bool) -> torch.Tensor:
    """Least-squares GAN loss: mean of (score - t)^2 with t in {0, 1}."""
    target = torch.ones_like(scores) if target_real else torch.zeros_like(scores)
    return F.mse_loss(scores, target)


def cycle_loss(original4: torch.Tensor, reconstructed4: torch.Tensor) -> torch.Tensor:
    """L1 over all four channels (RGB + edge), equal channel weighting."""
    _check_shapes(original4, reconstructed4)
    return F.l1_loss(reconstructed4, original4)


def identity_loss(target4: torch.Tensor, mapped4: torch.Tensor) -> torch.Tensor:
    """L1 between a target-domain image and the generator's mapping of it."""
    _check_shapes(target4, mapped4)
    return F.l1_loss(mapped4, target4)


def registered_loss(generated_rgb: torch.Tensor, ground_truth_rgb: torch.Tensor) -> torch.Tensor:
    """MAE between generated and registered ground-truth stains."""
    _check_shapes(generated_rgb, ground_truth_rgb)
    return F.l1_loss(generated_rgb, ground_truth_rgb)


def total_loss(adv: float | torch.Tensor, cycle_f: float | torch.Tensor,
               cycle_b: float | torch.Tensor, identity: float | torch.Tensor,
               structural: float | torch.Tensor, weights: LossWeights,
               registered: float | torch.Tensor = 0.0) -> float | torch.Tensor:
    """Weighted combination of the generator objective terms."""
    terms = (adv, cycle_f, cycle_b, identity, structural, registered)
    for t in terms:
        val = float(t) if not torch.is_tensor(t) else t
        if torch.is_tensor(val):
            if not torch.isfinite(val).all():
                raise FloatingPointError("non-finite loss component")
        elif not (val == val and abs(val) != float("inf")):
            raise FloatingPointError("non-finite loss component")
    return (weights.lambda1 * adv
            + weights.lambda2 * (cycle_f + cycle_b)
            + weights.lambda3 * identity
            + weights.lambda4 * structural
            + weights.lambda5 * registered)
