"""Training objectives.

Two hinge terms act on the cross-modal similarity matrix: the ID term pulls
each in-distribution diagonal entry at least ``margin`` above the other
entries in its row, the OOD term pushes every entry of a labeled-OOD row
below ``margin``. Their sum, averaged once more over the batch, is the
contrastive loss. The classifier loss is batch-mean binary cross entropy plus
an L1 penalty on the gate activations, and the joint objective combines the
two with weight ``lam``.

Sums over "other entries" follow the 1/N batch-size normalization even where
a row contributes N-1 terms; the per-entry subgradient of max(0, x) at x = 0
is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import SimilarityMatrix

__all__ = [
    "BCE_EPS",
    "LossBreakdown",
    "naive_contrastive_loss",
    "hinge_id_loss",
    "hinge_ood_loss",
    "contrastive_loss",
    "bce",
    "classifier_loss",
    "joint_objective",
    "batch_loss",
]

# Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the log so that
# saturated sigmoids cannot produce infinities.
BCE_EPS = 1e-7


def _check_margin(margin: float) -> float:
    margin = float(margin)
    if not (0.0 <= margin <= 2.0):
        raise ValueError(f"margin must lie in [0, 2], got {margin}")
    return margin


def _index_tensor(indices: tuple[int, ...]) -> torch.Tensor:
    return torch.as_tensor(indices, dtype=torch.long)


def naive_contrastive_loss(sim: SimilarityMatrix) -> torch.Tensor:
    """Unbounded baseline: minus the ID diagonal sum plus the OOD diagonal sum.

    Kept for ablation runs only; it can be driven to -inf by scaling ID
    similarities and ignores off-diagonal structure entirely.
    """
    diag = sim.diagonal()
    id_part = diag.index_select(0, _index_tensor(sim.id_indices)).sum()
    ood_part = diag.index_select(0, _index_tensor(sim.ood_indices)).sum()
    return ood_part - id_part


def hinge_id_loss(sim: SimilarityMatrix, margin: float) -> torch.Tensor:
    """Row-wise margin violations for in-distribution pairs.

    For each ID row n, sums max(0, margin - S[n, n] + S[n, i]) over the other
    columns i != n, then divides by the batch size N.
    """
    margin = _check_margin(margin)
    ids = _index_tensor(sim.id_indices)
    if ids.numel() == 0:
        return sim.entries.new_zeros(())
    entries = sim.entries
    rows = entries.index_select(0, ids)
    own = entries.diagonal().index_select(0, ids).unsqueeze(1)
    viol = torch.relu(margin - own + rows)
    mask = torch.ones_like(viol)
    mask[torch.arange(ids.numel()), ids] = 0.0
    return (viol * mask).sum() / sim.n


def hinge_ood_loss(sim: SimilarityMatrix, margin: float) -> torch.Tensor:
    """Margin violations for labeled-OOD rows.

    Every entry of an OOD row, the self-pairing included, is pushed below
    ``margin``: sums max(0, S[k, i] - margin) over all N columns, divided by N.
    """
    margin = _check_margin(margin)
    oods = _index_tensor(sim.ood_indices)
    if oods.numel() == 0:
        return sim.entries.new_zeros(())
    rows = sim.entries.index_select(0, oods)
    return torch.relu(rows - margin).sum() / sim.n


def contrastive_loss(sim: SimilarityMatrix, margin: float) -> torch.Tensor:
    """Batch-averaged hinge contrastive loss: (ID term + OOD term) / N."""
    return (hinge_id_loss(sim, margin) + hinge_ood_loss(sim, margin)) / sim.n


def bce(y, y_hat) -> torch.Tensor:
    """Elementwise binary cross entropy with y = 1 marking in-distribution.

    Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the logs, so the
    result is finite even for saturated predictions. Broadcasting follows the
    usual tensor rules; scalars give a 0-dim tensor.
    """
    target = torch.as_tensor(y, dtype=torch.float64)
    pred = torch.as_tensor(y_hat, dtype=torch.float64)
    with torch.no_grad():
        if not bool(torch.isfinite(target).all()):
            raise ValueError("labels contain non-finite entries")
        if not bool(torch.isfinite(pred).all()):
            raise ValueError("predictions contain non-finite entries")
        if bool(((target != 0.0) & (target != 1.0)).any()):
            raise ValueError("labels must be 0 or 1")
    pred = torch.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(pred) + (1.0 - target) * torch.log1p(-pred))


def classifier_loss(
    y_hat,
    y,
    gate_img,
    gate_txt,
    gate_weight: float = 1.0,
) -> torch.Tensor:
    """Mean BCE plus the mean L1 mass of both gate activation sets.

    Args:
        y_hat: (N,) predicted ID probabilities.
        y: (N,) labels, 1 for ID and 0 for OOD.
        gate_img: (N, d) image gate activations.
        gate_txt: (N, d) text gate activations.
        gate_weight: scale on the L1 term; 1.0 reproduces the plain sum.

    The three sums share a single 1/N factor, N being the batch size.
    """
    pred = torch.as_tensor(y_hat, dtype=torch.float64)
    target = torch.as_tensor(y, dtype=torch.float64)
    gi = torch.as_tensor(gate_img, dtype=torch.float64)
    gt = torch.as_tensor(gate_txt, dtype=torch.float64)
    if pred.ndim != 1 or target.ndim != 1:
        raise ValueError("y_hat and y must be 1-D")
    n = pred.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if target.shape[0] != n or gi.shape[0] != n or gt.shape[0] != n:
        raise ValueError("y_hat, y and gate batches must have equal length")
    total = bce(target, pred).sum() + float(gate_weight) * (gi.abs().sum() + gt.abs().sum())
    return total / n


def joint_objective(l_cl, l_bc, lam: float):
    """Weighted sum l_cl + lam * l_bc; works on floats and tensors alike."""
    lam = float(lam)
    if lam < 0.0:
        raise ValueError(f"lam must be non-negative, got {lam}")
    return l_cl + lam * l_bc


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss components, all plain floats for logging.

    ``l_bc`` decomposes as ``l_bce + l_gate_l1`` and ``total`` as
    ``l_cl + lam * l_bc``; both identities are checked to 1e-9 on
    construction.
    """

    l_id: float
    l_ood: float
    l_cl: float
    l_bce: float
    l_gate_l1: float
    l_bc: float
    total: float
    margin: float
    lam: float
    n: int

    def __post_init__(self):
        for name in ("l_id", "l_ood", "l_cl", "l_bce", "l_gate_l1", "l_bc"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        def _close(actual, expected):
            return abs(actual - expected) <= 1e-9 * max(1.0, abs(expected))

        if not _close(self.l_cl, (self.l_id + self.l_ood) / self.n):
            raise ValueError("l_cl does not match (l_id + l_ood) / n")
        if not _close(self.l_bc, self.l_bce + self.l_gate_l1):
            raise ValueError("l_bc does not match l_bce + l_gate_l1")
        if not _close(self.total, self.l_cl + self.lam * self.l_bc):
            raise ValueError("total does not match l_cl + lam * l_bc")

    def as_dict(self) -> dict:
        return {
            "l_id": self.l_id,
            "l_ood": self.l_ood,
            "l_cl": self.l_cl,
            "l_bce": self.l_bce,
            "l_gate_l1": self.l_gate_l1,
            "l_bc": self.l_bc,
            "total": self.total,
            "margin": self.margin,
            "lam": self.lam,
            "n": self.n,
        }


def batch_loss(
    sim: SimilarityMatrix,
    y_hat,
    y,
    gate_img,
    gate_txt,
    margin: float,
    lam: float,
    gate_weight: float = 1.0,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Joint objective for one batch plus its logged decomposition.

    Returns the differentiable total and a float ``LossBreakdown``. The
    classifier term is always evaluated, even at lam = 0, so its trajectory
    stays visible in logs.
    """
    l_id = hinge_id_loss(sim, margin)
    l_ood = hinge_ood_loss(sim, margin)
    l_cl = (l_id + l_ood) / sim.n
    l_bc = classifier_loss(y_hat, y, gate_img, gate_txt, gate_weight=gate_weight)
    total = joint_objective(l_cl, l_bc, lam)

    n = sim.n
    target = torch.as_tensor(y, dtype=torch.float64)
    pred = torch.as_tensor(y_hat, dtype=torch.float64)
    gi = torch.as_tensor(gate_img, dtype=torch.float64)
    gt = torch.as_tensor(gate_txt, dtype=torch.float64)
    with torch.no_grad():
        l_bce = float(bce(target, pred).sum() / n)
        l_gate = float(gate_weight) * float(gi.abs().sum() + gt.abs().sum()) / n
    breakdown = LossBreakdown(
        l_id=float(l_id.detach()),
        l_ood=float(l_ood.detach()),
        l_cl=float(l_cl.detach()),
        l_bce=l_bce,
        l_gate_l1=l_gate,
        l_bc=float(l_bc.detach()),
        total=float(total.detach()),
        margin=float(margin),
        lam=float(lam),
        n=n,
    )
    return total, breakdown
