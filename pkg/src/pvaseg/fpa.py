"""Feature prototype analysis: a learned vessel embedding and its kernel.

The prototype is the mean penultimate-layer embedding of annotated vessel
voxels, optionally fine-tuned on those same voxels with the backbone frozen.
At test time a radial-basis kernel exp(-||Z - rho||^2) turns the feature map
into a similarity volume, which is fused with the convolutional logits to
bridge gaps the conv head leaves in thin structures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnkit import FeatureMap
from .volgrid import ConfigError, PvaLabel, ValidationError, Volume

FUSION_POLICIES = ("max", "mean", "conv_only", "fpa_only")

# floor applied inside the log of the fine-tuning loss; distances beyond
# -ln(floor) stop contributing gradient
O_FLOOR = 1e-12


@dataclass(frozen=True)
class Prototype:
    """Vessel-class embedding vector of the backbone's penultimate width."""

    rho: np.ndarray
    fine_tuned: bool = False
    source: str = "mean_init"

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float32)
        if rho.ndim != 1 or rho.size == 0:
            raise ValidationError("prototype must be a nonempty 1-D vector")
        if not np.isfinite(rho).all():
            raise ValidationError("prototype contains non-finite values")
        if self.source not in ("mean_init", "fine_tuned"):
            raise ValidationError(f"unknown prototype source {self.source!r}")
        object.__setattr__(self, "rho", rho)


def labeled_embeddings(Z: FeatureMap, pva: PvaLabel) -> np.ndarray:
    """Pull the (n_labeled, C) embedding rows under the annotation mask."""
    if Z.dims != pva.mask.dims:
        raise ValidationError(
            f"feature dims {Z.dims} do not match label dims {pva.mask.dims}")
    labeled = pva.mask.data == 1
    return Z.data[:, labeled].T.astype(np.float32)


def init_prototype(stream) -> Prototype:
    """Mean embedding over annotated voxels across a (FeatureMap, PvaLabel)
    stream; accumulates in float64 so volume order cannot perturb the mean
    beyond rounding of the final cast."""
    total = None
    count = 0
    for Z, pva in stream:
        emb = labeled_embeddings(Z, pva)
        if total is None:
            total = np.zeros(emb.shape[1], dtype=np.float64)
        total += emb.astype(np.float64).sum(axis=0)
        count += emb.shape[0]
    if count == 0 or total is None:
        raise ValidationError("no annotated voxels in the feature stream")
    return Prototype(rho=(total / count).astype(np.float32))


def similarity_map(Z: FeatureMap, proto: Prototype,
                   spacing=(1.0, 1.0, 1.0)) -> Volume:
    """exp(-squared distance) to the prototype at every voxel, in (0, 1]."""
    if Z.channels != proto.rho.size:
        raise ValidationError(
            f"feature map has {Z.channels} channels, prototype expects "
            f"{proto.rho.size}")
    diff = Z.data.astype(np.float64) - proto.rho.astype(np.float64) \
        .reshape(-1, 1, 1, 1)
    # accumulate the distance in float64: the exponent amplifies any
    # round-off in d2 into relative error of the output
    d2 = np.einsum("chwd,chwd->hwd", diff, diff)
    return Volume.from_array(np.exp(-d2).astype(np.float32),
                             spacing=spacing, role="logit")


def fpa_loss(O: Volume, pva: PvaLabel, Z: FeatureMap | None = None,
             proto: Prototype | None = None):
    """Mean negative log similarity over annotated voxels.

    Minimizing pulls the prototype toward annotated embeddings.  The value
    needs only (O, pva); the gradient with respect to rho additionally needs
    the (Z, proto) pair that produced O, and is None when they are omitted.
    Voxels whose similarity hit the numerical floor contribute no gradient.
    """
    if O.dims != pva.mask.dims:
        raise ValidationError(
            f"similarity dims {O.dims} do not match label dims {pva.mask.dims}")
    labeled = pva.mask.data == 1
    n = int(labeled.sum())
    if n == 0:
        raise ValidationError("label has no annotated voxels")
    o = O.data[labeled].astype(np.float64)
    floored = o < O_FLOOR
    loss = float(-np.log(np.maximum(o, O_FLOOR)).sum() / n)

    grad = None
    if Z is not None and proto is not None:
        z = labeled_embeddings(Z, pva).astype(np.float64)
        live = ~floored
        # d(-log O_i)/d rho = 2 (rho - z_i) for voxels above the floor
        diff = proto.rho.astype(np.float64)[None, :] - z[live]
        grad = (2.0 * diff.sum(axis=0) / n).astype(np.float64)
    return loss, grad


def fine_tune(proto: Prototype, embeddings: np.ndarray, steps: int = 200,
              lr: float = 0.1):
    """Gradient descent of the prototype on cached annotated embeddings.

    Plain descent, not Adam: the objective is quadratic in rho near the
    mean-embedding start, and normalized optimizers turn the near-zero
    gradient there into fixed-size oscillations.  With lr <= 0.5 descent
    contracts toward the optimum, so the recorded loss curve never rises.
    Returns (fine-tuned Prototype, per-step loss list, loss at start).
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValidationError("embeddings must be a nonempty (n, C) array")
    if z.shape[1] != proto.rho.size:
        raise ValidationError("embedding width does not match prototype")
    cap = -np.log(O_FLOOR)
    rho = proto.rho.astype(np.float64).copy()

    def loss_and_grad(r):
        d2 = ((z - r[None, :]) ** 2).sum(axis=1)
        live = d2 < cap
        loss = float(np.minimum(d2, cap).mean())
        g = 2.0 * (r[None, :] - z[live]).sum(axis=0) / z.shape[0]
        return loss, g

    start, _ = loss_and_grad(rho)
    losses = []
    for _ in range(int(steps)):
        _, g = loss_and_grad(rho)
        rho -= lr * g
        losses.append(loss_and_grad(rho)[0])
    return (Prototype(rho=rho.astype(np.float32), fine_tuned=True,
                      source="fine_tuned"), losses, start)


def fuse_at_test(conv_logit: Volume, O: Volume, policy: str = "max") -> Volume:
    """Combine conv logits with the similarity map, voxelwise."""
    if policy not in FUSION_POLICIES:
        raise ConfigError(f"unknown fusion policy {policy!r}; "
                          f"choose from {FUSION_POLICIES}")
    if conv_logit.dims != O.dims:
        raise ValidationError(
            f"logit dims {conv_logit.dims} do not match similarity dims {O.dims}")
    if policy == "conv_only":
        return conv_logit
    if policy == "fpa_only":
        return O
    if policy == "max":
        fused = np.maximum(conv_logit.data, O.data)
    else:
        fused = (conv_logit.data + O.data) * np.float32(0.5)
    return Volume.from_array(fused.astype(np.float32),
                             spacing=conv_logit.spacing, role="logit")
