"""Pseudo-label propagation with a confidence-gated moving average.

Pseudo labels start from the local model's propagated logits, with the
annotated voxels pinned to 1.  Each self-training round proposes an update
from the global model's current logits; it is accepted only when the mean
logit over annotated voxels (the confidence degree) strictly exceeds every
confidence seen before for that volume.  Accepted updates blend new logits
into the pseudo label with the confidence as mixing weight.

The gate history is per volume; per-volume histories are exported as CSV
(iteration,eta,accepted) and double as resume state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .volgrid import PvaLabel, ValidationError, Volume


@dataclass(frozen=True)
class EtaRecord:
    iteration: int
    eta: float
    accepted: bool


@dataclass(frozen=True)
class PseudoLabelState:
    y_pl: Volume
    eta_history: tuple[EtaRecord, ...] = ()
    volume_id: str = ""

    def __post_init__(self):
        if self.y_pl.role != "pseudo_label":
            raise ValidationError(
                f"pseudo label volume has role {self.y_pl.role!r}")

    def best_eta(self) -> float:
        # gate threshold: the maximum over every recorded eta, accepted or not
        return max((r.eta for r in self.eta_history), default=-np.inf)


def _check_dims(vol: Volume, pva: PvaLabel, what: str):
    if vol.dims != pva.mask.dims:
        raise ValidationError(
            f"{what} dims {vol.dims} do not match label dims {pva.mask.dims}")


def init_pseudo(logit1: Volume, pva: PvaLabel,
                volume_id: str = "") -> PseudoLabelState:
    """Start a pseudo label: 1 on annotated voxels, propagated logit elsewhere."""
    _check_dims(logit1, pva, "logit")
    labeled = pva.mask.data == 1
    y = np.where(labeled, np.float32(1.0), logit1.data.astype(np.float32))
    vol = Volume.from_array(y, spacing=logit1.spacing, role="pseudo_label")
    return PseudoLabelState(y_pl=vol, volume_id=volume_id)


def confidence(logit2: Volume, pva: PvaLabel) -> float:
    """Mean logit over annotated voxels; always lands in [0, 1]."""
    _check_dims(logit2, pva, "logit")
    labeled = pva.mask.data == 1
    n = int(labeled.sum())
    if n == 0:
        raise ValidationError("label has no annotated voxels")
    return float(logit2.data[labeled].astype(np.float64).sum() / n)


def try_update(state: PseudoLabelState, logit2: Volume, pva: PvaLabel,
               t: int, clamp_labeled: bool = True):
    """Gate-and-blend one update proposal.

    Returns (new state, accepted).  On rejection the pseudo-label volume is
    the same object as before, so rejected rounds are bit-identical by
    construction.  clamp_labeled re-pins annotated voxels to 1 after an
    accepted blend; disable only for comparison studies.
    """
    _check_dims(logit2, pva, "logit")
    eta = confidence(logit2, pva)
    accepted = eta > state.best_eta()
    record = EtaRecord(iteration=int(t), eta=eta, accepted=accepted)
    if not accepted:
        return PseudoLabelState(
            y_pl=state.y_pl,
            eta_history=state.eta_history + (record,),
            volume_id=state.volume_id), False

    w = np.float32(eta)
    y = w * logit2.data + (np.float32(1.0) - w) * state.y_pl.data
    np.clip(y, 0.0, 1.0, out=y)
    if clamp_labeled:
        y[pva.mask.data == 1] = 1.0
    vol = Volume.from_array(y.astype(np.float32), spacing=logit2.spacing,
                            role="pseudo_label")
    return PseudoLabelState(
        y_pl=vol,
        eta_history=state.eta_history + (record,),
        volume_id=state.volume_id), True


def write_eta_csv(state: PseudoLabelState, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "eta", "accepted"])
        for r in state.eta_history:
            w.writerow([r.iteration, repr(r.eta), int(r.accepted)])


def read_eta_csv(path) -> tuple[EtaRecord, ...]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)  # header
        for row in reader:
            out.append(EtaRecord(iteration=int(row[0]), eta=float(row[1]),
                                 accepted=bool(int(row[2]))))
    return tuple(out)
