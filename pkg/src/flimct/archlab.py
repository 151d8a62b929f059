"""Interactive, layer-by-layer architecture construction.

The network designer proposes a candidate layer, sees its validation
accuracy/kappa, and either accepts it (the model grows by one layer) or
tries different hyperparameters.  Sessions are checkpointed to disk
after every accepted layer so the loop survives restarts.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import classify, flim
from .errors import EmptyCandidates, SpecNotEvaluated
from .flim import ConvLayer, ConvLayerSpec, FlimModel, MarkerSet
from .volcore import Volume, _atomic_write_bytes


@dataclass
class EvalReport:
    accuracy: float
    kappa: float
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "kappa": self.kappa,
                "confusion": self.confusion}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(accuracy=d["accuracy"], kappa=d["kappa"],
                   confusion=d["confusion"])


@dataclass
class ArchSession:
    marker_ids: list[str]
    validation_ids: list[str]
    accepted_layers: list[ConvLayer] = field(default_factory=list)
    history: list[tuple[ConvLayerSpec, EvalReport]] = field(default_factory=list)
    checkpoint_path: str | None = None

    def __post_init__(self):
        if set(self.marker_ids) & set(self.validation_ids):
            raise ValueError("marker and validation sets must be disjoint")

    def model(self) -> FlimModel | None:
        return FlimModel(layers=list(self.accepted_layers)) if self.accepted_layers else None

    def to_dict(self) -> dict:
        model = self.model()
        return {
            "marker_ids": self.marker_ids,
            "validation_ids": self.validation_ids,
            "accepted_model": flim.model_to_dict(model) if model else None,
            "history": [{"spec": s.to_dict(), "report": r.to_dict()}
                        for s, r in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict, checkpoint_path: str | None = None) -> "ArchSession":
        layers = []
        if d.get("accepted_model"):
            layers = flim.model_from_dict(d["accepted_model"]).layers
        history = [(ConvLayerSpec.from_dict(h["spec"]),
                    EvalReport.from_dict(h["report"])) for h in d.get("history", [])]
        return cls(marker_ids=d["marker_ids"], validation_ids=d["validation_ids"],
                   accepted_layers=layers, history=history,
                   checkpoint_path=checkpoint_path)

    def checkpoint(self) -> None:
        if self.checkpoint_path:
            payload = json.dumps(self.to_dict(), sort_keys=True).encode()
            _atomic_write_bytes(self.checkpoint_path, payload)

    @classmethod
    def load(cls, path: str) -> "ArchSession":
        with open(path) as f:
            return cls.from_dict(json.load(f), checkpoint_path=path)


def _train_candidate(session: ArchSession, spec: ConvLayerSpec,
                     volumes: Mapping[str, Volume],
                     markers: Mapping[str, MarkerSet]) -> ConvLayer:
    imgs = [volumes[vid] for vid in session.marker_ids]
    msets = [markers[vid] for vid in session.marker_ids]
    return flim.train_layer(imgs, msets, spec, prior=session.accepted_layers)


def evaluate_candidate(session: ArchSession, spec: ConvLayerSpec,
                       volumes: Mapping[str, Volume],
                       labels: Mapping[str, int],
                       markers: Mapping[str, MarkerSet],
                       train_ids: list[str],
                       svm_c: float = 1.0, svm_tol: float = 1e-4,
                       svm_seed: int = 0) -> EvalReport:
    """Score a candidate layer on the validation images without accepting it."""
    layer = _train_candidate(session, spec, volumes, markers)
    model = FlimModel(layers=session.accepted_layers + [layer])
    X = np.stack([flim.extract_descriptor(model, [volumes[vid]])
                  for vid in train_ids])
    y = np.array([labels[vid] for vid in train_ids], dtype=np.float64)
    svm = classify.train_svm(X, y, C=svm_c, tol=svm_tol, seed=svm_seed)
    Xv = np.stack([flim.extract_descriptor(model, [volumes[vid]])
                   for vid in session.validation_ids])
    yv = np.array([labels[vid] for vid in session.validation_ids])
    preds = classify.predict_batch(svm, Xv)
    cm = classify.ConfusionMatrix.from_labels(yv, preds)
    report = EvalReport(accuracy=classify.accuracy(cm),
                        kappa=classify.cohen_kappa(cm),
                        confusion=cm.counts.tolist())
    session.history.append((spec, report))
    return report


def accept_layer(session: ArchSession, spec: ConvLayerSpec,
                 volumes: Mapping[str, Volume],
                 markers: Mapping[str, MarkerSet]) -> ArchSession:
    """Train the evaluated spec for real and append it to the model."""
    if not any(s == spec for s, _ in session.history):
        raise SpecNotEvaluated(f"spec {spec} was never evaluated")
    layer = _train_candidate(session, spec, volumes, markers)
    session.accepted_layers.append(layer)
    session.checkpoint()
    return session


def select_marker_set(candidates: list[tuple[object, list[EvalReport]]]) -> int:
    """Index of the candidate with highest mean (accuracy + kappa) / 2.

    Ties go to the lowest index.
    """
    if not candidates:
        raise EmptyCandidates("no candidate marker sets")
    best_idx, best_score = 0, -np.inf
    for i, (_, reports) in enumerate(candidates):
        if not reports:
            raise EmptyCandidates(f"candidate {i} has no reports")
        acc = float(np.mean([r.accuracy for r in reports]))
        kap = float(np.mean([r.kappa for r in reports]))
        score = 0.5 * (acc + kap)
        if score > best_score:
            best_idx, best_score = i, score
    return best_idx
