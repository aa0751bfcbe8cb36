"""Top-k detection scoring, leave-one-out validation, and the ablation ladder.

A subject counts as detected when at least one of its k highest-probability
grid patches overlaps the ground-truth ellipsoid mask; the Top-k score is
the detected fraction over validation subjects. Leave-one-out holds each
labeled subject out in turn, trains on the rest (controls always join the
negative pool, and with ensembling only the held-out subject's
localization group trains), and scores the held-out subject's full grid.

The ablation ladder is cumulative:

  a  hard labels, 16x32 patches, axial only
  b  a + soft labels
  c  b + 24x40 patches
  d  c + autoencoder pretraining
  e  d + specific-to-localization ensemble
  f  e + coronal view
  g  f + sagittal view

Every stochastic choice derives its seed from (base seed, held-out
subject id), so fold order, parallel execution, and re-runs cannot change
a report.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import audit
from .cohort import SubjectData
from .models import (
    AutoencoderModel,
    EncoderConfig,
    TrainConfig,
    dataset_checksum,
    predict_batch,
    pretrain_autoencoder,
    train_classifier,
)
from .patching import (
    PatchParams,
    PatchSpec,
    build_dataset,
    extract_stack,
    subject_grid_with_overlaps,
)
from .seeding import checksum_lines, derive_seed

logger = logging.getLogger(__name__)

ABLATION_IDS = ("a", "b", "c", "d", "e", "f", "g")


@dataclass(frozen=True)
class AblationConfig:
    """One model configuration; the ladder rows are cumulative."""

    id: str
    labeling: str
    patch_size: tuple[int, int]
    pretrain: bool
    ensemble: bool
    views: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.labeling not in ("hard", "soft"):
            raise ValueError("labeling must be 'hard' or 'soft'")
        object.__setattr__(self, "patch_size", (int(self.patch_size[0]), int(self.patch_size[1])))

    @classmethod
    def ladder(cls) -> list["AblationConfig"]:
        a = cls("a", "hard", (16, 32), False, False, ("axial",))
        b = dataclasses.replace(a, id="b", labeling="soft")
        c = dataclasses.replace(b, id="c", patch_size=(24, 40))
        d = dataclasses.replace(c, id="d", pretrain=True)
        e = dataclasses.replace(d, id="e", ensemble=True)
        f = dataclasses.replace(e, id="f", views=("axial", "coronal"))
        g = dataclasses.replace(f, id="g", views=("axial", "coronal", "sagittal"))
        return [a, b, c, d, e, f, g]

    @classmethod
    def by_id(cls, config_id: str) -> "AblationConfig":
        for cfg in cls.ladder():
            if cfg.id == config_id:
                return cfg
        raise ValueError(f"unknown ablation config '{config_id}' (expected one of {ABLATION_IDS})")


def params_for_config(
    cfg: AblationConfig, stride_z: int = 1, min_brain_fraction: float = 0.5
) -> PatchParams:
    """Patch parameters implied by an ablation config (strides at defaults)."""
    return PatchParams(
        h=cfg.patch_size[0],
        w=cfg.patch_size[1],
        stride_z=stride_z,
        min_brain_fraction=min_brain_fraction,
        views=cfg.views,
    )


@dataclass
class SubjectScores:
    """Per-patch probabilities and lesion overlaps for one subject."""

    subject_id: str
    entries: list[tuple[PatchSpec, float, int]]


@dataclass
class TopKReport:
    """Detection outcome of one configuration under LOO validation."""

    config_id: str
    k: int
    per_subject: dict[str, bool]
    score: float
    base_seed: int | None = None
    fold_audits: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "config_id": self.config_id,
            "k": self.k,
            "score": self.score,
            "per_subject": self.per_subject,
            "base_seed": self.base_seed,
            "fold_audits": self.fold_audits,
            "meta": self.meta,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TopKReport":
        d = json.loads(Path(path).read_text())
        return cls(
            config_id=d["config_id"],
            k=d["k"],
            per_subject=dict(d["per_subject"]),
            score=d["score"],
            base_seed=d.get("base_seed"),
            fold_audits=list(d.get("fold_audits", [])),
            meta=dict(d.get("meta", {})),
        )


def top_k_success(s: SubjectScores, k: int) -> bool:
    """True when any of the k most probable patches overlaps the lesion.

    Patches are ranked by descending probability; ties fall back to the
    canonical spatial order (z, y0, x0 ascending), so permuting the input
    list never changes the outcome.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not s.entries:
        raise ValueError(f"subject '{s.subject_id}' has an empty patch list")
    ranked = sorted(s.entries, key=lambda e: (-e[1], e[0].z, e[0].y0, e[0].x0))
    return any(overlap > 0 for _, _, overlap in ranked[: min(k, len(ranked))])


def top_k_score(all_scores: Sequence[SubjectScores], k: int, config_id: str = "") -> TopKReport:
    """Average per-subject Top-k success into a report."""
    if len(all_scores) == 0:
        raise ValueError("need at least one subject")
    per_subject = {s.subject_id: top_k_success(s, k) for s in all_scores}
    score = sum(per_subject.values()) / len(per_subject)
    return TopKReport(config_id=config_id, k=k, per_subject=per_subject, score=score)


def _grid_identity_checksum(specs: Sequence[PatchSpec]) -> str:
    return checksum_lines(s.identity() for s in specs)


def _pretrain_stacks(
    unlabeled: Sequence[SubjectData],
    params: PatchParams,
    max_stacks: int | None,
    seed: int,
    grid_cache: dict | None,
) -> list[np.ndarray]:
    stacks: list[np.ndarray] = []
    for subject in unlabeled:
        specs, _ = subject_grid_with_overlaps(
            subject.volume, subject.brain_mask, None, params, grid_cache
        )
        stacks.extend(extract_stack(subject.volume, s, params) for s in specs)
    if max_stacks is not None and len(stacks) > max_stacks:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(stacks), size=max_stacks, replace=False)
        stacks = [stacks[i] for i in sorted(keep)]
    return stacks


def run_loo(
    subjects: Sequence[SubjectData],
    unlabeled: Sequence[SubjectData],
    controls: Sequence[SubjectData],
    cfg: AblationConfig,
    k: int,
    t: TrainConfig,
    *,
    stride_z: int = 1,
    min_brain_fraction: float = 0.5,
    neg_ratio: float = 1.0,
    pretrain_epochs: int | None = None,
    max_pretrain_stacks: int | None = None,
    grid_cache: dict | None = None,
) -> TopKReport:
    """Leave-one-out validation of one configuration.

    Each labeled subject is held out in turn; the model (or the ensemble
    member of the held-out subject's localization group) trains on the
    remaining labeled subjects plus controls, pretrained on the unlabeled
    pool when the config asks for it, and every grid patch of the
    held-out subject is scored. Fold hygiene is asserted and recorded as
    patch-identity checksums in the report.
    """
    labeled = sorted(subjects, key=lambda s: s.subject_id)
    if len(labeled) < 2:
        raise ValueError("leave-one-out needs at least 2 labeled subjects")
    for s in labeled:
        if s.annotation is None or s.lesion_mask is None:
            raise ValueError(f"labeled subject '{s.subject_id}' lacks an annotation")
    groups: dict[str, list[SubjectData]] = {"temporal": [], "non_temporal": []}
    for s in labeled:
        groups[s.annotation.localization].append(s)
    if cfg.ensemble:
        for name, members in groups.items():
            if len(members) < 2:
                raise ValueError(
                    f"ensemble requested with a singleton localization group '{name}' "
                    f"({len(members)} subject(s))"
                )

    params = params_for_config(cfg, stride_z=stride_z, min_brain_fraction=min_brain_fraction)
    if grid_cache is None:
        grid_cache = {}
    enc_cfg = EncoderConfig(
        views=cfg.views,
        h=cfg.patch_size[0],
        w=cfg.patch_size[1],
        seed=derive_seed(t.seed, "model-init"),
    )

    ae: AutoencoderModel | None = None
    if cfg.pretrain:
        if len(unlabeled) == 0:
            raise ValueError("config requests pretraining but the unlabeled pool is empty")
        stacks = _pretrain_stacks(
            unlabeled,
            params,
            max_pretrain_stacks,
            derive_seed(t.seed, "pretrain-sample"),
            grid_cache,
        )
        ae_t = dataclasses.replace(t, seed=derive_seed(t.seed, "pretrain"), epochs=pretrain_epochs)
        ae = pretrain_autoencoder(stacks, enc_cfg, ae_t)
        logger.info(
            "pretrained autoencoder on %d stacks: loss %.4f -> %.4f",
            len(stacks),
            ae.loss_trace[0],
            ae.loss_trace[-1],
        )

    per_subject: dict[str, bool] = {}
    fold_audits: list[dict] = []
    for held in labeled:
        if cfg.ensemble:
            train_pool = [s for s in groups[held.annotation.localization] if s is not held]
        else:
            train_pool = [s for s in labeled if s is not held]
        train_subjects = [(s.volume, s.brain_mask, s.lesion_mask) for s in train_pool]
        train_subjects += [(s.volume, s.brain_mask, None) for s in controls]

        dataset_seed = derive_seed(t.seed, held.subject_id, "dataset")
        train_seed = derive_seed(t.seed, held.subject_id, "train")
        with audit.phase("training"):
            data = build_dataset(
                train_subjects,
                params,
                labeling=cfg.labeling,
                neg_ratio=neg_ratio,
                seed=dataset_seed,
                grid_cache=grid_cache,
            )
            leaked = [p for p in data if p.spec.subject_id == held.subject_id]
            assert not leaked, f"fold hygiene violated: held-out '{held.subject_id}' in training set"
            model = train_classifier(
                data, enc_cfg, dataclasses.replace(t, seed=train_seed), init=ae
            )

        specs, overlaps = subject_grid_with_overlaps(
            held.volume, held.brain_mask, held.lesion_mask, params, grid_cache
        )
        if not specs:
            raise ValueError(f"subject '{held.subject_id}' produced no grid patches")
        stacks = np.stack([extract_stack(held.volume, s, params) for s in specs])
        probs = predict_batch(model, stacks)
        scores = SubjectScores(
            held.subject_id,
            [(s, float(p), int(o)) for s, p, o in zip(specs, probs, overlaps)],
        )
        success = top_k_success(scores, k)
        per_subject[held.subject_id] = success
        fold_audits.append(
            {
                "held_out": held.subject_id,
                "n_train_patches": len(data),
                "train_patch_checksum": dataset_checksum(data),
                "train_subject_ids": sorted({p.spec.subject_id for p in data}),
                "holdout_patch_checksum": _grid_identity_checksum(specs),
                "holdout_in_train": bool(leaked),
                "dataset_seed": dataset_seed,
                "train_seed": train_seed,
                "success": success,
            }
        )
        logger.info(
            "fold %s: %d train patches, top-%d %s",
            held.subject_id,
            len(data),
            k,
            "hit" if success else "miss",
        )

    score = sum(per_subject.values()) / len(per_subject)
    return TopKReport(
        config_id=cfg.id,
        k=k,
        per_subject=per_subject,
        score=score,
        base_seed=t.seed,
        fold_audits=fold_audits,
        meta={
            "labeling": cfg.labeling,
            "patch_size": list(cfg.patch_size),
            "pretrain": cfg.pretrain,
            "ensemble": cfg.ensemble,
            "views": list(cfg.views),
            "n_labeled": len(labeled),
            "n_unlabeled": len(unlabeled),
            "n_controls": len(controls),
            "neg_ratio": neg_ratio,
        },
    )


def run_ablation(
    subjects: Sequence[SubjectData],
    unlabeled: Sequence[SubjectData],
    controls: Sequence[SubjectData],
    configs: Sequence[AblationConfig],
    k: int,
    t: TrainConfig,
    **loo_kwargs,
) -> list[TopKReport]:
    """Run several configurations, sharing patch grids where shapes allow."""
    if len(configs) == 0:
        raise ValueError("configs must be non-empty")
    grid_cache: dict = {}
    reports = []
    for cfg in configs:
        report = run_loo(
            subjects, unlabeled, controls, cfg, k, t, grid_cache=grid_cache, **loo_kwargs
        )
        logger.info("config %s: top-%d score %.3f", cfg.id, k, report.score)
        reports.append(report)
    return reports


def write_scores_csv(reports: Sequence[TopKReport], path: str | Path) -> None:
    """Flat (config_id, score) table mirroring the ablation report layout."""
    lines = ["config_id,score"]
    lines += [f"{r.config_id},{r.score:.3f}" for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")
