"""Command-line pipeline: phantom generation, preprocessing, training,
evaluation, and reporting.

Subcommands
    generate-phantom  write a 3-class multimodal phantom cohort + manifest
    preprocess        DTI fit + affine co-registration per subject
    train             per-modality encoders, then fusion / input-agnostic heads
    evaluate          fold-held-out metrics per input condition
    report            text table + CSV summary + PNG figures

Exit codes: 0 success (including per-subject skips during preprocessing as
long as at least one subject survived), 1 when a whole stage fails, 2 for
configuration or usage errors (bad config file, missing prerequisite
checkpoints, unsupported conditions).

Work directory layout: <workdir>/{volumes,folds,checkpoints,reports}.
Every stage records a content hash of its inputs and skips itself when
nothing changed, so reruns are cheap and idempotent.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from . import __version__
from .config import ConfigInvalid, PipelineConfig, load_config
from .core import LABELS, sha256_bytes, sha256_file, stable_json
from .dataset import (
    FoldPlan,
    balance_classes,
    black_image,
    extract_slices,
    load_manifest,
    make_source,
    max_offset,
    plan_folds,
)
from .dti import DtiError, brain_mask, fit_tensor, fractional_anisotropy, mean_diffusivity
from .metrics import (
    CONDITIONS,
    ConfusionMatrix,
    accumulate,
    average_reports,
    compute_report,
    MetricsReport,
    render_table,
)
from .model import (
    FusionModel,
    FusionSample,
    PerModalityClassifier,
    TrainConfig,
    build_fusion,
    load_classifier,
    load_fusion,
    make_encoder,
    predict,
    pretrain_encoder,
    read_checkpoint_metadata,
    save_classifier,
    save_fusion,
    train_head,
)
from .nifti import NiftiError, read_dwi_series, read_nifti, write_nifti
from .phantom import generate_classification_set, make_class_specs
from .registration import RegistrationConfig, register_affine, resample

log = logging.getLogger("neurofuse")

MODALITY_KINDS = ("t1w", "fa", "md")
KINDS = MODALITY_KINDS + ("fusion", "agnostic")
KIND_TO_MODALITY = {"t1w": "T1w", "fa": "FA", "md": "MD"}
CONDITION_SLUGS = {"T1w": "t1w", "FA": "fa", "MD": "md", "T1w+DTI": "t1w_dti"}


class MissingCheckpoint(Exception):
    pass


class ConditionUnsupported(Exception):
    pass


#### preprocessed-volume index ####


@dataclass
class IndexRecord:
    """One preprocessed session: registered volumes on disk."""

    subject_id: str
    session_id: str
    label: str
    t1w_path: str
    fa_path: str
    md_path: str

    @property
    def has_t1w(self) -> bool:
        return bool(self.t1w_path)

    @property
    def has_dwi(self) -> bool:
        return bool(self.fa_path)

    def availability_group(self) -> str:
        if self.has_t1w and self.has_dwi:
            return "both"
        if self.has_t1w:
            return "t1w_only"
        return "dti_only"


INDEX_COLUMNS = ["subject_id", "session_id", "label", "t1w_path", "fa_path", "md_path"]


def _volumes_dir(config):
    return os.path.join(config.workdir, "volumes")


def write_index(rows, volumes_dir) -> str:
    path = os.path.join(volumes_dir, "index.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(INDEX_COLUMNS)
        for row in sorted(rows, key=lambda r: (r.subject_id, r.session_id)):
            writer.writerow(
                [row.subject_id, row.session_id, row.label, row.t1w_path, row.fa_path,
                 row.md_path]
            )
    return path


def load_index(volumes_dir) -> list:
    path = os.path.join(volumes_dir, "index.csv")
    if not os.path.isfile(path):
        raise MissingCheckpoint(f"no preprocessed index at {path}; run preprocess first")
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != INDEX_COLUMNS:
            raise MissingCheckpoint(f"unexpected index header in {path}: {header}")
        for row in reader:
            records.append(IndexRecord(*row))
    return records


def _resolve(volumes_dir, rel):
    return os.path.join(volumes_dir, rel) if rel else ""


#### preprocess ####


def _registration_meta(result):
    return {
        "transform": result.transform.to_json(),
        "initial_mi": result.initial_mi,
        "final_mi": result.final_mi,
        "no_improvement": result.no_improvement,
    }


def _preprocess_one(record, reference_path, config_blob):
    """Worker: one session in, written volumes + provenance out.

    config_blob is a plain dict so the function stays picklable for the
    worker pool.
    """
    registration_enabled = config_blob["registration_enabled"]
    out_dir = os.path.join(config_blob["volumes_dir"], record.subject_id, record.session_id)
    os.makedirs(out_dir, exist_ok=True)

    inputs = {}
    for name, path in (
        ("t1w", record.t1w_path),
        ("dwi", record.dwi_path),
        ("bval", record.bval_path),
        ("bvec", record.bvec_path),
    ):
        if path:
            inputs[name] = sha256_file(path)
    input_state = sha256_bytes(
        stable_json(
            {
                "inputs": inputs,
                "reference": sha256_file(reference_path) if reference_path else "",
                "registration": {
                    "enabled": registration_enabled,
                    "bins": config_blob["bins"],
                    "levels": list(config_blob["levels"]),
                },
            }
        ).encode()
    )

    provenance_path = os.path.join(out_dir, "provenance.json")
    if os.path.isfile(provenance_path):
        with open(provenance_path, encoding="utf-8") as f:
            old = json.load(f)
        if old.get("input_state") == input_state:
            return record, "skipped", _index_row(record, old)

    reg_config = RegistrationConfig(
        bins=config_blob["bins"], levels=tuple(config_blob["levels"])
    )
    provenance = {
        "subject_id": record.subject_id,
        "session_id": record.session_id,
        "label": record.label,
        "inputs": inputs,
        "outputs": {},
        "transforms": {},
        "registration_enabled": registration_enabled,
        "version": __version__,
        "input_state": input_state,
    }

    t1w = read_nifti(record.t1w_path) if record.has_t1w else None
    fa_map = md_map = None
    if record.has_dwi:
        series = read_dwi_series(record.dwi_path, record.bval_path, record.bvec_path)
        mask = brain_mask(series.mean_b0())
        field = fit_tensor(series, mask)
        fa_map = fractional_anisotropy(field).volume
        md_map = mean_diffusivity(field).volume

    if registration_enabled:
        reference = read_nifti(reference_path)
        if t1w is not None:
            result = register_affine(reference, t1w, reg_config)
            t1w = resample(t1w, result.transform, reference)
            provenance["transforms"]["t1w_to_reference"] = _registration_meta(result)
        if fa_map is not None:
            # one DWI->structural transform per session, estimated on FA and
            # reused for MD (both live on the same acquisition grid)
            target = t1w if t1w is not None else reference
            result = register_affine(target, fa_map, reg_config)
            fa_map = resample(fa_map, result.transform, target)
            md_map = resample(md_map, result.transform, target)
            provenance["transforms"]["dwi_to_t1w"] = _registration_meta(result)
    else:
        provenance["transforms"] = {"t1w_to_reference": "identity", "dwi_to_t1w": "identity"}

    for name, volume in (("t1w", t1w), ("fa", fa_map), ("md", md_map)):
        if volume is None:
            continue
        out_path = os.path.join(out_dir, f"{name}.nii.gz")
        write_nifti(volume, out_path)
        provenance["outputs"][name] = sha256_file(out_path)
    with open(provenance_path, "w", encoding="utf-8") as f:
        f.write(stable_json(provenance) + "\n")
    return record, "done", _index_row(record, provenance)


def _index_row(record, provenance) -> IndexRecord:
    rel = os.path.join(record.subject_id, record.session_id)
    outputs = provenance.get("outputs", {})
    return IndexRecord(
        subject_id=record.subject_id,
        session_id=record.session_id,
        label=record.label,
        t1w_path=os.path.join(rel, "t1w.nii.gz") if "t1w" in outputs else "",
        fa_path=os.path.join(rel, "fa.nii.gz") if "fa" in outputs else "",
        md_path=os.path.join(rel, "md.nii.gz") if "md" in outputs else "",
    )


def cmd_preprocess(config: PipelineConfig, workers: int = 1) -> int:
    records = load_manifest(config.manifest)
    volumes_dir = _volumes_dir(config)
    os.makedirs(volumes_dir, exist_ok=True)

    reference_path = config.reference
    if not reference_path:
        for r in records:
            if r.has_t1w:
                reference_path = r.t1w_path
                break
    if config.registration_enabled and not reference_path:
        log.error("no reference volume: config names none and no subject has a T1w")
        return 1

    blob = {
        "volumes_dir": volumes_dir,
        "registration_enabled": config.registration_enabled,
        "bins": config.registration_bins,
        "levels": list(config.registration_levels),
    }
    rows, failures, skips = [], 0, 0
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_preprocess_one, r, reference_path, blob) for r in records
            ]
            outcomes = []
            for r, fut in zip(records, futures):
                try:
                    outcomes.append(fut.result())
                except (NiftiError, DtiError, OSError, ValueError) as e:
                    failures += 1
                    log.warning("subject %s/%s failed: %s", r.subject_id, r.session_id, e)
    else:
        outcomes = []
        for r in records:
            try:
                outcomes.append(_preprocess_one(r, reference_path, blob))
            except (NiftiError, DtiError, OSError, ValueError) as e:
                failures += 1
                log.warning("subject %s/%s failed: %s", r.subject_id, r.session_id, e)
    for record, status, row in outcomes:
        rows.append(row)
        if status == "skipped":
            skips += 1
            log.info("unchanged, skipping %s/%s", record.subject_id, record.session_id)
    if not rows:
        log.error("preprocessing failed for all %d sessions", len(records))
        return 1
    index_path = write_index(rows, volumes_dir)
    log.info(
        "preprocessed %d sessions (%d unchanged, %d failed) -> %s",
        len(rows), skips, failures, index_path,
    )
    return 0


#### fold planning and sample assembly ####


def _plan_path(config):
    return os.path.join(config.workdir, "folds", "plan.json")


def _load_or_make_plan(config, records) -> FoldPlan:
    os.makedirs(os.path.join(config.workdir, "folds"), exist_ok=True)
    path = _plan_path(config)
    state = sha256_bytes(
        stable_json(
            {
                "subjects": sorted({r.subject_id for r in records}),
                "seed": config.seed,
                "fold_count": config.fold_count,
            }
        ).encode()
    )
    if os.path.isfile(path):
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("state") == state:
            return FoldPlan.from_json(json.dumps(doc["plan"]))
    plan = plan_folds(records, config.seed, config.fold_count)
    with open(path, "w", encoding="utf-8") as f:
        f.write(stable_json({"state": state, "plan": json.loads(plan.to_json())}) + "\n")
    for note in plan.notes:
        log.warning("fold plan: %s", note)
    return plan


def _modality_volume(record, volumes_dir, modality):
    rel = {"T1w": record.t1w_path, "FA": record.fa_path, "MD": record.md_path}[modality]
    if not rel:
        return None
    return read_nifti(_resolve(volumes_dir, rel))


def _modality_sources(records, volumes_dir, modality) -> list:
    sources = []
    for r in records:
        volume = _modality_volume(r, volumes_dir, modality)
        if volume is not None:
            sources.append(make_source(volume, modality, r.label, r.subject_id))
    return sources


def _record_images(record, volumes_dir, offset=0) -> dict:
    """modality -> SliceImage for one session at one slice offset."""
    images = {}
    for modality in ("T1w", "FA", "MD"):
        volume = _modality_volume(record, volumes_dir, modality)
        if volume is not None:
            images[modality] = extract_slices(volume, modality, record.label,
                                              record.subject_id, offset)
    return images


def _fusion_sample(record, images, require_all) -> FusionSample | None:
    if require_all and ("T1w" not in images or "FA" not in images):
        return None
    t1w = images.get("T1w") or black_image(record.label, record.subject_id)
    fa = images.get("FA") or black_image(record.label, record.subject_id)
    md = images.get("MD") or black_image(record.label, record.subject_id)
    return FusionSample(t1w, fa, md, record.label, record.subject_id)


def _balanced_fusion_samples(records, volumes_dir, tolerance, require_all) -> list:
    """Offset-balanced FusionSamples, mirroring balance_classes semantics:
    minority classes gain extra slice offsets in magnitude order (+m before
    -m, sources in record order) until within tolerance of the majority."""
    usable, volumes = [], {}
    for r in records:
        vols = {
            m: _modality_volume(r, volumes_dir, m)
            for m in ("T1w", "FA", "MD")
        }
        vols = {m: v for m, v in vols.items() if v is not None}
        if not vols:
            continue
        if require_all and not {"T1w", "FA", "MD"} <= set(vols):
            continue
        usable.append(r)
        volumes[(r.subject_id, r.session_id)] = vols

    def sample_at(r, offset):
        vols = volumes[(r.subject_id, r.session_id)]
        images = {
            m: extract_slices(v, m, r.label, r.subject_id, offset) for m, v in vols.items()
        }
        return _fusion_sample(r, images, require_all)

    out = [sample_at(r, 0) for r in usable]
    counts = {lab: sum(1 for s in out if s.label == lab) for lab in LABELS}
    majority = max(counts.values()) if counts else 0
    target = (1.0 - tolerance) * majority
    for lab in LABELS:
        have = counts[lab]
        if have >= target or have == 0:
            continue
        mine = [r for r in usable if r.label == lab]
        limits = {
            (r.subject_id, r.session_id): min(
                max_offset(v) for v in volumes[(r.subject_id, r.session_id)].values()
            )
            for r in mine
        }
        limit = max(limits.values())
        for magnitude in range(1, limit + 1):
            for off in (magnitude, -magnitude):
                for r in mine:
                    if have >= target:
                        break
                    if magnitude > limits[(r.subject_id, r.session_id)]:
                        continue
                    out.append(sample_at(r, off))
                    have += 1
            if have >= target:
                break
    return out


#### train ####


def _fold_seed(config, fold, stage) -> int:
    offsets = {"t1w": 0, "fa": 17, "md": 34, "fusion": 51, "agnostic": 68}
    return config.seed * 1009 + fold * 101 + offsets[stage]


def _train_state(config, index_hash, fold, stage, extra=()) -> str:
    doc = {
        "index": index_hash,
        "fold": fold,
        "stage": stage,
        "seed": config.seed,
        "width": config.width,
        "epochs": config.epochs,
        "head_epochs": config.head_epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "betas": list(config.betas),
        "eps": config.eps,
        "validation_fraction": config.validation_fraction,
        "balance_tolerance": config.balance_tolerance,
        "deps": list(extra),
    }
    return sha256_bytes(stable_json(doc).encode())


def _checkpoint_path(config, fold, kind):
    return os.path.join(config.workdir, "checkpoints", f"fold{fold}", f"{kind}.ckpt")


def _fold_dir(config, fold):
    return os.path.join(config.workdir, "folds", f"fold{fold}")


def _unchanged(path, state) -> bool:
    if not os.path.isfile(path):
        return False
    try:
        return read_checkpoint_metadata(path).get("input_state") == state
    except Exception:
        return False


def _write_trace(config, fold, stage, trace):
    os.makedirs(_fold_dir(config, fold), exist_ok=True)
    with open(os.path.join(_fold_dir(config, fold), f"{stage}_trace.csv"), "w",
              encoding="utf-8") as f:
        f.write(trace.to_csv())


def _classify_images(clf: PerModalityClassifier, images) -> list:
    clf.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), 32):
            batch = torch.stack(
                [torch.from_numpy(im.pixels.transpose(2, 0, 1)) for im in images[i : i + 32]]
            )
            out.extend(LABELS[int(k)] for k in clf(batch).argmax(dim=1))
    return out


def _write_fold_report(config, fold, kind, report: MetricsReport, cm: ConfusionMatrix):
    fold_dir = _fold_dir(config, fold)
    os.makedirs(fold_dir, exist_ok=True)
    slug = CONDITION_SLUGS[report.condition]
    with open(os.path.join(fold_dir, f"report_{kind}_{slug}.json"), "w",
              encoding="utf-8") as f:
        f.write(report.to_json() + "\n")
    with open(os.path.join(fold_dir, f"confusion_{kind}_{slug}.json"), "w",
              encoding="utf-8") as f:
        f.write(stable_json({"counts": cm.counts.tolist()}) + "\n")


def _train_per_modality(config, records, plan, volumes_dir, index_hash) -> int:
    trained = 0
    for fold in range(plan.fold_count):
        train_records, test_records = plan.split_records(records, fold)
        for kind in MODALITY_KINDS:
            modality = KIND_TO_MODALITY[kind]
            state = _train_state(config, index_hash, fold, kind)
            ckpt_path = _checkpoint_path(config, fold, kind)
            if _unchanged(ckpt_path, state):
                log.info("fold %d %s unchanged, skipping", fold, kind)
                continue
            sources = _modality_sources(train_records, volumes_dir, modality)
            if not sources:
                log.warning("fold %d has no %s training volumes", fold, modality)
                continue
            images = balance_classes(sources, config.balance_tolerance)
            seed = _fold_seed(config, fold, kind)
            train_config = config.train_config(epochs=config.epochs, seed=seed)
            clf, trace = pretrain_encoder(make_encoder(config.width, seed), images,
                                          train_config)
            os.makedirs(os.path.dirname(ckpt_path), exist_ok=True)
            save_classifier(
                ckpt_path,
                clf,
                {
                    "modality": modality,
                    "fold": fold,
                    "seed": seed,
                    "epoch": trace.best_epoch if trace.best_epoch is not None
                    else config.epochs - 1,
                    "input_state": state,
                },
            )
            _write_trace(config, fold, kind, trace)
            test_images = []
            for r in test_records:
                volume = _modality_volume(r, volumes_dir, modality)
                if volume is not None:
                    test_images.append(
                        extract_slices(volume, modality, r.label, r.subject_id, 0)
                    )
            if test_images:
                predictions = _classify_images(clf, test_images)
                cm = accumulate(
                    [(im.label, p) for im, p in zip(test_images, predictions)]
                )
                report = compute_report(cm, fold_id=fold, condition=modality)
                _write_fold_report(config, fold, kind, report, cm)
                log.info("fold %d %s: %d train images, test accuracy %.3f",
                         fold, modality, len(images), report.accuracy)
            trained += 1
    return trained


def _train_fused(config, records, plan, volumes_dir, index_hash, kind) -> int:
    mode = "Fusion" if kind == "fusion" else "InputAgnostic"
    require_all = kind == "fusion"
    trained = 0
    for fold in range(plan.fold_count):
        deps = []
        for enc_kind in MODALITY_KINDS:
            path = _checkpoint_path(config, fold, enc_kind)
            if not os.path.isfile(path):
                raise MissingCheckpoint(
                    f"fold {fold} {enc_kind} checkpoint missing at {path}; "
                    f"run train --mode per-modality first"
                )
            deps.append(sha256_file(path))
        state = _train_state(config, index_hash, fold, kind, extra=deps)
        ckpt_path = _checkpoint_path(config, fold, kind)
        if _unchanged(ckpt_path, state):
            log.info("fold %d %s unchanged, skipping", fold, kind)
            continue
        encoders = {}
        for enc_kind in MODALITY_KINDS:
            clf, _ = load_classifier(_checkpoint_path(config, fold, enc_kind))
            encoders[enc_kind] = clf.encoder
        train_records, _ = plan.split_records(records, fold)
        samples = _balanced_fusion_samples(
            train_records, volumes_dir, config.balance_tolerance, require_all
        )
        if not samples:
            log.warning("fold %d has no %s training samples", fold, kind)
            continue
        if kind == "agnostic":
            black = sum(1 for s in samples if s.has_black())
            log.info("fold %d agnostic: %d/%d samples carry Black substitutes",
                     fold, black, len(samples))
        seed = _fold_seed(config, fold, kind)
        model = build_fusion(encoders["t1w"], encoders["fa"], encoders["md"],
                             seed=seed, mode=mode)
        head_config = config.train_config(epochs=config.head_epochs, seed=seed)
        model, trace = train_head(model, samples, head_config)
        os.makedirs(os.path.dirname(ckpt_path), exist_ok=True)
        save_fusion(
            ckpt_path,
            model,
            {"fold": fold, "seed": seed, "epoch": config.head_epochs - 1,
             "encoder_checkpoints": deps, "input_state": state},
        )
        _write_trace(config, fold, kind, trace)
        report, cm = _evaluate_fold(config, fold, kind, "T1w+DTI", records, plan,
                                    volumes_dir, model=model)
        if report is not None:
            _write_fold_report(config, fold, kind, report, cm)
            log.info("fold %d %s: %d samples, test accuracy %.3f",
                     fold, kind, len(samples), report.accuracy)
        trained += 1
    return trained


def cmd_train(config: PipelineConfig, mode: str) -> int:
    volumes_dir = _volumes_dir(config)
    records = load_index(volumes_dir)
    if not records:
        log.error("preprocessed index is empty")
        return 1
    index_hash = sha256_file(os.path.join(volumes_dir, "index.csv"))
    plan = _load_or_make_plan(config, records)
    if mode == "per-modality":
        trained = _train_per_modality(config, records, plan, volumes_dir, index_hash)
    else:
        kind = "fusion" if mode == "fusion" else "agnostic"
        trained = _train_fused(config, records, plan, volumes_dir, index_hash, kind)
    log.info("train %s: %d stage(s) refreshed", mode, trained)
    return 0


#### evaluate ####


def _supported_conditions(kind) -> tuple:
    if kind in MODALITY_KINDS:
        return (KIND_TO_MODALITY[kind],)
    if kind == "fusion":
        return ("T1w+DTI",)
    return CONDITIONS


def _condition_sample(record, images, condition) -> FusionSample | None:
    """Test-time sample under an input condition; None = record lacks the
    condition's required modality."""
    blank = lambda: black_image(record.label, record.subject_id)
    if condition == "T1w":
        if "T1w" not in images:
            return None
        return FusionSample(images["T1w"], blank(), blank(), record.label,
                            record.subject_id)
    if condition == "FA":
        if "FA" not in images:
            return None
        return FusionSample(blank(), images["FA"], blank(), record.label,
                            record.subject_id)
    if condition == "MD":
        if "MD" not in images:
            return None
        return FusionSample(blank(), blank(), images["MD"], record.label,
                            record.subject_id)
    return _fusion_sample(record, images, require_all=False)


def _evaluate_fold(config, fold, kind, condition, records, plan, volumes_dir, model=None):
    """(MetricsReport, ConfusionMatrix) on one fold's test split, or
    (None, None) when the fold has no eligible test samples."""
    _, test_records = plan.split_records(records, fold)
    pairs = []
    if kind in MODALITY_KINDS:
        modality = KIND_TO_MODALITY[kind]
        if model is None:
            model, _ = load_classifier(_checkpoint_path(config, fold, kind))
        images = []
        for r in test_records:
            volume = _modality_volume(r, volumes_dir, modality)
            if volume is not None:
                images.append(extract_slices(volume, modality, r.label, r.subject_id, 0))
        if not images:
            return None, None
        pairs = list(zip((im.label for im in images), _classify_images(model, images)))
    else:
        if model is None:
            model, _ = load_fusion(_checkpoint_path(config, fold, kind))
        for r in test_records:
            images = _record_images(r, volumes_dir)
            if kind == "fusion" and not {"T1w", "FA", "MD"} <= set(images):
                continue
            sample = _condition_sample(r, images, condition)
            if sample is None:
                continue
            pairs.append((r.label, predict(model, sample)))
        if not pairs:
            return None, None
    cm = accumulate(pairs)
    return compute_report(cm, fold_id=fold, condition=condition), cm


def cmd_evaluate(config: PipelineConfig, kind: str, condition: str) -> int:
    volumes_dir = _volumes_dir(config)
    records = load_index(volumes_dir)
    plan = _load_or_make_plan(config, records)
    supported = _supported_conditions(kind)
    if condition == "all":
        conditions = supported
    else:
        if condition not in supported:
            raise ConditionUnsupported(
                f"checkpoint kind {kind!r} supports {list(supported)}, not {condition!r}"
            )
        conditions = (condition,)

    reports_dir = os.path.join(config.workdir, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    ckpt_hashes = []
    for fold in range(plan.fold_count):
        path = _checkpoint_path(config, fold, kind)
        if not os.path.isfile(path):
            raise MissingCheckpoint(f"fold {fold} {kind} checkpoint missing at {path}")
        ckpt_hashes.append(sha256_file(path))
    index_hash = sha256_file(os.path.join(volumes_dir, "index.csv"))

    for cond in conditions:
        slug = CONDITION_SLUGS[cond]
        state = sha256_bytes(
            stable_json({"index": index_hash, "checkpoints": ckpt_hashes,
                         "condition": cond}).encode()
        )
        report_path = os.path.join(reports_dir, f"{kind}_{slug}.json")
        state_path = os.path.join(reports_dir, f"{kind}_{slug}.state")
        if os.path.isfile(report_path) and os.path.isfile(state_path):
            with open(state_path, encoding="utf-8") as f:
                if f.read().strip() == state:
                    log.info("%s under %s unchanged, skipping", kind, cond)
                    continue
        fold_reports, summed = [], np.zeros((3, 3), dtype=np.int64)
        for fold in range(plan.fold_count):
            report, cm = _evaluate_fold(config, fold, kind, cond, records, plan,
                                        volumes_dir)
            if report is None:
                log.warning("fold %d has no test samples under %s", fold, cond)
                continue
            _write_fold_report(config, fold, kind, report, cm)
            fold_reports.append(report)
            summed += cm.counts
        if not fold_reports:
            log.error("no fold produced a report for %s under %s", kind, cond)
            return 1
        averaged = average_reports(fold_reports)
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(averaged.to_json() + "\n")
        with open(os.path.join(reports_dir, f"{kind}_{slug}_confusion.json"), "w",
                  encoding="utf-8") as f:
            f.write(stable_json({"counts": summed.tolist()}) + "\n")
        with open(state_path, "w", encoding="utf-8") as f:
            f.write(state + "\n")
        log.info("%s under %s: accuracy %.3f over %d folds",
                 kind, cond, averaged.accuracy, len(fold_reports))
    return 0


#### report ####


def _summary_rows(reports_by_condition):
    rows = []
    for cond in CONDITIONS:
        if cond not in reports_by_condition:
            continue
        report = reports_by_condition[cond]
        row = {"condition": cond, "accuracy": f"{report.accuracy:.6f}"}
        for lab in LABELS:
            m = report.per_class[lab]
            row[f"precision_{lab}"] = f"{m.precision:.6f}"
            row[f"recall_{lab}"] = f"{m.recall:.6f}"
            row[f"f1_{lab}"] = f"{m.f1:.6f}"
            row[f"undefined_{lab}"] = "|".join(m.undefined)
        rows.append(row)
    return rows


def cmd_report(config: PipelineConfig, kind: str) -> int:
    from .plots import accuracy_figure, confusion_figure, loss_figure, save_figure

    reports_dir = os.path.join(config.workdir, "reports")
    reports_by_condition = {}
    confusions = {}
    for cond in _supported_conditions(kind):
        slug = CONDITION_SLUGS[cond]
        path = os.path.join(reports_dir, f"{kind}_{slug}.json")
        if not os.path.isfile(path):
            continue
        with open(path, encoding="utf-8") as f:
            reports_by_condition[cond] = MetricsReport.from_json(f.read())
        confusion_path = os.path.join(reports_dir, f"{kind}_{slug}_confusion.json")
        if os.path.isfile(confusion_path):
            with open(confusion_path, encoding="utf-8") as f:
                confusions[cond] = np.array(json.load(f)["counts"])
    if not reports_by_condition:
        log.error("no evaluation reports for %r in %s; run evaluate first", kind,
                  reports_dir)
        return 2

    table = render_table(reports_by_condition)
    table_path = os.path.join(reports_dir, f"table_{kind}.txt")
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table)
    sys.stdout.write(table)

    rows = _summary_rows(reports_by_condition)
    csv_path = os.path.join(reports_dir, f"summary_{kind}.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    save_figure(
        accuracy_figure(reports_by_condition, title=f"{kind}: accuracy by condition"),
        os.path.join(reports_dir, f"accuracy_{kind}.png"),
    )
    for cond, counts in confusions.items():
        save_figure(
            confusion_figure(counts, title=f"{kind} under {cond}"),
            os.path.join(reports_dir, f"confusion_{kind}_{CONDITION_SLUGS[cond]}.png"),
        )
    traces = {}
    for fold in range(config.fold_count):
        trace_path = os.path.join(_fold_dir(config, fold), f"{kind}_trace.csv")
        if not os.path.isfile(trace_path):
            continue
        with open(trace_path, encoding="utf-8") as f:
            reader = csv.DictReader(f)
            traces[f"fold {fold}"] = [float(row["mean_loss"]) for row in reader]
    if traces:
        save_figure(
            loss_figure(traces, title=f"{kind}: head/encoder training loss"),
            os.path.join(reports_dir, f"loss_{kind}.png"),
        )
    log.info("report written: %s, %s, %d figure(s)", table_path, csv_path,
             1 + len(confusions) + (1 if traces else 0))
    return 0


#### phantom generation ####


def cmd_generate_phantom(args) -> int:
    dims = (args.dims, args.dims, args.dims)
    specs = make_class_specs(dims=dims, noise_sigma=args.noise_sigma)
    manifest = generate_classification_set(
        specs,
        args.per_class,
        args.out,
        jitter=args.jitter,
        seed=args.seed,
        withhold=(args.withhold_t1w_only, args.withhold_dti_only),
    )
    log.info("phantom cohort written: %s", manifest)
    print(manifest)
    return 0


#### entry point ####


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurofuse",
        description="DTI scalar maps, affine co-registration, and frozen-encoder "
        "fusion classification, end to end.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantom", help="write a 3-class phantom cohort")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dims", type=int, default=48, help="cubic volume edge length")
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--noise-sigma", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--withhold-t1w-only", type=float, default=0.0,
                   help="fraction of samples written without DWI")
    p.add_argument("--withhold-dti-only", type=float, default=0.0,
                   help="fraction of samples written without T1w")

    p = sub.add_parser("preprocess", help="DTI fit + registration per subject")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train encoders and fusion heads per fold")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True,
                   choices=("per-modality", "fusion", "agnostic"))

    p = sub.add_parser("evaluate", help="held-out metrics per input condition")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True, choices=KINDS,
                   help="which per-fold checkpoint family to evaluate")
    p.add_argument("--condition", default="all", choices=CONDITIONS + ("all",))

    p = sub.add_parser("report", help="render table, CSV, and figures")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default="agnostic", choices=KINDS)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate-phantom":
            return cmd_generate_phantom(args)
        config = load_config(args.config)
        if args.command == "preprocess":
            return cmd_preprocess(config, workers=args.workers)
        if args.command == "train":
            return cmd_train(config, args.mode)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint, args.condition)
        if args.command == "report":
            return cmd_report(config, args.checkpoint)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigInvalid as e:
        log.error("invalid configuration: %s", e)
        return 2
    except (MissingCheckpoint, ConditionUnsupported) as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
