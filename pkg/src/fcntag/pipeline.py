"""Batch feature extraction over a manifest and assembly of training arrays."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestEntry, TagVocabulary, label_matrix
from .errors import ContractError, FcnError, InvalidInputError
from .frontend import FeatureKind, FeatureMatrix, FrontendConfig, extract
from .io import read_feature_header, read_features, read_wav, write_features
from .train import Dataset

log = logging.getLogger(__name__)

FEATURE_SUFFIX = ".fcnf"
INDEX_NAME = "index.csv"


@dataclass
class PreprocessResult:
    index: dict[str, Path]
    computed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("FCN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _up_to_date(path: Path, cfg: FrontendConfig, kind: FeatureKind) -> bool:
    if not path.exists():
        return False
    try:
        k, bands, frames, digest = read_feature_header(path)
    except (OSError, InvalidInputError):
        return False
    return k is kind and bands == cfg.bands(kind) and frames == cfg.n_frames and digest == cfg.digest()


def _extract_one(args) -> tuple[str, str | None]:
    clip_id, src, dst, cfg, kind = args
    try:
        fm = extract(read_wav(src), cfg, kind)
        write_features(dst, fm)
    except (FcnError, OSError, ValueError) as exc:
        return clip_id, f"{src}: {exc}"
    return clip_id, None


def _is_feature_file(entry: ManifestEntry) -> bool:
    return entry.path.endswith(FEATURE_SUFFIX)


def preprocess(manifest: Manifest, cfg: FrontendConfig, kind, out_dir, workers: int | None = None,
               splits=None) -> PreprocessResult:
    """Compute one feature file per clip under ``out_dir/<kind>/`` and write an index.

    Files whose header already matches the config digest are not recomputed.
    Manifest entries that point at feature files are used in place.
    """
    kind = FeatureKind.parse(kind)
    dest = Path(out_dir) / kind.short
    dest.mkdir(parents=True, exist_ok=True)
    result = PreprocessResult(index={})
    jobs = []
    for e in manifest.entries:
        if splits is not None and e.split not in splits:
            continue
        src = manifest.resolve(e)
        if _is_feature_file(e):
            if not _up_to_date(src, cfg, kind):
                result.failures[e.clip_id] = f"{src}: feature file does not match the {kind.name} config"
            else:
                result.index[e.clip_id] = src
                result.skipped.append(e.clip_id)
            continue
        dst = dest / f"{e.clip_id}{FEATURE_SUFFIX}"
        result.index[e.clip_id] = dst
        if _up_to_date(dst, cfg, kind):
            result.skipped.append(e.clip_id)
        else:
            jobs.append((e.clip_id, src, dst, cfg, kind))
    workers = workers or num_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_extract_one, jobs, chunksize=8))
    else:
        outcomes = [_extract_one(j) for j in jobs]
    for clip_id, err in outcomes:
        if err is None:
            result.computed.append(clip_id)
        else:
            result.failures[clip_id] = err
            result.index.pop(clip_id, None)
    with open(dest / INDEX_NAME, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "feature_path"])
        for e in manifest.entries:
            if e.clip_id in result.index:
                w.writerow([e.clip_id, os.fspath(result.index[e.clip_id])])
    if result.failures:
        with open(dest / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip_id", "error"])
            for cid, err in sorted(result.failures.items()):
                w.writerow([cid, err])
    log.info("preprocess %s: %d computed, %d up to date, %d failed", kind.short,
             len(result.computed), len(result.skipped), len(result.failures))
    return result


def read_index(features_dir, kind) -> dict[str, Path]:
    kind = FeatureKind.parse(kind)
    path = Path(features_dir) / kind.short / INDEX_NAME
    if not path.exists():
        raise InvalidInputError(f"no {kind.short} feature index at {path}; run preprocess first")
    with open(path, newline="") as fh:
        return {row["clip_id"]: Path(row["feature_path"]) for row in csv.DictReader(fh)}


def load_dataset(manifest: Manifest, vocab: TagVocabulary, split: str, index: dict[str, Path],
                 kind, drop_untagged: bool = False) -> Dataset:
    kind = FeatureKind.parse(kind)
    y, ids = label_matrix(manifest, vocab, split, drop_untagged)
    if not ids:
        raise ContractError(f"split {split!r} is empty")
    mats = []
    for cid in ids:
        if cid not in index:
            raise InvalidInputError(f"no features for clip {cid!r}")
        fm: FeatureMatrix = read_features(index[cid])
        if fm.kind is not kind:
            raise ContractError(f"{index[cid]} holds {fm.kind.name}, expected {kind.name}")
        mats.append(fm.data)
    return Dataset(np.stack(mats), y, ids)
