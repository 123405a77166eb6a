"""Pretrain teacher -> distil students -> evaluate -> report bundle."""

from __future__ import annotations

import json
import logging
import platform
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from ..imaging import ImageRecord
from ..model import ModelHandle, ModelSpec, build_model, freeze, load_checkpoint
from ..protocols.crossres import (
    PairSet,
    embed_images,
    matrix_from_embeddings,
    resolution_label,
    sort_resolutions,
    write_pair_list,
)
from ..protocols.curves import (
    cmc_from_scores,
    det_auc,
    fnir_at_fpir,
    open_set_from_scores,
    pair_scores,
    rankings_from_scores,
    retrieval_map,
    retrieval_rate,
    roc,
    roc_table,
    split_scores,
    tar_at_far,
    verification_accuracy,
)
from ..protocols.templates import normalize_rows, score_matrix, templates_by_subject
from ..training import ValidationSet, fit
from .config import ExperimentConfig, EvalConfig
from .dataset import MANIFEST_NAME, Dataset, load_dataset, read_manifest
from .reporting import dumps, read_report, write_csv, write_report
from .synthetic import generate_synthetic, generator_dict

log = logging.getLogger(__name__)

PROTOCOLS = ("verification", "crossres", "cmc", "det", "retrieval")
TEACHER_DIR = "teacher"
DATA_DIR = "data"


class ExperimentFailed(RuntimeError):
    pass


def prepare_dataset(cfg: ExperimentConfig, out: Union[str, Path]) -> Dataset:
    """Load ``cfg.data_dir`` or (re)generate the synthetic set under ``out/data``."""
    if cfg.data_dir is not None:
        return load_dataset(cfg.data_dir)
    root = Path(out) / DATA_DIR
    if (root / MANIFEST_NAME).exists():
        _, manifest = read_manifest(root)
        if manifest.extra.get("generator") == json.loads(json.dumps(generator_dict(cfg.data))):
            return load_dataset(root)
    generate_synthetic(cfg.data, root)
    return load_dataset(root)


def model_spec(cfg: ExperimentConfig, data: Dataset) -> ModelSpec:
    return ModelSpec(
        num_classes=data.manifest.num_identities,
        embedding_dim=cfg.model.embedding_dim,
        channels=cfg.model.channels,
        in_channels=data.train[0].channels if data.train else 3,
    )


def train_teacher(cfg: ExperimentConfig, data: Dataset, out: Union[str, Path],
                  val: Optional[ValidationSet] = None, jobs: int = 1) -> ModelHandle:
    """Full-resolution classification pretraining; returns the frozen teacher."""
    if not data.train:
        raise ValueError("dataset has no training split")
    val = val if val is not None else ValidationSet(data.val)
    student = build_model(model_spec(cfg, data), seed=cfg.seed)
    state = fit(cfg.teacher, data.train, val, None, student=student, out_dir=Path(out) / TEACHER_DIR, jobs=jobs)
    return freeze(state.student)


def train_student(cfg: ExperimentConfig, mode: str, teacher: ModelHandle, data: Dataset,
                  out: Union[str, Path], val: Optional[ValidationSet] = None, jobs: int = 1) -> ModelHandle:
    val = val if val is not None else ValidationSet(data.val)
    state = fit(cfg.student_config(mode), data.train, val, teacher, out_dir=Path(out) / mode, jobs=jobs)
    return state.student


def load_mode_model(out: Union[str, Path], mode: str) -> ModelHandle:
    folder = TEACHER_DIR if mode == "teacher-only" else mode
    path = Path(out) / folder / "final.pt"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint for {mode!r} at {path}; run `train` first")
    model, _ = load_checkpoint(path)
    return freeze(model)


class Embeddings:
    """Probe and gallery embeddings per evaluation resolution."""

    def __init__(self, model: ModelHandle, probes: Sequence[ImageRecord], gallery: Sequence[ImageRecord],
                 resolutions, batch_size: int = 64, jobs: int = 1):
        self.resolutions = sort_resolutions(list(resolutions) + [None])
        self.probe_ids = np.array([r.identity for r in probes])
        self.gallery_ids = np.array([r.identity for r in gallery])
        self.probe = {r: embed_images(model, probes, r, batch_size, jobs) for r in self.resolutions}
        self.gallery = {r: embed_images(model, gallery, r, batch_size, jobs) for r in self.resolutions}


def _verification(emb: Embeddings, pairs: PairSet, ecfg: EvalConfig, resolutions):
    rows, curves = [], {}
    for r in resolutions:
        scores = pair_scores(emb.probe[r], emb.gallery[r], pairs.pairs)
        genuine, impostor = split_scores(scores, pairs.genuine)
        curve = roc(genuine, impostor)
        op = tar_at_far(curve, ecfg.far)
        rows.append({
            "resolution": resolution_label(r),
            "tar": op.tar,
            "threshold": op.threshold,
            "far": op.far,
            "far_unreachable": op.far_unreachable,
            "accuracy": verification_accuracy(genuine, impostor),
            "genuine_count": curve.genuine_count,
            "impostor_count": curve.impostor_count,
            "roc": roc_table(curve),
        })
        curves[f"roc_{resolution_label(r)}.csv"] = (
            ["threshold", "far", "tar"], curve.points)
    return {"far_target": ecfg.far, "resolutions": rows}, curves


def _crossres(emb: Embeddings, pairs: PairSet, ecfg: EvalConfig, resolutions):
    matrix = matrix_from_embeddings(emb.probe, emb.gallery, pairs.pairs, pairs.genuine, resolutions, ecfg.far)
    rows = matrix.to_csv_rows()
    return matrix.to_dict(), {"crossres.csv": (rows[0], rows[1:])}, matrix


def _cmc(emb: Embeddings, ecfg: EvalConfig, resolutions):
    gallery = templates_by_subject(emb.gallery[None], emb.gallery_ids)
    g = np.stack([t.vector for t in gallery])
    gid = [t.subject_id for t in gallery]
    rows, curves = [], {}
    for r in resolutions:
        scores = np.clip(normalize_rows(emb.probe[r]) @ g.T, -1.0, 1.0)
        curve = cmc_from_scores(scores, emb.probe_ids, gid)
        rows.append({
            "resolution": resolution_label(r),
            "probe_count": curve.probe_count,
            "rank": {str(k): curve.rank(k) for k in ecfg.cmc_ranks},
        })
        curves[f"cmc_{resolution_label(r)}.csv"] = (
            ["rank", "identification_rate"],
            [(k + 1, float(v)) for k, v in enumerate(curve.hits_at_rank)],
        )
    return {"gallery_resolution": "full", "gallery_size": len(gallery), "resolutions": rows}, curves


def _det(emb: Embeddings, ecfg: EvalConfig, resolutions):
    # open-set split: even-indexed subjects are enrolled, the rest act as unmated probes
    subjects = np.unique(emb.gallery_ids)
    enrolled = set(subjects[::2].tolist())
    gallery = [t for t in templates_by_subject(emb.gallery[None], emb.gallery_ids) if t.subject_id in enrolled]
    g = np.stack([t.vector for t in gallery])
    gid = [t.subject_id for t in gallery]
    mated_mask = np.isin(emb.probe_ids, list(enrolled))
    rows, curves = [], {}
    for r in resolutions:
        scores = np.clip(normalize_rows(emb.probe[r]) @ g.T, -1.0, 1.0)
        curve = open_set_from_scores(scores[mated_mask], emb.probe_ids[mated_mask], scores[~mated_mask], gid)
        op = fnir_at_fpir(curve, ecfg.fpir)
        rows.append({
            "resolution": resolution_label(r),
            "mated_count": curve.mated_count,
            "unmated_count": curve.unmated_count,
            "auc": det_auc(curve),
            "tpir": op.tar,
            "fnir": 1.0 - op.tar,
            "fpir": op.far,
            "threshold": op.threshold,
            "fpir_unreachable": op.far_unreachable,
        })
        curves[f"det_{resolution_label(r)}.csv"] = (
            ["threshold", "fpir", "fnir"], curve.points)
    return {"fpir_target": ecfg.fpir, "gallery_size": len(gallery), "resolutions": rows}, curves


def _retrieval(emb: Embeddings, ecfg: EvalConfig, resolutions):
    rows = []
    for r in resolutions:
        scores = score_matrix(emb.probe[r], emb.gallery[None])
        rankings = rankings_from_scores(scores, emb.probe_ids, emb.gallery_ids)
        rows.append({
            "resolution": resolution_label(r),
            "query_count": len(rankings),
            "map": retrieval_map(rankings),
            "rates": {str(k): retrieval_rate(rankings, k) for k in ecfg.retrieval_ranks},
        })
    return {"gallery_resolution": "full", "gallery_size": int(emb.gallery_ids.size), "resolutions": rows}, {}


def evaluate_model(model: ModelHandle, data: Dataset, ecfg: EvalConfig,
                   protocols: Sequence[str] = PROTOCOLS, jobs: int = 1) -> dict:
    """Run the requested protocols; returns ``{protocol: (report, csv_files)}``."""
    if not data.probe or not data.gallery:
        raise ValueError("dataset needs probe and gallery splits for evaluation")
    resolutions = sort_resolutions(ecfg.resolutions)
    emb = Embeddings(model, data.probe, data.gallery, resolutions, ecfg.batch_size, jobs)
    pairs = PairSet.all_pairs(data.probe, data.gallery)
    results = {}
    for name in protocols:
        if name == "verification":
            results[name] = _verification(emb, pairs, ecfg, resolutions)
        elif name == "crossres":
            report, files, _ = _crossres(emb, pairs, ecfg, resolutions)
            results[name] = (report, files)
        elif name == "cmc":
            results[name] = _cmc(emb, ecfg, resolutions)
        elif name == "det":
            results[name] = _det(emb, ecfg, resolutions)
        elif name == "retrieval":
            results[name] = _retrieval(emb, ecfg, resolutions)
        else:
            raise ValueError(f"unknown protocol {name!r}")
    return results


def write_bundle(out: Union[str, Path], mode: str, results: dict) -> list[Path]:
    folder = Path(out) / mode
    written = []
    for name, (report, files) in results.items():
        doc = {"protocol": name, "model": mode, **report}
        written.append(write_report(folder / f"{name}.json", doc))
        for fname, (header, rows) in files.items():
            written.append(write_csv(folder / "curves" / fname, header, rows))
        if name == "crossres":
            matrix = _matrix_from_report(doc)
            (folder / "crossres.md").write_text(matrix.to_markdown())
    return written


def _matrix_from_report(doc: dict):
    from ..protocols.crossres import CrossResMatrix, parse_resolution

    return CrossResMatrix(
        tuple(parse_resolution(r) for r in doc["resolutions"]),
        tuple(tuple(row["tar"]) for row in doc["rows"]),
        tuple(tuple(row["far_unreachable"]) for row in doc["rows"]),
        doc["far_target"],
    )


def write_pairs(out: Union[str, Path], data: Dataset) -> Path:
    pairs = PairSet.all_pairs(data.probe, data.gallery)
    path = Path(out) / "pairs.csv"
    write_pair_list(path, pairs.pairs, pairs.genuine, data.paths["probe"], data.paths["gallery"])
    return path


def _row_map(doc: dict, key: str) -> dict:
    return {row["resolution"]: row[key] for row in doc["resolutions"]}


def summarize(out: Union[str, Path], modes: Sequence[str], failures: Optional[dict] = None) -> dict:
    """Paper-style tables assembled from the per-mode bundles in ``out``."""
    out = Path(out)
    tables: dict = {
        "verification_tar": {}, "verification_accuracy": {}, "probe_vs_full_tar": {},
        "rank1": {}, "det_auc": {}, "tpir": {}, "map": {},
    }
    crossres = {}
    far = None
    present = []
    for mode in modes:
        folder = out / mode
        if not folder.is_dir():
            continue
        present.append(mode)
        if (folder / "verification.json").exists():
            doc = read_report(folder / "verification.json")
            far = doc["far_target"]
            tables["verification_tar"][mode] = _row_map(doc, "tar")
            tables["verification_accuracy"][mode] = _row_map(doc, "accuracy")
        if (folder / "crossres.json").exists():
            doc = read_report(folder / "crossres.json")
            far = doc["far_target"]
            crossres[mode] = doc
            last = doc["rows"][-1]
            tables["probe_vs_full_tar"][mode] = dict(zip(doc["resolutions"], last["tar"]))
        if (folder / "cmc.json").exists():
            doc = read_report(folder / "cmc.json")
            tables["rank1"][mode] = {row["resolution"]: row["rank"].get("1") for row in doc["resolutions"]}
        if (folder / "det.json").exists():
            doc = read_report(folder / "det.json")
            tables["det_auc"][mode] = _row_map(doc, "auc")
            tables["tpir"][mode] = _row_map(doc, "tpir")
        if (folder / "retrieval.json").exists():
            doc = read_report(folder / "retrieval.json")
            tables["map"][mode] = _row_map(doc, "map")
    summary = {
        "protocol": "summary",
        "far_target": far,
        "models": present,
        "tables": {k: v for k, v in tables.items() if v},
        "crossres": crossres,
        "failures": dict(failures or {}),
    }
    write_report(out / "summary.json", summary)
    (out / "summary.md").write_text(render_markdown(summary))
    return summary


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def render_markdown(summary: dict) -> str:
    titles = {
        "verification_tar": "TAR@FAR={far} per resolution (both sides degraded)",
        "verification_accuracy": "1:1 verification accuracy per resolution",
        "probe_vs_full_tar": "TAR@FAR={far}, probe resolution vs full-resolution gallery",
        "rank1": "Close-set rank-1 identification rate (full-resolution gallery)",
        "tpir": "Open-set TPIR at the configured FPIR",
        "det_auc": "Open-set DET AUC",
        "map": "Retrieval mAP (full-resolution gallery)",
    }
    lines = ["# Experiment summary", ""]
    far = summary.get("far_target")
    for key, title in titles.items():
        table = summary["tables"].get(key)
        if not table:
            continue
        cols = list(next(iter(table.values())).keys())
        lines += [f"## {title.format(far=far)}", "", "| Model | " + " | ".join(cols) + " |",
                  "|---|" + "---|" * len(cols)]
        for mode, row in table.items():
            lines.append(f"| {mode} | " + " | ".join(_fmt(row.get(c)) for c in cols) + " |")
        lines.append("")
    for mode, doc in summary.get("crossres", {}).items():
        lines += [f"## Cross-resolution TAR@FAR={doc['far_target']} (%), {mode}", "",
                  _matrix_from_report(doc).to_markdown()]
    if summary.get("failures"):
        lines += ["## Failures", ""] + [f"- {m}: {e}" for m, e in summary["failures"].items()] + [""]
    return "\n".join(lines)


def run_experiment(cfg: ExperimentConfig, out: Union[str, Path], jobs: int = 1,
                   protocols: Sequence[str] = PROTOCOLS) -> dict:
    """End-to-end pipeline. Timestamps go to ``metadata.json`` only."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)
    timings = {}
    (out / "config.json").write_text(dumps(cfg.to_dict()))

    t0 = time.perf_counter()
    data = prepare_dataset(cfg, out)
    write_pairs(out, data)
    val = ValidationSet(data.val)
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    teacher = train_teacher(cfg, data, out, val, jobs)
    timings["teacher"] = time.perf_counter() - t0

    failures = {}
    for mode in cfg.modes:
        t0 = time.perf_counter()
        try:
            if mode == "teacher-only":
                model = teacher
            else:
                model = train_student(cfg, mode, teacher, data, out, val, jobs)
            results = evaluate_model(model, data, cfg.eval, protocols, jobs)
            write_bundle(out, mode, results)
            marker = out / mode / "FAILED.json"
            if marker.exists():
                marker.unlink()
        except Exception as exc:  # keep other modes' results
            log.exception("mode %s failed", mode)
            failures[mode] = f"{type(exc).__name__}: {exc}"
            (out / mode).mkdir(parents=True, exist_ok=True)
            (out / mode / "FAILED.json").write_text(
                dumps({"mode": mode, "error": failures[mode], "traceback": traceback.format_exc()})
            )
        timings[mode] = time.perf_counter() - t0

    summary = summarize(out, cfg.modes, failures)
    write_metadata(out, started, timings)
    if failures:
        raise ExperimentFailed(f"modes failed: {', '.join(failures)}")
    return summary


def write_metadata(out: Union[str, Path], started: datetime, timings: dict) -> Path:
    path = Path(out) / "metadata.json"
    meta = {
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "seconds": timings,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path
