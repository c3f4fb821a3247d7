"""End-to-end registration: scene -> superpoints -> coarse matching -> overlap
gating -> dense matching -> pose estimation -> metrics.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import attention, synth
from .coarse_match import MatchConfig, knn_expand_prune, overlap_filter, similarity, soft_match
from .core import CorrespondenceSet, PointCloud, RigidTransform, apply_transform
from .errors import RegistrationError
from .estimator import ESTIMATORS, EstimatorConfig
from .fine_match import FineMatchConfig, assign_patches, extract_dense
from .metrics import (
    FMR_THRESHOLD,
    IR_THRESHOLD_M,
    RMSE_THRESHOLD_M,
    RRE_THRESHOLD_DEG,
    RTE_THRESHOLD_M,
    EvalReport,
    RecallCriterion,
    chamfer,
    inlier_stats,
    is_registered,
    patch_overlap_matrix,
    patch_stats,
    registration_errors,
    symmetric_overlap_bce,
)
from .parallel import ordered_map

log = logging.getLogger(__name__)

OVERLAP_MODES = ("oracle", "network", "none")
SCORE_CLIP = 1e-6


class StageError(RegistrationError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # surfaced with the stage name
        raise StageError(name, exc) from exc


@dataclass
class RunConfig:
    # scene
    point_count: int = 4000
    overlap_fraction: float = 1.0
    noise_sigma: float = 0.0
    rotation_magnitude: float = 180.0
    descriptor_dim: int = 64
    descriptor_noise: float = 0.0
    outlier_fraction: float = 0.0
    rng_seed: int = 0
    # superpoints and coarse matching
    voxel_size: float = 0.1
    theta_m: float = 0.05
    theta_o: float = 0.5
    knn: int = 3
    softmax_temperature: float = 0.1
    knn_space: str = "feature"
    overlap_mode: str = "oracle"
    overlap_tau: Optional[float] = None
    heads: int = 1
    # dense matching
    sinkhorn_iters: int = 100
    fine_temperature: float = 0.1
    dustbin_score: float = 1.0
    max_patch_size: Optional[int] = None
    fine_attention_layers: int = 0
    # estimation
    estimator: str = "fsr"
    seed_radius: float = 0.1
    seed_fraction: float = 0.3
    consensus_k: int = 20
    sigma_s: float = 10.0
    tau_a: float = 0.1
    ransac_iters: int = 50_000
    consensus_metric: str = "compatibility"
    squared_residual_test: bool = False
    wsvd_top_k: int = 250
    fsr_refit: bool = True
    # evaluation
    ir_threshold: float = IR_THRESHOLD_M
    fmr_threshold: float = FMR_THRESHOLD
    rr_criterion: str = "rmse"
    rmse_threshold: float = RMSE_THRESHOLD_M
    rre_threshold: float = RRE_THRESHOLD_DEG
    rte_threshold: float = RTE_THRESHOLD_M
    # inputs / outputs
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    gt_path: Optional[str] = None
    output: Optional[str] = None
    aligned_ply: Optional[str] = None
    # benchmark
    trials: int = 1
    sweep_descriptor_noise: Optional[list] = None
    sweep_overlap_fraction: Optional[list] = None
    sweep_estimators: Optional[list] = None
    benchmark_csv: Optional[str] = None
    include_timing: bool = True

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        normalised = {k.replace("-", "_"): v for k, v in data.items()}
        unknown = sorted(set(normalised) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**normalised)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- per-module views (each validates its own invariants) --------------

    def scene_spec(self) -> synth.SceneSpec:
        return synth.SceneSpec(
            point_count=self.point_count,
            overlap_fraction=self.overlap_fraction,
            noise_sigma=self.noise_sigma,
            rotation_magnitude=self.rotation_magnitude,
            descriptor_dim=self.descriptor_dim,
            descriptor_noise=self.descriptor_noise,
            outlier_fraction=self.outlier_fraction,
            rng_seed=self.rng_seed,
        )

    def match_config(self) -> MatchConfig:
        return MatchConfig(self.theta_m, self.theta_o, self.knn, self.softmax_temperature, self.knn_space)

    def fine_config(self) -> FineMatchConfig:
        return FineMatchConfig(self.sinkhorn_iters, self.fine_temperature, self.dustbin_score, self.max_patch_size)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            seed_radius=self.seed_radius,
            seed_fraction=self.seed_fraction,
            consensus_k=self.consensus_k,
            sigma_s=self.sigma_s,
            tau_a=self.tau_a,
            ransac_iters=self.ransac_iters,
            rng_seed=self.rng_seed,
            consensus_metric=self.consensus_metric,
            squared_residual_test=self.squared_residual_test,
            wsvd_top_k=self.wsvd_top_k,
            fsr_refit=self.fsr_refit,
        )

    def validate(self) -> None:
        """Check every module's invariants before any work starts."""
        self.match_config()
        self.fine_config()
        self.estimator_config()
        if self.source_path is None and self.target_path is None:
            self.scene_spec()
        elif self.source_path is None or self.target_path is None:
            raise ValueError("source_path and target_path must be given together")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {sorted(ESTIMATORS)}")
        for est in self.sweep_estimators or ():
            if est not in ESTIMATORS:
                raise ValueError(f"unknown estimator in sweep: {est}")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ValueError(f"overlap_mode must be one of {OVERLAP_MODES}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported (heads=1)")
        if self.fine_attention_layers < 0:
            raise ValueError("fine_attention_layers must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        RecallCriterion(self.rr_criterion)


@dataclass
class RegistrationOutcome:
    report: EvalReport
    transform: Optional[RigidTransform]
    correspondences: CorrespondenceSet
    estimation_seconds: float
    source: PointCloud
    target: PointCloud
    extras: dict = field(default_factory=dict)


def _load_inputs(cfg: RunConfig):
    from .plyio import load_cloud, load_transform

    source = load_cloud(cfg.source_path)
    target = load_cloud(cfg.target_path)
    if source.descriptors is None or target.descriptors is None:
        raise ValueError("input clouds must carry descriptor properties f_0..f_{d-1}")
    gt = load_transform(cfg.gt_path) if cfg.gt_path else None
    return source, target, gt, None


def _superpoints(dense: PointCloud, voxel: float):
    """Voxel centroids whose nearest-superpoint patch is non-empty, with pooled descriptors."""
    sp = synth.voxel_downsample(dense, voxel)
    assign = assign_patches(dense, sp)
    nonempty = np.array([m.size > 0 for m in assign.members])
    if not nonempty.all():
        sp = sp.subset(np.nonzero(nonempty)[0])
        assign = assign_patches(dense, sp)
    pooled = np.stack([dense.descriptors[m].mean(axis=0) for m in assign.members])
    zero = np.linalg.norm(pooled, axis=1) == 0.0
    if zero.any():
        pooled[zero] = np.stack([dense.descriptors[assign.members[i][0]] for i in np.nonzero(zero)[0]])
    return sp.with_descriptors(pooled), assign


def _patch_scores(labels: np.ndarray, assign) -> np.ndarray:
    frac = np.array([labels[m].mean() for m in assign.members])
    return np.clip(frac, SCORE_CLIP, 1.0 - SCORE_CLIP)


def _refine_dense(src: PointCloud, tgt: PointCloud, layers: int, seed: int):
    """Residual linear self/cross attention with rotary 3D positions, unit-renormalised."""
    fs, ft = src.descriptors, tgt.descriptors
    d = fs.shape[1]
    for layer in range(layers):
        w_self = attention.AttentionWeights.random(d, seed=seed * 1000 + 2 * layer)
        w_cross = attention.AttentionWeights.random(d, seed=seed * 1000 + 2 * layer + 1)
        ps = attention.rotary_embed(fs, src.points)
        pt = attention.rotary_embed(ft, tgt.points)
        fs = fs + attention.linear_attention(ps, ps, fs, w_self)
        ft = ft + attention.linear_attention(pt, pt, ft, w_self)
        fs, ft = fs + attention.linear_attention(fs, ft, ft, w_cross), ft + attention.linear_attention(ft, fs, fs, w_cross)
        fs = fs / np.linalg.norm(fs, axis=1, keepdims=True)
        ft = ft / np.linalg.norm(ft, axis=1, keepdims=True)
    return src.with_descriptors(fs), tgt.with_descriptors(ft)


def register_scene(cfg: RunConfig) -> RegistrationOutcome:
    """Run every stage once and evaluate against the ground truth when known."""
    with _stage("config"):
        cfg.validate()
    truth = None
    with _stage("input"):
        if cfg.source_path is not None:
            source, target, gt, truth = _load_inputs(cfg)
        else:
            spec = cfg.scene_spec()
            source, target, truth = synth.generate_pair(spec)
            source, target = synth.simulate_descriptors(source, target, truth, spec)
            gt = truth.transform

    with _stage("superpoints"):
        src_sp, src_assign = _superpoints(source, cfg.voxel_size)
        tgt_sp, tgt_assign = _superpoints(target, cfg.voxel_size)

    mcfg = cfg.match_config()
    with _stage("overlap"):
        dense_labels = None
        if gt is not None:
            tau = cfg.overlap_tau
            if tau is None:
                tau = 3.0 * cfg.noise_sigma + 1e-6 if truth is not None else 0.5 * cfg.voxel_size
            dense_labels = synth.overlap_oracle(source, target, gt, tau)
        if cfg.overlap_mode == "oracle":
            if dense_labels is None:
                raise ValueError("oracle overlap mode needs a ground-truth transform")
            src_scores = _patch_scores(dense_labels[0], src_assign)
            tgt_scores = _patch_scores(dense_labels[1], tgt_assign)
        elif cfg.overlap_mode == "network":
            d = src_sp.descriptor_dim
            rng = synth.stream(cfg.rng_seed, synth._STREAM_OVERLAP_NET)
            w_o = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=d)
            _, _, s_src, s_tgt = attention.overlap_detect(
                src_sp.descriptors,
                tgt_sp.descriptors,
                attention.AttentionWeights.random(d, seed=cfg.rng_seed * 7 + 1),
                attention.AttentionWeights.random(d, seed=cfg.rng_seed * 7 + 2),
                w_o,
            )
            src_scores, tgt_scores = s_src.scores, s_tgt.scores
        else:
            src_scores = np.ones(len(src_sp)) - SCORE_CLIP
            tgt_scores = np.ones(len(tgt_sp)) - SCORE_CLIP

    with _stage("coarse_match"):
        s = similarity(src_sp.descriptors, tgt_sp.descriptors)
        soft = soft_match(s, mcfg)
        expanded = knn_expand_prune(
            s,
            soft,
            mcfg,
            src_feats=src_sp.descriptors,
            tgt_feats=tgt_sp.descriptors,
            src_points=src_sp.points,
            tgt_points=tgt_sp.points,
        )
        patches = overlap_filter(expanded, src_scores, tgt_scores, mcfg, n_src=len(src_sp), n_tgt=len(tgt_sp))

    with _stage("fine_match"):
        src_f, tgt_f = source, target
        if cfg.fine_attention_layers:
            src_f, tgt_f = _refine_dense(source, target, cfg.fine_attention_layers, cfg.rng_seed)
        dense = extract_dense(
            patches,
            src_assign,
            tgt_assign,
            src_f,
            tgt_f,
            cfg.fine_config(),
            src_superpoints=src_sp,
            tgt_superpoints=tgt_sp,
        )

    with _stage("estimation"):
        ecfg = cfg.estimator_config()
        start = time.perf_counter()
        est = ESTIMATORS[cfg.estimator](dense, ecfg)
        elapsed = time.perf_counter() - start

    with _stage("metrics"):
        report = _evaluate(cfg, est, gt, truth, dense, source, target, patches, src_assign, tgt_assign,
                           (src_scores, tgt_scores), dense_labels)
        report.counts.update(
            source_points=len(source),
            target_points=len(target),
            source_superpoints=len(src_sp),
            target_superpoints=len(tgt_sp),
            soft_pairs=len(soft[0]) + len(soft[1]),
            patch_pairs_expanded=len(expanded),
            patch_pairs=len(patches),
            correspondences=len(dense),
        )
    return RegistrationOutcome(report, est, dense, elapsed, source, target, {"patches": patches})


def _evaluate(cfg, est, gt, truth, dense, source, target, patches, src_assign, tgt_assign, scores, dense_labels):
    thresholds = dict(
        ir_threshold_m=cfg.ir_threshold,
        fmr_threshold=cfg.fmr_threshold,
        rr_criterion=RecallCriterion(cfg.rr_criterion).value,
        rmse_threshold_m=cfg.rmse_threshold,
        rre_threshold_deg=cfg.rre_threshold,
        rte_threshold_m=cfg.rte_threshold,
        theta_m=cfg.theta_m,
        theta_o=cfg.theta_o,
        tau_a=cfg.tau_a,
    )
    report = EvalReport(thresholds=thresholds)
    report.chamfer = chamfer(apply_transform(est, source), target)
    if gt is None:
        return report
    ir, hit = inlier_stats(dense, gt, cfg.ir_threshold, cfg.fmr_threshold)
    rmse_pts = source.points[truth.true_correspondences.source_index] if truth is not None else source.points
    rre, rte, rmse = registration_errors(est, gt, rmse_pts)
    report.ir, report.fmr = ir, float(hit)
    report.rre_deg, report.rte_m, report.rmse_m = rre, rte, rmse
    report.rr = float(
        is_registered(rre, rte, rmse, cfg.rr_criterion, cfg.rmse_threshold, cfg.rre_threshold, cfg.rte_threshold)
    )
    pairs = truth.true_correspondences if truth is not None else _nearest_pairs(source, target, gt, dense_labels[0])
    if len(pairs):
        pov = patch_overlap_matrix(src_assign.labels, tgt_assign.labels, len(src_assign), len(tgt_assign), pairs)
        labels = (pov.any(axis=1), pov.any(axis=0))
        predicted = (scores[0] > cfg.theta_o, scores[1] > cfg.theta_o)
        report.pir, report.pop = patch_stats(patches, pov, predicted, labels)
        report.overlap_bce = symmetric_overlap_bce(scores[0], labels[0], scores[1], labels[1])
    return report


def _nearest_pairs(source, target, gt, src_labels) -> CorrespondenceSet:
    """Stand-in true pairs for loaded clouds: overlapping source point -> nearest target point."""
    idx = np.nonzero(src_labels)[0]
    if idx.size == 0:
        return CorrespondenceSet(source, target, idx, idx, np.zeros(0))
    _, nn = cKDTree(target.points).query(gt.apply(source.points[idx]), k=1)
    return CorrespondenceSet(source, target, idx, nn, np.ones(idx.size))


def run_register(cfg: RunConfig) -> EvalReport:
    """Register one pair, write the JSON report / aligned PLY if requested."""
    outcome = register_scene(cfg)
    if cfg.output:
        Path(cfg.output).write_text(outcome.report.to_json(), encoding="utf-8")
    if cfg.aligned_ply:
        from .plyio import write_cloud

        write_cloud(cfg.aligned_ply, apply_transform(outcome.transform, outcome.source))
    return outcome.report


# ---------------------------------------------------------------------------
# benchmark sweeps
# ---------------------------------------------------------------------------

BENCH_METRICS = ("ir", "fmr", "rr", "rre_deg", "rte_m", "rmse_m", "chamfer", "pir", "pop", "overlap_bce")


def _trial(job):
    cfg, = job
    try:
        out = register_scene(cfg)
        return out.report, out.estimation_seconds, None
    except RegistrationError as exc:
        return None, None, str(exc)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    if isinstance(x, float):
        return repr(round(x, 12))
    return str(x)


def run_benchmark(cfg: RunConfig, threads: Optional[int] = None) -> str:
    """Grid over descriptor noise x overlap x estimator, ``cfg.trials`` scenes per cell.

    Trial ``t`` of every cell uses scene seed ``rng_seed + t`` so estimators are
    compared on identical scenes. Returns the CSV text (also written to
    ``cfg.benchmark_csv`` when set).
    """
    cfg.validate()
    noises = cfg.sweep_descriptor_noise or [cfg.descriptor_noise]
    overlaps = cfg.sweep_overlap_fraction or [cfg.overlap_fraction]
    estimators = cfg.sweep_estimators or [cfg.estimator]
    cells = list(itertools.product(noises, overlaps, estimators))
    jobs = [
        (cfg.replace(descriptor_noise=n, overlap_fraction=o, estimator=e, rng_seed=cfg.rng_seed + t),)
        for n, o, e in cells
        for t in range(cfg.trials)
    ]
    for (job_cfg,) in jobs:
        job_cfg.validate()
    results = ordered_map(_trial, jobs, threads)

    header = ["descriptor_noise", "overlap_fraction", "estimator", "trials", "failures"]
    for m in BENCH_METRICS:
        header += [f"{m}_mean", f"{m}_std"]
    header.append("correspondences_mean")
    if cfg.include_timing:
        header += ["est_time_mean_s", "est_time_std_s", "speedup_vs_ransac"]
    rows = []
    for ci, (n, o, e) in enumerate(cells):
        chunk = results[ci * cfg.trials : (ci + 1) * cfg.trials]
        ok = [(r, t) for r, t, err in chunk if r is not None]
        for _, _, err in chunk:
            if err:
                log.warning("cell noise=%s overlap=%s estimator=%s: %s", n, o, e, err)
        row = {"descriptor_noise": n, "overlap_fraction": o, "estimator": e,
               "trials": cfg.trials, "failures": cfg.trials - len(ok)}
        for m in BENCH_METRICS:
            vals = np.array([getattr(r, m) for r, _ in ok if getattr(r, m) is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            row[f"{m}_mean"] = float(vals.mean()) if vals.size else None
            row[f"{m}_std"] = float(vals.std()) if vals.size else None
        corr = [r.counts.get("correspondences", 0) for r, _ in ok]
        row["correspondences_mean"] = float(np.mean(corr)) if corr else None
        if cfg.include_timing:
            times = np.array([t for _, t in ok])
            row["est_time_mean_s"] = float(times.mean()) if times.size else None
            row["est_time_std_s"] = float(times.std()) if times.size else None
        rows.append(row)
    if cfg.include_timing:
        for row in rows:
            ref = next((r for r in rows if r["estimator"] == "ransac"
                        and r["descriptor_noise"] == row["descriptor_noise"]
                        and r["overlap_fraction"] == row["overlap_fraction"]), None)
            if ref and ref["est_time_mean_s"] and row["est_time_mean_s"]:
                row["speedup_vs_ransac"] = ref["est_time_mean_s"] / row["est_time_mean_s"]
            else:
                row["speedup_vs_ransac"] = None

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    text = buf.getvalue()
    if cfg.benchmark_csv:
        Path(cfg.benchmark_csv).write_text(text, encoding="utf-8")
    return text


def benchmark_failed(csv_text: str) -> bool:
    reader = csv.DictReader(io.StringIO(csv_text))
    return any(int(r["failures"]) > 0 for r in reader)
