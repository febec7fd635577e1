"""Forecast evaluation: displacement errors, final lane error, action breakdown.

Actors are bucketed by what their ground-truth future does (straight /
left / right); stationary actors are dropped. Metrics are averaged per
class with equal weight per actor. Final lane error is only defined for
actors whose ground-truth endpoint lies inside their own reachable-lanes
mask; rule-breaking actors would otherwise make 0% unattainable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig
from .forecaster import Architecture, default_architecture, forward, sample_waypoint_array
from .priors import prepare_scene
from .raster import RasterMask, query

EVAL_SAMPLES = 50
STATIONARY_THRESHOLD = 2.0  # m net displacement over the horizon
TURN_THRESHOLD_DEG = 15.0
ACTION_CLASSES = ("straight", "left", "right")


def classify_action(gt_trajectory: np.ndarray) -> str:
    """Bucket a GT future: stationary / straight / left / right.

    Stationary when the net start-to-end displacement is under 2 m;
    otherwise by the signed heading change from the first moving segment
    to the last (CCW positive = left), threshold 15 degrees.
    """
    gt = np.asarray(gt_trajectory, dtype=float)
    if np.linalg.norm(gt[-1] - gt[0]) < STATIONARY_THRESHOLD:
        return "stationary"
    deltas = np.diff(gt, axis=0)
    lens = np.linalg.norm(deltas, axis=1)
    moving = np.nonzero(lens > 1e-9)[0]
    if moving.size == 0:
        return "stationary"
    h0 = math.atan2(deltas[moving[0], 1], deltas[moving[0], 0])
    h1 = math.atan2(deltas[moving[-1], 1], deltas[moving[-1], 0])
    change = math.degrees((h1 - h0 + math.pi) % (2.0 * math.pi) - math.pi)
    if abs(change) < TURN_THRESHOLD_DEG:
        return "straight"
    return "left" if change > 0.0 else "right"


def displacement_metrics(samples: np.ndarray, gt: np.ndarray):
    """(minADE, meanADE) of (S, T, 2) samples against a (T, 2) ground truth."""
    samples = np.asarray(samples, dtype=float)
    gt = np.asarray(gt, dtype=float)
    ades = np.linalg.norm(samples - gt[None], axis=2).mean(axis=1)  # (S,)
    return float(ades.min()), float(ades.mean())


def final_lane_error(samples: np.ndarray, reach_mask: RasterMask, gt: np.ndarray):
    """Percent of samples ending outside reach; None when GT ends outside."""
    gt = np.asarray(gt, dtype=float)
    if not bool(query(reach_mask, gt[-1])):
        return None
    ends = np.asarray(samples, dtype=float)[:, -1, :]
    inside = query(reach_mask, ends[:, None, :])[:, 0]
    outside = int(ends.shape[0] - np.count_nonzero(inside))
    return float(100.0 * outside / ends.shape[0])


@dataclass
class ClassMetrics:
    count: int
    minade: float
    meanade: float
    fle: float | None  # None when no actor in the class had the metric defined
    fle_count: int


@dataclass
class MetricsReport:
    samples: int
    classes: dict = field(default_factory=dict)  # class name -> ClassMetrics
    details: list = field(default_factory=list)  # per-actor dicts


def _aggregate(details: list, n_samples: int) -> MetricsReport:
    report = MetricsReport(samples=n_samples)
    for cls in ACTION_CLASSES:
        rows = [d for d in details if d["action"] == cls]
        if not rows:
            continue
        fles = [d["fle"] for d in rows if d["fle"] is not None]
        report.classes[cls] = ClassMetrics(
            count=len(rows),
            minade=float(np.mean([d["minade"] for d in rows])),
            meanade=float(np.mean([d["meanade"] for d in rows])),
            fle=float(np.mean(fles)) if fles else None,
            fle_count=len(fles),
        )
    report.details = details
    return report


def _scene_details(params, scene, n_samples, sampler, seed, arch):
    rows = []
    for pa in prepare_scene(scene, mode="reinforce"):
        action = classify_action(pa.gt_local)
        if action == "stationary":
            continue
        dist = forward(params, pa.features, arch)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, pa.scene_seed, pa.actor_id))
        )
        ys, _, _ = sample_waypoint_array(
            dist, n_samples, rng, smooth=(sampler == "smooth")
        )
        minade, meanade = displacement_metrics(ys, pa.gt_local)
        fle = final_lane_error(ys, pa.reach_mask, pa.gt_local)
        rows.append({
            "scene": pa.scene_seed,
            "actor": pa.actor_id,
            "behavior": pa.behavior,
            "action": action,
            "minade": minade,
            "meanade": meanade,
            "fle": fle,
        })
    return rows


def evaluate(
    params: np.ndarray,
    scenes,
    n_samples: int = EVAL_SAMPLES,
    sampler: str = "smooth",
    seed: int = 0,
    arch: Architecture | None = None,
    workers: int = 1,
) -> MetricsReport:
    """Per-actor forecasting metrics over a scene collection.

    Each actor gets n_samples trajectories (smooth sampler by default) from
    its own RNG stream keyed by (seed, scene seed, actor id), so results do
    not depend on evaluation order or worker count.
    """
    if sampler not in ("smooth", "independent"):
        raise InvalidConfig(f"unknown sampler {sampler!r}")
    if not scenes:
        raise InvalidConfig("no scenes to evaluate")
    arch = arch or default_architecture()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_scene = list(pool.map(
                lambda s: _scene_details(params, s, n_samples, sampler, seed, arch),
                scenes,
            ))
    else:
        per_scene = [_scene_details(params, s, n_samples, sampler, seed, arch)
                     for s in scenes]
    details = [row for rows in per_scene for row in rows]
    return _aggregate(details, n_samples)


def overall_means(report: MetricsReport):
    """Unweighted mean of per-class metrics: (minADE, meanADE, FLE or None)."""
    if not report.classes:
        return None, None, None
    cms = list(report.classes.values())
    minade = float(np.mean([c.minade for c in cms]))
    meanade = float(np.mean([c.meanade for c in cms]))
    fles = [c.fle for c in cms if c.fle is not None]
    fle = float(np.mean(fles)) if fles else None
    return minade, meanade, fle


def report_to_csv(report: MetricsReport) -> str:
    """One row per present action class, stable column order and bytes."""
    lines = ["class,count,final_lane_error_pct,meanade_m,minade_m"]
    for cls in ACTION_CLASSES:
        cm = report.classes.get(cls)
        if cm is None:
            continue
        fle = repr(cm.fle) if cm.fle is not None else ""
        lines.append(f"{cls},{cm.count},{fle},{repr(cm.meanade)},{repr(cm.minade)}")
    return "\n".join(lines) + "\n"


def report_to_json(report: MetricsReport) -> str:
    payload = {
        "samples": report.samples,
        "classes": {
            cls: {
                "count": cm.count,
                "final_lane_error_pct": cm.fle,
                "fle_actors": cm.fle_count,
                "meanade_m": cm.meanade,
                "minade_m": cm.minade,
            }
            for cls, cm in report.classes.items()
        },
        "actors": report.details,
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


__all__ = [
    "EVAL_SAMPLES",
    "ACTION_CLASSES",
    "classify_action",
    "displacement_metrics",
    "final_lane_error",
    "ClassMetrics",
    "MetricsReport",
    "evaluate",
    "overall_means",
    "report_to_csv",
    "report_to_json",
]
