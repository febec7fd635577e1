"""Command-line pipeline: gen / train / eval / plan-eval / report.

Every command takes a TOML config, a seed (flag overrides the config), and
an output directory; each writes a run manifest listing the artifacts it
produced. Reports are plain CSV/text plus self-contained SVG plots —
no plotting library involved.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:  # py >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import InvalidConfig, PriorForecastError
from .forecaster import load_params, save_params
from .metrics import (
    ACTION_CLASSES,
    evaluate,
    report_to_csv,
    report_to_json,
)
from .planner_eval import evaluate_planner, planning_csv
from .scene_gen import (
    WORLD_KINDS,
    DatasetConfig,
    WorldSpec,
    generate_dataset,
    load_dataset,
)
from .training import load_config, train

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def n_workers() -> int:
    """Worker cap from PRIORFORECAST_THREADS: unset=1, 0=auto, N=N."""
    raw = os.environ.get("PRIORFORECAST_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"PRIORFORECAST_THREADS={raw!r} is not an integer") from exc
    if n < 0:
        raise InvalidConfig("PRIORFORECAST_THREADS must be >= 0")
    if n == 0:
        return os.cpu_count() or 1
    return n


# --- run manifest ---------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    dataset_manifest: str | None = None
    checkpoint: str | None = None
    init_checkpoint: str | None = None
    reports: list = field(default_factory=list)
    created: str = ""
    finished: str = ""

    def write(self, out_dir: Path):
        self.finished = _now()
        path = Path(out_dir) / "run_manifest.json"
        payload = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "dataset_manifest": self.dataset_manifest,
            "checkpoint": self.checkpoint,
            "init_checkpoint": self.init_checkpoint,
            "reports": self.reports,
            "created": self.created,
            "finished": self.finished,
        }
        for key in ("dataset_manifest", "checkpoint", "init_checkpoint"):
            ref = payload[key]
            if ref is not None and not Path(ref).exists():
                raise InvalidConfig(f"manifest references missing {key}: {ref}")
        for ref in payload["reports"]:
            if not Path(ref).exists():
                raise InvalidConfig(f"manifest references missing report: {ref}")
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _config_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


# --- configs --------------------------------------------------------------------

def load_generate_config(path, seed_override=None) -> DatasetConfig:
    """[generate] section + top-level seed -> DatasetConfig."""
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    gen = raw.get("generate", {})
    known = {"n_scenes", "actors_min", "actors_max", "noncompliance_rate",
             "speed_min", "speed_max", "worlds"}
    unknown = set(gen) - known
    if unknown:
        raise InvalidConfig(f"[generate] has unknown keys: {sorted(unknown)}")
    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise InvalidConfig("config must set a top-level seed (or pass --seed)")
    kinds = gen.get("worlds", list(WORLD_KINDS))
    for k in kinds:
        if k not in WORLD_KINDS:
            raise InvalidConfig(f"unknown world kind {k!r}")
    kwargs = {}
    if "n_scenes" in gen:
        kwargs["n_scenes"] = int(gen["n_scenes"])
    if "actors_min" in gen:
        kwargs["actors_min"] = int(gen["actors_min"])
    if "actors_max" in gen:
        kwargs["actors_max"] = int(gen["actors_max"])
    if "noncompliance_rate" in gen:
        kwargs["noncompliance_rate"] = float(gen["noncompliance_rate"])
    if "speed_min" in gen or "speed_max" in gen:
        kwargs["speed_range"] = (float(gen.get("speed_min", 3.0)),
                                 float(gen.get("speed_max", 15.0)))
    return DatasetConfig(seed=int(seed),
                         worlds=tuple(WorldSpec(k) for k in kinds), **kwargs)


def _experiment_config(args):
    cfg = load_config(args.config)
    base = Path(args.config).resolve().parent
    cfg = replace(cfg, train_dir=_resolve(base, cfg.train_dir),
                  eval_dir=_resolve(base, cfg.eval_dir))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _eval_scenes(cfg):
    if cfg.eval_dir is None:
        raise InvalidConfig("config [dataset] must set eval_dir for evaluation")
    return load_dataset(cfg.eval_dir)


def _ckpt_label(path: Path, taken) -> str:
    label = path.stem
    if label == "checkpoint":
        label = path.resolve().parent.name
    base, k = label, 2
    while label in taken:
        label = f"{base}_{k}"
        k += 1
    return label


# --- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    cfg = load_generate_config(args.config, args.seed)
    manifest = RunManifest("gen", _config_hash(args.config), cfg.seed,
                           created=_now())
    generate_dataset(cfg, out)
    manifest.dataset_manifest = str(out / "manifest.json")
    manifest.write(out)
    print(f"wrote {cfg.n_scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _experiment_config(args)
    if args.epochs is not None:
        cfg = replace(cfg, optim=replace(cfg.optim, epochs=args.epochs))
    manifest = RunManifest("train", _config_hash(args.config), cfg.seed,
                           created=_now())
    from .forecaster import default_architecture

    arch = default_architecture()
    params0 = None
    if args.init is not None:
        params0, arch = load_params(args.init)
        manifest.init_checkpoint = str(Path(args.init))

    def progress(epoch, row):
        print(f"epoch {epoch}: loss={row.loss_total:.4f} "
              f"sym={row.loss_sym:.4f} prior={row.loss_prior:.4f}")

    params, history = train(cfg, params0=params0, arch=arch, progress=progress)
    ckpt = out / "checkpoint.bin"
    save_params(ckpt, params, arch)
    hist_path = out / "history.csv"
    history.write_csv(hist_path)
    manifest.dataset_manifest = str(Path(cfg.train_dir) / "manifest.json")
    manifest.checkpoint = str(ckpt)
    manifest.reports = [str(hist_path)]
    manifest.write(out)
    print(f"wrote {ckpt}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _experiment_config(args)
    params, arch = load_params(args.checkpoint)
    scenes = _eval_scenes(cfg)
    report = evaluate(params, scenes, seed=cfg.seed, arch=arch,
                      workers=n_workers())
    csv_path = out / "metrics.csv"
    csv_path.write_text(report_to_csv(report))
    json_path = out / "metrics.json"
    json_path.write_text(report_to_json(report))
    manifest = RunManifest("eval", _config_hash(args.config), cfg.seed,
                           created=_now())
    manifest.dataset_manifest = str(Path(cfg.eval_dir) / "manifest.json")
    manifest.checkpoint = str(Path(args.checkpoint))
    manifest.reports = [str(csv_path), str(json_path)]
    manifest.write(out)
    print(report_to_csv(report), end="")
    return 0


def cmd_plan_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _experiment_config(args)
    params, arch = load_params(args.checkpoint)
    scenes = _eval_scenes(cfg)
    report = evaluate_planner(params, scenes, seed=cfg.seed, arch=arch,
                              workers=n_workers())
    label = _ckpt_label(Path(args.checkpoint), set())
    csv_path = out / "planning.csv"
    csv_path.write_text(planning_csv([(label, report)]))
    manifest = RunManifest("plan-eval", _config_hash(args.config), cfg.seed,
                           created=_now())
    manifest.dataset_manifest = str(Path(cfg.eval_dir) / "manifest.json")
    manifest.checkpoint = str(Path(args.checkpoint))
    manifest.reports = [str(csv_path)]
    manifest.write(out)
    print(planning_csv([(label, report)]), end="")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _experiment_config(args)
    ckpt_paths = [Path(p) for p in args.compare.split(",") if p]
    if not ckpt_paths:
        raise InvalidConfig("--compare needs at least one checkpoint")
    scenes = _eval_scenes(cfg)
    workers = n_workers()

    models = []  # (label, params, arch, history_rows or None)
    for p in ckpt_paths:
        params, arch = load_params(p)
        label = _ckpt_label(p, {m[0] for m in models})
        hist = _read_history(p.parent / "history.csv")
        models.append((label, params, arch, hist))

    reports = {}
    planning = []
    for label, params, arch, _ in models:
        reports[label] = evaluate(params, scenes, seed=cfg.seed, arch=arch,
                                  workers=workers)
        planning.append((label, evaluate_planner(params, scenes, seed=cfg.seed,
                                                 arch=arch, workers=workers)))

    artifacts = []
    for label, rep in reports.items():
        p = out / f"metrics_{label}.csv"
        p.write_text(report_to_csv(rep))
        artifacts.append(p)
    plan_path = out / "planning.csv"
    plan_path.write_text(planning_csv(planning))
    artifacts.append(plan_path)

    summary = _summary_table(reports, planning)
    txt_path = out / "report.txt"
    txt_path.write_text(summary)
    artifacts.append(txt_path)

    curves = _loss_curves_svg([(label, hist) for label, _, _, hist in models])
    if curves:
        p = out / "loss_curves.svg"
        p.write_text(curves)
        artifacts.append(p)
    bars = _metric_bars_svg(reports)
    p = out / "metrics_bars.svg"
    p.write_text(bars)
    artifacts.append(p)
    overlay = _scene_overlay_svg(models, scenes[0], cfg.seed)
    p = out / "scene_samples.svg"
    p.write_text(overlay)
    artifacts.append(p)

    manifest = RunManifest("report", _config_hash(args.config), cfg.seed,
                           created=_now())
    manifest.dataset_manifest = str(Path(cfg.eval_dir) / "manifest.json")
    manifest.reports = [str(a) for a in artifacts]
    manifest.write(out)
    print(summary, end="")
    return 0


def _read_history(path: Path):
    if not path.exists():
        return None
    rows = []
    lines = path.read_text().strip().splitlines()
    for line in lines[1:]:
        cells = line.split(",")
        rows.append((int(cells[0]), float(cells[1])))
    return rows


def _summary_table(reports, planning) -> str:
    lines = ["Forecasting (per action class; FLE gated on GT endpoint in reach)"]
    header = f"{'model':<28}{'class':<10}{'count':>6}{'FLE%':>9}{'meanADE':>9}{'minADE':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for label, rep in reports.items():
        for cls in ACTION_CLASSES:
            cm = rep.classes.get(cls)
            if cm is None:
                continue
            fle = f"{cm.fle:.2f}" if cm.fle is not None else "-"
            lines.append(f"{label:<28}{cls:<10}{cm.count:>6}{fle:>9}"
                         f"{cm.meanade:>9.3f}{cm.minade:>9.3f}")
    lines.append("")
    lines.append("Planning (open loop, 5 s horizon)")
    header = (f"{'model':<28}{'collision%':>11}{'L2 human':>10}{'lat acc':>9}"
              f"{'jerk':>8}{'progress':>10}")
    lines.append(header)
    lines.append("-" * len(header))
    for label, rep in planning:
        lines.append(f"{label:<28}{rep.collision_rate:>11.2f}{rep.l2_human:>10.3f}"
                     f"{rep.lat_accel:>9.3f}{rep.jerk:>8.3f}{rep.progress:>10.3f}")
    return "\n".join(lines) + "\n"


# --- svg -----------------------------------------------------------------------

def _svg_doc(width, height, body) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        + body + "</svg>\n"
    )


def _loss_curves_svg(histories) -> str | None:
    """Training loss vs epoch, one polyline per model with a history file."""
    histories = [(label, h) for label, h in histories if h]
    if not histories:
        return None
    w, h, m = 640, 400, 50
    all_pts = [p for _, rows in histories for p in rows]
    e_max = max(e for e, _ in all_pts) or 1
    lo = min(v for _, v in all_pts)
    hi = max(v for _, v in all_pts)
    span = (hi - lo) or 1.0

    def sx(e):
        return m + (w - 2 * m) * e / e_max

    def sy(v):
        return h - m - (h - 2 * m) * (v - lo) / span

    body = [f'<line x1="{m}" y1="{h-m}" x2="{w-m}" y2="{h-m}" stroke="black"/>',
            f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h-m}" stroke="black"/>',
            f'<text x="{w//2}" y="{h-10}" font-size="12" text-anchor="middle">epoch</text>',
            f'<text x="14" y="{h//2}" font-size="12" transform="rotate(-90 14 {h//2})" text-anchor="middle">training loss</text>']
    for k in range(5):
        v = lo + span * k / 4
        y = sy(v)
        body.append(f'<line x1="{m-4}" y1="{y:.1f}" x2="{m}" y2="{y:.1f}" stroke="black"/>')
        body.append(f'<text x="{m-8}" y="{y+4:.1f}" font-size="10" text-anchor="end">{v:.1f}</text>')
    for i, (label, rows) in enumerate(histories):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in rows)
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<rect x="{w-m-150}" y="{m+18*i}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{w-m-132}" y="{m+18*i+10}" font-size="11">{label}</text>')
    return _svg_doc(w, h, "\n".join(body) + "\n")


def _metric_bars_svg(reports) -> str:
    """Grouped bars: one panel per metric, classes on x, model colored."""
    metrics = (("final lane error (%)", "fle"), ("meanADE (m)", "meanade"),
               ("minADE (m)", "minade"))
    panel_w, h, m = 300, 260, 40
    w = panel_w * len(metrics)
    body = []
    labels = list(reports)
    for pi, (title, attr) in enumerate(metrics):
        x0 = pi * panel_w
        vals = {}
        for label in labels:
            for cls in ACTION_CLASSES:
                cm = reports[label].classes.get(cls)
                v = getattr(cm, attr) if cm is not None else None
                vals[(label, cls)] = v
        present = [v for v in vals.values() if v is not None]
        hi = max(present) if present else 1.0
        hi = hi or 1.0
        body.append(f'<text x="{x0+panel_w/2:.0f}" y="16" font-size="12" text-anchor="middle">{title}</text>')
        body.append(f'<line x1="{x0+m}" y1="{h-m}" x2="{x0+panel_w-10}" y2="{h-m}" stroke="black"/>')
        group_w = (panel_w - m - 10) / len(ACTION_CLASSES)
        bar_w = group_w / (len(labels) + 1)
        for ci, cls in enumerate(ACTION_CLASSES):
            gx = x0 + m + ci * group_w
            body.append(f'<text x="{gx+group_w/2:.1f}" y="{h-m+14}" font-size="10" text-anchor="middle">{cls}</text>')
            for li, label in enumerate(labels):
                v = vals[(label, cls)]
                if v is None:
                    continue
                bh = (h - 2 * m) * v / hi
                bx = gx + bar_w * (li + 0.5)
                body.append(
                    f'<rect x="{bx:.1f}" y="{h-m-bh:.1f}" width="{bar_w:.1f}" '
                    f'height="{bh:.1f}" fill="{PALETTE[li % len(PALETTE)]}"/>'
                )
    for li, label in enumerate(labels):
        body.append(f'<rect x="{10+li*150}" y="{h-16}" width="10" height="10" fill="{PALETTE[li % len(PALETTE)]}"/>')
        body.append(f'<text x="{24+li*150}" y="{h-7}" font-size="10">{label}</text>')
    return _svg_doc(w, h, "\n".join(body) + "\n")


def _scene_overlay_svg(models, scene, seed) -> str:
    """Qualitative panel per model: lanes, boxes, GT futures, samples."""
    from .forecaster import forward, sample_waypoint_array
    from .priors import prepare_scene

    panel_w, panel_h = 460, 360
    pad = 20
    xs, ys_ = [], []
    for seg in scene.graph.segments.values():
        xs.extend(seg.polygon[:, 0])
        ys_.extend(seg.polygon[:, 1])
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys_), max(ys_)
    scale = min((panel_w - 2 * pad) / max(x1 - x0, 1e-9),
                (panel_h - 2 * pad - 16) / max(y1 - y0, 1e-9))

    def to_px(pts, ox):
        # world y up -> svg y down
        pts = np.asarray(pts, dtype=float)
        px = ox + pad + (pts[..., 0] - x0) * scale
        py = 16 + pad + (y1 - pts[..., 1]) * scale
        return np.stack([px, py], axis=-1)

    def poly(pts, ox, **style):
        s = " ".join(f"{p[0]:.1f},{p[1]:.1f}" for p in to_px(pts, ox))
        attrs = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in style.items())
        return f'<polyline points="{s}" {attrs}/>'

    body = []
    prepared = prepare_scene(scene, mode="reinforce")
    for mi, (label, params, arch, _) in enumerate(models):
        ox = mi * panel_w
        body.append(f'<text x="{ox+panel_w/2:.0f}" y="14" font-size="12" text-anchor="middle">{label}</text>')
        for seg in scene.graph.segments.values():
            ring = np.vstack([seg.polygon, seg.polygon[:1]])
            body.append(poly(ring, ox, fill="none", stroke="#bbbbbb",
                             stroke_width="0.8"))
        color = PALETTE[mi % len(PALETTE)]
        for pa in prepared:
            dist = forward(params, pa.features, arch)
            rng = np.random.default_rng(np.random.SeedSequence((seed, pa.scene_seed, pa.actor_id)))
            samp, _, _ = sample_waypoint_array(dist, 8, rng, smooth=True)
            for s in samp:
                world = pa.pose.to_world(s)
                body.append(poly(world, ox, fill="none", stroke=color,
                                 stroke_width="0.7", stroke_opacity="0.45"))
        for actor in scene.actors:
            body.append(poly(actor.future_gt, ox, fill="none", stroke="black",
                             stroke_width="1.2"))
            corners = actor.box.corners()
            body.append(poly(np.vstack([corners, corners[:1]]), ox,
                             fill="none", stroke="#333333", stroke_width="1"))
        sdv_c = scene.sdv.box.corners()
        body.append(poly(np.vstack([sdv_c, sdv_c[:1]]), ox, fill="none",
                         stroke="#0055cc", stroke_width="1.5"))
    return _svg_doc(panel_w * len(models), panel_h, "\n".join(body) + "\n")


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="priorforecast",
        description="Synthetic-scene trajectory forecasting with prior-knowledge rewards",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, compare=False, epochs=False):
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint file to evaluate")
        if compare:
            p.add_argument("--compare", required=True,
                           help="comma-separated checkpoint paths")
        if epochs:
            p.add_argument("--epochs", type=int, default=None,
                           help="override [optim] epochs")
            p.add_argument("--init", default=None,
                           help="checkpoint to start from instead of fresh weights")

    common(sub.add_parser("gen", help="generate a scene dataset"))
    common(sub.add_parser("train", help="train a forecaster"), epochs=True)
    common(sub.add_parser("eval", help="forecasting metrics"), checkpoint=True)
    common(sub.add_parser("plan-eval", help="planner metrics"), checkpoint=True)
    common(sub.add_parser("report", help="comparison report with plots"),
           compare=True)
    return ap


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan-eval": cmd_plan_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except PriorForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
