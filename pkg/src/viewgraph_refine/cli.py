"""``viewgraph-refine`` command line.

Stages write plain files under the work dir::

    synth/<split>/graph_NNNNN.json, synth/manifest.json
    initial/<split>/...                 init-poses
    checkpoints/posernet.json, history.csv
    refined/<split>/...                 refine
    averaged/<stage>/<split>/...        average
    reports/                            eval, report

Exit codes: 0 success, 1 I/O error, 2 invalid input or missing artifact,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import graph as vg
from . import metrics, pipeline
from .eig import GaugeFixError, IllConditionedSpectrumError
from .posernet.model import InvalidOutputError, NumericOverflowError, refine_graph
from .posernet.train import TrainingDivergedError, history_csv, load_checkpoint, save_checkpoint, train
from .se3 import DegenerateBaselineError, DegenerateMatrixError, InvalidInputError

log = logging.getLogger("viewgraph_refine")

COMMANDS = ("synth", "init-poses", "train", "refine", "average", "eval", "report")
STAGES = ("initial", "refined")
RESOLVED_CONFIG = "resolved_config.json"


class MissingArtifactError(FileNotFoundError):
    pass


class ValidationFailure(ValueError):
    pass


NUMERIC_ERRORS = (
    NumericOverflowError,
    TrainingDivergedError,
    IllConditionedSpectrumError,
    GaugeFixError,
    InvalidOutputError,
    DegenerateMatrixError,
    DegenerateBaselineError,
    FloatingPointError,
)
INPUT_ERRORS = (
    cfgmod.ConfigError,
    vg.GraphLoadError,
    vg.GraphValidationError,
    MissingArtifactError,
    ValidationFailure,
    InvalidInputError,
)


# ---------------------------------------------------------------------------
# files


class Workspace:
    def __init__(self, config: cfgmod.PipelineConfig):
        self.config = config
        self.root = Path(config.paths.work_dir)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def stage_dir(self, stage: str, split: str) -> Path:
        return self.root / stage / split

    def echo_config(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / RESOLVED_CONFIG).write_text(cfgmod.dumps(self.config))

    def write_graphs(self, stage: str, split: str, named: list[tuple[str, vg.ViewGraph]]) -> Path:
        d = self.stage_dir(stage, split)
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("graph_*.json"):
            old.unlink()
        for name, g in named:
            vg.save(g, d / name)
        self.echo_config(d)
        return d

    def read_graphs(self, stage: str, split: str, hint: str, require_poses: bool = True) -> list[tuple[str, vg.ViewGraph]]:
        d = self.stage_dir(stage, split)
        files = sorted(d.glob("graph_*.json")) if d.is_dir() else []
        if not files and not (d / RESOLVED_CONFIG).exists():
            raise MissingArtifactError(f"expected graph files in {d}; run `viewgraph-refine {hint}` first")
        out = []
        for f in files:
            try:
                g = vg.load(f)
            except vg.GraphLoadError as exc:
                raise vg.GraphLoadError(f"{f}: {exc}") from exc
            msg = vg.first_violation(g, require_connected=True)
            if msg is None and require_poses and any(e.pose is None for e in g.edges):
                msg = "edge has no relative pose"
            if msg is not None:
                raise ValidationFailure(f"{f}: {msg}")
            out.append((f.name, g))
        return out


def graph_name(index: int) -> str:
    return f"graph_{index:05d}.json"


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ws: Workspace, args) -> None:
    c = ws.config
    manifest = {"rng_seed": c.rng_seed, "graphs": []}
    for split, count in c.dataset.counts().items():
        named = []
        for i in range(count):
            g = pipeline.make_graph(c.scene, c.rng_seed, split, i)
            named.append((graph_name(i), g))
            manifest["graphs"].append(
                {
                    "split": split,
                    "index": i,
                    "file": f"{split}/{graph_name(i)}",
                    "scene_seed": pipeline.graph_seed(c.rng_seed, split, i),
                    "noise_seed": pipeline.noise_seed(c.rng_seed, split, i),
                }
            )
        ws.write_graphs("synth", split, named)
        log.info("synth: %d %s graphs", count, split)
    _write_json(ws.root / "synth" / "manifest.json", manifest)
    ws.echo_config(ws.root / "synth")


def cmd_init_poses(ws: Workspace, args) -> None:
    c = ws.config
    noise = c.noise_model()
    report = {"mode": c.init.mode, "graphs": []}
    for split in pipeline.SPLITS:
        named = []
        for name, g in ws.read_graphs("synth", split, "synth", require_poses=False):
            index = int(name[6:11])
            out, rep = pipeline.initialize(g, c.init.mode, noise, c.ransac, pipeline.noise_seed(c.rng_seed, split, index))
            entry = {"split": split, "file": name, "edges": len(out.edges)}
            if rep is not None:
                entry["dropped"] = [list(d) for d in rep.dropped]
                entry["connected"] = rep.connected
                if not rep.connected:
                    log.warning("init-poses: %s/%s disconnected after dropping edges; skipped", split, name)
                    report["graphs"].append(entry)
                    continue
            report["graphs"].append(entry)
            named.append((name, out))
        ws.write_graphs("initial", split, named)
    _write_json(ws.root / "initial" / "init_report.json", report)
    ws.echo_config(ws.root / "initial")


def cmd_train(ws: Workspace, args) -> None:
    c = ws.config
    train_graphs = [g for _, g in ws.read_graphs("initial", "train", "init-poses")]
    val_graphs = [g for _, g in ws.read_graphs("initial", "val", "init-poses")]
    if not train_graphs or not val_graphs:
        raise ValidationFailure("training needs at least one train and one val graph")
    ckpt = ws.path(c.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train(train_graphs, val_graphs, c.train)
    except TrainingDivergedError as exc:
        (ckpt.parent / "history.csv").write_text(history_csv(exc.history))
        raise
    save_checkpoint(ckpt, result.params, c.train)
    (ckpt.parent / "history.csv").write_text(history_csv(result.history))
    ws.echo_config(ckpt.parent)
    log.info("train: best epoch %d, checkpoint %s", result.best_epoch, ckpt)


def cmd_refine(ws: Workspace, args) -> None:
    c = ws.config
    ckpt = ws.path(c.paths.checkpoint)
    if not ckpt.exists():
        raise MissingArtifactError(f"expected checkpoint {ckpt}; run `viewgraph-refine train` first")
    try:
        params, tcfg = load_checkpoint(ckpt)
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationFailure(f"{ckpt}: unreadable checkpoint ({exc})") from exc
    for split in args.split or ["test"]:
        named = [(n, refine_graph(params, g, tcfg.depth, tcfg.pixel_scale)) for n, g in ws.read_graphs("initial", split, "init-poses")]
        ws.write_graphs("refined", split, named)


def cmd_average(ws: Workspace, args) -> None:
    c = ws.config
    for stage in args.stage or ["refined"]:
        for split in args.split or ["test"]:
            named, runs = [], []
            for n, g in ws.read_graphs(stage, split, _producer(stage)):
                out, res = pipeline.average(g, c.irls)
                named.append((n, out))
                runs.append({"file": n, "converged": res.converged, "iterations": res.iterations, "weights": res.weights.tolist()})
            d = ws.write_graphs(f"averaged/{stage}", split, named)
            _write_json(d / "irls_report.json", runs)


def _producer(stage: str) -> str:
    return {"initial": "init-poses", "refined": "refine"}.get(stage, stage)


def evaluate_stage(ws: Workspace, stage: str, split: str) -> dict:
    """Per-graph error lists for one stage."""
    rel = ws.read_graphs(stage, split, _producer(stage))
    doc = {"stage": stage, "split": split, "files": [n for n, _ in rel], "rot_deg": [], "tdir_deg": []}
    for _, g in rel:
        rot, tdir = pipeline.relative_graph_errors(g)
        doc["rot_deg"].append(rot.tolist())
        doc["tdir_deg"].append(tdir.tolist())
    avg_dir = ws.stage_dir(f"averaged/{stage}", split)
    if avg_dir.is_dir():
        doc["abs_rot_deg"], doc["t_m"] = [], []
        for _, g in ws.read_graphs(f"averaged/{stage}", split, f"average --stage {stage}"):
            rot, dist = pipeline.absolute_graph_errors(g)
            doc["abs_rot_deg"].append(rot.tolist())
            doc["t_m"].append(dist.tolist())
    return doc


def summaries_from_eval(doc: dict) -> tuple[dict, dict]:
    """``(relative, absolute)`` metric -> ErrorSummary maps."""
    rel = {
        "rot_deg": metrics.summarize_graphs(doc["rot_deg"], metrics.ROTATION_THRESHOLDS_DEG),
        "tdir_deg": metrics.summarize_graphs(doc["tdir_deg"], metrics.ROTATION_THRESHOLDS_DEG),
    }
    ab = {}
    if "abs_rot_deg" in doc:
        ab = {
            "rot_deg": metrics.summarize_graphs(doc["abs_rot_deg"], metrics.ROTATION_THRESHOLDS_DEG),
            "t_m": metrics.summarize_graphs(doc["t_m"], metrics.TRANSLATION_THRESHOLDS_M),
        }
    return rel, ab


def write_report(out_dir: Path, docs: list[dict], basename: str) -> str:
    labels, summaries = [], []
    abs_labels, abs_summaries = [], []
    for doc in docs:
        rel, ab = summaries_from_eval(doc)
        labels.append(doc["stage"])
        summaries.append(rel)
        if ab:
            abs_labels.append(doc["stage"])
            abs_summaries.append(ab)
    table, csv_text = metrics.report_table(summaries, labels)
    (out_dir / f"{basename}_relative.csv").write_text(csv_text)
    text = "Relative poses\n" + table
    if abs_summaries:
        abs_table, abs_csv = metrics.report_table(abs_summaries, abs_labels)
        (out_dir / f"{basename}_absolute.csv").write_text(abs_csv)
        text += "\nAbsolute poses\n" + abs_table
    (out_dir / f"{basename}.txt").write_text(text)
    return text


def cmd_eval(ws: Workspace, args) -> None:
    out_dir = ws.path(ws.config.paths.reports)
    stages = args.stage or [s for s in STAGES if ws.stage_dir(s, "test").is_dir()] or ["initial"]
    split = (args.split or ["test"])[0]
    docs = []
    for stage in stages:
        doc = evaluate_stage(ws, stage, split)
        _write_json(out_dir / f"eval_{stage}.json", doc)
        docs.append(doc)
    ws.echo_config(out_dir)
    print(write_report(out_dir, docs, "eval"), end="")


def cmd_report(ws: Workspace, args) -> None:
    out_dir = ws.path(ws.config.paths.reports)
    files = sorted(out_dir.glob("eval_*.json")) if out_dir.is_dir() else []
    if not files:
        raise MissingArtifactError(f"no eval_*.json in {out_dir}; run `viewgraph-refine eval` first")
    docs = [json.loads(f.read_text()) for f in files]
    order = {s: k for k, s in enumerate(STAGES)}
    docs.sort(key=lambda d: (order.get(d["stage"], len(order)), d["stage"]))
    for doc in docs:
        for metric in ("rot_deg", "tdir_deg", "abs_rot_deg", "t_m"):
            if metric in doc:
                means = [float(np.mean(e)) for e in doc[metric] if e]
                (out_dir / f"distribution_{doc['stage']}_{metric}.csv").write_text(metrics.rolling_distribution(means, 50))
    ws.echo_config(out_dir)
    print(write_report(out_dir, docs, "report"), end="")


HANDLERS = {
    "synth": cmd_synth,
    "init-poses": cmd_init_poses,
    "train": cmd_train,
    "refine": cmd_refine,
    "average": cmd_average,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewgraph-refine", description="View-graph pose refinement pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config field")
    p.add_argument("--nodes", type=int, help="cameras per graph; 125 selects the large-graph preset")
    p.add_argument("--mode", choices=cfgmod.INIT_MODES, help="initial edge source for init-poses")
    p.add_argument("--stage", action="append", help="stage for average/eval (initial or refined); repeatable")
    p.add_argument("--split", action="append", choices=pipeline.SPLITS, help="split for refine/average/eval")
    p.add_argument("--work-dir", help=f"work directory (also ${cfgmod.WORK_DIR_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = cfgmod.resolve(args.config, args.set, args.nodes, args.mode, args.work_dir)
        HANDLERS[args.command](Workspace(config), args)
    except NUMERIC_ERRORS as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
