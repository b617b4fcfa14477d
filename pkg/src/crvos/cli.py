"""Command-line interface: ``python -m crvos <command> [flags]``.

Commands: train, eval, bench, ablate, render, synth. Each writes
``manifest.json`` into its run directory (``--out``) before doing any work and
keeps every output inside that directory.

Configuration precedence is CLI flags > ``--config`` file > built-in defaults;
the fully resolved config is echoed into the manifest.

Exit codes: 0 success, 1 runtime failure (e.g. training diverged),
2 bad arguments, configuration, paths or data.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .config import (DATA_ROOT_ENV, VARIANT_FLAGS, VARIANTS, ConfigError, RunConfig, config_from_dict,
                     dump_config, seed_everything, to_plain)
from .data import build_dataset, resize_policy, write_davis_layout
from .geometry import STRIDE
from .metrics import aggregate, evaluate
from .model import CRVOS, load_checkpoint
from .propagation import benchmark, run_sequence
from .render import render_sequence
from .training import TrainingDiverged, run_stage

log = logging.getLogger("crvos")

REPORT_SCHEMA = "crvos-eval/1"
REPORT_COLUMNS = ("sequence", "fps", "J", "F", "J&F")


# ---------------------------------------------------------------- config


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"--config: {path} does not exist")
    raw = yaml.safe_load(path.read_text())
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw or {}


def _flag_overrides(args) -> dict:
    """Dotted-key overrides from the dedicated flags and ``--set key=value``."""
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    if args.seed is not None:
        out["model.seed"] = out["train.seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        out["model.variant"] = args.variant
    if getattr(args, "hard_clue", None):
        out["model.hard_clue_mask"] = True
    if getattr(args, "combine", None) is not None:
        out["model.combine"] = args.combine
    if getattr(args, "data_root", None) is not None:
        out["data.kind"] = "davis"
        out["data.root"] = args.data_root
    return out


def resolve_config(args) -> RunConfig:
    raw = _read_yaml(args.config) if args.config else {}
    for dotted, value in _flag_overrides(args).items():
        section, _, key = dotted.partition(".")
        if section not in ("model", "train", "data") or not key:
            raise ConfigError(f"unknown config key {dotted!r}; expected model.*, train.* or data.*")
        raw[section] = dict(raw.get(section) or {})
        raw[section][key] = value
    return config_from_dict(raw)


def _device(name: Optional[str]) -> torch.device:
    try:
        device = torch.device(name or "cpu")
    except RuntimeError as exc:
        raise ConfigError(f"--device: {exc}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError("--device cuda requested but CUDA is not available")
    return device


# ---------------------------------------------------------------- manifest


def artifact_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: str
    config_path: Optional[str]
    seed: Optional[int]
    version: str
    out_dir: str
    started: str
    finished: Optional[str] = None
    status: str = "running"
    argv: list = dataclasses.field(default_factory=list)
    config: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)
    error: Optional[str] = None

    @property
    def dir(self) -> Path:
        return Path(self.out_dir)

    def write(self) -> None:
        (self.dir / "manifest.json").write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    def finish(self, status: str = "ok", error: Optional[str] = None) -> None:
        self.status, self.error, self.finished = status, error, _now()
        self.write()


def start_run(command: str, args, config: Optional[RunConfig]) -> RunManifest:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    out = Path(args.out) if args.out else Path("runs") / f"{command}-{stamp}"
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(command, args.config, config.train.seed if config else args.seed,
                               artifact_version(), str(out), _now(), argv=list(args.argv),
                               config=to_plain(config) if config else {})
        manifest.write()
    except OSError as exc:
        raise ConfigError(f"--out: cannot write run directory {out}: {exc}") from exc
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("crvos").addHandler(handler)
    args.run = manifest
    return manifest


# ---------------------------------------------------------------- inference helpers


def _snap(n: int) -> int:
    return max(STRIDE, int(round(n / STRIDE)) * STRIDE)


def _resize_labels(labels: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    im = Image.fromarray(labels.astype(np.int32), mode="I").resize((w, h), Image.NEAREST)
    return np.array(im).astype(np.int64)


def prepare_inputs(rec):
    """Frames and frame-0 labels at a stride-compatible size, plus the original size."""
    frames, first = rec.load_frames(), np.asarray(rec.mask(0))
    shape = frames.shape[1:3]
    target = (_snap(shape[0]), _snap(shape[1]))
    if target != tuple(shape):
        first = resize_policy(frames[0], first, target)[1]
        frames = np.stack([resize_policy(f, None, target)[0] for f in frames])
    return frames, first, tuple(shape)


def predict_record(model: CRVOS, rec, overlap_mode: str = "argmax"):
    """Label maps at the record's own resolution and the propagation fps."""
    frames, first, shape = prepare_inputs(rec)
    t0 = time.perf_counter()
    labels = run_sequence(frames, first, model, overlap_mode, rec.num_targets)
    wall = time.perf_counter() - t0
    if tuple(labels[0].shape) != shape:
        labels = [_resize_labels(lab, shape) for lab in labels]
    labels[0] = np.asarray(rec.mask(0))
    fps = (len(frames) - 1) / wall if len(frames) > 1 and wall > 0 else None
    return labels, fps


def evaluate_records(model, records, overlap_mode="argmax", tolerance_px=None, jobs=1, gt_as_pred=False):
    """Per-sequence ``(name, fps, EvalResult)``; frames without ground truth are not scored."""

    def one(rec):
        n = rec.num_annotated
        gts = list(rec.load_masks())
        if gt_as_pred:
            preds, fps = gts, None
        else:
            preds, fps = predict_record(model, rec, overlap_mode)
        return rec.name, fps, evaluate(preds[:n], gts, rec.num_targets, tolerance_px)

    scored = []
    for rec in records:
        if rec.num_annotated < 2 and len(rec) > 1:
            log.warning("sequence %s has only a frame-0 annotation; not scored", rec.name)
            continue
        scored.append(rec)
    if not scored:
        raise ConfigError("no evaluable sequences (each needs ground truth beyond frame 0)")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, scored))
    return [one(rec) for rec in scored]


def _pct(x: float) -> float:
    return round(100.0 * float(x), 1)


def build_report(results, metadata: Optional[dict] = None) -> dict:
    """Benchmark-style report: one row per sequence plus a dataset mean row (percent)."""
    rows = []
    for name, fps, res in results:
        rows.append({"sequence": name, "fps": None if fps is None else round(fps, 1),
                     "J": _pct(res.mean_J), "F": _pct(res.mean_F), "J&F": _pct(res.mean_JF)})
    agg = aggregate([res for _, _, res in results])
    fps_values = [fps for _, fps, _ in results if fps is not None]
    mean_fps = round(float(np.mean(fps_values)), 1) if fps_values else None
    mean = {"sequence": "mean", "fps": mean_fps, "J": _pct(agg["J"]), "F": _pct(agg["F"]), "J&F": _pct(agg["JF"])}
    return {"schema": REPORT_SCHEMA, "columns": list(REPORT_COLUMNS), "rows": rows, "mean": mean,
            "metadata": dict(metadata or {})}


def _cell(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def format_report(report: dict) -> str:
    """Fixed-width text table; numbers are percentages except fps."""
    width = max([len("sequence")] + [len(r["sequence"]) for r in report["rows"]]) + 2
    lines = ["sequence".ljust(width) + "".join(c.rjust(8) for c in REPORT_COLUMNS[1:])]
    for row in report["rows"] + [None, report["mean"]]:
        if row is None:
            lines.append("-" * (width + 8 * (len(REPORT_COLUMNS) - 1)))
            continue
        lines.append(row["sequence"].ljust(width) + "".join(_cell(row[c]).rjust(8) for c in REPORT_COLUMNS[1:]))
    return "\n".join(lines) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _load_model(args, device):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"--checkpoint: {path} does not exist")
    model, payload = load_checkpoint(path, expect_variant=args.variant)
    if args.hard_clue:
        model.config.hard_clue_mask = True
    if args.combine is not None:
        model.config.combine = args.combine
    return model.to(device).eval(), payload


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run = start_run("train", args, cfg)
    seed_everything(cfg.train.seed)
    device = _device(args.device)
    dataset = build_dataset(cfg.data, "train")
    dump_config(cfg, run.dir / "config.yaml")
    model = CRVOS(cfg.model).to(device)
    result = run_stage(model, dataset, cfg.train, out_dir=run.dir, resume=args.resume)
    final = result.epoch_losses[-1] if result.epoch_losses else None
    summary = {"steps": result.step, "epoch_losses": result.epoch_losses, "final_loss": final,
               "checkpoint": str(result.checkpoint)}
    _write_json(run.dir / "summary.json", summary)
    run.outputs = {"checkpoint": str(result.checkpoint), "log": str(run.dir / "train.log"),
                   "summary": str(run.dir / "summary.json")}
    run.finish()
    print(f"{result.step} updates, final epoch loss {final if final is None else round(final, 5)}, "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    run = start_run("eval", args, cfg)
    device = _device(args.device)
    model, payload = _load_model(args, device)
    cfg.model = model.config
    run.config = to_plain(cfg)
    run.write()
    records = build_dataset(cfg.data, "eval")[: args.max_sequences]
    results = evaluate_records(model, records, args.overlap, args.tolerance_px, args.jobs, args.gt_as_pred)
    meta = {"checkpoint": str(args.checkpoint), "variant": model.config.variant, "overlap": args.overlap,
            "tolerance_px": args.tolerance_px, "units": "J, F, J&F in percent; fps in frames per second",
            "fps_timing": "run_sequence wall time over frames 1..T-1; frames in memory, disk I/O excluded",
            "jobs": args.jobs, "gt_as_pred": bool(args.gt_as_pred)}
    report = build_report(results, meta)
    _write_json(run.dir / "report.json", report)
    text = format_report(report)
    (run.dir / "report.txt").write_text(text)
    run.outputs = {"report_json": str(run.dir / "report.json"), "report_txt": str(run.dir / "report.txt")}
    run.finish()
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    run = start_run("bench", args, cfg)
    device = _device(args.device)
    if args.checkpoint:
        model, _ = _load_model(args, device)
    else:
        seed_everything(cfg.model.seed)
        model = CRVOS(cfg.model).to(device).eval()
    records = build_dataset(cfg.data, "eval")[: args.sequences]
    reports = []
    for rep in range(args.repeats):
        for rec in records:
            frames, first, _ = prepare_inputs(rec)
            r = benchmark(frames, first, model, args.warmup, args.overlap, rec.num_targets)
            reports.append(dict(r.as_dict(), sequence=rec.name, repeat=rep))
    fps = [r["fps"] for r in reports]
    out = {"runs": reports, "median_fps": float(np.median(fps)), "device": str(device),
           "variant": model.config.variant, "torch_threads": torch.get_num_threads()}
    _write_json(run.dir / "bench.json", out)
    run.outputs = {"bench": str(run.dir / "bench.json")}
    run.finish()
    print(f"median fps {out['median_fps']:.1f} over {len(reports)} run(s)")
    return 0


def _median_row(rows: list) -> dict:
    return {k: float(np.median([r[k] for r in rows])) for k in ("JF", "J", "F")}


def format_ablation(table: list) -> str:
    head = f"{'Variant':<8}{'RM':>4}{'PM':>4}{'Clue':>6}{'J&F':>8}{'J':>8}{'F':>8}"
    lines = [head]
    for row in table:
        marks = ["x" if row[f] else "" for f in ("RM", "PM", "Clue")]
        lines.append(f"{row['variant']:<8}{marks[0]:>4}{marks[1]:>4}{marks[2]:>6}"
                     f"{row['J&F']:>8.1f}{row['J']:>8.1f}{row['F']:>8.1f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    variants = args.variants or list(VARIANTS)
    seeds = args.seeds or [cfg.train.seed]
    run = start_run("ablate", args, cfg)
    device = _device(args.device)
    train = build_dataset(cfg.data, "train")
    test = build_dataset(cfg.data, "eval")
    table, per_seed = [], {}
    for variant in variants:
        rows = []
        for seed in seeds:
            seed_everything(seed)
            mcfg = dataclasses.replace(cfg.model, variant=variant, seed=seed)
            tcfg = dataclasses.replace(cfg.train, seed=seed)
            model = CRVOS(mcfg).to(device)
            run_stage(model, train, tcfg, out_dir=run.dir / f"{variant}-seed{seed}")
            model.eval()
            agg = aggregate([res for _, _, res in
                             evaluate_records(model, test, args.overlap, args.tolerance_px, args.jobs)])
            rows.append(dict(agg, seed=seed))
            log.info("variant %s seed %d: J&F %.4f", variant, seed, agg["JF"])
        per_seed[variant] = rows
        med = _median_row(rows)
        table.append(dict(variant=variant, **VARIANT_FLAGS[variant],
                          **{"J&F": _pct(med["JF"]), "J": _pct(med["J"]), "F": _pct(med["F"])}))
    out = {"columns": ["variant", "RM", "PM", "Clue", "J&F", "J", "F"], "rows": table, "per_seed": per_seed,
           "seeds": seeds, "aggregation": "median over seeds; scores in percent"}
    _write_json(run.dir / "ablation.json", out)
    text = format_ablation(table)
    (run.dir / "ablation.txt").write_text(text)
    run.outputs = {"table_json": str(run.dir / "ablation.json"), "table_txt": str(run.dir / "ablation.txt")}
    run.finish()
    print(text, end="")
    return 0


def cmd_render(args) -> int:
    cfg = resolve_config(args)
    run = start_run("render", args, cfg)
    records = build_dataset(cfg.data, args.split)
    if not records:
        raise ConfigError("no sequences to render")
    names = [r.name for r in records]
    name = args.sequence or names[0]
    if name not in names:
        raise ConfigError(f"--sequence {name!r} not found; available: {', '.join(names)}")
    rec = records[names.index(name)]
    if args.checkpoint:
        model, _ = _load_model(args, _device(args.device))
        labels, _ = predict_record(model, rec, args.overlap)
        source = str(args.checkpoint)
    else:
        labels, source = list(rec.load_masks()), "ground truth"
    paths = render_sequence(rec.load_frames()[: len(labels)], labels, run.dir, alpha=args.alpha)
    run.outputs = {"sequence": name, "masks": source, "images": [str(p) for p in paths]}
    run.finish()
    print(f"wrote {len(paths) - 1} overlays and a contact sheet to {run.dir}")
    return 0


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    if cfg.data.kind != "synthetic":
        raise ConfigError("synth needs data.kind: synthetic")
    run = start_run("synth", args, cfg)
    splits = ("train", "eval") if args.split == "both" else (args.split,)
    for split in splits:
        write_davis_layout(run.dir / split, build_dataset(cfg.data, split))
    run.outputs = {split: str(run.dir / split) for split in splits}
    run.finish()
    print(f"wrote DAVIS-layout data to {', '.join(run.outputs.values())}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="sets model.seed and train.seed")
    common.add_argument("--out", help="run directory (default runs/<command>-<timestamp>)")
    common.add_argument("--device", default="cpu")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--data-root", help=f"DAVIS-layout root; sets data.kind=davis (default ${DATA_ROOT_ENV})")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--hard-clue", action="store_true", default=None, help="feed hardened masks to the Clue")
    common.add_argument("--combine", choices=("sum", "last"))
    common.add_argument("--log-level", default="INFO")

    infer = argparse.ArgumentParser(add_help=False)
    infer.add_argument("--overlap", choices=("argmax", "paint"), default="argmax")
    infer.add_argument("--tolerance-px", type=float, help="boundary tolerance (default 0.8%% of the diagonal)")
    infer.add_argument("--jobs", type=int, default=1, help="sequences evaluated in parallel threads")

    parser = argparse.ArgumentParser(prog="crvos", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, infer], help="propagate and score the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gt-as-pred", action="store_true", help="score ground truth against itself")
    p.add_argument("--max-sequences", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common, infer], help="time propagation on the eval split")
    p.add_argument("--checkpoint", help="default: a freshly initialized model from the config")
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--sequences", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common, infer], help="train and score several variants")
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--seeds", nargs="+", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", parents=[common, infer], help="overlay images and a contact sheet")
    p.add_argument("--checkpoint", help="default: render the ground-truth masks")
    p.add_argument("--sequence")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic dataset in DAVIS layout")
    p.add_argument("--split", choices=("train", "eval", "both"), default="both")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv, args.run = argv, None
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except TrainingDiverged as exc:
        code, msg = 1, f"training diverged: {exc}"
    except (ValueError, OSError) as exc:  # ConfigError, DataError, ShapeError are ValueErrors
        code, msg = 2, str(exc)
    except Exception as exc:
        log.exception("unexpected failure")
        code, msg = 1, f"{type(exc).__name__}: {exc}"
    else:
        msg = None
    finally:
        for h in list(logging.getLogger("crvos").handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger("crvos").removeHandler(h)
                h.close()
    if msg is not None:
        print(f"error: {msg}", file=sys.stderr)
        if args.run is not None:
            args.run.finish("failed", msg)
    return code
