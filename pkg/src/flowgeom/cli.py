"""Command-line entry point: ``flowgeom <command> [--config PATH] [--seed N] [--out DIR]``.

Commands write CSV/JSONL/RFT1 outputs under ``--out``.  Wall-clock metadata
goes to ``run_meta.json`` so that all other outputs are byte-identical across
reruns with the same config and seed.  Failures exit with status 1 (2 for usage
errors) and print a JSON object ``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .geometry import GeometryAnalyzer
from .io import emit_csv, emit_jsonl, read_tensor, to_jsonable, write_tensor
from .sampler import (
    SCHEDULES,
    GuidanceConfig,
    class_prototypes,
    decay_ratio,
    loglog_slope,
    make_grid,
    mmd_metric,
    integrate,
    mmd_null,
    prototype_accuracy,
    truncation_study,
)
from .synthdata import FeatureBatch, ManifoldOracle, generate, same_class_pairs, stream, train_eval_split
from .trainer import FlowModel, load_training, train

logger = logging.getLogger("flowgeom")


# --------------------------------------------------------------------------
# shared helpers


def dataset(cfg: RunConfig) -> tuple[FeatureBatch, FeatureBatch]:
    """Deterministic (train, eval) split of the configured generator."""
    batch = generate(cfg.data.spec, cfg.data.n)
    return train_eval_split(batch, cfg.data.train_fraction, seed=cfg.data.spec.seed)


def denoiser_for(cfg: RunConfig):
    s = cfg.data.spec.resolved()
    return replace(cfg.denoiser, channels=s.channels, height=s.height, width=s.width, n_classes=s.n_classes)


def run_config_from_checkpoint(meta: dict) -> RunConfig:
    if "run" not in meta:
        raise ConfigError("checkpoint carries no run configuration")
    return RunConfig.from_dict(meta["run"])


def _write_meta(out: Path, command: str, started: float, extra=None) -> None:
    meta = {
        "command": command,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "elapsed_s": round(time.time() - started, 3),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    meta.update(extra or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_geometry(cfg: RunConfig, out: Path, kinds=None, tensor=None) -> list[dict]:
    """Geometry report per dataset; ``tensor`` audits an external ``N x D`` RFT1 file."""
    g = cfg.geometry
    datasets = []
    if tensor is not None:
        dims, values = read_tensor(tensor)
        X = values.reshape(dims[0], -1).astype(np.float64)
        datasets.append((Path(tensor).stem, X, None, None))
    else:
        for kind in kinds or [cfg.data.spec.kind]:
            spec = replace(cfg.data.spec, kind=kind, seed=cfg.seed)
            batch = generate(spec, cfg.data.n)
            oracle = ManifoldOracle(spec, reference_size=g.oracle_reference)
            pairs = same_class_pairs(batch, g.interpolation_pairs, seed=cfg.seed)
            datasets.append((kind, batch.flat(), pairs, oracle))
    records = []
    for name, X, pairs, oracle in datasets:
        est = GeometryAnalyzer(n_components=g.n_components, subsample=g.subsample, bootstraps=g.bootstraps,
                               interpolation_steps=g.interpolation_steps, random_state=cfg.seed)
        est.fit(X, pairs=pairs, manifold_distance=oracle)
        rep = est.report_
        rec = {"dataset": name, **rep.to_record()}
        records.append(rec)
        emit_csv([{"t": t, "kappa": k} for t, k in rep.conditioning_curve], out / f"conditioning_{name}.csv")
        emit_csv([{"index": i + 1, "eigenvalue": v} for i, v in enumerate(rep.eigenvalues)],
                 out / f"spectrum_{name}.csv")
        if rep.interpolation_curve is not None:
            emit_csv([{"t": t, "sq_distance": d} for t, d in rep.interpolation_curve],
                     out / f"interpolation_{name}.csv")
    emit_jsonl(records, out / "geometry.jsonl")
    if len(records) > 1:
        summary = ordering_summary(records)
        (out / "ordering.json").write_text(json.dumps(to_jsonable(summary), indent=2) + "\n")
    return records


def ordering_summary(records: list[dict]) -> dict:
    by = {r["dataset"]: r for r in records}
    names = list(by)
    out = {"datasets": names}
    for key, better in (("effective_rank", "desc"), ("kurtosis_median_abs", "asc"), ("kappa_0.9", "asc"),
                        ("interpolation_mid", "asc")):
        vals = {n: by[n].get(key) for n in names}
        if any(v is None for v in vals.values()):
            continue
        out[key] = sorted(names, key=lambda n: vals[n], reverse=(better == "desc"))
    return out


def cmd_train(cfg: RunConfig, out: Path, modes=None, resume=None, steps=None) -> dict:
    """Train one model per mode; ``resume`` continues from a checkpoint instead."""
    if resume is not None:
        state, stats, dcfg, tcfg, meta = load_training(resume)
        cfg = run_config_from_checkpoint(meta)
        tr, _ = dataset(cfg)
        res = train(dcfg, tcfg, tr, out_dir=out, steps=steps, resume=state, stats=stats,
                    extra_meta={"run": cfg.to_dict()})
        return {"resumed": res.state.step}
    tr, _ = dataset(cfg)
    dcfg = denoiser_for(cfg)
    modes = modes or [cfg.trainer.mode]
    summary = {}
    for mode in modes:
        tcfg = replace(cfg.trainer, mode=mode, seed=cfg.seed)
        run_cfg = replace(cfg, trainer=tcfg)
        sub = out / mode if len(modes) > 1 else out
        sub.mkdir(parents=True, exist_ok=True)
        dump_config(run_cfg, sub / "config.yaml")
        res = train(dcfg, tcfg, tr, out_dir=sub, steps=steps, extra_meta={"run": run_cfg.to_dict()})
        losses = [m["loss"] for m in res.metrics]
        tail = max(1, min(50, len(losses)))
        summary[mode] = {"steps": res.state.step, "final_loss": float(np.mean(losses[-tail:])),
                         "rejected": res.state.n_rejected, "checkpoint": str(sub / "final.npz")}
    (out / "train_summary.json").write_text(json.dumps(to_jsonable(summary), indent=2) + "\n")
    return summary


def _guidance(scfg, enabled=None) -> GuidanceConfig:
    g = scfg.guidance_config()
    return g if enabled is None else replace(g, enabled=enabled)


def evaluate_samples(model: FlowModel, cfg: RunConfig, n: int, schedule: str, K: int, solver: str,
                     guidance: GuidanceConfig | None, cls_init: str, seed: int, reference: FeatureBatch):
    labels = np.arange(n) % model.null_label
    grid = make_grid(schedule, K, **({"shift": cfg.sampler.shift} if schedule == "timeshift" else {}))
    traj = integrate(model, grid, n, labels, stream(seed, "sample/noise"), solver=solver, cls_init=cls_init,
                     guidance=guidance)
    batch = model.decode(traj.batch())
    return batch, traj.nfe


def cmd_sample(checkpoint, out: Path, sampler=None, seed: int | None = None, overrides=None,
               ema: float | None = None) -> dict:
    """Sample with the checkpoint's sampler settings unless ``sampler`` replaces them.

    ``overrides`` (field -> value) are applied last; ``seed`` defaults to the run seed.
    """
    model = FlowModel.load(checkpoint, ema=ema)
    _, _, _, _, meta = load_training(checkpoint)
    cfg = run_config_from_checkpoint(meta)
    scfg = replace(sampler if sampler is not None else cfg.sampler, **(overrides or {}))
    seed = cfg.seed if seed is None else seed
    _, ev = dataset(cfg)
    batch, nfe = evaluate_samples(model, cfg, scfg.n, scfg.schedule, scfg.K, scfg.solver, _guidance(scfg),
                                  scfg.cls_init, seed, ev)
    C, H, W = batch.shape
    write_tensor(out / "samples.rft", [len(batch), C, H, W], batch.patches)
    write_tensor(out / "samples_cls.rft", [len(batch), C], batch.cls)
    emit_csv([{"index": i, "label": int(y)} for i, y in enumerate(batch.labels)], out / "labels.csv")
    ref = ev.take(np.arange(min(len(ev), 2000)))
    metrics = {
        "n": len(batch),
        "nfe": nfe,
        "schedule": scfg.schedule,
        "K": scfg.K,
        "solver": scfg.solver,
        "mmd": mmd_metric(batch, ref),
        "prototype_accuracy": prototype_accuracy(batch, batch.labels, class_prototypes(ev, model.null_label)),
    }
    emit_jsonl([metrics], out / "sample_metrics.jsonl")
    return metrics


def cmd_ablate_schedules(checkpoint, out: Path, K_list, schedules, guidance_modes=("off",),
                         cls_inits=("independent", "coupled"), n: int = 512, seed: int = 0,
                         n_perm: int = 100) -> list[dict]:
    """MMD matrix over schedule x K x CLS init x guidance, plus a null-band column."""
    if not schedules:
        raise ValueError("schedule list is empty")
    if not K_list:
        raise ValueError("K list is empty")
    for s in schedules:
        if s not in SCHEDULES:
            raise ValueError(f"unknown schedule {s!r}")
    model = FlowModel.load(checkpoint)
    _, _, _, _, meta = load_training(checkpoint)
    cfg = run_config_from_checkpoint(meta)
    _, ev = dataset(cfg)
    ref = ev.take(np.arange(min(len(ev), 2000)))
    null_hi = float(np.quantile(mmd_null(ev.take(np.arange(n)), ref, n_perm=n_perm, seed=seed), 0.95))
    rows = []
    for gmode in guidance_modes:
        gcfg = _guidance(cfg.sampler, enabled=(gmode == "on"))
        for schedule in schedules:
            for K in K_list:
                for cls_init in cls_inits:
                    batch, nfe = evaluate_samples(model, cfg, n, schedule, int(K), cfg.sampler.solver, gcfg,
                                                  cls_init, seed, ref)
                    rows.append({"schedule": schedule, "K": int(K), "cls_init": cls_init, "guidance": gmode,
                                 "nfe": nfe, "mmd": mmd_metric(batch, ref), "null95": null_hi})
    emit_csv(rows, out / "schedule_ablation.csv")
    return rows


def cmd_truncation(checkpoints, out: Path, seed: int = 0, K_list=(2, 5, 10, 25, 50), K_ref: int = 125,
                   n: int = 128) -> dict:
    if not checkpoints:
        raise ValueError("no checkpoints given")
    for c in checkpoints:
        if not Path(c).is_file():
            raise FileNotFoundError(f"missing checkpoint {c}")
    rows, summary = [], {}
    for c in checkpoints:
        model = FlowModel.load(c)
        table = truncation_study(model, K_list=K_list, K_ref=K_ref, n=n, seed=seed)
        name = Path(c).parent.name or Path(c).stem
        for r in table:
            rows.append({"checkpoint": name, "K": r.K, "mean": r.mean, "std": r.std})
        ks = [r.K for r in table if r.K != K_ref and r.mean > 0]
        means = [r.mean for r in table if r.K != K_ref and r.mean > 0]
        summary[name] = {
            "decay_ratio": decay_ratio(table, min(K_list), max(k for k in K_list if k != K_ref)),
            "loglog_slope": loglog_slope(ks, means) if len(ks) >= 2 else None,
        }
    emit_csv(rows, out / "truncation.csv")
    (out / "truncation_summary.json").write_text(json.dumps(to_jsonable(summary), indent=2) + "\n")
    return summary


# --------------------------------------------------------------------------
# argument parsing


def _csv_list(conv):
    def parse(text):
        return [conv(x) for x in text.split(",") if x.strip()] if text else []
    return parse


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors surface as JSON like every other failure
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed (overrides config)")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="flowgeom", parents=[common],
                                description="Flow-matching and representation-geometry experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("geometry", parents=[common], help="geometry diagnostics")
    g.add_argument("--kinds", type=_csv_list(str), help="comma list of generator kinds")
    g.add_argument("--tensor", type=Path, help="audit an RFT1 tensor (first dim = samples)")

    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("--mode", choices=["x", "v", "both"], help="prediction mode; 'both' runs a paired x/v ablation")
    t.add_argument("--steps", type=int, help="number of steps (overrides config)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")

    s = sub.add_parser("sample", parents=[common], help="sample from a checkpoint")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--n", type=int)
    s.add_argument("--schedule", choices=SCHEDULES)
    s.add_argument("--K", type=int)
    s.add_argument("--solver", choices=["euler", "heun"])
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--no-guidance", action="store_true")
    s.add_argument("--cls-init", choices=["independent", "coupled"])

    a = sub.add_parser("ablate-schedules", parents=[common], help="schedule x K MMD matrix")
    a.add_argument("checkpoint", type=Path)
    a.add_argument("--K-list", type=_csv_list(int), default=[2, 5, 10, 25, 50])
    a.add_argument("--schedules", type=_csv_list(str), default=list(SCHEDULES))
    a.add_argument("--guidance", choices=["off", "on", "both"], default="off")
    a.add_argument("--n", type=int, default=512)

    r = sub.add_parser("truncation", parents=[common], help="truncation-error study")
    r.add_argument("checkpoints", type=Path, nargs="*")
    r.add_argument("--K-list", type=_csv_list(int), default=[2, 5, 10, 25, 50])
    r.add_argument("--K-ref", type=int, default=125)
    r.add_argument("--n", type=int, default=128)
    return p


def _run(args) -> object:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig(experiment=args.command)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out = Path(getattr(args, "out", None) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    cmd = args.command
    if cmd == "geometry":
        result = cmd_geometry(cfg, out, kinds=args.kinds, tensor=args.tensor)
    elif cmd == "train":
        modes = ["x", "v"] if args.mode == "both" else ([args.mode] if args.mode else None)
        result = cmd_train(cfg, out, modes=modes, resume=args.resume, steps=args.steps)
    elif cmd == "sample":
        over = {k: v for k, v in (("n", args.n), ("schedule", args.schedule), ("K", args.K),
                                  ("solver", args.solver), ("guidance_scale", args.cfg_scale),
                                  ("cls_init", args.cls_init)) if v is not None}
        if args.no_guidance:
            over["guidance"] = False
        has_cfg = bool(getattr(args, "config", None))
        result = cmd_sample(args.checkpoint, out, sampler=cfg.sampler if has_cfg else None,
                            seed=cfg.seed if (has_cfg or seed is not None) else None, overrides=over)
    elif cmd == "ablate-schedules":
        gmodes = ("off", "on") if args.guidance == "both" else (args.guidance,)
        result = cmd_ablate_schedules(args.checkpoint, out, args.K_list, args.schedules, guidance_modes=gmodes,
                                      n=args.n, seed=cfg.seed)
    else:
        result = cmd_truncation(args.checkpoints, out, seed=cfg.seed, K_list=args.K_list, K_ref=args.K_ref,
                                n=args.n)
    _write_meta(out, cmd, started, {"seed": cfg.seed})
    return result


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error record
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    if getattr(args, "verbose", False):
        print(json.dumps(to_jsonable(result), indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
