"""Command-line front end.

    resus gen-data | train | prune | repair | eval | diagnose | sweep  [--config FILE]

Exit codes: 0 success, 1 invariant violation, 2 missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import diagnostics as diag
from . import pipeline as pl
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .pruning import SparsityConfig, apply_mask_permanent, load_mask, make_mask, save_mask, sparsity_report
from .repair import RepairConfig, RepairPlan, repair_model
from .tensor import NonFiniteError
from .trainer import TrainingDiverged, evaluate

log = logging.getLogger("resus")

EXIT_OK, EXIT_INVARIANT, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class StageError(Exception):
    def __init__(self, stage: str, code: int, msg: str):
        super().__init__(msg)
        self.stage, self.code = stage, code


class Outputs:
    """Tracks files a command creates so they can be removed if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self.paths.append(path)
        return path

    def rollback(self):
        for p in self.paths:
            p.unlink(missing_ok=True)


# ------------------------------------------------------------ helpers


def _sparsity_from_args(cfg: RunConfig, args) -> SparsityConfig:
    mode = getattr(args, "mode", None) or cfg.sparsity.mode
    if getattr(args, "rate", None) is not None:
        mode = getattr(args, "mode", None) or "global_l1"
    if mode == "global_l1":
        rate = args.rate if getattr(args, "rate", None) is not None else cfg.sparsity.rate
        return SparsityConfig("global_l1", rate=rate)
    n = getattr(args, "n", None) or cfg.sparsity.n
    m = getattr(args, "m", None) or cfg.sparsity.m
    return SparsityConfig("nm", n=n, m=m)


def _repair_from_args(cfg: RunConfig, args) -> RepairConfig:
    rc = cfg.repair
    changes = {}
    if getattr(args, "method", None):
        changes["method"] = args.method
    if getattr(args, "prior", None):
        changes["prior_mode"] = args.prior
    if getattr(args, "prior_value", None) is not None:
        changes["prior_value"] = args.prior_value
    if getattr(args, "no_bias_correction", False):
        changes["bias_correction"] = False
    return dataclasses.replace(rc, **changes) if changes else rc


def _budget(cfg: RunConfig, args) -> int:
    b = getattr(args, "b", None)
    return cfg.calib.b if b is None else b


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _append_report(cfg: RunConfig, ws: pl.Workspace, rows: list[dict], out: Outputs) -> Path:
    """Append rows to the running report (JSON keeps all rows; CSV is rewritten from them)."""
    jpath = ws.report("report", "json")
    prev = diag.load_report(jpath)["results"] if jpath.exists() else []
    jpath.parent.mkdir(parents=True, exist_ok=True)
    out.add(jpath)
    diag.emit_report(prev + rows, jpath, "json")
    if cfg.report_format == "csv":
        diag.emit_report(prev + rows, out.add(ws.report("report", "csv")), "csv")
    return jpath


# ------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    train_split, test = pl.make_data(cfg)
    out.add(ws.data("train"))
    out.add(ws.data("test"))
    pl.save_data(ws, train_split, test)
    print(f"wrote {len(train_split)} train / {len(test)} test images to {ws.data('train').parent}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    train_split, test = pl.load_data(ws)
    net, params = pl.train_dense(cfg, train_split)
    save_checkpoint(out.add(ws.dense), net, params)
    print(f"dense top-1 {evaluate(net, params, test):.4f} -> {ws.dense}")
    return EXIT_OK


def cmd_prune(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    net, dense = load_checkpoint(_require(ws.dense, "dense checkpoint"))
    sp = _sparsity_from_args(cfg, args)
    mask = make_mask(net, dense, sp)
    pruned = apply_mask_permanent(dense, mask)
    save_checkpoint(out.add(ws.pruned(sp.key)), net, pruned)
    ws.mask(sp.key).parent.mkdir(parents=True, exist_ok=True)
    save_mask(out.add(ws.mask(sp.key)), mask)
    rep = sparsity_report(mask)
    print(f"{sp.key}: sparsity {rep['sparsity']:.4f} ({rep['zeros']}/{rep['total']} zeros) "
          f"mask {mask.digest()[:12]}")
    return EXIT_OK


def cmd_repair(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    train_split, _ = pl.load_data(ws)
    net, dense = load_checkpoint(_require(ws.dense, "dense checkpoint"))
    sp = _sparsity_from_args(cfg, args)
    pnet, pruned = load_checkpoint(_require(ws.pruned(sp.key), "pruned checkpoint"))
    rc = _repair_from_args(cfg, args)
    b = _budget(cfg, args)
    calib = pl.calibration_images(train_split, cfg.calib.n_images, cfg.seed)
    repaired, plan = repair_model((net, dense), (pnet, pruned), calib, rc)
    final = pl.recalibrate(net, repaired, train_split, b, cfg.calib.batch_size, cfg.seed)
    tag = pl.repair_tag(rc)
    save_checkpoint(out.add(ws.repaired(sp.key, tag, b)), net, final)
    plan.save(out.add(ws.plan(sp.key, tag)))
    print(f"repaired {sp.key} with {tag}, b={b} -> {ws.repaired(sp.key, tag, b)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    train_split, test = pl.load_data(ws)
    net, dense = load_checkpoint(_require(ws.dense, "dense checkpoint"))
    acc_dense = evaluate(net, dense, test)
    sp = _sparsity_from_args(cfg, args)
    stage = args.stage
    if stage == "dense":
        print(f"top-1 {acc_dense:.4f}")
        row = {"run_id": f"{net.arch}-s{cfg.seed}-dense", "seed": cfg.seed, "arch": net.arch,
               "method": "none", "accuracy_top1": acc_dense, "accuracy_dense": acc_dense,
               "status": "ok"}
    elif stage == "pruned":
        _, pruned = load_checkpoint(_require(ws.pruned(sp.key), "pruned checkpoint"))
        acc = evaluate(net, pruned, test)
        print(f"top-1 {acc:.4f}")
        row = {"run_id": f"{net.arch}-s{cfg.seed}-{sp.key}-none", "seed": cfg.seed,
               "arch": net.arch, "sparsity": sp.describe(), "method": "none",
               "accuracy_top1": acc, "accuracy_dense": acc_dense, "accuracy_no_repair": acc,
               "status": "ok"}
    else:
        rc = _repair_from_args(cfg, args)
        b = _budget(cfg, args)
        tag = pl.repair_tag(rc)
        _, final = load_checkpoint(_require(ws.repaired(sp.key, tag, b), "repaired checkpoint"))
        _, pruned = load_checkpoint(_require(ws.pruned(sp.key), "pruned checkpoint"))
        mask = load_mask(_require(ws.mask(sp.key), "mask"))
        mask.target = sp.describe()
        calib = pl.calibration_images(train_split, cfg.calib.n_images, cfg.seed)
        state = _state_from(net, dense, pruned, mask, sp, calib, test, rc.epsilon)
        row = pl.cell_row(cfg, net, state, rc, b, final, calib, test, acc_dense)
        print(f"top-1 {row['accuracy_top1']:.4f}")
    _append_report(cfg, ws, [row], out)
    return EXIT_OK


def _state_from(net, dense, pruned, mask, sp, calib, test, eps) -> pl.SparsityState:
    st = pl.prepare_sparsity(net, dense, sp, calib, test, eps)
    if st.mask.digest() != mask.digest():
        raise ValueError("stored mask does not match the mask recomputed from the dense checkpoint")
    if not st.pruned.equals(pruned):
        raise ValueError("stored pruned checkpoint does not match the stored mask")
    return st


def cmd_diagnose(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    train_split, _ = pl.load_data(ws)
    net, dense = load_checkpoint(_require(ws.dense, "dense checkpoint"))
    sp = _sparsity_from_args(cfg, args)
    _, pruned = load_checkpoint(_require(ws.pruned(sp.key), "pruned checkpoint"))
    calib = pl.calibration_images(train_split, cfg.calib.n_images, cfg.seed)
    paired = pl.collect_paired((net, dense), (net, pruned), calib)
    b = _budget(cfg, args)
    repaired = {}
    slopes = {}
    for m in ("bn_only", "layerwise", "channel_raw", "asr"):
        tag = pl.repair_tag(dataclasses.replace(cfg.repair, method=m))
        p = ws.repaired(sp.key, tag, b)
        if p.exists():
            repaired[tag] = pl.variance_snapshot(net, load_checkpoint(p)[1], calib)
            slopes[tag] = pl.slopes_for(paired, repaired[tag])
    slopes["none"] = pl.slopes_for(paired, {i: paired.pruned[i].var for i in paired.layer_ids})
    _, ident = repair_model((net, dense), (net, pruned), calib, RepairConfig(method="bn_only"))
    doc = {
        "sparsity": sp.describe(),
        "calib": {"n_images": int(len(calib)), "b": b},
        "severity": diag.pruning_severity(paired),
        "overshoot": diag.lw_overshoot(ident),
        "slopes": slopes,
        "heatmap": [h.to_dict() for h in diag.heatmap_stats(paired, repaired)],
    }
    path = out.add(ws.report(f"diagnostics-{sp.key}", "json"))
    pl.write_json(path, doc)
    print(f"severity {doc['severity']:.4f}  overshoot {doc['overshoot']:.4f} -> {path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args, out: Outputs) -> int:
    ws = pl.Workspace(cfg.output_dir)
    if not (ws.data("train").exists() and ws.data("test").exists()):
        log.info("no dataset under %s, generating", ws.root)
        cmd_gen_data(cfg, args, out)
    train_split, test = pl.load_data(ws)
    if not ws.dense.exists():
        log.info("no dense checkpoint, training")
        cmd_train(cfg, args, out)
    net, dense = load_checkpoint(ws.dense)
    rows = pl.sweep(cfg, train_split, test, net, dense, ws)
    path = ws.report("sweep", cfg.report_format)
    path.parent.mkdir(parents=True, exist_ok=True)
    diag.emit_report(rows, out.add(path), cfg.report_format)
    bad = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells ({bad} failed) -> {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "prune": cmd_prune,
    "repair": cmd_repair,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


# ------------------------------------------------------------ argument parsing


def _csv(kind):
    def parse(s):
        return [kind(x) for x in s.split(",") if x]
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--output-dir", type=Path)
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    sparsity = argparse.ArgumentParser(add_help=False)
    sparsity.add_argument("--rate", type=float, help="global L1 sparsity")
    sparsity.add_argument("--mode", choices=["global_l1", "nm"])
    sparsity.add_argument("--n", type=int)
    sparsity.add_argument("--m", type=int)

    repair = argparse.ArgumentParser(add_help=False)
    repair.add_argument("--method", choices=["bn_only", "layerwise", "channel_raw", "asr"])
    repair.add_argument("--prior", choices=["median", "mean", "fixed"])
    repair.add_argument("--prior-value", type=float)
    repair.add_argument("--no-bias-correction", action="store_true")
    repair.add_argument("--b", type=int, help="recalibration batches")

    p = argparse.ArgumentParser(prog="resus", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train the dense model")
    sub.add_parser("prune", parents=[common, sparsity], help="prune the dense model")
    sub.add_parser("repair", parents=[common, sparsity, repair],
                   help="repair + BN-recalibrate a pruned model")
    ev = sub.add_parser("eval", parents=[common, sparsity, repair], help="top-1 accuracy")
    ev.add_argument("--stage", choices=["dense", "pruned", "repaired"], default="repaired")
    dg = sub.add_parser("diagnose", parents=[common, sparsity], help="variance diagnostics")
    dg.add_argument("--b", type=int)
    sw = sub.add_parser("sweep", parents=[common], help="methods x sparsities x budgets")
    sw.add_argument("--methods", type=_csv(str))
    sw.add_argument("--rates", type=_csv(float), help="global L1 rates; replaces the sparsity list")
    sw.add_argument("--budgets", type=_csv(int))
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.output_dir is not None:
        o["output_dir"] = str(args.output_dir)
    if args.seed is not None:
        o["seed"] = args.seed
    sweep = {}
    if getattr(args, "methods", None):
        sweep["methods"] = args.methods
    if getattr(args, "rates", None):
        sweep["sparsities"] = [{"mode": "global_l1", "rate": r} for r in args.rates]
    if getattr(args, "budgets", None):
        sweep["budgets"] = args.budgets
    if sweep:
        o["sweep"] = sweep
    return o


def _classify(e: BaseException) -> int:
    if isinstance(e, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(e, (NonFiniteError, TrainingDiverged, FloatingPointError, diag.DiagnosticError)):
        return EXIT_NUMERIC
    return EXIT_INVARIANT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        try:
            cfg = load_config(args.config, _overrides(args))
        except (ConfigError, ValueError) as e:
            raise StageError("config", EXIT_INVARIANT, str(e)) from e
        except FileNotFoundError as e:
            raise StageError("config", EXIT_MISSING, str(e)) from e
        try:
            return COMMANDS[args.command](cfg, args, out)
        except Exception as e:  # noqa: BLE001
            raise StageError(args.command, _classify(e), f"{type(e).__name__}: {e}") from e
    except StageError as e:
        out.rollback()
        print(f"resus {e.stage}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
