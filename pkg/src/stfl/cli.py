"""Command-line driver: ``stfl gen-data | pretrain-style | run | report``.

Everything that affects results comes from the JSON config; flags cover only
operational concerns. Exit codes: 0 ok, 2 config error, 3 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from stfl import __version__
from stfl.dataset_io import export_dataset, import_dataset, read_manifest
from stfl.engine import checkpoint
from stfl.models import architecture_report
from stfl.errors import ConfigError, STFLError
from stfl.evaluation import MetricSample, improvement_report, metrics_table
from stfl.experiment import (ExperimentConfig, build_data, run_cell, style_kind_for, train_style, trial_seed)
from stfl.report import (IMPROVEMENT_HEADER, METRIC_HEADER, improvement_svg, metric_rows, read_csv, render_table,
                         round_row, rounds_header, write_csv)
from stfl.style import StyleArtifacts, load_cyclegan, save_cyclegan

log = logging.getLogger("stfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    return Path(override or cfg.output_dir or "results")


def data_dir(out: Path, dataset_type: str, n: int) -> Path:
    return out / "data" / dataset_type / f"n{n}"


def style_dir(out: Path, dataset_type: str, n: int, trial: int, kind: str) -> Path:
    return out / "style" / dataset_type / f"n{n}" / f"trial{trial}" / kind


def run_dir(out: Path, dataset_type: str, n: int, scheme: str, trial: int) -> Path:
    return out / "runs" / dataset_type / f"n{n}" / scheme / f"trial{trial}"


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> list[Path]:
    roots = []
    data_cfg = cfg.to_dict()["data"]
    for dt in cfg.grid.dataset_types:
        for n in cfg.grid.n_clients:
            root = data_dir(out, dt, n)
            tag = {"data": data_cfg, "dataset_type": dt, "n_clients": n}
            try:
                if read_manifest(root).get("config") == tag:
                    roots.append(root)
                    continue
            except ConfigError:
                pass
            clients, style = build_data(cfg, dt, n)
            export_dataset(root, clients, style, tag)
            log.info("wrote dataset %s", root)
            roots.append(root)
    return roots


# ---------------------------------------------------------------- pretrain-style

def _style_kinds(cfg: ExperimentConfig) -> list[str]:
    kinds = []
    for s in cfg.grid.schemes:
        k = style_kind_for(cfg, s)
        if k != "none" and k not in kinds:
            kinds.append(k)
    return kinds


def _load_data(out: Path, dt: str, n: int):
    root = data_dir(out, dt, n)
    if not (root / "manifest.json").exists():
        raise ConfigError(f"dataset directory {root} is missing; run `stfl gen-data` first")
    return import_dataset(root)


def _ckpt_paths(clients, kind: str, d: Path) -> list[Path]:
    if kind == "universal":
        return [d / "universal.stflckpt"]
    return [d / f"client_{c.client_id}.stflckpt" for c in clients if not c.is_style_target]


def cmd_pretrain_style(cfg: ExperimentConfig, out: Path) -> list[Path]:
    kinds = _style_kinds(cfg)
    if not kinds:
        print("no style pretraining needed: grid has no CycleGAN schemes")
        return []
    written = []
    for dt in cfg.grid.dataset_types:
        for n in cfg.grid.n_clients:
            clients, style, _ = _load_data(out, dt, n)
            for trial in range(cfg.grid.trials):
                for kind in kinds:
                    d = style_dir(out, dt, n, trial, kind)
                    paths = _ckpt_paths(clients, kind, d)
                    if all(p.exists() for p in paths):
                        written += paths
                        continue
                    arts = train_style(cfg, clients, style, kind, trial)
                    d.mkdir(parents=True, exist_ok=True)
                    for p, state in zip(paths, arts.stylizers.values()):
                        save_cyclegan(state, p)
                    written += paths
                    log.info("pretrained %s style for %s n=%d trial=%d", kind, dt, n, trial)
    return written


def _load_artifacts(out: Path, clients, dt: str, n: int, trial: int, kind: str) -> StyleArtifacts:
    if kind == "none":
        return StyleArtifacts("none")
    paths = _ckpt_paths(clients, kind, style_dir(out, dt, n, trial, kind))
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"missing style checkpoint {missing[0]}; run `stfl pretrain-style` first")
    if kind == "universal":
        return StyleArtifacts.universal(load_cyclegan(paths[0]))
    ids = [c.client_id for c in clients if not c.is_style_target]
    return StyleArtifacts.client_specific({i: load_cyclegan(p) for i, p in zip(ids, paths)})


# ---------------------------------------------------------------- run

def _run_one(args) -> str:
    cfg_dict, out, dt, n, scheme, trial = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(out)
    rd = run_dir(out, dt, n, scheme, trial)
    clients, _, manifest = _load_data(out, dt, n)
    arts = _load_artifacts(out, clients, dt, n, trial, style_kind_for(cfg, scheme))
    rd.mkdir(parents=True, exist_ok=True)
    ids = [0] if scheme == "centralized" and len(clients) > 1 else [c.client_id for c in clients]
    rows_path = rd / "rounds.csv"
    digest = cfg.digest()
    rows_path.write_text(f"# config_digest={digest}\n" + ",".join(rounds_header(ids)) + "\n", encoding="utf-8")

    def append(rec):
        with rows_path.open("a", encoding="utf-8") as fh:
            fh.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in round_row(rec)) + "\n")

    res = run_cell(cfg, clients, arts, scheme, trial, on_round=append)
    checkpoint.save(rd / "best.stflckpt", res.best_params, {"kind": "unet", "scheme": scheme, "trial": trial})
    best_idx = max(range(len(res.records)), key=lambda i: res.records[i].val_dice) if res.records else None
    run_manifest = {
        "status": "complete", "config_digest": digest, "dataset_digest": manifest["dataset_digest"],
        "version": __version__,
        "cell": {"dataset_type": dt, "n_clients": n, "scheme": scheme, "trial": trial, "trial_seed": trial_seed(trial)},
        "federation": res.fed_config.to_dict(), "style": cfg.to_dict()["style"],
        "best_round": best_idx, "best_dice": res.best_dice, "best_iou": res.best_iou,
        "val_dice_curve": [r.val_dice for r in res.records], "val_iou_curve": [r.val_iou for r in res.records],
        "per_client": res.per_client,
    }
    (rd / "manifest.json").write_text(json.dumps(run_manifest, indent=1, sort_keys=True), encoding="utf-8")
    return str(rd)


def _cell_done(rd: Path, digest: str) -> bool:
    p = rd / "manifest.json"
    if not p.exists():
        return False
    m = json.loads(p.read_text(encoding="utf-8"))
    return m.get("status") == "complete" and m.get("config_digest") == digest


def cmd_run(cfg: ExperimentConfig, out: Path, force: bool = False, jobs: int = 1) -> list[Path]:
    digest = cfg.digest()
    cfg_path = out / "config.json"
    if cfg_path.exists():
        prev = json.loads(cfg_path.read_text(encoding="utf-8"))
        if prev.get("config_digest") != digest:
            if not force:
                raise ConfigError(f"{out} holds results of a different config; use --force to overwrite")
            for sub in ("runs", "style", "data"):
                shutil.rmtree(out / sub, ignore_errors=True)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path.write_text(json.dumps({"config_digest": digest, "config": cfg.to_dict()}, indent=1, sort_keys=True),
                        encoding="utf-8")
    cmd_gen_data(cfg, out)
    if _style_kinds(cfg):
        cmd_pretrain_style(cfg, out)
    todo = [(cfg.to_dict(), str(out), dt, n, s, t) for dt, n, s, t in cfg.cells()
            if not _cell_done(run_dir(out, dt, n, s, t), digest)]
    log.info("%d cells to run (%d already complete)", len(todo), sum(1 for _ in cfg.cells()) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_one, todo))
    else:
        for args in todo:
            _run_one(args)
    write_reports(out, svg=False, improvement=False)
    return [run_dir(out, dt, n, s, t) for dt, n, s, t in cfg.cells()]


# ---------------------------------------------------------------- report

def collect(results: Path) -> tuple[list[MetricSample], dict, str | None]:
    samples, curves = [], defaultdict(list)
    digest = None
    cfg_path = results / "config.json"
    if cfg_path.exists():
        digest = json.loads(cfg_path.read_text(encoding="utf-8")).get("config_digest")
    for p in sorted((results / "runs").glob("*/n*/*/trial*/manifest.json")):
        m = json.loads(p.read_text(encoding="utf-8"))
        if m.get("status") != "complete":
            continue
        c = m["cell"]
        samples.append(MetricSample(c["scheme"], c["dataset_type"], c["n_clients"], c["trial"], m["best_dice"],
                                    m["best_iou"], tuple((pc["noise"], pc["dice"]) for pc in m["per_client"])))
        curves[(c["scheme"], c["dataset_type"], c["n_clients"], "dice")].append(m["val_dice_curve"])
        curves[(c["scheme"], c["dataset_type"], c["n_clients"], "iou")].append(m["val_iou_curve"])
    if not samples:
        raise ConfigError(f"no completed runs under {results / 'runs'}")
    return samples, curves, digest


def write_reports(results: Path, svg: bool = False, improvement: bool = True) -> list[Path]:
    samples, curves, digest = collect(results)
    table = metrics_table(samples)
    write_csv(results / "metrics_table.csv", METRIC_HEADER, metric_rows(table, curves), digest)
    (results / "table.txt").write_text(render_table(table), encoding="utf-8")
    written = [results / "metrics_table.csv", results / "table.txt"]
    if improvement:
        rows = improvement_report(samples)
        write_csv(results / "improvement.csv", IMPROVEMENT_HEADER,
                  [[r[h] for h in IMPROVEMENT_HEADER] for r in rows], digest)
        written.append(results / "improvement.csv")
        if svg:
            rows = [{**r, "pct_mean": float(r["pct_mean"])} for r in read_csv(results / "improvement.csv")]
            (results / "improvement.svg").write_text(improvement_svg(rows), encoding="utf-8")
            written.append(results / "improvement.svg")
    return written


# ---------------------------------------------------------------- entry point

def arch_report(cfg: ExperimentConfig) -> str:
    res = cfg.data.resolution
    parts = [architecture_report(cfg.unet_config(), res)]
    if _style_kinds(cfg):
        kw = cfg.style_kwargs()
        parts.append(architecture_report(kw["gen_cfg"], res))
        parts.append(architecture_report(kw["disc_cfg"], res))
    return "\n\n".join(parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stfl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stfl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("gen-data", "generate client datasets (PGM + manifest)"),
                           ("pretrain-style", "train CycleGAN stylizers"),
                           ("run", "run every grid cell and write manifests / round CSVs")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--output", help="output directory (default: config output_dir or ./results)")
        if name == "run":
            sp.add_argument("--force", action="store_true", help="overwrite results of a different config")
            sp.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")
    rp = sub.add_parser("report", help="write metrics table, improvement CSV and optional SVG")
    rp.add_argument("results", help="results directory of `stfl run`")
    rp.add_argument("--svg", action="store_true", help="also emit improvement.svg")
    ap = sub.add_parser("arch", help="print the U-Net and PatchGAN layer tables")
    ap.add_argument("config", nargs="?", help="experiment config (JSON); defaults if omitted")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            for path in write_reports(Path(args.results), svg=args.svg):
                print(path)
            return EXIT_OK
        if args.command == "arch":
            cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
            print(arch_report(cfg))
            return EXIT_OK
        cfg = ExperimentConfig.load(args.config)
        out = _out_dir(cfg, args.output)
        if args.command == "gen-data":
            paths = cmd_gen_data(cfg, out)
        elif args.command == "pretrain-style":
            paths = cmd_pretrain_style(cfg, out)
        else:
            paths = cmd_run(cfg, out, force=args.force, jobs=args.jobs)
        for path in paths:
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"stfl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (STFLError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"stfl: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
