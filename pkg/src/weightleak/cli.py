"""Command-line entry point: ``weightleak {simulate,attack,sweep,compare,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 the simulation or
an attack diverged.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .attacks.core import AttackResult
from .config import read_config
from .dataio import export_image, read_results, write_results, write_summary_csv
from .exceptions import AttackDiverged, ConfigError, ContractError, DegenerateUpdateError, FormatError, SimulationError
from .flsim import FORMAT_VERSION, load_wiretap, save_wiretap

log = logging.getLogger("weightleak")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


def _fresh(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


def _load(args):
    cfg = read_config(args.config)
    return cfg.override(**{"attack.iterations": getattr(args, "iterations", None),
                            "trials": getattr(args, "trials", None)})


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = cfg.override(**{"federation.seed": args.seed})
    wiretap = ex.simulate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.federation.seed, "config_sha256": cfg.digest(), "model": cfg.model}
    save_wiretap(wiretap, out / "wiretap.bin", meta)
    manifest = dict(meta, updates=len(wiretap), format_version=FORMAT_VERSION,
                    transmit=cfg.federation.transmit, config=cfg.doc)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    log.info("wrote %d updates to %s", len(wiretap), out / "wiretap.bin")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg.attack.seed
    wiretap, meta = load_wiretap(args.wiretap)
    if meta.get("model", cfg.model) != cfg.model:
        raise ContractError(f"wiretap was recorded for {meta['model']}, config names {cfg.model}")
    out = Path(args.out)
    results = _fresh(out / "results.jsonl")
    (out / "images").mkdir(exist_ok=True)
    status = EXIT_OK
    for upd in wiretap:
        try:
            res = ex.attack_update(upd, cfg, seed)
        except AttackDiverged as exc:
            log.error("round %d client %d: %s", upd.round, upd.client, exc)
            status = EXIT_DIVERGED
            continue
        write_results([dict(round=upd.round, client=upd.client, algorithm=cfg.attack.objective,
                            trial=0, **res.to_dict())], results)
        for i, img in enumerate(res.recovered):
            fmt = "pgm" if img.shape[0] == 1 else "ppm"
            export_image(img.clip(0, 1), out / "images" / f"r{upd.round}_c{upd.client}_{i}.{fmt}", fmt)
        log.info("round %d client %d: loss %.3g psnr %s", upd.round, upd.client, res.final_loss,
                 "n/a" if res.final_psnr is None else f"{res.final_psnr:.2f}")
    return status


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = cfg.override(seed_base=args.seed)
    records = ex.run_sweep(cfg, args.jobs)
    out = Path(args.out)
    write_results(records, _fresh(out / "results.jsonl"))
    rows = ex.sweep_rows(records)
    write_summary_csv(rows, _fresh(out / "sweep.csv"), ["algorithm", "grid", "seed", "psnr", "ssim", "success"])
    print(ex.markdown_table(ex.summarize(records)), end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg = cfg.override(seed_base=args.seed)
    records = ex.run_compare(cfg, args.jobs)
    out = Path(args.out)
    write_results(records, _fresh(out / "results.jsonl"))
    return _report(records, out)


def _report(records, out: Path) -> int:
    rows = ex.summarize(records)
    write_summary_csv(rows, _fresh(out / "summary.csv"))
    table = ex.markdown_table(rows)
    (out / "report.md").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_results(args.results)
    if not records:
        raise ConfigError(f"{args.results} holds no results")
    for r in records:
        AttackResult.from_dict(r)  # validates each line
    return _report(records, Path(args.out))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightleak", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, type=Path, help="JSON run configuration")
            sp.add_argument("--seed", type=int, help="override the run seed")
            sp.add_argument("--iterations", type=int, help="override attack.iterations")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default $WEIGHTLEAK_JOBS or 1)")

    sp = sub.add_parser("simulate", help="run a federation and record its wiretap")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    sp = sub.add_parser("attack", help="attack every update in a wiretap")
    common(sp)
    sp.add_argument("--wiretap", required=True, type=Path)
    sp.set_defaults(func=cmd_attack)
    for name, fn, help_ in (("sweep", cmd_sweep, "seeded sweep over one parameter"),
                            ("compare", cmd_compare, "all algorithms over shared seeds")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--trials", type=int, help="override the number of seeded trials")
        sp.set_defaults(func=fn)
    sp = sub.add_parser("report", help="summary table from a results file")
    common(sp, config=False)
    sp.add_argument("--results", required=True, type=Path)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.jobs is None:
        args.jobs = ex.default_jobs()
    try:
        return args.func(args)
    except (ConfigError, ContractError, DegenerateUpdateError, FormatError, FileNotFoundError) as exc:
        print(f"weightleak: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttackDiverged, SimulationError) as exc:
        print(f"weightleak: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
