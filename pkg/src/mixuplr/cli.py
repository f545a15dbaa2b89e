"""Command-line experiment harness: train, ablate-zeta, attack, audit, plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .lipschitz import audit_model
from .net import Model, load_checkpoint, save_checkpoint
from .robustness import SWEEP_HEADER, attack_eval
from .trainer import METRICS_HEADER, TrainingDiverged, eval_arrays, train

log = logging.getLogger("mixuplr")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def fmt(x) -> str:
    return "%.6g" % x


def _round6(obj):
    """Floats rounded through the 6-significant-digit text form, recursively."""
    if isinstance(obj, float):
        return float(fmt(obj))
    if isinstance(obj, (np.floating,)):
        return float(fmt(float(obj)))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_round6(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return fmt(v)


def _zeta_tag(z) -> str:
    return fmt(float(z))


def _thread_cap() -> int:
    raw = os.environ.get("MIXUPLR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MIXUPLR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MIXUPLR_THREADS must be a positive integer, got {raw!r}")
    return n


def _run_jobs(fn, jobs: list) -> list:
    """Run independent jobs, optionally in worker processes; results keep job order."""
    workers = min(_thread_cap(), len(jobs))
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


# ---- train -------------------------------------------------------------------------

def _train_job(values: dict, seed: int, overrides: dict, metrics_path: str, ckpt_path: str | None) -> float:
    cfg = ExperimentConfig(values)
    ds, sp = cfg.dataset_and_split(seed)
    result = train(cfg.train_config(seed, **overrides), ds, sp)
    header = list(METRICS_HEADER) + (["k_hat"] if cfg.khat_pairs else [])
    rows = [[_cell(v) for v in rec.row()] + ([_cell(rec.k_hat)] if cfg.khat_pairs else [])
            for rec in result.metrics]
    _write_csv(metrics_path, header, rows)
    if ckpt_path is not None:
        save_checkpoint(result.model, ckpt_path)
    return result.final_median_error(cfg.median_k)


def _summary(mode, seeds, medians, **extra) -> dict:
    mean, std = _mean_std(medians)
    return {"mode": mode, "seeds": list(seeds), "per_seed_median_error": list(medians),
            "mean": mean, "std": std, **extra}


def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    seeds = cfg.repeat_seeds
    jobs = [(cfg.values, s, {}, str(out / f"metrics_{cfg.mode}_seed{s}.csv"),
             str(out / f"model_{cfg.mode}_seed{s}.mlr")) for s in seeds]
    medians = _run_jobs(_train_job, jobs)
    summary = _summary(cfg.mode, seeds, medians)
    write_json(out / f"train_{cfg.mode}.json", summary)
    print(f"{cfg.mode}: mean error {fmt(summary['mean'])} +/- {fmt(summary['std'])} over {len(seeds)} seeds")
    return summary


# ---- ablate-zeta -------------------------------------------------------------------

def cmd_ablate_zeta(cfg: ExperimentConfig, out: Path) -> list:
    if cfg.mode not in ("mixup-lr", "mixup-gp"):
        raise ConfigError(f"ablate-zeta needs a regularized mode (mixup-lr or mixup-gp), got {cfg.mode!r}")
    jobs = [(cfg.values, s, {"zeta": float(z)},
             str(out / f"ablation_zeta{_zeta_tag(z)}_seed{s}.csv"), None)
            for z in cfg.zetas for s in cfg.repeat_seeds]
    medians = _run_jobs(_train_job, jobs)
    n = len(cfg.repeat_seeds)
    table, rows = [], []
    for i, z in enumerate(cfg.zetas):
        per_seed = medians[i * n:(i + 1) * n]
        mean, std = _mean_std(per_seed)
        rows.append([_cell(float(z)), _cell(mean), _cell(std)])
        table.append({"zeta": float(z), "mean_err": mean, "std_err": std, "per_seed_median_error": per_seed})
    _write_csv(out / "ablation_zeta.csv", ["zeta", "mean_err", "std_err"], rows)
    write_json(out / "ablation_zeta.json", {"mode": cfg.mode, "seeds": list(cfg.repeat_seeds), "rows": table})
    for r in rows:
        print("zeta=%s mean_err=%s std_err=%s" % tuple(r))
    return table


# ---- attack ------------------------------------------------------------------------

def _checkpoint(cfg: ExperimentConfig, out: Path, seed: int) -> Model:
    path = out / f"model_{cfg.mode}_seed{seed}.mlr"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run 'mixuplr train' first")
    return load_checkpoint(path)


def _attack_job(values: dict, seed: int, out: str) -> list:
    cfg = ExperimentConfig(values)
    model = _checkpoint(cfg, Path(out), seed)
    ds, sp = cfg.dataset_and_split(seed)
    x, y = eval_arrays(ds, sp, cfg.eval_target)
    return [attack_eval(model, x, y, float(eps), seed=seed, mode=cfg.mode) for eps in cfg.epsilons]


def cmd_attack(cfg: ExperimentConfig, out: Path) -> list:
    per_seed = _run_jobs(_attack_job, [(cfg.values, s, str(out)) for s in cfg.repeat_seeds])
    n_eps = len(cfg.epsilons)
    reports = [per_seed[j][i] for i in range(n_eps) for j in range(len(per_seed))]
    rows = [[_cell(r.epsilon), _cell(r.clean_accuracy), _cell(r.adversarial_accuracy),
             _cell(r.percent_drop), str(r.seed), r.mode] for r in reports]
    _write_csv(out / f"attack_{cfg.mode}.csv", SWEEP_HEADER, rows)
    summary = []
    for i, eps in enumerate(cfg.epsilons):
        drops = [per_seed[j][i].percent_drop for j in range(len(per_seed))]
        summary.append({"epsilon": float(eps), "mean_drop": float(np.mean(drops))})
        print(f"{cfg.mode} eps={fmt(float(eps))}: mean drop {fmt(float(np.mean(drops)))}%")
    write_json(out / f"attack_{cfg.mode}.json",
               {"mode": cfg.mode, "reports": [r.to_dict() for r in reports], "summary": summary})
    return reports


# ---- audit -------------------------------------------------------------------------

def _audit_job(values: dict, seed: int, out: str) -> dict:
    cfg = ExperimentConfig(values)
    model = _checkpoint(cfg, Path(out), seed)
    ds, _ = cfg.dataset_and_split(seed)
    rep = audit_model(model, ds.features, cfg.audit_pairs, cfg.audit_triples, seed, cfg.audit_safety)
    d = rep.to_json_dict()
    d["mode"] = cfg.mode
    write_json(Path(out) / f"audit_{cfg.mode}_seed{seed}.json", d)
    return d


def cmd_audit(cfg: ExperimentConfig, out: Path) -> list:
    reports = _run_jobs(_audit_job, [(cfg.values, s, str(out)) for s in cfg.repeat_seeds])
    for d in reports:
        print(f"seed {d['seed']}: k_hat={fmt(d['k_hat'])} l_hat={fmt(d['l_hat'])} "
              f"violation_rate={fmt(d['violation_rate'])}")
    return reports


# ---- plot --------------------------------------------------------------------------

def decision_grid(model: Model, features, size: int, margin: float = 0.1):
    """``size`` x ``size`` grid over the padded data bounding box: columns x, y, argmax, max-prob."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2:
        raise ValueError(f"decision grid needs 2-D inputs, got shape {features.shape}")
    lo, hi = features.min(axis=0), features.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-9)
    lo, hi = lo - pad, hi + pad
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], size), np.linspace(lo[1], hi[1], size))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    prob = model.predict_proba(pts)
    return pts, np.argmax(prob, axis=1), prob.max(axis=1), (lo, hi)


def render_svg(features, classes, labeled_idx, grid_pts, grid_cls, bounds, size: int, px: int = 480) -> str:
    lo, hi = bounds
    span = hi - lo

    def sx(v):
        return fmt((v - lo[0]) / span[0] * px)

    def sy(v):
        return fmt(px - (v - lo[1]) / span[1] * px)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="0 0 {px} {px}">',
             f"<title>{escape('decision regions and data')}</title>"]
    stride = max(1, size // 48)
    cell = px * stride / (size - 1)
    for i in range(0, size, stride):
        for j in range(0, size, stride):
            k = i * size + j
            x, y = grid_pts[k]
            parts.append(f'<rect x="{fmt(float(sx(x)) - cell / 2)}" y="{fmt(float(sy(y)) - cell / 2)}" '
                         f'width="{fmt(cell)}" height="{fmt(cell)}" fill="{PALETTE[grid_cls[k] % len(PALETTE)]}" '
                         f'fill-opacity="0.15"/>')
    for (x, y), c in zip(features, classes):
        parts.append(f'<circle cx="{sx(x)}" cy="{sy(y)}" r="2" fill="{PALETTE[c % len(PALETTE)]}"/>')
    for k in labeled_idx:
        x, y = features[k]
        parts.append(f'<circle cx="{sx(x)}" cy="{sy(y)}" r="6" fill="{PALETTE[classes[k] % len(PALETTE)]}" '
                     f'stroke="black" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _plot_job(values: dict, seed: int, out: str) -> None:
    cfg = ExperimentConfig(values)
    model = _checkpoint(cfg, Path(out), seed)
    ds, sp = cfg.dataset_and_split(seed)
    pts, cls, pmax, bounds = decision_grid(model, ds.features, cfg.grid_size)
    _write_csv(Path(out) / f"grid_{cfg.mode}_seed{seed}.csv", ["x", "y", "argmax", "max_prob"],
               [[fmt(a), fmt(b), str(int(c)), fmt(p)] for (a, b), c, p in zip(pts, cls, pmax)])
    svg = render_svg(ds.features, ds.classes, sp.labeled_idx, pts, cls, bounds, cfg.grid_size)
    (Path(out) / f"plot_{cfg.mode}_seed{seed}.svg").write_text(svg)


def cmd_plot(cfg: ExperimentConfig, out: Path) -> None:
    _run_jobs(_plot_job, [(cfg.values, s, str(out)) for s in cfg.repeat_seeds])
    print(f"wrote grid and plot files for {len(cfg.repeat_seeds)} seeds to {out}")


# ---- entry point -------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "ablate-zeta": cmd_ablate_zeta, "attack": cmd_attack,
            "audit": cmd_audit, "plot": cmd_plot}


def _int_csv(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_csv(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixuplr", description="Mixup with Lipschitz regularization experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat TOML config file")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seeds", type=_int_csv, help="e.g. 0,1,2,3,4 (overrides repeat_seeds)")
    p.add_argument("--eps", type=_float_csv, help="e.g. 0.007,0.07 (overrides epsilons)")
    p.add_argument("--zeta", type=_float_csv, help="e.g. 0,1,2,3 (overrides zetas)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.out is not None:
            overrides["out_dir"] = args.out
        if args.seeds is not None:
            overrides["repeat_seeds"] = args.seeds
        if args.eps is not None:
            overrides["epsilons"] = args.eps
        if args.zeta is not None:
            overrides["zetas"] = args.zeta
        if overrides:
            cfg = from_dict({**cfg.values, **overrides})
        _thread_cap()
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"mixuplr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"mixuplr: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"mixuplr: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
