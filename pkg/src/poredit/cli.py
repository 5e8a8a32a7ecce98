"""Command-line entry point for the full pipeline.

Exit codes: 0 success, 1 validation failure (bad arguments, missing or
malformed inputs), 2 runtime failure (divergence, non-percolation). Every
failure prints a single machine-parseable line `error: <reason>` to stderr.
All randomness is controlled by --seed; computation is single-threaded, so
--threads / POREDIT_THREADS may not change any reported number.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import diffusion, lbm, metrics, tiling, training, volume
from .network import ModelConfig, PoreDiTModel

DESK_MODEL = dict(input_size=64, patch=8, embed_dim=96, depth=4, heads=4, window=4)
DESK_SAMPLER = {"mode": "ancestral", "eta": 1.0, "steps": 250, "cfg_scale": 1.0}
DESK_TILING = {"size": 128, "overlap": 16, "noise": "coherent", "weighting": "hann"}


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _build_section(cls, overrides: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(overrides) - allowed
    if unknown:
        raise CliError(f"unknown key(s) in config section {section!r}: {sorted(unknown)}")
    return cls(**overrides)


def load_run_config(path: str | None) -> dict:
    """Merge a JSON run configuration over the desk-scale defaults."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"file not found: {path}")
        except json.JSONDecodeError as e:
            raise CliError(f"invalid config JSON: {e}")
    sections = {"model", "train", "loss", "sampler", "tiling"}
    unknown = set(doc) - sections
    if unknown:
        raise CliError(f"unknown config section(s): {sorted(unknown)}")
    model = _build_section(ModelConfig, {**DESK_MODEL, **doc.get("model", {})}, "model")
    train = _build_section(training.TrainConfig, doc.get("train", {}), "train")
    loss = _build_section(training.LossWeights, doc.get("loss", {}), "loss")
    sampler = {**DESK_SAMPLER, **doc.get("sampler", {})}
    if set(sampler) != set(DESK_SAMPLER):
        raise CliError(f"unknown key(s) in config section 'sampler': {sorted(set(sampler) - set(DESK_SAMPLER))}")
    til = {**DESK_TILING, **doc.get("tiling", {})}
    if set(til) != set(DESK_TILING):
        raise CliError(f"unknown key(s) in config section 'tiling': {sorted(set(til) - set(DESK_TILING))}")
    return {"model": model, "train": train, "loss": loss, "sampler": sampler, "tiling": til}


def _resolve_threads(args) -> int:
    n = args.threads
    if n is None:
        n = os.environ.get("POREDIT_THREADS", "1")
    try:
        n = int(n)
    except ValueError:
        raise CliError(f"invalid thread count: {n!r}")
    if n < 1:
        raise CliError(f"invalid thread count: {n}")
    return n  # reductions are fixed-order; thread count cannot affect results


def _read_volume(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise CliError(f"file not found: {path}")
    return volume.read_volume(path)


def _load_dir(path: str) -> list[np.ndarray]:
    files = sorted(Path(path).glob("*.pdtv"))
    if not files:
        raise CliError(f"no .pdtv volumes in directory: {path}")
    return [volume.read_volume(str(f)) for f in files]


def _write_json(path: str, doc: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _axis_index(name: str) -> int:
    table = {"x": 0, "y": 1, "z": 2, "0": 0, "1": 1, "2": 2}
    if name not in table:
        raise CliError(f"invalid axis: {name!r}")
    return table[name]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = volume.SynthSpec(size=args.size, porosity=args.porosity, corr_len=args.corr_len, seed=args.seed + i)
        v = volume.synth_grf(spec)
        volume.write_volume(v, str(out / f"sample_{i:03d}.pdtv"))
    print(f"synth: wrote {args.count} volumes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    dataset = _load_dir(args.data)
    tc = cfg["train"]
    if args.seed is not None:
        tc = training.TrainConfig(**{**asdict(tc), "seed": args.seed})
    log_csv = str(Path(args.out).with_suffix(".loss.csv"))
    result = training.train(dataset, cfg["model"], tc, cfg["loss"], log_csv=log_csv)
    result.model.save(args.out)
    print(f"train: {len(result.loss_trace)} batches, final epoch mean loss {result.epoch_means[-1]:.6f}")
    return 0


def _load_model(path: str) -> PoreDiTModel:
    if not Path(path).exists():
        raise CliError(f"file not found: {path}")
    return PoreDiTModel.load(path)


def _load_s2_cond(path: str | None):
    if path is None:
        return None
    if not Path(path).exists():
        raise CliError(f"file not found: {path}")
    with open(path) as fh:
        feats = json.load(fh)
    return np.asarray(feats, dtype=np.float64)


def _guidance(scale: float) -> diffusion.GuidanceSpec:
    return diffusion.GuidanceSpec(scale=scale, enabled=scale != 1.0)


def cmd_sample(args) -> int:
    model = _load_model(args.ckpt)
    sched = diffusion.cosine_schedule(args.steps)
    s2_feats = _load_s2_cond(args.s2_cond)
    v = diffusion.sample(
        model, args.porosity, sched, args.seed, mode=args.mode, eta=args.eta,
        guidance=_guidance(args.cfg), s2_feats=s2_feats,
    )
    volume.write_volume(v, args.out)
    print(f"sample: porosity {metrics.porosity(v):.4f} -> {args.out}")
    return 0


def cmd_sample_tiled(args) -> int:
    model = _load_model(args.ckpt)
    if args.tile != model.config.input_size:
        raise CliError(f"tile size {args.tile} must equal the model input size {model.config.input_size}")
    sched = diffusion.cosine_schedule(args.steps)
    v = tiling.sample_tiled(
        model, args.porosity, sched, (args.size,) * 3, args.overlap, args.seed,
        mode=args.mode, eta=args.eta, guidance=_guidance(args.cfg),
        noise=args.noise, weighting=args.weighting,
    )
    volume.write_volume(v, args.out)
    if args.report:
        _write_json(args.report, {
            "porosity": metrics.porosity(v),
            "connectivity_fraction": metrics.connectivity_fraction(v),
            "dims": list(v.shape),
            "tile": args.tile,
            "overlap": args.overlap,
            "noise": args.noise,
            "seed": args.seed,
        })
    print(f"sample-tiled: porosity {metrics.porosity(v):.4f} -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    v = _read_volume(args.infile)
    report = metrics.analyze_volume(v, clean=args.clean)
    _write_json(args.report, report.to_dict())
    base = Path(args.report).with_suffix("")
    r, s2 = metrics.s2_radial(v)
    with open(f"{base}.s2.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "s2"])
        wr.writerows(zip(r.tolist(), s2.tolist()))
    lp = np.mean([metrics.lineal_path(v, ax) for ax in range(3)], axis=0)
    with open(f"{base}.lineal.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["r", "lineal_path"])
        wr.writerows(enumerate(lp.tolist()))
    print(f"analyze: porosity {report.porosity:.4f} -> {args.report}")
    return 0


def cmd_lbm(args) -> int:
    v = _read_volume(args.infile)
    cfg = lbm.LbmConfig(
        tau=args.tau, rho_in=args.rho_in, rho_out=args.rho_out,
        axis=_axis_index(args.axis), max_steps=args.max_steps, tol=args.tol,
    )
    result = lbm.run_permeability(v, cfg)
    _write_json(args.report, {
        "permeability_lattice": result.permeability,
        "mean_velocity": result.mean_velocity,
        "steps": result.steps,
        "converged": result.converged,
        "porosity": result.porosity,
        "tau": args.tau,
        "axis": _axis_index(args.axis),
    })
    with open(str(Path(args.report).with_suffix("")) + ".history.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "residual"])
        wr.writerows(result.history)
    print(f"lbm: K = {result.permeability:.6e} (lattice units), {result.steps} steps")
    return 0


def cmd_novelty(args) -> int:
    gen = _load_dir(args.gen)
    train_set = _load_dir(args.train)
    dmins = [metrics.novelty_dmin(g, train_set) for g in gen]
    _write_json(args.report, {"d_min": dmins, "min": min(dmins), "mean": float(np.mean(dmins))})
    print(f"novelty: min D_min = {min(dmins):.6f} over {len(gen)} samples")
    return 0


def cmd_report(args) -> int:
    """Aggregate per-sample analyze/lbm JSON reports into a porosity vs
    permeability scatter CSV."""
    root = Path(args.dir)
    if not root.is_dir():
        raise CliError(f"directory not found: {args.dir}")
    rows = []
    for path in sorted(root.rglob("*.json")):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (json.JSONDecodeError, OSError):
            continue
        if isinstance(doc, dict) and "permeability_lattice" in doc and "porosity" in doc:
            rows.append((doc["porosity"], doc["permeability_lattice"], path.relative_to(root).as_posix()))
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["porosity", "permeability_lattice", "source"])
        wr.writerows(rows)
    print(f"report: {len(rows)} rows -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# desk reproduction


def _check(table: list, name: str, ok: bool, detail: str) -> None:
    table.append((name, bool(ok), detail))
    print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def cmd_repro_desk(args) -> int:
    t_start = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    table: list = []
    phi_target = 0.30

    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    n_train = 12
    train_vols = []
    for i in range(n_train):
        spec = volume.SynthSpec(size=64, porosity=phi_target, corr_len=5.0, seed=seed * 1000 + i)
        v = volume.synth_grf(spec)
        train_vols.append(v)
        volume.write_volume(v, str(data_dir / f"sample_{i:03d}.pdtv"))

    ref = train_vols[0]
    _check(table, "metrics/s2-limits", abs(metrics.s2_radial(ref)[1][0] - metrics.porosity(ref)) < 1e-12,
           "S2(0) equals porosity")
    cleaned, removed = metrics.clean_isolated(ref)
    _check(table, "metrics/cleaning", metrics.porosity(cleaned) <= metrics.porosity(ref),
           f"removed {removed} isolated voxels")

    channel = np.zeros((34, 24, 24), dtype=np.uint8)
    channel[:, 2:22, :] = 1
    res = lbm.run_permeability(channel, lbm.LbmConfig(max_steps=60000))
    k_ref = lbm.poiseuille_reference(20, channel.shape[1])
    rel = abs(res.permeability - k_ref) / k_ref
    _check(table, "lbm/poiseuille", rel < 0.02, f"relative error {rel:.4f} vs analytic slit permeability")

    if args.quick:
        n_fail = sum(1 for _, ok, _ in table if not ok)
        print(f"repro-desk --quick: {len(table) - n_fail}/{len(table)} checks passed "
              f"in {time.time() - t_start:.0f}s")
        return 0 if n_fail == 0 else 2

    model_cfg = ModelConfig(**DESK_MODEL)
    # Main pass at batch_size 1 (epochs x 12 optimizer steps), then porosity
    # calibration: short strong-anchor rounds with held-out probe selection
    # (see training.calibrate_porosity for why selection is needed).
    train_cfg = training.TrainConfig(lr=2e-3, batch_size=1, epochs=max(1, args.epochs), seed=seed, timesteps=250)
    result = training.train(train_vols, model_cfg, train_cfg, training.LossWeights(),
                            log_csv=str(out / "train_loss.csv"))
    first = float(np.mean(result.loss_trace[:10]))
    last = float(np.mean(result.loss_trace[-10:]))
    _check(table, "train/loss-decrease", last < first,
           f"mean batch loss {first:.4f} -> {last:.4f} over {len(result.loss_trace)} batches")
    calib = training.calibrate_porosity(result.model, train_vols, model_cfg,
                                        phi_target, base_seed=seed + 1)
    model = calib.model
    model.save(str(out / "desk.pdtc"))

    sched = diffusion.cosine_schedule(train_cfg.timesteps)
    samples = []
    for i in range(10):
        v = diffusion.sample(model, phi_target, sched, seed + 100 + i)
        samples.append(v)
        volume.write_volume(v, str(out / f"gen_{i:03d}.pdtv"))
    phis = [metrics.porosity(v) for v in samples]
    hits = sum(1 for p in phis if abs(p - phi_target) <= 0.03)
    _check(table, "sample/porosity", hits >= 8, f"{hits}/10 samples within ±0.03 of φ={phi_target}")

    lag_r = min(v.shape[0] // 2 for v in samples)
    gt_curves = np.array([metrics.s2_radial(v, lag_r)[1] for v in train_vols])
    gen_mean = np.mean([metrics.s2_radial(v, lag_r)[1] for v in samples], axis=0)
    band = 3.0 * gt_curves.std(axis=0)
    inside = np.all(np.abs(gen_mean - gt_curves.mean(axis=0)) <= np.maximum(band, 1e-6))
    _check(table, "sample/s2-envelope", bool(inside), "mean S2 within 3 GT std at every lag")

    tiled = tiling.sample_tiled(model, phi_target, sched, (128,) * 3, 16, seed + 500)
    volume.write_volume(tiled, str(out / "gen_tiled.pdtv"))
    mono_cf = float(np.mean([metrics.connectivity_fraction(v) for v in samples]))
    tiled_cf = metrics.connectivity_fraction(tiled)
    _check(table, "tiled/connectivity", abs(tiled_cf - mono_cf) <= 0.05,
           f"largest-cluster fraction {tiled_cf:.3f} vs monolithic mean {mono_cf:.3f}")

    dmins = [metrics.novelty_dmin(v, train_vols) for v in samples]
    planted = metrics.novelty_dmin(train_vols[0], train_vols)
    _check(table, "novelty/d-min", min(dmins) > 0 and planted == 0.0,
           f"min generated D_min {min(dmins):.4f}, planted copy {planted:.4f}")

    try:
        res = lbm.run_permeability(samples[0])
        _check(table, "lbm/generated", res.converged, f"K = {res.permeability:.3e} in {res.steps} steps")
    except lbm.LbmError as e:
        _check(table, "lbm/generated", False, str(e))

    _write_json(str(out / "repro_desk.json"),
                {"checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in table],
                 "seed": seed, "runtime_s": time.time() - t_start})
    n_fail = sum(1 for _, ok, _ in table if not ok)
    print(f"repro-desk: {len(table) - n_fail}/{len(table)} checks passed in {time.time() - t_start:.0f}s")
    return 0 if n_fail == 0 else 2


# ---------------------------------------------------------------------------
# parser / dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poredit", description=__doc__)
    p.add_argument("--threads", default=None, help="worker threads (results are thread-count independent)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic training volumes")
    s.add_argument("--count", type=int, default=12)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--porosity", type=float, default=0.3)
    s.add_argument("--corr-len", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a volume directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="monolithic reverse sampling")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--porosity", type=float, required=True)
    s.add_argument("--s2-cond", default=None, help="JSON file of S2 conditioning features")
    s.add_argument("--steps", type=int, default=250)
    s.add_argument("--mode", choices=["ddim", "ancestral"], default="ancestral")
    s.add_argument("--eta", type=float, default=1.0)
    s.add_argument("--cfg", type=float, default=1.0, help="guidance scale (1.0 disables)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("sample-tiled", help="tiled reverse sampling beyond the native size")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--porosity", type=float, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--tile", type=int, required=True)
    s.add_argument("--overlap", type=int, required=True)
    s.add_argument("--noise", choices=["coherent", "independent"], default="coherent")
    s.add_argument("--weighting", choices=["hann", "uniform"], default="hann")
    s.add_argument("--steps", type=int, default=250)
    s.add_argument("--mode", choices=["ddim", "ancestral"], default="ancestral")
    s.add_argument("--eta", type=float, default=1.0)
    s.add_argument("--cfg", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_sample_tiled)

    s = sub.add_parser("analyze", help="morphological metrics report")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--clean", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("lbm", help="lattice Boltzmann permeability")
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--axis", default="x")
    s.add_argument("--tau", type=float, default=1.0)
    s.add_argument("--rho-in", type=float, default=1.001)
    s.add_argument("--rho-out", type=float, default=0.999)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--max-steps", type=int, default=200000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_lbm)

    s = sub.add_parser("novelty", help="nearest-training-neighbor distance")
    s.add_argument("--gen", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_novelty)

    s = sub.add_parser("report", help="aggregate reports into a porosity-permeability scatter CSV")
    s.add_argument("--dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("repro-desk", help="end-to-end desk reproduction with pass/fail table")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--quick", action="store_true", help="metrics/LBM-only subset")
    s.add_argument("--epochs", type=int, default=60)
    s.add_argument("--out", default="repro-desk-out")
    s.set_defaults(func=cmd_repro_desk)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _resolve_threads(args)
        return args.func(args)
    except (CliError, volume.VolumeFormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
