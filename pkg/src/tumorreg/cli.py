"""Command-line entry points for the registration workflows.

Subcommands: `phantom` writes synthetic pair directories; `train` fits
the network on a dataset directory; `register` aligns one pair with a
checkpoint or the per-pair optimizer; `evaluate` computes metric rows;
`ablate` runs the 4-row tumor-conditioning matrix. Every command exits 0
on success and nonzero with a diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import engine as eng
from . import metrics as mx
from . import phantom as ph
from . import volio
from .autodiff import Tensor
from .deformation import DeformationField, compose, jacobian_det, warp_image, warp_mask

PAIR_MAGIC = "RPAIR"
PAIR_VERSION = 1

_SCENARIOS = ("none", "moving", "fixed", "both")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed")
    p.add_argument("--out", required=True, help="output directory or file")


def _add_engine_flags(p: argparse.ArgumentParser):
    p.add_argument("--steps", type=int, default=None, help="recurrent steps T")
    p.add_argument("--int-steps", type=int, default=None, help="integration steps")
    p.add_argument("--lambda-smooth", type=float, default=None)
    p.add_argument("--lambda-pre", type=float, default=None)
    p.add_argument("--lambda-ob", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--channels", type=int, nargs="+", default=None)
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--opt-iters", type=int, default=None)
    p.add_argument("--opt-lr", type=float, default=None)
    p.add_argument("--max-grad-norm", type=float, default=None)
    p.add_argument("--no-conditioning", choices=["forward", "inverse", "both", "none"],
                   default="none", help="disable the named tumor conditioning")


def build_engine_config(args) -> eng.EngineConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base = dict(volio.load_config(args.config).get("engine", {}))
    overrides = {
        "steps": args.steps, "int_steps": args.int_steps, "epochs": args.epochs,
        "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed,
        "levels": args.levels, "opt_iters": args.opt_iters, "opt_lr": args.opt_lr,
        "max_grad_norm": args.max_grad_norm,
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    if args.channels is not None:
        base["channels"] = tuple(args.channels)
        base.setdefault("levels", len(args.channels))
    weights = dict(base.get("weights", {}))
    for flag, key in (("lambda_smooth", "lambda_smooth"), ("lambda_pre", "lambda_pre"),
                      ("lambda_ob", "lambda_ob")):
        val = getattr(args, flag)
        if val is not None:
            weights[key] = val
    if weights:
        base["weights"] = weights
    cfg = eng.config_from_dict(base)
    if args.no_conditioning in ("forward", "both"):
        cfg.cond_forward = False
    if args.no_conditioning in ("inverse", "both"):
        cfg.cond_inverse = False
    return cfg


# ---------------------------------------------------------------------------
# pair directories
# ---------------------------------------------------------------------------

def write_pair(dirpath, pair: ph.RegistrationPair, scenario: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    files = {"moving": "moving", "fixed": "fixed",
             "moving_tumor": "moving_tumor", "fixed_tumor": "fixed_tumor"}
    volio.write_volume(os.path.join(dirpath, "moving"), pair.I_m)
    volio.write_volume(os.path.join(dirpath, "fixed"), pair.I_f)
    volio.write_volume(os.path.join(dirpath, "moving_tumor"), pair.y_m)
    volio.write_volume(os.path.join(dirpath, "fixed_tumor"), pair.y_f)
    for side, structs in (("moving", pair.structures_m), ("fixed", pair.structures_f)):
        for name, vol in structs.items():
            if name == "tumor":
                continue
            key = f"{side}_mask_{name}"
            files[key] = key
            volio.write_volume(os.path.join(dirpath, key), vol)
    if pair.dose is not None:
        files["dose"] = "dose"
        volio.write_volume(os.path.join(dirpath, "dose"), pair.dose)
    if pair.gt_svf is not None:
        files["gt_svf"] = "gt_svf"
        volio.write_volume(os.path.join(dirpath, "gt_svf"),
                           volio.Volume(pair.gt_svf, pair.spacing, "svf"))
    manifest = {"magic": PAIR_MAGIC, "version": PAIR_VERSION, "scenario": scenario,
                "spacing": list(pair.spacing), "files": files}
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def read_pair(dirpath) -> ph.RegistrationPair:
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"{dirpath}: missing manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("magic") != PAIR_MAGIC:
        raise ValueError(f"{manifest_path}: not a pair manifest")
    if manifest.get("version") != PAIR_VERSION:
        raise ValueError(f"{manifest_path}: unsupported pair version")
    files = manifest["files"]
    load = lambda key: volio.read_volume(os.path.join(dirpath, files[key]))  # noqa: E731
    structures_m, structures_f = {}, {}
    for key in files:
        if key.startswith("moving_mask_"):
            structures_m[key[len("moving_mask_"):]] = load(key)
        elif key.startswith("fixed_mask_"):
            structures_f[key[len("fixed_mask_"):]] = load(key)
    y_m, y_f = load("moving_tumor"), load("fixed_tumor")
    structures_m["tumor"] = y_m
    structures_f["tumor"] = y_f
    gt = load("gt_svf").data if "gt_svf" in files else None
    return ph.RegistrationPair(
        I_m=load("moving"), y_m=y_m, I_f=load("fixed"), y_f=y_f,
        spacing=tuple(manifest["spacing"]),
        dose=load("dose") if "dose" in files else None,
        gt_svf=gt, structures_m=structures_m, structures_f=structures_f)


def list_pair_dirs(root):
    dirs = sorted(d for d in os.listdir(root)
                  if os.path.isdir(os.path.join(root, d)) and d.startswith("pair_"))
    if not dirs:
        raise FileNotFoundError(f"{root}: no pair_* directories found")
    return [os.path.join(root, d) for d in dirs]


def _tumors_for(scenario: str, spec: ph.PhantomSpec, rng: np.random.Generator,
                radius: float, offset_scale: float = 3.0):
    if scenario not in _SCENARIOS:
        raise ValueError(f"unknown tumor scenario {scenario!r}")
    moving, fixed = [], []
    sides = ("left", "right")
    if scenario in ("moving", "both"):
        side = sides[int(rng.integers(2))]
        moving.append(ph.place_tumor(spec, side, radius,
                                     offset=rng.uniform(-1.5, 1.5, 3)))
    if scenario in ("fixed", "both"):
        if scenario == "both" and moving:
            # same lung, offset placement: non-corresponding but interacting
            side = moving[0].side
            off = rng.uniform(-1.0, 1.0, 3)
            off[0] += offset_scale * (1 if rng.integers(2) else -1)
            fixed.append(ph.place_tumor(spec, side, radius, offset=off))
        else:
            side = sides[int(rng.integers(2))]
            fixed.append(ph.place_tumor(spec, side, radius,
                                        offset=rng.uniform(-1.5, 1.5, 3)))
    return moving, fixed


def make_dataset(out_dir, n_pairs: int, extents, spacing, seed: int, scenario: str,
                 svf_amplitude: float, anatomy_jitter: float, tumor_radius: float,
                 with_dose: bool, noise_sigma: float = 0.01, svf_sigma: float = 3.0,
                 jobs: int = 1):
    """Generate pair directories pair_000..; returns the list of paths."""
    os.makedirs(out_dir, exist_ok=True)

    def build(i):
        pair_seed = seed * 10_000 + i
        rng = np.random.default_rng(pair_seed)
        spec = ph.default_spec(extents, spacing, seed=pair_seed)
        spec = replace(spec, noise_sigma=noise_sigma)
        moving_t, fixed_t = _tumors_for(scenario, spec, rng, tumor_radius)
        pair = ph.synth_pair(spec, seed=pair_seed, svf_amplitude=svf_amplitude,
                             svf_sigma=svf_sigma, anatomy_jitter=anatomy_jitter,
                             moving_tumors=moving_t, fixed_tumors=fixed_t,
                             with_dose=with_dose)
        path = os.path.join(out_dir, f"pair_{i:03d}")
        write_pair(path, pair, scenario)
        return path

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(build, range(n_pairs)))
    return [build(i) for i in range(n_pairs)]


# ---------------------------------------------------------------------------
# registration output
# ---------------------------------------------------------------------------

def _field_volume(field: DeformationField, spacing, kind: str) -> volio.Volume:
    return volio.Volume(field.disp.data, spacing, kind)


def run_register(pair: ph.RegistrationPair, cfg: eng.EngineConfig, out_dir,
                 checkpoint=None, use_optimizer: bool = False,
                 save_steps: bool = True) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    if use_optimizer:
        _, records, phi_final = eng.optimize_pair(pair, cfg)
        _, phi_hat_final = eng.final_fields(records)
    else:
        params, ck_cfg = checkpoint
        run_cfg = replace(ck_cfg, cond_forward=cfg.cond_forward,
                          cond_inverse=cfg.cond_inverse)
        records, phi_final, phi_hat_final = eng.forward_register(pair, params, run_cfg)
    spacing = pair.spacing
    warped = warp_image(Tensor(np.asarray(pair.I_m)), phi_final)
    warped_mask = warp_mask(Tensor(np.asarray(pair.y_m)), phi_final)
    volio.write_volume(os.path.join(out_dir, "dvf"), _field_volume(phi_final, spacing, "dvf"))
    volio.write_volume(os.path.join(out_dir, "dvf_inv"),
                       _field_volume(phi_hat_final, spacing, "dvf"))
    volio.write_volume(os.path.join(out_dir, "warped"),
                       volio.Volume(warped.data, spacing, "image"))
    volio.write_volume(os.path.join(out_dir, "warped_tumor"),
                       volio.Volume(warped_mask.data, spacing, "mask"))
    step_summaries = []
    for t, rec in enumerate(records, start=1):
        disp = rec.phi_t.disp.data
        step_summaries.append({
            "step": t,
            "mean_abs_disp": float(np.abs(disp).mean()),
            "max_abs_disp": float(np.abs(disp).max()),
        })
        if save_steps:
            step_dir = os.path.join(out_dir, "steps", f"step_{t:02d}")
            os.makedirs(step_dir, exist_ok=True)
            volio.write_volume(os.path.join(step_dir, "phi"),
                               _field_volume(rec.phi_t, spacing, "dvf"))
            volio.write_volume(os.path.join(step_dir, "phi_hat"),
                               _field_volume(rec.phi_hat_t, spacing, "dvf"))
            volio.write_volume(os.path.join(step_dir, "warped_moving"),
                               volio.Volume(rec.warped_moving.data, spacing, "image"))
            volio.write_volume(os.path.join(step_dir, "warped_moving_mask"),
                               volio.Volume(rec.warped_moving_mask.data, spacing, "mask"))
    summary = {"steps": step_summaries,
               "mean_abs_disp": float(np.abs(phi_final.disp.data).mean())}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
        f.write("\n")
    return summary


def evaluate_pair(pair: ph.RegistrationPair, reg_dir, pair_id: str) -> mx.MetricsReport:
    """Metrics for one registered pair directory produced by `register`."""
    dvf = volio.read_volume(os.path.join(reg_dir, "dvf"))
    phi = DeformationField(Tensor(dvf.data))
    report = mx.MetricsReport(pair_id=pair_id)
    spacing = pair.spacing
    for name in mx.REPORT_STRUCTURES:
        if name in pair.structures_m and name in pair.structures_f:
            moved = warp_mask(Tensor(np.asarray(pair.structures_m[name])), phi).data
            fixed = np.asarray(pair.structures_f[name])
            report.dsc[name] = mx.dsc(moved, fixed)
            if moved.any() and fixed.any():
                report.hd95[name] = mx.hd95(moved, fixed, spacing)
    for name in mx.REPORT_TUBES:
        if name in pair.structures_m and name in pair.structures_f:
            moved = warp_mask(Tensor(np.asarray(pair.structures_m[name])), phi).data
            try:
                report.mcd[name] = mx.mcd(moved, np.asarray(pair.structures_f[name]),
                                          spacing)
            except mx.MetricError:
                pass
    y_m = np.asarray(pair.y_m)
    if y_m.any():
        warped_tumor = volio.read_volume(os.path.join(reg_dir, "warped_tumor")).data
        warped_img = volio.read_volume(os.path.join(reg_dir, "warped")).data
        report.delta_t_percent = mx.delta_t(y_m, warped_tumor)
        jac = jacobian_det(phi).data
        report.m_lexs_percent = mx.m_lexs(jac, y_m)
        report.tumor_mse = mx.tumor_mse(np.asarray(pair.I_m), y_m, warped_img,
                                        warped_tumor)
        if pair.dose is not None:
            report.delta_ptd = mx.delta_ptd(np.asarray(pair.dose), y_m, warped_tumor)
    if all(k in report.dsc for k in ("lung_left", "lung_right")):
        mx.vba_filter(report)
    return report


# ---------------------------------------------------------------------------
# subcommand mains
# ---------------------------------------------------------------------------

def _cmd_phantom(args) -> int:
    extents = tuple(args.extents)
    spacing = tuple(args.spacing)
    seed = args.seed if args.seed is not None else 0
    if args.config:
        pcfg = volio.load_config(args.config).get("phantom", {})
        extents = tuple(pcfg.get("extents", extents))
        spacing = tuple(pcfg.get("spacing", spacing))
    make_dataset(args.out, args.pairs, extents, spacing, seed, args.scenario,
                 args.svf_amplitude, args.jitter, args.tumor_radius,
                 args.dose, args.noise_sigma, args.svf_sigma, jobs=args.jobs)
    print(f"wrote {args.pairs} pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = build_engine_config(args)
    pairs = [read_pair(d) for d in list_pair_dirs(args.data)]
    os.makedirs(args.out, exist_ok=True)
    params, history = eng.train(pairs, cfg)
    ckpt = os.path.join(args.out, "checkpoint.trcr")
    eng.save_checkpoint(ckpt, params, cfg)
    eng.write_loss_history(os.path.join(args.out, "loss_history.csv"), history)
    print(f"trained {cfg.epochs} epochs on {len(pairs)} pairs -> {ckpt}")
    return 0


def _cmd_register(args) -> int:
    cfg = build_engine_config(args)
    pair = read_pair(args.pair)
    if args.optimize_pair:
        checkpoint = None
    else:
        if not args.checkpoint:
            raise ValueError("register: need --checkpoint or --optimize-pair")
        checkpoint = eng.load_checkpoint(args.checkpoint)
    summary = run_register(pair, cfg, args.out, checkpoint=checkpoint,
                           use_optimizer=args.optimize_pair,
                           save_steps=not args.no_save_steps)
    print(f"registered {args.pair} -> {args.out} "
          f"(mean |disp| {summary['mean_abs_disp']:.4f} voxels)")
    return 0


def _cmd_evaluate(args) -> int:
    pair_dirs = list_pair_dirs(args.data)
    reg_dirs = [os.path.join(args.reg, os.path.basename(d)) for d in pair_dirs]
    for rd in reg_dirs:
        if not os.path.isdir(rd):
            raise FileNotFoundError(f"{rd}: registration output missing")

    def build(i):
        pair = read_pair(pair_dirs[i])
        return evaluate_pair(pair, reg_dirs[i], os.path.basename(pair_dirs[i]))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(build, range(len(pair_dirs))))
    else:
        reports = [build(i) for i in range(len(pair_dirs))]
    mx.write_report_csv(args.out, reports)
    print(f"wrote {len(reports)} metric rows to {args.out}")
    return 0


_ABLATE_CONDITIONS = ("none", "inverse", "forward", "both")


def _cmd_ablate(args) -> int:
    cfg = build_engine_config(args)
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.out, exist_ok=True)
    data_dir = os.path.join(args.out, "phantoms")
    pair_paths = make_dataset(
        data_dir, args.pairs, tuple(args.extents), (3.0, 3.0, 4.0), seed,
        "both", svf_amplitude=args.svf_amplitude, anatomy_jitter=0.0,
        tumor_radius=args.tumor_radius, with_dose=False)
    pairs = [read_pair(p) for p in pair_paths]
    rows = []
    for condition in _ABLATE_CONDITIONS:
        run_cfg = replace(cfg, cond_forward=condition in ("forward", "both"),
                          cond_inverse=condition in ("inverse", "both"))
        delta_ts, lung_dscs = [], []
        for pair, pdir in zip(pairs, pair_paths):
            reg_dir = os.path.join(args.out, f"reg_{condition}",
                                   os.path.basename(pdir))
            run_register(pair, run_cfg, reg_dir, use_optimizer=True,
                         save_steps=False)
            rep = evaluate_pair(pair, reg_dir, os.path.basename(pdir))
            if rep.delta_t_percent is not None:
                delta_ts.append(rep.delta_t_percent)
            lungs = [rep.dsc[k] for k in ("lung_left", "lung_right") if k in rep.dsc]
            if lungs:
                lung_dscs.append(float(np.mean(lungs)))
        rows.append({
            "condition": condition,
            "delta_t_percent": float(np.mean(delta_ts)) if delta_ts else float("nan"),
            "lung_dsc": float(np.mean(lung_dscs)) if lung_dscs else float("nan"),
        })
    table_path = os.path.join(args.out, "ablation.csv")
    with open(table_path, "w") as f:
        f.write("condition,delta_t_percent,lung_dsc\n")
        for row in rows:
            f.write(f"{row['condition']},{row['delta_t_percent']!r},{row['lung_dsc']!r}\n")
    print("condition  delta_t%  lung_dsc")
    for row in rows:
        print(f"{row['condition']:<9} {row['delta_t_percent']:>8.3f} {row['lung_dsc']:>9.4f}")
    print(f"wrote {table_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tumorreg",
        description="tumor-aware recurrent deformable registration on phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic pair directories")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--extents", type=int, nargs=3, default=[32, 32, 24],
                   metavar=("D", "H", "W"))
    p.add_argument("--spacing", type=float, nargs=3, default=[3.0, 3.0, 4.0])
    p.add_argument("--scenario", choices=_SCENARIOS, default="none",
                   help="tumor placement scenario")
    p.add_argument("--svf-amplitude", type=float, default=0.0,
                   help="peak |v| voxels of the known ground-truth field")
    p.add_argument("--svf-sigma", type=float, default=3.0,
                   help="smoothing scale of the ground-truth field")
    p.add_argument("--jitter", type=float, default=1.0,
                   help="anatomy jitter in voxels when no SVF is used")
    p.add_argument("--tumor-radius", type=float, default=5.0)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    p.add_argument("--dose", action="store_true", help="write a synthetic dose map")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("train", help="train the network on a dataset directory")
    _add_common(p)
    _add_engine_flags(p)
    p.add_argument("--data", required=True, help="directory of pair_* subdirs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("register", help="register one pair directory")
    _add_common(p)
    _add_engine_flags(p)
    p.add_argument("--pair", required=True, help="pair directory")
    p.add_argument("--checkpoint", help="checkpoint file from train")
    p.add_argument("--optimize-pair", action="store_true",
                   help="per-pair optimization instead of a network")
    p.add_argument("--no-save-steps", action="store_true")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("evaluate", help="metric rows for registered pairs")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory of pair_* subdirs")
    p.add_argument("--reg", required=True, help="directory of per-pair register outputs")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="tumor-conditioning on/off matrix")
    _add_common(p)
    _add_engine_flags(p)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--extents", type=int, nargs=3, default=[24, 24, 18])
    p.add_argument("--svf-amplitude", type=float, default=1.5)
    p.add_argument("--tumor-radius", type=float, default=4.0)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - single reporting point
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
