"""Command-line surface.

Subcommands mirror the module entry points: ``reconstruct`` runs the full
pipeline, ``simulate`` builds motion-corrupted datasets, ``svr``/``srr``
run a single registration or super-resolution phase, ``eval`` computes
similarity metrics, and ``gmm-pve`` runs the mixture/partial-volume
analysis. Exit codes: 0 ok, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import InputError, NumericalError
from .metrics import fit_gmm3, ncc_volume, psnr, pve_proxy, ssim
from .nifti import read_nifti, write_nifti
from .pipeline import ReconstructionConfig, StageError, reconstruct
from .rigid import load_transforms, save_transforms
from .simulate import PhantomSpec, make_phantom, simulate_dataset
from .srr import SrrConfig, fit_srr
from .svr import SvrConfig, fit_svr
from .tomlio import dump_toml, load_toml
from .volume import bounding_grid, grid_to_stack, scatter_init_volume, stack_sample_positions


def _load_stacks(paths, gap: float = 0.0):
    return [grid_to_stack(read_nifti(p), gap=gap) for p in paths]


def _write_report(report: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=str)
    trace = report.get("srr", {}).get("trace", [])
    if trace:
        with open(out_dir / "loss_trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "data", "tv", "loss", "ema", "w_snapshot"])
            for row in trace:
                w.writerow(
                    [
                        row["epoch"],
                        row["data"],
                        row["tv"],
                        row["loss"],
                        row["ema"],
                        ";".join(f"{v:.6g}" for v in row.get("w", [])),
                    ]
                )
    transforms = report.get("transforms", {})
    if transforms:
        lines = [f"{k} " + " ".join(f"{v:.17g}" for v in vals) for k, vals in sorted(transforms.items())]
        (out_dir / "transforms.txt").write_text("\n".join(lines) + "\n")


def _cmd_reconstruct(args) -> int:
    config = (
        ReconstructionConfig.from_toml(args.config)
        if args.config
        else ReconstructionConfig()
    )
    stacks = _load_stacks(args.stacks)
    gt = read_nifti(args.gt) if args.gt else None
    try:
        vol, report = reconstruct(stacks, config, gt=gt)
    except StageError as e:
        if args.report:
            _write_report(e.partial_report, Path(args.report))
        raise e.cause
    write_nifti(vol, args.out)
    if args.report:
        _write_report(report, Path(args.report))
    print(f"reconstructed {vol.dims} volume -> {args.out}")
    if "final_vs_gt" in report:
        m = report["final_vs_gt"]
        print(f"vs GT: psnr={m['psnr']:.2f} dB ssim={m['ssim']:.4f}")
    return 0


def _cmd_simulate(args) -> int:
    gts = []
    for i in range(args.gts):
        spec = PhantomSpec(
            dims=(args.dims,) * 3, spacing=(args.spacing,) * 3, seed=args.seed + i
        )
        gts.append((f"gt{i:02d}", make_phantom(spec)))
    manifests = simulate_dataset(
        args.group,
        gts,
        args.out,
        thickness=args.thickness,
        in_plane=args.in_plane,
        noise_frac=args.noise,
        seed=args.seed,
    )
    print(f"wrote {len(manifests)} simulated subject(s) under {args.out}")
    return 0


def _cmd_svr(args) -> int:
    stacks = _load_stacks(args.stacks)
    x = read_nifti(args.volume)
    config = SvrConfig(**(load_toml(args.config).get("svr", {}) if args.config else {}))
    result = fit_svr(stacks, x, config)
    keys = sorted(result.transforms)
    save_transforms(
        args.out,
        [result.transforms[k] for k in keys],
        losses=[result.losses[k] for k in keys],
    )
    print(f"registered {len(keys)} slices, mean loss {result.report['mean_loss']:.4f}")
    return 0


def _cmd_srr(args) -> int:
    stacks = _load_stacks(args.stacks)
    config = SrrConfig(**(load_toml(args.config).get("srr", {}) if args.config else {}))
    if args.transforms:
        transforms = load_transforms(args.transforms)
        flat = [st for s in stacks for _, st in s.slices]
        if len(transforms) != len(flat):
            raise InputError(
                f"{len(transforms)} transforms for {len(flat)} slices"
            )
        for st, t in zip(flat, transforms):
            st.transform = t
    pts = np.concatenate([stack_sample_positions(s)[0] for s in stacks])
    grid = bounding_grid(pts, args.spacing, align=2**config.levels)
    hint = scatter_init_volume(stacks, args.spacing, grid=grid)
    vol, report = fit_srr(stacks, hint, config)
    write_nifti(vol, args.out)
    if args.report:
        _write_report({"srr": report, "transforms": {}}, Path(args.report))
    print(f"reconstructed {vol.dims} volume -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    x = read_nifti(args.volume)
    ref = read_nifti(args.reference)
    if x.dims != ref.dims:
        raise InputError(f"dims mismatch {x.dims} vs {ref.dims}")
    rows = [
        ("psnr_db", psnr(x.data, ref.data)),
        ("ssim", ssim(x.data, ref.data)),
        ("ncc", ncc_volume(x.data, ref.data)),
    ]
    print(f"{'metric':<10} value")
    for name, value in rows:
        print(f"{name:<10} {value:.6g}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerows(rows)
    return 0


def _cmd_gmm_pve(args) -> int:
    x = read_nifti(args.volume)
    vals = np.asarray(x.data).reshape(-1)
    if args.mask:
        m = read_nifti(args.mask)
        if m.dims != x.dims:
            raise InputError("mask dims do not match volume dims")
        vals = vals[np.asarray(m.data).reshape(-1) > 0.5]
    else:
        vals = vals[vals > 0]
    comps, ll = fit_gmm3(vals, seed=args.seed)
    outside = pve_proxy(vals, comps)
    for i, c in enumerate(comps):
        print(f"component {i}: weight={c.weight:.4f} mean={c.mean:.6g} std={c.std:.6g} delta={c.delta:.6g}")
    print(f"outside-FWHM fraction (PVE proxy): {outside:.4f}")
    prefix = Path(args.out)
    dump_toml(
        {
            "outside_fraction": outside,
            "loglik_final": ll[-1],
            "components": {
                f"c{i}": [c.weight, c.mean, c.std] for i, c in enumerate(comps)
            },
        },
        prefix.with_suffix(".toml"),
    )
    counts, edges = np.histogram(vals, bins=args.bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    binw = edges[1] - edges[0]
    with open(prefix.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "count"] + [f"density_{i}" for i in range(len(comps))])
        for j, xc in enumerate(centers):
            dens = [c.density(xc) * vals.size * binw for c in comps]
            w.writerow([xc, counts[j]] + list(dens))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stackrecon",
        description="Reconstruct isotropic 3D volumes from motion-corrupted thick-slice MR stacks.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="full alternating SVR/SRR reconstruction")
    r.add_argument("--stacks", nargs="+", required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--report", default=None)
    r.add_argument("--gt", default=None, help="optional ground truth for in-run evaluation")
    r.set_defaults(func=_cmd_reconstruct)

    s = sub.add_parser("simulate", help="synthesize a motion-corrupted phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--group", choices=["A", "B"], default="A")
    s.add_argument("--gts", type=int, default=1)
    s.add_argument("--dims", type=int, default=64)
    s.add_argument("--spacing", type=float, default=0.8)
    s.add_argument("--thickness", type=float, default=6.0)
    s.add_argument("--in-plane", dest="in_plane", type=float, default=0.8)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_simulate)

    v = sub.add_parser("svr", help="register stack slices to a volume")
    v.add_argument("--stacks", nargs="+", required=True)
    v.add_argument("--volume", required=True)
    v.add_argument("--config", default=None)
    v.add_argument("--out", required=True)
    v.set_defaults(func=_cmd_svr)

    q = sub.add_parser("srr", help="super-resolve with fixed transforms")
    q.add_argument("--stacks", nargs="+", required=True)
    q.add_argument("--transforms", default=None)
    q.add_argument("--config", default=None)
    q.add_argument("--spacing", type=float, default=0.8)
    q.add_argument("--out", required=True)
    q.add_argument("--report", default=None)
    q.set_defaults(func=_cmd_srr)

    e = sub.add_parser("eval", help="similarity metrics between two volumes")
    e.add_argument("--volume", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gmm-pve", help="3-component mixture fit and PVE proxy")
    g.add_argument("--volume", required=True)
    g.add_argument("--mask", default=None)
    g.add_argument("--out", required=True, help="output prefix (.toml/.csv)")
    g.add_argument("--bins", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gmm_pve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
