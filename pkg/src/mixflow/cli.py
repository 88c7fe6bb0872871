"""Command-line workbench: gen-data, train, sample, eval, theory, plot.

Config handling: a flat JSON file supplies RunConfig fields; every field
can also be overridden on the command line with repeated
`--set field=value` flags (values parsed as JSON, falling back to raw
strings). MIXFLOW_SEED overrides the seed, MIXFLOW_THREADS caps worker
count (execution is single-threaded; results are seed-deterministic
regardless). Exit codes: 0 success, 2 validation error, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import Dataset, build_synthetic, load_populations, save_dataset
from .metrics import report
from .nn import NonFiniteError
from .theory import (
    GmmMeasure,
    PipelineConfig,
    SupportPattern,
    check_subset_sum,
    demonstrate_i1_illposed,
    dof_analysis,
    mixture_wasserstein,
    project_to_I_modes,
    reduced_dual_spread,
    support_from_dual,
    theory_pipeline,
    verify_barycenter,
    verify_weight_optimality,
)
from .training import RunConfig, checkpoint_from_json, fit, generate_samples

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _load_dataset(data_dir: str) -> Dataset:
    root = Path(data_dir)
    return load_populations(root / "data.csv", root / "manifest.json")


def _parse_set(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects field=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.split(".")[-1]  # tolerate dotted prefixes like trainer.lr
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _build_config(args) -> RunConfig:
    obj = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            obj.update(json.load(fh))
    obj.update(_parse_set(getattr(args, "set", None)))
    if getattr(args, "model", None):
        obj["model"] = args.model
    if getattr(args, "out", None):
        obj["checkpoint_dir"] = args.out
    if "MIXFLOW_SEED" in os.environ:
        obj["seed"] = int(os.environ["MIXFLOW_SEED"])
    elif getattr(args, "seed", None) is not None:
        obj["seed"] = args.seed
    return RunConfig.from_json(obj)


def _parse_letters(raw: str):
    if "," in raw:
        return [tok.strip() for tok in raw.split(",") if tok.strip()]
    return list(raw.strip())


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    letters = _parse_letters(args.letters)
    ds = build_synthetic(
        letters, args.rotations, args.copies, args.samples, args.val_letter, seed=args.seed
    )
    save_dataset(ds, args.out)
    n_train = len(ds.split("train"))
    n_val = len(ds.split("val"))
    print(
        f"wrote {args.out}: {len(letters) * args.rotations} conditions in the grid, "
        f"{n_train} train + {n_val} val populations"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _build_config(args)
    ds = _load_dataset(args.data)
    result = fit(config, ds.split("train"), ds.split("val"))
    if not config.checkpoint_dir:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "best.json", "w") as fh:
            json.dump(result.best_checkpoint, fh)
        with open(out / "last.json", "w") as fh:
            json.dump(result.last_checkpoint, fh)
    print(f"best validation W2 {result.best_w2:.6f} at epoch {result.best_epoch}")
    return EXIT_OK


def _resolve_descriptor(args, ddim_hint=None) -> np.ndarray:
    if args.descriptor:
        vec = np.asarray(json.loads(args.descriptor), dtype=np.float64)
        if vec.ndim != 1:
            raise ValueError("descriptor must be a flat JSON vector")
        return vec
    if not args.condition_id or not args.data:
        raise ValueError("pass either --descriptor or --condition-id with --data")
    root = Path(args.data)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if args.condition_id not in manifest["conditions"]:
        raise ValueError(f"condition {args.condition_id!r} not in manifest")
    return np.asarray(manifest["conditions"][args.condition_id]["descriptor"], dtype=np.float64)


def _write_points_csv(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{d}" for d in range(points.shape[1])])
        for row in points:
            writer.writerow([repr(float(v)) for v in row])


def cmd_sample(args) -> int:
    with open(args.checkpoint) as fh:
        model, config = checkpoint_from_json(json.load(fh))
    y = _resolve_descriptor(args)
    if len(y) != model.velocity.descriptor_dim:
        raise ValueError(
            f"descriptor length {len(y)} != model's {model.velocity.descriptor_dim}"
        )
    seed = int(os.environ.get("MIXFLOW_SEED", args.seed if args.seed is not None else config.seed))
    snaps = [float(tok) for tok in args.t_snapshots.split(",")]
    integ = config.integrator_config()
    if args.steps:
        integ.steps = args.steps
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshots = generate_samples(model, y, args.n, integ, seed=seed, snapshots=snaps)
    for t_snap, pts in snapshots.items():
        _write_points_csv(out_dir / f"samples_t{t_snap:g}.csv", pts)
    print(f"wrote {len(snapshots)} snapshot file(s) to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    with open(args.checkpoint) as fh:
        model, config = checkpoint_from_json(json.load(fh))
    ds = _load_dataset(args.data)
    pops = ds.split(args.split)
    if not pops:
        raise ValueError(f"split {args.split!r} has no conditions")
    seed = int(os.environ.get("MIXFLOW_SEED", config.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for pop in sorted(pops, key=lambda p: p.condition_id):
        gen = generate_samples(
            model, pop.descriptor, args.n, config.integrator_config(), seed=seed
        )[1.0]
        rep = report(gen, pop.samples, seed=seed)
        rows.append((pop.condition_id, rep))
    with open(out / "per_condition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition_id", "mmd", "w1", "w2", "ed", "n_x", "n_y", "bandwidth"])
        for cid, rep in rows:
            writer.writerow(
                [cid, repr(rep.mmd), repr(rep.w1), repr(rep.w2), repr(rep.ed), rep.n_x, rep.n_y, repr(rep.bandwidth)]
            )
    agg = {}
    for key in ("mmd", "w1", "w2", "ed"):
        vals = np.array([getattr(rep, key) for _, rep in rows])
        agg[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    agg["n_conditions"] = len(rows)
    with open(out / "aggregate.json", "w") as fh:
        json.dump(agg, fh, indent=1, sort_keys=True)
    print(
        "  ".join(f"{k}={agg[k]['mean']:.5f}±{agg[k]['std']:.5f}" for k in ("mmd", "w1", "w2", "ed"))
    )
    return EXIT_OK


def _theory_instance(args) -> dict:
    if args.instance:
        with open(args.instance) as fh:
            obj = json.load(fh)
        return obj
    if not (args.I and args.J and args.D):
        raise ValueError("--random needs --I, --J, and --D")
    rng = np.random.default_rng(args.seed)
    gamma = rng.standard_normal((args.J, args.D))
    q_list = [rng.dirichlet(np.ones(args.J)).tolist() for _ in range(args.conditions)]
    y_list = [rng.standard_normal(3).tolist() for _ in range(args.conditions)]
    return {"gamma": gamma.tolist(), "q_list": q_list, "y_list": y_list, "I": args.I}


def cmd_theory(args) -> int:
    obj = _theory_instance(args)
    gamma = np.asarray(obj["gamma"], dtype=np.float64)
    q_list = [np.asarray(q, dtype=np.float64) for q in obj["q_list"]]
    y_list = [np.asarray(y, dtype=np.float64) for y in obj["y_list"]]
    I = int(obj["I"])
    J, D = gamma.shape
    if max(I, J) > 20:
        raise ValueError("exhaustive checks capped at I, J <= 20")
    checks = set(args.checks.split(",")) if args.checks != "all" else {
        "transport", "subset_sum", "projection", "dof", "i1", "pipeline"
    }
    rng = np.random.default_rng(args.seed)
    report_obj = {"I": I, "J": J, "D": D, "conditions": len(q_list), "checks": sorted(checks)}

    per_cond = []
    for q in q_list:
        entry = {}
        target = GmmMeasure(gamma, q)
        measure, plan, mw2 = project_to_I_modes(target, I, restarts=8, rng=rng)
        if "transport" in checks:
            mw2_rt, plan_rt, dual_rt = mixture_wasserstein(measure, target)
            entry["mw2"] = mw2_rt
            entry["duality_gap"] = abs(dual_rt.objective - plan_rt.objective)
            entry["support_size"] = plan_rt.support_size()
        if "subset_sum" in checks:
            ok, witness = check_subset_sum(measure.weights, q, 1e-9)
            entry["subset_sum"] = {"holds": bool(ok), "witness": witness}
        if "projection" in checks:
            residuals, okb = verify_barycenter(measure.modes, gamma, plan)
            _, spread, _ = verify_weight_optimality(measure.modes, gamma, plan)
            entry["barycenter_max_residual"] = float(residuals.max())
            entry["weight_optimality_spread"] = spread
        if "dof" in checks:
            pattern = SupportPattern(plan.support())
            cs = dof_analysis(
                pattern, gamma, measure.weights, ("barycenter", "optimality"), theta=measure.modes
            )
            entry["dof"] = {
                "variables": len(cs.variables),
                "rank": cs.rank,
                "measured": cs.dof,
                "paper": cs.paper_dof,
                "matches_paper": cs.dof == cs.paper_dof,
            }
        per_cond.append(entry)
    report_obj["per_condition"] = per_cond
    if "dof" in checks:
        mismatched = [k for k, e in enumerate(per_cond) if not e["dof"]["matches_paper"]]
        report_obj["dof_mismatch_conditions"] = mismatched
    if "i1" in checks:
        theta1 = gamma[:1]
        rep = demonstrate_i1_illposed(theta1, gamma, q_list[0])
        contrast = float("nan")
        if I >= 2 or J >= 2:
            m2 = project_to_I_modes(GmmMeasure(gamma, q_list[0]), min(2, J), rng=rng)[0]
            contrast = reduced_dual_spread(m2.modes, gamma, q_list[0], m2.weights)
        report_obj["i1"] = {
            "z1_coefficient": rep.z1_coefficient,
            "objective_spread": rep.objective_spread,
            "two_source_contrast_spread": contrast,
        }
    if "pipeline" in checks and len(q_list) >= 2:
        cfg = PipelineConfig(oracle=args.oracle, seed=args.seed)
        result = theory_pipeline(list(zip(q_list, y_list)), gamma, I, cfg)
        report_obj["pipeline"] = {
            "summary": result["summary"],
            "errors": [e for e in result["per_condition"] if "error" in e],
        }
    text = json.dumps(report_obj, indent=1, sort_keys=True, default=_json_default)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return EXIT_OK


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"unserializable {type(value)}")


# -- svg plotting -----------------------------------------------------------------

PANEL_PX = 360
VIEW = 1.3


def render_svg(point_sets, labels=None) -> str:
    """Fixed-viewport scatter panels; pure string assembly, no renderer."""
    labels = labels or ["" for _ in point_sets]
    if len(labels) != len(point_sets):
        raise ValueError("one label per input file required")
    width = PANEL_PX * len(point_sets)
    height = PANEL_PX
    radius = 0.008 * PANEL_PX
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    for k, (pts, label) in enumerate(zip(point_sets, labels)):
        x0 = k * PANEL_PX
        parts.append(
            f'<rect x="{x0}" y="0" width="{PANEL_PX}" height="{PANEL_PX}" '
            'fill="white" stroke="#888" stroke-width="1"/>'
        )
        if label:
            parts.append(
                f'<text x="{x0 + 8}" y="18" font-family="sans-serif" font-size="14">'
                f"{escape(label)}</text>"
            )
        for px, py in pts:
            cx = x0 + (px + VIEW) / (2 * VIEW) * PANEL_PX
            cy = (VIEW - py) / (2 * VIEW) * PANEL_PX
            if 0 <= cx - x0 <= PANEL_PX and 0 <= cy <= PANEL_PX:
                parts.append(
                    f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius:.2f}" '
                    'fill="#1f77b4" fill-opacity="0.6"/>'
                )
    parts.append("</svg>")
    return "\n".join(parts)


def _read_points_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                continue  # header row
    pts = np.asarray(rows, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(
            f"{path}: plotting needs 2-D points; reduce higher-dimensional data (PCA) first"
        )
    return pts


def cmd_plot(args) -> int:
    point_sets = [_read_points_csv(p) for p in args.points]
    labels = [tok.strip() for tok in args.labels.split(",")] if args.labels else None
    svg = render_svg(point_sets, labels)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic letter-rotation dataset")
    g.add_argument("--letters", default="A,E,H,I,S,T")
    g.add_argument("--rotations", type=int, default=20)
    g.add_argument("--val-letter", default="S")
    g.add_argument("--samples", type=int, default=300, help="samples per copy")
    g.add_argument("--copies", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--model", choices=["mixflow", "cfm"])
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="FIELD=VALUE")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--descriptor", help="JSON vector")
    s.add_argument("--condition-id")
    s.add_argument("--data", help="dataset dir for --condition-id lookup")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--steps", type=int)
    s.add_argument("--t-snapshots", default="1")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    th = sub.add_parser("theory", help="run the mixture-transport verification suite")
    th.add_argument("--instance", help="JSON instance file")
    th.add_argument("--random", action="store_true")
    th.add_argument("--I", type=int)
    th.add_argument("--J", type=int)
    th.add_argument("--D", type=int)
    th.add_argument("--conditions", type=int, default=8)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--checks", default="all")
    th.add_argument("--oracle", action=argparse.BooleanOptionalAction, default=True)
    th.add_argument("--out")
    th.set_defaults(func=cmd_theory)

    p = sub.add_parser("plot", help="render 2-D point CSVs as SVG panels")
    p.add_argument("--points", nargs="+", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    if "MIXFLOW_THREADS" in os.environ:
        os.environ.setdefault("OMP_NUM_THREADS", os.environ["MIXFLOW_THREADS"])
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
