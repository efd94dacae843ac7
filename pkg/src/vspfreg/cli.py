"""Command-line entry point: ``vspfreg {register,learn,bench,vspf-export,phantom}``.

Exit codes: 0 success, 1 usage error (bad flags, missing inputs), 2 runtime
error.  Every run prints its fully resolved configuration as JSON.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

__all__ = ["main", "run_cli"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _existing(path):
    if not os.path.exists(path):
        raise UsageError(f"input file not found: {path}")
    return path


def _read_json(path):
    with open(_existing(path)) as fh:
        return json.load(fh)


def _write_json(obj, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _level_map(items, flag):
    out = {}
    for item in items or []:
        try:
            k, v = item.split("=")
            out[int(k)] = float(v)
        except ValueError:
            raise UsageError(f"{flag} expects LEVEL=VALUE, got {item!r}") from None
    return out


def _print_config(kind, cfg):
    print(json.dumps({"command": kind, "config": cfg}, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# registration config assembly


def _add_reg_flags(p):
    p.add_argument("--config", help="JSON registration config; flags override its keys")
    p.add_argument("--sampler", choices=None, help="sampler kind")
    p.add_argument("--rate", type=float, help="sampling rate (fraction of finest-level voxels)")
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--bins", type=int)
    p.add_argument("--p-high", action="append", metavar="LEVEL=VALUE",
                   help="probability cap override per level (repeatable)")
    p.add_argument("--beta", action="append", metavar="LEVEL=VALUE",
                   help="GMS+URS mixing weight per level (repeatable)")
    p.add_argument("--schedule", help="learned schedule JSON to apply")


def _reg_config(args):
    from .learning import LearnedSchedule
    from .registration import SAMPLER_KINDS, RegistrationConfig

    base = _read_json(args.config) if args.config else {}
    if "registration" in base and isinstance(base["registration"], dict):
        base = base["registration"]
    overrides = {
        "sampler_kind": args.sampler,
        "sampling_rate": args.rate,
        "seed": args.seed,
        "levels": args.levels,
        "bins": args.bins,
    }
    if args.sampler is not None and args.sampler not in SAMPLER_KINDS:
        raise UsageError(f"--sampler must be one of {', '.join(SAMPLER_KINDS)}")
    d = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    ph = _level_map(args.p_high, "--p-high")
    if ph:
        d["p_high_per_level"] = {**(d.get("p_high_per_level") or {}), **ph}
    beta = _level_map(args.beta, "--beta")
    if beta:
        d["beta_per_level"] = {**(d.get("beta_per_level") or {}), **beta}
    try:
        cfg = RegistrationConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid registration config: {exc}") from None
    if args.schedule:
        sched = LearnedSchedule.from_dict(_read_json(args.schedule))
        cfg = sched.apply_to(cfg)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _cmd_register(args):
    from .bench import tre
    from .registration import register
    from .similarity import histogram_to_csv
    from .volume import load_volume

    cfg = _reg_config(args)
    ref = load_volume(_existing(args.ref))
    mov = load_volume(_existing(args.mov))
    pair = _read_json(args.pair) if args.pair else None
    _print_config("register", cfg.to_dict())
    res = register(ref, mov, cfg)
    out = res.to_dict(cfg)
    out["center"] = [float(c) for c in ref.center()]
    if pair is not None:
        from .transform import RigidParams

        gold = RigidParams.from_array(pair["gold"])
        d = tre(gold, res.theta, np.asarray(pair["voi_points"]), pair.get("center"))
        out["tre_mm"] = [float(v) for v in d]
    _write_json(out, args.out)
    if args.nmi_trace:
        with open(args.nmi_trace, "w") as fh:
            fh.write("level,iteration,nmi\n")
            for k, r in zip(res.levels_run, res.per_scale):
                for i, v in enumerate(r.nmi_trace, 1):
                    fh.write(f"{k},{i},{v!r}\n")
    if args.histogram:
        from .registration import final_histogram

        histogram_to_csv(final_histogram(ref, mov, cfg, res.theta), args.histogram)
    return 0


def _load_pairs(manifest):
    """Manifest: JSON list of {ref, mov, gold, voi_points[, center]}; paths
    are relative to the manifest's directory."""
    from .learning import TrainingPair
    from .transform import RigidParams
    from .volume import load_volume

    entries = _read_json(manifest)
    if isinstance(entries, dict):
        entries = entries.get("pairs", [])
    base = os.path.dirname(os.path.abspath(manifest))
    pairs = []
    for e in entries:
        if "pair" in e:  # a phantom pair.json written by `vspfreg phantom`
            pj = os.path.join(base, e["pair"])
            e = {**_read_json(pj), "_base": os.path.dirname(pj)}
        root = e.get("_base", base)
        ref = load_volume(_existing(os.path.join(root, e["ref"])))
        mov = load_volume(_existing(os.path.join(root, e["mov"])))
        pairs.append(TrainingPair(ref, mov, RigidParams.from_array(e["gold"]),
                                  np.asarray(e["voi_points"]), e.get("center")))
    if not pairs:
        raise UsageError(f"no training pairs in {manifest}")
    return pairs


def _cmd_learn(args):
    from .learning import learn_beta, learn_ph, learn_schedule

    cfg = _reg_config(args)
    pairs = _load_pairs(args.pairs_manifest)
    _print_config("learn", {"param": args.param, "grid_step": args.grid_step, "trials": args.trials,
                            "level": args.level, "registration": cfg.to_dict()})
    if args.level is None:
        sched = learn_schedule(pairs, args.param, args.grid_step, args.trials, cfg)
    else:
        fn = learn_ph if args.param == "ph" else learn_beta
        sched = fn(pairs, args.level, args.grid_step, args.trials, cfg)
    sched.save(args.out)
    return 0


def _cmd_bench(args):
    from .bench import PhantomSpec, run_experiment
    from .registration import RegistrationConfig

    conf = _read_json(args.config)
    if "seeds" not in conf:
        raise UsageError("bench config must list 'seeds'")
    try:
        spec = PhantomSpec.from_dict(conf.get("phantom"))
        cfg = RegistrationConfig.from_dict(conf.get("registration"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid bench config: {exc}") from None
    samplers = conf.get("samplers", ["vspf_heuristic", "urs"])
    rates = conf.get("rates", [0.01])
    pairs = int(conf.get("pairs", 10))
    timing = bool(conf.get("record_timing", False))
    resolved = {"samplers": samplers, "rates": rates, "pairs": pairs, "seeds": conf["seeds"],
                "pair_seeds": conf.get("pair_seeds"), "phantom": spec.to_dict(),
                "registration": cfg.to_dict(), "record_timing": timing}
    _print_config("bench", resolved)
    report = run_experiment(samplers, rates, pairs, conf["seeds"], cfg, spec,
                            conf.get("pair_seeds"), jobs=args.jobs, record_timing=timing)
    report.write(args.out_dir)
    for row in report.summary():
        print(f"{row['sampler']:>16s} rate={row['rate']:<8g} failures={row['failure_count']}/"
              f"{row['total_runs']} mTRE={row['mtre_mm']:.3f} mm")
    return 0


def _cmd_vspf_export(args):
    from .registration import level_fields
    from .volume import load_volume, save_volume

    cfg = _reg_config(args)
    ref = load_volume(_existing(args.ref))
    mov = load_volume(_existing(args.mov))
    if not 1 <= args.level <= cfg.levels:
        raise UsageError(f"--level must lie in [1, {cfg.levels}]")
    _print_config("vspf-export", {"level": args.level, "registration": cfg.to_dict()})
    fld, ref_level = level_fields(ref, mov, cfg, args.level)
    save_volume(ref_level.with_data(fld.p.reshape(ref_level.data.shape)), args.out)
    return 0


def _cmd_phantom(args):
    from .bench import PhantomSpec, make_phantom_pair
    from .volume import save_volume

    spec = PhantomSpec.from_dict(_read_json(args.spec)) if args.spec else PhantomSpec()
    _print_config("phantom", {"seed": args.seed, "spec": spec.to_dict()})
    pair = make_phantom_pair(spec, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    save_volume(pair.ref, os.path.join(args.out_dir, "ref.mhd"))
    save_volume(pair.mov, os.path.join(args.out_dir, "mov.mhd"))
    _write_json({
        "ref": "ref.mhd",
        "mov": "mov.mhd",
        "gold": pair.gold.to_json(),
        "voi_points": pair.voi_points.tolist(),
        "center": list(pair.center),
        "seed": args.seed,
        "spec": spec.to_dict(),
    }, os.path.join(args.out_dir, "pair.json"))
    return 0


def build_parser():
    p = _Parser(prog="vspfreg", description="Rigid NMI registration with voxel sampling probability fields.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    r = sub.add_parser("register", help="register a moving volume to a reference")
    r.add_argument("--ref", required=True)
    r.add_argument("--mov", required=True)
    r.add_argument("--out", required=True, help="result JSON")
    r.add_argument("--pair", help="pair.json with gold and VOI points; adds TRE to the result")
    r.add_argument("--nmi-trace", help="write per-iteration NMI as CSV")
    r.add_argument("--histogram", help="write the final joint histogram as CSV")
    _add_reg_flags(r)
    r.set_defaults(func=_cmd_register)

    ln = sub.add_parser("learn", help="learn P_h or beta per level by grid search")
    ln.add_argument("--pairs-manifest", required=True)
    ln.add_argument("--param", choices=("ph", "beta"), required=True)
    ln.add_argument("--out", required=True)
    ln.add_argument("--grid-step", type=float, default=0.01)
    ln.add_argument("--trials", type=int, default=3)
    ln.add_argument("--level", type=int, help="learn one level only (default: all, coarse first)")
    _add_reg_flags(ln)
    ln.set_defaults(func=_cmd_learn)

    b = sub.add_parser("bench", help="phantom sampling-rate sweep")
    b.add_argument("--config", required=True)
    b.add_argument("--out-dir", required=True)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=_cmd_bench)

    v = sub.add_parser("vspf-export", help="write one level's sampling field as a MetaImage")
    v.add_argument("--ref", required=True)
    v.add_argument("--mov", required=True)
    v.add_argument("--level", type=int, required=True)
    v.add_argument("--out", required=True)
    _add_reg_flags(v)
    v.set_defaults(func=_cmd_vspf_export)

    ph = sub.add_parser("phantom", help="write a synthetic phantom pair")
    ph.add_argument("--spec", help="PhantomSpec JSON")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--out-dir", required=True)
    ph.set_defaults(func=_cmd_phantom)
    return p


def run_cli(argv=None):
    """Run the CLI and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime-error exit code
        print(f"vspfreg: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main(argv=None):
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
