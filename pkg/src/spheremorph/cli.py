"""Command-line interface: ``spheremorph <subcommand> ...``.

Failures print one line ``error category=<name> message=<text>`` on stderr and
exit with the category's code.  ``SPHEREMORPH_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import __version__
from .fields import FeatureMap, GridMismatchError
from .io import (ConfigError, FormatError, MapKind, load_run_config, provenance, read_map,
                 read_map_kind, write_json, write_map, write_provenance)
from .likelihood import Atlas
from .registration.config import RegistrationConfig

THREADS_ENV = "SPHEREMORPH_THREADS"

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "io": 4,
    "format": 5,
    "grid-mismatch": 6,
    "numerical": 7,
    "check-failed": 8,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _grid_arg(text: str) -> tuple[int, int]:
    try:
        m, n = text.lower().split("x")
        return int(m), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 64x128, got {text!r}") from None


# ----------------------------------------------------------------------- helpers


class _Run:
    """Collects outputs of one command and stamps each with provenance."""

    def __init__(self, argv, out: Path, config: dict | None, seed: int | None):
        self.info = provenance(["spheremorph"] + list(argv), config, seed)
        self.out = out
        self.written: list[str] = []

    def map(self, name: str, obj, kind=None) -> Path:
        p = write_map(obj, self.out / name, kind)
        write_provenance(p, self.info)
        self.written.append(name)
        return p

    def json(self, name: str, obj) -> Path:
        p = write_json(self.out / name, obj)
        write_provenance(p, self.info)
        self.written.append(name)
        return p

    def figure(self, name: str, fn, *args, **kw) -> None:
        fn(*args, path=self.out / name, **kw)
        self.written.append(name)


def _load_atlas(mean_path, var_path) -> Atlas:
    mean = read_map(mean_path, "feature")
    if read_map_kind(var_path) not in (MapKind.VARIANCE, MapKind.FEATURE):
        raise FormatError(f"{var_path}: not a variance map")
    return Atlas(mean, read_map(var_path))


def _config(args) -> tuple[RegistrationConfig, dict, dict]:
    """Defaults, then the config file, then explicit flags."""
    if getattr(args, "config", None):
        cfg, run = load_run_config(args.config)
        raw = json.loads(Path(args.config).read_text())
    else:
        cfg, run, raw = RegistrationConfig(), {}, {}
    over = {}
    for flag, key in (("lam", "lam"), ("iters", "iters"), ("seed", "seed"), ("steps", "steps"),
                      ("mode", "mode"), ("lr", "lr"), ("multires", "multires_levels")):
        val = getattr(args, flag, None)
        if val is not None:
            over[key] = val
    if getattr(args, "rigid", False):
        over["rigid"] = True
    if getattr(args, "stochastic", False):
        over["sample_stochastic"] = True
    try:
        cfg = replace(cfg, **over)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    raw = dict(raw)
    raw.update(cfg.to_dict())
    return cfg, run, raw


def _config_keys(args) -> set:
    if getattr(args, "config", None):
        return set(json.loads(Path(args.config).read_text()))
    return set()


def _pick(args, run: dict, name: str, key: str | None = None):
    val = getattr(args, name, None)
    if val is None:
        val = run.get(key or name)
    if val is None:
        raise CliError("usage", f"--{name.replace('_', '-')} is required (flag or config key)")
    return val


def _summary(res, extra: dict | None = None) -> dict:
    from .synth import mean_displacement

    d = {
        "mean_displacement_rad": mean_displacement(res.phi),
        "max_velocity_rad": res.mu.max_magnitude(),
        "final_loss": float(res.loss_trace[-1]) if len(res.loss_trace) else None,
        "diagnostics": res.diagnostics,
    }
    if extra:
        d.update(extra)
    return d


def _registration_outputs(run: _Run, res, plots: bool) -> None:
    from .metrics import jacobian_map

    run.map("phi.smgm", res.phi)
    run.map("mu.smgm", res.mu)
    run.map("sigma.smgm", FeatureMap(res.mu.grid, res.sigma_diag), "variance")
    if plots:
        from . import plotting

        grid = res.phi.grid
        det, _ = jacobian_map(res.phi)
        run.figure("jacobian.png", plotting.plot_jacobian, det.data[0], grid)
        run.figure("displacement.png", plotting.plot_displacement, res.phi.data, grid)
        if len(res.loss_trace):
            run.figure("loss.png", plotting.plot_loss, res.loss_trace)


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------- commands


def cmd_synth(args, argv) -> int:
    from . import synth
    from .grid import make_grid

    M, N = args.grid
    try:
        grid = make_grid(M, N)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    if args.subjects < 2:
        raise CliError("usage", "need at least two subjects to form an atlas")
    out = Path(args.out)
    conf = {"grid": [M, N], "subjects": args.subjects, "amplitude": args.amplitude, "seed": args.seed,
            "regions": args.regions, "feature_noise": args.noise}
    run = _Run(argv, out, conf, args.seed)
    template, labels = synth.make_template(grid, args.regions, seed=args.seed)
    subs = synth.make_subjects(template, labels, args.subjects, args.amplitude, seed=args.seed + 1,
                               feature_noise=args.noise)
    atlas = synth.make_atlas(subs)
    run.map("template.smgm", template)
    run.map("template_labels.smgm", labels)
    run.map("atlas_mean.smgm", atlas.mean)
    run.map("atlas_var.smgm", atlas.variance, "variance")
    for k, s in enumerate(subs):
        run.map(f"subjects/subject_{k:03d}.smgm", s.features)
        run.map(f"subjects/subject_{k:03d}_labels.smgm", s.labels)
        run.map(f"truths/subject_{k:03d}_truth.smgm", s.registration_truth)
    run.json("manifest.json", dict(conf, files=sorted(run.written)))
    if not args.no_plots:
        from . import plotting

        run.figure("template.png", plotting.plot_map, template.data[0], grid, title="template")
        run.figure("template_labels.png", plotting.plot_labels, labels.labels, grid, title="template labels")
        run.figure("atlas_var.png", plotting.plot_map, atlas.variance.data[0], grid, title="atlas variance")
    _emit({"command": "synth", "out": str(out), "subjects": args.subjects})
    return 0


def cmd_register(args, argv) -> int:
    from .registration import register_instance

    cfg, run_opts, raw = _config(args)
    if cfg.mode == "amortized":
        raise CliError("config", "register runs instance optimization; use train/predict for amortized mode")
    moving = read_map(_pick(args, run_opts, "moving"), "feature")
    atlas = _load_atlas(_pick(args, run_opts, "atlas_mean"), _pick(args, run_opts, "atlas_var"))
    out = Path(_pick(args, run_opts, "out"))
    run = _Run(argv, out, raw, cfg.seed)
    res = register_instance(moving, atlas, cfg)
    _registration_outputs(run, res, not args.no_plots)
    report = _summary(res, {"config": cfg.to_dict(), "loss_trace": res.loss_trace.tolist()})
    run.json("report.json", report)
    _emit({"command": "register", "out": str(out), "mean_displacement_rad": report["mean_displacement_rad"],
           "iterations": res.diagnostics["iterations"]})
    return 0


def cmd_train(args, argv) -> int:
    from .registration.amortized import train_amortized
    from .registration.unet import DEFAULT_CHANNELS, save_unet

    cfg, run_opts, raw = _config(args)
    if args.mode is None and "mode" not in _config_keys(args):
        cfg = replace(cfg, mode="amortized")
    paths = args.subjects or run_opts.get("subjects")
    if not paths:
        raise CliError("usage", "--subjects is required (flag or config key)")
    subjects = [read_map(p, "feature") for p in paths]
    atlas = _load_atlas(_pick(args, run_opts, "atlas_mean"), _pick(args, run_opts, "atlas_var"))
    out = Path(_pick(args, run_opts, "out"))
    epochs = args.epochs or run_opts.get("epochs", 100)
    channels = tuple(args.channels or run_opts.get("channels", DEFAULT_CHANNELS))
    run = _Run(argv, out, dict(raw, epochs=epochs, channels=list(channels)), cfg.seed)
    try:
        net, hist = train_amortized(subjects, atlas, cfg, epochs=epochs, channels=channels)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    save_unet(net, out / "model.smtb", {"config": cfg.to_dict()})
    write_provenance(out / "model.smtb", run.info)
    run.json("history.json", hist.to_dict())
    if not args.no_plots:
        from . import plotting

        run.figure("training_loss.png", plotting.plot_loss, hist.epoch_loss, title="mean epoch loss",
                   xlabel="epoch")
    _emit({"command": "train", "out": str(out), "epochs": epochs,
           "first_loss": hist.epoch_loss[0], "last_loss": hist.epoch_loss[-1]})
    return 0


def cmd_predict(args, argv) -> int:
    from .registration.amortized import predict_amortized
    from .registration.unet import load_unet

    net, meta = load_unet(args.model)
    moving = read_map(args.moving, "feature")
    atlas = _load_atlas(args.atlas_mean, args.atlas_var)
    steps = meta.get("config", {}).get("steps", 7)
    run = _Run(argv, Path(args.out), meta.get("config"), None)
    try:
        res = predict_amortized(net, moving, atlas, steps)
    except ValueError as exc:
        raise CliError("grid-mismatch", str(exc)) from None
    _registration_outputs(run, res, not args.no_plots)
    report = _summary(res)
    run.json("report.json", report)
    _emit({"command": "predict", "out": args.out, "wall_time": res.diagnostics["wall_time"],
           "mean_displacement_rad": report["mean_displacement_rad"]})
    return 0


def cmd_warp(args, argv) -> int:
    from .registration import warp_features, warp_labels

    phi = read_map(args.phi, "deformation")
    kind = read_map_kind(args.input)
    obj = read_map(args.input)
    if kind == MapKind.LABEL:
        out = warp_labels(obj, phi)
    elif kind in (MapKind.FEATURE, MapKind.VARIANCE):
        out = warp_features(obj, phi)
    else:
        raise CliError("usage", f"cannot warp a {kind.name.lower()} map")
    info = provenance(["spheremorph"] + list(argv), None, None)
    p = write_map(out, args.out, kind)
    write_provenance(p, info)
    _emit({"command": "warp", "out": args.out, "kind": kind.name.lower()})
    return 0


def cmd_evaluate(args, argv) -> int:
    from .metrics import evaluate_labels

    a = read_map(args.a, "label")
    b = read_map(args.b, "label")
    phi = read_map(args.phi, "deformation") if args.phi else None
    rep = evaluate_labels(a, b, phi, radius_mm=args.radius_mm)
    d = rep.to_dict()
    if args.out:
        out = Path(args.out)
        write_json(out, d)
        write_provenance(out, provenance(["spheremorph"] + list(argv), None, None))
        if not args.no_plots:
            from . import plotting

            plotting.plot_dice_bars(rep.dice, out.with_suffix(".dice.png"))
    _emit(d)
    return 0


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import standard_suite

    res = standard_suite(args.seed)
    ok = True
    for name, (err, tol) in res.items():
        passed = err < tol
        ok &= passed
        print(f"{name}\t{err:.3e}\t{tol:.0e}\t{'ok' if passed else 'FAIL'}")
    if not ok:
        raise CliError("check-failed", "at least one adjoint exceeds its tolerance")
    return 0


def cmd_lambda_search(args, argv) -> int:
    from . import synth
    from .registration.lambda_search import DEFAULT_GRID, lambda_search

    data = Path(args.data)
    try:
        manifest = json.loads((data / "manifest.json").read_text())
    except FileNotFoundError:
        raise CliError("io", f"{data}: no manifest.json (run synth first)") from None
    template = read_map(data / "template.smgm", "feature")
    labels = read_map(data / "template_labels.smgm", "label")
    atlas = _load_atlas(data / "atlas_mean.smgm", data / "atlas_var.smgm")
    # validation subjects use seeds disjoint from the atlas subjects
    val = synth.make_subjects(template, labels, args.validation, manifest["amplitude"],
                              seed=manifest["seed"] + 7919, feature_noise=manifest["feature_noise"])
    cfg, _, raw = _config(args)
    lams = args.lambdas or DEFAULT_GRID
    res = lambda_search([(s.features, s.labels) for s in val], atlas, labels, lams, cfg)
    out = Path(args.out)
    run = _Run(argv, out, raw, cfg.seed)
    run.json("lambda_search.json", res.to_dict())
    if not args.no_plots:
        from . import plotting

        run.figure("lambda_search.png", plotting.plot_lambda_curve, res.lambdas, res.dice, chosen=res.best)
    _emit({"command": "lambda-search", "best": res.best, "dice": dict(zip(map(str, res.lambdas), res.dice))})
    return 0


# ------------------------------------------------------------------------ parser


def _add_reg_flags(p, lam=True):
    p.add_argument("--config", help="JSON run config")
    if lam:
        p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mode", choices=["instance", "amortized", "voxelmorph2d-ablation"])
    p.add_argument("--multires", type=int)
    p.add_argument("--rigid", action="store_true", help="rigid pre-alignment")
    p.add_argument("--stochastic", action="store_true", help="sample one velocity per step")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spheremorph", description="Diffeomorphic registration on the sphere.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--grid", type=_grid_arg, default=(64, 128))
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--amplitude", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regions", type=int, default=12)
    p.add_argument("--noise", type=float, default=0.02, help="subject feature variation")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("register", help="instance-mode registration")
    p.add_argument("--moving")
    p.add_argument("--atlas-mean", dest="atlas_mean")
    p.add_argument("--atlas-var", dest="atlas_var")
    p.add_argument("--out")
    _add_reg_flags(p)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("train", help="train the amortized network")
    p.add_argument("--subjects", nargs="+")
    p.add_argument("--atlas-mean", dest="atlas_mean")
    p.add_argument("--atlas-var", dest="atlas_var")
    p.add_argument("--epochs", type=int)
    p.add_argument("--channels", type=int, nargs=4)
    p.add_argument("--out")
    _add_reg_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="amortized prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--atlas-mean", dest="atlas_mean", required=True)
    p.add_argument("--atlas-var", dest="atlas_var", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("warp", help="apply a stored deformation")
    p.add_argument("--phi", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_warp)

    p = sub.add_parser("evaluate", help="Dice / MMD report for two label maps")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--phi")
    p.add_argument("--radius-mm", dest="radius_mm", type=float, default=100.0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("lambda-search", help="grid search for the prior weight")
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--validation", type=int, default=4)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--out", required=True)
    _add_reg_flags(p, lam=False)
    p.set_defaults(fn=cmd_lambda_search)

    for name, sp in sub.choices.items():
        if name not in ("gradcheck", "warp"):
            sp.add_argument("--no-plots", action="store_true", help="skip figures")
    return ap


def _thread_limit():
    val = os.environ.get(THREADS_ENV)
    if not val:
        return nullcontext()
    try:
        n = int(val)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError("config", f"{THREADS_ENV} must be a positive integer, got {val!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    from .registration.instance import DivergenceError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.fn(args, argv)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except ConfigError as exc:
        category, msg = "config", str(exc)
    except FormatError as exc:
        category, msg = "format", str(exc)
    except GridMismatchError as exc:
        category, msg = "grid-mismatch", str(exc)
    except (DivergenceError, FloatingPointError) as exc:
        category, msg = "numerical", str(exc)
    except OSError as exc:
        category, msg = "io", f"{exc.strerror or exc}: {exc.filename or ''}".strip()
    msg = " ".join(msg.split())
    print(f"error category={category} message={json.dumps(msg)}", file=sys.stderr)
    return EXIT_CODES[category]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
