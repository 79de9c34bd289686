"""Command-line entry point: ``sglkf <command> [options]``.

Commands: synth, train, track, eval, speed-analysis, perturb-speed.  Each
writes its outputs plus a ``run_manifest.json`` into one output directory.
Exit status is 0 on success, 1 on a runtime failure (one JSON line on
stderr) and 2 on a usage error.
"""
import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import datetime
import json
import logging
import os
import subprocess
import sys
import time
from typing import List

import numpy as np

from . import __version__
from . import config as cfgmod
from . import io_formats, metrics, msnet, synth, tracker, trainer
from .association import AssociationConfig
from .errors import ConfigurationError, SGLKFError
from .losses import LossWeights

log = logging.getLogger("sglkf")


# -- configuration ---------------------------------------------------------------

def config_defaults():
    d = {}
    d.update(cfgmod.dataclass_defaults(synth.ScenarioConfig, "synth"))
    d.update(cfgmod.dataclass_defaults(trainer.TrainConfig, "train"))
    d.update(cfgmod.dataclass_defaults(LossWeights, "loss"))
    d.update(cfgmod.dataclass_defaults(tracker.TrackerConfig, "tracker"))
    d.update(cfgmod.dataclass_defaults(AssociationConfig, "assoc"))
    for k in ("synth.seed", "synth.sequence_id", "synth.speed_profile", "tracker.checkpoint"):
        d.pop(k, None)
    d["synth.n_scenarios"] = 20
    return d


def load_config(args, flags):
    file_values = cfgmod.read_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        defaults = config_defaults()
        if k.strip() not in defaults:
            raise ConfigurationError(f"unknown config key {k.strip()!r}")
        flags[k.strip()] = cfgmod._coerce(v.strip(), defaults[k.strip()], k.strip())
    return cfgmod.resolve(config_defaults(), file_values, os.environ, flags)


def _section(values, prefix, drop=()):
    return {k[len(prefix) + 1:]: v for k, v in values.items() if k.startswith(prefix + ".") and k not in drop}


def tracker_config(values, checkpoint=None):
    assoc = AssociationConfig(**_section(values, "assoc"))
    return tracker.TrackerConfig(association=assoc, checkpoint=checkpoint, **_section(values, "tracker"))


# -- run manifest ----------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    config_sources: dict
    seed: int
    inputs: List[str]
    outputs: List[str]
    version: str
    started: str = ""
    wall_clock_s: float = 0.0
    extras: dict = field(default_factory=dict)

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "run_manifest.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    return str(o)


def _display_path(path):
    """Path relative to the working directory when it lies below it, so
    manifests from relocated runs compare equal."""
    path = str(path)
    rel = os.path.relpath(os.path.abspath(path))
    return path if rel.startswith("..") else rel


def describe_version():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- data helpers -----------------------------------------------------------------

def resolve_sequences(path):
    """Bundle directories named by ``path``: a manifest file, a bundle
    directory, or a directory containing ``manifest.txt``."""
    if os.path.isfile(path):
        return io_formats.read_manifest(path)
    if os.path.isfile(os.path.join(path, "meta.json")):
        return [path]
    man = os.path.join(path, "manifest.txt")
    if os.path.isfile(man):
        return io_formats.read_manifest(man)
    raise ConfigurationError(f"{path} is neither a manifest nor a bundle directory")


def _result_path(directory, sequence_id):
    return os.path.join(directory, f"{sequence_id}.txt")


def _track_one(job):
    bundle_dir, ckpt, fixed, tcfg, out_dir, speed_file = job
    bundle = io_formats.read_bundle(bundle_dir, speed_file)
    if fixed:
        noise = tracker.FixedNoise()
    else:
        params = msnet.load(ckpt, msnet.MSNetConfig.for_state_dim(bundle.state_dim))
        noise = tracker.MSNetNoise(params, tcfg.rate_var_factor)
    rows = tracker.run_sequence(bundle, noise, tcfg)
    path = _result_path(out_dir, bundle.sequence_id)
    io_formats.write_results(rows, path)
    return bundle.sequence_id, path, len(rows)


def _load_pairs(data, results):
    pairs = []
    for d in resolve_sequences(data):
        b = io_formats.read_bundle(d)
        path = _result_path(results, b.sequence_id)
        if not os.path.exists(path):
            raise ConfigurationError(f"no results for sequence {b.sequence_id} in {results}")
        rows = io_formats.read_results(path, box_dim=b.box_dim)
        pairs.append((b, rows))
    pairs.sort(key=lambda p: p[0].sequence_id)
    return pairs


# -- commands ---------------------------------------------------------------------

def cmd_synth(args, values):
    scen = _section(values, "synth", drop=("synth.n_scenarios",))
    n = values["synth.n_scenarios"]
    if args.box_dim == 6:
        scen["box_dim"] = 6
    configs = synth.default_suite(n, seed=args.seed, **scen)
    dirs = []
    for c in configs:
        b = synth.generate(c)
        d = os.path.join(args.out, b.sequence_id)
        io_formats.write_bundle(b, d)
        dirs.append(d)
    man = os.path.join(args.out, "manifest.txt")
    io_formats.write_manifest(dirs, man)
    return [], [man] + dirs


def cmd_train(args, values):
    dirs = resolve_sequences(args.manifest)
    bundles = [io_formats.read_bundle(d) for d in dirs]
    tcfg = trainer.TrainConfig(**_section(values, "train"))
    weights = LossWeights(**_section(values, "loss"))

    def progress(row):
        log.info("epoch %d loss %.6f lr %.3e", row["epoch"], row["loss"], row["lr"])

    trainer.train(bundles, tcfg, weights, out_dir=args.out, epochs=args.epochs, progress=progress)
    outs = [os.path.join(args.out, n) for n in ("msnet.ckpt", "metrics.jsonl", "curve.json", "loss_weights.json")]
    return dirs, outs


def cmd_track(args, values):
    if not args.fixed_kf and not args.checkpoint:
        raise ConfigurationError("track needs --checkpoint or --fixed-kf")
    dirs = resolve_sequences(args.data)
    tcfg = tracker_config(values, None if args.fixed_kf else args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    jobs = [(d, args.checkpoint, args.fixed_kf, tcfg, args.out, None) for d in dirs]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_track_one, jobs))
    else:
        done = [_track_one(j) for j in jobs]
    done.sort()
    inputs = list(dirs) + ([] if args.fixed_kf else [args.checkpoint])
    return inputs, [p for _, p, _ in done]


def _eval_job(pair):
    b, rows = pair
    return metrics.frames_from_bundle(b, rows)


def cmd_eval(args, values):
    pairs = _load_pairs(args.data, args.results)
    if args.jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            seqs = list(pool.map(_eval_job, pairs))
    else:
        seqs = [_eval_job(p) for p in pairs]
    report = metrics.evaluate_many(seqs)
    box_dim = pairs[0][0].box_dim if pairs else 4
    centers = metrics.BUCKETS_2D if box_dim == 4 else metrics.BUCKETS_3D
    buckets = metrics.speed_bucket_analysis(seqs, centers)
    os.makedirs(args.out, exist_ok=True)
    outs = []
    for name, text in (("report.json", report.to_json() + "\n"), ("report.txt", report.to_text()),
                       ("buckets.csv", metrics.buckets_to_csv(buckets))):
        path = os.path.join(args.out, name)
        with open(path, "w") as fh:
            fh.write(text)
        outs.append(path)
    print(report.to_text(), end="")
    return [args.data, args.results], outs


def cmd_speed_analysis(args, values):
    pairs = _load_pairs(args.data, args.results)
    seqs = [_eval_job(p) for p in pairs]
    box_dim = pairs[0][0].box_dim if pairs else 4
    if args.buckets:
        centers = tuple(float(x) for x in args.buckets.split(","))
    else:
        centers = metrics.BUCKETS_2D if box_dim == 4 else metrics.BUCKETS_3D
    buckets = metrics.speed_bucket_analysis(seqs, centers, args.half_width)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "speed_buckets.csv")
    text = metrics.buckets_to_csv(buckets)
    with open(path, "w") as fh:
        fh.write(text)
    print(text, end="")
    return [args.data, args.results], [path]


def cmd_perturb_speed(args, values):
    dirs = resolve_sequences(args.data)
    out_dirs = []
    for k, d in enumerate(sorted(dirs)):
        b = io_formats.read_bundle(d)
        v = io_formats.perturb_speed(b.speeds, args.mode, args.sigma, seed=args.seed * 100003 + k)
        b = replace(b, speeds=v, speed_source="perturbed",
                    extras=dict(b.extras, perturbation={"mode": args.mode, "sigma": args.sigma, "seed": args.seed}))
        target = os.path.join(args.out, b.sequence_id)
        io_formats.write_bundle(b, target)
        out_dirs.append(target)
    man = os.path.join(args.out, "manifest.txt")
    io_formats.write_manifest(out_dirs, man)
    return dirs, [man] + out_dirs


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "speed-analysis": cmd_speed_analysis,
    "perturb-speed": cmd_perturb_speed,
}


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="sglkf", description="Tracking with an ego-speed-conditioned learned Kalman filter.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, default=0, help="random seed")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth", help="generate synthetic bundles", formatter_class=fmt)
    common(sp)
    sp.add_argument("--n-scenarios", type=int, default=None, help="number of scenarios (config synth.n_scenarios, default 20)")
    sp.add_argument("--box-dim", type=int, choices=(4, 6), default=4, help="4 for image boxes, 6 for 3D boxes")

    sp = sub.add_parser("train", help="train the noise network", formatter_class=fmt)
    common(sp)
    sp.add_argument("--manifest", required=True, help="manifest file or bundle directory")
    sp.add_argument("--epochs", type=int, default=None, help="stop early after this many epochs")
    sp.add_argument("--lr0", type=float, default=None, help="initial learning rate (config train.lr0, default 5e-3)")
    sp.add_argument("--total-epochs", type=int, default=None, help="schedule length (config train.total_epochs, default 100)")

    sp = sub.add_parser("track", help="run the tracker", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="manifest file or bundle directory")
    sp.add_argument("--checkpoint", default=None, help="trained network checkpoint")
    sp.add_argument("--fixed-kf", action="store_true", help="use the constant-noise baseline filter")
    sp.add_argument("--jobs", type=int, default=1, help="parallel sequences")

    sp = sub.add_parser("eval", help="evaluate results against ground truth", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="manifest file or bundle directory")
    sp.add_argument("--results", required=True, help="directory of per-sequence result files")
    sp.add_argument("--jobs", type=int, default=1, help="parallel sequences")

    sp = sub.add_parser("speed-analysis", help="per-speed-bucket IoU and ID-switch rate", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="manifest file or bundle directory")
    sp.add_argument("--results", required=True, help="directory of per-sequence result files")
    sp.add_argument("--buckets", default=None, help="comma-separated bucket centers in km/h (default 0,20,40,60 for 2D, 0,15,25,35 for 3D)")
    sp.add_argument("--half-width", type=float, default=5.0, help="bucket half width in km/h")

    sp = sub.add_parser("perturb-speed", help="write bundles with noisy ego speed", formatter_class=fmt)
    common(sp)
    sp.add_argument("--data", required=True, help="manifest file or bundle directory")
    sp.add_argument("--mode", choices=("relative", "noise"), default="relative",
                    help="relative: v(1 + sigma n); noise: v n")
    sp.add_argument("--sigma", type=float, default=0.2, help="relative noise level")
    return p


def _flags_from_args(args):
    flags = {}
    if args.command == "synth" and args.n_scenarios is not None:
        flags["synth.n_scenarios"] = args.n_scenarios
    if args.command == "train":
        flags["train.seed"] = args.seed
        if args.lr0 is not None:
            flags["train.lr0"] = args.lr0
        if args.total_epochs is not None:
            flags["train.total_epochs"] = args.total_epochs
    return flags


def _error(exc, code):
    msg = {"error": type(exc).__name__, "message": str(exc).replace("\n", " "), "exit": code}
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if args.command == "track" and not (args.fixed_kf or args.checkpoint):
        parser.print_usage(sys.stderr)
        print("sglkf track: error: one of --checkpoint or --fixed-kf is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    started = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    try:
        values, sources = load_config(args, _flags_from_args(args))
        inputs, outputs = COMMANDS[args.command](args, values)
        RunManifest(args.command, argv, values, sources, args.seed, [_display_path(i) for i in inputs],
                    [_display_path(o) for o in outputs], describe_version(), started, round(time.time() - t0, 3)).write(args.out)
    except (SGLKFError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        return _error(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
