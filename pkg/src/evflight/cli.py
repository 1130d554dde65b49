"""``evflight`` command line: config-driven pipeline stages writing under one output directory."""
from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .baselines import InsufficientEvents, active_points, expansion_ttc, hough_circle, hull_diameter
from .config import KEYS, PROFILES, ConfigError, RunConfig, load_config
from .events import EventFormatError, EventStream, bin_events
from .filterbank import FilterBank, SampleSet, read_samples, write_samples
from .inference import read_predictions, write_predictions
from .metrics import median_ttc_error
from .nnet import NonFiniteError, TrainingDiverged, load_model, save_model, write_history
from .report import read_report, write_all
from .sim import read_recording, write_recording

log = logging.getLogger("evflight")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _keys_epilog() -> str:
    lines = ["configuration keys (default; --set key=value or a key = value file):"]
    for k, key in KEYS.items():
        lines.append(f"  {k:<28} {key.default:<24} {key.help}")
    lines.append("profiles: " + ", ".join(f"{p} ({', '.join(f'{k}={v}' for k, v in o.items()) or 'defaults'})"
                                          for p, o in PROFILES.items()))
    return "\n".join(lines)


# --- artifact layout ------------------------------------------------------------

def _versions() -> dict[str, str]:
    import scipy
    from importlib.metadata import PackageNotFoundError, version
    try:
        own = version("evflight")
    except PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "evflight": own}


def write_manifest(out: Path, command: str, argv: list[str], cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"manifest-{command}.txt"
    lines = [f"# command: evflight {' '.join(argv)}", f"# seed: {cfg['run.seed']}"]
    lines += [f"# version.{k}: {v}" for k, v in _versions().items()]
    path.write_text("\n".join(lines) + "\n" + cfg.dumps())
    return path


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: expected {path}")
    return path


def _read_split(out: Path) -> dict[str, list[str]]:
    split = {"train": [], "test": []}
    for line in _need(out / "split.txt", "split file (run simulate first)").read_text().splitlines():
        name, part = line.split()
        split[part].append(name)
    return split


def _load_group(out: Path, part: str, augmented: bool):
    if augmented and (out / "augmented" / part).is_dir():
        root = out / "augmented" / part
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    else:
        root = out / "recordings"
        names = _read_split(out)[part]
    return [read_recording(_need(root / n, "recording")) for n in names]


# --- commands -------------------------------------------------------------------

def cmd_simulate(args, cfg, out):
    ds = pipeline.simulate(cfg, args.jobs)
    lines = []
    for part in ("train", "test"):
        for rec in ds[part]:
            write_recording(rec, out / "recordings" / rec.name)
            lines.append(f"{rec.name} {part}")
    (out / "split.txt").write_text("\n".join(sorted(lines)) + "\n")
    print(f"simulated {len(lines)} recordings ({len(ds['train'])} train / {len(ds['test'])} test) in {out}")


def cmd_augment(args, cfg, out):
    ds = {p: _load_group(out, p, augmented=False) for p in ("train", "test")}
    prep = pipeline.prepare(cfg, ds)
    for part, recs in (("train", prep.train_recs), ("test", prep.test_recs)):
        for rec in recs:
            write_recording(rec, out / "augmented" / part / rec.name)
        print(f"{part}: {len(recs)} recordings")


def cmd_filter(args, cfg, out):
    if args.bench:
        return bench_filter(cfg, args.bench_events, out)
    rng = np.random.default_rng(cfg.seed_for("encode"))
    for part in ("train", "test"):
        recs = _load_group(out, part, augmented=True)
        if part == "train" and not cfg["aug.enabled"]:
            recs = [r for r in recs if "augment" not in r.meta]
        stride = cfg["data.stride"] if part == "train" else 1
        data = pipeline.encode_recordings(recs, cfg, stride, rng)
        (out / "samples").mkdir(parents=True, exist_ok=True)
        write_samples(data.to_samples(), out / "samples" / f"{part}.smp")
        print(f"{part}: {len(data)} samples")


def bench_filter(cfg: RunConfig, n_events: int, out: Path) -> None:
    """Throughput of binning plus filtering on a uniformly random stream."""
    fb_cfg = pipeline.filter_config(cfg)
    cam = pipeline.camera_for(cfg)
    rng = np.random.default_rng(cfg.seed_for("bench"))
    duration = 1_000_000
    t = np.sort(rng.integers(0, duration, n_events)).astype(np.uint64)
    stream = EventStream(cam.width, cam.height, rng.integers(0, cam.width, n_events).astype(np.uint16),
                         rng.integers(0, cam.height, n_events).astype(np.uint16),
                         np.where(rng.random(n_events) < 0.5, 1, -1).astype(np.int8), t)
    fb = FilterBank(fb_cfg, cam.width, cam.height)
    t0 = time.perf_counter()
    for t_out in range(fb_cfg.output_period_us, duration + 1, fb_cfg.output_period_us):
        fb.advance(stream, t_out)
    fb.quantized()
    dt = time.perf_counter() - t0
    rate = n_events / dt
    text = (f"events {n_events}\nsensor {cam.width}x{cam.height}\nseconds {dt:.3f}\n"
            f"events_per_second {rate:.0f}\n")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.txt").write_text(text)
    print(f"bin+filter: {n_events} events in {dt:.3f} s = {rate / 1e6:.2f} M events/s "
          f"({cam.width}x{cam.height}, {len(fb_cfg.time_constants_us)} scales)")
    return rate


def _sample_set(path: Path) -> SampleSet:
    samples = read_samples(_need(path, "sample file (run filter first)"))
    return SampleSet.from_samples(samples)


def cmd_train(args, cfg, out):
    data = _sample_set(out / "samples" / "train.smp")
    trained = pipeline.train_model(cfg, data)
    save_model(trained.model, out / "model.evnn")
    write_history(trained.history, out / "history.csv")
    if trained.diverged:
        raise TrainingDiverged("training diverged; partial history written", trained.history)
    print(f"trained on {trained.n_train} samples in {trained.seconds:.0f} s -> {out / 'model.evnn'}")


def cmd_infer(args, cfg, out):
    model = load_model(_need(out / "model.evnn", "checkpoint (run train first)"))
    recs = _load_group(out, "test", augmented=True)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for rec in recs:
        write_predictions(pipeline.predict_recording(model, rec, cfg), pred_dir / f"{rec.name}.csv")
    print(f"predictions for {len(recs)} recordings in {pred_dir}")


def cmd_eval(args, cfg, out):
    pred_dir = _need(out / "predictions", "predictions directory (run infer first)")
    files = sorted(pred_dir.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"missing predictions: expected CSV files in {pred_dir}")
    records = [read_predictions(f) for f in files]
    truths = []
    for f, recs in zip(files, records):
        if recs and (recs[0].theta_true < 0 or recs[0].r_true < 0):
            raise ValueError(f"{f}: predictions carry no true bins")
        truths.append((recs[0].theta_true, recs[0].r_true) if recs else (0, 0))
    rep = pipeline.score(records, truths, cfg["eval.edges"], cfg["eval.smoothed"])
    paths = write_all({"main": rep}, out / "eval", cfg["run.kind"])
    print(f"median TTC error {rep.median_ttc_pct_error:.1f} %, theta error {rep.mean_theta_error_deg:.1f} deg, "
          f"radius error {rep.mean_radius_error_mm:.1f} mm over {rep.n} predictions")
    print("wrote " + ", ".join(str(p) for p in paths))


def cmd_baseline(args, cfg, out):
    recs = _load_group(out, "test", augmented=False)
    cadence = cfg["eval.cadence_us"]
    rows, errs = ["recording,t_s,tau_s,hull_diameter_px,hough_radius_px,tau_expansion_s"], []
    for rec in recs:
        t_imp = rec.impact.t_impact
        t0 = max(0, int((t_imp - cfg["data.tau_max"]) * 1e6) // cadence * cadence)
        frames = bin_events(rec.events, cadence, t0, int(t_imp * 1e6))
        ts, diam, rad = [], [], []
        for fr in frames:
            pts = active_points(fr)
            try:
                d = hull_diameter(pts)
                r = hough_circle(pts, fr.pos.shape, (cfg["eval.hough_r_min"], cfg["eval.hough_r_max"])).radius
            except InsufficientEvents:
                continue
            ts.append(fr.t_end * 1e-6)
            diam.append(d)
            rad.append(r)
        tau_hat = expansion_ttc(ts, diam)
        for t, d, r, th in zip(ts, diam, rad, tau_hat):
            rows.append(f"{rec.name},{t!r},{t_imp - t!r},{d!r},{r!r},{th!r}")
            errs.append((t_imp - t, th))
    (out / "baseline").mkdir(parents=True, exist_ok=True)
    (out / "baseline" / "baseline.csv").write_text("\n".join(rows) + "\n")
    e = np.array([x for x in errs if np.isfinite(x[1])]).reshape(-1, 2)
    med = 100 * median_ttc_error(e[:, 0], e[:, 1]) if len(e) else float("nan")
    print(f"convex-hull expansion baseline: median TTC error {med:.1f} % over {len(e)} frames")


def cmd_ablate(args, cfg, out):
    ds = pipeline.simulate(cfg, args.jobs)
    results = pipeline.ablation_run(cfg, prep=pipeline.prepare(cfg, ds))
    reports = {name: res.report for name, res in results.items()}
    write_all(reports, out / "ablation", f"{cfg['run.kind']} ablation")
    for name, res in results.items():
        flag = " (diverged)" if res.trained.diverged else ""
        r = res.report
        print(f"{name:8s} theta {r.mean_theta_error_deg:6.1f} deg  radius {r.mean_radius_error_mm:6.1f} mm  "
              f"ttc {r.median_ttc_pct_error:6.1f} %{flag}")


def cmd_report(args, cfg, out):
    found = sorted(out.rglob("report.csv"))
    if not found:
        raise FileNotFoundError(f"missing report: expected report.csv under {out} (run eval or ablate first)")
    for path in found:
        print(f"== {path.relative_to(out)}")
        for row in read_report(path):
            print(f"{row['arm']:8s} {row['scope']:10s} n={row['n']:>6s}  "
                  f"ttc {float(row['median_ttc_pct_error']):7.2f} %  "
                  f"theta {float(row['mean_theta_error_deg']):6.2f} deg  "
                  f"radius {float(row['mean_radius_error_mm']):6.2f} mm")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate recordings and the train/test split"),
    "augment": (cmd_augment, "write balanced augmentations of both splits"),
    "filter": (cmd_filter, "encode recordings into network samples (--bench: throughput)"),
    "train": (cmd_train, "train the network on samples/train.smp"),
    "infer": (cmd_infer, "stream predictions over the held-out recordings"),
    "eval": (cmd_eval, "score predictions; write report.csv, correlation.csv and figures"),
    "baseline": (cmd_baseline, "convex-hull and Hough baselines on the held-out recordings"),
    "ablate": (cmd_ablate, "train and compare the filter and augmentation ablations"),
    "report": (cmd_report, "print every report.csv under the output directory"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--profile", choices=sorted(PROFILES), help="preset overrides applied before the file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: run)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for simulate")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="evflight", description=__doc__, epilog=_keys_epilog(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                           epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "simulate":
            p.add_argument("--object", choices=("ball", "dart"), help="shorthand for run.kind")
            p.add_argument("--n", type=int, help="shorthand for sim.n")
        if name == "filter":
            p.add_argument("--bench", action="store_true", help="measure bin+filter throughput")
            p.add_argument("--bench-events", type=int, default=2_000_000)
    return parser


def _overrides(args) -> dict[str, str]:
    vals = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        vals[k.strip()] = v.strip()
    if getattr(args, "object", None):
        vals["run.kind"] = args.object
    if getattr(args, "n", None) is not None:
        vals["sim.n"] = str(args.n)
    return vals


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args), args.profile)
        write_manifest(args.out, args.command, argv, cfg)
        COMMANDS[args.command][0](args, cfg, args.out)
    except (UsageError, ConfigError) as exc:
        print(f"evflight: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"evflight: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, EventFormatError, InsufficientEvents, ValueError) as exc:
        print(f"evflight: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
