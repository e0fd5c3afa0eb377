"""Command-line entry point: reproducible generate / train / evaluate /
sweep / compare runs.

Every run resolves its configuration from built-in defaults, an optional INI
file, and a few flag overrides, then writes the fully resolved result to
``config_echo.ini`` in the output directory before doing any work. Re-running
from the echo file reproduces every output byte for byte; all randomness
descends from the single seed in [run].
"""

from __future__ import annotations

import argparse
import csv
import sys
from configparser import ConfigParser
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, spectra, training
from .errors import ConfigError, OpenSpectraError
from .losses import LossSpec, Strategy
from .network import Model, NetworkConfig, resnet26_like, resnet_mini
from .spectra import ClassRole, ManifestClass, Split

DEFAULTS = {
    "run": {"output_dir": "runs/out", "seed": "0"},
    "data": {"manifest": "", "cut_below": "150"},
    "network": {
        "preset": "resnet_mini",
        "input_bins": "auto",
        # blank = take the preset's value
        "stem_channels": "", "stem_kernel": "", "stem_stride": "",
        "stage_channels": "", "blocks_per_stage": "", "block_kernel": "",
    },
    "train": {
        "epochs": "30", "batch_size": "32",
        "learning_rate": "1e-3", "final_learning_rate": "1e-5",
        "optimizer": "adam", "ensemble_size": "5",
    },
    "loss": {"strategy": "objectosphere", "alpha": "0.1", "beta": "10"},
    "evaluate": {
        "cutoff": "0.5", "checkpoint_dir": "",
        "grid_start": "0", "grid_stop": "1", "grid_step": "0.01",
    },
    "generate": {
        "known": "20", "ignored": "10", "never": "10",
        "per_class": "200", "bins": "1024",
        "wavenumber_start": "200", "wavenumber_stop": "3200",
        "train_fraction": repr(5.0 / 6.0),
    },
}

ECHO_NAME = "config_echo.ini"
CHECKPOINT_PATTERN = "model_run*.osn"


def load_settings(args) -> ConfigParser:
    """Defaults, then the config file, then flag overrides."""
    cp = ConfigParser()
    cp.read_dict(DEFAULTS)
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        cp.read(args.config)
    if args.out:
        cp["run"]["output_dir"] = args.out
    if args.seed is not None:
        cp["run"]["seed"] = str(args.seed)
    if getattr(args, "strategy", None):
        cp["loss"]["strategy"] = args.strategy
    if getattr(args, "manifest", None):
        cp["data"]["manifest"] = args.manifest
    if getattr(args, "cutoff", None) is not None:
        cp["evaluate"]["cutoff"] = repr(args.cutoff)
    return cp


def write_echo(cp: ConfigParser, command: str, out_dir: Path) -> None:
    cp["run"]["command"] = command
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / ECHO_NAME, "w") as fh:
        cp.write(fh)


def build_network_config(cp: ConfigParser, input_bins: int,
                         output_count: int) -> NetworkConfig:
    section = cp["network"]
    preset = section.get("preset", "resnet_mini")
    if preset == "resnet_mini":
        base = resnet_mini(input_bins, output_count)
    elif preset == "resnet26_like":
        base = resnet26_like(input_bins, output_count)
    else:
        raise ConfigError(f"unknown network preset {preset!r}")
    overrides = {}
    for key in ("stem_channels", "stem_kernel", "stem_stride",
                "blocks_per_stage", "block_kernel"):
        if section.get(key, ""):
            overrides[key] = section.getint(key)
    if section.get("stage_channels", ""):
        overrides["stage_channels"] = tuple(
            int(v) for v in section["stage_channels"].split(","))
    return replace(base, **overrides) if overrides else base


def build_train_config(cp: ConfigParser, known_class_count: int) -> training.TrainConfig:
    spec = LossSpec(
        strategy=Strategy.parse(cp["loss"]["strategy"]),
        known_class_count=known_class_count,
        alpha=cp["loss"].getfloat("alpha"),
        beta=cp["loss"].getfloat("beta"),
    )
    return training.TrainConfig(
        loss=spec,
        epochs=cp["train"].getint("epochs"),
        batch_size=cp["train"].getint("batch_size"),
        learning_rate=cp["train"].getfloat("learning_rate"),
        final_learning_rate=cp["train"].getfloat("final_learning_rate"),
        optimizer=cp["train"]["optimizer"],
        seed=cp["run"].getint("seed"),
        ensemble_size=cp["train"].getint("ensemble_size"),
    )


def cutoff_grid(cp: ConfigParser) -> np.ndarray:
    start = cp["evaluate"].getfloat("grid_start")
    stop = cp["evaluate"].getfloat("grid_stop")
    step = cp["evaluate"].getfloat("grid_step")
    if step <= 0 or stop < start:
        raise ConfigError(f"bad cutoff grid: start={start} stop={stop} step={step}")
    count = int(round((stop - start) / step)) + 1
    return np.linspace(start, stop, count)


def _require_manifest(cp: ConfigParser) -> spectra.DatasetManifest:
    path = cp["data"]["manifest"]
    if not path:
        raise ConfigError("no dataset manifest configured ([data] manifest or --manifest)")
    return spectra.load_manifest(path)


def _load_models(cp: ConfigParser, out_dir: Path, spec: LossSpec) -> list[Model]:
    ckpt_dir = Path(cp["evaluate"].get("checkpoint_dir") or out_dir)
    paths = sorted(ckpt_dir.glob(CHECKPOINT_PATTERN))
    if not paths:
        raise ConfigError(f"no checkpoints found: {ckpt_dir / CHECKPOINT_PATTERN}")
    models = [Model.load(p) for p in paths]
    for path, model in zip(paths, models):
        if model.config.output_count != spec.output_count:
            raise ConfigError(
                f"{path}: checkpoint has {model.config.output_count} outputs but "
                f"strategy {spec.strategy} needs {spec.output_count}")
    return models


# ---------------------------------------------------------------------------
# benchmark generation
# ---------------------------------------------------------------------------

def sample_profile(rng: np.random.Generator, lo: float, hi: float,
                   ) -> spectra.SyntheticClassProfile:
    """Draw one random class recipe on the wavenumber interval [lo, hi]."""
    n_peaks = int(rng.integers(3, 9))
    margin = 0.03 * (hi - lo)
    return spectra.SyntheticClassProfile(
        peak_positions=tuple(np.sort(rng.uniform(lo + margin, hi - margin, n_peaks))),
        peak_widths=tuple(rng.uniform(8.0, 40.0, n_peaks)),
        peak_amplitudes=tuple(rng.uniform(0.2, 1.0, n_peaks)),
        baseline_slope=float(rng.uniform(0.0, 1e-4)),
        baseline_offset=float(rng.uniform(0.0, 0.2)),
        noise_sigma=float(rng.uniform(0.005, 0.02)),
        position_jitter=float(rng.uniform(0.5, 3.0)),
        width_jitter=float(rng.uniform(0.02, 0.08)),
        amplitude_jitter=float(rng.uniform(0.03, 0.10)),
    )


def generate_benchmark(out_dir, known: int, ignored: int, never: int,
                       per_class: int, bins: int, seed: int,
                       wavenumber_range: tuple[float, float] = (200.0, 3200.0),
                       train_fraction: float = 5.0 / 6.0) -> Path:
    """Write a full synthetic benchmark tree plus manifest; returns its path.

    Class ids are k00.., i00.., n00.. in role order. Deterministic per seed,
    byte for byte.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = wavenumber_range
    grid = np.linspace(lo, hi, bins)
    master = np.random.default_rng(seed)

    roles = ([ClassRole.KNOWN] * known + [ClassRole.IGNORED] * ignored
             + [ClassRole.NEVER_SEEN] * never)
    prefixes = {ClassRole.KNOWN: "k", ClassRole.IGNORED: "i", ClassRole.NEVER_SEEN: "n"}
    counters = {role: 0 for role in prefixes}
    classes, files = [], {}
    for role in roles:
        cid = f"{prefixes[role]}{counters[role]:02d}"
        counters[role] += 1
        profile = sample_profile(master, lo, hi)
        class_seed = int(master.integers(2 ** 63))
        class_dir = out_dir / cid
        class_dir.mkdir(exist_ok=True)
        samples = spectra.generate_synthetic(profile, per_class, class_seed,
                                             wavenumbers=grid)
        for j, sample in enumerate(samples):
            spectra.write_csv(class_dir / f"{j:04d}.csv", sample)
        classes.append(ManifestClass(cid, f"synthetic {cid}", role))
        files[cid] = f"{cid}/*.csv"

    manifest_path = out_dir / "manifest.ini"
    spectra.write_manifest(manifest_path, classes, files, train_fraction, seed)
    return manifest_path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cp = load_settings(args)
    out_dir = Path(cp["run"]["output_dir"])
    gen = cp["generate"]
    write_echo(cp, "generate", out_dir)
    manifest_path = generate_benchmark(
        out_dir,
        known=gen.getint("known"), ignored=gen.getint("ignored"),
        never=gen.getint("never"), per_class=gen.getint("per_class"),
        bins=gen.getint("bins"), seed=cp["run"].getint("seed"),
        wavenumber_range=(gen.getfloat("wavenumber_start"),
                          gen.getfloat("wavenumber_stop")),
        train_fraction=gen.getfloat("train_fraction"))
    total = gen.getint("known") + gen.getint("ignored") + gen.getint("never")
    print(f"wrote {total} classes x {gen.getint('per_class')} spectra under {out_dir}")
    print(f"manifest: {manifest_path}")
    return 0


def cmd_train(args) -> int:
    cp = load_settings(args)
    out_dir = Path(cp["run"]["output_dir"])
    manifest = _require_manifest(cp)
    train_arrays = spectra.load_split(manifest, Split.TRAIN,
                                      cp["data"].getfloat("cut_below"))
    config = build_train_config(cp, manifest.known_class_count)
    cp["network"]["input_bins"] = str(train_arrays.x.shape[1])
    net_config = build_network_config(cp, train_arrays.x.shape[1],
                                      config.loss.output_count)
    write_echo(cp, "train", out_dir)

    result = training.train_ensemble(train_arrays, net_config, config)
    for r, (model, history) in enumerate(zip(result.models, result.histories)):
        model.save(out_dir / f"model_run{r}.osn")
        training.write_train_log(out_dir / f"train_log_run{r}.csv", history)
        last = history.rows[-1]
        print(f"run {r} (seed {result.run_seeds[r]}): "
              f"loss {last.loss:.4f}, train accuracy {last.train_accuracy:.2%}")
        for warning in history.warnings:
            print(f"run {r} warning: {warning}")
    print(f"checkpoints and logs written to {out_dir}")
    return 0


def _load_for_scoring(cp: ConfigParser):
    manifest = _require_manifest(cp)
    test_arrays = spectra.load_split(manifest, Split.TEST,
                                     cp["data"].getfloat("cut_below"))
    config = build_train_config(cp, manifest.known_class_count)
    return manifest, test_arrays, config.loss


def cmd_evaluate(args) -> int:
    cp = load_settings(args)
    out_dir = Path(cp["run"]["output_dir"])
    manifest, test_arrays, spec = _load_for_scoring(cp)
    models = _load_models(cp, out_dir, spec)
    cp["network"]["input_bins"] = str(test_arrays.x.shape[1])
    write_echo(cp, "evaluate", out_dir)

    prediction = training.ensemble_predict(models, test_arrays.x)
    features = training.predict_features(models[0], test_arrays.x)
    report = evaluation.evaluate(
        prediction.per_run, test_arrays.roles, test_arrays.labels,
        test_arrays.class_ids, test_arrays.known_ids,
        cp["evaluate"].getfloat("cutoff"), spec.strategy, features=features)

    evaluation.write_report(out_dir / "report.csv", report)
    evaluation.write_feature_norm_csv(out_dir / "feature_norms.csv",
                                      report.feature_norms)
    evaluation.export_features(out_dir / "features_run0.csv",
                               test_arrays.sample_ids, test_arrays.roles, features)
    print(evaluation.format_report(report))
    print(f"report files written to {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    cp = load_settings(args)
    out_dir = Path(cp["run"]["output_dir"])
    manifest, test_arrays, spec = _load_for_scoring(cp)
    models = _load_models(cp, out_dir, spec)
    cp["network"]["input_bins"] = str(test_arrays.x.shape[1])
    write_echo(cp, "sweep", out_dir)

    prediction = training.ensemble_predict(models, test_arrays.x)
    rows = evaluation.threshold_sweep(
        prediction.averaged, test_arrays.roles, test_arrays.labels,
        cutoff_grid(cp), spec.strategy, spec.known_class_count)
    evaluation.write_sweep_csv(out_dir / "sweep.csv", rows)
    op = evaluation.select_operating_point(rows)
    flag = " [flagged: " + op.note + "]" if op.flagged else ""
    print(f"selected cutoff {op.row.cutoff:g}{flag}")
    print(f"  fp_ignored={_fmt(op.row.fp_ignored)} fp_never={_fmt(op.row.fp_never)} "
          f"inconclusive_known={op.row.inconclusive_known:.4f}")
    print(f"sweep table written to {out_dir / 'sweep.csv'}")
    return 0


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def compare_strategies(cp: ConfigParser, out_dir: Path) -> list[dict]:
    """Train, sweep, and pick an operating point for all four strategies."""
    manifest = _require_manifest(cp)
    cut_below = cp["data"].getfloat("cut_below")
    train_arrays = spectra.load_split(manifest, Split.TRAIN, cut_below)
    test_arrays = spectra.load_split(manifest, Split.TEST, cut_below)
    grid = cutoff_grid(cp)
    base_config = build_train_config(cp, manifest.known_class_count)

    results = []
    for strategy in Strategy:
        spec = replace(base_config.loss, strategy=strategy)
        config = replace(base_config, loss=spec)
        net_config = build_network_config(cp, train_arrays.x.shape[1],
                                          spec.output_count)
        strategy_dir = out_dir / str(strategy)
        strategy_dir.mkdir(parents=True, exist_ok=True)
        ensemble = training.train_ensemble(train_arrays, net_config, config)
        for r, (model, history) in enumerate(zip(ensemble.models, ensemble.histories)):
            model.save(strategy_dir / f"model_run{r}.osn")
            training.write_train_log(strategy_dir / f"train_log_run{r}.csv", history)

        prediction = training.ensemble_predict(ensemble.models, test_arrays.x)
        rows = evaluation.threshold_sweep(
            prediction.averaged, test_arrays.roles, test_arrays.labels,
            grid, strategy, spec.known_class_count)
        evaluation.write_sweep_csv(strategy_dir / "sweep.csv", rows)
        op = evaluation.select_operating_point(rows)
        results.append({
            "strategy": str(strategy),
            "cutoff": op.row.cutoff,
            "fp_ignored": op.row.fp_ignored,
            "fp_never": op.row.fp_never,
            "inconclusive_known": op.row.inconclusive_known,
            "accuracy_known": op.row.accuracy_known,
            "flagged": op.flagged,
            "sweep": rows,
            "models": ensemble.models,
            "test_arrays": test_arrays,
        })
    return results


COMPARE_COLUMNS = ["strategy", "cutoff", "fp_ignored", "fp_never",
                   "inconclusive_known", "accuracy_known", "flagged"]


def write_compare_csv(path, results: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for row in results:
            writer.writerow([
                row["strategy"], "%.9g" % row["cutoff"],
                "nan" if row["fp_ignored"] is None else "%.9g" % row["fp_ignored"],
                "nan" if row["fp_never"] is None else "%.9g" % row["fp_never"],
                "%.9g" % row["inconclusive_known"], "%.9g" % row["accuracy_known"],
                str(row["flagged"]).lower()])


def format_compare_table(results: list[dict]) -> str:
    header = (f"{'strategy':<20} {'cutoff':>7} {'fp_ign':>7} {'fp_new':>7} "
              f"{'inconcl':>8} {'accur':>7} flagged")
    lines = [header, "-" * len(header)]
    for row in results:
        lines.append(
            f"{row['strategy']:<20} {row['cutoff']:>7.3f} "
            f"{_fmt(row['fp_ignored']):>7} {_fmt(row['fp_never']):>7} "
            f"{row['inconclusive_known']:>8.4f} {row['accuracy_known']:>7.4f} "
            f"{'yes' if row['flagged'] else 'no'}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    cp = load_settings(args)
    out_dir = Path(cp["run"]["output_dir"])
    write_echo(cp, "compare", out_dir)
    results = compare_strategies(cp, out_dir)
    write_compare_csv(out_dir / "compare.csv", results)
    print(format_compare_table(results))
    print(f"comparison written to {out_dir / 'compare.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openspectra",
        description="Open-set spectrum classification: four rejection "
                    "strategies on a residual 1-D network.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy_flag=True):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--out", help="output directory (overrides [run] output_dir)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--manifest", help="dataset manifest override")
        if strategy_flag:
            p.add_argument("--strategy", choices=[s.value for s in Strategy],
                           help="strategy override")

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    common(p, strategy_flag=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an ensemble for one strategy")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints at a fixed cutoff")
    common(p)
    p.add_argument("--cutoff", type=float, help="decision cutoff override")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="cutoff sweep and operating-point selection")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="all four strategies side by side")
    common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OpenSpectraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
