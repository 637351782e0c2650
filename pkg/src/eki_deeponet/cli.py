"""Command-line driver: generate, train, evaluate, predict, q-sweep.

Run layout::

    <out>/<run_name>/
        config.resolved.json
        dataset/{gen,test}/
        ensemble/
        report.json
        metrics.json, scatter.csv, hist.csv, worst_samples.csv
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import core
from .adaptive_q import FixedQ, QController, QControllerConfig
from .datagen import GpConfig, Problem, ProblemSpec, build_dataset
from .deeponet import DeepONetArch
from .eki import EkiConfig, predict, train
from .metrics import suite_metrics, write_outputs
from .stopping import Stopper, StopperConfig

log = logging.getLogger("eki_deeponet")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "antiderivative"
    noise: float = 0.01
    seed: int = 0
    out: str = "runs"
    run_name: Optional[str] = None
    # data
    gp_amplitude: float = 1.0
    gp_length_scale: float = 0.2
    m: int = 100
    n_train: int = 800
    n_q: int = 100
    n_stop: int = 100
    n_test: int = 1000
    nu: float = 0.01
    k: float = 0.01
    # network
    width: int = 128
    depth: int = 3
    branch_activation: str = "relu"
    trunk_activation: str = "tanh"
    # EKI
    J: int = 5000
    batch_train: int = 500
    batch_q: int = 500
    batch_stop: int = 500
    omega0: float = 0.01
    max_iterations: int = 5000
    fixed_q: Optional[float] = None
    # omega controller
    alpha: float = 0.05
    tau: float = 0.1
    q_window: int = 10
    omega_min: float = 1e-8
    omega_max: float = 1.0
    # early stopping
    stop_window: int = 10
    patience: int = 100
    # misc
    threads: Optional[int] = None
    n_worst: int = 3
    sweep_sigma2: List[float] = field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    sweep_sample: int = 0

    @property
    def name(self) -> str:
        if self.run_name:
            return self.run_name
        return f"{self.problem}-noise{self.noise:g}-seed{self.seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(
            kind=Problem(self.problem), nu=self.nu, k=self.k,
            counts={"train": self.n_train, "q_learn": self.n_q, "stop": self.n_stop, "test": self.n_test},
            noise_percent=self.noise)

    def gp_config(self) -> GpConfig:
        return GpConfig(self.gp_amplitude, self.gp_length_scale, self.m)

    def arch(self) -> DeepONetArch:
        d_y = 2 if Problem(self.problem) is Problem.REACTION_DIFFUSION else 1
        hidden = [self.width] * self.depth
        return DeepONetArch((self.m, *hidden), (d_y, *hidden), self.branch_activation, self.trunk_activation)

    def eki_config(self) -> EkiConfig:
        return EkiConfig(self.J, self.batch_train, self.batch_q, self.batch_stop,
                         self.omega0, self.max_iterations, self.seed)

    def q_config(self) -> QControllerConfig:
        return QControllerConfig(self.alpha, self.tau, self.q_window, self.omega_min, self.omega_max)

    def stopper_config(self) -> StopperConfig:
        return StopperConfig(self.stop_window, self.patience)

    def validate(self) -> "RunConfig":
        try:
            Problem(self.problem)
        except ValueError:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from "
                              f"{[p.value for p in Problem]}") from None
        if self.fixed_q is not None and self.fixed_q < 0:
            raise ConfigError("fixed_q must be non-negative")
        try:
            self.problem_spec(), self.gp_config(), self.arch(), self.eki_config()
            self.q_config(), self.stopper_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def resolve_config(config_file=None, overrides=None) -> RunConfig:
    """Defaults < config file < explicit overrides (None values are ignored)."""
    values = {}
    if config_file:
        values.update(json.loads(Path(config_file).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values).validate()


def _write_config(cfg: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _dataset_dirs(base) -> tuple:
    base = Path(base)
    return base / "gen", base / "test"


# -- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> Path:
    run = cfg.run_dir
    gen, test = build_dataset(cfg.problem_spec(), cfg.gp_config(), cfg.seed)
    gen_dir, test_dir = _dataset_dirs(run / "dataset")
    core.save_dataset(gen, gen_dir)
    core.save_dataset(test, test_dir)
    _write_config(cfg, run)
    log.info("wrote %d generation pairs and %d test pairs to %s", len(gen), len(test), run / "dataset")
    return run


def _check_dataset(cfg: RunConfig, ds: core.OperatorDataset) -> None:
    if ds.meta.problem != cfg.problem:
        raise ConfigError(f"dataset is for problem {ds.meta.problem!r}, config says {cfg.problem!r}")
    if ds.m != cfg.m:
        raise ConfigError(f"dataset has {ds.m} sensors, config expects m={cfg.m}")


def train_run(cfg: RunConfig, gen: core.OperatorDataset, run: Path):
    _check_dataset(cfg, gen)
    arch = cfg.arch()
    if cfg.fixed_q is not None:
        controller = FixedQ(float(np.sqrt(cfg.fixed_q)))
    else:
        controller = QController(cfg.omega0, cfg.q_config())
    ens, report = train(gen, arch, cfg.eki_config(), controller, Stopper(cfg.stopper_config()))
    run.mkdir(parents=True, exist_ok=True)
    core.save_ensemble(ens, run / "ensemble")
    (run / "report.json").write_text(report.to_json() + "\n")
    _write_config(cfg, run)
    log.info("%s after %d iterations (best %d), %.1f s", report.stop_reason, report.iterations,
             report.best_iteration, report.wall_seconds)
    return ens, report


def cmd_train(cfg: RunConfig, dataset: Optional[Path] = None) -> Path:
    run = cfg.run_dir
    gen_dir, _ = _dataset_dirs(dataset or run / "dataset")
    train_run(cfg, core.load_dataset(gen_dir), run)
    return run


def evaluate_run(cfg: RunConfig, ens, test: core.OperatorDataset, run: Path):
    arch = cfg.arch()
    _check_dataset(cfg, test)
    suite = suite_metrics(test, ens, arch)
    write_outputs(suite, run)
    worst = sorted(zip(suite.samples, suite.indices), key=lambda p: -p[0].rel_error)[:cfg.n_worst]
    _dump_predictions(run / "worst_samples.csv", ens, arch, test, [i for _, i in worst])
    return suite


def cmd_evaluate(cfg: RunConfig, dataset: Optional[Path] = None) -> Path:
    run = cfg.run_dir
    _, test_dir = _dataset_dirs(dataset or run / "dataset")
    ens = core.load_ensemble(run / "ensemble", cfg.arch().fingerprint())
    suite = evaluate_run(cfg, ens, core.load_dataset(test_dir), run)
    log.info("e_t=%.4f q_t=%.4f c_t=%.4f", suite.mean_e, suite.mean_q, suite.mean_c)
    return run


def _dump_predictions(path: Path, ens, arch, ds: core.OperatorDataset, indices, label=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        coords = [f"y{d}" for d in range(ds.query_points.shape[1])]
        w.writerow((["mode"] if label else []) + ["sample_index", *coords, "truth", "mean", "std"])
        for i in indices:
            mean, std = predict(ens, arch, ds.u_sensors[i], ds.query_points)
            for k in range(ds.n_query):
                row = [i, *map(repr, ds.query_points[k].tolist()),
                       repr(float(ds.outputs[i, k])), repr(float(mean[k])), repr(float(std[k]))]
                w.writerow(([label] if label else []) + row)


def cmd_predict(cfg: RunConfig, index: int, dataset: Optional[Path] = None,
                output: Optional[Path] = None) -> Path:
    run = cfg.run_dir
    _, test_dir = _dataset_dirs(dataset or run / "dataset")
    test = core.load_dataset(test_dir)
    if not 0 <= index < len(test):
        raise ConfigError(f"index {index} outside test set of {len(test)}")
    ens = core.load_ensemble(run / "ensemble", cfg.arch().fingerprint())
    path = output or run / f"prediction_{index}.csv"
    _dump_predictions(Path(path), ens, cfg.arch(), test, [index])
    return Path(path)


def cmd_q_sweep(cfg: RunConfig, dataset: Optional[Path] = None, sigma2=None) -> Path:
    """Train once per fixed sigma^2 (Q = sigma^2 I) and once adaptively; tabulate."""
    run = cfg.run_dir
    gen_dir, test_dir = _dataset_dirs(dataset or run / "dataset")
    gen, test = core.load_dataset(gen_dir), core.load_dataset(test_dir)
    sigma2 = list(cfg.sweep_sigma2 if sigma2 is None else sigma2)
    modes = [("fixed", float(s)) for s in sigma2] + [("adaptive", None)]
    rows = []
    sweep_dir = run / "q_sweep"
    for mode, s2 in modes:
        sub_cfg = dataclasses.replace(cfg, fixed_q=s2)
        tag = f"fixed-{s2:g}" if s2 is not None else "adaptive"
        sub = sweep_dir / tag
        ens, report = train_run(sub_cfg, gen, sub)
        suite = evaluate_run(sub_cfg, ens, test, sub)
        _dump_predictions(sub / "sample_prediction.csv", ens, cfg.arch(), test, [cfg.sweep_sample], label=tag)
        rows.append((mode, "" if s2 is None else repr(s2), suite.mean_e, suite.mean_q, suite.mean_c,
                     report.omega[-1] ** 2 if report.omega else cfg.omega0 ** 2))
        log.info("%s: e=%.4f q=%.4f c=%.4f", tag, suite.mean_e, suite.mean_q, suite.mean_c)
    with open(run / "q_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "sigma2", "mean_e", "mean_q", "mean_c", "final_sigma2"])
        for mode, s2, e, q, c, fs in rows:
            w.writerow([mode, s2, repr(e), repr(q), repr(c), repr(fs)])
    _write_config(cfg, run)
    return run / "q_sweep.csv"


# -- argument parsing ---------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="parent directory of run directories")
    p.add_argument("--run-name", dest="run_name")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--fixed-q", dest="fixed_q", type=float, help="pin Q = value * I (omega = sqrt(value))")
    p.add_argument("--noise", type=float, choices=(0.01, 0.05))
    p.add_argument("--problem", choices=[p.value for p in Problem])
    p.add_argument("--dataset", type=Path, help="dataset directory (defaults to <run>/dataset)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eki-deeponet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "predict", "q-sweep"):
        p = sub.add_parser(name)
        _shared(p)
        if name == "predict":
            p.add_argument("--index", type=int, default=0, help="test function index")
            p.add_argument("--output", type=Path)
        if name == "q-sweep":
            p.add_argument("--sigma2", type=float, nargs="+", help="fixed Q = sigma2 * I values")
    return parser


_OVERRIDE_KEYS = ("seed", "out", "run_name", "threads", "max_iterations", "fixed_q", "noise", "problem")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, {k: getattr(args, k) for k in _OVERRIDE_KEYS})
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    limiter = None
    if cfg.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=cfg.threads)
    try:
        if args.command == "generate":
            print(cmd_generate(cfg))
        elif args.command == "train":
            print(cmd_train(cfg, args.dataset))
        elif args.command == "evaluate":
            print(cmd_evaluate(cfg, args.dataset))
        elif args.command == "predict":
            print(cmd_predict(cfg, args.index, args.dataset, args.output))
        elif args.command == "q-sweep":
            print(cmd_q_sweep(cfg, args.dataset, args.sigma2))
    except (ConfigError, core.DatasetError, core.EnsembleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
