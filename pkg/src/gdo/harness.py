"""Config-driven experiment grids.

A JSON config names a dataset family, the (n_given, inter_steps) grid,
methods, and seeds. run_grid executes every (method, cell, seed) combination,
scores each trained model on a held-out slice of the target domain, and
returns rows that write_results serializes to a results CSV plus a JSON
manifest. The CSV is byte-reproducible: wall-clock numbers live only in the
manifest, and the runtime_ms column is a fixed placeholder.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import baselines, domains as dm, nn, osmosis as osm
from .errors import ConfigError

DATASETS = ("two_moons", "gaussians", "rotated_mnist", "color_shift_mnist")
METHODS = ("gdo", "gst", "source_only", "target_st")

CSV_HEADER = "dataset,method,n_given,inter_steps,seed,target_acc,runtime_ms"
SUMMARY_HEADER = "method,n_given,inter_steps,n,mean,sd,ci95_halfwidth,label"
BOUND_HEADER = "T,err0,mu,gamma0,sigma2,epsilon,m,delta,c,bound"

# Fraction of the target domain withheld from every method and used only
# for the target_acc column.
HOLDOUT_FRAC = 0.2

DATA_DIR_ENV = "GDO_DATA_DIR"

# Seed-stream purposes, continuing the numbering used by the training loop
# (osmosis claims 0..4).
_P_HOLDOUT = 5
_P_DATA = 6

_MNIST_SIDE = 28

# Per-dataset defaults. total_shift is degrees for the rotation families and
# an additive pixel offset for color_shift_mnist.
_DATASET_DEFAULTS = {
    "two_moons": {"n": 2000, "noise": 0.1, "total_shift": 120.0, "arch": (64, 64)},
    "gaussians": {"n": 2000, "noise": 0.3, "total_shift": 90.0, "arch": (64, 64)},
    "rotated_mnist": {"n": 2000, "noise": 0.0, "total_shift": 45.0, "arch": (256, 256)},
    "color_shift_mnist": {"n": 2000, "noise": 0.0, "total_shift": 1.0, "arch": (256, 256)},
}

# Keys of the "gdo" section. seed and inter_steps are set per grid cell and
# deliberately absent.
_GDO_FLOAT_KEYS = ("alpha", "beta", "zeta")
_GDO_INT_KEYS = ("m", "epochs_per_step", "pretrain_epochs", "inter_sample_size")

_THEORY_DEFAULTS = {
    "err0": 1.0, "mu": 2.0, "gamma0": 0.5, "sigma2": 1.0, "epsilon": 0.1,
    "m": 50, "delta": 0.05, "c": 0.5, "t_max": 50,
}


@dataclass
class ExperimentConfig:
    """A fully resolved experiment description.

    Every field is explicit after parsing: defaults are filled in, the gdo
    section carries the complete hyperparameter set, and emit_config writes
    all of it back out, so parse(emit(parse(f))) == parse(f).
    """

    dataset: str
    n: int
    noise: float
    total_shift: float
    data_dir: str | None
    arch: tuple[int, ...]
    n_given_grid: tuple[int, ...]
    inter_steps_grid: tuple[int, ...]
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    gdo: dict[str, Any]
    theory: dict[str, Any]
    output_dir: str


@dataclass
class ResultRow:
    """Outcome of one (method, n_given, inter_steps, seed) run.

    target_acc is measured on the held-out target slice. runtime_ms and the
    per-domain accuracies are manifest-only detail; the CSV carries a zero
    placeholder in the runtime column so reruns stay byte-identical.
    """

    dataset: str
    method: str
    n_given: int
    inter_steps: int
    seed: int
    target_acc: float
    runtime_ms: float = 0.0
    domain_acc: tuple[float, ...] = ()
    fingerprint: str = ""

    @property
    def cell_key(self) -> tuple[int, int, str, int]:
        return (self.n_given, self.inter_steps, self.method, self.seed)


@dataclass
class CellFailure:
    """One failed run, recorded so the rest of the grid can proceed."""

    method: str
    n_given: int
    inter_steps: int
    seed: int
    error: str


@dataclass
class GridOutcome:
    rows: list[ResultRow]
    failures: list[CellFailure]
    started: str
    finished: str


@dataclass
class CellSummary:
    """Aggregate over seeds for one (method, n_given, inter_steps) cell."""

    method: str
    n_given: int
    inter_steps: int
    n: int
    mean: float
    sd: float
    halfwidth: float
    label: str


# ---------------------------------------------------------------------------
# config parsing


def _type_name(v: Any) -> str:
    return type(v).__name__


def _expect(value: Any, typ: type, path: str) -> Any:
    """Check a JSON value's type; bool never passes for int or float."""
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{path}' must be a number, got {_type_name(value)}")
        return float(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{path}' must be an integer, got {_type_name(value)}")
        return value
    if not isinstance(value, typ):
        raise ConfigError(
            f"key '{path}' must be a {typ.__name__}, got {_type_name(value)}")
    return value


def _int_list(value: Any, path: str) -> tuple[int, ...]:
    _expect(value, list, path)
    return tuple(_expect(v, int, f"{path}[{i}]") for i, v in enumerate(value))


def _check_unknown(raw: dict, known: Sequence[str], where: str) -> None:
    for key in raw:
        if key not in known:
            prefix = f"{where}." if where else ""
            raise ConfigError(
                f"unknown key '{prefix}{key}'; known keys: {', '.join(sorted(known))}")


def _resolve_gdo(raw: Any) -> dict[str, Any]:
    """Merge a partial gdo section over the GdoConfig defaults.

    Returns the complete section (every key explicit). seed and inter_steps
    are rejected: the grid and the seeds list own those.
    """
    base = osm.GdoConfig()
    full: dict[str, Any] = {
        "alpha": base.alpha, "beta": base.beta, "m": base.m,
        "lr": {"gamma0": base.lr.gamma0, "epsilon": base.lr.epsilon},
        "zeta": base.zeta, "epochs_per_step": base.epochs_per_step,
        "pretrain_epochs": base.pretrain_epochs,
        "update_mode": base.update_mode,
        "inter_sample_size": base.inter_sample_size,
    }
    if raw is None:
        return full
    _expect(raw, dict, "gdo")
    for banned, owner in (("seed", "the seeds list"), ("inter_steps", "inter_steps_grid")):
        if banned in raw:
            raise ConfigError(f"key 'gdo.{banned}' is not allowed; {owner} sets it per run")
    _check_unknown(raw, list(full), "gdo")
    for k in _GDO_FLOAT_KEYS:
        if k in raw:
            full[k] = _expect(raw[k], float, f"gdo.{k}")
    for k in _GDO_INT_KEYS:
        if k in raw:
            full[k] = _expect(raw[k], int, f"gdo.{k}")
    if "update_mode" in raw:
        full["update_mode"] = _expect(raw["update_mode"], str, "gdo.update_mode")
    if "lr" in raw:
        lr_raw = _expect(raw["lr"], dict, "gdo.lr")
        _check_unknown(lr_raw, ("gamma0", "epsilon"), "gdo.lr")
        lr = dict(full["lr"])
        for k in ("gamma0", "epsilon"):
            if k in lr_raw:
                lr[k] = _expect(lr_raw[k], float, f"gdo.lr.{k}")
        full["lr"] = lr
    # Constructing the real objects surfaces value errors (negative rates,
    # bad mode strings) with the config's vocabulary.
    try:
        gdo_config(_probe_config_holder(full), inter_steps=0, seed=0)
    except ValueError as e:
        raise ConfigError(f"invalid value in 'gdo' section: {e}") from e
    return full


def _probe_config_holder(gdo: dict[str, Any]) -> ExperimentConfig:
    return ExperimentConfig(
        dataset="two_moons", n=2, noise=0.0, total_shift=1.0, data_dir=None,
        arch=(), n_given_grid=(2,), inter_steps_grid=(0,), methods=("gdo",),
        seeds=(0,), gdo=gdo, theory=dict(_THEORY_DEFAULTS), output_dir=".")


def _resolve_theory(raw: Any) -> dict[str, Any]:
    full = dict(_THEORY_DEFAULTS)
    if raw is None:
        return full
    _expect(raw, dict, "theory")
    _check_unknown(raw, list(full), "theory")
    for k in ("err0", "mu", "gamma0", "sigma2", "epsilon", "delta", "c"):
        if k in raw:
            full[k] = _expect(raw[k], float, f"theory.{k}")
    for k in ("m", "t_max"):
        if k in raw:
            full[k] = _expect(raw[k], int, f"theory.{k}")
    if full["t_max"] < 1:
        raise ConfigError(f"key 'theory.t_max' must be >= 1, got {full['t_max']}")
    try:
        bound_params(full, 1)
    except ValueError as e:
        raise ConfigError(f"invalid value in 'theory' section: {e}") from e
    return full


_TOP_KEYS = ("dataset", "n", "noise", "total_shift", "data_dir", "arch",
             "n_given_grid", "inter_steps_grid", "methods", "seeds", "gdo",
             "theory", "output_dir")


def config_from_dict(raw: Any) -> ExperimentConfig:
    """Validate a decoded JSON object into an ExperimentConfig.

    Unknown keys anywhere in the tree are fatal and named in the error;
    type mismatches report the offending path.
    """
    _expect(raw, dict, "<top level>")
    _check_unknown(raw, _TOP_KEYS, "")
    if "dataset" not in raw:
        raise ConfigError("key 'dataset' is required")
    dataset = _expect(raw["dataset"], str, "dataset")
    if dataset not in DATASETS:
        raise ConfigError(
            f"key 'dataset' must be one of {', '.join(DATASETS)}; got '{dataset}'")
    defaults = _DATASET_DEFAULTS[dataset]

    n = _expect(raw["n"], int, "n") if "n" in raw else defaults["n"]
    if n < 2:
        raise ConfigError(f"key 'n' must be >= 2, got {n}")
    noise = _expect(raw["noise"], float, "noise") if "noise" in raw else defaults["noise"]
    if noise < 0:
        raise ConfigError(f"key 'noise' must be >= 0, got {noise}")
    total_shift = (_expect(raw["total_shift"], float, "total_shift")
                   if "total_shift" in raw else defaults["total_shift"])

    data_dir = None
    if "data_dir" in raw and raw["data_dir"] is not None:
        data_dir = _expect(raw["data_dir"], str, "data_dir")

    arch = (_int_list(raw["arch"], "arch") if "arch" in raw else tuple(defaults["arch"]))
    if any(w < 1 for w in arch):
        raise ConfigError(f"key 'arch' widths must be >= 1, got {list(arch)}")

    n_given_grid = (_int_list(raw["n_given_grid"], "n_given_grid")
                    if "n_given_grid" in raw else (6,))
    if not n_given_grid:
        raise ConfigError("key 'n_given_grid' must not be empty")
    if any(g < 2 for g in n_given_grid):
        raise ConfigError(f"key 'n_given_grid' entries must be >= 2, got {list(n_given_grid)}")
    if len(set(n_given_grid)) != len(n_given_grid):
        raise ConfigError("key 'n_given_grid' entries must be distinct")

    inter_steps_grid = (_int_list(raw["inter_steps_grid"], "inter_steps_grid")
                        if "inter_steps_grid" in raw else (2,))
    if not inter_steps_grid:
        raise ConfigError("key 'inter_steps_grid' must not be empty")
    if any(s < 0 for s in inter_steps_grid):
        raise ConfigError(
            f"key 'inter_steps_grid' entries must be >= 0, got {list(inter_steps_grid)}")
    if len(set(inter_steps_grid)) != len(inter_steps_grid):
        raise ConfigError("key 'inter_steps_grid' entries must be distinct")

    if "methods" in raw:
        methods_raw = _expect(raw["methods"], list, "methods")
        methods = tuple(_expect(v, str, f"methods[{i}]") for i, v in enumerate(methods_raw))
    else:
        methods = METHODS
    if not methods:
        raise ConfigError("key 'methods' must not be empty")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(
                f"key 'methods' allows {', '.join(METHODS)}; got '{m}'")
    if len(set(methods)) != len(methods):
        raise ConfigError("key 'methods' entries must be distinct")

    seeds = _int_list(raw["seeds"], "seeds") if "seeds" in raw else (0,)
    if not seeds:
        raise ConfigError("key 'seeds' must not be empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"key 'seeds' entries must be distinct, got {list(seeds)}")
    if any(s < 0 for s in seeds):
        raise ConfigError(f"key 'seeds' entries must be >= 0, got {list(seeds)}")

    gdo = _resolve_gdo(raw.get("gdo"))
    theory = _resolve_theory(raw.get("theory"))
    output_dir = (_expect(raw["output_dir"], str, "output_dir")
                  if "output_dir" in raw else "results")

    cfg = ExperimentConfig(
        dataset=dataset, n=n, noise=noise, total_shift=total_shift,
        data_dir=data_dir, arch=arch, n_given_grid=n_given_grid,
        inter_steps_grid=inter_steps_grid, methods=methods, seeds=seeds,
        gdo=gdo, theory=theory, output_dir=output_dir)
    _check_data_files(cfg)
    return cfg


def resolved_data_dir(cfg: ExperimentConfig) -> str | None:
    """The data directory, with the environment variable taking precedence."""
    return os.environ.get(DATA_DIR_ENV) or cfg.data_dir


def mnist_paths(data_dir: str) -> tuple[Path, Path]:
    d = Path(data_dir)
    return d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte"


def _check_data_files(cfg: ExperimentConfig) -> None:
    if cfg.dataset not in ("rotated_mnist", "color_shift_mnist"):
        return
    data_dir = resolved_data_dir(cfg)
    if data_dir is None:
        raise ConfigError(
            f"dataset '{cfg.dataset}' needs 'data_dir' (or ${DATA_DIR_ENV})")
    for p in mnist_paths(data_dir):
        if not p.is_file():
            raise ConfigError(f"data file not found: {p}")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config-not-found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def emit_config(cfg: ExperimentConfig) -> dict[str, Any]:
    """The config as a JSON-ready dict with every default explicit.

    Feeding the result back through config_from_dict reproduces cfg exactly.
    """
    return {
        "dataset": cfg.dataset,
        "n": cfg.n,
        "noise": cfg.noise,
        "total_shift": cfg.total_shift,
        "data_dir": cfg.data_dir,
        "arch": list(cfg.arch),
        "n_given_grid": list(cfg.n_given_grid),
        "inter_steps_grid": list(cfg.inter_steps_grid),
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "gdo": {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.gdo.items()},
        "theory": dict(cfg.theory),
        "output_dir": cfg.output_dir,
    }


def gdo_config(cfg: ExperimentConfig, inter_steps: int, seed: int) -> osm.GdoConfig:
    """Materialize the training hyperparameters for one grid cell."""
    g = cfg.gdo
    return osm.GdoConfig(
        alpha=g["alpha"], beta=g["beta"], inter_steps=inter_steps, m=g["m"],
        lr=nn.LrSchedule(g["lr"]["gamma0"], g["lr"]["epsilon"]), zeta=g["zeta"],
        epochs_per_step=g["epochs_per_step"], seed=seed,
        pretrain_epochs=g["pretrain_epochs"], update_mode=g["update_mode"],
        inter_sample_size=g["inter_sample_size"])


def bound_params(theory: dict[str, Any], t: int):
    from .theory import BoundParams
    return BoundParams(
        err0=theory["err0"], mu=theory["mu"], gamma0=theory["gamma0"],
        sigma2=theory["sigma2"], epsilon=theory["epsilon"], m=theory["m"],
        T=t, delta=theory["delta"], c=theory["c"])


# ---------------------------------------------------------------------------
# dataset construction


@lru_cache(maxsize=8)
def _mnist_base(images_path: str, labels_path: str) -> dm.Dataset:
    return dm.load_idx(images_path, labels_path)


def _mnist_source(cfg: ExperimentConfig, seed: int) -> dm.Dataset:
    imgs, labels = mnist_paths(resolved_data_dir(cfg))
    base = _mnist_base(str(imgs), str(labels))
    if base.n < cfg.n:
        raise ConfigError(f"data file {imgs} holds {base.n} items, need n={cfg.n}")
    rng = np.random.default_rng(osm.child_seed(seed, _P_DATA))
    idx = np.sort(rng.permutation(base.n)[:cfg.n])
    return base.subset(idx)


def build_cell_sequence(cfg: ExperimentConfig, n_given: int, seed: int
                        ) -> dm.DomainSequence:
    """The domain sequence for one grid cell; all methods in the cell share it."""
    if cfg.dataset == "two_moons":
        source = dm.make_two_moons(cfg.n, cfg.noise, osm.child_seed(seed, _P_DATA))
        return dm.build_sequence(source, dm.rotate2d, cfg.total_shift, n_given)
    if cfg.dataset == "gaussians":
        source = dm.make_gaussians(cfg.n, cfg.noise, osm.child_seed(seed, _P_DATA))
        return dm.build_sequence(source, dm.rotate2d, cfg.total_shift, n_given)
    source = _mnist_source(cfg, seed)
    if cfg.dataset == "rotated_mnist":
        def rot(ds: dm.Dataset, angle: float) -> dm.Dataset:
            return dm.rotate_image(ds, angle, _MNIST_SIDE)
        return dm.build_sequence(source, rot, cfg.total_shift, n_given)
    return dm.build_sequence(source, dm.color_shift, cfg.total_shift, n_given)


def sequence_fingerprint(seq: dm.DomainSequence) -> str:
    """SHA-256 over every domain's bytes; equal data yields equal digests."""
    h = hashlib.sha256()
    for ds in seq.domains:
        h.update(np.ascontiguousarray(ds.X).tobytes())
        h.update(b"|" if ds.y is None else np.ascontiguousarray(ds.y).tobytes())
        h.update(b";")
    return h.hexdigest()


def _with_target_holdout(seq: dm.DomainSequence, seed: int
                         ) -> tuple[dm.DomainSequence, dm.Dataset]:
    """Split the target: methods see the kept part, scoring uses the rest."""
    kept, held = dm.holdout_split(seq.domains[-1], HOLDOUT_FRAC,
                                  osm.child_seed(seed, _P_HOLDOUT))
    trimmed = dm.DomainSequence(seq.domains[:-1] + (kept,), seq.shift_params)
    return trimmed, held


# ---------------------------------------------------------------------------
# grid execution


def _run_method(method: str, seq: dm.DomainSequence, arch: Sequence[int],
                cfg: osm.GdoConfig) -> nn.MlpModel:
    if method == "gdo":
        return osm.run_gdo(seq, arch, cfg)[0]
    if method == "gst":
        return baselines.gst(seq, arch, cfg)[0]
    if method == "target_st":
        return baselines.target_st(seq, arch, cfg)[0]
    if method == "source_only":
        return baselines.train_source(seq, arch, cfg)
    raise ValueError(f"unknown method '{method}'")


def run_cell(cfg: ExperimentConfig, n_given: int, inter_steps: int, seed: int
             ) -> tuple[list[ResultRow], list[CellFailure]]:
    """Run every configured method on one grid cell.

    The cell's domain sequence is built once and shared, so methods compete
    on identical data. A method failure is recorded with its coordinates and
    the remaining methods still run.
    """
    rows: list[ResultRow] = []
    failures: list[CellFailure] = []
    try:
        seq_full = build_cell_sequence(cfg, n_given, seed)
        fingerprint = sequence_fingerprint(seq_full)
        seq_run, held = _with_target_holdout(seq_full, seed)
    except Exception as e:  # a broken cell fails every method in it
        msg = f"{type(e).__name__}: {e}"
        return [], [CellFailure(m, n_given, inter_steps, seed, msg)
                    for m in cfg.methods]
    run_cfg = gdo_config(cfg, inter_steps, seed)
    for method in cfg.methods:
        start = time.perf_counter()
        try:
            model = _run_method(method, seq_run, cfg.arch, run_cfg)
        except Exception as e:
            failures.append(CellFailure(method, n_given, inter_steps, seed,
                                        f"{type(e).__name__}: {e}"))
            continue
        elapsed_ms = (time.perf_counter() - start) * 1e3
        domain_acc = tuple(
            osm.accuracy(model, ds) for ds in seq_full.domains if ds.y is not None)
        rows.append(ResultRow(
            dataset=cfg.dataset, method=method, n_given=n_given,
            inter_steps=inter_steps, seed=seed,
            target_acc=osm.accuracy(model, held), runtime_ms=elapsed_ms,
            domain_acc=domain_acc, fingerprint=fingerprint))
    return rows, failures


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def run_grid(cfg: ExperimentConfig, threads: int = 1,
             log: Callable[[str], None] | None = None) -> GridOutcome:
    """Execute the full grid and return rows in canonical order.

    Rows sort by (n_given, inter_steps, method, seed) regardless of
    completion order, so a --threads value never changes the output bytes.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    started = _utc_now()
    cells = [(ng, ist, s) for ng in cfg.n_given_grid
             for ist in cfg.inter_steps_grid for s in cfg.seeds]
    rows: list[ResultRow] = []
    failures: list[CellFailure] = []

    def _one(cell: tuple[int, int, int]):
        return run_cell(cfg, *cell)

    if threads == 1:
        outcomes = map(_one, cells)
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        outcomes = pool.map(_one, cells)
    for cell, (cell_rows, cell_failures) in zip(cells, outcomes):
        rows.extend(cell_rows)
        failures.extend(cell_failures)
        if log is not None:
            ng, ist, s = cell
            note = f"{len(cell_failures)} failed" if cell_failures else "ok"
            log(f"cell n_given={ng} inter_steps={ist} seed={s}: {note}")
    if threads != 1:
        pool.shutdown()
    rows.sort(key=lambda r: r.cell_key)
    failures.sort(key=lambda f: (f.n_given, f.inter_steps, f.method, f.seed))
    return GridOutcome(rows, failures, started, _utc_now())


# ---------------------------------------------------------------------------
# aggregation


def aggregate(rows: Sequence[ResultRow],
              expected_cells: Sequence[tuple[str, int, int]] | None = None
              ) -> tuple[list[CellSummary], list[str]]:
    """Per-cell mean and a normal-approximation 95% interval.

    halfwidth = 1.96 * sd / sqrt(n) with the sample standard deviation;
    a single seed gets halfwidth 0.0 and an explicit n=1 marker. When
    expected_cells is given, cells with no rows are skipped with a warning
    instead of a summary.
    """
    groups: dict[tuple[str, int, int], list[float]] = {}
    order: list[tuple[str, int, int]] = []
    for r in rows:
        key = (r.method, r.n_given, r.inter_steps)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(r.target_acc)
    warnings: list[str] = []
    if expected_cells is not None:
        for key in expected_cells:
            if key not in groups:
                method, ng, ist = key
                warnings.append(
                    f"cell method={method} n_given={ng} inter_steps={ist} "
                    f"has no results; omitted from the summary")
        order = [k for k in expected_cells if k in groups]
    else:
        order.sort(key=lambda k: (k[1], k[2], k[0]))
    summaries = []
    for key in order:
        accs = groups[key]
        n = len(accs)
        mean = float(np.mean(accs))
        sd = float(np.std(accs, ddof=1)) if n > 1 else 0.0
        hw = 1.96 * sd / np.sqrt(n) if n > 1 else 0.0
        label = f"{mean * 100:.1f} ± {hw * 100:.1f}"
        if n == 1:
            label += " (n=1)"
        method, ng, ist = key
        summaries.append(CellSummary(method, ng, ist, n, mean, sd, hw, label))
    return summaries, warnings


def expected_cells(cfg: ExperimentConfig) -> list[tuple[str, int, int]]:
    return [(m, ng, ist) for ng in cfg.n_given_grid
            for ist in cfg.inter_steps_grid for m in sorted(cfg.methods)]


def ablation_matrix(summaries: Sequence[CellSummary], method: str
                    ) -> tuple[list[int], list[int], list[list[str]]]:
    """Rows by n_given, columns by inter_steps, body cells as labels.

    Missing cells render as '-'. Shapes follow the summaries present, so the
    body holds exactly len(rows) * len(cols) cells.
    """
    mine = [s for s in summaries if s.method == method]
    row_vals = sorted({s.n_given for s in mine})
    col_vals = sorted({s.inter_steps for s in mine})
    by_key = {(s.n_given, s.inter_steps): s.label for s in mine}
    body = [[by_key.get((ng, ist), "-") for ist in col_vals] for ng in row_vals]
    return row_vals, col_vals, body


def format_ablation(row_vals: Sequence[int], col_vals: Sequence[int],
                    body: Sequence[Sequence[str]], method: str) -> str:
    header = [f"{method} acc by (n_given x inter_steps)"]
    head_cells = ["n_given \\ inter_steps"] + [str(c) for c in col_vals]
    table = [head_cells] + [[str(ng)] + list(r) for ng, r in zip(row_vals, body)]
    widths = [max(len(row[j]) for row in table) for j in range(len(head_cells))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    return "\n".join(header + lines)


# ---------------------------------------------------------------------------
# serialization


def _fmt(v: float) -> str:
    return format(v, ".10g")


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    """The results table; runtime_ms is a fixed 0 so bytes reproduce."""
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(f"{r.dataset},{r.method},{r.n_given},{r.inter_steps},"
                     f"{r.seed},{_fmt(r.target_acc)},0")
    return "\n".join(lines) + "\n"


def rows_from_csv(text: str) -> list[ResultRow]:
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(
            f"results file must start with header '{CSV_HEADER}'")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise ConfigError(f"results line {i} has {len(parts)} fields, expected 7")
        try:
            rows.append(ResultRow(
                dataset=parts[0], method=parts[1], n_given=int(parts[2]),
                inter_steps=int(parts[3]), seed=int(parts[4]),
                target_acc=float(parts[5]), runtime_ms=float(parts[6])))
        except ValueError as e:
            raise ConfigError(f"results line {i} is malformed: {e}") from e
    return rows


def summaries_to_csv(summaries: Sequence[CellSummary]) -> str:
    lines = [SUMMARY_HEADER]
    for s in summaries:
        lines.append(f"{s.method},{s.n_given},{s.inter_steps},{s.n},"
                     f"{_fmt(s.mean)},{_fmt(s.sd)},{_fmt(s.halfwidth)},{s.label}")
    return "\n".join(lines) + "\n"


def _versions() -> dict[str, str]:
    import platform
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__,
            "gdo": __version__}


def build_manifest(cfg: ExperimentConfig, outcome: GridOutcome,
                   warnings: Sequence[str]) -> dict[str, Any]:
    """Everything about the run that is not part of the reproducible CSV:
    the effective config, real timings, fingerprints, and failures."""
    return {
        "config": emit_config(cfg),
        "versions": _versions(),
        "ci_method": "mean ± 1.96 * sd / sqrt(n), sample sd",
        "holdout_frac": HOLDOUT_FRAC,
        "runtime_note": ("runtime_ms in results.csv is a fixed 0 placeholder; "
                         "real timings are the runtime_ms entries below"),
        "rows": [{
            "method": r.method, "n_given": r.n_given,
            "inter_steps": r.inter_steps, "seed": r.seed,
            "target_acc": r.target_acc, "runtime_ms": round(r.runtime_ms, 3),
            "domain_acc": list(r.domain_acc), "data_sha256": r.fingerprint,
        } for r in outcome.rows],
        "failures": [asdict(f) for f in outcome.failures],
        "warnings": list(warnings),
        "timing": {"started": outcome.started, "finished": outcome.finished},
    }


def write_results(cfg: ExperimentConfig, outcome: GridOutcome,
                  out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write results.csv, summary.csv, and manifest.json under out_dir."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries, warnings = aggregate(outcome.rows, expected_cells(cfg))
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "manifest": out / "manifest.json",
    }
    paths["results"].write_text(rows_to_csv(outcome.rows))
    paths["summary"].write_text(summaries_to_csv(summaries))
    manifest = build_manifest(cfg, outcome, warnings)
    paths["manifest"].write_text(json.dumps(manifest, indent=2) + "\n")
    return paths


# ---------------------------------------------------------------------------
# theory outputs


def bound_curve_rows(theory: dict[str, Any]) -> list[dict[str, float]]:
    """The error bound evaluated at every horizon up to t_max.

    T=0 is included only when the confidence constant is zero; with c > 0
    the bound is undefined there.
    """
    from .theory import error_bound
    t_start = 0 if theory["c"] == 0.0 else 1
    rows = []
    for t in range(t_start, int(theory["t_max"]) + 1):
        params = bound_params(theory, t)
        rows.append({
            "T": t, "err0": params.err0, "mu": params.mu,
            "gamma0": params.gamma0, "sigma2": params.sigma2,
            "epsilon": params.epsilon, "m": params.m, "delta": params.delta,
            "c": params.c, "bound": error_bound(params)})
    return rows


def bound_curve_csv(theory: dict[str, Any]) -> str:
    lines = [BOUND_HEADER]
    for row in bound_curve_rows(theory):
        lines.append(",".join(
            (str(row[k]) if k in ("T", "m") else repr(float(row[k])))
            for k in BOUND_HEADER.split(",")))
    return "\n".join(lines) + "\n"


TRACE_HEADER = "t,k,err,drift_sq,v"
_DIAG_WINDOW = 5


def stability_diagnostic(seed: int = 0):
    """Run the convex reference problem and trace its stability function.

    A linear head on rotating Gaussian blobs (joint updates, light
    pretraining) is the setting where V_t = err + ||theta_t - theta_{t-1}||^2
    is expected to contract; the returned report compares the first and last
    windows of the trace and fits a per-step ratio.
    """
    from .theory import LyapunovTrace, drift_report
    src = dm.make_gaussians(500, 0.3, seed)
    seq = dm.build_sequence(src, dm.rotate2d, 30.0, 6)
    cfg = osm.GdoConfig(seed=seed, update_mode="joint",
                        lr=nn.LrSchedule(0.3, 0.02), pretrain_epochs=2)
    _, record = osm.run_gdo(seq, (), cfg)
    trace = LyapunovTrace.from_run(record)
    report = drift_report(trace, _DIAG_WINDOW)
    lines = [TRACE_HEADER]
    for e in trace.entries:
        lines.append(f"{e.t},{e.k},{e.err!r},{e.theta_drift_sq!r},{e.v!r}")
    return "\n".join(lines) + "\n", report
