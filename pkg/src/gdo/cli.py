"""Command-line front end.

Subcommands: run (grid -> CSV + manifest), ablate (grid -> cell matrix),
theory (bound curves + stability diagnostic), report (figures + summary from
an existing results file), data fetch-mnist (download or verify IDX files).

Exit codes: 0 success, 1 runtime failure, 2 config error. Failures print a
single category line to stderr, e.g. "config-not-found: cfg.json".
"""
from __future__ import annotations

import argparse
import gzip
import hashlib
import json
import shutil
import sys
import urllib.error
import urllib.request
from dataclasses import asdict
from pathlib import Path

from . import domains as dm, harness as hz
from .errors import ConfigError, IdxFormatError

# Published digests of the compressed MNIST training pair. Downloads and
# pre-placed .gz files must match; uncompressed files are validated by
# parsing instead, and their digest is printed for the record.
MNIST_GZ_SHA256 = {
    "train-images-idx3-ubyte.gz":
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz":
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
}

MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        msg = str(e)
        if msg.startswith("config-not-found:"):
            print(msg, file=sys.stderr)
        else:
            print(f"config-error: {msg}", file=sys.stderr)
        return 2
    except Exception as e:  # anything else is a runtime failure
        print(f"runtime-failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gdo",
        description="Gradual domain adaptation experiments from a JSON config. "
                    f"The ${hz.DATA_DIR_ENV} environment variable overrides the "
                    "config's data_dir.")
    sub = p.add_subparsers(required=True)

    run = sub.add_parser("run", help="execute the full grid; write results "
                                     "CSV, summary CSV, and manifest")
    run.add_argument("config")
    run.add_argument("--threads", type=int, default=1,
                     help="cells run in at most this many threads (default 1)")
    run.add_argument("--out", default=None, help="override the config's output_dir")
    run.set_defaults(func=cmd_run)

    abl = sub.add_parser("ablate", help="run the grid and print the "
                                        "n_given x inter_steps matrix")
    abl.add_argument("config")
    abl.add_argument("--threads", type=int, default=1)
    abl.add_argument("--method", default="gdo",
                     help="which method's matrix to emit (default gdo)")
    abl.add_argument("--out", default=None)
    abl.set_defaults(func=cmd_ablate)

    theory = sub.add_parser("theory", help="write bound curve CSV, stability "
                                           "trace CSV, and drift report")
    theory.add_argument("config", nargs="?", default=None,
                        help="optional config; its 'theory' section sets the "
                             "bound parameters (defaults otherwise)")
    theory.add_argument("--out", default=None)
    theory.set_defaults(func=cmd_theory)

    rep = sub.add_parser("report", help="aggregate an existing results CSV "
                                        "and render figures next to it")
    rep.add_argument("results", help="path to a results.csv written by run")
    rep.add_argument("--out", default=None,
                     help="output directory (default: alongside the results file)")
    rep.set_defaults(func=cmd_report)

    data = sub.add_parser("data", help="dataset management")
    data_sub = data.add_subparsers(required=True)
    fetch = data_sub.add_parser(
        "fetch-mnist",
        help="download the MNIST training pair into --dir, or verify files "
             "already placed there")
    fetch.add_argument("--dir", required=True)
    fetch.set_defaults(func=cmd_fetch_mnist)

    return p


def cmd_run(args) -> int:
    cfg = hz.parse_config(args.config)
    outcome = hz.run_grid(cfg, threads=args.threads,
                          log=lambda s: print(s, file=sys.stderr))
    paths = hz.write_results(cfg, outcome, args.out)
    for name in ("results", "summary", "manifest"):
        print(f"wrote {paths[name]}")
    if outcome.failures:
        total = len(outcome.rows) + len(outcome.failures)
        print(f"runtime-failure: {len(outcome.failures)} of {total} runs "
              f"failed; coordinates are in {paths['manifest']}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = hz.parse_config(args.config)
    if args.method not in cfg.methods:
        raise ConfigError(f"--method '{args.method}' is not in the config's "
                          f"methods list {list(cfg.methods)}")
    outcome = hz.run_grid(cfg, threads=args.threads,
                          log=lambda s: print(s, file=sys.stderr))
    paths = hz.write_results(cfg, outcome, args.out)
    summaries, _ = hz.aggregate(outcome.rows, hz.expected_cells(cfg))
    row_vals, col_vals, body = hz.ablation_matrix(summaries, args.method)
    print(hz.format_ablation(row_vals, col_vals, body, args.method))
    out = Path(args.out if args.out is not None else cfg.output_dir)
    matrix_path = out / f"ablation_{args.method}.csv"
    lines = ["n_given," + ",".join(f"inter_steps_{c}" for c in col_vals)]
    for ng, row in zip(row_vals, body):
        lines.append(f"{ng}," + ",".join(f"\"{cell}\"" for cell in row))
    matrix_path.write_text("\n".join(lines) + "\n")
    print(f"wrote {matrix_path}")
    if outcome.failures:
        print(f"runtime-failure: {len(outcome.failures)} runs failed; see "
              f"{paths['manifest']}", file=sys.stderr)
        return 1
    return 0


def cmd_theory(args) -> int:
    if args.config is not None:
        cfg = hz.parse_config(args.config)
        theory, out_dir = cfg.theory, cfg.output_dir
    else:
        theory, out_dir = dict(hz._THEORY_DEFAULTS), "results"
    out = Path(args.out if args.out is not None else out_dir)
    out.mkdir(parents=True, exist_ok=True)

    curve_path = out / "bound_curve.csv"
    curve_path.write_text(hz.bound_curve_csv(theory))
    print(f"wrote {curve_path}")

    trace_csv, report = hz.stability_diagnostic()
    trace_path = out / "stability_trace.csv"
    trace_path.write_text(trace_csv)
    report_path = out / "drift_report.json"
    report_path.write_text(json.dumps(asdict(report), indent=2) + "\n")
    print(f"wrote {trace_path}")
    print(f"wrote {report_path}")
    print(f"drift: first window {report.first_window_mean:.4g}, "
          f"last window {report.last_window_mean:.4g}, "
          f"contraction ratio {report.contraction_ratio:.3f}")
    return 0


def cmd_report(args) -> int:
    results = Path(args.results)
    if not results.is_file():
        raise ConfigError(f"results file not found: {results}")
    rows = hz.rows_from_csv(results.read_text())
    if not rows:
        raise ConfigError(f"results file {results} holds no rows")
    out = Path(args.out if args.out is not None else results.parent)
    out.mkdir(parents=True, exist_ok=True)
    summaries, _ = hz.aggregate(rows)
    (out / "summary.csv").write_text(hz.summaries_to_csv(summaries))
    print(f"wrote {out / 'summary.csv'}")

    from . import plots
    written = [plots.render_summary(summaries, out / "summary.png")]
    methods_with_grid = {s.method for s in summaries}
    if "gdo" in methods_with_grid:
        written.append(plots.render_ablation(summaries, "gdo", out / "ablation.png"))
    for path in written:
        print(f"wrote {path}")
    for s in summaries:
        print(f"{s.method:>12}  n_given={s.n_given}  inter_steps={s.inter_steps}  "
              f"{s.label}")
    return 0


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_fetch_mnist(args) -> int:
    out = Path(args.dir)
    out.mkdir(parents=True, exist_ok=True)
    images, labels = hz.mnist_paths(out)

    if images.is_file() and labels.is_file():
        try:
            ds = dm.load_idx(images, labels)
        except IdxFormatError as e:
            print(f"data-corrupt: {e}", file=sys.stderr)
            return 1
        print(f"data-ok: {images} sha256={_sha256(images)}")
        print(f"data-ok: {labels} sha256={_sha256(labels)}")
        print(f"data-ok: {ds.n} items, {ds.d} features")
        return 0

    for gz_name, digest in MNIST_GZ_SHA256.items():
        gz_path = out / gz_name
        if not gz_path.is_file():
            try:
                _download(gz_name, gz_path)
            except (urllib.error.URLError, OSError) as e:
                print(f"download-failed: {gz_name}: {e}; place the file (or the "
                      f"uncompressed IDX pair) in {out}", file=sys.stderr)
                return 1
        actual = _sha256(gz_path)
        if actual != digest:
            print(f"data-corrupt: {gz_path} sha256={actual}, expected {digest}",
                  file=sys.stderr)
            return 1
        target = out / gz_name.removesuffix(".gz")
        with gzip.open(gz_path, "rb") as src, open(target, "wb") as dst:
            shutil.copyfileobj(src, dst)
        print(f"data-ok: {target} (verified {gz_name})")
    dm.load_idx(images, labels)
    return 0


def _download(name: str, dest: Path) -> None:
    last: Exception | None = None
    for mirror in MNIST_MIRRORS:
        url = mirror + name
        try:
            print(f"fetching {url}", file=sys.stderr)
            with urllib.request.urlopen(url, timeout=60) as resp, \
                    open(dest, "wb") as f:
                shutil.copyfileobj(resp, f)
            return
        except (urllib.error.URLError, OSError) as e:
            last = e
            dest.unlink(missing_ok=True)
    raise last if last is not None else OSError("no mirrors configured")


if __name__ == "__main__":
    sys.exit(main())
