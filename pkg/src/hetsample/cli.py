"""Command-line front end: patches -> features -> selection -> diagnostics.

Every artifact carries a metadata block with the tool version and the full
run configuration (CSV files as a leading ``#`` line, JSON under
``"metadata"``, PNG files as a text chunk). ``--threads`` is deliberately not
part of that block: it never changes results.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import TOOL_VERSION
from .diagnostics import DEFAULT_BINS, coverage_report, histogram_pair, pca_project, pca_svg
from .errors import ConfigurationError, HetSampleError, InputError, MetricError
from .feature_space import GridConfig, apply_zscore, discretize, fit_zscore, load_feature_csv
from .image_metrics import METRIC_FIELDS, MetricVector, detrend_metrics, extract_metrics
from .imageio import IMAGE_SUFFIXES, load_gray, load_mask, save_png
from .patches import DEFAULT_MIN_SKELETON_LENGTH, DEFAULT_WINDOW, filter_windows, plan_windows
from .sampling import DEFAULT_K, DEFAULT_RADIUS, DEFAULT_TRIALS, SelectionParams, sample_subset

logger = logging.getLogger("hetsample")

DEFAULT_FEATURES = ("contrast", "noise_sigma", "vessel_density", "detrended_heterogeneity")
MANIFEST_FIELDS = ("patch_id", "source_id", "kind", "x", "y", "size")


@dataclass
class RunConfig:
    cell_size: float = 0.1
    radius: float = DEFAULT_RADIUS
    k: int = DEFAULT_K
    n_trials: int = DEFAULT_TRIALS
    seed: int = 0
    group_exclusion: bool = True
    group_column: str = "group"
    features: Optional[list[str]] = None
    bins: int = DEFAULT_BINS
    window_size: int = DEFAULT_WINDOW
    min_skeleton_length: float = DEFAULT_MIN_SKELETON_LENGTH
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        positive = ("cell_size", "radius", "k", "n_trials", "bins", "window_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.min_skeleton_length < 0:
            raise ConfigurationError("min_skeleton_length must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")

    def metadata(self, **extra) -> dict:
        meta = {"tool": TOOL_VERSION, "config": dataclasses.asdict(self)}
        meta.update(extra)
        return meta


# --------------------------------------------------------------------------
# file helpers


def _write_csv(path: Path, header, rows, metadata: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(metadata, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(line for line in fh if not line.startswith("#")))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _map(fn, items, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _image_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    }


# --------------------------------------------------------------------------
# commands


def cmd_extract_patches(images_dir, masks_dir, out_dir, config: RunConfig, threads: int = 1) -> dict:
    """Cut seven windows per source image, drop windows with little vessel content.

    Writes ``manifest.csv`` plus ``images/`` and ``masks/`` patch directories
    under ``out_dir`` and returns a summary.
    """
    images_dir, masks_dir, out_dir = Path(images_dir), Path(masks_dir), Path(out_dir)
    images, masks = _image_files(images_dir), _image_files(masks_dir)
    if not images:
        raise InputError(f"no images found in {images_dir}")
    skipped = [{"source": s, "reason": "no matching mask"} for s in sorted(set(images) - set(masks))]
    skipped += [{"source": s, "reason": "no matching image"} for s in sorted(set(masks) - set(images))]
    sources = sorted(set(images) & set(masks))

    def process(source: str):
        image, mask = load_gray(images[source]), load_mask(masks[source])
        if image.shape != mask.shape:
            return source, None, f"image {image.shape} and mask {mask.shape} differ in size"
        h, w = image.shape
        try:
            plan = plan_windows(source, w, h, config.window_size, config.seed)
        except InputError as exc:
            return source, None, str(exc)
        kept = filter_windows(plan, {source: mask}, config.min_skeleton_length)
        return source, (image, mask, plan, kept), None

    results = _map(process, sources, threads)
    meta = config.metadata()
    planned = retained = 0
    rows = []
    for source, payload, reason in results:
        if payload is None:
            skipped.append({"source": source, "reason": reason})
            continue
        image, mask, plan, kept = payload
        planned += len(plan)
        retained += len(kept)
        for spec in sorted(kept, key=lambda s: s.sort_key()):
            for sub, pixels in (("images", image), ("masks", mask)):
                (out_dir / sub).mkdir(parents=True, exist_ok=True)
                save_png(out_dir / sub / f"{spec.patch_id}.png", spec.crop(pixels), meta)
            rows.append([spec.patch_id, spec.source_id, spec.kind, spec.x, spec.y, spec.size])
    skipped.sort(key=lambda s: s["source"])
    for s in skipped:
        logger.warning("skipped %s: %s", s["source"], s["reason"])
    summary = {
        "sources": len(sources),
        "planned": planned,
        "retained": retained,
        "skipped": skipped,
        "warnings": len(skipped),
    }
    _write_csv(out_dir / "manifest.csv", MANIFEST_FIELDS, rows, config.metadata(summary=summary))
    return summary


def _metric_row(patch_id: str, group: str, v: MetricVector) -> list[str]:
    error = "; ".join(f"{k}: {msg}" for k, msg in sorted(v.errors.items()))
    return [patch_id, group] + [_fmt(getattr(v, name)) for name in METRIC_FIELDS] + [error]


def compute_patch_metrics(image_path, mask_path) -> MetricVector:
    return extract_metrics(load_gray(image_path).astype(float), load_mask(mask_path))


def cmd_extract_features(
    manifest, out_csv, config: RunConfig, images_dir=None, masks_dir=None, threads: int = 1
) -> dict:
    """One metric row per manifest patch, followed by the dataset-level detrend pass."""
    manifest = Path(manifest)
    images_dir = Path(images_dir) if images_dir else manifest.parent / "images"
    masks_dir = Path(masks_dir) if masks_dir else manifest.parent / "masks"
    entries = _read_csv(manifest)
    if not entries:
        raise InputError(f"{manifest}: manifest has no patches")
    missing = set(MANIFEST_FIELDS) - set(entries[0])
    if missing:
        raise InputError(f"{manifest}: missing column(s) {', '.join(sorted(missing))}")

    def process(entry: dict) -> MetricVector:
        name = entry["patch_id"] + ".png"
        return compute_patch_metrics(images_dir / name, masks_dir / name)

    vectors = _map(process, entries, threads)
    try:
        model = detrend_metrics(vectors)
        detrend_info = {"slope": model.slope, "intercept": model.intercept}
    except MetricError as exc:
        detrend_info = {"error": str(exc)}
    for v in vectors:
        if v.detrended_heterogeneity is None and "heterogeneity" not in v.errors:
            v.errors["detrended_heterogeneity"] = detrend_info.get("error", "not fitted")
    rows = [_metric_row(e["patch_id"], e["source_id"], v) for e, v in zip(entries, vectors)]
    failed = sum(1 for v in vectors if v.errors)
    _write_csv(
        Path(out_csv),
        ["id", "group", *METRIC_FIELDS, "error"],
        rows,
        config.metadata(detrend=detrend_info),
    )
    return {"patches": len(rows), "failed": failed, "detrend": detrend_info}


def cmd_sample(features_csv, out_json, config: RunConfig, trial_log=None, threads: int = 1) -> dict:
    """Normalize, discretize, dilate and select; write the selection JSON (and trial log)."""
    matrix = load_feature_csv(
        features_csv,
        group_column=config.group_column,
        feature_columns=config.features,
    )
    exclusion = config.group_exclusion and matrix.groups is not None
    params = SelectionParams(
        k=config.k, n_trials=config.n_trials, seed=config.seed, enforce_group_exclusion=exclusion
    )
    run = sample_subset(matrix, params, cell_size=config.cell_size, radius=config.radius, threads=threads)
    result = run.result
    record = result.as_record(config.radius, run.normalization.dropped_names)
    record["feature_names"] = list(matrix.feature_names)
    record["group_exclusion_applied"] = exclusion
    record["normalization"] = run.normalization.to_dict()
    record["sampling_set_size"] = len(run.sset)
    record["structuring_element_size"] = len(run.element)
    record["metadata"] = config.metadata()
    _write_json(Path(out_json), record)
    if trial_log:
        _write_csv(
            Path(trial_log),
            ["trial_index", "fus"],
            [[t, _fmt(f)] for t, f in enumerate(result.trial_fus)],
            config.metadata(),
        )
    return record


def cmd_diagnose(features_csv, selection_json, out_dir, config: RunConfig) -> dict:
    """Histograms, PCA scatter and coverage report for a stored selection."""
    out_dir = Path(out_dir)
    selection = _read_json(Path(selection_json))
    try:
        names = selection["feature_names"]
        selected_ids = selection["selected_ids"]
        cell_size, radius = selection["cell_size"], selection["radius"]
    except KeyError as exc:
        raise InputError(f"{selection_json}: missing field {exc}") from exc
    matrix = load_feature_csv(features_csv, group_column=config.group_column, feature_columns=names)
    index = {sid: i for i, sid in enumerate(matrix.ids)}
    unknown = [s for s in selected_ids if s not in index]
    if unknown:
        raise InputError(f"unknown selected id(s): {', '.join(unknown[:5])}")
    chosen = [index[s] for s in selected_ids]
    meta = config.metadata(selection=str(selection_json))

    hist_files = []
    for j, name in enumerate(matrix.feature_names):
        pair = histogram_pair(matrix.values[:, j], matrix.values[chosen, j], config.bins, name)
        rows = [
            [_fmt(pair.bin_edges[b]), _fmt(pair.bin_edges[b + 1]), _fmt(pair.full_freq[b]), _fmt(pair.subset_freq[b])]
            for b in range(len(pair.full_freq))
        ]
        path = out_dir / f"histogram_{name}.csv"
        _write_csv(path, ["bin_left", "bin_right", "full_freq", "subset_freq"], rows, meta)
        hist_files.append(path.name)

    model = fit_zscore(matrix)
    normalized = apply_zscore(matrix, model)
    projection = pca_project(normalized, selected_ids)
    rows = [
        [sid, _fmt(x), _fmt(y), int(flag)]
        for sid, (x, y), flag in zip(projection.ids, projection.coords, projection.selected_flags)
    ]
    _write_csv(out_dir / "pca.csv", ["id", "pc1", "pc2", "selected"], rows, meta)
    (out_dir / "pca.svg").write_text(pca_svg(projection), encoding="utf-8")

    grid_points = discretize(normalized, GridConfig(cell_size))
    report = coverage_report(chosen, grid_points, radius)
    report["pca_explained_variance"] = [float(v) for v in projection.explained_variance]
    report["metadata"] = meta
    _write_json(out_dir / "coverage.json", report)
    return {"histograms": hist_files, "coverage": report}


def cmd_run_all(images_dir, masks_dir, out_dir, config: RunConfig, threads: int = 1) -> dict:
    out_dir = Path(out_dir)
    if config.features is None:
        config = dataclasses.replace(config, features=list(DEFAULT_FEATURES))
    patches = cmd_extract_patches(images_dir, masks_dir, out_dir / "patches", config, threads)
    features = cmd_extract_features(out_dir / "patches" / "manifest.csv", out_dir / "features.csv", config, threads=threads)
    cmd_sample(out_dir / "features.csv", out_dir / "selection.json", config, out_dir / "trials.csv", threads)
    diag = cmd_diagnose(out_dir / "features.csv", out_dir / "selection.json", out_dir / "diagnostics", config)
    return {"patches": patches, "features": features, "fus": diag["coverage"]["fus"]}


# --------------------------------------------------------------------------
# argument handling

_OPTION_KEYS = {
    "cell_size": "cell_size",
    "radius": "radius",
    "k": "k",
    "trials": "n_trials",
    "n_trials": "n_trials",
    "seed": "seed",
    "group_column": "group_column",
    "group_exclusion": "group_exclusion",
    "features": "features",
    "bins": "bins",
    "window_size": "window_size",
    "min_skeleton_length": "min_skeleton_length",
}


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for key, value in raw.items():
        name = _OPTION_KEYS.get(key.replace("-", "_"))
        if name is None and key.replace("-", "_") != "threads":
            raise InputError(f"{path}: unknown config key {key!r}")
        out[name or "threads"] = value
    return out


def _common_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", help="TOML file with option values; flags take precedence")
    g.add_argument("--cell-size", type=float, help="grid cell size in z-score units (default 0.1)")
    g.add_argument("--radius", type=float, help="structuring element radius in grid units (default 4)")
    g.add_argument("--k", type=int, help="subset size (default 100)")
    g.add_argument("--trials", dest="n_trials", type=int, help="number of sampled subsets N (default 1000)")
    g.add_argument("--seed", type=int, help="master random seed (default 0)")
    g.add_argument("--group-column", help="name of the group column (default 'group')")
    g.add_argument(
        "--no-group-exclusion", dest="group_exclusion", action="store_const", const=False,
        help="allow several selected samples from the same group",
    )
    g.add_argument("--features", type=lambda s: [f for f in s.split(",") if f], help="comma-separated feature columns")
    g.add_argument("--bins", type=int, help="histogram bins (default 20)")
    g.add_argument("--window-size", type=int, help="patch size in pixels (default 256)")
    g.add_argument("--min-skeleton-length", type=float, help="minimum medial-line length per patch (default 32)")
    g.add_argument("--threads", type=int, help="worker threads; results do not depend on it (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetsample", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=TOOL_VERSION)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-patches", help="cut seven windows out of every source image")
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--masks", required=True, help="directory of masks, paired by file stem")
    p.add_argument("--out", required=True, help="output directory")
    _common_options(p)

    p = sub.add_parser("extract-features", help="compute per-patch metrics")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="feature CSV to write")
    p.add_argument("--images-dir", help="patch images (default: <manifest dir>/images)")
    p.add_argument("--masks-dir", help="patch masks (default: <manifest dir>/masks)")
    _common_options(p)

    p = sub.add_parser("sample", help="select a heterogeneous subset from a feature CSV")
    p.add_argument("--input", required=True, help="feature CSV")
    p.add_argument("--out", required=True, help="selection JSON to write")
    p.add_argument("--trial-log", help="optional CSV of per-trial FUS values")
    _common_options(p)

    p = sub.add_parser("diagnose", help="histograms, PCA and coverage for a selection")
    p.add_argument("--input", required=True, help="feature CSV")
    p.add_argument("--selection", required=True, help="selection JSON")
    p.add_argument("--out", required=True, help="output directory")
    _common_options(p)

    p = sub.add_parser("run-all", help="patches, features, sampling and diagnostics in one go")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    _common_options(p)
    return parser


_PATH_ARGS = ("images", "masks", "out", "manifest", "images_dir", "masks_dir", "input", "trial_log", "selection")


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, int]:
    values = load_config_file(args.config) if args.config else {}
    threads = values.pop("threads", 1)
    for name in set(_OPTION_KEYS.values()):
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if args.threads is not None:
        threads = args.threads
    values["paths"] = {k: str(getattr(args, k)) for k in _PATH_ARGS if getattr(args, k, None) is not None}
    try:
        config = RunConfig(**values)
    except TypeError as exc:
        raise InputError(f"bad configuration: {exc}") from exc
    config.validate()
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    return config, threads


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        config, threads = resolve_config(args)
        if args.command == "extract-patches":
            s = cmd_extract_patches(args.images, args.masks, args.out, config, threads)
            print(
                f"sources {s['sources']}: planned {s['planned']} patches, retained {s['retained']}, "
                f"{s['warnings']} warning(s)"
            )
        elif args.command == "extract-features":
            s = cmd_extract_features(args.manifest, args.out, config, args.images_dir, args.masks_dir, threads)
            print(f"{s['patches']} patches, {s['failed']} with metric errors")
        elif args.command == "sample":
            r = cmd_sample(args.input, args.out, config, args.trial_log, threads)
            print(f"selected {len(r['selected_ids'])} samples, FUS {r['fus']:.4g} (trial {r['winning_trial']})")
        elif args.command == "diagnose":
            r = cmd_diagnose(args.input, args.selection, args.out, config)
            print(f"wrote {len(r['histograms'])} histograms, PCA and coverage (FUS {r['coverage']['fus']:.4g})")
        elif args.command == "run-all":
            r = cmd_run_all(args.images, args.masks, args.out, config, threads)
            print(
                f"{r['patches']['retained']} patches, {r['features']['patches']} feature rows, "
                f"FUS {r['fus']:.4g}"
            )
    except HetSampleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
