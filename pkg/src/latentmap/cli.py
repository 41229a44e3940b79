"""Command-line interface: ``latentmap {build,query,uncertainty,eval,synth,pca}``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io as lio
from .compression import PcaTransform, pca_fit
from .evaluation import (
    ExperimentConfig,
    SceneSpec,
    build_map,
    coverage,
    evaluate_map,
    generate_scene,
    holdout_split,
    raw_report,
    sparsification_curve,
    sparsity_ablation,
    uncertainty_correlation,
)
from .inference import cosine_scores, decode_categories, uncertainty_batch
from .kernel import KernelConfig
from .latent_map import ObservationFrame
from .voxel_grid import GridConfig

logger = logging.getLogger("latentmap")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

FRAME_SUFFIX = ".lbkf"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def collect_frame_paths(inputs) -> list[Path]:
    """Expand directories to their frame files and sort everything by file name."""
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(q for q in p.iterdir() if q.is_file() and q.suffix == FRAME_SUFFIX)
        else:
            paths.append(p)
    return sorted(paths, key=lambda q: (q.name, str(q)))


def _load_pca(path):
    return PcaTransform.load(path) if path else None


def cmd_build(args) -> int:
    cfg = lio.load_config(args.config) if args.config else lio.MapConfig()
    pca = _load_pca(args.pca)
    if pca is not None and pca.reduced_dim != cfg.latent_dim:
        raise ValueError(f"PCA reduces to {pca.reduced_dim} dims but config latent_dim is {cfg.latent_dim}")
    m = cfg.new_map()
    paths = collect_frame_paths(args.frames)
    n_points = 0
    for path in paths:
        frame = lio.depth_filter(lio.load_frame(path), cfg.min_depth, cfg.max_depth)
        if len(frame) == 0:
            continue
        if pca is not None:
            if frame.feature_dim != pca.full_dim:
                raise ValueError(f"{path}: feature dim {frame.feature_dim} != PCA input dim {pca.full_dim}")
            frame = ObservationFrame(frame.positions, pca.encode(frame.features), frame.ranges, frame.labels)
        if frame.feature_dim != cfg.latent_dim:
            raise ValueError(f"{path}: feature dim {frame.feature_dim} != config latent_dim {cfg.latent_dim}")
        m.update(frame)
        n_points += len(frame)
        logger.debug("%s: %d points, map has %d voxels", path.name, len(frame), len(m))
    lio.save_map(args.output, m)
    logger.info("built map from %d frames (%d points): %d voxels", len(paths), n_points, len(m))
    return EXIT_OK


def _check_dims(m, dictionary, pca):
    dim = pca.full_dim if pca is not None else m.latent_dim
    if pca is not None and pca.reduced_dim != m.latent_dim:
        raise ValueError(f"PCA reduced dim {pca.reduced_dim} != map latent dim {m.latent_dim}")
    if dim != dictionary.dim:
        raise ValueError(f"dictionary dim {dictionary.dim} != map feature dim {dim}; pass --pca to lift")


def cmd_query(args) -> int:
    m = lio.load_map(args.map)
    dictionary = lio.load_dictionary(args.dict)
    pca = _load_pca(args.pca)
    _check_dims(m, dictionary, pca)
    mode = args.mode
    phrase = None
    if mode.startswith("heatmap:"):
        phrase = mode.split(":", 1)[1]
        target = dictionary.index(phrase)
    elif mode != "category":
        raise UsageError(f"unknown mode {mode!r}; use 'category' or 'heatmap:<phrase>'")

    order = np.argsort(m.keys, kind="stable")
    valid = order[m.lam[order] > 1]
    mu = m.mu[valid].astype(np.float64)
    if len(m) == 0:
        logger.warning("map is empty; writing an empty export")
    if phrase is None:
        cat, score = decode_categories(mu, dictionary, pca) if valid.size else (np.zeros(0, int), np.zeros(0))
        ok = cat >= 0
        colors = np.array([lio.category_color(c) for c in cat[ok]]).reshape(-1, 3)
        text = lio.ply_text(
            m.centroids[valid[ok]], colors, {"category": cat[ok].astype(float), "score": score[ok]}
        )
    else:
        scores = cosine_scores(mu, dictionary, pca)[:, target] if valid.size else np.zeros(0)
        ok = np.isfinite(scores)
        colors = np.array([lio.heat_color(s) for s in scores[ok]]).reshape(-1, 3)
        text = lio.ply_text(m.centroids[valid[ok]], colors, {"score": scores[ok]})
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("skipped %d undecodable voxels", skipped)
    lio.atomic_write_text(args.output, text)
    logger.info("exported %d voxels (%d below lam > 1 skipped)", int(ok.sum()), len(m) - valid.size)
    return EXIT_OK


UNDEFINED_TEXT = "undefined"


def cmd_uncertainty(args) -> int:
    m = lio.load_map(args.map)
    dictionary = lio.load_dictionary(args.dict) if args.dict else None
    pca = _load_pca(args.pca)
    if args.method == "sampling":
        if dictionary is None:
            raise UsageError("--method sampling needs --dict")
        _check_dims(m, dictionary, pca)
    order = np.argsort(m.keys, kind="stable")
    u = uncertainty_batch(
        args.method,
        m.mu[order].astype(np.float64),
        m.lam[order],
        m.psi_diag[order].astype(np.float64),
        dictionary,
        args.samples,
        pca,
        args.seed,
    )
    idx = m.indices[order]
    lam = m.lam[order]
    rows = [
        (int(i), int(j), int(k), float(l), float(v) if np.isfinite(v) else UNDEFINED_TEXT)
        for (i, j, k), l, v in zip(idx, lam, u)
    ]
    lio.write_csv(args.output, ["i", "j", "k", "lam", "uncertainty"], rows)
    logger.info("wrote %d rows (%d undefined)", len(rows), int((~np.isfinite(u)).sum()))
    return EXIT_OK


def read_uncertainty_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse an uncertainty CSV into (indices, lam, uncertainty) with undefined as +inf."""
    _, rows = lio.read_csv(path)
    idx = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 3)
    lam = np.array([float(r[3]) for r in rows])
    u = np.array([np.inf if r[4] == UNDEFINED_TEXT else float(r[4]) for r in rows])
    return idx, lam, u


def cmd_synth(args) -> int:
    spec = lio.load_config(args.config, SceneSpec) if args.config else SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    scene, frames = generate_scene(spec)
    out = Path(args.output)
    frame_dir = out / "frames"
    if args.holdout is not None:
        frames, test = holdout_split(frames, args.holdout, spec.seed)
        lio.save_frame(out / "test.lbkf", test)
    for t, frame in enumerate(frames):
        lio.save_frame(frame_dir / f"frame_{t:05d}{FRAME_SUFFIX}", frame)
    lio.save_dictionary(out / "dictionary.lbkd", scene.dictionary())
    logger.info("wrote %d frames to %s", len(frames), frame_dir)
    return EXIT_OK


def _report_rows(label, rep):
    rows = [(label, "accuracy", rep.accuracy), (label, "miou", rep.miou)]
    rows += [(label, f"iou_{c}", float(v)) for c, v in enumerate(rep.iou) if np.isfinite(v)]
    return rows


def _write_curve(path, curve):
    lio.write_csv(
        path,
        ["fraction_removed", "accuracy", "miou", "n_points"],
        [(c.fraction_removed, c.accuracy, c.miou, c.n_points) for c in curve],
    )


def cmd_eval(args) -> int:
    out = Path(args.output)
    methods = [s.strip() for s in args.methods.split(",") if s.strip()]
    if args.map:
        if not (args.test and args.dict):
            raise UsageError("--map needs --test and --dict")
        m = lio.load_map(args.map)
        test = lio.load_frame(args.test)
        dictionary = lio.load_dictionary(args.dict)
        pca = _load_pca(args.pca)
        _check_dims(m, dictionary, pca)
        rep = evaluate_map(m, test, dictionary, pca)
        lio.write_csv(out / "metrics.csv", ["source", "metric", "value"], _report_rows("map", rep))
        for method in methods:
            curve = sparsification_curve(m, test, dictionary, method, args.bins, pca, args.samples, args.seed or 0)
            _write_curve(out / f"sparsification_{method}.csv", curve)
        logger.info("accuracy %.4f  mIoU %.4f", rep.accuracy, rep.miou)
        return EXIT_OK

    cfg = lio.load_config(args.config, ExperimentConfig) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    scene, frames = generate_scene(cfg.scene_spec())
    dictionary = scene.dictionary()
    train, test = holdout_split(frames, cfg.train_fraction, cfg.seed)
    m = build_map(train, GridConfig(cfg.resolution, cfg.filter_size), KernelConfig(cfg.kernel_length), cfg.lam0, cfg.psi0)
    rep = evaluate_map(m, test, dictionary)
    raw = raw_report(test, dictionary)
    rows = _report_rows("map", rep) + _report_rows("raw", raw)
    rows.append(("map", "coverage", coverage(m, test.positions)))
    lio.write_csv(out / "metrics.csv", ["source", "metric", "value"], rows)

    table = sparsity_ablation(
        train, test, dictionary, cfg.densities, cfg.filter_sizes, cfg.resolution, cfg.kernel_length, cfg.lam0, cfg.psi0, cfg.seed
    )
    lio.write_csv(
        out / "ablation.csv",
        ["density", "filter_size", "accuracy", "miou", "coverage"],
        [(r.density, r.filter_size, r.report.accuracy, r.report.miou, r.coverage) for r in table],
    )
    for method in methods:
        curve = sparsification_curve(m, test, dictionary, method, cfg.bins, None, cfg.n_samples, cfg.seed)
        _write_curve(out / f"sparsification_{method}.csv", curve)
    if "e" in methods and "sampling" in methods:
        try:
            rho = uncertainty_correlation(m, ("e", "sampling"), dictionary, None, cfg.n_samples, cfg.seed)
            lio.write_csv(out / "correlation.csv", ["method_a", "method_b", "spearman"], [("e", "sampling", rho)])
        except ValueError as exc:
            logger.warning("correlation skipped: %s", exc)
    logger.info("map accuracy %.4f (raw %.4f), mIoU %.4f", rep.accuracy, raw.accuracy, rep.miou)
    return EXIT_OK


def _corpus(paths) -> np.ndarray:
    feats = [lio.load_frame(p).features for p in collect_frame_paths(paths)]
    feats = [f for f in feats if f.size]
    if not feats:
        raise ValueError("no features found in the given frames")
    return np.concatenate(feats)


def cmd_pca(args) -> int:
    if args.action == "fit":
        if args.dims is None:
            raise UsageError("pca fit needs --dims")
        corpus = _corpus(args.inputs)
        t = pca_fit(corpus, args.dims)
        t.save(args.output)
        mse = PcaTransform.load(args.output).reconstruction_mse(corpus)
        print(f"fit {t.full_dim} -> {t.reduced_dim} on {corpus.shape[0]} samples; reconstruction MSE {mse:.6g}")
        return EXIT_OK
    if not args.pca:
        raise UsageError("pca apply needs --pca")
    t = PcaTransform.load(args.pca)
    out = Path(args.output)
    sq_err, count = 0.0, 0
    for path in collect_frame_paths(args.inputs):
        frame = lio.load_frame(path)
        if frame.feature_dim != t.full_dim:
            raise ValueError(f"{path}: feature dim {frame.feature_dim} != PCA input dim {t.full_dim}")
        z = t.encode(frame.features)
        sq_err += float(((t.decode(z) - frame.features) ** 2).sum())
        count += frame.features.size
        lio.save_frame(out / path.name, ObservationFrame(frame.positions, z, frame.ranges, frame.labels))
    mse = sq_err / count if count else 0.0
    print(f"encoded to {t.reduced_dim} dims; reconstruction MSE {mse:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="cap numeric library threads")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = _Parser(prog="latentmap", description=__doc__.splitlines()[0], parents=[common])
    parser.set_defaults(config=None, seed=None, threads=None, verbose=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", parents=[common], help="fuse frame files into a map")
    p.add_argument("frames", nargs="*", help="frame files or directories of *.lbkf")
    p.add_argument("--pca", help="PCA transform applied to features before fusing")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", parents=[common], help="decode a map against a dictionary")
    p.add_argument("map")
    p.add_argument("dict")
    p.add_argument("--pca")
    p.add_argument("--mode", default="category", help="'category' or 'heatmap:<phrase>'")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("uncertainty", parents=[common], help="per-voxel uncertainty CSV")
    p.add_argument("map")
    p.add_argument("--method", choices=["sampling", "e", "d"], default="e")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--dict", help="dictionary (needed for --method sampling)")
    p.add_argument("--pca")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("eval", parents=[common], help="run the evaluation protocol")
    p.add_argument("--map", help="evaluate an existing map instead of a synthetic run")
    p.add_argument("--test", help="labeled test frame file (with --map)")
    p.add_argument("--dict")
    p.add_argument("--pca")
    p.add_argument("--methods", default="e,d,sampling")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled scene")
    p.add_argument("--holdout", type=float, help="also split off a test set, keeping this fraction for training")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pca", parents=[common], help="fit or apply a PCA transform")
    p.add_argument("action", choices=["fit", "apply"])
    p.add_argument("inputs", nargs="+", help="frame files or directories")
    p.add_argument("--dims", type=int)
    p.add_argument("--pca", help="transform to apply")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pca)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"latentmap: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, UnicodeDecodeError) as exc:
        print(f"latentmap: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
