"""Command-line front end: ``simalign <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error. A JSON ``--config`` file
may hold one section per subcommand; explicit flags override it.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import core
from .core import (SimilarityMatrix, atomic_write_bytes, atomic_write_text, load_manifest_embeddings, load_matrix,
                   read_pairs_csv, read_segments_csv, save_matrix, write_pairs_csv, write_segments_csv)
from .evalmetrics import eval_report, rank_predictions
from .frameprep import FrameImage, PrepParams, split_recursive
from .pairfilter import (LogisticModel, filter_predict, matrix_features, recall_candidates, retention_threshold,
                         train_filter, video_descriptor)
from .pipeline import pair_similarity, predict_many, training_pairs
from .postprocess import PostprocessParams, parse_params
from .samscore import SCORERS, ConvScorer, conv_train, normalize_scorer, score_pair
from .simgen import fit_to_canvas, pca_fit, pca_project
from .synthgen import CorpusParams, gen_composite_frames, gen_corpus, grid_layout

DEFAULT_PARAMS = "0.35:0.5,0.1:1.25,0.001:2"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _videos_by_role(manifest) -> tuple[dict, dict]:
    """(queries, refs): video id -> list of sequences, one per embedding model."""
    entries = core.read_manifest(manifest)
    seqs = load_manifest_embeddings(manifest)
    queries: dict[str, list] = {}
    refs: dict[str, list] = {}
    for e in entries:
        role = e.role or ("reference" if e.id.startswith("R") else "query")
        (refs if role.startswith("ref") else queries).setdefault(e.id, []).append(seqs[(e.id, e.model)])
    return queries, refs


def _with_pca(queries: dict, refs: dict, k: int | None) -> tuple[dict, dict]:
    """Add a PCA-projected copy of each model, fitted on the pooled non-padding frames."""
    if not k:
        return queries, refs
    by_model: dict[str, list[np.ndarray]] = {}
    for seqs in list(queries.values()) + list(refs.values()):
        for s in seqs:
            by_model.setdefault(s.model_id, []).append(s.frames[np.any(s.frames != 0, axis=1)])
    models = {m: pca_fit(np.concatenate(rows), k) for m, rows in sorted(by_model.items())}

    def extend(videos):
        return {vid: seqs + [pca_project(models[s.model_id], s) for s in seqs] for vid, seqs in videos.items()}

    return extend(queries), extend(refs)


def _pairs_for(args, queries: dict, refs: dict) -> list[tuple[str, str]]:
    if getattr(args, "pairs", None):
        pairs = read_pairs_csv(args.pairs)
    else:
        pairs = [(q, r) for q in sorted(queries) for r in sorted(refs)]
    for q, r in pairs:
        if q not in queries or r not in refs:
            raise DataError(f"pair ({q}, {r}) refers to a video missing from the manifest")
    return sorted(pairs)


def _sim_job(job):
    queries, refs, q, r = job
    return pair_similarity(queries, refs, q, r)


def _similarities(args, queries: dict, refs: dict, pairs) -> list[SimilarityMatrix]:
    if args.workers > 1 and len(pairs) > 1:
        jobs = [({q: queries[q]}, {r: refs[r]}, q, r) for q, r in pairs]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            return list(pool.map(_sim_job, jobs, chunksize=max(1, len(jobs) // (4 * args.workers))))
    return [pair_similarity(queries, refs, q, r) for q, r in pairs]


def _load_sims(args) -> list[SimilarityMatrix]:
    """Similarity matrices from ``--matrices DIR`` (simmatrix output) or from a manifest."""
    if getattr(args, "matrices", None):
        root = Path(args.matrices)
        pairs = read_pairs_csv(root / "pairs.csv")
        if getattr(args, "pairs", None):
            wanted = set(read_pairs_csv(args.pairs))
            pairs = [p for p in pairs if p in wanted]
        return [load_matrix(root / _matrix_name(q, r), "similarity", q, r) for q, r in sorted(pairs)]
    if not getattr(args, "manifest", None):
        raise UsageError("either --manifest or --matrices is required")
    queries, refs = _with_pca(*_videos_by_role(args.manifest), getattr(args, "pca", None))
    return _similarities(args, queries, refs, _pairs_for(args, queries, refs))


def _matrix_name(q: str, r: str) -> str:
    return f"{q}__{r}.samm"


def _labels(gt_path, pairs) -> list[int]:
    positive = {g.pair for g in read_segments_csv(gt_path)}
    return [int(p in positive) for p in pairs]


def _split(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _read_pgm(path: Path) -> FrameImage:
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode not in ("L", "I", "I;16", "I;16B"):
            raise DataError(f"{path}: not a grayscale PGM")
        px = np.asarray(im, dtype=np.float64)
    if px.max(initial=0) > 255:
        px = px * (255.0 / 65535.0)
    return FrameImage(px)


def _write_pgm(values: np.ndarray, path) -> None:
    buf = io.BytesIO()
    Image.fromarray(values.astype(np.uint8)).save(buf, format="PPM")
    atomic_write_bytes(path, buf.getvalue())


def to_gray8(values: np.ndarray) -> np.ndarray:
    """round(255 * clamp(v, 0, 1)) with halves rounded up."""
    return np.floor(255.0 * np.clip(values, 0.0, 1.0) + 0.5).astype(np.uint8)


def _emit(payload: dict, out) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        atomic_write_text(out, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "frames":
        tiles = [tuple(int(x) for x in item.split("x")) for item in args.grid.split(",")]
        layouts = {}
        for i, (rows, cols) in enumerate(tiles):
            vid = f"V{i:05d}"
            layout = grid_layout(args.width, args.height, rows, cols, args.border)
            frames, gt = gen_composite_frames(layout, args.border, args.frames, args.seed + i,
                                              size=(args.width, args.height))
            for t, f in enumerate(frames):
                (out / vid).mkdir(parents=True, exist_ok=True)
                _write_pgm(np.rint(f.pixels), out / vid / f"{t}.pgm")
            layouts[vid] = [g.as_list() for g in gt]
        atomic_write_text(out / "layout.json", json.dumps(layouts, indent=2, sort_keys=True) + "\n")
        print(f"wrote {len(layouts)} composite videos to {out}")
        return 0
    params = CorpusParams.from_dict(args.corpus or {})
    manifest = gen_corpus(args.n_refs, args.n_queries, args.positive_fraction, params, args.seed, out)
    print(f"wrote corpus manifest {manifest}")
    return 0


def cmd_preprocess(args) -> int:
    root = Path(args.frames)
    videos = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not videos:
        raise DataError(f"{root}: no <video_id>/ frame directories found")
    params = PrepParams(**(args.prep or {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vdir in videos:
        files = sorted(vdir.glob("*.pgm"), key=lambda p: (len(p.stem), p.stem))
        if len(files) < 2:
            raise DataError(f"{vdir}: need at least two .pgm frames")
        frames = [_read_pgm(f) for f in files]
        regions = split_recursive(frames, params)
        doc = {"video_id": vdir.name, "regions": [r.as_list() for r in regions]}
        atomic_write_text(out / f"{vdir.name}.json", json.dumps(doc) + "\n")
        print(f"{vdir.name}: {len(regions)} region(s)")
    return 0


def cmd_simmatrix(args) -> int:
    sims = _load_sims(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in sims:
        save_matrix(m, out / _matrix_name(*m.pair))
    write_pairs_csv([m.pair for m in sims], out / "pairs.csv")
    print(f"wrote {len(sims)} similarity matrices to {out}")
    return 0


def cmd_filter_train(args) -> int:
    sims = _load_sims(args)
    labels = _labels(args.gt, [m.pair for m in sims])
    feats = np.array([matrix_features(m) for m in sims])
    if args.samples_out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "ref_id", *[f"f{i}" for i in range(feats.shape[1])], "label"])
        for m, f, y in zip(sims, feats, labels):
            w.writerow([*m.pair, *(repr(float(v)) for v in f), y])
        atomic_write_text(args.samples_out, buf.getvalue())
    train_idx, val_idx = _split(len(sims), args.val_fraction, args.seed)
    y = np.array(labels)
    if y[val_idx].sum() == 0:
        # too few positives to hold any out; calibrate on the training split instead
        val_idx = train_idx
    model = train_filter([(feats[i], y[i]) for i in train_idx], args.epochs, args.lr, args.lam)
    probs = filter_predict(model, feats[val_idx])
    model.threshold = retention_threshold(np.atleast_1d(probs), y[val_idx], args.retain)
    model.save(args.out)
    neg = y[val_idx] == 0
    rejected = float(np.mean(np.atleast_1d(probs)[neg] < model.threshold)) if neg.any() else float("nan")
    print(json.dumps({"final_loss": model.final_loss, "threshold": model.threshold,
                      "validation_negatives_rejected": rejected}))
    return 0


def cmd_filter(args) -> int:
    model = LogisticModel.load(args.model)
    queries, refs = _videos_by_role(args.manifest)
    if args.pairs:
        pairs = _pairs_for(args, queries, refs)
    else:
        desc = {}
        for vid, seqs in {**queries, **refs}.items():
            desc[vid] = video_descriptor(sorted(seqs, key=lambda s: s.model_id)[0])
        pairs = sorted(recall_candidates(desc, sorted(queries), sorted(refs), args.recall_tau))
    sims = _similarities(args, queries, refs, pairs)
    feats = np.array([matrix_features(m) for m in sims]).reshape(len(sims), -1)
    probs = np.atleast_1d(filter_predict(model, feats)) if sims else np.zeros(0)
    kept = [m.pair for m, p in zip(sims, probs) if p >= model.threshold]
    write_pairs_csv(kept, args.out)
    print(f"recalled {len(pairs)} pair(s), kept {len(kept)}")
    return 0


def cmd_score_train(args) -> int:
    sims = _load_sims(args)
    data = training_pairs(sims, read_segments_csv(args.gt), args.sigma)
    init = ConvScorer.load(args.init) if args.init else ConvScorer.init(args.seed)
    result = conv_train(init, data, args.epochs, args.lr, args.batch, args.seed)
    result.model.save(args.out)
    print(json.dumps({"initial_loss": result.initial_loss, "history": result.history}))
    return 0


def cmd_match(args) -> int:
    scorer = normalize_scorer(args.scorer)
    model = None
    if scorer == "conv":
        if not args.model:
            raise UsageError("--scorer conv needs --model")
        model = ConvScorer.load(args.model)
    params = parse_params(args.params)
    base = PostprocessParams(params[0][0], params[0][1], seed=args.seed, **(args.postprocess or {}))
    sims = _load_sims(args)
    preds = predict_many(sims, scorer, params, model, base, workers=args.workers)
    write_segments_csv(preds, args.out, with_score=True)
    print(f"{len(preds)} prediction(s) over {len(sims)} pair(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    preds = read_segments_csv(args.pred)
    gts = read_segments_csv(args.gt)
    if not gts:
        raise DataError(f"{args.gt}: ground truth is empty")
    report = eval_report(preds, gts, args.iou)
    if args.figures:
        from .plotting import pr_curve_figure, score_histogram_figure

        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        ranked = rank_predictions(preds, gts, args.iou)
        pr_curve_figure(ranked, fig_dir / "pr_curve.png", label=f"uAP = {report['uAP']:.4f}")
        score_histogram_figure(ranked, fig_dir / "score_hist.png")
    _emit(report, args.out)
    return 0


def cmd_render(args) -> int:
    m = load_matrix(args.input, "similarity")
    _write_pgm(to_gray8(m.values), args.out)
    if args.png:
        from .plotting import matrix_figure

        panels = [("similarity", m.values)]
        if args.scorer:
            model = ConvScorer.load(args.model) if args.model else None
            panels.append((args.scorer, score_pair(fit_to_canvas(m), args.scorer, model).values))
        preds = []
        if args.pred:
            preds = [p for p in read_segments_csv(args.pred)
                     if not (args.query and p.query_id != args.query) and not (args.ref and p.ref_id != args.ref)]
        matrix_figure(panels, args.png, preds)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with one section per subcommand")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=_positive_int, default=1)

    parser = _Parser(prog="simalign", description="Copy-segment matching on frame-similarity matrices.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    def sim_inputs(p, need_gt=False):
        p.add_argument("--manifest", help="corpus.json embedding manifest")
        p.add_argument("--matrices", help="directory written by `simmatrix`")
        p.add_argument("--pairs", help="CSV of query_id,ref_id (default: all query x reference pairs)")
        p.add_argument("--pca", type=_positive_int, help="also ensemble a PCA-k projection of every model")
        if need_gt:
            p.add_argument("--gt", required=True, help="ground-truth segments CSV")

    p = add("synth", cmd_synth, "generate a synthetic corpus or composite frames")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("corpus", "frames"), default="corpus")
    p.add_argument("--n-refs", type=_positive_int, default=10)
    p.add_argument("--n-queries", type=_positive_int, default=55)
    p.add_argument("--positive-fraction", type=_fraction, default=50 / 55)
    p.add_argument("--grid", default="1x1,1x2,2x2", help="composite layouts as ROWSxCOLS list")
    p.add_argument("--width", type=_positive_int, default=192)
    p.add_argument("--height", type=_positive_int, default=144)
    p.add_argument("--border", type=int, default=4)
    p.add_argument("--frames", type=_positive_int, default=16)
    p.set_defaults(corpus=None)

    p = add("preprocess", cmd_preprocess, "split stacked frames into scene regions")
    p.add_argument("--frames", required=True, help="directory of <video_id>/<second>.pgm")
    p.add_argument("--out", required=True, help="output directory for <video_id>.json")
    p.set_defaults(prep=None)

    p = add("simmatrix", cmd_simmatrix, "compute pair similarity matrices")
    sim_inputs(p)
    p.add_argument("--out", required=True)

    p = add("filter-train", cmd_filter_train, "train the pair filter")
    sim_inputs(p, need_gt=True)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--retain", type=_fraction, default=0.99)
    p.add_argument("--val-fraction", type=_fraction, default=0.3)
    p.add_argument("--samples-out", help="also write the feature/label table as CSV")

    p = add("filter", cmd_filter, "recall pairs and keep those the filter accepts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", help="skip descriptor recall and score these pairs")
    p.add_argument("--recall-tau", type=float, default=-1.0)
    p.add_argument("--out", required=True, help="kept pairs CSV")

    p = add("score-train", cmd_score_train, "train the convolutional scorer")
    sim_inputs(p, need_gt=True)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--init", help="start from this model instead of a fresh one")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--sigma", type=float, default=1.5)

    p = add("match", cmd_match, "predict copied segments")
    sim_inputs(p)
    p.add_argument("--scorer", default="identity", choices=sorted(SCORERS) + ["identity-clamp", "line-enhance"])
    p.add_argument("--model", help="conv scorer JSON")
    p.add_argument("--params", default=DEFAULT_PARAMS, help="t:alpha[,t:alpha...]")
    p.add_argument("--out", required=True, help="predictions CSV")
    p.set_defaults(postprocess=None)

    p = add("eval", cmd_eval, "micro-averaged precision of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--figures", help="directory for PR-curve and score-histogram PNGs")

    p = add("render", cmd_render, "write a matrix as an 8-bit PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="also write a matplotlib figure")
    p.add_argument("--scorer", choices=sorted(SCORERS), help="add a score-matrix panel to the figure")
    p.add_argument("--model", help="conv scorer JSON for --scorer conv")
    p.add_argument("--pred", help="predictions CSV to overlay")
    p.add_argument("--query", help="restrict overlay to this query id")
    p.add_argument("--ref", help="restrict overlay to this reference id")
    return parser


def _config_section(argv: Sequence[str], command: str) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        doc = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {known.config}: {exc}") from exc
    section = dict(doc.get(command, {}))
    if "params" in section and isinstance(section["params"], list):
        section["params"] = ",".join(f"{e['t']}:{e['alpha']}" for e in section["params"])
    return {k.replace("-", "_"): v for k, v in section.items()}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        section = _config_section(argv, args.command)
        if section:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            known = {a.dest for a in sub._actions} | set(vars(args))
            unknown = sorted(set(section) - known)
            if unknown:
                raise DataError(f"config section '{args.command}' has unknown keys: {', '.join(unknown)}")
            # config supplies defaults; flags given on the command line still win
            sub.set_defaults(**section)
            args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\nrun 'simalign -h' for usage\n")
        return 1
    except (DataError, core.FormatError, core.ValidationError, core.CsvFormatError, ValueError, KeyError,
            OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())
