"""Command-line surface for the whole pipeline.

Subcommands: train, extract, pool, eval-verify, eval-identify, grad-check,
alpha-bound, synth, sweep.  Exit codes: 0 success, 1 validation/usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import FeatureDataset, FeatureRecord
from .exceptions import CrystalError
from .heads import alpha_lower_bound
from .metrics import (
    EvalReport,
    IdentProtocol,
    PairProtocol,
    closed_set_identify,
    open_set_identify,
    roc,
    score_pairs,
    tar_at_far,
    tpir_at_fpir,
)
from .network import MlpModel, TrainConfig, build_head, extract_features, grad_check_model, train
from .pooling import media_average_pool, quality_pool, template_lomax
from .vmf import make_synthetic_dataset
from . import io

DEFAULT_FARS = (1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_FPIRS = (1e-2, 1e-1)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crystal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_pooling_flags(p):
        p.add_argument("--pooling", choices=("media_average", "quality"),
                       default="quality")
        p.add_argument("--lambda", dest="pool_lambda", type=float, default=None,
                       help="quality pooling weight sharpness (default from config: 0.3)")

    p = sub.add_parser("train", help="train an embedding model + head on a feature CSV")
    p.add_argument("--features", required=False, help="training feature CSV")
    p.add_argument("--images", help="IDX image file (alternative to --features)")
    p.add_argument("--labels", help="IDX label file (with --images)")
    p.add_argument("--config", help="key = value run config")
    p.add_argument("--eval-features", help="held-out feature CSV for per-epoch accuracy")
    p.add_argument("--out-dir", required=False)

    p = sub.add_parser("extract", help="run samples through a checkpoint, emit feature CSV")
    p.add_argument("--model", required=True, help="model checkpoint path")
    p.add_argument("--features", help="input feature CSV (features are the model inputs)")
    p.add_argument("--images", help="IDX image file (alternative to --features)")
    p.add_argument("--labels", help="IDX label file (with --images)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pool", help="collapse each template to one pooled feature row")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    add_pooling_flags(p)

    p = sub.add_parser("eval-verify", help="1:1 verification: ROC and TAR@FAR")
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out-dir", required=True)
    add_pooling_flags(p)
    p.add_argument("--attenuation-gamma", type=float, default=None,
                   help="enable quality attenuation with this gamma")
    p.add_argument("--det-threshold", type=float, default=None)
    p.add_argument("--shift-scores", action="store_true",
                   help="map cosines to [0,1] before attenuation (strictly monotone)")
    p.add_argument("--scores-out", help="optional per-pair score CSV")
    p.add_argument("--far", default=",".join(f"{f:g}" for f in DEFAULT_FARS),
                   help="comma list of FAR targets")

    p = sub.add_parser("eval-identify", help="1:N identification: rank-k or TPIR@FPIR")
    p.add_argument("--features", required=True)
    p.add_argument("--gallery", required=True, help="gallery template id list")
    p.add_argument("--probes", required=True, help="probe template id list")
    p.add_argument("--open-set", action="store_true")
    p.add_argument("--out-dir", required=True)
    add_pooling_flags(p)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--head", choices=("crystal", "softmax"), default="crystal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("alpha-bound", help="scale lower bound for C classes at probability p")
    p.add_argument("num_classes", type=int)
    p.add_argument("p", type=float)

    p = sub.add_parser("synth", help="generate a synthetic hypersphere dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--kappa", type=float, default=20.0)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--items-per-template", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-out", help="also emit the exhaustive template pair protocol")
    p.add_argument("--gallery-out", help="also emit a gallery id list")
    p.add_argument("--probes-out", help="also emit a probe id list")
    p.add_argument("--open-set-subjects", type=int, default=0,
                   help="subjects excluded from the gallery (their probes are non-mated)")

    p = sub.add_parser("sweep", help="grid over lambda or gamma, reporting TAR@FAR")
    p.add_argument("--param", choices=("lambda", "gamma"), required=True)
    p.add_argument("--values", required=True, help="comma list of grid values")
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--far", default="1e-2", help="comma list of FAR targets")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="pool_lambda", type=float, default=0.3,
                   help="pooling lambda held fixed during a gamma sweep")
    p.add_argument("--det-threshold", type=float, default=0.75)
    return parser


def _load_run_config(path) -> io.RunConfig:
    if path is None:
        return io.RunConfig()
    return io.parse_config(path)


def _load_samples(args, expected_dim=None):
    """(X, y, subjects) from either a feature CSV or an IDX pair."""
    if args.features:
        dataset = io.load_feature_csv(args.features, expected_dim=expected_dim)
        X, y, names = dataset.to_arrays()
        return X, y, names, dataset
    if not (args.images and args.labels):
        raise CrystalError("provide --features or both --images and --labels")
    X, y = io.load_idx_images(args.images, args.labels)
    names = [str(c) for c in range(int(y.max()) + 1)]
    return X, y, names, None


def _cmd_train(args) -> int:
    config = _load_run_config(args.config)
    if args.features:
        config.features = args.features
    if args.eval_features:
        config.eval_features = args.eval_features
    if args.out_dir:
        config.out_dir = args.out_dir
    if not config.out_dir:
        raise CrystalError("no output directory (--out-dir or config out_dir)")
    args.features = config.features
    X, y, names, _ = _load_samples(args)
    eval_set = None
    if config.eval_features:
        eval_ds = io.load_feature_csv(config.eval_features, expected_dim=X.shape[1])
        unseen = {rec.subject_id for rec in eval_ds} - set(names)
        if unseen:
            raise CrystalError(
                f"eval set has subjects unseen in training: {sorted(unseen)[:3]}"
            )
        index = {s: i for i, s in enumerate(names)}
        eX = np.stack([rec.feature for rec in eval_ds.records])
        ey = np.array([index[rec.subject_id] for rec in eval_ds.records])
        eval_set = (eX, ey)

    train_config = TrainConfig(
        batch_size=config.batch_size,
        base_lr=config.base_lr,
        lr_drop_steps=config.lr_drop_steps,
        lr_drop_factor=config.lr_drop_factor,
        max_iters=config.max_iters,
        seed=config.seed,
        head_kind=config.head,
        alpha=config.alpha,
    )
    rng = np.random.default_rng(config.seed)
    sizes = [X.shape[1], *config.hidden, config.embedding_dim]
    model = MlpModel.initialize(sizes, rng)
    head = build_head(train_config, len(names), config.embedding_dim, rng)
    model, head, history = train(model, head, (X, y), train_config, eval_set=eval_set)

    os.makedirs(config.out_dir, exist_ok=True)
    io.save_model(os.path.join(config.out_dir, "model.txt"), model)
    io.save_head(os.path.join(config.out_dir, "head.txt"), head)
    io.write_history_csv(os.path.join(config.out_dir, "history.csv"), history)
    io.write_epochs_csv(os.path.join(config.out_dir, "epochs.csv"), history)
    print(f"final loss {history.losses[-1]:.6f}, "
          f"final accuracy {history.accuracies[-1]:.4f}")
    return 0


def _cmd_extract(args) -> int:
    model = io.load_model(args.model)
    X, _, _, dataset = _load_samples(args, expected_dim=model.input_dim)
    if X.shape[1] != model.input_dim:
        raise CrystalError(
            f"samples have dimension {X.shape[1]}, model expects {model.input_dim}"
        )
    feats = extract_features(model, X)
    records = []
    if dataset is not None:
        for rec, f in zip(dataset.records, feats):
            records.append(FeatureRecord(rec.subject_id, rec.template_id,
                                         rec.media_id, rec.detection_score, f))
    else:
        _, y = io.load_idx_images(args.images, args.labels)
        for i, f in enumerate(feats):
            records.append(FeatureRecord(str(int(y[i])), f"t{i}", f"m{i}", 0.5, f))
    io.write_feature_csv(args.out, FeatureDataset(records))
    return 0


def _cmd_pool(args) -> int:
    dataset = io.load_feature_csv(args.features)
    lam = 0.3 if args.pool_lambda is None else args.pool_lambda
    if lam < 0:
        raise CrystalError(f"lambda must be >= 0, got {lam}")
    records = []
    for tid, template in dataset.templates().items():
        if args.pooling == "quality":
            pooled = quality_pool(template, lam)
        else:
            pooled = media_average_pool(template)
        records.append(FeatureRecord(template.subject_id, tid, "POOLED",
                                     template_lomax(template), pooled))
    io.write_feature_csv(args.out, FeatureDataset(records))
    return 0


def _parse_float_list(raw: str) -> list[float]:
    return [float(v) for v in raw.split(",") if v.strip()]


def _cmd_eval_verify(args) -> int:
    dataset = io.load_feature_csv(args.features)
    protocol = io.load_pair_protocol(args.pairs)
    lam = 0.3 if args.pool_lambda is None else args.pool_lambda
    attenuation = None
    if args.attenuation_gamma is not None:
        gamma = args.attenuation_gamma
        threshold = 0.75 if args.det_threshold is None else args.det_threshold
        if gamma < 1:
            raise CrystalError(f"gamma must be >= 1, got {gamma}")
        attenuation = (gamma, threshold)
    scored = score_pairs(dataset.templates(), protocol, pooling=args.pooling,
                         lam=lam, attenuation=attenuation,
                         shift_scores=args.shift_scores)
    labeled = [(s.score, s.label) for s in scored if s.label is not None]
    curve = roc(labeled)
    fars = _parse_float_list(args.far)
    report = EvalReport(
        roc=curve,
        tar_table={f: tar_at_far(curve, f) for f in fars},
        scored_pairs=scored,
        extras={
            "num_match": float(sum(1 for _, l in labeled if l)),
            "num_nonmatch": float(sum(1 for _, l in labeled if not l)),
        },
    )
    os.makedirs(args.out_dir, exist_ok=True)
    io.write_roc_csv(os.path.join(args.out_dir, "roc.csv"), curve)
    io.write_summary(os.path.join(args.out_dir, "summary.txt"), report)
    if args.scores_out:
        io.write_scores_csv(args.scores_out, scored)
    for f in fars:
        print(f"tar@{io.far_label(f)}={report.tar_table[f]:.6f}")
    return 0


def _cmd_eval_identify(args) -> int:
    dataset = io.load_feature_csv(args.features)
    protocol = IdentProtocol(
        gallery=tuple(io.load_id_list(args.gallery)),
        probes=tuple(io.load_id_list(args.probes)),
        open_set=args.open_set,
    )
    lam = 0.3 if args.pool_lambda is None else args.pool_lambda
    templates = dataset.templates()
    os.makedirs(args.out_dir, exist_ok=True)
    report = EvalReport()
    if args.open_set:
        points = open_set_identify(templates, protocol, pooling=args.pooling, lam=lam)
        report.tpir_points = points
        report.tpir_table = {f: tpir_at_fpir(points, f) for f in DEFAULT_FPIRS}
        lines = ["fpir,tpir"] + [f"{fp:.9g},{tp:.9g}" for fp, tp in points]
        io._atomic_write(os.path.join(args.out_dir, "identify.csv"),
                         "\n".join(lines) + "\n")
        for f in DEFAULT_FPIRS:
            print(f"tpir@fpir{io.far_label(f)}={report.tpir_table[f]:.6f}")
    else:
        report.rank_rates = closed_set_identify(templates, protocol,
                                                pooling=args.pooling, lam=lam)
        lines = ["rank,rate"] + [f"{k},{v:.9g}" for k, v in sorted(report.rank_rates.items())]
        io._atomic_write(os.path.join(args.out_dir, "identify.csv"),
                         "\n".join(lines) + "\n")
        for k, v in sorted(report.rank_rates.items()):
            print(f"rank{k}={v:.6f}")
    io.write_summary(os.path.join(args.out_dir, "summary.txt"), report)
    return 0


def _cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    model = MlpModel.initialize([4, 8, 3], rng)
    config = TrainConfig(head_kind="crystal_trainable" if args.head == "crystal" else "softmax",
                         alpha=6.0 if args.head == "crystal" else None)
    head = build_head(config, 5, model.embedding_dim, rng)
    X = rng.standard_normal((6, 4))
    y = rng.integers(0, 5, size=6)
    report = grad_check_model(model, head, (X, y), eps=args.eps, tol=args.tol)
    for name, err in report.blocks.items():
        print(f"{name}: max rel error {err:.3e}")
    print(f"max {report.max_rel_error:.3e} ({'PASS' if report.passed else 'FAIL'} at tol {args.tol:g})")
    return 0 if report.passed else 2


def _cmd_alpha_bound(args) -> int:
    print(f"{alpha_lower_bound(args.num_classes, args.p):.4f}")
    return 0


def _cmd_synth(args) -> int:
    dataset = make_synthetic_dataset(
        args.classes, args.dim, args.kappa, args.per_class, args.seed,
        items_per_template=args.items_per_template,
    )
    io.write_feature_csv(args.out, dataset)
    templates = dataset.templates()
    by_subject: dict[str, list[str]] = {}
    for tid, template in templates.items():
        by_subject.setdefault(template.subject_id, []).append(tid)

    if args.pairs_out:
        ids = list(templates)
        pairs = []
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                match = templates[ids[i]].subject_id == templates[ids[j]].subject_id
                pairs.append((ids[i], ids[j], 1 if match else 0))
        io.write_pair_protocol(args.pairs_out, PairProtocol(tuple(pairs)))

    if args.gallery_out or args.probes_out:
        subjects = sorted(by_subject)
        held_out = set(subjects[len(subjects) - args.open_set_subjects:]) \
            if args.open_set_subjects else set()
        gallery, probes = [], []
        for subject in subjects:
            tids = by_subject[subject]
            if subject in held_out:
                probes.extend(tids)
            else:
                gallery.append(tids[0])
                probes.extend(tids[1:])
        if args.gallery_out:
            io.write_id_list(args.gallery_out, gallery)
        if args.probes_out:
            io.write_id_list(args.probes_out, probes)
    return 0


def _cmd_sweep(args) -> int:
    dataset = io.load_feature_csv(args.features)
    protocol = io.load_pair_protocol(args.pairs)
    templates = dataset.templates()
    values = _parse_float_list(args.values)
    fars = _parse_float_list(args.far)
    lines = [",".join([args.param] + [f"tar@{io.far_label(f)}" for f in fars])]
    for v in values:
        if args.param == "lambda":
            if v < 0:
                raise CrystalError(f"lambda must be >= 0, got {v}")
            scored = score_pairs(templates, protocol, pooling="quality", lam=v)
        else:
            if v < 1:
                raise CrystalError(f"gamma must be >= 1, got {v}")
            scored = score_pairs(templates, protocol, pooling="quality",
                                 lam=args.pool_lambda,
                                 attenuation=(v, args.det_threshold))
        curve = roc([(s.score, s.label) for s in scored if s.label is not None])
        tars = [tar_at_far(curve, f) for f in fars]
        lines.append(",".join([f"{v:g}"] + [f"{t:.9g}" for t in tars]))
        print(lines[-1])
    io._atomic_write(args.out, "\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "extract": _cmd_extract,
    "pool": _cmd_pool,
    "eval-verify": _cmd_eval_verify,
    "eval-identify": _cmd_eval_identify,
    "grad-check": _cmd_grad_check,
    "alpha-bound": _cmd_alpha_bound,
    "synth": _cmd_synth,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (CrystalError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
