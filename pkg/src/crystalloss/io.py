"""File formats: feature CSV, pair/identification protocols, IDX images,
key=value run configs, model/head checkpoints and evaluation reports.

All writers go through an atomic temp-file + rename, and floats are
emitted with 9 significant digits (lossless for single-precision feature
data).  Formats are documented in docs/formats.md.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .data import FeatureDataset, FeatureRecord
from .exceptions import (
    BadMagic,
    CountMismatch,
    InconsistentDimension,
    InvalidConfig,
    MalformedRow,
    MissingColumn,
    TruncatedFile,
)
from .heads import CrystalHead, SoftmaxHead
from .metrics import EvalReport, PairProtocol, RocCurve
from .network import HEAD_KINDS, MlpModel, Layer, TrainHistory

__all__ = [
    "SCORE_CLAMP",
    "clamp_detection_score",
    "load_feature_csv",
    "write_feature_csv",
    "load_pair_protocol",
    "write_pair_protocol",
    "load_id_list",
    "write_id_list",
    "load_idx_images",
    "RunConfig",
    "parse_config",
    "save_head",
    "load_head",
    "save_model",
    "load_model",
    "write_history_csv",
    "write_roc_csv",
    "write_scores_csv",
    "write_summary",
    "far_label",
]

SCORE_CLAMP = 1e-7
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

FEATURE_FIXED_COLUMNS = ["subject_id", "template_id", "media_id", "detection_score"]


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def clamp_detection_score(p: float) -> float:
    """Pull a raw score into the open interval so its logit stays finite."""
    return min(max(p, SCORE_CLAMP), 1.0 - SCORE_CLAMP)


def load_feature_csv(path, expected_dim: int | None = None) -> FeatureDataset:
    """Parse the feature CSV schema
    ``subject_id,template_id,media_id,detection_score,f0,...,f{D-1}``.

    Scores outside (0, 1) are clamped with a warning; malformed rows raise
    :class:`MalformedRow` naming the line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header") from None
        header = [h.strip() for h in header]
        if header[: len(FEATURE_FIXED_COLUMNS)] != FEATURE_FIXED_COLUMNS:
            raise MissingColumn(
                f"{path}: header must start with {','.join(FEATURE_FIXED_COLUMNS)}"
            )
        feat_cols = header[len(FEATURE_FIXED_COLUMNS):]
        dim = len(feat_cols)
        if dim == 0 or feat_cols != [f"f{i}" for i in range(dim)]:
            raise MissingColumn(f"{path}: feature columns must be f0..f{{D-1}}")
        if expected_dim is not None and dim != expected_dim:
            raise InconsistentDimension(
                f"{path}: feature dimension {dim}, expected {expected_dim}"
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedRow(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            try:
                score = float(row[3])
                feature = np.array([float(v) for v in row[4:]])
            except ValueError as exc:
                raise MalformedRow(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(feature)) or not math.isfinite(score):
                raise MalformedRow(f"{path}:{lineno}: non-finite value")
            clamped = clamp_detection_score(score)
            if clamped != score:
                warnings.warn(
                    f"{path}:{lineno}: detection_score {score} clamped to {clamped}",
                    stacklevel=2,
                )
            records.append(
                FeatureRecord(row[0], row[1], row[2], clamped, feature)
            )
    if not records:
        raise MalformedRow(f"{path}: no data rows")
    return FeatureDataset(records)


def write_feature_csv(path, dataset: FeatureDataset) -> None:
    lines = [",".join(FEATURE_FIXED_COLUMNS + [f"f{i}" for i in range(dataset.dim)])]
    for rec in dataset:
        lines.append(
            ",".join(
                [rec.subject_id, rec.template_id, rec.media_id, _fmt(rec.detection_score)]
                + [_fmt(v) for v in rec.feature]
            )
        )
    _atomic_write(path, "\n".join(lines) + "\n")


PAIR_HEADER = ["template_id_1", "template_id_2", "label"]
_PAIR_LABELS = {"1": 1, "0": 0, "?": None}


def load_pair_protocol(path) -> PairProtocol:
    """Pair CSV ``template_id_1,template_id_2,label`` with label 1/0/?."""
    pairs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header") from None
        if [h.strip() for h in header] != PAIR_HEADER:
            raise MissingColumn(f"{path}: header must be {','.join(PAIR_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(f"{path}:{lineno}: expected 3 columns")
            if row[2] not in _PAIR_LABELS:
                raise MalformedRow(f"{path}:{lineno}: label must be 1, 0 or ?")
            pairs.append((row[0], row[1], _PAIR_LABELS[row[2]]))
    return PairProtocol(tuple(pairs))


def write_pair_protocol(path, protocol: PairProtocol) -> None:
    inverse = {1: "1", 0: "0", None: "?"}
    lines = [",".join(PAIR_HEADER)]
    lines += [f"{t1},{t2},{inverse[label]}" for t1, t2, label in protocol.pairs]
    _atomic_write(path, "\n".join(lines) + "\n")


def load_id_list(path) -> list[str]:
    """Plain-text template id list, one per line, # comments allowed."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


def write_id_list(path, ids) -> None:
    _atomic_write(path, "\n".join(ids) + "\n")


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFile(f"{path}: truncated while reading {what}")
    return data


def load_idx_images(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse big-endian IDX image/label files (the MNIST container format).

    Returns ``(X, y)`` with X of shape (count, rows*cols) scaled into
    [0, 1] and y as int64 labels.
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(fh, 16, images_path, "image header")
        )
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"{images_path}: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        pixels = _read_exact(fh, count * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(
            ">II", _read_exact(fh, 8, labels_path, "label header")
        )
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"{labels_path}: magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        labels = _read_exact(fh, label_count, labels_path, "label data")
    if count != label_count:
        raise CountMismatch(f"{count} images but {label_count} labels")
    X = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(count, rows * cols)
    return X / 255.0, np.frombuffer(labels, dtype=np.uint8).astype(np.int64)


@dataclass
class RunConfig:
    """Validated key=value settings for the CLI pipeline.

    Defaults: quality pooling lambda 0.3, attenuation gamma 1.1 at
    detection threshold 0.75, fixed radius alpha 50.
    """

    batch_size: int = 32
    base_lr: float = 0.1
    lr_drop_steps: tuple[int, ...] = ()
    lr_drop_factor: float = 0.1
    max_iters: int = 500
    seed: int = 0
    head: str = "crystal_fixed"
    alpha: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    embedding_dim: int = 16
    pool_lambda: float = 0.3
    gamma: float = 1.1
    det_threshold: float = 0.75
    features: str | None = None
    eval_features: str | None = None
    out_dir: str | None = None


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v.strip()) for v in raw.split(","))


def _positive(x: float) -> bool:
    return x > 0


_CONFIG_KEYS = {
    # key -> (attr, parser, validator, description of the constraint)
    "batch_size": ("batch_size", int, lambda v: v >= 1, ">= 1"),
    "base_lr": ("base_lr", float, _positive, "> 0"),
    "lr_drop_steps": (
        "lr_drop_steps",
        _parse_int_list,
        lambda v: all(b > a for a, b in zip(v, v[1:])),
        "strictly increasing",
    ),
    "lr_drop_factor": ("lr_drop_factor", float, lambda v: 0 < v <= 1, "in (0, 1]"),
    "max_iters": ("max_iters", int, lambda v: v >= 1, ">= 1"),
    "seed": ("seed", int, lambda v: True, "integer"),
    "head": ("head", str, lambda v: v in HEAD_KINDS, f"one of {HEAD_KINDS}"),
    "alpha": ("alpha", float, _positive, "> 0"),
    "hidden": ("hidden", _parse_int_list, lambda v: all(h >= 1 for h in v), "sizes >= 1"),
    "embedding_dim": ("embedding_dim", int, lambda v: v >= 1, ">= 1"),
    "lambda": ("pool_lambda", float, lambda v: v >= 0, ">= 0"),
    "gamma": ("gamma", float, lambda v: v >= 1, ">= 1"),
    "det_threshold": ("det_threshold", float, lambda v: 0 < v < 1, "in (0, 1)"),
    "features": ("features", str, lambda v: True, "path"),
    "eval_features": ("eval_features", str, lambda v: True, "path"),
    "out_dir": ("out_dir", str, lambda v: True, "path"),
}


def parse_config(source) -> RunConfig:
    """Parse a line-based ``key = value`` config (`#` comments, no nesting).

    Unknown keys and out-of-range values are rejected naming the key.
    ``source`` is a path or an iterable of lines.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            lines = fh.readlines()
    else:
        lines = list(source)
    config = RunConfig()
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        attr, parser, validator, constraint = _CONFIG_KEYS[key]
        try:
            value = parser(raw)
        except ValueError:
            raise InvalidConfig(f"line {lineno}: cannot parse {key} = {raw!r}") from None
        if not validator(value):
            raise InvalidConfig(f"line {lineno}: {key} must be {constraint}, got {raw!r}")
        setattr(config, attr, value)
    return config


HEAD_MAGIC_CRYSTAL = "crystal-head v1"
HEAD_MAGIC_SOFTMAX = "softmax-head v1"
MODEL_MAGIC = "mlp-model v1"


def save_head(path, head) -> None:
    """Head checkpoint: one-line version header, then ``C,D[,alpha]``, the
    C weight rows, and the bias row."""
    if isinstance(head, CrystalHead):
        lines = [HEAD_MAGIC_CRYSTAL,
                 f"{head.num_classes},{head.feature_dim},{_fmt(head.alpha)}"]
    else:
        lines = [HEAD_MAGIC_SOFTMAX, f"{head.num_classes},{head.feature_dim}"]
    for row in head.weights:
        lines.append(",".join(_fmt(v) for v in row))
    lines.append(",".join(_fmt(v) for v in head.bias))
    _atomic_write(path, "\n".join(lines) + "\n")


def load_head(path, alpha_trainable: bool = False):
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0] not in (HEAD_MAGIC_CRYSTAL, HEAD_MAGIC_SOFTMAX):
        raise BadMagic(f"{path}: not a head checkpoint")
    kind = lines[0]
    meta = lines[1].split(",")
    C, D = int(meta[0]), int(meta[1])
    if len(lines) != 2 + C + 1:
        raise TruncatedFile(f"{path}: expected {2 + C + 1} lines, got {len(lines)}")
    weights = np.array([[float(v) for v in lines[2 + i].split(",")] for i in range(C)])
    bias = np.array([float(v) for v in lines[2 + C].split(",")])
    if weights.shape != (C, D):
        raise InconsistentDimension(f"{path}: weight block is not {C}x{D}")
    if kind == HEAD_MAGIC_CRYSTAL:
        return CrystalHead(weights, bias, float(meta[2]), alpha_trainable)
    return SoftmaxHead(weights, bias)


def save_model(path, model: MlpModel) -> None:
    """Model checkpoint: layer count, then per layer a ``rows,cols,activation``
    line, the weight rows, and the bias row."""
    lines = [MODEL_MAGIC, str(len(model.layers))]
    for layer in model.layers:
        rows, cols = layer.weight.shape
        lines.append(f"{rows},{cols},{layer.activation}")
        for row in layer.weight:
            lines.append(",".join(_fmt(v) for v in row))
        lines.append(",".join(_fmt(v) for v in layer.bias))
    _atomic_write(path, "\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    with open(path) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise BadMagic(f"{path}: not a model checkpoint")
    n_layers = int(lines[1])
    layers = []
    pos = 2
    for _ in range(n_layers):
        if pos >= len(lines):
            raise TruncatedFile(f"{path}: missing layer header")
        rows_s, cols_s, activation = lines[pos].split(",")
        rows, cols = int(rows_s), int(cols_s)
        if pos + rows + 1 >= len(lines) + 1:
            raise TruncatedFile(f"{path}: truncated layer block")
        weight = np.array(
            [[float(v) for v in lines[pos + 1 + r].split(",")] for r in range(rows)]
        )
        bias = np.array([float(v) for v in lines[pos + 1 + rows].split(",")])
        layers.append(Layer(weight, bias, activation))
        pos += rows + 2
    return MlpModel(layers)


def write_history_csv(path, history: TrainHistory) -> None:
    """Per-iteration loss trace as ``iter,loss`` (plus alpha when tracked)."""
    with_alpha = bool(history.alphas)
    lines = ["iter,loss,alpha" if with_alpha else "iter,loss"]
    for i, loss in enumerate(history.losses):
        row = f"{i},{_fmt(loss)}"
        if with_alpha:
            row += f",{_fmt(history.alphas[i])}"
        lines.append(row)
    _atomic_write(path, "\n".join(lines) + "\n")


def write_epochs_csv(path, history: TrainHistory) -> None:
    lines = ["epoch,accuracy"]
    lines += [f"{i},{_fmt(a)}" for i, a in enumerate(history.accuracies)]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_roc_csv(path, curve: RocCurve) -> None:
    lines = ["threshold,far,tar"]
    lines += [f"{_fmt(t)},{_fmt(f)},{_fmt(a)}" for t, f, a in curve.points]
    _atomic_write(path, "\n".join(lines) + "\n")


def write_scores_csv(path, scored_pairs) -> None:
    inverse = {1: "1", 0: "0", None: "?"}
    lines = ["template_id_1,template_id_2,label,score"]
    lines += [
        f"{p.template_id_1},{p.template_id_2},{inverse[p.label]},{_fmt(p.score)}"
        for p in scored_pairs
    ]
    _atomic_write(path, "\n".join(lines) + "\n")


def far_label(far: float) -> str:
    """Compact label for a FAR/FPIR target: 1e-3 style for powers of ten."""
    exp = round(math.log10(far))
    if math.isclose(far, 10.0**exp):
        return f"1e{exp}"
    return f"{far:g}"


def write_summary(path, report: EvalReport) -> None:
    """key=value summary: tar@<far>=, tpir@fpir<fpir>=, rank<k>=, extras."""
    lines = []
    for far in sorted(report.tar_table, reverse=True):
        lines.append(f"tar@{far_label(far)}={_fmt(report.tar_table[far])}")
    for fpir in sorted(report.tpir_table, reverse=True):
        lines.append(f"tpir@fpir{far_label(fpir)}={_fmt(report.tpir_table[fpir])}")
    for k in sorted(report.rank_rates):
        lines.append(f"rank{k}={_fmt(report.rank_rates[k])}")
    for key in sorted(report.extras):
        lines.append(f"{key}={_fmt(report.extras[key])}")
    _atomic_write(path, "\n".join(lines) + "\n")
