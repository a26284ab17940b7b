"""Classifier-based conversion evaluation.

Three independent attribute classifiers (singer, technique, vowel) are
trained on unconverted mels only, then every test recording is
converted to every target class and re-classified. The converted
attribute is scored against the target label; the untouched attributes
are scored against the recording's original labels. "Before" columns
are the classifiers' accuracy on unconverted mels and therefore do not
depend on the conversion strategy.

The classifiers share the generative model's front end (FEN -> BLSTM)
but always pool with attention, regardless of which model variant they
evaluate.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from gmvc.conversion import ConversionRequest, convert
from gmvc.corpus import Manifest, load_mel
from gmvc.errors import InvalidInput, InvalidManifest
from gmvc.features import chunk_array
from gmvc.model import FEN, Model, SINGER, TECHNIQUE
from gmvc.nn import tensor as T
from gmvc.nn.checkpoint import load_checkpoint, save_checkpoint
from gmvc.nn.layers import BLSTM, INFER_CTX, LayerCtx, Linear
from gmvc.nn.optim import Adam
from gmvc.nn.params import ParamStore, xavier_init
from gmvc.nn.tensor import Tensor
from gmvc.training import make_batches

log = logging.getLogger(__name__)

VOWEL = "vowel"
EVAL_ATTRIBUTES = (SINGER, TECHNIQUE, VOWEL)

REPORT_HEADER = ["strategy", "variant", "converted", "metric", "before", "after"]
NO_CONVERSION = "none"  # strategy/converted marker for baseline (M0) rows


def label_of(meta, attribute: str) -> int:
    if attribute not in EVAL_ATTRIBUTES:
        raise InvalidInput(f"unknown attribute {attribute!r}")
    return getattr(meta, attribute)


@dataclass
class EvalConfig:
    classes: int | None = None  # inferred from the manifest when None
    conv_channels: int = 32
    rnn_hidden: int = 16
    bottleneck: int = 24
    lr: float = 1e-4
    batch_size: int = 16
    max_steps: int = 2000
    seed: int = 0

    def validate(self) -> "EvalConfig":
        if self.classes is not None and self.classes < 1:
            raise InvalidInput(f"classes must be >= 1, got {self.classes}")
        for name in ("conv_channels", "rnn_hidden", "bottleneck", "batch_size", "max_steps"):
            if getattr(self, name) < 1:
                raise InvalidInput(f"{name} must be >= 1")
        if not self.lr > 0:
            raise InvalidInput(f"lr must be positive, got {self.lr}")
        return self


class EvalClassifier:
    """FEN -> BLSTM -> attention pool -> FC softmax over K classes."""

    def __init__(self, attribute: str, classes: int, cfg: EvalConfig, dtype=np.float32):
        if attribute not in EVAL_ATTRIBUTES:
            raise InvalidInput(f"unknown attribute {attribute!r}")
        cfg.validate()
        self.attribute = attribute
        self.classes = classes
        self.cfg = cfg
        self.holdout_accuracy: float | None = None
        self.store = ParamStore(rng_seed=cfg.seed, dtype=dtype)
        h2 = 2 * cfg.rnn_hidden
        self.fen = FEN(self.store, "fen", cfg.conv_channels, cfg.bottleneck)
        self.blstm = BLSTM(self.store, "rnn.blstm", cfg.bottleneck, cfg.rnn_hidden)
        self.attn = Linear(self.store, "attn.f", h2, 1)
        self.head = Linear(self.store, "cls.fc", h2, classes)
        xavier_init(self.store)

    def logits(self, chunks, ctx: LayerCtx) -> Tensor:
        data = np.asarray(chunks, dtype=self.store.dtype)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise InvalidInput(f"expected (B, N, 43, 96) chunks, got {data.shape}")
        b, n = data.shape[:2]
        feats = self.fen(Tensor(data.reshape(b * n, *data.shape[2:])), ctx)
        feats = T.reshape(feats, (b, n, self.cfg.bottleneck))
        hs = self.blstm(feats)  # (B, N, 2H)
        scores = self.attn(T.reshape(hs, (b * n, 2 * self.cfg.rnn_hidden)))
        alpha = T.softmax(T.reshape(scores, (b, n)), axis=1)
        pooled = T.tsum(T.mul(T.reshape(alpha, (b, n, 1)), hs), axis=1)
        return self.head(pooled)

    def predict(self, chunks) -> np.ndarray:
        """Class index per recording (scalar array for a single one)."""
        with T.no_grad():
            out = self.logits(chunks, INFER_CTX)
        return np.argmax(out.data, axis=1)


def train_eval_classifier(
    attribute: str, manifest: Manifest, cfg: EvalConfig | None = None
) -> EvalClassifier:
    """Fit one attribute classifier on the manifest's train split.

    Holdout accuracy on the test split is recorded on the classifier
    (None when the manifest has no test entries).
    """
    cfg = (cfg or EvalConfig()).validate()
    if attribute not in EVAL_ATTRIBUTES:
        raise InvalidInput(f"unknown attribute {attribute!r}")
    labels_all = [label_of(e.meta, attribute) for e in manifest.entries]
    if any(lab < 0 for lab in labels_all):
        raise InvalidManifest(f"manifest is missing {attribute} labels")
    classes = cfg.classes if cfg.classes is not None else max(labels_all) + 1
    if any(lab >= classes for lab in labels_all):
        raise InvalidManifest(
            f"{attribute} label exceeds configured class count {classes}"
        )
    train_entries = manifest.subset("train")
    if not train_entries:
        raise InvalidManifest("manifest has no train-split entries")
    tman = Manifest(train_entries, manifest.root)

    data = {}
    for e in tman.entries:
        path = tman.resolve(e)
        if not os.path.exists(path):
            raise InvalidInput(
                f"missing mel cache {path!r} for recording {e.meta.id!r}; "
                "run prepare (or synth) first"
            )
        data[e.meta.id] = chunk_array(load_mel(tman, e)).astype(np.float32)
    counts = {rid: arr.shape[0] for rid, arr in data.items()}

    clf = EvalClassifier(attribute, classes, cfg)
    optim = Adam(clf.store, lr=cfg.lr)
    ctx = LayerCtx(train=True, update_stats=True)
    batches = make_batches(tman, cfg.batch_size, cfg.seed, counts)
    for _ in range(cfg.max_steps):
        batch = next(batches)
        x = np.stack([data[e.meta.id] for e in batch])
        y = np.array([label_of(e.meta, attribute) for e in batch])
        loss = T.cross_entropy(clf.logits(x, ctx), y)
        T.backward(loss)
        optim.step()

    holdout = manifest.subset("test")
    if holdout:
        preds = classify_recordings(clf, manifest, holdout)
        want = np.array([label_of(e.meta, attribute) for e in holdout])
        clf.holdout_accuracy = accuracy(preds, want)
        log.info(
            "%s classifier holdout accuracy: %.2f%% (%d recordings)",
            attribute,
            clf.holdout_accuracy,
            len(holdout),
        )
    return clf


def save_classifier(path: str, clf: EvalClassifier) -> None:
    """Parameter checkpoint plus a `<path>.meta` sidecar for rebuilding."""
    save_checkpoint(path, clf.store)
    acc = clf.holdout_accuracy
    lines = [
        f"attribute={clf.attribute}",
        f"classes={clf.classes}",
        f"conv_channels={clf.cfg.conv_channels}",
        f"rnn_hidden={clf.cfg.rnn_hidden}",
        f"bottleneck={clf.cfg.bottleneck}",
        f"holdout_accuracy={'NA' if acc is None else repr(acc)}",
    ]
    tmp = f"{path}.meta.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path + ".meta")


def load_classifier(path: str) -> EvalClassifier:
    meta_path = path + ".meta"
    if not os.path.exists(meta_path):
        raise InvalidInput(f"missing classifier sidecar {meta_path!r}")
    kv: dict = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidInput(f"{meta_path}: bad sidecar line {raw!r}")
            kv[key.strip()] = value.strip()
    try:
        cfg = EvalConfig(
            conv_channels=int(kv["conv_channels"]),
            rnn_hidden=int(kv["rnn_hidden"]),
            bottleneck=int(kv["bottleneck"]),
        )
        clf = EvalClassifier(kv["attribute"], int(kv["classes"]), cfg)
        acc = kv["holdout_accuracy"]
    except (KeyError, ValueError) as exc:
        raise InvalidInput(f"{meta_path}: {exc}") from None
    load_checkpoint(path, clf.store)
    clf.holdout_accuracy = None if acc == "NA" else float(acc)
    return clf


def accuracy(preds, labels) -> float:
    """Percent correct."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise InvalidInput(f"bad prediction/label shapes {preds.shape} vs {labels.shape}")
    return 100.0 * float(np.mean(preds == labels))


def _load_chunks(manifest: Manifest, entries, jobs: int = 1) -> list:
    """Chunk arrays per entry; `jobs` threads overlap the disk reads."""
    def one(e):
        return chunk_array(load_mel(manifest, e)).astype(np.float32)

    if jobs <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, entries))


def classify_recordings(
    clf: EvalClassifier, manifest: Manifest, entries=None, jobs: int = 1
) -> np.ndarray:
    """One prediction per recording (chunk counts may differ per entry)."""
    entries = manifest.entries if entries is None else entries
    chunks = _load_chunks(manifest, entries, jobs)
    return np.array([int(clf.predict(c)[0]) for c in chunks])


# ------------------------------------------------------------------ reports


@dataclass
class ReportRow:
    strategy: str   # conversion strategy, or "none" for the baseline row
    variant: str    # model label (M0 baseline, M1..M3 variants)
    converted: str  # converted attribute, or "none"
    before: dict = field(default_factory=dict)  # attribute -> accuracy %
    after: dict = field(default_factory=dict)   # attribute -> accuracy % | None


@dataclass
class AccuracyReport:
    rows: list

    def __iter__(self):
        return iter(self.rows)


def evaluate_before(classifiers: dict, manifest: Manifest, jobs: int = 1) -> dict:
    """Accuracy of each classifier on unconverted test mels."""
    entries = manifest.subset("test")
    if not entries:
        raise InvalidManifest("manifest has no test-split entries")
    out = {}
    for attr, clf in classifiers.items():
        preds = classify_recordings(clf, manifest, entries, jobs)
        want = np.array([label_of(e.meta, attr) for e in entries])
        out[attr] = accuracy(preds, want)
    return out


def baseline_row(
    classifiers: dict, manifest: Manifest, variant: str = "M0", jobs: int = 1
) -> ReportRow:
    """The no-conversion row: before accuracies, NA afters."""
    before = evaluate_before(classifiers, manifest, jobs)
    return ReportRow(
        strategy=NO_CONVERSION,
        variant=variant,
        converted=NO_CONVERSION,
        before=before,
        after={attr: None for attr in before},
    )


def evaluate_conversion(
    model: Model,
    variant: str,
    classifiers: dict,
    manifest: Manifest,
    strategy: str,
    attribute: str,
    jobs: int = 1,
) -> ReportRow:
    """Convert every test recording to every target class and re-classify."""
    if attribute not in (SINGER, TECHNIQUE):
        raise InvalidInput(f"cannot convert attribute {attribute!r}")
    entries = manifest.subset("test")
    if not entries:
        raise InvalidManifest("manifest has no test-split entries")
    before = evaluate_before(classifiers, manifest, jobs)

    k = model.cfg.classes(attribute)
    correct = {attr: 0 for attr in classifiers}
    total = 0
    for e, chunks in zip(entries, _load_chunks(manifest, entries, jobs)):
        fwd = model.forward(chunks, mode="infer")
        for target in range(k):  # includes target == source
            res = convert(model, fwd, ConversionRequest(attribute, target, strategy))
            for attr, clf in classifiers.items():
                pred = int(clf.predict(res.mel)[0])
                want = target if attr == attribute else label_of(e.meta, attr)
                correct[attr] += pred == want
            total += 1
    after = {attr: 100.0 * correct[attr] / total for attr in classifiers}
    return ReportRow(
        strategy=strategy, variant=variant, converted=attribute,
        before=before, after=after,
    )


def render_csv(report: AccuracyReport) -> str:
    """One line per (row, metric); floats kept at full precision."""
    lines = [",".join(REPORT_HEADER)]
    for row in report.rows:
        for attr in EVAL_ATTRIBUTES:
            if attr not in row.before:
                continue
            after = row.after.get(attr)
            lines.append(
                ",".join(
                    [
                        row.strategy,
                        row.variant,
                        row.converted,
                        attr,
                        repr(row.before[attr]),
                        "NA" if after is None else repr(after),
                    ]
                )
            )
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> AccuracyReport:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != ",".join(REPORT_HEADER):
        raise InvalidInput("not an accuracy report")
    rows: list = []
    index: dict = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(REPORT_HEADER):
            raise InvalidInput(f"bad report line {ln!r}")
        strategy, variant, converted, metric, before, after = parts
        if metric not in EVAL_ATTRIBUTES:
            raise InvalidInput(f"unknown metric {metric!r}")
        key = (strategy, variant, converted)
        if key not in index:
            index[key] = ReportRow(strategy=strategy, variant=variant, converted=converted)
            rows.append(index[key])
        row = index[key]
        row.before[metric] = float(before)
        row.after[metric] = None if after == "NA" else float(after)
    return AccuracyReport(rows=rows)


def render_table(report: AccuracyReport) -> str:
    """Fixed-width text table; `*` marks the converted attribute's After."""
    head1 = f"{'strategy':<12} {'model':<6} {'converted':<10}"
    head2 = f"{'':<12} {'':<6} {'':<10}"
    for attr in EVAL_ATTRIBUTES:
        head1 += f" {attr:>17}"
        head2 += f" {'before':>8} {'after':>8}"
    lines = [head1, head2]
    for row in report.rows:
        line = f"{row.strategy:<12} {row.variant:<6} {row.converted:<10}"
        for attr in EVAL_ATTRIBUTES:
            if attr not in row.before:
                line += f" {'-':>8} {'-':>8}"
                continue
            after = row.after.get(attr)
            if after is None:
                cell = "NA"
            else:
                cell = f"{after:.2f}" + ("*" if attr == row.converted else "")
            line += f" {row.before[attr]:>8.2f} {cell:>8}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def render_report(report: AccuracyReport) -> tuple[str, str]:
    return render_csv(report), render_table(report)
