"""`gmvc` command line: corpus synthesis, feature prep, training,
conversion, morphing, evaluation, and gradient checking.

Exit codes: 0 success, 1 user error (message on stderr), 2 internal
error. Every command takes `--seed`; outputs land under `--out-dir`.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from gmvc.conversion import (
    STRATEGIES,
    ConversionRequest,
    convert,
    morph_series,
    write_conversion,
)
from gmvc.corpus import (
    Manifest,
    ManifestEntry,
    corpus_digest,
    generate_synthetic_corpus,
    load_mel,
    read_manifest,
    read_mel_cache,
    write_manifest,
    write_mel_cache,
)
from gmvc.errors import GmvcError, InvalidInput
from gmvc.evaluation import (
    EVAL_ATTRIBUTES,
    AccuracyReport,
    EvalConfig,
    baseline_row,
    evaluate_conversion,
    load_classifier,
    render_report,
    save_classifier,
    train_eval_classifier,
)
from gmvc.features import chunk_array, compute_mel, load_waveform
from gmvc.model import MEL_BANDS, SINGER, TECHNIQUE, build_model
from gmvc.nn.checkpoint import load_checkpoint
from gmvc.nn.gradcheck import gradcheck, max_relative_error
from gmvc.objective import total_objective
from gmvc.pngio import mel_to_image, stack_rows, write_image
from gmvc.training import (
    BEST_CKPT,
    LATEST_CKPT,
    VARIANTS,
    TrainConfig,
    read_config,
    train,
    variant_model,
    write_config,
)

log = logging.getLogger(__name__)

CONFIG_NAME = "config.cfg"


def _bool_flag(v: str) -> bool:
    low = v.lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {v!r}")


# ------------------------------------------------------------------ loaders


def _load_run(run_dir: str, best: bool = False):
    """Model rebuilt from a training run directory's config + checkpoint."""
    cfg_path = os.path.join(run_dir, CONFIG_NAME)
    if not os.path.exists(cfg_path):
        raise InvalidInput(f"no {CONFIG_NAME} under {run_dir!r}; train writes one")
    cfg = read_config(cfg_path)
    ckpt = os.path.join(run_dir, BEST_CKPT if best else LATEST_CKPT)
    if not os.path.exists(ckpt):
        raise InvalidInput(f"missing checkpoint {ckpt!r}")
    model = build_model(cfg.model, seed=cfg.seed)
    step = load_checkpoint(ckpt, model.store)
    log.info("loaded %s (variant %s, step %d)", ckpt, cfg.variant, step)
    return cfg, model


def _find_entry(manifest: Manifest, recording: str) -> ManifestEntry:
    for e in manifest.entries:
        if e.meta.id == recording:
            return e
    raise InvalidInput(f"recording {recording!r} not in manifest")


def _mel_png(path: str, mel_chunks: np.ndarray) -> None:
    write_image(path, mel_to_image(mel_chunks.reshape(-1, MEL_BANDS)))


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    man = generate_synthetic_corpus(
        args.out_dir,
        seed=args.seed,
        n_singers=args.singers,
        n_techniques=args.techniques,
        n_vowels=args.vowels,
        per_class=args.per_class,
    )
    print(
        f"wrote {len(man.entries)} recordings under {args.out_dir} "
        f"(digest {corpus_digest(args.out_dir)})"
    )
    return 0


def cmd_prepare(args) -> int:
    man = read_manifest(args.manifest)
    os.makedirs(os.path.join(args.out_dir, "mel"), exist_ok=True)

    def one(entry: ManifestEntry) -> ManifestEntry:
        src = man.resolve(entry)
        ext = os.path.splitext(src)[1].lower()
        if ext == ".wav":
            frames = compute_mel(load_waveform(src)).frames
        elif ext == ".mel":
            frames = read_mel_cache(src)
        else:
            raise InvalidInput(f"cannot prepare {src!r}: expected .wav or .mel")
        rel = os.path.join("mel", entry.meta.id + ".mel")
        write_mel_cache(os.path.join(args.out_dir, rel), frames)
        return dataclasses.replace(entry, path=rel)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            entries = list(pool.map(one, man.entries))
    else:
        entries = [one(e) for e in man.entries]
    out_man = Manifest(entries, os.path.abspath(args.out_dir))
    write_manifest(os.path.join(args.out_dir, "manifest.csv"), out_man)
    print(f"cached {len(entries)} mel spectrograms under {args.out_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    """Config file (if any) with command-line overrides applied on top."""
    if args.config:
        cfg = read_config(args.config)
        if args.variant and args.variant != cfg.variant:
            beta, gamma, att = VARIANTS[args.variant]
            cfg.variant = args.variant
            cfg.model.beta = beta
            cfg.model.gamma = gamma
            cfg.model.use_attention = att
    else:
        if not args.variant:
            raise InvalidInput("train: pass --config or --variant")
        cfg = TrainConfig(variant=args.variant, model=variant_model(args.variant))
    for name in ("batch_size", "lr", "max_steps", "seed", "checkpoint_every"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    model_keys = {
        "latent_dim": "latent_dim",
        "k_singers": "singer_classes",
        "k_techniques": "technique_classes",
        "beta": "beta",
        "gamma": "gamma",
        "use_attention": "use_attention",
        "conv_channels": "conv_channels",
        "rnn_hidden": "rnn_hidden",
        "bottleneck": "bottleneck",
    }
    for flag, attr in model_keys.items():
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg.model, attr, value)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if not cfg.out_dir:
        raise InvalidInput("train: pass --out-dir (or set out_dir in the config)")
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _train_config(args)
    man = read_manifest(args.manifest)
    os.makedirs(cfg.out_dir, exist_ok=True)
    # the stored copy stays relocatable: the run dir is wherever it sits
    write_config(
        os.path.join(cfg.out_dir, CONFIG_NAME), dataclasses.replace(cfg, out_dir="")
    )
    state = train(cfg, man, resume_from=args.resume)
    print(
        f"trained {cfg.variant} to step {state.step} "
        f"(total {state.last.total:.4f}) under {cfg.out_dir}"
    )
    return 0


def cmd_train_eval(args) -> int:
    man = read_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    attrs = EVAL_ATTRIBUTES if args.attribute == "all" else (args.attribute,)
    cfg = EvalConfig(
        classes=args.classes,
        conv_channels=args.conv_channels,
        rnn_hidden=args.rnn_hidden,
        bottleneck=args.bottleneck,
        lr=args.lr,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        seed=args.seed,
    )
    for attr in attrs:
        clf = train_eval_classifier(attr, man, dataclasses.replace(cfg))
        path = os.path.join(args.out_dir, f"clf_{attr}.gmvc")
        save_classifier(path, clf)
        shown = "NA" if clf.holdout_accuracy is None else f"{clf.holdout_accuracy:.2f}%"
        print(f"{attr}: holdout accuracy {shown} -> {path}")
    return 0


def cmd_convert(args) -> int:
    cfg, model = _load_run(args.run_dir, best=args.best)
    man = read_manifest(args.manifest)
    entry = _find_entry(man, args.recording)
    chunks = chunk_array(load_mel(man, entry)).astype(np.float32)
    fwd = model.forward(chunks, mode="infer")
    req = ConversionRequest(args.attribute, args.target, args.strategy, args.lam)
    res = convert(model, fwd, req)
    os.makedirs(args.out_dir, exist_ok=True)
    base = os.path.join(
        args.out_dir, f"{entry.meta.id}_to_{args.attribute}{args.target}"
    )
    write_conversion(base + ".mel", res)
    _mel_png(base + ".png", res.mel)
    comps = ",".join(str(int(c)) for c in res.detected[args.attribute])
    print(
        f"converted {entry.meta.id} {args.attribute} -> {args.target} "
        f"(source components {comps}) -> {base}.mel"
    )
    return 0


def cmd_morph(args) -> int:
    cfg, model = _load_run(args.run_dir, best=args.best)
    man = read_manifest(args.manifest)
    entry = _find_entry(man, args.recording)
    chunks = chunk_array(load_mel(man, entry)).astype(np.float32)
    fwd = model.forward(chunks, mode="infer")
    req = ConversionRequest(args.attribute, args.target, args.strategy, 1.0)
    series = morph_series(model, fwd, req, args.steps)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for i, res in enumerate(series):
        base = os.path.join(
            args.out_dir,
            f"{entry.meta.id}_morph_{args.attribute}{args.target}_{i:02d}",
        )
        write_conversion(base + ".mel", res)
        rows.append(mel_to_image(res.mel.reshape(-1, MEL_BANDS)))
    grid = os.path.join(
        args.out_dir, f"{entry.meta.id}_morph_{args.attribute}{args.target}.png"
    )
    write_image(grid, stack_rows(rows))
    lams = ", ".join(f"{r.requests[0].lam:g}" for r in series)
    print(f"morphed {entry.meta.id} over lambda = {lams} -> {grid}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, model = _load_run(args.run_dir, best=args.best)
    man = read_manifest(args.manifest)
    classifiers = {}
    for attr in EVAL_ATTRIBUTES:
        path = os.path.join(args.classifier_dir, f"clf_{attr}.gmvc")
        if not os.path.exists(path):
            raise InvalidInput(f"missing classifier {path!r}; run train-eval first")
        classifiers[attr] = load_classifier(path)
    strategies = list(STRATEGIES) if args.strategy == "all" else [args.strategy]
    attributes = (
        (SINGER, TECHNIQUE) if args.attribute == "all" else (args.attribute,)
    )
    rows = [baseline_row(classifiers, man, jobs=args.jobs)]
    for strategy in strategies:
        for attribute in attributes:
            rows.append(
                evaluate_conversion(
                    model, cfg.variant, classifiers, man,
                    strategy, attribute, jobs=args.jobs,
                )
            )
    report = AccuracyReport(rows=rows)
    csv_text, table = render_report(report)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    print(f"report -> {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = read_config(args.config)
    model = build_model(cfg.model, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(-1.0, 1.0, size=(args.batch, args.chunks, 43, 96))
    y_s = rng.integers(0, cfg.model.singer_classes, size=args.batch)
    y_t = rng.integers(0, cfg.model.technique_classes, size=args.batch)
    eps = (
        rng.standard_normal((args.batch, args.chunks, cfg.model.latent_dim)),
        rng.standard_normal((args.batch, args.chunks, cfg.model.latent_dim)),
    )
    priors = (model.prior(SINGER), model.prior(TECHNIQUE))

    def loss_fn():
        fwd = model.forward(x, mode="train", eps_override=eps, update_stats=False)
        return total_objective(fwd, x, (y_s, y_t), cfg.model, priors).node

    report = gradcheck(loss_fn, model.store, eps=args.eps)
    worst = max_relative_error(report)
    name = report[0][0] if report else "-"
    print(
        f"max relative error {worst:.3e} over "
        f"{model.store.n_coords()} coordinates (worst: {name})"
    )
    return 0 if worst < args.threshold else 1


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmvc",
        description="GMVAE singing-voice conversion pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str, seed_default=0):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=seed_default, help="RNG seed")
        return p

    p = add("synth", cmd_synth, "generate the synthetic benchmark corpus")
    p.add_argument("--out-dir", required=True, help="corpus output directory")
    p.add_argument("--singers", type=int, default=4)
    p.add_argument("--techniques", type=int, default=3)
    p.add_argument("--vowels", type=int, default=2)
    p.add_argument("--per-class", type=int, default=2)

    p = add("prepare", cmd_prepare, "cache mel spectrograms for a manifest")
    p.add_argument("--manifest", required=True, help="input manifest.csv")
    p.add_argument("--out-dir", required=True, help="cache output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    # train's --seed overrides the config file, so its default is "unset"
    p = add("train", cmd_train, "optimize a model variant", seed_default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--out-dir", help="run directory (overrides config)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--k-singers", type=int)
    p.add_argument("--k-techniques", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--use-attention", type=_bool_flag)
    p.add_argument("--conv-channels", type=int)
    p.add_argument("--rnn-hidden", type=int)
    p.add_argument("--bottleneck", type=int)

    p = add("train-eval", cmd_train_eval, "fit the evaluation classifiers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True, help="classifier output directory")
    p.add_argument(
        "--attribute", choices=(*EVAL_ATTRIBUTES, "all"), default="all"
    )
    p.add_argument("--classes", type=int)
    p.add_argument("--conv-channels", type=int, default=EvalConfig.conv_channels)
    p.add_argument("--rnn-hidden", type=int, default=EvalConfig.rnn_hidden)
    p.add_argument("--bottleneck", type=int, default=EvalConfig.bottleneck)
    p.add_argument("--lr", type=float, default=EvalConfig.lr)
    p.add_argument("--batch-size", type=int, default=EvalConfig.batch_size)
    p.add_argument("--max-steps", type=int, default=EvalConfig.max_steps)

    def conversion_flags(p):
        p.add_argument("--run-dir", required=True, help="training run directory")
        p.add_argument("--manifest", required=True)
        p.add_argument("--recording", required=True, help="manifest recording id")
        p.add_argument("--attribute", required=True, choices=(SINGER, TECHNIQUE))
        p.add_argument("--target", required=True, type=int, help="target class")
        p.add_argument("--strategy", default="c-chunk", choices=sorted(STRATEGIES))
        p.add_argument("--out-dir", required=True)
        p.add_argument("--best", action="store_true", help="use ckpt_best")

    p = add("convert", cmd_convert, "convert one recording's attribute")
    conversion_flags(p)
    p.add_argument(
        "--lambda", dest="lam", type=float, default=1.0,
        help="conversion vector scale",
    )

    p = add("morph", cmd_morph, "conversion series over lambda in [0, 1]")
    conversion_flags(p)
    p.add_argument("--steps", type=int, default=5, help="number of lambdas")

    p = add("evaluate", cmd_evaluate, "classifier accuracy report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classifier-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strategy", choices=(*sorted(STRATEGIES), "all"), default="all")
    p.add_argument("--attribute", choices=(SINGER, TECHNIQUE, "all"), default="all")
    p.add_argument("--jobs", type=int, default=1, help="parallel mel loaders")
    p.add_argument("--best", action="store_true", help="use ckpt_best")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient audit")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--chunks", type=int, default=3)
    # default step balances ReLU kink crossings (error grows with eps)
    # against float64 cancellation (error grows as eps shrinks)
    p.add_argument("--eps", type=float, default=3e-5)
    p.add_argument("--threshold", type=float, default=1e-3)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except GmvcError as exc:
        print(f"gmvc {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the contract maps these to 2
        log.exception("internal error")
        print(f"gmvc {args.command}: internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
