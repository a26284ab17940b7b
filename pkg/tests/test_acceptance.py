"""Acceptance gates for the whole package.

Each test pins one release property end to end: gradient correctness of
the full objective, the closed-form KLD against Monte Carlo, the
objective's reduction to a plain ELBO, conversion identities, component
selection, the desk-scale disentanglement trend, report shape against a
golden file, mel pipeline exactness, and run-to-run determinism.

The trend gate (test 06) trains a real model, so this module takes
several minutes; everything in it is seeded and deterministic.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest

from gmvc import cli
from gmvc.conversion import (
    ConversionRequest,
    convert,
    morph_series,
    reconstruct,
    source_component_chunk,
    source_component_sequence,
)
from gmvc.corpus import (
    generate_synthetic_corpus,
    load_mel,
    read_mel_cache,
    write_mel_cache,
)
from gmvc.evaluation import (
    AccuracyReport,
    EvalConfig,
    ReportRow,
    evaluate_conversion,
    render_csv,
    render_table,
    train_eval_classifier,
)
from gmvc.features import (
    CHUNK_FRAMES,
    HOP,
    SAMPLE_RATE,
    MelSpectrogram,
    Waveform,
    chunk_array,
    compute_mel,
)
from gmvc.errors import TooShort
from gmvc.model import MixturePrior, ModelConfig, build_model
from gmvc.nn.gradcheck import gradcheck, max_relative_error
from gmvc.nn.tensor import Tensor
from gmvc.objective import kld_diag_gauss, total_objective
from gmvc.training import TrainConfig, read_log, train, variant_model

DATA = os.path.join(os.path.dirname(__file__), "data")


# --------------------------------------------------------------- 01


def test_01_gradients_match_finite_differences():
    """Max relative error < 1e-3 for every variant's full objective."""
    t0 = time.perf_counter()
    worst_by_variant = {}
    for variant in ("M1", "M2", "M3"):
        cfg = variant_model(
            variant,
            latent_dim=4,
            singer_classes=5,
            technique_classes=3,
            conv_channels=16,
            rnn_hidden=8,
            bottleneck=16,
        )
        model = build_model(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        batch, chunks = 2, 3
        x = rng.uniform(-1.0, 1.0, size=(batch, chunks, 43, 96))
        y_s = rng.integers(0, cfg.singer_classes, size=batch)
        y_t = rng.integers(0, cfg.technique_classes, size=batch)
        eps = (
            rng.standard_normal((batch, chunks, cfg.latent_dim)),
            rng.standard_normal((batch, chunks, cfg.latent_dim)),
        )
        priors = (model.prior("singer"), model.prior("technique"))

        def loss_fn():
            fwd = model.forward(x, mode="train", eps_override=eps, update_stats=False)
            return total_objective(fwd, x, (y_s, y_t), cfg, priors).node

        report = gradcheck(loss_fn, model.store, eps=3e-5)
        worst_by_variant[variant] = max_relative_error(report)
    elapsed = time.perf_counter() - t0
    print(f"gate 01: {worst_by_variant} in {elapsed:.0f}s")
    for variant, worst in worst_by_variant.items():
        assert worst < 1e-3, f"{variant}: max relative error {worst:.3e}"
    assert elapsed < 300.0, f"gradient audit took {elapsed:.0f}s"


# --------------------------------------------------------------- 02


def test_02_kld_matches_monte_carlo_and_worked_value():
    """Closed-form KLD vs a 1e5-sample Monte-Carlo estimate on 100 pairs."""
    t0 = time.perf_counter()
    worked = float(kld_diag_gauss([1.0], [-1.0], [0.0], math.exp(-2.0)).data)
    assert abs(worked - math.e**2 / 2.0) < 1e-4

    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        # relative tolerance needs a divergence that is not near zero,
        # so tiny-KLD draws are re-rolled
        while True:
            mu = rng.normal(0.0, 1.0, d)
            ls = rng.uniform(-1.5, 0.5, d)
            m = rng.normal(0.0, 1.0, d)
            pv = float(rng.uniform(0.05, 2.0))
            closed = float(kld_diag_gauss(mu, ls, m, pv).data)
            if closed >= 0.5:
                break
        half = rng.standard_normal((50_000, d))
        eps = np.concatenate([half, -half])  # antithetic pairs, 1e5 draws
        z = mu + np.exp(ls) * eps
        log_q = -0.5 * (eps**2).sum(1) - ls.sum() - 0.5 * d * math.log(2 * math.pi)
        log_p = -0.5 * ((z - m) ** 2).sum(1) / pv - 0.5 * d * math.log(
            2 * math.pi * pv
        )
        mc = float((log_q - log_p).mean())
        worst = max(worst, abs(mc - closed) / closed)
    elapsed = time.perf_counter() - t0
    print(f"gate 02: worked diff {abs(worked - math.e**2 / 2):.1e}, "
          f"worst MC rel err {worst:.4f} in {elapsed:.0f}s")
    assert worst < 0.01
    assert elapsed < 60.0


# --------------------------------------------------------------- 03


def test_03_objective_reduces_to_plain_elbo():
    """beta = gamma = 0 with uniform weights is the classic two-stream ELBO."""
    cfg = variant_model(
        "M1",
        latent_dim=4,
        singer_classes=3,
        technique_classes=2,
        conv_channels=8,
        rnn_hidden=6,
        bottleneck=8,
    )
    model = build_model(cfg, seed=11, dtype=np.float64)
    priors = (model.prior("singer"), model.prior("technique"))
    pv = cfg.fixed_variance
    rng = np.random.default_rng(33)
    for _ in range(50):
        b, n = 2, 2
        x = rng.uniform(-1.0, 1.0, (b, n, 43, 96))
        y_s = rng.integers(0, cfg.singer_classes, b)
        y_t = rng.integers(0, cfg.technique_classes, b)
        eps = (
            rng.standard_normal((b, n, cfg.latent_dim)),
            rng.standard_normal((b, n, cfg.latent_dim)),
        )
        fwd = model.forward(x, "train", eps_override=eps, update_stats=False)
        bd = total_objective(fwd, x, (y_s, y_t), cfg, priors)

        np.testing.assert_allclose(fwd.alpha_s.data, 1.0 / n)
        np.testing.assert_allclose(fwd.alpha_t.data, 1.0 / n)
        # hand-coded ELBO: unit-variance Gaussian log-likelihood of both
        # decoder heads minus the closed-form KLD to the labeled component,
        # averaged over chunks (uniform weights) and the batch
        recon = sum(
            -0.5 * ((x - head.data) ** 2).sum() / b
            for head in (fwd.refined, fwd.recon)
        )
        kld = 0.0
        for q, y, prior in (
            (fwd.singer_post, y_s, priors[0]),
            (fwd.tech_post, y_t, priors[1]),
        ):
            mu, ls = q.mu.data, q.log_sigma.data
            m = prior.means.data[y][:, None, :]
            per_coord = (
                0.5 * math.log(pv)
                - ls
                + (np.exp(2.0 * ls) + (mu - m) ** 2) / (2.0 * pv)
                - 0.5
            )
            kld += per_coord.sum(axis=2).mean(axis=1).mean()
        oracle = -recon + kld
        assert abs(oracle - bd.total) <= 1e-6 * max(1.0, abs(bd.total))


# --------------------------------------------------------------- 04


def test_04_conversion_identities():
    """Identity, lambda=0, collinearity, and stream-isolation properties."""
    for seed in (3, 14, 27):
        cfg = ModelConfig(
            latent_dim=3 + seed % 3,
            singer_classes=4,
            technique_classes=3,
            beta=1.0,
            gamma=1.0,
            use_attention=seed % 2 == 0,
            conv_channels=8,
            rnn_hidden=6,
            bottleneck=8,
        )
        model = build_model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 100)
        x = rng.uniform(-1.0, 1.0, (1, 3, 43, 96))
        fwd = model.forward(x, mode="infer")
        rec = reconstruct(model, fwd)

        # (a) converting to the detected source is a bit-exact no-op
        src = source_component_sequence(fwd, "singer")
        res = convert(model, fwd, ConversionRequest("singer", src, "c-sequence"))
        assert np.array_equal(res.mel, rec)
        detected = convert(
            model, fwd, ConversionRequest("singer", 0, "c-chunk", lam=0.0)
        ).detected["singer"]
        assert len(set(detected.tolist())) == 1  # all chunks agree at these seeds
        res = convert(
            model, fwd, ConversionRequest("singer", int(detected[0]), "c-chunk")
        )
        assert np.array_equal(res.mel, rec)

        # (b) lambda = 0 reproduces the reconstruction for every request
        for attribute in ("singer", "technique"):
            for strategy in ("c-chunk", "c-sequence"):
                res = convert(
                    model, fwd, ConversionRequest(attribute, 1, strategy, lam=0.0)
                )
                assert np.array_equal(res.mel, rec)

        # (c) morph latents are collinear in lambda
        series = morph_series(
            model, fwd, ConversionRequest("singer", 2, "c-chunk"), steps=5
        )
        z0, z1 = series[0].z_singer, series[-1].z_singer
        for i, step in enumerate(series):
            lam = i / 4.0
            np.testing.assert_allclose(
                step.z_singer - z0, lam * (z1 - z0), atol=1e-7
            )

        # (d) converting one stream leaves the other stream's latents alone
        res = convert(model, fwd, ConversionRequest("singer", 1, "c-chunk"))
        assert np.array_equal(res.z_technique, fwd.z_t.z.data[0])
        res = convert(model, fwd, ConversionRequest("technique", 1, "c-chunk"))
        assert np.array_equal(res.z_singer, fwd.z_s.z.data[0])


# --------------------------------------------------------------- 05


def test_05_component_selection_matches_brute_force():
    """Nearest-mean shortcut vs full Gaussian log-density argmax."""
    rng = np.random.default_rng(404)
    for _ in range(1000):
        d = int(rng.integers(1, 7))
        k = int(rng.integers(1, 9))
        means = rng.normal(0.0, 2.0, (k, d))
        var = float(rng.uniform(0.05, 3.0))
        z = rng.normal(0.0, 2.0, d)
        log_density = (
            -0.5 * ((z - means) ** 2).sum(axis=1) / var
            - 0.5 * d * math.log(2.0 * math.pi * var)
        )
        want = int(np.argmax(log_density))
        got = source_component_chunk(z, MixturePrior(Tensor(means), var))
        assert got == want


# --------------------------------------------------------------- 06


def test_06_desk_scale_disentanglement_trend(tmp_path):
    """Train M2 on the synthetic corpus and check the conversion trend.

    Thresholds below were calibrated by a pilot at exactly these seeds
    and sizes (corpus seed 77, train seed 7, 5000 steps): classifiers
    reach 100 holdout, the total falls 762.3 -> 160.1, singer accuracy
    vs target hits 100.00 against 25.00 vs source, and the technique
    accuracy drop is 11.46 points under the 15-point gate.
    """
    t0 = time.perf_counter()
    man = generate_synthetic_corpus(
        str(tmp_path / "corpus"),
        seed=77,
        n_singers=4,
        n_techniques=3,
        n_vowels=2,
        per_class=4,
    )

    clfs = {}
    for attr in ("singer", "technique", "vowel"):
        clfs[attr] = train_eval_classifier(
            attr, man, EvalConfig(max_steps=2000, lr=1e-4, seed=0)
        )

    cfg = TrainConfig(
        variant="M2",
        model=variant_model(
            "M2",
            latent_dim=8,
            singer_classes=4,
            technique_classes=3,
            conv_channels=64,
            rnn_hidden=32,
            bottleneck=64,
        ),
        batch_size=16,
        lr=1e-3,
        max_steps=5000,
        seed=7,
        checkpoint_every=2500,
        out_dir=str(tmp_path / "run"),
    )
    state = train(cfg, man)
    rows = read_log(state.log_path)
    total_50 = next(r["total"] for r in rows if r["step"] == 50)
    total_final = rows[-1]["total"]

    failures = []
    # (i) the objective actually descends
    if not total_final < total_50:
        failures.append(f"(i) total {total_final} !< {total_50}")
    # (ii) evaluation classifiers are trustworthy on clean mels
    holdouts = {a: clfs[a].holdout_accuracy for a in clfs}
    if not all(h >= 95.0 for h in holdouts.values()):
        failures.append(f"(ii) holdout accuracies {holdouts}")

    # (iii)/(iv) measured on singer conversions of every test recording
    entries = man.subset("test")
    model = state.model
    for strategy in ("c-chunk", "c-sequence"):
        row = evaluate_conversion(model, "M2", clfs, man, strategy, "singer")
        vs_target = row.after["singer"]
        drop = row.before["technique"] - row.after["technique"]

        src_hits = total = 0
        for e in entries:
            fwd = model.forward(
                chunk_array(load_mel(man, e)).astype(np.float32), mode="infer"
            )
            for target in range(cfg.model.singer_classes):
                res = convert(
                    model, fwd, ConversionRequest("singer", target, strategy)
                )
                src_hits += int(clfs["singer"].predict(res.mel)[0]) == e.meta.singer
                total += 1
        vs_source = 100.0 * src_hits / total

        if not vs_target > vs_source:
            failures.append(
                f"(iii) {strategy}: vs-target {vs_target} !> vs-source {vs_source}"
            )
        if not drop <= 15.0:
            failures.append(f"(iv) {strategy}: technique drop {drop:.2f} > 15.0")
        print(
            f"gate 06 {strategy}: total {total_50:.1f}->{total_final:.1f}, "
            f"holdouts {holdouts}, vs-target {vs_target:.2f}, "
            f"vs-source {vs_source:.2f}, technique drop {drop:.2f}"
        )

    elapsed = time.perf_counter() - t0
    assert not failures, "; ".join(failures)
    assert elapsed < 3600.0, f"trend gate took {elapsed:.0f}s"


# --------------------------------------------------------------- 07


def test_07_report_matches_golden_file():
    """Report renderers reproduce the blessed row/column layout exactly."""
    before = {"singer": 87.5, "technique": 75.0, "vowel": 100.0}
    rows = [
        ReportRow("none", "M0", "none", dict(before), {k: None for k in before}),
        ReportRow("c-chunk", "M2", "singer", dict(before),
                  {"singer": 62.5, "technique": 68.75, "vowel": 93.75}),
        ReportRow("c-chunk", "M2", "technique", dict(before),
                  {"singer": 81.25, "technique": 56.25, "vowel": 87.5}),
        ReportRow("c-sequence", "M2", "singer", dict(before),
                  {"singer": 59.375, "technique": 70.3125, "vowel": 93.75}),
        ReportRow("c-sequence", "M2", "technique", dict(before),
                  {"singer": 84.375, "technique": 53.125, "vowel": 90.625}),
    ]
    report = AccuracyReport(rows)
    with open(os.path.join(DATA, "golden_report.csv")) as fh:
        assert render_csv(report) == fh.read()
    with open(os.path.join(DATA, "golden_report.txt")) as fh:
        assert render_table(report) == fh.read()


# --------------------------------------------------------------- 08


def test_08_mel_pipeline_exactness(tmp_path):
    """Cache round-trips bit-exact; chunking is floor(frames/43); 43
    frames cover half a second of signal."""
    rng = np.random.default_rng(88)
    for i, frames in enumerate((43, 107, 430)):
        mel = rng.uniform(-1.0, 1.0, (frames, 96)).astype(np.float32)
        path = str(tmp_path / f"rt{i}.mel")
        write_mel_cache(path, mel)
        back = read_mel_cache(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, mel)

    for frames in (43, 85, 86, 90, 129, 200, 431):
        mel = MelSpectrogram(rng.uniform(-1, 1, (frames, 96)).astype(np.float32))
        assert chunk_array(mel).shape == (frames // 43, 43, 96)
    with pytest.raises(TooShort):
        chunk_array(MelSpectrogram(np.zeros((42, 96), dtype=np.float32)))

    assert CHUNK_FRAMES == 43
    assert abs(CHUNK_FRAMES * HOP / SAMPLE_RATE - 0.5) < 1e-2
    # the shortest waveform analyzing to exactly 43 frames: one window
    # plus 42 hops, i.e. the half-second of signal those frames cover
    n = 1024 + 42 * HOP
    t = np.arange(n) / SAMPLE_RATE
    w = Waveform((0.2 * np.sin(2 * np.pi * 220 * t)).astype(np.float32), SAMPLE_RATE)
    mel = compute_mel(w)
    assert mel.n_frames == 43
    assert chunk_array(mel).shape[0] == 1


# --------------------------------------------------------------- 09


def _run_pipeline(root: str) -> dict:
    corpus = os.path.join(root, "corpus")
    run = os.path.join(root, "run")
    clf = os.path.join(root, "clf")
    conv = os.path.join(root, "conv")
    rep = os.path.join(root, "eval")
    manifest = os.path.join(corpus, "manifest.csv")
    steps = [
        ["synth", "--out-dir", corpus, "--seed", "3", "--singers", "2",
         "--techniques", "2", "--vowels", "1", "--per-class", "2"],
        ["train", "--manifest", manifest, "--out-dir", run, "--variant", "M2",
         "--batch-size", "4", "--lr", "1e-3", "--max-steps", "200",
         "--checkpoint-every", "100", "--seed", "11", "--latent-dim", "4",
         "--k-singers", "2", "--k-techniques", "2", "--conv-channels", "8",
         "--rnn-hidden", "6", "--bottleneck", "8"],
        ["train-eval", "--manifest", manifest, "--out-dir", clf,
         "--max-steps", "60", "--lr", "1e-3", "--seed", "2"],
        ["convert", "--run-dir", run, "--manifest", manifest, "--recording",
         "s00_t0_v0_r1", "--attribute", "singer", "--target", "1",
         "--strategy", "c-sequence", "--out-dir", conv],
        ["evaluate", "--run-dir", run, "--manifest", manifest,
         "--classifier-dir", clf, "--out-dir", rep],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, f"step failed: {argv[0]}"

    digests = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                digests[os.path.relpath(full, root)] = hashlib.sha256(
                    fh.read()
                ).hexdigest()
    return digests


def test_09_end_to_end_determinism(tmp_path):
    """The full synth/train/convert/evaluate pipeline is bit-reproducible."""
    first = _run_pipeline(str(tmp_path / "a"))
    second = _run_pipeline(str(tmp_path / "b"))
    assert sorted(first) == sorted(second)
    mismatched = [p for p in first if first[p] != second[p]]
    assert not mismatched, f"artifacts differ: {mismatched}"
    print(f"gate 09: {len(first)} artifacts hash-identical")
