"""Acceptance suite: one test per top-level criterion, each printing a
single PASS/FAIL line (run with -s or -v to see them). Every numeric
claim is checked against an independent oracle — naive loops, finite
differences, Monte-Carlo statistics, or closed-form arithmetic."""

import time
import zlib

import numpy as np
import pytest

from tfcmnn.constraints import max_norm_project
from tfcmnn.data import SyntheticSpec, generate_synthetic, split_by_speaker
from tfcmnn.features import (AudioClip, extract_feature_matrix, fit_norm_stats,
                             next_pow2, normalize, power_spectrum)
from tfcmnn.gradcheck import all_pass, gradient_check
from tfcmnn.layers import (ConvAxisLayer, DenseMaxoutLayer, MaxPoolLayer,
                           conv_axis_backward, conv_axis_forward,
                           dense_maxout_backward, dense_maxout_forward,
                           dropout_test_scale, maxpool_backward, maxpool_forward,
                           softmax_xent_backward, softmax_xent_forward)
from tfcmnn.model import build_model, named_params, param_count, parse_structure
from tfcmnn.numerics import SeededRng, finite_diff_gradient
from tfcmnn.training import (LRSchedule, TrainConfig, _param_row_axes,
                             sgd_step, train)

from test_layers import naive_conv_maxout, rand_conv_layer
from test_model import BASELINE_STRUCTURES, DROPOUT_STRUCTURES


def report(name, ok, detail=""):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def frac_within(analytic, fd, tol=1e-5):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
    return float(np.mean(np.abs(analytic - fd) / denom <= tol))


class TestGradientOracleSuite:
    """Analytic gradients vs central finite differences (h = 1e-5),
    rel <= 1e-5 on >= 99% of coordinates, ties excluded, under 60 s."""

    def test_gradient_oracle_suite(self):
        t0 = time.perf_counter()
        rng = SeededRng(2024)
        oks = []

        # dense maxout layer, weight + bias + input gradients
        layer = DenseMaxoutLayer(rng.normal(0.8, (6, 5, 2)), rng.normal(0.8, (5, 2)))
        x = rng.normal(0.8, (4, 6))
        up = rng.normal(1.0, (4, 5))
        _, cache = dense_maxout_forward(x, layer)
        dx, dW, db = dense_maxout_backward(up, layer, cache)
        fdW = finite_diff_gradient(
            lambda w: float((dense_maxout_forward(x, DenseMaxoutLayer(w, layer.b))[0] * up).sum()),
            layer.W.copy())
        fdx = finite_diff_gradient(
            lambda v: float((dense_maxout_forward(v, layer)[0] * up).sum()), x.copy())
        oks.append(frac_within(dW, fdW) >= 0.99)
        oks.append(frac_within(dx, fdx) >= 0.99)

        # conv maxout layer, both gradient paths
        conv = rand_conv_layer(rng, maps=3, kernel=3, span=4, pieces=2)
        cx = rng.normal(0.8, (2, 4, 9))
        cup = rng.normal(1.0, (2, 3, 7))
        _, ccache = conv_axis_forward(cx, conv)
        cdx, cdw, cdb = conv_axis_backward(cup, conv, ccache)
        fdw = finite_diff_gradient(
            lambda w: float((conv_axis_forward(
                cx, ConvAxisLayer("time", 3, 3, 2, w, conv.biases))[0] * cup).sum()),
            conv.weights.copy())
        oks.append(frac_within(cdw, fdw) >= 0.99)
        fdcx = finite_diff_gradient(
            lambda v: float((conv_axis_forward(v, conv)[0] * cup).sum()), cx.copy())
        oks.append(frac_within(cdx, fdcx) >= 0.99)

        # max pooling
        px = rng.normal(1.0, (1, 3, 7))
        pool = MaxPoolLayer(2)
        _, pcache = maxpool_forward(px, pool)
        pg = maxpool_backward(np.ones((1, 3, 4)), pool, pcache)
        fdp = finite_diff_gradient(
            lambda v: float(maxpool_forward(v, pool)[0].sum()), px.copy())
        oks.append(frac_within(pg, fdp) >= 0.99)

        # softmax cross-entropy
        logits = rng.normal(1.0, (5, 8))
        labels = np.asarray(rng.integers(0, 8, 5))
        _, sprobs = softmax_xent_forward(logits, labels)
        sg = softmax_xent_backward(sprobs, labels)
        fds = finite_diff_gradient(
            lambda z: float(softmax_xent_forward(z, labels)[0].sum()), logits.copy())
        oks.append(frac_within(sg, fds) >= 0.99)

        # full TFCMNN <= 2000 params, C2 K3 S2 F8, width 12, k = 2
        spec = parse_structure("C2 K3 S2 F8", pieces=2, width=12)
        model = build_model("tfcmnn", spec, seed=7)
        total, _ = param_count(model)
        oks.append(total <= 2000)
        patches = SeededRng(77).normal(0.5, (3, 18, 12))
        mlabels = np.asarray(SeededRng(78).integers(0, 30, 3))
        results = gradient_check(model, patches, mlabels)
        oks.append(all_pass(results, min_frac=0.99))

        elapsed = time.perf_counter() - t0
        report("gradient oracle suite", all(oks) and elapsed < 60.0,
               f"params={total}, {elapsed:.1f}s")


class TestConvolutionOracle:
    """conv_axis_forward vs a naive nested-loop implementation, 100
    random cases per axis within 1e-12 max-abs, under 10 s."""

    def test_convolution_oracle(self):
        t0 = time.perf_counter()
        worst = 0.0
        for case in range(100):
            rng = SeededRng([314, case])
            maps = 1 + case % 4
            kernel = 1 + case % 5
            span = 2 + case % 6
            extent = kernel + int(rng.integers(1, 9, 1)[0])
            pieces = 1 + case % 3
            for axis in ("time", "frequency"):
                layer = rand_conv_layer(rng, maps, kernel, span, pieces)
                layer = ConvAxisLayer(axis, maps, kernel, pieces,
                                      layer.weights, layer.biases)
                x = rng.normal(1.0, (span, extent))
                y, _ = conv_axis_forward(x, layer)
                worst = max(worst, float(np.max(np.abs(y - naive_conv_maxout(x, layer)))))
        elapsed = time.perf_counter() - t0
        report("convolution oracle", worst <= 1e-12 and elapsed < 10.0,
               f"max_abs={worst:.2e}, {elapsed:.1f}s")


class TestDropoutConsistency:
    """Mean of 1e5 masked passes through one FC maxout layer + linear
    readout vs the p-scaled deterministic pass, within 3 MC sigma per
    output; p = 1 matches exactly."""

    def test_dropout_consistency(self):
        rng = SeededRng(55)
        layer = DenseMaxoutLayer(rng.normal(0.8, (6, 8, 2)), rng.normal(0.8, (8, 2)))
        readout = rng.normal(0.8, (8, 4))
        x = rng.normal(0.8, (1, 6))
        y, _ = dense_maxout_forward(x, layer)        # (1, 8)
        n = 100_000
        ok = True
        for p in (0.3, 0.5, 0.7):
            mask_rng = SeededRng([56, int(p * 10)])
            masks = mask_rng.bernoulli_mask(n * 8, p).reshape(n, 8)
            samples = (y * masks) @ readout          # (n, 4)
            mc_mean = samples.mean(axis=0)
            mc_sigma = samples.std(axis=0, ddof=1) / np.sqrt(n)
            deterministic = y @ dropout_test_scale(readout, p)
            ok &= bool(np.all(np.abs(mc_mean - deterministic[0]) <= 3 * mc_sigma))
        exact = np.array_equal((y * SeededRng(57).bernoulli_mask(8, 1.0)) @ readout,
                               y @ dropout_test_scale(readout, 1.0))
        report("dropout consistency", ok and exact)


class TestMaxNormInvariants:
    """Row norms <= 0.8 + 1e-9 after every step of a 20-epoch run;
    idempotence and direction preservation on 1000 random vectors."""

    def test_max_norm_invariants(self):
        spec = SyntheticSpec(n_classes=2, frames_per_class=200, noise=0.3,
                             width=12, seed=10)
        ds = generate_synthetic(spec)
        tr, dev, ev = split_by_speaker(ds, 0.1, 2, seed=10)
        mspec = parse_structure("C2 K3 S2 F8", pieces=2, width=12)
        model = build_model("tfcmnn", mspec, seed=10)
        from tfcmnn.data import batch_iterator
        ok_norms = True
        for epoch in range(1, 21):
            for idx in batch_iterator(len(tr), 100, seed=10, epoch_index=epoch):
                sgd_step(model, tr.patches[idx], tr.labels[idx], lr=0.1,
                         rng=None, max_norm=0.8)
                for name, arr in named_params(model):
                    axes = _param_row_axes(name, arr)
                    if axes is None:
                        continue
                    norms = np.sqrt(np.sum(arr ** 2, axis=axes))
                    ok_norms &= bool(np.all(norms <= 0.8 + 1e-9))

        rng = SeededRng(11)
        ok_proj = True
        for i in range(1000):
            v = rng.normal(float(rng.uniform(0.1, 3.0, 1)[0]), 6)
            p1 = max_norm_project(v, 0.8)
            p2 = max_norm_project(p1, 0.8)
            ok_proj &= bool(np.array_equal(p1, p2))
            cos = float(v @ p1 / (np.linalg.norm(v) * np.linalg.norm(p1)))
            ok_proj &= abs(cos - 1.0) <= 1e-12
        report("max-norm invariants", ok_norms and ok_proj)


class TestStructureGrammar:
    """Parse/print identity on the 16 reference structure strings; the 7
    dropout-experiment rows build at width 15 with parameter counts
    matching independent tensor enumeration."""

    def test_structure_grammar(self):
        strings = BASELINE_STRUCTURES + DROPOUT_STRUCTURES
        ok = len(strings) == 16
        for text in strings:
            ok &= parse_structure(text, pieces=2, width=15).canonical() == text
        for text in DROPOUT_STRUCTURES:
            spec = parse_structure(text, pieces=2, width=15)
            model = build_model("tfcmnn", spec, seed=1)
            declared, items = param_count(model)
            enumerated = sum(arr.size for _, arr in named_params(model))
            itemized = sum(count for _, _, count in items)
            ok &= declared == enumerated == itemized
        report("structure grammar", ok)


class TestLHCBPipeline:
    """1 s @ 44.1 kHz -> 85 frames of 18 coefficients; Parseval within
    1e-9 relative; normalized features hit the target moments."""

    def test_lhcb_pipeline(self):
        rng = SeededRng(21)
        samples = (0.3 * np.sin(2 * np.pi * 440.0 * np.arange(44100) / 44100)
                   + 0.05 * rng.normal(1.0, 44100))
        clip = AudioClip(samples, 44100)
        fm = extract_feature_matrix(clip, np.zeros(85, dtype=np.int64), "acc")
        ok = fm.frames.shape == (85, 18)

        frame = rng.normal(0.3, 700)
        f = next_pow2(len(frame))
        p = power_spectrum(frame)
        one_sided = p[0] + p[-1] + 2 * p[1:-1].sum()
        time_energy = f * np.sum(frame ** 2)
        ok &= abs(one_sided - time_energy) <= 1e-9 * time_energy

        stats = fit_norm_stats([fm])
        norm = normalize(fm, stats)
        ok &= bool(np.all(np.abs(norm.frames.mean(axis=0)) <= 1e-9))
        ok &= bool(np.all(np.abs(norm.frames.var(axis=0) - 0.5) <= 1e-6))
        report("LHCB pipeline", ok, f"frames={fm.frames.shape[0]}")


class TestDirectionalSyntheticReproduction:
    """Two-branch model vs matched single-branch baselines on the default
    synthetic task, 5 seeds each: convergence, epochs-to-target, and
    final held-out score, under 15 minutes serially."""

    def test_directional_synthetic_reproduction(self):
        t0 = time.perf_counter()
        seeds = [0, 1, 2, 3, 4]
        kinds = ["tfcmnn", "cmnn-time", "cmnn-freq"]
        epochs_to_95 = {k: [] for k in kinds}
        final_eval = {k: [] for k in kinds}
        for seed in seeds:
            ds = generate_synthetic(SyntheticSpec(seed=seed))   # 4 classes, sigma 0.3
            tr, dev, ev = split_by_speaker(ds, dev_fraction=1 / 6, eval_speakers=2,
                                           seed=seed)
            assert (len(tr), len(dev), len(ev)) == (2000, 400, 400)
            for kind in kinds:
                spec = parse_structure("C8 K3 S2 F32", pieces=2, width=15)
                model = build_model(kind, spec, seed=seed)
                cfg = TrainConfig(max_epochs=30, seed=seed)
                rep = train(cfg, model, tr, dev, ev)
                reached = [e.epoch for e in rep.epochs if e.dev_score >= 0.95]
                epochs_to_95[kind].append(reached[0] if reached else 31)
                final_eval[kind].append(rep.final_eval_score)

        tf_hits = sum(e <= 30 for e in epochs_to_95["tfcmnn"])
        ok = tf_hits >= 4
        med = {k: float(np.median(epochs_to_95[k])) for k in kinds}
        ok &= med["tfcmnn"] <= med["cmnn-time"] and med["tfcmnn"] <= med["cmnn-freq"]
        ev_med = {k: float(np.median(final_eval[k])) for k in kinds}
        ok &= ev_med["tfcmnn"] >= max(ev_med["cmnn-time"], ev_med["cmnn-freq"]) - 0.01
        elapsed = time.perf_counter() - t0
        ok &= elapsed < 900.0
        report("directional synthetic reproduction", ok,
               f"hits={tf_hits}/5, median_epochs={med}, median_eval={ev_med}, "
               f"{elapsed:.0f}s")


class TestDeterminism:
    """Identical flags + seed -> byte-identical report CSVs and
    checkpoints; TFCMNN_THREADS = 0 vs > 0 identical."""

    def test_determinism(self, tmp_path, monkeypatch):
        from tfcmnn.cli import main
        data = tmp_path / "d.tfcf"
        assert main(["synth", "--out", str(data), "--frames-per-class", "50",
                     "--width", "12", "--seed", "1"]) == 0
        runs = [("r1", "0"), ("r2", "0"), ("r3", "4")]
        blobs = []
        for name, threads in runs:
            monkeypatch.setenv("TFCMNN_THREADS", threads)
            out = tmp_path / name
            assert main(["train", "--data", str(data), "--out", str(out),
                         "--structure", "C4 K3 S2 F16", "--epochs", "3",
                         "--dev-fraction", "0.2", "--eval-speakers", "2",
                         "--seed", "5", "--no-timing"]) == 0
            blobs.append(((out / "report.csv").read_bytes(),
                          (out / "model.tfcm").read_bytes()))
        ok = blobs[0] == blobs[1] == blobs[2]
        report("determinism", ok,
               f"csv_crc={zlib.crc32(blobs[0][0]):#010x}")


class TestTrainingSchedule:
    """A scripted sequence with five regressions: exactly 5 halvings,
    final lr = 0.1/32, and a stop."""

    def test_training_schedule(self):
        sched = LRSchedule(0.1)
        scores = [0.50, 0.60, 0.55, 0.65, 0.60, 0.70, 0.65, 0.75, 0.70, 0.80, 0.75]
        stops = [sched.update(s) for s in scores]
        ok = stops == [False] * 10 + [True]
        ok &= sched.halvings_used == 5
        ok &= sched.current_lr == pytest.approx(0.1 / 32)
        report("training schedule", ok, f"lr={sched.current_lr}")
