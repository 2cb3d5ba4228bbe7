"""End-to-end acceptance checks. Each test reports one PASS/FAIL line (see conftest)."""

import dataclasses
import time

import numpy as np
import pytest

from text2face import autodiff as ad
from text2face.autodiff import Tensor, grad_check
from text2face.captions import AttributeVector, parse_caption, random_attributes, render_caption
from text2face.checkpoint import tensor_digest
from text2face.data import MANIFEST_NAME, load_dataset, read_manifest, synthesize_dataset, write_manifest
from text2face.encoder import encode
from text2face.generator import demodulated_weights, gen_init, generate, mapping_forward
from text2face.metrics import FidStats, fid, fid_from_stats, fsd, fss, matrix_sqrt_psd
from text2face.perceptual import experiment_layerset, extractor_init, perceptual_loss
from text2face.text2latent import LATENT_DIM, LatentCode, t2l_forward, t2l_init
from text2face.training import (Checkpoint, TrainConfig, evaluate, run_experiment_matrix, train,
                                untrained_checkpoint)

from gradcases import OP_CASES, check_op

REFERENCE_MAN = ("The man has a chubby face. He sports a goatee with sideburns. His hair is black "
              "in color. He has narrow eyes and a slightly open mouth. The man looks young.")

ORACLE_N = 64
ORACLE_RES = 16
ORACLE_EPOCHS = 200


def oracle_config(experiment, seed=0):
    return TrainConfig(experiment=experiment, epochs=ORACLE_EPOCHS, batch_size=16, lr=1e-4, seed=seed,
                       resolution=ORACLE_RES)


@pytest.fixture(scope="module")
def oracle(tmp_path_factory):
    start = time.perf_counter()
    g = gen_init(0, ORACLE_RES)
    fe = extractor_init(0)
    data = synthesize_dataset(ORACLE_N, 0, g, tmp_path_factory.mktemp("oracle"))
    train_set, held = data.split()
    w_run = train(oracle_config(5), train_set, None, g, fe)
    elapsed = time.perf_counter() - start
    return dict(g=g, fe=fe, train=train_set, held=held, w_run=w_run, train_seconds=elapsed,
                z_runs={}, w_runs={0: w_run})


def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "finite-difference gradient suite") as notes:
        start = time.perf_counter()
        worst = max(check_op(name) for name in sorted(OP_CASES))
        notes.append(f"{len(OP_CASES)} ops x 10 seeds, worst rel err {worst:.2e}")

        g = gen_init(0, 8)
        fe = extractor_init(0)
        space, layers = experiment_layerset(1)
        params = t2l_init(0, target=space)
        emb = np.stack([encode(REFERENCE_MAN).values, encode("The woman is smiling.").values])
        real = Tensor(np.random.default_rng(1).uniform(-1, 1, size=(2, 3, 8, 8)))

        def loss_from_output_weight(t):
            saved = params.weights[-1]
            params.weights[-1] = t
            try:
                return perceptual_loss(fe, generate(g, t2l_forward(params, emb)), real, layers)
            finally:
                params.weights[-1] = saved

        rng = np.random.default_rng(2)
        idx = list(rng.choice(params.weights[-1].size, 48, replace=False))
        report = grad_check(loss_from_output_weight, params.weights[-1].data, indices=idx)
        assert report.passed and len(report.skipped) <= len(idx) // 4, report
        notes.append(f"pipeline w.r.t. text-to-latent weights {report.max_rel_error:.2e} "
                     f"({len(report.skipped)} kink samples skipped)")

        z0 = rng.normal(size=(1, LATENT_DIM))
        report = grad_check(lambda t: perceptual_loss(fe, generate(g, LatentCode(t, "Z")), Tensor(real.data[:1]), layers),
                            z0, indices=list(range(0, LATENT_DIM, 8)))
        assert report.passed and len(report.skipped) <= 16, report
        notes.append(f"pipeline w.r.t. z {report.max_rel_error:.2e} ({len(report.skipped)} skipped)")
        elapsed = time.perf_counter() - start
        assert elapsed < 60, f"gradient suite took {elapsed:.1f}s"


def test_criterion_2_fid_oracles(criterion):
    with criterion(2, "FID oracles") as notes:
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 5))
        assert fid(x, x) < 1e-6

        one = fid_from_stats(FidStats(np.array([0.0]), np.eye(1)), FidStats(np.array([1.0]), np.eye(1)))
        assert abs(one - 1.0) < 1e-9
        ident = fid_from_stats(FidStats(np.zeros(2), np.eye(2)), FidStats(np.array([3.0, 4.0]), np.eye(2)))
        assert abs(ident - 25.0) < 1e-9

        for seed in range(5):
            r = np.random.default_rng(seed)
            a = r.normal(size=(30, 2)) * [1.0, 2.0]
            b = r.normal(size=(25, 2)) + [1.0, 0.0]
            d = fid(a, b)
            assert abs(d - fid(b, a)) < 1e-6
            th = r.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            assert abs(d - fid(a @ rot.T, b @ rot.T)) < 1e-6

        worst = 0.0
        for seed in range(20):
            r = np.random.default_rng(seed)
            m = r.normal(size=(6, 6))
            spd = m @ m.T + 0.1 * np.eye(6)
            s = matrix_sqrt_psd(spd)
            worst = max(worst, np.linalg.norm(s @ s - spd) / np.linalg.norm(spd))
        assert worst < 1e-8
        notes.append(f"sqrt reconstruction worst {worst:.1e}")


def test_criterion_3_fsd_fss_oracles(criterion):
    with criterion(3, "FSD/FSS oracles"):
        v = np.random.default_rng(0).normal(size=16)
        assert fsd([(v, v)]) == 0.0
        assert abs(100 * fss([(v, v)]) - 100.0) < 1e-12
        assert abs(fsd([((0, 0), (3, 4)), ((0, 0), (0, 0))]) - 2.5) < 1e-12
        assert abs(fsd([((1, 0), (0, 1))]) - np.sqrt(2)) < 1e-12
        assert abs(fss([((1, 0), (1, 1))]) - 1 / np.sqrt(2)) < 1e-12
        assert abs(fss([(v, -v)]) + 1.0) < 1e-12


def test_criterion_4_demodulation(criterion):
    with criterion(4, "demodulation invariants") as notes:
        g = gen_init(0, 16)
        rng = np.random.default_rng(0)
        w = mapping_forward(g, LatentCode(Tensor(rng.normal(size=(8, LATENT_DIM))), "Z")).values
        worst_norm = worst_scale = 0.0
        for name in [k[:-len("/weight")] for k in g.tensors if k.endswith("conv0/weight") or
                     k.endswith("conv1/weight")]:
            style = ad.add(ad.matmul(w, g[f"{name}/affine/weight"]), g[f"{name}/affine/bias"]).data
            kernel = g[f"{name}/weight"].data
            out = demodulated_weights(kernel, style).data
            worst_norm = max(worst_norm, np.max(np.abs(np.sum(out ** 2, axis=(2, 3, 4)) - 1.0)))
            for c in (0.1, 0.5, 3.0, 100.0):
                scaled = demodulated_weights(kernel, c * style).data
                worst_scale = max(worst_scale, np.max(np.abs(scaled - out)) / np.max(np.abs(out)))
        assert worst_norm < 1e-6
        assert worst_scale < 1e-6
        notes.append(f"norm dev {worst_norm:.1e}, scale rel err {worst_scale:.1e}")


def test_criterion_5_caption_round_trip(criterion):
    with criterion(5, "caption round trip"):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            a = random_attributes(rng)
            assert parse_caption(render_caption(a).text) == a
        expected = AttributeVector.from_names(["Male", "Chubby", "Goatee", "Sideburns", "Black_Hair",
                                               "Narrow_Eyes", "Mouth_Slightly_Open", "Young"])
        assert parse_caption(REFERENCE_MAN) == expected


def test_criterion_6_closed_loop_learning(criterion, oracle):
    with criterion(6, "closed-loop learning on the oracle dataset") as notes:
        h = oracle["w_run"].history
        ratio = h[-1] / h[0]
        notes.append(f"loss {h[0]:.4f} -> {h[-1]:.4f} (ratio {ratio:.3f})")
        g, fe = oracle["g"], oracle["fe"]
        trained = evaluate(oracle["w_run"].checkpoint, oracle["held"], g, fe).metrics
        untrained = evaluate(untrained_checkpoint(oracle_config(5), g), oracle["held"], g, fe).metrics
        notes.append(f"held-out FSS {trained['fss']:.3f}% vs {untrained['fss']:.3f}%, "
                     f"FSD {trained['fsd']:.4f} vs {untrained['fsd']:.4f}")
        notes.append(f"training {oracle['train_seconds']:.0f}s")
        assert ratio <= 0.5
        assert trained["fss"] > untrained["fss"]
        assert trained["fsd"] < untrained["fsd"]
        assert oracle["train_seconds"] < 600


def test_loss_moving_average_settles(oracle):
    h = np.array(oracle["w_run"].history)
    avg = np.convolve(h, np.ones(50) / 50, mode="valid")
    tail = avg[-(len(h) - 50):][-150:]
    assert np.all(np.isfinite(h))
    assert np.all(np.diff(tail) <= 0)


def test_criterion_7_w_beats_z(criterion, oracle):
    with criterion(7, "W-space final loss <= Z-space final loss") as notes:
        g, fe, data = oracle["g"], oracle["fe"], oracle["train"]

        def final(exp, seed):
            runs = oracle["w_runs"] if exp == 5 else oracle["z_runs"]
            if seed not in runs:
                runs[seed] = train(oracle_config(exp, seed), data, None, g, fe)
            return runs[seed].history[-1]

        w0, z0 = final(5, 0), final(2, 0)
        notes.append(f"seed 0: W {w0:.4f} vs Z {z0:.4f}")
        if w0 > z0:
            wins = int(w0 <= z0)
            for seed in (1, 2):
                w, z = final(5, seed), final(2, seed)
                notes.append(f"seed {seed}: W {w:.4f} vs Z {z:.4f}")
                wins += w <= z
            assert wins >= 2, "; ".join(notes)


def test_criterion_8_determinism_and_persistence(criterion, tmp_path):
    with criterion(8, "determinism, persistence and the experiment matrix"):
        g = gen_init(0, 8)
        fe = extractor_init(0)
        data = synthesize_dataset(10, 1, g, tmp_path / "ds")
        cfg = TrainConfig(experiment=5, epochs=3, resolution=8, hidden=(32, 32), batch_size=4, seed=3)
        train(cfg, data, tmp_path / "a.t2fl", g, fe)
        train(cfg, data, tmp_path / "b.t2fl", g, fe)
        assert (tmp_path / "a.t2fl").read_bytes() == (tmp_path / "b.t2fl").read_bytes()

        Checkpoint.load(tmp_path / "a.t2fl").save(tmp_path / "c.t2fl")
        assert (tmp_path / "a.t2fl").read_bytes() == (tmp_path / "c.t2fl").read_bytes()

        records = read_manifest(tmp_path / "ds" / MANIFEST_NAME)
        write_manifest(tmp_path / "copy.tsv", records)
        assert read_manifest(tmp_path / "copy.tsv") == records
        assert (tmp_path / "copy.tsv").read_bytes() == (tmp_path / "ds" / MANIFEST_NAME).read_bytes()
        assert np.array_equal(load_dataset(tmp_path / "ds" / MANIFEST_NAME).images, data.images)

        rows = run_experiment_matrix(dataclasses.replace(cfg, epochs=1), data)
        assert [r["experiment"] for r in rows] == ["01", "02", "03", "04", "05", "06"]
        assert [r["space"] for r in rows] == ["Z", "Z", "Z", "W", "W", "W"]
        assert [r["layers"] for r in rows] == [",".join(experiment_layerset(i)[1].names) for i in range(1, 7)]
        assert [r["hypercolumn"] for r in rows] == ["false", "false", "true", "false", "false", "false"]
        assert all(np.isfinite(r[k]) for r in rows for k in ("final_loss", "fsd", "fss_percent", "fid"))
