import numpy as np
import pytest

import facetrack as ft


def test_contract_matches_einsum():
    core = ft.gen_rig_tensor(7)
    rng = np.random.default_rng(3)
    w_id = ft.mean_identity(core.identities) + 0.1 * rng.standard_normal(core.identities)
    w_exp = rng.random(core.expressions)
    v = core.contract(w_id, w_exp)
    assert v.shape == (core.vertices, 3)

    # Rebuild C from one-hot contractions and contract with einsum.
    c = np.zeros((core.vertices, 3, core.identities, core.expressions))
    for i in range(core.identities):
        for j in range(core.expressions):
            c[:, :, i, j] = core.contract(np.eye(core.identities)[i], np.eye(core.expressions)[j])
    ref = np.einsum("vcij,i,j->vc", c, w_id, w_exp)
    assert np.allclose(v, ref, rtol=1e-10, atol=1e-12)


def test_recover_depth_reduces_noise():
    rng = np.random.default_rng(5)
    truth = np.full((24, 24), 1.5)
    raw = truth + 0.004 * rng.standard_normal(truth.shape)
    prior = truth + 0.001
    guide = np.full(truth.shape, 128, dtype=np.uint8)
    x, flagged = ft.recover_depth(raw, prior, guide)
    assert not flagged
    assert x.shape == truth.shape
    assert ft.mae_mm(x, truth) < ft.mae_mm(raw, truth)


def test_fixed_point_and_zero_iterations():
    z = np.full((8, 8), 2.0)
    guide = np.zeros((8, 8), dtype=np.uint8)
    x, _ = ft.recover_depth(z, z, guide)
    assert np.allclose(x, 2.0, atol=1e-12)
    noisy = z + np.linspace(0, 0.01, 64).reshape(8, 8)
    x0, _ = ft.recover_depth(noisy, z, guide, {"filter.iterations": 0})
    assert np.array_equal(x0, noisy)


def test_bad_input_raises():
    with pytest.raises(ft.FacetrackError, match="invalid_input"):
        ft.recover_depth(np.ones((4, 4)), np.ones((4, 4)), np.zeros((4, 4), np.uint8), {"filter.sigma_s": -1})


def test_synth_train_track_depth(tmp_path):
    seq = tmp_path / "seq"
    cfg = {"sequence.frames": 3, "sequence.distance": 2.0, "sequence.seed": 2}
    s = ft.synth(cfg, seq)
    assert s["frames"] == 3
    assert s["sigma_mm"] == pytest.approx(5.7, abs=1e-9)
    color = ft.read_color(seq / "frame_00000.ppm")
    depth = ft.read_depth_pgm16(seq / "frame_00000.pgm16")
    assert color.shape[:2] == depth.shape and color.shape[2] == 3

    model = tmp_path / "model.btrm"
    train_cfg = {
        "training.subjects": 4,
        "training.samples_per_subject": 3,
        "regressor.stages": 2,
        "regressor.trees": 2,
        "regressor.depth": 3,
        "perturb.pairs_per_sample": 2,
        "regressor.min_pairs": 10,
    }
    report = ft.train_synthetic(train_cfg, model)
    assert report["pairs"] == 24
    assert all(b <= a for a, b in zip(report["residuals"], report["residuals"][1:]))

    out = tmp_path / "out"
    run = {"paths.sequence": str(seq), "paths.model": str(model), "paths.output": str(out)}
    result = ft.track(run)
    assert len(result["frames"]) == 3 and not result["partial"]
    assert result["frames"][0]["landmarks"].shape[1] == 2
    again = ft.read_track(out / "track.bin")
    assert again["frames"][2]["rmse"] == result["frames"][2]["rmse"]
    frames, mean_rmse, _ = ft.evaluate(seq, out / "track.bin")
    assert frames == 3 and mean_rmse == pytest.approx(result["mean_rmse"])

    rep = ft.depth(run, out / "track.bin")
    assert rep["frames"] == 3
    assert rep["mae_recovered"] < rep["mae_raw"]
