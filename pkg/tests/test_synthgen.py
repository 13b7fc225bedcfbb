"""Data generators: formula oracles, label-rate calibration, mask
assignment, CSV round-trips."""

import math

import numpy as np
import pytest

from lexsel import synthgen as sg


def hand_branch_values(x):
    """Independent scalar re-implementation of the three branches."""
    fa = math.exp(min(max(x[0] * x[1], -30), 30))
    fb = math.exp(min(max(sum(v * v for v in x[2:6]) - 4.0, -30), 30))
    ec = (-10.0 * math.sin(0.2 * x[6]) + abs(x[7]) + x[8]
          + math.exp(-x[9]) - 2.4)
    fc = math.exp(min(max(ec, -30), 30))
    return fa, fb, fc


def test_branch_functions_match_scalar_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 11))
    fa = sg.branch_a(x)
    fb = sg.branch_b(x)
    fc = sg.branch_c(x)
    for i in range(50):
        ea, eb, ec = hand_branch_values(x[i])
        np.testing.assert_allclose(fa[i], ea, rtol=1e-12)
        np.testing.assert_allclose(fb[i], eb, rtol=1e-12)
        np.testing.assert_allclose(fc[i], ec, rtol=1e-12)


def test_exponent_clamp_caps_extreme_inputs():
    x = np.full((1, 11), 10.0)
    np.testing.assert_allclose(sg.branch_b(x), [math.exp(30.0)])
    x2 = np.zeros((1, 11))
    x2[0, 0] = 40.0
    x2[0, 1] = -40.0  # raw exponent -1600
    np.testing.assert_allclose(sg.branch_a(x2), [math.exp(-30.0)])


def test_switch_uses_sign_of_last_feature():
    x = np.random.default_rng(1).standard_normal((200, 11))
    f = sg.switch_values("S1", x)
    lo = x[:, 10] < 0
    np.testing.assert_allclose(f[lo], sg.branch_a(x[lo]))
    np.testing.assert_allclose(f[~lo], sg.branch_b(x[~lo]))
    f3 = sg.switch_values("S3", x)
    np.testing.assert_allclose(f3[lo], sg.branch_b(x[lo]))
    np.testing.assert_allclose(f3[~lo], sg.branch_c(x[~lo]))


def test_ground_truth_masks_per_branch():
    x = np.zeros((2, 11))
    x[0, 10] = -0.5  # first branch
    x[1, 10] = 0.5   # second branch
    z1 = sg.ground_truth_mask("S1", x)
    np.testing.assert_array_equal(z1[0], [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1])
    np.testing.assert_array_equal(z1[1], [0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1])
    z2 = sg.ground_truth_mask("S2", x)
    np.testing.assert_array_equal(z2[0], [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1])
    np.testing.assert_array_equal(z2[1], [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    z3 = sg.ground_truth_mask("S3", x)
    np.testing.assert_array_equal(z3[0], [0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1])
    np.testing.assert_array_equal(z3[1], [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1])


def test_boundary_row_goes_to_second_branch():
    x = np.zeros((1, 11))  # x11 == 0 exactly
    z = sg.ground_truth_mask("S1", x)
    np.testing.assert_array_equal(z[0, 2:6], 1)


def test_feature_moments():
    ds = sg.gen_synthetic("S1", n_train=20000, n_test=100, seed=3)
    x = ds.x_train
    assert np.abs(x.mean(axis=0)).max() < 4.0 / np.sqrt(len(x))
    assert np.abs(x.std(axis=0) - 1.0).max() < 0.05


def test_label_rate_matches_posterior_in_bins():
    # empirical P(y=1) inside posterior bins must sit within 4 SE
    ds = sg.gen_synthetic("S2", n_train=40000, n_test=100, seed=5)
    p = sg.posterior_y1("S2", ds.x_train)
    y = ds.y_train
    for lo in (0.0, 0.2, 0.4, 0.6, 0.8):
        sel = (p >= lo) & (p < lo + 0.2)
        if sel.sum() < 200:
            continue
        mean_p = p[sel].mean()
        emp = y[sel].mean()
        se = np.sqrt(mean_p * (1 - mean_p) / sel.sum())
        assert abs(emp - mean_p) < 4 * se + 1e-9, (lo, emp, mean_p)


def test_split_sizes_and_carveout():
    ds = sg.gen_synthetic("S1", n_train=1000, n_test=500, seed=0,
                          val_fraction=0.2)
    assert ds.x_train.shape == (800, 11)
    assert ds.x_val.shape == (200, 11)
    assert ds.x_test.shape == (500, 11)
    assert ds.y_train.shape == (800,)
    assert ds.z_test.shape == (500, 11)


def test_determinism_and_seed_sensitivity():
    a = sg.gen_synthetic("S3", n_train=500, n_test=100, seed=9)
    b = sg.gen_synthetic("S3", n_train=500, n_test=100, seed=9)
    c = sg.gen_synthetic("S3", n_train=500, n_test=100, seed=10)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    np.testing.assert_array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.x_train, c.x_train)


def test_csv_round_trip_bit_exact(tmp_path):
    ds = sg.gen_synthetic("S1", n_train=300, n_test=120, seed=2)
    path = tmp_path / "s1.csv"
    sg.save_csv(ds, path)
    back = sg.load_csv(path)
    for split in ("train", "val", "test"):
        x0, y0, z0 = ds.split(split)
        x1, y1, z1 = back.split(split)
        assert x0.tobytes() == x1.tobytes(), f"{split} x not bit-exact"
        np.testing.assert_array_equal(y0, y1)
        np.testing.assert_array_equal(z0, z1)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    assert header == sg.HEADER
    assert header[0] == "x1" and header[11] == "y" and header[-1] == "split"


def test_load_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        sg.load_csv(path)


def test_unknown_dataset_name_rejected():
    with pytest.raises(ValueError):
        sg.gen_synthetic("S9", n_train=10, n_test=10, seed=0)
    with pytest.raises(ValueError):
        sg.ground_truth_mask("bogus", np.zeros((1, 11)))
