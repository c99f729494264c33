"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed together at the end
of the pytest run. Criteria 5-7 train real networks and take tens of
minutes on one CPU; their settings come from the shipped configs.
"""

import contextlib
import dataclasses
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_LINES, MNIST_DIR, REPO
from decov import config as C
from decov import datasets as ds
from decov import experiments as E
from decov.decov import decov_backward, decov_forward
from decov.gradcheck import check_decov, check_layer, numerical_gradient, relative_error
from decov import layers as L
from decov.tensor import Rng

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(n, text):
    details = []
    try:
        yield details
    except BaseException:
        ACCEPTANCE_LINES.append(f"FAIL criterion {n}: {text} {'; '.join(details)}".rstrip())
        raise
    ACCEPTANCE_LINES.append(f"PASS criterion {n}: {text} {'; '.join(details)}".rstrip())


def shipped(name, tmp_path, **overrides):
    cfg = C.load(REPO / "configs" / f"{name}.yaml")
    cfg.output_dir = str(tmp_path)
    cfg.data = dataclasses.replace(cfg.data, data_dir=str(MNIST_DIR))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@pytest.fixture(autouse=True)
def _need_mnist(request):
    if "mnist" in request.fixturenames or request.node.get_closest_marker("needs_mnist"):
        if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
            pytest.skip("MNIST subset missing")


# 1 ---------------------------------------------------------------------------

def test_c1_decov_gradient_matches_finite_differences():
    with criterion(1, "DeCov backward vs central differences, 200 batches, rel err <= 1e-5") as info:
        rng = Rng(2024)
        errs = []
        for _ in range(200):
            n, d = int(rng.integers(8)) + 1, int(rng.integers(8)) + 1
            errs.append(check_decov(rng.normal((n, d))))
        info.append(f"worst {max(errs):.2e}")
        assert max(errs) <= 1e-5


# 2 ---------------------------------------------------------------------------

def gaussian_batch(n, d, seed):
    return Rng(seed).normal((n, d))


shapes = dict(n=st.integers(1, 8), d=st.integers(1, 8), seed=st.integers(0, 2**32))


@settings(max_examples=1000, deadline=None)
@given(**shapes)
def prop_nonnegative(n, d, seed):
    assert decov_forward(gaussian_batch(n, d, seed))[0] >= 0.0


@settings(max_examples=1000, deadline=None)
@given(**shapes, shift=st.floats(-10, 10))
def prop_mean_shift(n, d, seed, shift):
    H = gaussian_batch(n, d, seed)
    offsets = Rng(seed + 1).uniform((d,), -abs(shift), abs(shift) + 1e-300)
    a, b = decov_forward(H)[0], decov_forward(H + offsets)[0]
    assert abs(a - b) <= 1e-10 * max(1.0, a)


@settings(max_examples=1000, deadline=None)
@given(**shapes)
def prop_permutation(n, d, seed):
    H = gaussian_batch(n, d, seed)
    perm = Rng(seed + 2).permutation(d)
    assert decov_forward(H)[0] == decov_forward(H[:, perm])[0]


@settings(max_examples=1000, deadline=None)
@given(**shapes, alpha=st.floats(0.1, 10.0))
def prop_scale(n, d, seed, alpha):
    H = gaussian_batch(n, d, seed)
    base, scaled = decov_forward(H)[0], decov_forward(alpha * H)[0]
    assert abs(scaled - alpha ** 4 * base) <= 1e-9 * alpha ** 4 * base
    g, gs = decov_backward(H), decov_backward(alpha * H)
    assert np.linalg.norm(gs - alpha ** 3 * g) <= 1e-9 * alpha ** 3 * np.linalg.norm(g)


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 8), seed=st.integers(0, 2**32))
def prop_zero_cases(n, d, seed):
    H = gaussian_batch(n, 1, seed)
    assert decov_forward(H)[0] == 0.0
    row = Rng(seed).normal((1, d))
    assert decov_forward(np.repeat(row, n, axis=0))[0] == 0.0


def test_c2_decov_invariants():
    with criterion(2, "non-negativity, shift, permutation, scale laws, zero cases; 1000 instances each"), \
            warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        prop_nonnegative()
        prop_mean_shift()
        prop_permutation()
        prop_scale()
        prop_zero_cases()


# 3 ---------------------------------------------------------------------------

def test_c3_conditional_entropies():
    with criterion(3, "H(l|r)=2.0868, H(r|l)=1.9560 within 1e-3") as info:
        h_l_r, h_r_l = ds.conditional_entropies(ds.biased_pair_distribution())
        # oracle: brute force over the 100-cell joint written out cell by cell
        joint = [[0.1 * (0.0 if (l <= 4 and r <= 4) else 0.2 if l <= 4 else 0.1) for r in range(10)]
                 for l in range(10)]
        p_r = [sum(joint[l][r] for l in range(10)) for r in range(10)]
        p_l = [sum(joint[l]) for l in range(10)]
        ref_lr = -sum(joint[l][r] * math.log(joint[l][r] / p_r[r])
                      for l in range(10) for r in range(10) if joint[l][r])
        ref_rl = -sum(joint[l][r] * math.log(joint[l][r] / p_l[l])
                      for l in range(10) for r in range(10) if joint[l][r])
        info.append(f"got {h_l_r:.4f} / {h_r_l:.4f}")
        assert abs(h_l_r - ref_lr) < 1e-12 and abs(h_r_l - ref_rl) < 1e-12
        assert abs(h_l_r - 2.0868) <= 1e-3
        assert abs(h_r_l - 1.9560) <= 1e-3


# 4 ---------------------------------------------------------------------------

@pytest.mark.needs_mnist
def test_c4_generator_fidelity(mnist):
    train, test = mnist
    with criterion(4, "1e5 train pairs: no forbidden pairs, joint within 0.005; test forbidden rate 0.25 +- 0.01") as info:
        n, chunk = 100_000, 10_000
        left, right = [], []
        for r in Rng(77).spawn(n // chunk):
            p = ds.generate_pairs(train, ds.biased_pair_distribution(), chunk, r)
            left.append(p.left)
            right.append(p.right)
        left, right = np.concatenate(left), np.concatenate(right)
        forbidden = int(np.sum((left <= 4) & (right <= 4)))
        dev = np.abs(ds.empirical_joint(left, right) - ds.biased_pair_distribution().joint()).max()
        tl, tr = [], []
        for r in Rng(78).spawn(n // chunk):
            p = ds.generate_pairs(test, ds.uniform_pair_distribution(), chunk, r)
            tl.append(p.left)
            tr.append(p.right)
        tl, tr = np.concatenate(tl), np.concatenate(tr)
        rate = float(np.mean((tl <= 4) & (tr <= 4)))
        info.append(f"forbidden {forbidden}, max joint dev {dev:.4f}, test rate {rate:.4f}")
        assert forbidden == 0
        assert dev <= 0.005
        assert abs(rate - 0.25) <= 0.01


# 5 and 7 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def pairs_result(tmp_path_factory):
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST subset missing")
    cfg = C.load(REPO / "configs" / "pairs-mnist.yaml")
    keep = {"baseline", "dropout", "decov"}
    cfg.cells = [c for c in cfg.cells if c.name in keep]
    cfg.weight_decay_grid = []
    cfg.output_dir = str(tmp_path_factory.mktemp("pairs"))
    cfg.data = dataclasses.replace(cfg.data, data_dir=str(MNIST_DIR))
    assert cfg.data.train_pairs >= 10_000 and len(cfg.seeds) >= 3
    return E.run_pairs_experiment(cfg)


def test_c5_side_by_side_trend(pairs_result):
    with criterion(5, "median right gap DeCov < baseline; baseline right gap > left gap") as info:
        base = pairs_result.median_gap("baseline", "right")
        dec = pairs_result.median_gap("decov", "right")
        left = pairs_result.median_gap("baseline", "left")
        info.append(f"right gap baseline {base:.4f}, DeCov {dec:.4f}; baseline left gap {left:.4f}")
        assert dec < base
        assert base > left


def test_c7_covariance_diagnostic(pairs_result):
    with criterion(7, "median offdiag cov norm: DeCov < baseline and Dropout < baseline") as info:
        base = pairs_result.median_cov_norm("baseline")
        dec = pairs_result.median_cov_norm("decov")
        drop = pairs_result.median_cov_norm("dropout")
        info.append(f"baseline {base:.2f}, DeCov {dec:.2f}, Dropout {drop:.2f}")
        assert dec < base
        assert drop < base


# 6 ---------------------------------------------------------------------------

@pytest.mark.needs_mnist
def test_c6_autoencoder_ordering(tmp_path):
    cfg = shipped("autoencoder-mnist", tmp_path)
    assert cfg.model.init == "gaussian" and cfg.model.init_std == 0.001 and len(cfg.seeds) >= 3
    with criterion(6, "median test MSE DeCov < baseline < Dropout") as info:
        res = E.run_autoencoder_experiment(cfg)
        base = res.median_test_mse("baseline")
        dec = res.median_test_mse("decov")
        drop = res.median_test_mse("dropout")
        info.append(f"DeCov {dec:.3f}, baseline {base:.3f}, Dropout {drop:.3f}")
        assert dec < base < drop


# 8 ---------------------------------------------------------------------------

def test_c8_layer_gradients_and_kernels():
    with criterion(8, "every layer backward vs finite differences <= 1e-5; kernels vs loops <= 1e-10") as info:
        worst_fd, worst_loop = 0.0, 0.0
        for seed in range(10):
            r = Rng(seed)
            cases = [
                L.FullyConnected(5, 4, r), L.ReLU(), L.Dropout(0.5), L.Flatten(),
                L.Conv2D(2, 3, 3, r, stride=1, pad=1), L.Conv2D(2, 2, 3, r, stride=2, pad=0),
                L.MaxPool2D(2), L.MaxPool2D(3, 2),
            ]
            shapes = [(3, 5), (4, 6), (4, 6), (2, 3, 3, 2), (2, 5, 5, 2), (2, 7, 7, 2),
                      (2, 4, 4, 3), (1, 7, 7, 2)]
            for layer, shape in zip(cases, shapes):
                if isinstance(layer, L.MaxPool2D):
                    x = r.permutation(int(np.prod(shape))).reshape(shape) * 0.1
                else:
                    x = r.normal(shape)
                    if isinstance(layer, L.ReLU):
                        x = np.where(np.abs(x) < 1e-3, 0.5, x)
                worst_fd = max(worst_fd, max(check_layer(layer, x.astype(float), r).values()))
            logits, labels = r.normal((5, 4)), r.integers(4, size=5)
            _, g = L.softmax_xent(logits, labels)
            worst_fd = max(worst_fd, relative_error(
                g, numerical_gradient(lambda: L.softmax_xent(logits, labels)[0], logits)))
            pred, target = r.normal((3, 5)), r.normal((3, 5))
            _, g = L.mse_loss(pred, target)
            worst_fd = max(worst_fd, relative_error(
                g, numerical_gradient(lambda: L.mse_loss(pred, target)[0], pred)))

            from test_layers import conv_loops, pool_loops
            x, W, b = r.normal((2, 6, 6, 2)), r.normal((3, 2, 3, 3)), r.normal((3,))
            for stride, pad in ((1, 0), (1, 1), (2, 1)):
                out, _ = L.conv2d_forward(x, W, b, stride, pad)
                worst_loop = max(worst_loop, float(np.abs(out - conv_loops(x, W, b, stride, pad)).max()))
            out, _ = L.maxpool2d_forward(x, 2, 2)
            worst_loop = max(worst_loop, float(np.abs(out - pool_loops(x, 2, 2)[0]).max()))
            xf, Wf, bf = r.normal((3, 4)), r.normal((4, 2)), r.normal((2,))
            ref = np.array([[bf[j] + sum(xf[i, k] * Wf[k, j] for k in range(4)) for j in range(2)]
                            for i in range(3)])
            worst_loop = max(worst_loop, float(np.abs(L.fc_forward(xf, Wf, bf) - ref).max()))
        info.append(f"worst FD {worst_fd:.2e}, worst loop {worst_loop:.2e}")
        assert worst_fd <= 1e-5
        assert worst_loop <= 1e-10


# 9 ---------------------------------------------------------------------------

@pytest.mark.needs_mnist
def test_c9_determinism(tmp_path):
    with criterion(9, "identical config and seed give byte-identical metrics CSVs") as info:
        def run(out):
            cfg = shipped("pairs-mnist", out, seeds=[5], weight_decay_grid=[])
            cfg.data = dataclasses.replace(cfg.data, train_pairs=600, val_pairs=100, test_pairs=200)
            cfg.optim = dataclasses.replace(cfg.optim, max_epochs=1)
            cfg.train_eval_size = 200
            E.run_experiment(cfg)
            E.emit_report(out)
            return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*.csv"))}

        a, b = run(tmp_path / "a"), run(tmp_path / "b")
        info.append(f"{len(a)} CSV files compared")
        assert a.keys() == b.keys() and len(a) >= 5
        assert all(a[k] == b[k] for k in a)
