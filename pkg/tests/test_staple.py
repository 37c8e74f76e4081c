"""EM consensus tests, anchored by a straight-line reference implementation.

The oracle below re-implements the E/M updates with explicit Python loops
and shares no code with the library version.
"""

import numpy as np
import pytest

from diagfuse import staple
from diagfuse.errors import DataError


def oracle_em(annotations, prior, tol=1e-6, max_iter=100):
    """Loop-based reference EM: returns (posterior, p, q, converged)."""
    votes = np.asarray(annotations) > 0
    n = votes.shape[0]
    flat = votes.reshape(n, -1)
    npix = flat.shape[1]
    p = [0.99999] * n
    q = [0.99999] * n
    post = [0.0] * npix
    converged = False
    for _ in range(max_iter):
        for j in range(npix):
            a = prior
            b = 1.0 - prior
            for i in range(n):
                if flat[i, j]:
                    a *= p[i]
                    b *= 1.0 - q[i]
                else:
                    a *= 1.0 - p[i]
                    b *= q[i]
            post[j] = a / (a + b) if (a + b) > 0 else prior
        wsum = sum(post)
        vsum = sum(1.0 - x for x in post)
        p_new = []
        q_new = []
        for i in range(n):
            num_p = sum(post[j] for j in range(npix) if flat[i, j])
            num_q = sum(1.0 - post[j] for j in range(npix) if not flat[i, j])
            p_new.append(min(max(num_p / max(wsum, 1e-300), 1e-6), 1 - 1e-6))
            q_new.append(min(max(num_q / max(vsum, 1e-300), 1e-6), 1 - 1e-6))
        delta = max(
            max(abs(a - b) for a, b in zip(p_new, p)),
            max(abs(a - b) for a, b in zip(q_new, q)),
        )
        p, q = p_new, q_new
        if delta < tol:
            converged = True
            break
    return np.array(post).reshape(votes.shape[1:]), np.array(p), np.array(q), converged


class TestStapleBasics:
    def test_perfect_raters_recover_truth(self):
        truth = np.zeros((4, 4), dtype=np.uint8)
        truth[1:3, 1:3] = 1
        ann = np.stack([truth, truth])
        res = staple.staple_fuse(ann, prior=float(truth.mean()))
        np.testing.assert_array_equal(res.posterior > 0.5, truth > 0)
        np.testing.assert_allclose(res.sensitivities, 1 - 1e-6)
        np.testing.assert_allclose(res.specificities, 1 - 1e-6)
        assert res.converged

    def test_single_rater_fixed_point(self):
        rng = np.random.default_rng(0)
        ann = (rng.uniform(size=(1, 5, 5)) > 0.4).astype(np.uint8)
        res = staple.staple_fuse(ann)
        np.testing.assert_array_equal(res.posterior > 0.5, ann[0] > 0)

    def test_identical_raters_any_prior(self):
        rng = np.random.default_rng(1)
        base = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
        for prior in (0.1, 0.35, 0.9):
            res = staple.staple_fuse(np.stack([base] * 3), prior=prior)
            np.testing.assert_array_equal(res.posterior > 0.5, base > 0)

    def test_degenerate_unanimous_foreground(self):
        ann = np.ones((3, 4, 4), dtype=np.uint8)
        res = staple.staple_fuse(ann)
        np.testing.assert_array_equal(res.posterior, 1.0)
        assert res.converged and res.iterations == 0

    def test_degenerate_unanimous_background(self):
        ann = np.zeros((2, 4, 4), dtype=np.uint8)
        res = staple.staple_fuse(ann)
        np.testing.assert_array_equal(res.posterior, 0.0)
        assert res.converged

    def test_posterior_in_unit_interval_and_params_clamped(self):
        rng = np.random.default_rng(2)
        ann = (rng.uniform(size=(4, 6, 6)) > 0.5).astype(np.uint8)
        res = staple.staple_fuse(ann)
        assert np.all(res.posterior >= 0) and np.all(res.posterior <= 1)
        for v in (res.sensitivities, res.specificities):
            assert np.all(v >= 1e-6) and np.all(v <= 1 - 1e-6)

    def test_rater_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        ann = (rng.uniform(size=(4, 5, 5)) > 0.5).astype(np.uint8)
        perm = rng.permutation(4)
        a = staple.staple_fuse(ann)
        b = staple.staple_fuse(ann[perm])
        np.testing.assert_allclose(a.posterior, b.posterior, atol=1e-12)
        np.testing.assert_allclose(a.sensitivities[perm], b.sensitivities, atol=1e-12)

    def test_bad_inputs_rejected(self):
        with pytest.raises(DataError):
            staple.staple_fuse(np.ones((3, 3)))
        mixed = np.zeros((2, 3, 3), dtype=np.uint8)
        mixed[0, 0, 0] = 1
        with pytest.raises(DataError):
            staple.staple_fuse(mixed, prior=0.0)
        with pytest.raises(DataError):
            staple.staple_fuse(mixed, tol=-1.0)


class TestOracleEquivalence:
    @pytest.mark.parametrize("trial", range(50))
    def test_matches_loop_oracle(self, trial):
        rng = np.random.default_rng(1000 + trial)
        n = 3
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        ann = (rng.uniform(size=(n, h, w)) > rng.uniform(0.3, 0.7)).astype(np.uint8)
        if ann.all() or not ann.any():
            ann[0, 0, 0] = 1 - ann[0, 0, 0]
        prior = float(np.clip(ann.mean(), 0.05, 0.95))
        res = staple.staple_fuse(ann, prior=prior)
        post, p, q, conv = oracle_em(ann, prior)
        np.testing.assert_allclose(res.posterior, post, atol=1e-6)
        np.testing.assert_allclose(res.sensitivities, p, atol=1e-6)
        np.testing.assert_allclose(res.specificities, q, atol=1e-6)
        assert res.converged == conv

    def test_convergence_tolerance_honored(self):
        # structured votes: independent pixel flips of a shared truth
        rng = np.random.default_rng(4)
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[2:6, 2:6] = 1
        ann = np.stack(
            [np.where(rng.uniform(size=(8, 8)) < 0.1, 1 - truth, truth) for _ in range(3)]
        )
        res = staple.staple_fuse(ann, tol=1e-8, max_iter=500)
        assert res.converged
        # allotting exactly that many iterations reproduces the same answer
        res2 = staple.staple_fuse(ann, tol=1e-8, max_iter=res.iterations)
        assert res2.converged
        np.testing.assert_array_equal(res2.sensitivities, res.sensitivities)


class TestPairFusion:
    def test_channels_fused_independently(self):
        rng = np.random.default_rng(5)
        ann = (rng.uniform(size=(3, 2, 5, 5)) > 0.5).astype(np.uint8)
        pair = staple.staple_fuse_pair(ann)
        assert pair.shape == (5, 5, 2)
        np.testing.assert_allclose(pair[..., 0], staple.staple_fuse(ann[:, 0]).posterior)
        np.testing.assert_allclose(pair[..., 1], staple.staple_fuse(ann[:, 1]).posterior)
