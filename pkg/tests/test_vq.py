import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gscodec.model import GROUPS, GaussianCloud, ParamGroup, group_view
from gscodec.vq import (Codebook, Init, QatSchedule, VqConfig, assign, assign_frozen, fit_cloud, init_codebook,
                        lloyd, qat_update, quantize_cloud, sse, update_centroids)


def brute_assign(x, c):
    """Double loop over all pairs; strict < keeps the lowest index on ties."""
    out = np.empty(len(x), dtype=np.int64)
    for i, row in enumerate(np.asarray(x, dtype=np.float64)):
        best, best_d = 0, np.inf
        for j, cen in enumerate(np.asarray(c, dtype=np.float64)):
            d = float(((row - cen) ** 2).sum())
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


def naive_lloyd(x, centroids, iters):
    c = np.array(centroids, dtype=np.float64)
    for _ in range(iters):
        a = brute_assign(x, c)
        for j in range(len(c)):
            members = x[a == j]
            if len(members):
                c[j] = members.mean(axis=0)
    a = brute_assign(x, c)
    return c, float(((x - c[a]) ** 2).sum())


def blobs(seed=0, n=1000):
    rng = np.random.default_rng(seed)
    means = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 5.0]])
    labels = rng.integers(3, size=n)
    return means[labels] + rng.normal(scale=0.5, size=(n, 3)), means


# assign


def test_assign_exact_hit():
    c = np.arange(30, dtype=np.float64).reshape(10, 3)
    assert assign(c[5:6], c)[0] == 5


def test_assign_tie_lowest_index():
    c = np.zeros((8, 2))
    c[2] = [1.0, 0.0]
    c[7] = [-1.0, 0.0]
    c[[0, 1, 3, 4, 5, 6]] = 100.0
    assert assign(np.zeros((1, 2)), c)[0] == 2


def test_assign_tie_on_duplicate_centroids():
    c = np.array([[5.0, 5.0], [1.0, 1.0], [1.0, 1.0]])
    assert assign(np.array([[1.0, 1.2]]), c)[0] == 1


def test_assign_matches_brute_force(rng):
    x = rng.normal(size=(50, 3))
    c = rng.normal(size=(8, 3))
    np.testing.assert_array_equal(assign(x, c), brute_assign(x, c))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 120), k=st.integers(1, 20), d=st.integers(1, 6), seed=st.integers(0, 2**31),
       grid=st.booleans())
def test_assign_brute_force_property(n, k, d, seed, grid):
    rng = np.random.default_rng(seed)
    if grid:  # small integer grid makes exact ties common
        x = rng.integers(-2, 3, size=(n, d)).astype(np.float64)
        c = rng.integers(-2, 3, size=(k, d)).astype(np.float64)
    else:
        x = rng.normal(size=(n, d)) * 10 ** rng.uniform(-3, 3)
        c = x[rng.integers(n, size=k)] + rng.normal(scale=0.1, size=(k, d))
    np.testing.assert_array_equal(assign(x, c), brute_assign(x, c))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 300), k=st.integers(1, 16), chunk=st.integers(1, 400), seed=st.integers(0, 2**31))
def test_assign_chunk_invariance(n, k, chunk, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, size=(n, 3)).astype(np.float32)
    c = rng.integers(-3, 4, size=(k, 3)).astype(np.float32)
    np.testing.assert_array_equal(assign(x, c, chunk_size=chunk), assign(x, c))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 200), k=st.integers(1, 16), seed=st.integers(0, 2**31))
def test_assign_permutation_equivariant(n, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    c = rng.normal(size=(k, 4))
    perm = rng.permutation(n)
    np.testing.assert_array_equal(assign(x[perm], c), assign(x, c)[perm])


def test_assign_empty_rows():
    assert assign(np.zeros((0, 3)), np.ones((4, 3))).shape == (0,)


# update_centroids


def test_update_midpoint():
    c, empty = update_centroids(np.array([[0.0, 2.0], [4.0, 6.0]]), np.array([0, 0]), 1)
    np.testing.assert_array_equal(c, [[2.0, 4.0]])
    assert not empty.any()


def test_update_empty_cluster_retained():
    prev = np.array([[9.0, 9.0], [7.0, -7.0]])
    c, empty = update_centroids(np.array([[1.0, 1.0], [3.0, 3.0]]), np.array([0, 0]), 2, prev)
    np.testing.assert_array_equal(empty, [False, True])
    np.testing.assert_array_equal(c[1], prev[1])
    np.testing.assert_array_equal(c[0], [2.0, 2.0])


def test_update_matches_group_by(rng):
    x = rng.normal(size=(300, 5))
    a = rng.integers(12, size=300)
    c, empty = update_centroids(x, a, 12)
    for j in range(12):
        members = [x[i] for i in range(300) if a[i] == j]
        if members:
            np.testing.assert_allclose(c[j], np.mean(members, axis=0), rtol=1e-12, atol=1e-14)
        assert empty[j] == (not members)


# init and lloyd


def test_init_k_equals_n_random_sample():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]])
    book = init_codebook(x, 4, Init.RANDOM_SAMPLE, seed=3)
    assert sorted(map(tuple, book.centroids)) == sorted(map(tuple, x))
    assert sse(x, book.centroids, book.assignments) == 0.0


def test_init_kmeanspp_picks_distinct_rows(rng):
    x = rng.normal(size=(40, 3))
    book = init_codebook(x, 40, Init.KMEANS_PLUS_PLUS, seed=1)
    assert len({tuple(r) for r in book.centroids}) == 40
    assert book.history[0] == 0.0


def test_init_k_exceeds_n_warns():
    with pytest.warns(UserWarning):
        book = init_codebook(np.eye(3), 5)
    assert book.k == 5
    assert sse(np.eye(3), book.centroids, book.assignments) == 0.0


def test_init_rejects_empty():
    with pytest.raises(ValueError):
        init_codebook(np.zeros((0, 2)), 1)


def test_k1_is_global_mean(rng):
    x = rng.normal(size=(200, 4))
    book = lloyd(x, 1, iters=1)
    np.testing.assert_allclose(book.centroids[0], x.mean(axis=0), rtol=1e-12)


def test_blobs_recover_means():
    x, means = blobs()
    book = lloyd(x, 3, iters=20, init=Init.KMEANS_PLUS_PLUS, seed=0)
    found = sorted(map(tuple, book.centroids))
    for got, want in zip(found, sorted(map(tuple, means))):
        assert np.abs(np.subtract(got, want)).max() < 0.1


def test_blobs_match_reference_lloyd():
    x, _ = blobs(seed=4)
    start = init_codebook(x, 3, Init.KMEANS_PLUS_PLUS, seed=2)
    book = lloyd(x, 3, iters=20, init=Init.KMEANS_PLUS_PLUS, seed=2)
    _, ref = naive_lloyd(x, start.centroids, 20)
    assert abs(book.history[-1] - ref) <= 0.01 * ref


def test_repeated_values_converge_fast():
    base = np.array([[0.0, 1.0], [5.0, 5.0], [-3.0, 2.0]])
    x = np.repeat(base, 10, axis=0)
    book = lloyd(x, 3, iters=10, init=Init.KMEANS_PLUS_PLUS, seed=0)
    assert book.history[-1] == 0.0
    assert len(book.history) <= 3


def test_zero_iterations_is_init(rng):
    x = rng.normal(size=(60, 3))
    init = init_codebook(x, 5, seed=9)
    book = lloyd(x, 5, iters=0, seed=9)
    np.testing.assert_array_equal(book.centroids, init.centroids)
    np.testing.assert_array_equal(book.assignments, init.assignments)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 200), k=st.integers(1, 24), seed=st.integers(0, 2**31),
       init=st.sampled_from(list(Init)))
def test_lloyd_sse_monotone(n, k, seed, init):
    rng = np.random.default_rng(seed)
    x = rng.standard_t(3, size=(n, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        book = lloyd(x, k, iters=15, init=init, seed=seed)
    hist = book.history
    assert all(b <= a + 1e-9 * max(a, 1.0) for a, b in zip(hist, hist[1:]))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 80), seed=st.integers(0, 2**31))
def test_k_equals_n_distinct_zero_sse(n, seed):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    for init in Init:
        book = lloyd(x, n, iters=5, init=init, seed=seed)
        assert book.history[-1] == 0.0


def test_lloyd_deterministic(rng):
    x = rng.normal(size=(500, 4)).astype(np.float32)
    a = lloyd(x, 16, iters=10, seed=5)
    b = lloyd(x, 16, iters=10, seed=5)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.centroids.dtype == np.float32


# QAT schedule


def _book(x, k=4, seed=0):
    return init_codebook(x, k, seed=seed)


def test_qat_after_assign_until_keeps_assignments(rng):
    sched = QatSchedule(total_iters=30000, assign_every=100, assign_until=25000 / 30000)
    x = rng.normal(size=(100, 3))
    book = _book(x)
    frozen = book.assignments.copy()
    moved = x + 5.0 * (np.arange(100) % 2)[:, None]
    qat_update(book, moved, 25100, sched)
    np.testing.assert_array_equal(book.assignments, frozen)
    expect, _ = update_centroids(moved, frozen, 4, None)
    counts = np.bincount(frozen, minlength=4)
    np.testing.assert_allclose(book.centroids[counts > 0], expect[counts > 0])


def test_qat_on_schedule_refreshes_both(rng):
    sched = QatSchedule(total_iters=30000, assign_every=100, assign_until=25000 / 30000)
    x = rng.normal(size=(100, 3))
    book = _book(x)
    moved = x[::-1].copy()
    tracked, _ = update_centroids(moved, book.assignments, 4, book.centroids)
    qat_update(book, moved, 100, sched)
    np.testing.assert_array_equal(book.assignments, assign(moved, tracked))
    expect, _ = update_centroids(moved, book.assignments, 4, tracked)
    np.testing.assert_array_equal(book.centroids, expect)


def test_qat_refresh_keeps_k_equals_n_identity(rng):
    sched = QatSchedule(total_iters=300, assign_every=1, assign_until=1.0)
    x = rng.normal(size=(30, 3))
    book = init_codebook(x, 30, seed=0)
    for step in range(5):
        x = x + rng.normal(scale=2.0, size=x.shape)  # moves far past neighbouring rows
        qat_update(book, x, step, sched)
        np.testing.assert_array_equal(book.lookup(), x)


def test_qat_off_schedule_keeps_assignments(rng):
    sched = QatSchedule(total_iters=30000)
    x = rng.normal(size=(50, 2))
    book = _book(x)
    a = book.assignments.copy()
    qat_update(book, x[::-1].copy(), 150, sched)
    np.testing.assert_array_equal(book.assignments, a)


def test_qat_idempotent_without_refresh(rng):
    sched = QatSchedule(total_iters=30000)
    x = rng.normal(size=(50, 2))
    book = _book(x)
    qat_update(book, x, 7, sched)
    first = book.centroids.copy()
    qat_update(book, x, 8, sched)
    np.testing.assert_array_equal(book.centroids, first)


def test_schedule_steps():
    s = QatSchedule()
    assert (s.qat_start_step, s.assign_until_step, s.reg_start_step, s.reg_end_step) == (20000, 25000, 15000, 20000)
    with pytest.raises(ValueError):
        QatSchedule(qat_start=0.9, assign_until=0.5)
    with pytest.raises(ValueError):
        VqConfig(k_dc=0)


# cloud-level


def test_quantize_identity_when_k_equals_n(cloud):
    books = {g: Codebook(g.value, group_view(cloud, g).copy(), np.arange(cloud.count)) for g in GROUPS}
    assert quantize_cloud(cloud, books).equals(cloud)


def test_quantize_single_row_lookup():
    cloud = GaussianCloud.random(1, seed=2)
    books = {g: Codebook(g.value, np.arange(3 * g.dim, dtype=np.float32).reshape(3, g.dim), np.array([2]))
             for g in GROUPS}
    out = quantize_cloud(cloud, books)
    for g in GROUPS:
        np.testing.assert_array_equal(group_view(out, g)[0], books[g].centroids[2])
    np.testing.assert_array_equal(out.position, cloud.position)
    np.testing.assert_array_equal(out.logit_opacity, cloud.logit_opacity)


def test_fit_cloud_error_is_distance_to_nearest(cloud):
    books = fit_cloud(cloud, VqConfig(k_dc=16, k_sh=16, k_scale=16, k_rot=16, lloyd_iters=5))
    out = quantize_cloud(cloud, books)
    for g in GROUPS:
        x = group_view(cloud, g).astype(np.float64)
        c = books[g].centroids.astype(np.float64)
        idx = brute_assign(x, c)
        want = np.sqrt(((x - c[idx]) ** 2).sum(axis=1))
        got = np.sqrt(((x - group_view(out, g).astype(np.float64)) ** 2).sum(axis=1))
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-6)


def test_assign_frozen_own_rows(cloud):
    frozen = {g: Codebook(g.value, group_view(cloud, g).copy(), np.zeros(0, dtype=np.int64)) for g in GROUPS}
    out, books = assign_frozen(cloud, frozen)
    assert out.equals(cloud)


def test_assign_frozen_two_centroids(cloud):
    frozen = {g: Codebook(g.value, np.stack([np.zeros(g.dim), np.ones(g.dim)]).astype(np.float32),
                          np.zeros(0, dtype=np.int64)) for g in GROUPS}
    _, books = assign_frozen(cloud, frozen)
    for g in GROUPS:
        np.testing.assert_array_equal(books[g].assignments, brute_assign(group_view(cloud, g), frozen[g].centroids))


def test_assign_frozen_empty_cloud():
    frozen = {g: Codebook(g.value, np.zeros((2, g.dim), np.float32), np.zeros(0, np.int64)) for g in GROUPS}
    out, books = assign_frozen(GaussianCloud.zeros(0), frozen)
    assert out.count == 0
    assert all(len(b.assignments) == 0 for b in books.values())


def test_assign_frozen_dim_mismatch(cloud):
    frozen = {g: Codebook(g.value, np.zeros((2, 2), np.float32), np.zeros(0, np.int64)) for g in GROUPS}
    with pytest.raises(ValueError):
        assign_frozen(cloud, frozen)


def test_group_parse_aliases():
    assert ParamGroup.parse("rot") is ParamGroup.ROTATION
