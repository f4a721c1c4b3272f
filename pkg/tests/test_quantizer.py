import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvq.numerics import ConfigError
from hvq.quantizer import (
    Codebook,
    HvqConfig,
    QuantizeResult,
    assign,
    assign_many,
    commitment_losses,
    ema_update,
    init_kmeans,
    kmeans_plus_plus,
    l2_normalize,
    lloyd,
    make_codebooks,
    quantize_hierarchy,
    reset_dead,
    within_cluster_ss,
    zero_vector_count,
)


def book(protos, mass=None, level=1):
    protos = np.asarray(protos, dtype=np.float64)
    mass = np.ones(len(protos)) if mass is None else np.asarray(mass, dtype=np.float64)
    return Codebook(protos, mass, level=level, reset_threshold=3.0 if level == 1 else 1.0)


# --- assignment -------------------------------------------------------------

def test_assign_examples():
    assert assign([1.0, 0.0], book([[1, 0], [0, 1]])) == 0
    assert assign([0.6, 0.8], book([[0, 1], [1, 0]])) == 0


def test_assign_uses_cosine_not_dot_product():
    # The longer prototype has the larger dot product but the smaller cosine.
    assert assign([1.0, 0.0], book([[5, 5], [1, 0.1]])) == 1


def test_assign_ties_go_to_lowest_index():
    assert assign([1.0, 1.0], book([[1, 0], [0, 1]])) == 0
    assert assign([1.0, 0.0], book([[0, 1], [2, 0], [1, 0]])) == 1


def test_zero_vector_maps_to_zero_and_is_counted():
    before = zero_vector_count()
    assert assign([0.0, 0.0], book([[0, 1], [1, 0]])) == 0
    assert zero_vector_count() == before + 1


@pytest.mark.parametrize("seed", range(10))
def test_assign_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((16, 8))
    for v in rng.standard_normal((20, 8)):
        cos = [v @ p / (np.linalg.norm(v) * np.linalg.norm(p)) for p in P]
        assert assign(v, book(P)) == int(np.argmax(cos))


# --- hierarchy ------------------------------------------------------------

def test_single_level_coarse_is_fine(rng):
    books = make_codebooks([l2_normalize(rng.standard_normal((4, 3)))])
    r = quantize_hierarchy(rng.standard_normal((10, 3)), books)
    np.testing.assert_array_equal(r.coarse, r.fine)


def test_two_level_hand_example():
    books = make_codebooks([[[1, 0], [0, 1]], [[1, 0]]])
    r = quantize_hierarchy(np.tile([0.9, 0.1], (5, 1)), books)
    assert (r.fine == 0).all() and (r.coarse == 0).all()
    np.testing.assert_array_equal(r.q, np.tile([1.0, 0.0], (5, 1)))


@pytest.mark.parametrize("levels", [2, 3])
def test_coarse_index_is_nearest_to_fine_prototype(levels, rng):
    cfg = HvqConfig(K=3, levels=levels)
    protos = [rng.standard_normal((n, 5)) for n in cfg.level_sizes()]
    protos[0] = l2_normalize(protos[0])
    books = make_codebooks(protos)
    r = quantize_hierarchy(rng.standard_normal((40, 5)), books)
    for t in range(40):
        z = books[0].prototypes[r.fine[t]]
        node = z
        for upper, idx in zip(books[1:], r.indices[1:]):
            expect = assign(node, upper)
            assert idx[t] == expect
            node = upper.prototypes[expect]


def test_quantizing_prototypes_is_idempotent(rng):
    protos = l2_normalize(rng.standard_normal((6, 4)))
    r = quantize_hierarchy(protos, make_codebooks([protos]))
    np.testing.assert_array_equal(r.fine, np.arange(6))


def test_dimension_mismatch_is_config_error(rng):
    books = make_codebooks([rng.standard_normal((4, 3)), rng.standard_normal((2, 3))])
    with pytest.raises(ConfigError):
        quantize_hierarchy(rng.standard_normal((5, 4)), books)
    with pytest.raises(ConfigError):
        quantize_hierarchy(rng.standard_normal((5, 3)),
                           make_codebooks([rng.standard_normal((4, 3)), rng.standard_normal((2, 2))]))


# --- EMA ----------------------------------------------------------------------

EXPECTED_EMA = np.array([0.8, 0.2]) / np.hypot(0.8, 0.2)


def test_ema_hand_example():
    b = ema_update(book([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([0]), 0.8)
    assert b.mass[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(b.prototypes[0], EXPECTED_EMA, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.prototypes[0], [0.970, 0.243], atol=5e-4)


def test_ema_hand_example_before_normalisation():
    b = ema_update(book([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([0]), 0.8, normalize=False)
    np.testing.assert_allclose(b.prototypes[0], [0.8, 0.2], rtol=0, atol=1e-15)


@pytest.mark.parametrize("beta", [0.1, 0.5, 0.8, 0.99])
def test_ema_without_assignments_only_decays_mass(beta, rng):
    b = book(l2_normalize(rng.standard_normal((3, 4))), [1.0, 2.0, 4.0])
    before = b.prototypes.copy()
    ema_update(b, np.zeros((0, 4)), np.zeros(0, dtype=np.int64), beta)
    np.testing.assert_array_equal(b.prototypes, before)
    np.testing.assert_allclose(b.mass, beta * np.array([1.0, 2.0, 4.0]))


def test_ema_beta_near_one_keeps_prototype():
    b = ema_update(book([[0.6, 0.8]]), np.array([[1.0, 0.0]]), np.array([0]), 1 - 1e-12,
                   normalize=False)
    np.testing.assert_allclose(b.prototypes[0], [0.6, 0.8], atol=1e-9)


def test_ema_level_two_is_not_normalised():
    b = ema_update(book([[2.0, 0.0]], level=2), np.array([[2.0, 0.0], [2.0, 0.0]]), np.array([0, 0]), 0.8)
    # N_hat = 0.8 + 0.4 = 1.2; z_hat = (1.6 + 0.8) / 1.2 = 2.0
    np.testing.assert_allclose(b.prototypes[0], [2.0, 0.0])


def test_running_sum_variant_is_weighted_mean():
    b = book([[1.0, 0.0]], [3.0], level=2)
    ema_update(b, np.array([[0.0, 1.0]]), np.array([0]), 0.5, variant="running_sum")
    # (0.5 * 3 * (1,0) + 0.5 * (0,1)) / (1.5 + 0.5)
    np.testing.assert_allclose(b.prototypes[0], [0.75, 0.25])
    assert b.mass[0] == 2.0


def test_ema_rejects_bad_beta_and_variant(rng):
    with pytest.raises(ConfigError):
        ema_update(book([[1.0, 0.0]]), np.ones((1, 2)), np.array([0]), 1.0)
    with pytest.raises(ConfigError):
        ema_update(book([[1.0, 0.0]]), np.ones((1, 2)), np.array([0]), 0.8, variant="adam")


def test_ema_mass_conservation_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(100):
        P, D, T = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 40))
        beta = float(rng.uniform(0.05, 0.95))
        b = book(l2_normalize(rng.standard_normal((P, D))), rng.uniform(0, 5, P))
        total = b.mass.sum()
        ema_update(b, rng.standard_normal((T, D)), rng.integers(0, P, T), beta)
        assert b.mass.sum() == pytest.approx(beta * total + (1 - beta) * T, rel=1e-12)


# --- dead prototypes ----------------------------------------------------------

def test_reset_threshold_level_one():
    b = book([[1.0, 0.0], [0.0, 1.0]], [2.9, 3.0])
    batch = np.array([[3.0, 4.0]])
    assert reset_dead(b, batch, np.random.default_rng(0)) == 1
    np.testing.assert_allclose(b.prototypes[0], [0.6, 0.8])
    np.testing.assert_array_equal(b.prototypes[1], [0.0, 1.0])
    np.testing.assert_array_equal(b.mass, [1.0, 3.0])


def test_reset_threshold_level_two_is_strict():
    b = book([[2.0, 0.0]], [1.0], level=2)
    assert reset_dead(b, np.ones((3, 2)), np.random.default_rng(0)) == 0
    b.mass[:] = 0.999
    assert reset_dead(b, np.array([[3.0, 4.0]]), np.random.default_rng(0)) == 1
    np.testing.assert_array_equal(b.prototypes[0], [3.0, 4.0])  # not normalised at level 2


def test_reset_leaves_healthy_codebook_untouched(rng):
    b = book(l2_normalize(rng.standard_normal((4, 3))), [5, 5, 5, 5])
    before = b.prototypes.copy()
    version = b.version
    assert reset_dead(b, rng.standard_normal((6, 3)), rng) == 0
    np.testing.assert_array_equal(b.prototypes, before)
    assert b.version == version


def test_reset_is_seeded(rng):
    batch = rng.standard_normal((50, 3))
    a = book(np.eye(3), [0.1, 0.1, 0.1])
    c = book(np.eye(3), [0.1, 0.1, 0.1])
    reset_dead(a, batch, np.random.default_rng(9))
    reset_dead(c, batch, np.random.default_rng(9))
    np.testing.assert_array_equal(a.prototypes, c.prototypes)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**16), beta=st.floats(0.05, 0.95))
def test_level_one_prototypes_stay_unit_norm(seed, beta):
    rng = np.random.default_rng(seed)
    b = book(l2_normalize(rng.standard_normal((5, 4))), rng.uniform(0, 6, 5))
    x = l2_normalize(rng.standard_normal((12, 4)))
    ema_update(b, x, assign_many(x, b.prototypes), beta)
    reset_dead(b, x, rng)
    np.testing.assert_allclose(np.linalg.norm(b.prototypes, axis=1), 1.0, atol=1e-9)
    assert (b.mass >= 0).all()


# --- K-means initialisation ---------------------------------------------------

def test_kmeans_two_clouds(rng):
    a = rng.normal([5.0, 0.0], 0.1, size=(30, 2))
    b = rng.normal([0.0, 5.0], 0.1, size=(30, 2))
    books = init_kmeans(np.vstack([a, b]), HvqConfig(K=1, alpha=2), 0)
    got = sorted(map(tuple, np.round(books[0].prototypes, 1)))
    assert got == [(0.0, 1.0), (1.0, 0.0)]
    np.testing.assert_allclose(books[1].prototypes[0], books[0].prototypes.mean(axis=0))


def test_kmeans_duplicate_frames():
    frames = np.tile([3.0, 4.0], (10, 1))
    books = init_kmeans(frames, HvqConfig(K=2, alpha=2), 0)
    np.testing.assert_allclose(books[0].prototypes, np.tile([0.6, 0.8], (4, 1)))


def test_kmeans_init_shapes_masses_and_norms(rng):
    books = init_kmeans(rng.standard_normal((50, 6)), HvqConfig(K=3, alpha=[2, 2], levels=3), 0)
    assert [b.size for b in books] == [12, 6, 3]
    assert [b.level for b in books] == [1, 2, 3]
    assert [b.reset_threshold for b in books] == [3.0, 1.0, 1.0]
    for b in books:
        np.testing.assert_array_equal(b.mass, 1.0)
    np.testing.assert_allclose(np.linalg.norm(books[0].prototypes, axis=1), 1.0)


def test_kmeans_falls_back_when_too_few_frames(rng):
    with pytest.warns(UserWarning, match="sampling"):
        books = init_kmeans(rng.standard_normal((3, 4)), HvqConfig(K=4, alpha=2), 0)
    assert books[0].size == 8


def test_kmeans_init_is_seeded(rng):
    x = rng.standard_normal((40, 4))
    a = init_kmeans(x, HvqConfig(K=3), 5)
    b = init_kmeans(x, HvqConfig(K=3), 5)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u.prototypes, v.prototypes)


def test_kmeans_beats_random_frame_init():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        centres = rng.normal(0, 4, size=(6, 3))
        pts = np.vstack([rng.normal(c, 0.5, size=(25, 3)) for c in centres])
        fitted, _ = lloyd(pts, kmeans_plus_plus(pts, 6, rng))
        random_init = pts[rng.choice(len(pts), 6, replace=False)]
        wins += within_cluster_ss(pts, fitted) <= within_cluster_ss(pts, random_init)
    assert wins == 10


def test_hvq_config_sizes_and_validation():
    assert HvqConfig(K=4).level_sizes() == [8, 4]
    assert HvqConfig(K=4, levels=1).level_sizes() == [4]
    assert HvqConfig(K=2, levels=3, alpha=[3, 2]).level_sizes() == [12, 4, 2]
    for kwargs in (dict(levels=4), dict(ema_decay=1.0), dict(alpha=0), dict(ema_variant="x"),
                   dict(levels=3, alpha=[2])):
        with pytest.raises(ConfigError):
            HvqConfig(K=2, **kwargs)
    with pytest.raises(ConfigError):
        HvqConfig().level_sizes()


# --- commitment -----------------------------------------------------------

def test_commitment_zero_when_embeddings_sit_on_prototypes():
    books = make_codebooks([np.eye(2), np.eye(2)])
    e = np.eye(2)
    c = commitment_losses(e, quantize_hierarchy(e, books), books)
    assert c.commit_z == 0.0 and c.commit_q == 0.0


def test_commitment_hand_example():
    e = np.array([[1.0, 0.0]])
    z = np.array([[0.0, 1.0]])
    r = QuantizeResult([np.array([0]), np.array([0])], [z, z.copy()], [np.array([0])])
    c = commitment_losses(e, r)
    assert c.commit_z == 2.0 and c.commit_q == 0.0
    np.testing.assert_array_equal(c.grad_commit_z, 2 * (e - z))


def test_commitment_gradients_match_finite_differences(rng):
    books = make_codebooks([l2_normalize(rng.standard_normal((6, 3))), rng.standard_normal((3, 3))])
    e = rng.standard_normal((7, 3))
    r = quantize_hierarchy(e, books)
    c = commitment_losses(e, r, books)
    np.testing.assert_allclose(c.grad_commit_z, 2 * (e - r.z))
    # commit_q reaches e through the straight-through identity z ~ e + const.
    eps = 1e-6
    numeric = np.zeros_like(e)
    for idx in np.ndindex(*e.shape):
        d = np.zeros_like(e)
        d[idx] = eps
        plus = np.sum((r.z + d - r.q) ** 2)
        minus = np.sum((r.z - d - r.q) ** 2)
        numeric[idx] = (plus - minus) / (2 * eps)
    np.testing.assert_allclose(c.grad_commit_q, numeric, rtol=1e-6, atol=1e-9)


def test_commitment_rejects_stale_result(rng):
    books = make_codebooks([l2_normalize(rng.standard_normal((4, 3))), rng.standard_normal((2, 3))])
    e = l2_normalize(rng.standard_normal((5, 3)))
    r = quantize_hierarchy(e, books)
    ema_update(books[0], e, r.fine, 0.8)
    with pytest.raises(RuntimeError, match="stale"):
        commitment_losses(e, r, books)


def test_codebook_validation():
    with pytest.raises(ConfigError):
        Codebook(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ConfigError):
        Codebook(np.ones((2, 2)), np.ones(3))


def test_l2_normalize_guards_zero_rows():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = l2_normalize(np.array([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_allclose(out, [[0, 0], [0.6, 0.8]])
