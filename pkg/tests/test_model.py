import numpy as np
import pytest

from dipa import autodiff as ad
from dipa import model as m

from oracles import bilinear_ref, grid_distances_ref

EPS = 1e-4


@pytest.fixture(scope="module")
def small_model():
    return m.ProtoPartModel(n_classes=3, per_class=2, seed=0)


def _random_images(rng, n=2):
    return rng.uniform(0.0, 1.0, size=(n, 3, 64, 64)).astype(np.float32)


# -- encode -----------------------------------------------------------------

def test_encode_output_shape_and_range(small_model):
    rng = np.random.default_rng(1)
    grid = small_model.encode(_random_images(rng))
    assert grid.shape == (2, 32, 7, 7)
    assert grid.data.min() >= 0.0 and grid.data.max() <= 1.0


def test_encode_rejects_bad_shape(small_model):
    with pytest.raises(ValueError):
        small_model.encode(np.zeros((1, 3, 32, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        small_model.encode(np.full((1, 3, 64, 64), 1.5, dtype=np.float32))


def test_encode_deterministic(small_model):
    rng = np.random.default_rng(2)
    imgs = _random_images(rng, 1)
    g1 = small_model.encode(imgs).data
    g2 = small_model.encode(imgs).data
    assert np.array_equal(g1, g2)


def test_encode_constant_input_uniform_interior(small_model):
    grid = small_model.encode(np.zeros((1, 3, 64, 64), dtype=np.float32)).data
    interior = grid[0, :, 2:5, 2:5]   # cells whose receptive field avoids padding
    for c in range(interior.shape[0]):
        assert np.allclose(interior[c], interior[c, 0, 0], atol=1e-6)


# -- prototype distances ------------------------------------------------------

def test_distance_single_pair():
    protos = m.PrototypeSet(
        vectors=ad.Value(np.array([[0.0, 0.0]], dtype=np.float32)),
        class_of=np.array([0], dtype=np.int32),
        active=np.array([True]), per_class=1)
    grid = ad.Value(np.array([0.3, 0.4], dtype=np.float32).reshape(1, 2, 1, 1))
    d = m.prototype_distances(grid, protos)
    assert abs(d.data[0, 0, 0, 0] - 0.25) < 1e-6


def test_distance_zero_at_matching_cell():
    rng = np.random.default_rng(3)
    grid_np = rng.uniform(0.1, 0.9, size=(1, 4, 3, 3)).astype(np.float32)
    p = grid_np[0, :, 1, 2].copy()
    protos = m.PrototypeSet(
        vectors=ad.Value(p[None]), class_of=np.array([0], dtype=np.int32),
        active=np.array([True]), per_class=1)
    d = m.prototype_distances(ad.Value(grid_np), protos)
    assert d.data[0, 0, 1, 2] < 1e-10
    assert np.all(d.data >= 0)


def test_distances_match_loop_oracle():
    rng = np.random.default_rng(4)
    grid_np = rng.uniform(0.0, 1.0, size=(1, 4, 3, 3)).astype(np.float32)
    pv = rng.uniform(0.0, 1.0, size=(2, 4)).astype(np.float32)
    protos = m.PrototypeSet(
        vectors=ad.Value(pv), class_of=np.array([0, 1], dtype=np.int32),
        active=np.array([True, True]), per_class=1)
    d = m.prototype_distances(ad.Value(grid_np), protos)
    ref = grid_distances_ref(grid_np[0].transpose(1, 2, 0), pv)
    assert np.allclose(d.data[0], ref, atol=1e-6)


# -- evidence ------------------------------------------------------------------

def test_evidence_closed_forms():
    d = ad.Value(np.array([[[[0.0, 1.0]]]], dtype=np.float32))
    emap = m.evidence(d, eps=EPS)
    assert abs(emap.scores.data[0, 0, 0, 0] - np.log(1e4)) < 1e-4
    assert abs(emap.scores.data[0, 0, 0, 1] - np.log(2.0 / 1.0001)) < 1e-5


def test_evidence_limit_and_argmax():
    d = ad.Value(np.array([[[[1e6, 0.5]]]], dtype=np.float32))
    emap = m.evidence(d, eps=EPS)
    assert 0 < emap.scores.data[0, 0, 0, 0] < 1e-5
    assert tuple(emap.argmax_cell[0, 0]) == (0, 1)
    assert emap.max_scores.data[0, 0] == emap.scores.data[0, 0, 0, 1]


def test_evidence_strictly_decreasing_in_distance():
    rng = np.random.default_rng(5)
    d = np.sort(rng.uniform(0.0, 30.0, size=100).astype(np.float32))
    emap = m.evidence(ad.Value(d.reshape(1, 1, 10, 10)), eps=EPS)
    s = emap.scores.data.reshape(-1)
    pairs = [(i, j) for i in range(100) for j in (i + 1,) if j < 100 and d[j] > d[i]]
    for i, j in pairs:
        assert s[j] < s[i]
    assert np.all(s > 0) and np.all(s <= np.log(1.0 / EPS) + 1e-6)


# -- classify -----------------------------------------------------------------

def _emap_from_max(max_scores):
    B, N = max_scores.shape
    scores = ad.Value(np.asarray(max_scores, dtype=np.float32).reshape(B, N, 1, 1))
    mx, _ = ad.max_with_argmax(scores.reshape(B, N, 1), axis=2)
    return m.EvidenceMap(scores=scores, max_scores=mx,
                         argmax_cell=np.zeros((B, N, 2), dtype=int))


def test_classify_single_active_prototype_w12():
    # one active prototype with head weight 1.2 (the reported peak weight)
    protos = m.PrototypeSet(
        vectors=ad.Value(np.zeros((4, 2), dtype=np.float32)),
        class_of=np.array([0, 0, 1, 1], dtype=np.int32),
        active=np.array([True, False, True, False]), per_class=2)
    w = np.zeros((4, 2), dtype=np.float32)
    w[0, 0] = 1.2
    w[2, 1] = 1.0
    head = m.HeadWeights(w=ad.Value(w))
    e = 3.7
    emap = _emap_from_max(np.array([[e, 9.9, 0.1, 9.9]], dtype=np.float32))
    logits = m.classify(emap, head, protos)
    assert abs(logits.data[0, 0] - 1.2 * e) < 1e-5


def test_classify_masked_prototype_bit_identical():
    protos = m.PrototypeSet(
        vectors=ad.Value(np.zeros((2, 2), dtype=np.float32)),
        class_of=np.array([0, 1], dtype=np.int32),
        active=np.array([True, True]), per_class=1)
    head = m.HeadWeights.init_connected(protos.class_of, 2)
    base = np.array([[1.0, 2.0]], dtype=np.float32)
    protos.active = np.array([True, False])
    with pytest.raises(m.MaskExhaustedClass):
        m.classify(_emap_from_max(base), head, protos)
    # 2 prototypes per class so a full class never goes dark
    protos2 = m.PrototypeSet(
        vectors=ad.Value(np.zeros((4, 2), dtype=np.float32)),
        class_of=np.array([0, 0, 1, 1], dtype=np.int32),
        active=np.array([True, True, True, False]), per_class=2)
    head2 = m.HeadWeights.init_connected(protos2.class_of, 2)
    e1 = np.array([[1.0, 2.0, 3.0, 4.0]], dtype=np.float32)
    e2 = e1.copy()
    e2[0, 3] = 77.0   # perturb only the masked prototype's evidence
    l1 = m.classify(_emap_from_max(e1), head2, protos2)
    l2 = m.classify(_emap_from_max(e2), head2, protos2)
    assert np.array_equal(l1.data, l2.data)


def test_classify_identity_head_reproduces_evidence():
    protos = m.PrototypeSet(
        vectors=ad.Value(np.zeros((1, 2), dtype=np.float32)),
        class_of=np.array([0], dtype=np.int32),
        active=np.array([True]), per_class=1)
    head = m.HeadWeights(w=ad.Value(np.array([[1.0]], dtype=np.float32)))
    emap = _emap_from_max(np.array([[2.5]], dtype=np.float32))
    logits = m.classify(emap, head, protos)
    assert abs(logits.data[0, 0] - 2.5) < 1e-7


def test_classify_linear_in_evidence():
    protos = m.PrototypeSet(
        vectors=ad.Value(np.zeros((3, 2), dtype=np.float32)),
        class_of=np.array([0, 1, 2], dtype=np.int32),
        active=np.ones(3, dtype=bool), per_class=1)
    head = m.HeadWeights.init_connected(protos.class_of, 3)
    e = np.array([[1.0, 2.0, 0.5]], dtype=np.float32)
    l1 = m.classify(_emap_from_max(e), head, protos).data
    l2 = m.classify(_emap_from_max(2.0 * e), head, protos).data
    assert np.allclose(l2, 2.0 * l1, atol=1e-5)


def test_masking_equals_physical_deletion():
    rng = np.random.default_rng(6)
    n, k = 8, 4
    class_of = np.repeat(np.arange(k, dtype=np.int32), 2)
    w = rng.normal(size=(n, k)).astype(np.float32)
    ev = rng.uniform(0.1, 5.0, size=(3, n)).astype(np.float32)
    for trial in range(50):
        trial_rng = np.random.default_rng(100 + trial)
        active = np.ones(n, dtype=bool)
        # knock out at most one prototype per class so classes stay covered
        for cls in range(k):
            if trial_rng.random() < 0.6:
                ids = np.nonzero(class_of == cls)[0]
                active[trial_rng.choice(ids)] = False
        protos = m.PrototypeSet(vectors=ad.Value(np.zeros((n, 2), dtype=np.float32)),
                                class_of=class_of, active=active, per_class=2)
        head = m.HeadWeights(w=ad.Value(w))
        masked = m.classify(_emap_from_max(ev), head, protos).data
        keep = np.nonzero(active)[0]
        protos_del = m.PrototypeSet(
            vectors=ad.Value(np.zeros((len(keep), 2), dtype=np.float32)),
            class_of=class_of[keep], active=np.ones(len(keep), dtype=bool),
            per_class=2)
        head_del = m.HeadWeights(w=ad.Value(w[keep]))
        deleted = m.classify(_emap_from_max(ev[:, keep]), head_del, protos_del).data
        assert np.allclose(masked, deleted, atol=1e-6)


# -- patch geometry -------------------------------------------------------------

def test_patch_region_corners():
    assert m.patch_region((0, 0), (7, 7), (224, 224)) == (0, 32, 0, 32)
    assert m.patch_region((6, 6), (7, 7), (224, 224)) == (192, 224, 192, 224)


def test_patch_region_partition():
    covered = np.zeros((224, 224), dtype=int)
    for i in range(7):
        for j in range(7):
            r0, r1, c0, c1 = m.patch_region((i, j), (7, 7), (224, 224))
            covered[r0:r1, c0:c1] += 1
    assert np.all(covered == 1)


def test_patch_region_out_of_range():
    with pytest.raises(ValueError):
        m.patch_region((7, 0), (7, 7), (224, 224))


# -- heatmap upsampling ----------------------------------------------------------

def test_upsample_constant():
    out = m.upsample_heatmap(np.full((7, 7), 3.25, dtype=np.float32), (64, 64))
    assert np.allclose(out, 3.25, atol=1e-6)


def test_upsample_single_hot_peak_at_block_centre():
    src = np.zeros((7, 7), dtype=np.float32)
    src[2, 4] = 1.0
    out = m.upsample_heatmap(src, (70, 70))
    peak = np.unravel_index(np.argmax(out), out.shape)
    # cell (2,4) of a 7-grid over 70px has its centre at pixel (25, 45)
    assert abs(peak[0] - 25) <= 1 and abs(peak[1] - 45) <= 1
    assert out.max() <= 1.0 + 1e-6


def test_upsample_matches_reference():
    rng = np.random.default_rng(7)
    src = rng.uniform(0.0, 1.0, size=(2, 2)).astype(np.float32)
    out = m.upsample_heatmap(src, (4, 4))
    assert np.allclose(out, bilinear_ref(src, 4, 4), atol=1e-6)
    checker = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    out2 = m.upsample_heatmap(checker, (4, 4))
    ref2 = bilinear_ref(checker, 4, 4)
    assert np.allclose(out2, ref2, atol=1e-6)
    # frozen from the loop reference: centre block of the 2x2 checker
    assert np.allclose(out2[1:3, 1:3], [[0.375, 0.625], [0.625, 0.375]], atol=1e-6)


def test_threshold_region():
    hm = np.array([[0.1, 0.8], [1.0, 0.74]])
    mask = m.threshold_region(hm, 0.75)
    assert mask.tolist() == [[False, True], [True, False]]


# -- push -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pushed_setup():
    rng = np.random.default_rng(8)
    model = m.ProtoPartModel(n_classes=2, per_class=2, seed=1)
    images = rng.uniform(0.0, 1.0, size=(6, 3, 64, 64)).astype(np.float32)
    labels = np.array([0, 0, 0, 1, 1, 1])
    report = model.push(images, labels)
    return model, images, labels, report


def test_push_lands_on_exact_encodings(pushed_setup):
    model, images, labels, report = pushed_setup
    grids = model.encode_dataset(images)
    for entry in report.entries:
        i, j = entry.cell
        z = grids[entry.image_id, i, j]
        p = model.prototypes.vectors.data[entry.prototype_id]
        assert np.array_equal(z, p)
        assert model.prototypes.class_of[entry.prototype_id] == labels[entry.image_id]


def test_push_idempotent(pushed_setup):
    model, images, labels, _ = pushed_setup
    before = model.prototypes.vectors.data.copy()
    report2 = model.push(images, labels)
    assert np.array_equal(model.prototypes.vectors.data, before)
    assert all(e.distance_moved == 0.0 for e in report2.entries)


def test_push_source_cell_evidence_is_log_inv_eps(pushed_setup):
    model, images, labels, report = pushed_setup
    with ad.no_grad():
        grid = model.encode(images)
        d = m.prototype_distances(grid, model.prototypes)
        emap = m.evidence(d, model.eps)
    for entry in report.entries:
        i, j = entry.cell
        score = emap.scores.data[entry.image_id, entry.prototype_id, i, j]
        assert abs(score - np.log(1.0 / model.eps)) < 1e-3


def test_push_missing_class_errors():
    model = m.ProtoPartModel(n_classes=2, per_class=1, seed=2)
    images = np.zeros((2, 3, 64, 64), dtype=np.float32)
    labels = np.array([0, 0])
    with pytest.raises(ValueError):
        model.push(images, labels)


# -- mask bookkeeping ---------------------------------------------------------------

def test_deactivate_guards_class_coverage():
    protos = m.PrototypeSet.init_random(2, 2, 4)
    protos.deactivate([0])
    assert not protos.active[0]
    with pytest.raises(m.MaskExhaustedClass) as ei:
        protos.deactivate([1])
    assert ei.value.class_id == 0
    assert not protos.active[0] and protos.active[1]  # failed call left mask unchanged
    protos.deactivate([])
    assert protos.active.sum() == 3
