import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from boxamodal.geometry import Box, rasterize_box
from boxamodal.losses import (
    LossConfig,
    amodal_branch_loss,
    amodal_branch_terms,
    build_edge_set,
    build_pov_set,
    connectivity_loss,
    dense_neighbor_loss,
    neighbor_loss,
    pairwise_loss,
    pov_mask,
    pred_consistency,
    projection_loss,
    region_loss,
    uniform_loss,
    visible_branch_loss,
)

import oracles

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


def random_instance(rng, n=8):
    """Random 8x8 masks, region, box and a piecewise-uniform image."""
    m_a = rng.uniform(0.02, 0.98, size=(n, n))
    m_v = rng.uniform(0.02, 0.98, size=(n, n))
    x0, x1 = sorted(rng.choice(n + 1, size=2, replace=False))
    y0, y1 = sorted(rng.choice(n + 1, size=2, replace=False))
    box = (int(x0), int(y0), int(x1), int(y1))
    rx0, rx1 = sorted(rng.choice(n + 1, size=2, replace=False))
    ry0, ry1 = sorted(rng.choice(n + 1, size=2, replace=False))
    region = np.zeros((n, n), bool)
    region[ry0:ry1, rx0:rx1] = True
    colors = rng.uniform(0, 1, size=(2, 3))
    split = rng.integers(1, n)
    image = np.where(np.arange(n)[None, :, None] < split, colors[0], colors[1]).repeat(n, axis=0)
    image = image + rng.normal(0, 0.02, size=(n, n, 3))
    return m_a, m_v, region, box, image


# ---------------------------------------------------------------------------
# hand fixtures
# ---------------------------------------------------------------------------

class TestRegionLoss:
    def test_perfect_prediction(self):
        gt = np.eye(4)
        assert region_loss(t(gt), gt, 1.0, 1e-6).item() < 1e-5

    def test_half_is_ln2(self):
        gt = np.random.default_rng(0).integers(0, 2, size=(5, 5))
        assert region_loss(t(np.full((5, 5), 0.5)), gt, 1.0).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_linear_in_alpha(self):
        rng = np.random.default_rng(1)
        p, g = rng.uniform(0.1, 0.9, (6, 6)), rng.integers(0, 2, (6, 6))
        assert region_loss(t(p), g, 2.0).item() == pytest.approx(2 * region_loss(t(p), g, 1.0).item())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            region_loss(t(np.zeros((3, 3))), np.zeros((3, 4)))


class TestPovAndEdges:
    def test_threshold_and_region_gate(self):
        m_v = np.zeros((5, 5))
        region = np.zeros((5, 5), bool)
        region[1:4, 1:4] = True
        m_v[2, 2] = 0.7
        m_v[0, 0] = 0.7
        m_v[1, 1] = 0.5
        assert build_pov_set(t(m_v), region, 0.5) == {(2, 2)}

    def test_center_pixel_gets_eight_edges(self):
        edges = build_edge_set({(5, 5)}, 1, 11, 11, Box(0, 0, 11, 11))
        others = {e[0] if e[1] == (5, 5) else e[1] for e in edges.edges}
        assert others == {(3, 5), (7, 5), (5, 3), (5, 7), (3, 3), (3, 7), (7, 3), (7, 7)}
        assert edges.gt_consistency == [1] * 8

    def test_crossing_box_boundary(self):
        edges = build_edge_set({(5, 5)}, 1, 11, 11, Box(0, 0, 6, 11))
        labels = dict(zip(edges.edges, edges.gt_consistency))
        assert labels[((5, 5), (5, 7))] == 0
        assert labels[((5, 3), (5, 5))] == 1

    def test_dedup_and_clipping(self):
        edges = build_edge_set({(0, 0), (0, 2)}, 1, 3, 3, Box(0, 0, 3, 3))
        keys = [frozenset(e) for e in edges.edges]
        assert len(keys) == len(set(keys))
        for a, b in edges.edges:
            assert a != b
            assert all(0 <= v < 3 for v in a + b)
            assert a in {(0, 0), (0, 2)} or b in {(0, 0), (0, 2)}


class TestConsistencyAndNeighbor:
    @pytest.mark.parametrize("a1,a2,expected", [(1.0, 1.0, 1.0), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5)])
    def test_pred_consistency(self, a1, a2, expected):
        m = torch.zeros(2, 2, dtype=D)
        m[0, 0], m[1, 1] = a1, a2
        assert pred_consistency(m, ((0, 0), (1, 1))).item() == pytest.approx(expected)

    def test_perfect_consistency(self):
        m = t(np.ones((9, 9)))
        edges = build_edge_set({(4, 4)}, 1, 9, 9, Box(0, 0, 9, 9))
        assert neighbor_loss(m, edges).item() < 1e-5

    def test_single_half_edge_is_ln2(self):
        m = t(np.full((3, 3), 0.5))
        from boxamodal.losses import PixelEdgeSet
        edges = PixelEdgeSet([((0, 0), (2, 2))], [1])
        assert neighbor_loss(m, edges).item() == pytest.approx(-math.log(0.5), abs=1e-12)

    def test_empty_edge_set(self):
        from boxamodal.losses import PixelEdgeSet
        assert neighbor_loss(t(np.full((3, 3), 0.3)), PixelEdgeSet()).item() == 0.0

    def test_permutation_invariant(self, rng):
        m_a, m_v, region, box, _ = random_instance(rng)
        edges = build_edge_set(build_pov_set(t(m_v), region, 0.5), 1, 8, 8, Box(*box))
        perm = rng.permutation(len(edges))
        from boxamodal.losses import PixelEdgeSet
        shuffled = PixelEdgeSet([edges.edges[k] for k in perm], [edges.gt_consistency[k] for k in perm])
        assert neighbor_loss(t(m_a), shuffled).item() == pytest.approx(neighbor_loss(t(m_a), edges).item(),
                                                                      abs=1e-12)

    def test_dense_matches_edge_list(self, rng):
        for _ in range(30):
            m_a, m_v, region, box, _ = random_instance(rng, n=10)
            gap = int(rng.integers(1, 3))
            pov = build_pov_set(t(m_v), region, 0.5)
            sparse = neighbor_loss(t(m_a), build_edge_set(pov, gap, 10, 10, Box(*box)))
            dense = dense_neighbor_loss(t(m_a), pov_mask(t(m_v), region, 0.5), Box(*box), gap)
            assert dense.item() == pytest.approx(sparse.item(), abs=1e-12)


class TestUniformLoss:
    def test_no_reduced_pixels(self):
        region = np.ones((2, 2), bool)
        assert uniform_loss(t([[0.9, 0.3], [0.1, 0.0]]), t([[0.8, 0.2], [0.0, 0.0]]), region).item() == 0.0

    def test_hand_fixture(self):
        region = np.ones((2, 2), bool)
        m_v = t([[0.8, 0.2], [0.0, 0.0]])
        m_a = t([[0.5, 0.2], [0.0, 0.0]])
        assert uniform_loss(m_a, m_v, region, 1.0).item() == pytest.approx(0.075, abs=1e-12)
        assert uniform_loss(m_a, m_v, region, 2.0).item() == pytest.approx(0.15, abs=1e-12)

    def test_empty_region(self):
        assert uniform_loss(t(np.zeros((3, 3))), t(np.ones((3, 3))), np.zeros((3, 3), bool)).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_zero_iff_amodal_dominates(self, seed):
        rng = np.random.default_rng(seed)
        m_a, m_v, region, _, _ = random_instance(rng)
        if rng.random() < 0.5:
            m_a = np.maximum(m_a, m_v)
        value = uniform_loss(t(m_a), t(m_v), region).item()
        dominated = bool(np.all(m_a[region] >= m_v[region]))
        assert (value == 0.0) == dominated


class TestConnectivity:
    def _fixture(self):
        m_a = np.full((3, 3), 0.5)
        m_v = np.zeros((3, 3))
        m_v[0, 0] = 0.9
        region = np.zeros((3, 3), bool)
        region[0, 0] = True
        return m_a, m_v, region

    def test_toggles_off(self):
        m_a, m_v, region = self._fixture()
        cfg = LossConfig(enable_neighbor=False, enable_uniform=False)
        assert connectivity_loss(t(m_a), t(m_v), region, Box(0, 0, 3, 3), cfg).item() == 0.0

    def test_sum_of_component_fixtures(self):
        # neighbor fixture: one consistent edge with endpoints (0.5, 0.5) -> ln 2
        m_a = np.full((3, 3), 0.5)
        m_v = np.zeros((3, 3))
        region = np.zeros((3, 3), bool)
        m_v[0, 0] = 0.9
        region[0, 0] = True
        # restrict the image so (0,0) has a single in-image neighbor at offset 2
        ne = connectivity_loss(t(m_a[:1, :]), t(m_v[:1, :]), region[:1, :], Box(0, 0, 3, 1),
                               LossConfig(enable_uniform=False)).item()
        assert ne == pytest.approx(math.log(2), abs=1e-12)
        # uniform fixture on the 2x2 grid
        region_u = np.ones((2, 2), bool)
        un = connectivity_loss(t([[0.5, 0.2], [0.0, 0.0]]), t([[0.8, 0.2], [0.0, 0.0]]), region_u,
                               Box(0, 0, 2, 2), LossConfig(enable_neighbor=False)).item()
        assert un == pytest.approx(0.075, abs=1e-12)
        assert ne + un == pytest.approx(0.7681, abs=1e-4)

    def test_uniform_only_when_neighbor_off(self, rng):
        m_a, m_v, region, box, _ = random_instance(rng)
        got = connectivity_loss(t(m_a), t(m_v), region, Box(*box), LossConfig(enable_neighbor=False))
        assert got.item() == pytest.approx(uniform_loss(t(m_a), t(m_v), region).item(), abs=1e-12)

    def test_visible_receives_no_gradient(self, rng):
        m_a, m_v, region, box, _ = random_instance(rng)
        mv = t(m_v).requires_grad_()
        ma = t(m_a).requires_grad_()
        connectivity_loss(ma, mv, region, Box(*box), LossConfig()).backward()
        assert mv.grad is None
        assert ma.grad is not None


class TestProjection:
    def test_exact_box_fill(self):
        b = Box(2, 1, 6, 5)
        assert projection_loss(t(rasterize_box(b, 8, 8).astype(float)), b).item() == 0.0

    def test_empty_mask_is_one(self):
        assert projection_loss(t(np.zeros((8, 8))), Box(2, 1, 6, 5)).item() == pytest.approx(1.0, abs=1e-6)

    def test_holes_do_not_matter(self):
        b = Box(1, 1, 7, 7)
        m = rasterize_box(b, 8, 8).astype(float)
        m[3:5, 3:5] = 0.0
        assert projection_loss(t(m), b).item() == 0.0

    def test_degenerate_box(self):
        with pytest.raises(ValueError):
            projection_loss(t(np.zeros((4, 4))), Box(2, 2, 2, 3))


class TestPairwise:
    def test_uniform_image_full_mask(self):
        b = Box(1, 1, 6, 6)
        m = rasterize_box(b, 8, 8).astype(float)
        img = torch.full((3, 8, 8), 0.4, dtype=D)
        assert pairwise_loss(t(m), img, b).item() < 1e-5

    def test_certain_disagreement_hits_clamp(self):
        b = Box(0, 0, 2, 1)
        img = torch.full((3, 1, 2), 0.4, dtype=D)
        m = t([[1.0, 0.0]])
        assert pairwise_loss(m, img, b, eps=1e-6).item() == pytest.approx(-math.log(1e-6), rel=1e-9)

    def test_half_half(self):
        b = Box(0, 0, 2, 1)
        img = torch.full((3, 1, 2), 0.4, dtype=D)
        assert pairwise_loss(t([[0.5, 0.5]]), img, b).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_dissimilar_colors_excluded(self):
        b = Box(0, 0, 2, 1)
        img = torch.zeros((3, 1, 2), dtype=D)
        img[:, 0, 1] = 1.0
        assert pairwise_loss(t([[1.0, 0.0]]), img, b).item() == 0.0

    def test_touching_edges_cross_the_border(self):
        b = Box(0, 0, 1, 1)  # only the left pixel is inside
        img = torch.full((3, 1, 2), 0.4, dtype=D)
        m = t([[0.5, 0.5]])
        assert pairwise_loss(m, img, b).item() == 0.0
        assert pairwise_loss(m, img, b, edges="touching").item() == pytest.approx(math.log(2), abs=1e-12)

    def test_unknown_edge_mode(self):
        with pytest.raises(ValueError):
            LossConfig(pairwise_edges="all")


class TestBranchLosses:
    def test_amodal_mixture_weights(self, rng):
        m_a, m_v, region, box, image = random_instance(rng)
        img = t(image).permute(2, 0, 1)
        cfg = LossConfig()
        parts = {
            "proj": projection_loss(t(m_a), Box(*box)).item(),
            "pair": pairwise_loss(t(m_a), img, Box(*box), 0.3, cfg.pairwise_sigma).item(),
            "con": connectivity_loss(t(m_a), t(m_v), region, Box(*box), cfg).item(),
        }
        total = amodal_branch_loss(t(m_a), t(m_v), img, Box(*box), region, cfg).item()
        assert total == pytest.approx(2.0 * parts["proj"] + parts["pair"] + parts["con"], abs=1e-12)
        no_con = amodal_branch_loss(t(m_a), t(m_v), img, Box(*box), region, LossConfig(alpha3_a=0.0)).item()
        assert no_con == pytest.approx(2.0 * parts["proj"] + parts["pair"], abs=1e-12)

    def test_default_weights(self):
        cfg = LossConfig()
        assert (cfg.alpha1_a, cfg.alpha2_a, cfg.alpha3_a) == (2.0, 1.0, 1.0)

    def test_visible_fill_on_uniform_image(self):
        b = Box(2, 2, 6, 7)
        m = t(rasterize_box(b, 8, 8).astype(float))
        img = torch.full((3, 8, 8), 0.7, dtype=D)
        assert visible_branch_loss(m, img, b, LossConfig()).item() < 1e-5
        assert visible_branch_loss(t(np.zeros((8, 8))), img, b, LossConfig()).item() == pytest.approx(1.0, abs=1e-5)

    def test_batched_matches_single(self, rng):
        items = [random_instance(rng) for _ in range(4)]
        cfg = LossConfig()
        m_a = t(np.stack([i[0] for i in items]))
        m_v = t(np.stack([i[1] for i in items]))
        region = np.stack([i[2] for i in items])
        boxes = torch.from_numpy(np.stack([rasterize_box(Box(*i[3]), 8, 8) for i in items]))
        img = t(np.stack([i[4] for i in items])).permute(0, 3, 1, 2)
        batched = amodal_branch_terms(m_a, m_v, img, boxes, region, cfg)
        for k, (a, v, r, b, im) in enumerate(items):
            single = amodal_branch_terms(t(a), t(v), t(im).permute(2, 0, 1), Box(*b), r, cfg)
            for name in single:
                assert batched[name][k].item() == pytest.approx(single[name].item(), abs=1e-12)


# ---------------------------------------------------------------------------
# oracle equivalence on random instances
# ---------------------------------------------------------------------------

def _valid_box(box):
    return box[0] < box[2] and box[1] < box[3]


class TestOracleEquivalence:
    N = 100

    def _instances(self):
        rng = np.random.default_rng(2024)
        return [random_instance(rng) for _ in range(self.N)]

    def test_region(self):
        rng = np.random.default_rng(7)
        for m_a, _, region, _, _ in self._instances():
            alpha = float(rng.uniform(0.5, 2))
            got = region_loss(t(m_a), region, alpha, 1e-6).item()
            assert got == pytest.approx(oracles.region_bce(m_a.tolist(), region.astype(int).tolist(), alpha, 1e-6), abs=1e-6)

    def test_neighbor(self):
        for m_a, m_v, region, box, _ in self._instances():
            pov = build_pov_set(t(m_v), region, 0.5)
            got = neighbor_loss(t(m_a), build_edge_set(pov, 1, 8, 8, Box(*box))).item()
            want = oracles.neighbor(m_a.tolist(), m_v.tolist(), region.tolist(), box, 0.5, 1, 1e-6)
            assert got == pytest.approx(want, abs=1e-6)

    def test_uniform(self):
        for m_a, m_v, region, _, _ in self._instances():
            got = uniform_loss(t(m_a), t(m_v), region, 1.5).item()
            assert got == pytest.approx(oracles.uniform(m_a.tolist(), m_v.tolist(), region.tolist(), 1.5), abs=1e-6)

    def test_connectivity(self):
        cfg = LossConfig()
        for m_a, m_v, region, box, _ in self._instances():
            got = connectivity_loss(t(m_a), t(m_v), region, Box(*box), cfg).item()
            want = (oracles.neighbor(m_a.tolist(), m_v.tolist(), region.tolist(), box, 0.5, 1, 1e-6)
                    + oracles.uniform(m_a.tolist(), m_v.tolist(), region.tolist(), 1.0))
            assert got == pytest.approx(want, abs=1e-6)

    def test_projection(self):
        for m_a, _, _, box, _ in self._instances():
            if not _valid_box(box):
                continue
            got = projection_loss(t(m_a), Box(*box), 1e-6).item()
            assert got == pytest.approx(oracles.projection(m_a.tolist(), box, 1e-6), abs=1e-6)

    def test_pairwise(self):
        for m_a, _, _, box, image in self._instances():
            img = t(image).permute(2, 0, 1)
            got = pairwise_loss(t(m_a), img, Box(*box), 0.3, 0.1, 1e-6).item()
            want = oracles.pairwise(m_a.tolist(), [[tuple(px) for px in row] for row in image.tolist()],
                                    box, 0.3, 0.1, 1e-6)
            assert got == pytest.approx(want, abs=1e-6)

    def test_pairwise_touching(self):
        for m_a, _, _, box, image in self._instances():
            img = t(image).permute(2, 0, 1)
            got = pairwise_loss(t(m_a), img, Box(*box), 0.3, 0.1, 1e-6, edges="touching").item()
            want = oracles.pairwise(m_a.tolist(), [[tuple(px) for px in row] for row in image.tolist()],
                                    box, 0.3, 0.1, 1e-6, touching=True)
            assert got == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# gradients and the expansion mechanism
# ---------------------------------------------------------------------------

def central_difference(fn, x, step=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def autograd(fn_t, x):
    xt = t(x).requires_grad_()
    fn_t(xt).backward()
    return xt.grad.numpy()


def rel_error(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.fixture(scope="module")
def grad_case():
    rng = np.random.default_rng(99)
    m_a, m_v, region, box, image = random_instance(rng)
    while not _valid_box(box):
        m_a, m_v, region, box, image = random_instance(rng)
    return m_a, m_v, region, box, image


class TestGradients:
    def check(self, fn, x):
        num = central_difference(lambda v: fn(t(v)).item(), x)
        ana = autograd(fn, x)
        assert rel_error(ana, num) < 1e-3

    def test_region(self, grad_case):
        m_a, _, region, _, _ = grad_case
        self.check(lambda x: region_loss(x, region, 1.0), m_a)

    def test_neighbor(self, grad_case):
        m_a, m_v, region, box, _ = grad_case
        pov = pov_mask(t(m_v), region, 0.5)
        self.check(lambda x: dense_neighbor_loss(x, pov, Box(*box), 1), m_a)

    def test_uniform(self, grad_case):
        m_a, m_v, region, _, _ = grad_case
        self.check(lambda x: uniform_loss(x, t(m_v), region, 1.0), m_a)

    def test_connectivity(self, grad_case):
        m_a, m_v, region, box, _ = grad_case
        self.check(lambda x: connectivity_loss(x, t(m_v), region, Box(*box), LossConfig()), m_a)

    def test_projection(self, grad_case):
        m_a, _, _, box, _ = grad_case
        self.check(lambda x: projection_loss(x, Box(*box)), m_a)

    def test_pairwise(self, grad_case):
        m_a, _, _, box, image = grad_case
        img = t(image).permute(2, 0, 1)
        self.check(lambda x: pairwise_loss(x, img, Box(*box)), m_a)


def expansion_fixture(h=16, w=16):
    """Occluder covers the right part of the overlap region; the visible mask
    fills only the left, unoccluded part."""
    amodal_box = Box(2, 3, 14, 13)
    region = rasterize_box(Box(6, 3, 14, 13), h, w)
    m_v = np.full((h, w), 0.05)
    m_v[3:13, 2:9] = 0.95
    return m_v, region, amodal_box


def test_directed_expansion_band_pushes_outward():
    m_v, region, amodal_box = expansion_fixture()
    cfg = LossConfig()
    m_a = t(m_v.copy()).requires_grad_()
    connectivity_loss(m_a, t(m_v), region, amodal_box, cfg).backward()
    stepped = m_a.detach() - 0.1 * m_a.grad
    pov = build_pov_set(t(m_v), region, cfg.t)
    d = cfg.neighbor_gap + 1
    band = set()
    for (i, j) in pov:
        for di in range(-d, d + 1):
            for dj in range(-d, d + 1):
                q = (i + di, j + dj)
                if 0 <= q[0] < 16 and 0 <= q[1] < 16 and m_v[q] <= cfg.t:
                    band.add(q)
    assert band
    increased = [q for q in band if stepped[q] > m_a.detach()[q]]
    assert increased
    # and the increase is strictly inside the amodal box, where the expansion belongs
    assert any(amodal_box.contains(*q) for q in increased)
