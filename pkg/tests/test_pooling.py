import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from higt.graph import validate
from higt.pooling import ParentPool, pool_step, pooled_token_sets
from conftest import graph_from_coords, random_graph
from oracles import central_difference, parent_pool_loop, relative_error


def pool64(dim, seed=0):
    torch.manual_seed(seed)
    return ParentPool(dim).double()


def feats(g):
    return torch.from_numpy(g.features.astype(np.float64))


class TestPoolStep:
    def test_single_child(self):
        g = graph_from_coords([(0, 0)], [(1, 1)])
        H = feats(g)
        _, out, asg = pool_step(g, H, pool64(4))
        assert asg.cluster_score.tolist() == [1.0]
        torch.testing.assert_close(out[1], H[1] + H[2], rtol=0, atol=0)
        torch.testing.assert_close(out[0], H[0], rtol=0, atol=0)

    def test_identical_children(self):
        g = graph_from_coords([(0, 0)], [(0, 0), (1, 1)])
        H = feats(g)
        H[3] = H[2]
        _, out, asg = pool_step(g, H, pool64(4, seed=3))
        assert asg.cluster_score.tolist() == [0.5, 0.5]
        torch.testing.assert_close(out[1], H[1] + H[2], rtol=0, atol=1e-15)

    def test_two_region_five_patch_oracle(self, two_region_graph):
        g = two_region_graph
        pool = pool64(4, seed=7)
        H = feats(g)
        pg, out, asg = pool_step(g, H, pool)
        want, scores = parent_pool_loop(g.level, g.parent, H.numpy(), pool.score.detach().numpy())
        np.testing.assert_allclose(out.detach().numpy(), want, rtol=0, atol=1e-12)
        got = dict(zip(asg.children.tolist(), asg.cluster_score.tolist()))
        assert got.keys() == scores.keys()
        for c in scores:
            assert got[c] == pytest.approx(scores[c], abs=1e-12)
        assert asg.child_to_cluster.tolist() == [1, 1, 2, 1, 2]

    def test_pooled_graph_structure(self, two_region_graph):
        g = two_region_graph
        pg, out, asg = pool_step(g, feats(g), pool64(4))
        assert pg.num_nodes == 3 < g.num_nodes
        assert pg.level.tolist() == [0, 1, 1]
        assert pg.coord.tolist() == g.coord[:3].tolist()
        assert pg.spatial_edges.tolist() == [[1, 2]]
        assert validate(pg) == []
        assert out.shape == (3, 4)

    def test_already_reduced_is_noop(self, two_region_graph):
        pg, _, _ = pool_step(two_region_graph, feats(two_region_graph), pool64(4))
        H = torch.randn(3, 4, dtype=torch.float64)
        with pytest.warns(RuntimeWarning):
            g2, H2, asg = pool_step(pg, H, pool64(4))
        assert g2 is pg and H2 is H and asg is None

    def test_assignment_json(self, two_region_graph):
        _, _, asg = pool_step(two_region_graph, feats(two_region_graph), pool64(4))
        d = asg.to_json()
        assert d["children"] == [3, 4, 5, 6, 7]
        assert sum(d["cluster_score"]) == pytest.approx(2.0)


class TestTokenSets:
    def test_unpooled_single_region(self, single_region_graph):
        g = single_region_graph
        ts = pooled_token_sets(g, feats(g))
        assert ts.thumbnail.shape == (4,) and ts.regions.shape == (1, 4) and ts.patches.shape == (4, 4)
        assert ts.group_sizes == [4]

    def test_after_pooling_same_grouping(self, two_region_graph):
        g = two_region_graph
        H = feats(g)
        _, pooled, _ = pool_step(g, H, pool64(4))
        before = pooled_token_sets(g, H)
        after = pooled_token_sets(g, H, pooled)
        assert before.group.tolist() == after.group.tolist() == [0, 0, 1, 0, 1]
        torch.testing.assert_close(after.patches, before.patches, rtol=0, atol=0)
        torch.testing.assert_close(after.regions, pooled[1:3], rtol=0, atol=0)
        assert (after.regions - before.regions).abs().max() > 0

    def test_ragged_groups_preserved(self):
        g = graph_from_coords([(0, 0), (0, 1)], [(1, 1), (0, 2), (0, 3), (1, 2)])
        ts = pooled_token_sets(g, feats(g))
        assert ts.group_sizes == [1, 3]


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_oracle_and_normalisation(self, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng)
        pool = pool64(4, seed % 1000)
        H = torch.from_numpy(rng.standard_normal((g.num_nodes, 4)) * 2)
        pg, out, asg = pool_step(g, H, pool)
        want, _ = parent_pool_loop(g.level, g.parent, H.numpy(), pool.score.detach().numpy())
        np.testing.assert_allclose(out.detach().numpy(), want, rtol=0, atol=1e-10)
        sums = np.zeros(pg.num_nodes)
        np.add.at(sums, asg.child_to_cluster, asg.cluster_score.detach().numpy())
        has_kids = np.isin(np.arange(pg.num_nodes), asg.child_to_cluster)
        np.testing.assert_allclose(sums[has_kids], 1.0, rtol=0, atol=1e-6)
        assert pg.num_nodes < g.num_nodes

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(4))))
    def test_sibling_permutation(self, perm):
        g = graph_from_coords([(0, 0)], [(0, 0), (0, 1), (1, 0), (1, 1)])
        pool = pool64(4, seed=5)
        H = torch.from_numpy(np.random.default_rng(1).standard_normal((6, 4)))
        _, out, asg = pool_step(g, H, pool)
        Hp = H.clone()
        Hp[2:] = H[2:][list(perm)]
        _, out_p, asg_p = pool_step(g, Hp, pool)
        torch.testing.assert_close(asg_p.cluster_score, asg.cluster_score[list(perm)], rtol=0, atol=1e-12)
        torch.testing.assert_close(out_p, out, rtol=0, atol=1e-6)


def test_scorer_gradient(two_region_graph):
    g = two_region_graph
    pool = pool64(4, seed=2)
    H = feats(g)
    probe = torch.from_numpy(np.random.default_rng(3).standard_normal((3, 4)))

    def f():
        return (pool_step(g, H, pool)[1] * probe).sum()

    pool.zero_grad()
    f().backward()
    (numeric,) = central_difference(f, [pool.score])
    assert relative_error(pool.score.grad, numeric) < 1e-3
