import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stationflow import clustering as cl
from stationflow import demand
from stationflow.errors import DataError

from conftest import make_trips


def brute_force_objective(d: np.ndarray, k: int) -> float:
    n = d.shape[0]
    return min(
        d[:, list(m)].min(axis=1).sum() for m in itertools.combinations(range(n), k)
    )


def is_swap_stable(d: np.ndarray, medoids: np.ndarray) -> bool:
    n = d.shape[0]
    current = d[:, medoids].min(axis=1).sum()
    for i in range(len(medoids)):
        for o in range(n):
            if o in medoids:
                continue
            trial = medoids.copy()
            trial[i] = o
            if d[:, trial].min(axis=1).sum() < current - 1e-12:
                return False
    return True


class TestGeoDissimilarity:
    def test_identical_stations(self):
        u = np.array([0.5, 0.25, 0.25, 0.5, 0.5])
        assert cl.geo_dissimilarity(0.0, u, u, 0.505) == 0.0

    def test_zero_tradeoff_is_profile_gap(self):
        u1 = np.array([1.0, 0, 0, 1, 0])
        u2 = np.array([0.0, 1, 0, 1, 0])
        assert cl.geo_dissimilarity(1000.0, u1, u2, 0.0) == pytest.approx(math.sqrt(2))

    def test_hand_value(self):
        u1 = np.array([1.0, 0, 0, 1, 0])
        u2 = np.array([0.0, 1, 0, 1, 0])
        assert cl.geo_dissimilarity(1000.0, u1, u2, 0.505) == pytest.approx(505 + math.sqrt(2))

    def test_matrix_symmetry_and_diagonal(self):
        rng = np.random.default_rng(0)
        gd = cl.symmetrize(rng.random((6, 6)) * 100)
        np.fill_diagonal(gd, 0)
        profiles = rng.random((6, 5))
        d = cl.geo_dissimilarity_matrix(gd, profiles, 0.3)
        assert np.allclose(d, d.T)
        assert np.allclose(np.diagonal(d), 0)


class TestKMedoids:
    def test_k_equals_n(self):
        d = cl.pairwise_l2(np.arange(5.0).reshape(-1, 1))
        res = cl.k_medoids(d, 5, seed=1)
        assert np.array_equal(res.medoids, np.arange(5))
        assert cl.clustering_objective(d, res) == 0.0

    def test_separated_pairs(self):
        d = np.abs(np.subtract.outer([0.0, 1, 10, 11], [0.0, 1, 10, 11]))
        res = cl.k_medoids(d, 2, seed=0)
        assert list(res.assignment) == [0, 0, 1, 1]
        assert cl.clustering_objective(d, res) == brute_force_objective(d, 2)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            n = int(rng.integers(4, 9))
            k = int(rng.integers(2, 4))
            d = cl.pairwise_l2(rng.random((n, 3)))
            res = cl.k_medoids(d, k, seed=trial)
            obj = cl.clustering_objective(d, res)
            assert obj <= 1.05 * brute_force_objective(d, k) + 1e-12
            assert is_swap_stable(d, res.medoids)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        d = cl.pairwise_l2(rng.random((30, 2)))
        a = cl.k_medoids(d, 4, seed=9)
        b = cl.k_medoids(d, 4, seed=9)
        assert np.array_equal(a.medoids, b.medoids)
        assert np.array_equal(a.assignment, b.assignment)

    def test_k_too_large_fatal(self):
        d = np.zeros((3, 3))
        with pytest.raises(DataError):
            cl.k_medoids(d, 4, seed=0)

    def test_duplicate_points_allowed(self):
        d = np.zeros((4, 4))
        res = cl.k_medoids(d, 2, seed=0)
        res.validate()

    def test_clustering_validate(self):
        d = cl.pairwise_l2(np.random.default_rng(1).random((12, 2)))
        res = cl.k_medoids(d, 3, seed=4)
        res.validate()

    def test_alternation_objective_never_increases(self):
        # replay the assign/update rounds with the update rule restated
        # here, asserting the objective is non-increasing round by round
        from stationflow.clustering import _assign, _farthest_first

        rng = np.random.default_rng(6)
        for trial in range(10):
            n, k = 25, 4
            d = cl.pairwise_l2(rng.random((n, 2)))
            medoids = _farthest_first(d, k, np.random.default_rng(trial))
            prev_obj = np.inf
            for _ in range(30):
                assignment = _assign(d, medoids)
                obj = d[np.arange(n), medoids[assignment]].sum()
                assert obj <= prev_obj + 1e-12
                prev_obj = obj
                new_medoids = np.sort(
                    [
                        members[int(np.argmin(d[np.ix_(members, members)].sum(axis=1)))]
                        for members in (np.flatnonzero(assignment == c) for c in range(k))
                    ]
                )
                if np.array_equal(new_medoids, medoids):
                    break
                medoids = np.asarray(new_medoids)


class TestApportion:
    def test_symmetric(self):
        assert cl.apportion_groups([10, 10, 10], 3) == [1, 1, 1]

    def test_largest_remainder(self):
        assert cl.apportion_groups([25, 10, 5], 7) == [4, 2, 1]

    def test_capacity_bound(self):
        assert cl.apportion_groups([39, 1], 3) == [2, 1]

    def test_too_few_slots_fatal(self):
        with pytest.raises(DataError):
            cl.apportion_groups([5, 5, 5], 2)

    def test_too_many_slots_fatal(self):
        with pytest.raises(DataError):
            cl.apportion_groups([2, 2], 5)

    @given(
        st.lists(st.integers(1, 40), min_size=1, max_size=8),
        st.integers(1, 60),
    )
    @settings(max_examples=500, deadline=None)
    def test_sum_and_bounds(self, sizes, k1):
        total = sum(sizes)
        if not len(sizes) <= k1 <= total:
            return
        counts = cl.apportion_groups(sizes, k1)
        assert sum(counts) == k1
        assert all(1 <= c <= s for c, s in zip(counts, sizes))


class TestGeoClusterStep:
    def test_single_group_is_plain_k_medoids(self):
        rng = np.random.default_rng(3)
        d = cl.pairwise_l2(rng.random((20, 2)))
        step = cl.geo_cluster_step([np.arange(20)], d, 4, seed=100)
        plain = cl.k_medoids(d, 4, seed=100 + 7919 * 0)
        assert np.array_equal(np.sort(step.medoids), np.sort(plain.medoids))

    def test_singleton_group(self):
        rng = np.random.default_rng(3)
        d = cl.pairwise_l2(rng.random((5, 2)))
        step = cl.geo_cluster_step([np.array([0]), np.arange(1, 5)], d, 3, seed=0)
        assert step.assignment[0] == 0
        assert 0 in step.medoids
        step.validate()

    def test_counts_sum_to_k1(self):
        rng = np.random.default_rng(4)
        d = cl.pairwise_l2(rng.random((30, 2)))
        groups = [np.arange(0, 12), np.arange(12, 20), np.arange(20, 30)]
        step = cl.geo_cluster_step(groups, d, 7, seed=1)
        assert step.k == 7
        step.validate()


def fig5_fixture():
    """20 stations, 5 clusters; station '72' departs 331/9/160 to clusters
    0..2 in the morning slot and receives 805/113/82 from them."""
    stations = ["72"] + [f"X{i}" for i in range(1, 20)]
    assignment = np.array([0] + [(i % 5) for i in range(1, 20)])
    members = {
        c: [s for s, a in zip(stations, assignment) if a == c and s != "72"]
        for c in range(5)
    }
    base = "2018-01-02 08:{m:02d}:{s:02d}"
    rows = []
    for c, count in {0: 331, 1: 9, 2: 160}.items():
        for i in range(count):
            rows.append(
                (base.format(m=i // 60 % 60, s=i % 60), "2018-01-02 08:59:59", "72", members[c][i % len(members[c])])
            )
    for c, count in {0: 805, 1: 113, 2: 82}.items():
        for i in range(count):
            rows.append(
                ("2018-01-02 07:{:02d}:{:02d}".format(i // 60 % 60, i % 60),
                 base.format(m=i // 60 % 60, s=i % 60), members[c][i % len(members[c])], "72")
            )
    return stations, assignment, make_trips(rows)


class TestTransitMatrix:
    def test_fig5_row(self):
        stations, assignment, trips = fig5_fixture()
        transitions = cl.TripTransitions.from_trips(trips, stations)
        row = cl.build_transit_matrices(assignment, 5, transitions)[0, 0]
        expected = [0.662, 0.018, 0.32, 0, 0, 0.805, 0.113, 0.082, 0, 0]
        np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_no_departures_half_is_zero(self):
        stations, assignment, trips = fig5_fixture()
        transitions = cl.TripTransitions.from_trips(trips, stations)
        t = cl.build_transit_matrices(assignment, 5, transitions)
        # station 72 has no slot-2 departures: ride-to half of row 2 is zero
        assert np.all(t[0, 1, :5] == 0)

    def test_point_mass(self):
        stations = ["A", "B", "C"]
        assignment = np.array([0, 1, 2])
        trips = make_trips(
            [("2018-01-02 08:00:00", "2018-01-02 08:10:00", "A", "C")] * 4
        )
        transitions = cl.TripTransitions.from_trips(trips, stations)
        t = cl.build_transit_matrices(assignment, 3, transitions)
        np.testing.assert_allclose(t[0, 0, :3], [0, 0, 1])

    def test_halves_sum_to_one_or_zero(self, small_city):
        transitions = cl.TripTransitions.from_trips(small_city.trips, small_city.stations)
        labels = small_city.community_labels()
        t = cl.build_transit_matrices(labels, 4, transitions)
        for half in (t[:, :, :4].sum(axis=2), t[:, :, 4:].sum(axis=2)):
            ok = np.isclose(half, 1.0, atol=1e-9) | (half == 0.0)
            assert np.all(ok)

    def test_single_station_wrapper(self):
        stations, assignment, trips = fig5_fixture()
        transitions = cl.TripTransitions.from_trips(trips, stations)
        clustering = cl.Clustering(assignment=assignment, medoids=np.array([0, 1, 2, 3, 4]))
        m = cl.build_transit_matrix("72", clustering, transitions, stations)
        assert m.shape == (5, 10)


class TestTransitDissimilarity:
    def test_identity(self):
        a = np.random.default_rng(0).random((5, 8))
        assert cl.transit_dissimilarity(a, a) == 0.0

    def test_single_entry(self):
        a = np.zeros((5, 8))
        b = np.zeros((5, 8))
        b[2, 3] = 0.5
        assert cl.transit_dissimilarity(a, b) == pytest.approx(0.5)

    def test_hand_frobenius(self):
        rng = np.random.default_rng(1)
        a = rng.random((5, 4))
        b = rng.random((5, 4))
        by_hand = math.sqrt(sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(4)))
        assert cl.transit_dissimilarity(a, b) == pytest.approx(by_hand)

    def test_shape_mismatch_fatal(self):
        with pytest.raises(DataError):
            cl.transit_dissimilarity(np.zeros((5, 8)), np.zeros((5, 6)))

    def test_metric_properties_on_random_triples(self):
        rng = np.random.default_rng(7)
        t = rng.random((6, 5, 8))
        d = cl.transit_dissimilarity_matrix(t)
        assert np.allclose(d, d.T)
        assert np.all(d >= 0)
        off_diagonal = d[~np.eye(6, dtype=bool)]
        assert np.all(off_diagonal > 0)  # zero only for equal matrices
        for i, j, k in itertools.permutations(range(6), 3):
            assert d[i, j] <= d[i, k] + d[k, j] + 1e-9


class TestTransitClusterStep:
    def test_identical_matrices_stable(self):
        t = np.tile(np.random.default_rng(0).random((1, 5, 8)), (6, 1, 1))
        a = cl.transit_cluster_step(t, 2, seed=0)
        b = cl.transit_cluster_step(t, 2, seed=0)
        assert np.array_equal(a.assignment, b.assignment)
        obj = cl.clustering_objective(cl.transit_dissimilarity_matrix(t), a)
        assert obj == pytest.approx(0.0, abs=1e-6)

    def test_orthogonal_point_masses_recovered(self):
        t = np.zeros((8, 5, 8))
        t[:4, :, 0] = 1.0
        t[4:, :, 1] = 1.0
        res = cl.transit_cluster_step(t, 2, seed=3)
        first = set(res.assignment[:4])
        second = set(res.assignment[4:])
        assert len(first) == 1 and len(second) == 1 and first != second


class TestQualityReport:
    def test_singletons_have_zero_inner(self):
        gd = cl.pairwise_l2(np.arange(4.0).reshape(-1, 1))
        c = cl.Clustering(assignment=np.arange(4), medoids=np.arange(4))
        rep = cl.quality_report(c, None, gd, gd, gd, None)
        assert rep.agd_inner == 0.0
        assert rep.td_gc == 0.0

    def test_single_pair_cluster(self):
        gd = np.array([[0.0, 100.0], [100.0, 0.0]])
        c = cl.Clustering(assignment=np.array([0, 0]), medoids=np.array([0]))
        rep = cl.quality_report(c, None, gd, gd, gd, None)
        assert rep.agd_inner == 100.0
        assert rep.agd_inter == 0.0

    def test_tdf_is_sum(self):
        gd = cl.pairwise_l2(np.random.default_rng(2).random((6, 2)))
        c = cl.k_medoids(gd, 2, seed=0)
        rep = cl.quality_report(c, c, gd, gd, gd, gd * 2)
        assert rep.tdf == pytest.approx(rep.td_gc + rep.td_tc)


def _city_inputs(city):
    profiles, _ = demand.checkout_profiles(city.trips, city.status, 2018, city.stations)
    u = demand.profile_matrix(profiles)
    gd_sym = cl.symmetrize(city.distances.d)
    transitions = cl.TripTransitions.from_trips(city.trips, city.stations)
    return gd_sym, u, transitions


class TestAdaTC:
    def test_n1_is_single_gc_pass(self, small_city):
        gd_sym, u, transitions = _city_inputs(small_city)
        params = cl.AdaTCParams(rho1=0.505, k1=8, k2=4, n_outer=1, seed=5)
        res = cl.adatc_plus(gd_sym, u, transitions, params)
        d_gc = cl.geo_dissimilarity_matrix(gd_sym, u, 0.505)
        plain = cl.geo_cluster_step([np.arange(len(u))], d_gc, 8, seed=5 + 7919)
        assert np.array_equal(res.clustering.assignment, plain.assignment)
        assert res.iterations == 1
        assert not res.converged
        assert len(res.reports) == 1

    def test_deterministic(self, small_city):
        gd_sym, u, transitions = _city_inputs(small_city)
        params = cl.AdaTCParams(rho1=0.505, k1=8, k2=4, seed=7)
        a = cl.adatc_plus(gd_sym, u, transitions, params)
        b = cl.adatc_plus(gd_sym, u, transitions, params)
        assert np.array_equal(a.clustering.assignment, b.clustering.assignment)
        assert np.array_equal(a.tc_clustering.assignment, b.tc_clustering.assignment)
        assert a.iterations == b.iterations

    def test_params_validation(self):
        with pytest.raises(DataError):
            cl.AdaTCParams(rho1=0.1, k1=4, k2=6).validate(10)
        with pytest.raises(DataError):
            cl.AdaTCParams(rho1=-1.0, k1=4, k2=2).validate(10)

    def test_profile_scale_invariance_of_gc(self, small_city):
        # scaling raw check-out rates within a day-class group leaves the
        # normalized profiles, hence the clustering, unchanged
        gd_sym, u, transitions = _city_inputs(small_city)
        d1 = cl.geo_dissimilarity_matrix(gd_sym, u, 0.3)
        u2 = demand.checkout_profile(np.array([3.0, 1.0, 2.0, 4.0, 1.0]))
        u2_scaled = demand.checkout_profile(np.array([3.0, 1.0, 2.0, 4.0, 1.0]) * np.array([7, 7, 7, 2, 2]))
        np.testing.assert_allclose(u2, u2_scaled)
        a = cl.k_medoids(d1, 5, seed=1)
        b = cl.k_medoids(cl.geo_dissimilarity_matrix(gd_sym, u, 0.3), 5, seed=1)
        assert np.array_equal(a.assignment, b.assignment)


class TestGridSearch:
    def test_single_cell(self, small_city):
        gd_sym, u, transitions = _city_inputs(small_city)
        cells = cl.grid_search(
            gd_sym, u, transitions,
            rho1_values=(0.505,), k1_values=(8,), k2_values=(4,), seed=1,
        )
        assert len(cells) == 1
        assert cells[0].error is None
        assert cells[0].pareto  # a lone windowed cell is undominated

    def test_infeasible_cell_logged_not_fatal(self, small_city):
        gd_sym, u, transitions = _city_inputs(small_city)
        cells = cl.grid_search(
            gd_sym, u, transitions,
            rho1_values=(0.505,), k1_values=(8, 4), k2_values=(6,), seed=1,
        )
        ok = [c for c in cells if c.error is None]
        bad = [c for c in cells if c.error is not None]
        assert len(ok) == 1 and len(bad) == 1

    def test_checkpoint_resume_skips_completed(self, small_city, tmp_path):
        gd_sym, u, transitions = _city_inputs(small_city)
        ckpt = tmp_path / "grid.jsonl"
        kwargs = dict(rho1_values=(0.505,), k1_values=(8,), k2_values=(4,), seed=1)
        first = cl.grid_search(gd_sym, u, transitions, checkpoint_path=ckpt, **kwargs)
        # poison the stored cell; a resume must keep the stored value,
        # proving the cell was not recomputed
        rec = json.loads(ckpt.read_text().strip())
        rec["agd_inner"] = 123456.0
        ckpt.write_text(json.dumps(rec) + "\n")
        second = cl.grid_search(gd_sym, u, transitions, checkpoint_path=ckpt, **kwargs)
        assert first[0].report.agd_inner != 123456.0
        assert second[0].report.agd_inner == 123456.0

    def test_default_grid_has_330_cells(self):
        assert len(cl.RHO1_GRID) * len(cl.K1_GRID) * len(cl.K2_GRID) == 330

    def test_k2_40_runs_within_inner_cap_at_full_scale(self):
        rng = np.random.default_rng(801)
        t = rng.random((801, 5, 10))
        res = cl.transit_cluster_step(t, 40, seed=0, max_iters=100)
        assert res.k == 40
        res.validate()

    def test_pareto_marking(self):
        def rep(ai, ci, aj, cj):
            return cl.ClusterQualityReport(ai, ci, aj, cj, 0.0, 0.0)

        cells = [
            cl.GridCell(0.2, 10, 5, report=rep(1.0, 1.0, 10.0, 10.0)),
            cl.GridCell(0.3, 10, 5, report=rep(2.0, 2.0, 5.0, 5.0)),   # dominated
            cl.GridCell(0.4, 10, 5, report=rep(0.5, 3.0, 10.0, 2.0)),  # trade-off
            cl.GridCell(5.0, 10, 5, report=rep(0.0, 0.0, 99.0, 99.0)),  # outside window
        ]
        cl.mark_pareto(cells, (0.1, 0.505))
        assert [c.pareto for c in cells] == [True, False, True, False]
        assert cl.suggest_mid_k1(cells) is not None
