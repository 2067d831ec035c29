"""End-to-end properties over randomized synthetic families."""

import numpy as np
import pytest

from app.errors import InjectedFault
from app.schemas import Budget, FamilySpec, OperatorParams, TensorSpec
from app.services.executor import replay
from app.services.experiments import budget_sweep, overhead_report, scaling_sweep, spearman
from app.services.family import generate_family
from app.services.snapshots import STAGES, FaultInjector, SnapshotStore, open_snapshot
from app.services.verify import (
    check_soundness,
    coefficient_drift_bound,
    deviation,
    full_read_merge,
    load_tensors,
    omission_bound,
    omission_difference,
)
from conftest import as_bits, small_spec

KINDS = ["full", "explicit-delta", "lora"]
KS = [1, 2, 4, 8]
OPERATORS = [
    OperatorParams(operator="avg-fixed"),
    OperatorParams(operator="avg-renorm"),
    OperatorParams(operator="ties", ties_density=0.3),
    OperatorParams(operator="dare", dare_drop_p=0.4, seed=5),
]
TOLERANCE = 1e-6


def _within(measured, bound):
    return measured <= bound * (1 + TOLERANCE) + 1e-12


def _mixed(seed):
    """Family overrides for the seed-th randomized case"""
    kinds = KINDS[seed % 3:] + KINDS[:seed % 3]
    return dict(k=KS[seed % 4], kinds=kinds, seed=100 + seed, sparsity=0.3 * (seed % 2))


def _params_for(params, k, rng):
    """Operator params with random fixed coefficients for averaging operators"""
    if params.operator in ("avg-fixed", "dare"):
        return params.model_copy(update={"alphas": [float(a) for a in rng.uniform(0.1, 1.0, k)]})
    return params


def _tensors(handle):
    return {name: as_bits(values) for name, values in load_tensors(handle).items()}


class TestFullBudgetConsistency:
    """Test FULL-budget runs against the whole-tensor oracle"""

    @pytest.mark.parametrize("seed", range(20))
    def test_bit_identical(self, rig_factory, seed):
        """Test every operator at FULL matches the full-read merge bit for bit"""
        rig = rig_factory(**_mixed(seed))
        rng = np.random.default_rng(seed)
        for params in OPERATORS:
            params = _params_for(params, rig.layout.spec.k, rng)
            snapshot, _ = rig.run(rig.plan(params))
            reference = full_read_merge(rig.base, rig.sources, params)
            with open_snapshot(snapshot.path, base=rig.base) as merged:
                ours = _tensors(merged)
            assert all(np.array_equal(ours[name], as_bits(reference[name])) for name in reference), params.operator


class TestBudgetSoundness:
    """Test budget soundness over randomized (family, operator, budget) triples"""

    def test_no_violations(self, rig_factory):
        """Test 200 runs never read more than planned or planned more than the budget"""
        rng = np.random.default_rng(7)
        violations = []
        for seed in range(10):
            rig = rig_factory(**_mixed(seed))
            full = rig.catalog.full_cost()
            for params in OPERATORS:
                params = _params_for(params, rig.layout.spec.k, rng)
                for _ in range(5):
                    budget = Budget.of_bytes(int(rng.integers(0, full + 1)))
                    plan = rig.plan(params, budget)
                    _, manifest = rig.run(plan)
                    report = check_soundness(manifest, plan)
                    assert report.budget_bytes == budget.limit_bytes
                    if not report.passed:
                        violations.append((seed, params.operator, budget.limit_bytes, report.failures))
        assert violations == []


class TestOmissionBound:
    """Test the omission bound over random masks"""

    def test_random_masks(self, rig_factory):
        """Test 100 random masks stay within both bound forms and the exact difference holds"""
        rig = rig_factory(k=4, kinds=KINDS, delta_scale=0.1, seed=11)
        params = OperatorParams(alphas=[0.4, 0.3, 0.2, 0.1])
        reference = full_read_merge(rig.base, rig.sources, params)
        universe = rig.catalog.universe()
        rng = np.random.default_rng(11)
        for _ in range(100):
            plan = rig.masked_plan(params, [u for u in universe if rng.random() < rng.random()])
            snapshot, _ = rig.run(plan)
            with open_snapshot(snapshot.path, base=rig.base) as handle:
                merged = load_tensors(handle)
            measured = deviation(merged, reference).abs_l2
            bound = omission_bound(plan, rig.catalog)
            assert _within(measured, bound.l2_form)
            assert bound.l2_form <= bound.l1_form * (1 + TOLERANCE)

            rebuilt = omission_difference(plan, rig.base, rig.sources)
            direct = np.concatenate([reference[n].astype(np.float64).ravel() - merged[n].astype(np.float64).ravel() for n in rig.base.tensor_order])
            exact = np.concatenate([rebuilt[n].ravel() for n in rig.base.tensor_order])
            assert np.linalg.norm(direct - exact) <= TOLERANCE * max(np.linalg.norm(exact), 1e-30) or np.linalg.norm(exact) == 0


class TestDriftBound:
    """Test the coefficient-drift bound over random masks"""

    def test_random_masks(self, rig_factory):
        """Test 100 renormalized merges stay within the drift bound of the full fixed average"""
        rig = rig_factory(k=4, kinds=KINDS, delta_scale=0.1, seed=12)
        params = OperatorParams(operator="avg-renorm")
        reference = full_read_merge(rig.base, rig.sources, OperatorParams())
        universe = rig.catalog.universe()
        rng = np.random.default_rng(12)
        for _ in range(100):
            plan = rig.masked_plan(params, [u for u in universe if rng.random() < rng.random()])
            snapshot, _ = rig.run(plan)
            with open_snapshot(snapshot.path, base=rig.base) as handle:
                measured = deviation(handle, reference).abs_l2
            assert _within(measured, coefficient_drift_bound(plan, rig.catalog))


class TestScaling:
    """Test naive and budgeted reads as K grows under a fixed budget"""

    def test_inverse_k_fraction(self, tmp_path):
        """Test the read fraction respects B/(K mean cost) and naive bytes are linear in K"""
        rows, r2 = scaling_sweep([2, 4, 8, 16], 1024, tmp_path, template=small_spec())
        assert r2 >= 0.99
        for row in rows:
            assert row.read_fraction <= row.fraction_cap
            assert row.budgeted_expert_bytes <= 1024
        fractions = [row.read_fraction for row in rows]
        assert fractions == sorted(fractions, reverse=True)


class TestBudgetSweep:
    """Test a full 0.1 to 1.0 budget sweep on one family"""

    def test_monotone_reads(self, tmp_path):
        """Test realized reads and accessed ratio grow with the budget and FULL is exact"""
        layout = generate_family(small_spec(k=4), tmp_path / "fam")
        rows = budget_sweep(layout, OperatorParams(), tmp_path / "ws", cold_cache=False)
        assert len(rows) == 10
        reads = [row.expert_bytes for row in rows]
        ratios = [row.accessed_ratio for row in rows]
        assert reads == sorted(reads)
        assert ratios == sorted(ratios)
        assert sum(b > a for a, b in zip(reads, reads[1:])) >= 8
        assert rows[-1].rel_l2 == 0.0
        assert all(np.isfinite(row.rel_l2) for row in rows)

    @pytest.mark.slow
    def test_wall_time_tracks_reads(self, tmp_path):
        """Test cold-cache wall time ranks with realized expert bytes"""
        spec = FamilySpec(
            k=4,
            tensors=[TensorSpec(name=f"layers.{i}.mlp.up", shape=[1024, 512]) for i in range(4)],
            block_bytes=65536,
        )
        layout = generate_family(spec, tmp_path / "fam")
        rows = budget_sweep(layout, OperatorParams(operator="ties"), tmp_path / "ws", cold_cache=True, repeats=3)
        assert spearman([r.wall_seconds for r in rows], [r.expert_bytes for r in rows]) >= 0.9


class TestAtomicity:
    """Test aborts at every stage boundary"""

    def test_every_stage(self, rig):
        """Test no abort leaves a snapshot or manifest and a re-run publishes"""
        assert len(STAGES) >= 6
        plan = rig.plan(budget=Budget.of_fraction(0.5, rig.catalog.full_cost()))
        for stage in STAGES:
            with pytest.raises(InjectedFault):
                rig.run(plan, faults=FaultInjector(stage))
            assert rig.store.list_snapshots() == []
            assert not list(rig.store.snapshots_dir.rglob("manifest.json"))
        snapshot, _ = rig.run(plan)
        assert rig.store.list_snapshots() == [snapshot.snapshot_id]


class TestReplay:
    """Test replay determinism"""

    def test_replay_reproduces_ids(self, rig_factory, tmp_path):
        """Test 20 randomized runs replay into a fresh store with the same snapshot id"""
        rng = np.random.default_rng(8)
        case = 0
        for seed in range(5):
            rig = rig_factory(**_mixed(seed + 3))
            for params in OPERATORS:
                params = _params_for(params, rig.layout.spec.k, rng)
                budget = Budget.of_fraction(float(rng.uniform(0.1, 1.0)), rig.catalog.full_cost())
                snapshot, _ = rig.run(rig.plan(params, budget), reference_mode=bool(rng.integers(2)))
                fresh = SnapshotStore(tmp_path / f"replay{case}")
                replayed, _ = replay(snapshot.manifest_path, fresh, rig.base, rig.sources, rig.catalog)
                assert replayed.snapshot_id == snapshot.snapshot_id
                case += 1
        assert case == 20


class TestOverhead:
    """Test overhead accounting on a 16-expert family"""

    def test_order_of_dominance(self, tmp_path):
        """Test planning is under 5% of execution and the manifest under 0.1% of I/O"""
        spec = FamilySpec(
            k=16,
            tensors=[TensorSpec(name="layers.0.attn.qkv", shape=[512, 512]), TensorSpec(name="layers.0.mlp.up", shape=[512, 512])],
            block_bytes=65536,
        )
        layout = generate_family(spec, tmp_path / "fam")
        report = overhead_report(layout, OperatorParams(), tmp_path / "ws")
        costs = report.costs
        assert costs.base_bytes > 0 and costs.expert_bytes > 0 and costs.output_bytes > 0 and costs.metadata_bytes > 0
        assert costs.expert_bytes == 16 * 2 * 512 * 512 * 4
        assert report.plan_share < 0.05
        assert report.manifest_share < 0.001
