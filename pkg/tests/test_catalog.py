import math

import numpy as np
import pytest

from app.errors import CatalogFormatError, GeometryMismatchError
from app.schemas import AccessUnit, BlockKey, Channel
from app.services.catalog import Catalog, analyze, build_catalog, load_catalog, persist_catalog
from app.services.container import write_checkpoint
from app.services.costmodel import IoMeter
from app.services.delta_source import DeltaSource
from conftest import SMALL_BLOCKS, hand_catalog


def _base_and_expert(tmp_path, expert_values=None, name="w"):
    base_values = np.zeros((4, 4), dtype=np.float32)
    base = write_checkpoint(tmp_path / "base", {"w": base_values}, "base", block_bytes=32)
    values = base_values if expert_values is None else expert_values
    expert = write_checkpoint(tmp_path / "e0", {name: values}, "expert", block_bytes=32)
    return base, DeltaSource("e0", expert)


class TestAnalyze:
    """Test per-block analysis of one expert"""

    def test_identical_expert_has_zero_norms(self, tmp_path):
        """Test an expert equal to the base has zero delta norms"""
        base, source = _base_and_expert(tmp_path)
        entries = analyze(base, source, IoMeter())
        assert [e.stats.delta_l2 for e in entries] == [0.0, 0.0]
        assert all(e.stats.byte_cost == 32 for e in entries)

    def test_norm_of_one_shifted_block(self, tmp_path):
        """Test adding 3.0 to one 8-element block gives norm 3*sqrt(8) there only"""
        values = np.zeros((4, 4), dtype=np.float32)
        values[2:4] += 3.0
        base, source = _base_and_expert(tmp_path, values)
        entries = analyze(base, source, IoMeter())
        assert entries[0].stats.delta_l2 == 0.0
        assert entries[1].stats.delta_l2 == pytest.approx(3 * math.sqrt(8))
        assert entries[1].stats.content_hash != entries[0].stats.content_hash

    def test_different_tensor_list(self, tmp_path):
        """Test an expert with other tensors is a geometry mismatch"""
        base, source = _base_and_expert(tmp_path, np.zeros((4, 4), dtype=np.float32), name="other")
        with pytest.raises(GeometryMismatchError):
            analyze(base, source, IoMeter())

    def test_standalone_reads_are_metadata(self, tmp_path):
        """Test analysis outside a run charges the metadata channel only"""
        base, source = _base_and_expert(tmp_path)
        meter = IoMeter()
        analyze(base, source, meter)
        assert meter.bytes(Channel.EXPERT) == 0
        assert meter.bytes(Channel.METADATA) == 128

    def test_in_run_reads_are_expert_reads(self, tmp_path):
        """Test analysis inside a run charges the expert channel"""
        base, source = _base_and_expert(tmp_path)
        meter = IoMeter(in_run=True)
        analyze(base, source, meter)
        assert meter.bytes(Channel.EXPERT) == 128
        assert meter.bytes(Channel.METADATA) == 0

    def test_fallback_reads_nothing(self, tmp_path):
        """Test fallback analysis uses header geometry only"""
        base, source = _base_and_expert(tmp_path)
        meter = IoMeter()
        entries = analyze(base, source, meter, with_stats=False)
        assert meter.breakdown().total == 0
        assert all(not e.stats.has_stats and e.stats.delta_l2 is None for e in entries)
        assert all(e.stats.byte_cost == 32 for e in entries)


class TestBuildCatalog:
    """Test catalogs built from generated families"""

    def test_one_entry_per_unit(self, rig):
        """Test the universe holds every expert block"""
        assert len(rig.catalog) == 3 * SMALL_BLOCKS
        assert rig.catalog.experts == ["e00", "e01", "e02"]
        assert rig.catalog.base_id == rig.base.checkpoint_id
        assert rig.catalog.traversal_order == rig.base.tensor_order

    def test_full_cost_is_payload_volume(self, rig):
        """Test full-kind experts cost their whole payload"""
        payload = sum(meta.nbytes for meta in rig.base.header.tensors)
        assert rig.catalog.full_cost() == 3 * payload
        assert rig.catalog.mean_expert_cost() == payload

    def test_parallel_analysis_matches_serial(self, rig):
        """Test concurrent analysis builds the same universe"""
        parallel = build_catalog(rig.base, rig.sources, IoMeter(), jobs=3)
        assert parallel.universe_digest() == rig.catalog.universe_digest()
        assert [e.stats for e in parallel] == [e.stats for e in rig.catalog]

    def test_lora_costs(self, rig_factory):
        """Test lora units cost their factor rows on targets and nothing elsewhere"""
        rig = rig_factory(k=1, kinds=["lora"], lora_rank=2)
        costs = {entry.key: entry.stats.byte_cost for entry in rig.catalog}
        # 16x8 target at 2 rows per block: B rows 2x2, plus the whole 2x8 A factor
        assert costs[BlockKey("layers.0.mlp.up", 0)] == 4 * 2 * 2 + 4 * 2 * 8
        assert costs[BlockKey("layers.0.norm", 0)] == 0

    def test_fallback_experts(self, rig):
        """Test experts named as fallback carry no stats"""
        catalog = build_catalog(rig.base, rig.sources, IoMeter(), fallback_experts=["e01"])
        flags = {(e.expert, e.stats.has_stats) for e in catalog}
        assert flags == {("e00", True), ("e01", False), ("e02", True)}


class TestPersistence:
    """Test the catalog file format"""

    def test_round_trip(self, tmp_path):
        """Test 1,000 entries survive persist and load"""
        rows = [(f"e{i % 4}", "t", i // 4, 32, float(i)) for i in range(1000)]
        catalog = hand_catalog(rows)
        path = persist_catalog(catalog, tmp_path / "catalog.jsonl")
        loaded = load_catalog(path)
        assert len(loaded) == 1000
        assert {e.unit: e.stats for e in loaded} == {e.unit: e.stats for e in catalog}
        assert loaded.file_digest == catalog.file_digest
        assert loaded.file_bytes == catalog.file_bytes == path.stat().st_size

    def test_truncated_file(self, tmp_path):
        """Test a truncated catalog file fails its digest check"""
        path = persist_catalog(hand_catalog([("e0", "t", b, 32, 1.0) for b in range(10)]), tmp_path / "c.jsonl")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CatalogFormatError):
            load_catalog(path)

    def test_tampered_entry(self, tmp_path):
        """Test editing an entry breaks the trailer digest"""
        path = persist_catalog(hand_catalog([("e0", "t", 0, 32, 1.0)]), tmp_path / "c.jsonl")
        path.write_bytes(path.read_bytes().replace(b'"byte_cost":32', b'"byte_cost":16'))
        with pytest.raises(CatalogFormatError):
            load_catalog(path)

    def test_missing_file(self, tmp_path):
        """Test a missing catalog file is a format error"""
        with pytest.raises(CatalogFormatError):
            load_catalog(tmp_path / "absent.jsonl")

    def test_empty_catalog(self, tmp_path):
        """Test an empty entry list is a valid catalog"""
        loaded = load_catalog(persist_catalog(Catalog("base", []), tmp_path / "c.jsonl"))
        assert len(loaded) == 0
        assert loaded.full_cost() == 0
        assert loaded.universe() == []

    def test_generated_catalog_keeps_sources(self, rig):
        """Test a persisted family catalog records its base and sources"""
        loaded = load_catalog(rig.root / "catalog.jsonl")
        assert loaded.base_path == str(rig.base.root)
        assert [ref.expert_id for ref in loaded.sources] == ["e00", "e01", "e02"]
        assert loaded.source("e01").checkpoint_id == rig.sources[1].handle.checkpoint_id
        with pytest.raises(CatalogFormatError):
            loaded.source("e09")


class TestCatalogInvariants:
    """Test entry validation on construction"""

    def test_duplicate_entries(self):
        """Test the same unit twice is rejected"""
        with pytest.raises(CatalogFormatError):
            hand_catalog([("e0", "t", 0, 32, 1.0), ("e0", "t", 0, 16, 2.0)])

    def test_entries_relative_to_another_base(self):
        """Test entries must share the catalog's base id"""
        entries = list(hand_catalog([("e0", "t", 0, 32, 1.0)], base_id="other"))
        with pytest.raises(CatalogFormatError):
            Catalog("base", entries)

    def test_universe_order(self):
        """Test the universe is sorted by tensor, block, then expert"""
        catalog = hand_catalog([("e1", "b", 0, 1, 1.0), ("e0", "b", 0, 1, 1.0), ("e0", "a", 1, 1, 1.0)])
        assert catalog.universe() == [
            AccessUnit("e0", BlockKey("a", 1)),
            AccessUnit("e0", BlockKey("b", 0)),
            AccessUnit("e1", BlockKey("b", 0)),
        ]
