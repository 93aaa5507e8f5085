import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conre.data import Provenance
from conre.encoding import SEPARATOR
from conre.errors import DataError, ProvenanceError, StateError
from conre.memory import (
    MemoryStore,
    PrototypeStore,
    augment,
    capture_static_prototype,
    combined_prototype,
    kmeans,
    select_typical,
)

from conftest import make_sample, relation_samples


class VectorEncoder:
    """Test double: maps sample ids to preset representation vectors."""

    def __init__(self, table):
        self.table = {k: torch.as_tensor(v, dtype=torch.float64) for k, v in table.items()}

    def encode_batch(self, samples):
        return torch.stack([self.table[s.id] for s in samples])


class TestKMeans:
    def test_recovers_separated_clouds(self):
        rng = np.random.default_rng(0)
        cloud_a = rng.normal(0.0, 0.05, size=(5, 2))
        cloud_b = rng.normal(10.0, 0.05, size=(5, 2))
        points = np.vstack([cloud_a, cloud_b])
        _, assignments = kmeans(points, k=2, seed=1)
        assert len(set(assignments[:5])) == 1
        assert len(set(assignments[5:])) == 1
        assert assignments[0] != assignments[5]

    def test_k_equals_n(self):
        points = np.arange(6, dtype=float).reshape(3, 2)
        centroids, assignments = kmeans(points, k=3, seed=0)
        assert sorted(assignments) == [0, 1, 2]

    def test_invalid_k(self):
        with pytest.raises(DataError):
            kmeans(np.zeros((3, 2)), k=4, seed=0)


class TestSelectTypical:
    def test_single_sample_selected(self):
        sample = make_sample()
        encoder = VectorEncoder({sample.id: [0.0, 0.0]})
        assert select_typical(encoder, [sample], memory_size=10, seed=0) == [sample]

    def test_two_clouds_nearest_to_mean(self):
        rng = np.random.default_rng(4)
        table, samples = {}, []
        for i in range(5):
            samples.append(make_sample(sid=f"a{i}", relation=0))
            table[f"a{i}"] = rng.normal(0.0, 1.0, size=3)
        for i in range(5):
            samples.append(make_sample(sid=f"b{i}", relation=0))
            table[f"b{i}"] = rng.normal(8.0, 1.0, size=3)
        encoder = VectorEncoder(table)
        selected = select_typical(encoder, samples, memory_size=2, seed=0)
        assert len(selected) == 2
        # brute-force oracle: per cloud, the point closest to the cloud mean
        expected = set()
        for prefix in ("a", "b"):
            ids = [f"{prefix}{i}" for i in range(5)]
            mean = np.mean([table[i] for i in ids], axis=0)
            expected.add(min(ids, key=lambda i: float(np.sum((np.asarray(table[i]) - mean) ** 2))))
        assert {s.id for s in selected} == expected

    def test_selection_is_subset_and_deterministic(self):
        rng = np.random.default_rng(9)
        samples = [make_sample(sid=f"s{i}", relation=1) for i in range(20)]
        encoder = VectorEncoder({s.id: rng.normal(size=4) for s in samples})
        first = select_typical(encoder, samples, memory_size=6, seed=3)
        second = select_typical(encoder, samples, memory_size=6, seed=3)
        assert [s.id for s in first] == [s.id for s in second]
        assert len(first) == 6
        assert set(s.id for s in first) <= {s.id for s in samples}

    def test_mixed_relations_rejected(self):
        encoder = VectorEncoder({})
        samples = [make_sample(sid="x", relation=0), make_sample(sid="y", relation=1)]
        with pytest.raises(DataError, match="per relation"):
            select_typical(encoder, samples, memory_size=2, seed=0)

    def test_augmented_samples_rejected(self):
        encoder = VectorEncoder({})
        bad = make_sample(provenance=Provenance.ENTITY_REPLACED)
        with pytest.raises(ProvenanceError):
            select_typical(encoder, [bad], memory_size=2, seed=0)

    def test_memory_size_accounting(self):
        """min(m, n) exemplars per relation, accumulated across relations."""
        memory = MemoryStore(memory_size=10)
        rng = np.random.default_rng(2)
        for relation in range(3):
            samples = relation_samples(relation, 40)
            encoder = VectorEncoder({s.id: rng.normal(size=4) for s in samples})
            memory.store(relation, select_typical(encoder, samples, 10, seed=relation))
        assert len(memory) == 30
        assert len(memory.accumulated()) == 30


class TestPrototypes:
    def test_static_mean_of_one(self):
        store = PrototypeStore()
        sample = make_sample()
        encoder = VectorEncoder({sample.id: [2.0, -1.0]})
        proto = capture_static_prototype(store, encoder, 0, [sample])
        assert torch.equal(proto, torch.tensor([2.0, -1.0], dtype=torch.float64))

    def test_static_mean_symmetry(self):
        store = PrototypeStore()
        a, b = make_sample(sid="a"), make_sample(sid="b")
        encoder = VectorEncoder({"a": [1.0, 3.0], "b": [-1.0, -3.0]})
        proto = capture_static_prototype(store, encoder, 0, [a, b])
        assert torch.equal(proto, torch.zeros(2, dtype=torch.float64))

    def test_static_mean_matches_two_pass_oracle(self, model):
        store = PrototypeStore()
        samples = relation_samples(0, 100)
        proto = capture_static_prototype(store, model.encoder, 0, samples)
        # independent two-pass mean over per-sample encodings
        with torch.no_grad():
            rows = [model.encoder.encode(s).numpy() for s in samples]
        total = np.zeros_like(rows[0])
        for row in rows:
            total = total + row
        np.testing.assert_allclose(proto.numpy(), total / len(rows), atol=1e-6)

    def test_static_write_once(self):
        store = PrototypeStore()
        sample = make_sample()
        encoder = VectorEncoder({sample.id: [1.0]})
        capture_static_prototype(store, encoder, 0, [sample])
        with pytest.raises(StateError, match="write-once"):
            capture_static_prototype(store, encoder, 0, [sample])
        with pytest.raises(StateError, match="write-once"):
            store.set_static(0, torch.zeros(1))

    def test_combined_endpoints_and_blend(self):
        store = PrototypeStore()
        memory = MemoryStore(memory_size=2)
        sample = make_sample(sid="m0")
        memory.store(0, [sample])
        encoder = VectorEncoder({"m0": [0.0, 1.0]})
        store.set_static(0, torch.tensor([1.0, 0.0], dtype=torch.float64))

        beta0 = combined_prototype(store, encoder, 0, memory, beta=0.0)
        assert torch.equal(beta0, torch.tensor([1.0, 0.0], dtype=torch.float64))  # bitwise static
        beta1 = combined_prototype(store, encoder, 0, memory, beta=1.0)
        torch.testing.assert_close(beta1, torch.tensor([0.0, 1.0], dtype=torch.float64))
        blend = combined_prototype(store, encoder, 0, memory, beta=0.5)
        torch.testing.assert_close(blend, torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_combined_without_static_fails(self):
        store = PrototypeStore()
        memory = MemoryStore(memory_size=2)
        memory.store(0, [make_sample(sid="m0")])
        encoder = VectorEncoder({"m0": [0.0, 1.0]})
        with pytest.raises(StateError, match="no static prototype"):
            combined_prototype(store, encoder, 0, memory, beta=0.5)

    def test_ablation_modes(self):
        store = PrototypeStore()
        memory = MemoryStore(memory_size=2)
        memory.store(0, [make_sample(sid="m0")])
        encoder = VectorEncoder({"m0": [0.0, 2.0]})
        store.set_static(0, torch.tensor([4.0, 0.0], dtype=torch.float64))
        static_only = combined_prototype(store, encoder, 0, memory, beta=0.5, mode="static_only")
        dynamic_only = combined_prototype(store, encoder, 0, memory, beta=0.5, mode="dynamic_only")
        assert torch.equal(static_only, torch.tensor([4.0, 0.0], dtype=torch.float64))
        assert torch.equal(dynamic_only, torch.tensor([0.0, 2.0], dtype=torch.float64))


def filled_memory(mem_size=3, relations=3, per_relation=3):
    memory = MemoryStore(memory_size=mem_size)
    for r in range(relations):
        memory.store(r, relation_samples(r, per_relation))
    return memory


class TestAugmentation:
    def test_quadruples_memory(self):
        memory = filled_memory(mem_size=10, relations=3, per_relation=10)
        augmented = augment(memory, seed=0)
        assert len(augmented) == 4 * 30
        by_provenance = {}
        for s in augmented:
            by_provenance.setdefault(s.provenance, []).append(s)
        assert {len(v) for v in by_provenance.values()} == {30}

    def test_labels_and_span_count_preserved(self):
        memory = filled_memory()
        originals = {s.id: s for s in memory.accumulated()}
        for sample in augment(memory, seed=1):
            base_id = sample.id.split("+")[0]
            assert sample.relation == originals[base_id].relation
            assert len(sample.head_span) == 2 and len(sample.tail_span) == 2

    def test_concatenated_entities_stay_in_first_sentence(self):
        memory = filled_memory()
        for sample in augment(memory, seed=2):
            if sample.provenance in (Provenance.CONCATENATED, Provenance.REPLACED_AND_CONCATENATED):
                sep = sample.tokens.index(SEPARATOR)
                assert sample.head_span[1] <= sep
                assert sample.tail_span[1] <= sep

    def test_concatenation_material_from_other_relations(self):
        memory = filled_memory()
        originals = {s.id: s for s in memory.accumulated()}
        for sample in augment(memory, seed=3):
            if sample.provenance in (Provenance.CONCATENATED, Provenance.REPLACED_AND_CONCATENATED):
                appended_id = sample.id.rsplit("+cat:", 1)[1]
                assert originals[appended_id].relation != sample.relation

    def test_entity_replacement_splice(self):
        memory = MemoryStore(memory_size=2)
        a = make_sample(sid="a", tokens=("A1", "A2", "mid", "B1"), head=(0, 2), tail=(3, 4), relation=0)
        b = make_sample(sid="b", tokens=("C1", "x", "D1", "D2", "D3"), head=(0, 1), tail=(2, 5), relation=0)
        other = make_sample(sid="o", tokens=("z", "w"), head=(0, 1), tail=(1, 2), relation=1)
        memory.store(0, [a, b])
        memory.store(1, [other])
        augmented = augment(memory, seed=0)
        swapped = {s.id: s for s in augmented if s.provenance is Provenance.ENTITY_REPLACED}
        # a's donor can only be b, and vice versa
        sa = swapped["a+ent:b"]
        assert sa.tokens == ("C1", "mid", "D1", "D2", "D3")
        assert sa.head_span == (0, 1) and sa.tail_span == (2, 5)
        sb = swapped["b+ent:a"]
        assert sb.tokens == ("A1", "A2", "x", "B1")
        assert sb.head_span == (0, 2) and sb.tail_span == (3, 4)

    def test_singleton_relation_self_replacement(self):
        memory = MemoryStore(memory_size=2)
        memory.store(0, [make_sample(sid="solo", relation=0)])
        memory.store(1, relation_samples(1, 2))
        augmented = augment(memory, seed=0)
        assert len(augmented) == 4 * 3
        clone = next(s for s in augmented if s.id == "solo+ent:solo")
        assert clone.tokens == make_sample().tokens
        assert clone.provenance is Provenance.ENTITY_REPLACED

    def test_single_relation_memory_rejected(self):
        memory = MemoryStore(memory_size=3)
        memory.store(0, relation_samples(0, 3))
        with pytest.raises(DataError, match="at least 2 relations"):
            augment(memory, seed=0)

    def test_deterministic(self):
        memory = filled_memory()
        a = [(s.id, s.tokens) for s in augment(memory, seed=5)]
        b = [(s.id, s.tokens) for s in augment(memory, seed=5)]
        assert a == b

    @given(sizes=st.lists(st.integers(1, 5), min_size=2, max_size=5), seed=st.integers(0, 99))
    @settings(max_examples=40, deadline=None)
    def test_quadrupling_property(self, sizes, seed):
        memory = MemoryStore(memory_size=5)
        for r, count in enumerate(sizes):
            memory.store(r, relation_samples(r, count))
        augmented = augment(memory, seed=seed)
        assert len(augmented) == 4 * sum(sizes)
        assert all(s.relation in range(len(sizes)) for s in augmented)


class TestExclusionGuard:
    def test_prototypes_unchanged_by_augmentation(self):
        memory = filled_memory()
        store = PrototypeStore()
        rng = np.random.default_rng(0)
        encoder = VectorEncoder({s.id: rng.normal(size=4) for s in memory.accumulated()})
        store.set_static(0, torch.tensor(rng.normal(size=4)))
        before = combined_prototype(store, encoder, 0, memory, beta=0.5)
        augment(memory, seed=0)
        after = combined_prototype(store, encoder, 0, memory, beta=0.5)
        assert torch.equal(before, after)

    def test_memory_store_unchanged_by_augmentation(self):
        memory = filled_memory()
        manifest = memory.manifest()
        augment(memory, seed=0)
        assert memory.manifest() == manifest
        assert all(s.provenance is Provenance.ORIGINAL for s in memory.accumulated())

    def test_store_rejects_augmented_samples(self):
        memory = filled_memory()
        augmented = [s for s in augment(memory, seed=0) if s.provenance is not Provenance.ORIGINAL]
        with pytest.raises(ProvenanceError):
            memory.store(5, [augmented[0]])

    def test_prototype_paths_reject_augmented_samples(self):
        store = PrototypeStore()
        encoder = VectorEncoder({})
        bad = make_sample(provenance=Provenance.CONCATENATED)
        with pytest.raises(ProvenanceError):
            capture_static_prototype(store, encoder, 0, [bad])
