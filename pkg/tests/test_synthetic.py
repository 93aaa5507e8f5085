import numpy as np
import pytest

from conre.errors import DataError
from conre.estimator import ContinualRelationExtractor
from conre.synthetic import SyntheticSpec, generate_synthetic_sequence


def signal_tokens(task_sequence, relation):
    tokens = set()
    for task in task_sequence:
        for sample in task.train + task.valid + task.test:
            if sample.relation == relation:
                tokens.update(t for t in sample.tokens if t.startswith("sig"))
    return tokens


class TestGenerator:
    def test_structure_and_ground_truth_links(self):
        spec = SyntheticSpec(num_relations=10, num_tasks=5, samples_per_relation=50,
                             analogous_pairs=((0, 8), (3, 9)), seed=7)
        seq, vocab = generate_synthetic_sequence(spec)
        assert len(seq) == 5
        assert len(vocab) == 10
        per_relation = {r: 0 for r in range(10)}
        for task in seq:
            for sample in task.train + task.valid + task.test:
                per_relation[sample.relation] += 1
        assert all(count == 50 for count in per_relation.values())
        # paired relations share most signal vocabulary; unrelated ones share none
        for a, b in spec.analogous_pairs:
            sig_a, sig_b = signal_tokens(seq, a), signal_tokens(seq, b)
            overlap = len(sig_a & sig_b) / len(sig_a | sig_b)
            assert overlap >= 0.5, f"pair ({a},{b}) overlap {overlap}"
        assert not (signal_tokens(seq, 0) & signal_tokens(seq, 5))
        # pair members are introduced in different tasks, early vs late
        assert seq.intro_task(0) < seq.intro_task(8)
        assert seq.intro_task(3) < seq.intro_task(9)
        assert spec.analogous_partner(0) == 8 and spec.analogous_partner(8) == 0
        assert spec.analogous_partner(5) is None

    def test_determinism(self):
        spec = SyntheticSpec(num_relations=4, num_tasks=2, samples_per_relation=10, seed=3)
        seq_a, _ = generate_synthetic_sequence(spec)
        seq_b, _ = generate_synthetic_sequence(spec)
        ids_a = [[s.to_dict() for s in task.train] for task in seq_a]
        ids_b = [[s.to_dict() for s in task.train] for task in seq_b]
        assert ids_a == ids_b

    def test_seed_varies_corpus(self):
        base = dict(num_relations=4, num_tasks=2, samples_per_relation=10)
        seq_a, _ = generate_synthetic_sequence(SyntheticSpec(seed=3, **base))
        seq_b, _ = generate_synthetic_sequence(SyntheticSpec(seed=4, **base))
        assert [s.tokens for s in seq_a.tasks[0].train] != [s.tokens for s in seq_b.tasks[0].train]

    def test_empty_spec_rejected(self):
        with pytest.raises(DataError, match="no relations"):
            SyntheticSpec(num_relations=0, num_tasks=1)

    def test_bad_pairs_rejected(self):
        with pytest.raises(DataError, match="unknown relations"):
            SyntheticSpec(num_relations=3, num_tasks=1, analogous_pairs=((0, 7),))
        with pytest.raises(DataError, match="distinct"):
            SyntheticSpec(num_relations=3, num_tasks=1, analogous_pairs=((1, 1),))

    def test_more_tasks_than_relations_rejected(self):
        with pytest.raises(DataError, match="cannot split"):
            SyntheticSpec(num_relations=2, num_tasks=3)


class TestTrainedSeparability:
    def test_engineered_pair_lands_in_top_bin_with_largest_drop(self):
        """Without distillation, the engineered analogous pair is the one that
        hits the top similarity bin and suffers the worst forgetting."""
        from conre.evaluation import AccuracyMatrix, effective_alpha, evaluate_after_task, similarity_analysis

        spec = SyntheticSpec(num_relations=10, num_tasks=5, samples_per_relation=30,
                             analogous_pairs=((0, 8),), seed=2, signal_per_sentence=6)
        seq, _ = generate_synthetic_sequence(spec)
        est = ContinualRelationExtractor(memory_size=8, d_model=32, d_proj=16, d_hidden=32,
                                         epochs_new=15, epochs_replay=12, batch_size=16,
                                         seed=2, lr=1e-3, beta=0.8, use_fkd=False)
        matrix = AccuracyMatrix(len(seq))
        accuracy_history = []
        alpha = effective_alpha(est.make_config())
        for task in seq:
            est.partial_fit(task)
            per_relation = evaluate_after_task(est.model_, est.projected_prototypes(),
                                               seq, task.index, alpha, matrix)
            accuracy_history.append({r: c / t for r, (c, t) in per_relation.items()})
        intro = {r: seq.intro_task(r) for r in seq.all_relations}
        analysis = similarity_analysis(est.prototype_history_, accuracy_history, intro)
        assert analysis.entry(0).bin_label == "[0.85, 1.00)"
        assert analysis.entry(8).bin_label == "[0.85, 1.00)"
        worst = max(analysis.entries, key=lambda e: e.drop)
        assert worst.relation == 0
        assert worst.drop > 0

    def test_no_pairs_means_no_analogous_similarities(self):
        """Without engineered pairs, trained prototypes stay below the analogous bin."""
        spec = SyntheticSpec(num_relations=6, num_tasks=3, samples_per_relation=30,
                             seed=0, signal_per_sentence=6)
        seq, _ = generate_synthetic_sequence(spec)
        est = ContinualRelationExtractor(memory_size=8, d_model=32, d_proj=16, d_hidden=32,
                                         epochs_new=15, epochs_replay=12, batch_size=16,
                                         seed=0, lr=1e-3, beta=0.8)
        est.fit(seq)
        protos = est.prototype_history_[-1]
        relations = sorted(protos)
        sims = []
        for i, a in enumerate(relations):
            for b in relations[i + 1:]:
                va, vb = protos[a], protos[b]
                sims.append(float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))))
        assert max(sims) < 0.85, f"unexpected analogous similarity: {max(sims):.3f}"
