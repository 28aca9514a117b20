"""Loss functions against independent softmax / set-enumeration oracles."""

import math

import numpy as np
import pytest
import torch

from narraqa.encode import MLM_IGNORE
from narraqa.objectives import (
    ContrastiveBatchView,
    LossBundle,
    contrastive_loss,
    finetune_loss,
    matching_loss,
    mlm_loss,
    multiple_choice_loss,
)


def contrastive_oracle(fused, answers, strings, dedup):
    """Set-enumeration oracle in float64 numpy, one sample at a time."""
    fused = np.asarray(fused, dtype=np.float64)
    answers = np.asarray(answers, dtype=np.float64)
    keys = [s.strip() for s in strings]
    losses = []
    for i in range(len(keys)):
        pos = fused[i] @ answers[i]
        if dedup:
            seen = {}
            for k, row in zip(keys, answers):
                if k not in seen:
                    seen[k] = row
            negs = [fused[i] @ row for k, row in seen.items() if k != keys[i]]
        else:
            negs = [fused[i] @ answers[j] for j in range(len(keys)) if j != i]
        denom = math.fsum(math.exp(s) for s in [pos] + list(negs))
        losses.append(-(pos - math.log(denom)))
    return np.array(losses)


def random_view(rng, b, d):
    fused = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float64)
    answers = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float64)
    strings = [f"ans {i}" for i in range(b)]
    return ContrastiveBatchView(fused, answers, strings)


class TestContrastiveLoss:
    def test_single_sample_is_zero(self):
        view = random_view(np.random.default_rng(0), 1, 4)
        assert float(contrastive_loss(view)) == pytest.approx(0.0, abs=1e-12)

    def test_two_sample_frozen_value(self):
        # scores: f1.g1=2, f1.g2=0, f2.g2=1, f2.g1=0, realized in 2 dims
        fused = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        answers = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        view = ContrastiveBatchView(fused, answers, ["a", "b"])
        expected = 0.5 * (
            -math.log(math.exp(2) / (math.exp(2) + 1))
            - math.log(math.exp(1) / (math.exp(1) + 1))
        )
        assert expected == pytest.approx(0.2200949)
        assert float(contrastive_loss(view)) == pytest.approx(expected, abs=1e-12)

    def test_duplicate_negative_counted_once(self):
        # strings [x, y, y]: sample 1's denominator uses {x, y} only
        rng = np.random.default_rng(1)
        fused = torch.tensor(rng.standard_normal((3, 4)), dtype=torch.float64)
        answers = torch.tensor(rng.standard_normal((3, 4)), dtype=torch.float64)
        answers[2] = answers[1]  # same string, same embedding by determinism
        view = ContrastiveBatchView(fused, answers, ["x", "y", "y"])
        per_sample = contrastive_loss(view, reduction="none")
        two_row = ContrastiveBatchView(fused[:2], answers[:2], ["x", "y"])
        assert float(per_sample[0]) == pytest.approx(
            float(contrastive_loss(two_row, reduction="none")[0]), abs=1e-12
        )

    @pytest.mark.parametrize("dedup", [True, False])
    def test_matches_set_enumeration_oracle(self, dedup):
        rng = np.random.default_rng(2)
        for trial in range(50):
            b = int(rng.integers(1, 9))
            d = int(rng.integers(2, 9))
            view = random_view(rng, b, d)
            # inject duplicate strings on some trials
            strings = list(view.answer_strings)
            answers = view.answers.clone()
            if b > 2 and trial % 2:
                strings[1] = strings[0]
                answers[1] = answers[0]
            view = ContrastiveBatchView(view.fused, answers, strings)
            got = contrastive_loss(view, dedup=dedup, reduction="none")
            want = contrastive_oracle(view.fused, answers, strings, dedup)
            assert np.allclose(got.numpy(), want, atol=1e-9)

    def test_dedup_noop_when_all_distinct(self):
        view = random_view(np.random.default_rng(3), 6, 5)
        on = contrastive_loss(view, dedup=True, reduction="none")
        off = contrastive_loss(view, dedup=False, reduction="none")
        assert torch.equal(on, off)

    def test_injected_duplicate_rows_change_nothing(self):
        rng = np.random.default_rng(4)
        view = random_view(rng, 5, 6)
        base = contrastive_loss(view, dedup=True, reduction="none")
        # append a copy of sample 2's (string, embedding) as an extra row
        fused_extra = torch.cat(
            [view.fused, torch.tensor(rng.standard_normal((1, 6)))], dim=0
        )
        answers_extra = torch.cat([view.answers, view.answers[2:3]], dim=0)
        strings_extra = view.answer_strings + [view.answer_strings[2]]
        bigger = ContrastiveBatchView(fused_extra, answers_extra, strings_extra)
        with_dup = contrastive_loss(bigger, dedup=True, reduction="none")
        assert float((with_dup[:5] - base).abs().max()) < 1e-9

    def test_permutation_invariance(self):
        view = random_view(np.random.default_rng(5), 6, 4)
        per_sample = contrastive_loss(view, reduction="none")
        perm = [3, 1, 5, 0, 2, 4]
        shuffled = ContrastiveBatchView(
            view.fused[perm], view.answers[perm],
            [view.answer_strings[i] for i in perm],
        )
        again = contrastive_loss(shuffled, reduction="none")
        assert torch.allclose(again, per_sample[perm], atol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            view = random_view(rng, int(rng.integers(1, 8)), 4)
            assert float(contrastive_loss(view)) >= 0.0

    def test_nonfinite_scores_rejected(self):
        fused = torch.tensor([[float("nan"), 0.0]], dtype=torch.float64)
        answers = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        with pytest.raises(ValueError):
            contrastive_loss(ContrastiveBatchView(fused, answers, ["a"]))

    def test_trimmed_string_comparison(self):
        rng = np.random.default_rng(7)
        fused = torch.tensor(rng.standard_normal((2, 3)), dtype=torch.float64)
        answers = torch.tensor(rng.standard_normal((2, 3)), dtype=torch.float64)
        answers[1] = answers[0]
        view = ContrastiveBatchView(fused, answers, ["cat", "  cat "])
        # both rows share one trimmed string: no negatives at all
        assert float(contrastive_loss(view)) == pytest.approx(0.0, abs=1e-12)


class TestFinetuneLoss:
    def test_uniform_logits(self):
        fused = torch.zeros(2, 4, dtype=torch.float64)
        vocab = torch.zeros(3, 4, dtype=torch.float64)
        loss = finetune_loss(fused, vocab, torch.tensor([0, 2]))
        assert float(loss) == pytest.approx(math.log(3), abs=1e-12)

    def test_matches_cross_entropy_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            b, v, d = int(rng.integers(1, 9)), int(rng.integers(2, 33)), int(rng.integers(2, 17))
            fused = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float64)
            vocab = torch.tensor(rng.standard_normal((v, d)), dtype=torch.float64)
            targets = torch.tensor(rng.integers(0, v, size=b))
            got = float(finetune_loss(fused, vocab, targets))
            logits = (fused @ vocab.T).numpy()
            want = np.mean(
                [
                    -(logits[i, targets[i]] - math.log(math.fsum(np.exp(logits[i]))))
                    for i in range(b)
                ]
            )
            assert got == pytest.approx(want, abs=1e-9)

    def test_equals_contrastive_with_full_vocab_negatives(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            b, v, d = int(rng.integers(1, 9)), int(rng.integers(2, 33)), int(rng.integers(2, 17))
            fused = torch.tensor(rng.standard_normal((b, d)), dtype=torch.float64)
            vocab = torch.tensor(rng.standard_normal((v, d)), dtype=torch.float64)
            targets = rng.integers(0, v, size=b)
            vocab_strings = [f"w{i}" for i in range(v)]
            view = ContrastiveBatchView(
                fused, vocab[targets], [vocab_strings[t] for t in targets]
            )
            via_contrastive = contrastive_loss(
                view, dedup=True, extra_negatives=(vocab_strings, vocab)
            )
            via_ce = finetune_loss(fused, vocab, torch.tensor(targets))
            assert float(via_contrastive) == pytest.approx(float(via_ce), abs=1e-6)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            finetune_loss(torch.zeros(1, 2), torch.zeros(3, 2), torch.tensor([3]))


class TestMultipleChoiceLoss:
    def test_uniform_scores(self):
        fused = torch.zeros(3, 4, dtype=torch.float64)
        cands = torch.zeros(3, 4, 4, dtype=torch.float64)
        loss = multiple_choice_loss(fused, cands, torch.tensor([0, 1, 3]))
        assert float(loss) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_drives_loss_to_zero(self):
        fused = torch.ones(1, 2, dtype=torch.float64) * 10
        cands = torch.zeros(1, 4, 2, dtype=torch.float64)
        cands[0, 2] = 10.0
        loss = multiple_choice_loss(fused, cands, torch.tensor([2]))
        assert float(loss) < 1e-6

    def test_matches_softmax_oracle(self):
        rng = np.random.default_rng(10)
        fused = torch.tensor(rng.standard_normal((5, 6)), dtype=torch.float64)
        cands = torch.tensor(rng.standard_normal((5, 4, 6)), dtype=torch.float64)
        correct = torch.tensor(rng.integers(0, 4, size=5))
        got = float(multiple_choice_loss(fused, cands, correct))
        scores = torch.einsum("bd,bkd->bk", fused, cands).numpy()
        want = np.mean(
            [
                -(scores[i, correct[i]] - math.log(math.fsum(np.exp(scores[i]))))
                for i in range(5)
            ]
        )
        assert got == pytest.approx(want, abs=1e-9)

    def test_bad_index_rejected(self):
        with pytest.raises(ValueError):
            multiple_choice_loss(
                torch.zeros(1, 2), torch.zeros(1, 4, 2), torch.tensor([4])
            )
        with pytest.raises(ValueError):
            multiple_choice_loss(
                torch.zeros(1, 2), torch.zeros(1, 3, 2), torch.tensor([0])
            )


class TestMlmLoss:
    def test_no_labels_gives_zero(self):
        head = torch.nn.Linear(4, 7)
        outputs = torch.randn(2, 3, 4)
        labels = torch.full((2, 3), MLM_IGNORE)
        assert float(mlm_loss(outputs, labels, head)) == 0.0

    def test_uniform_logits_over_full_vocabulary(self):
        head = torch.nn.Linear(4, 30522)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        outputs = torch.randn(1, 2, 4)
        labels = torch.tensor([[17, MLM_IGNORE]])
        with torch.no_grad():
            loss = float(mlm_loss(outputs, labels, head))
        assert loss == pytest.approx(math.log(30522), abs=1e-3)

    def test_matches_softmax_oracle_toy_vocab(self):
        head = torch.nn.Linear(3, 5).double()
        rng = np.random.default_rng(11)
        outputs = torch.tensor(rng.standard_normal((2, 4, 3)), dtype=torch.float64)
        labels = torch.tensor([[1, MLM_IGNORE, 4, MLM_IGNORE], [MLM_IGNORE, 0, MLM_IGNORE, 2]])
        with torch.no_grad():
            got = float(mlm_loss(outputs, labels, head))
        logits = head(outputs).detach().numpy()
        terms = []
        for b in range(2):
            for p in range(4):
                y = int(labels[b, p])
                if y != MLM_IGNORE:
                    row = logits[b, p]
                    terms.append(-(row[y] - math.log(math.fsum(np.exp(row)))))
        assert got == pytest.approx(np.mean(terms), abs=1e-9)


class TestMatchingLoss:
    def test_zero_logits(self):
        z = torch.zeros(3, dtype=torch.float64)
        assert float(matching_loss(z, z, z)) == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_separation_limit(self):
        pos = torch.full((3,), 30.0, dtype=torch.float64)
        neg = torch.full((3,), -30.0, dtype=torch.float64)
        assert float(matching_loss(pos, neg, neg)) < 1e-6

    def test_matches_bce_oracle(self):
        rng = np.random.default_rng(12)
        pos, vneg, tneg = (
            torch.tensor(rng.standard_normal(4), dtype=torch.float64) for _ in range(3)
        )
        got = float(matching_loss(pos, vneg, tneg))
        sigmoid = lambda x: 1 / (1 + math.exp(-x))
        terms = [-math.log(sigmoid(float(x))) for x in pos]
        terms += [-math.log(1 - sigmoid(float(x))) for x in torch.cat([vneg, tneg])]
        assert got == pytest.approx(np.mean(terms), abs=1e-9)


class TestLossBundle:
    def test_total_composition(self):
        bundle = LossBundle(contrastive=1.5, mlm=0.25, matching=0.0, lambda_mlm=2.0)
        assert bundle.total == pytest.approx(2.0)

    def test_mlm_disabled_total_is_contrastive(self):
        bundle = LossBundle(contrastive=0.73, mlm=5.0, lambda_mlm=0.0)
        assert bundle.total == pytest.approx(0.73)
