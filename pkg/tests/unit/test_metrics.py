import itertools

import numpy as np
import pytest

from triplet_diarization import metrics
from triplet_diarization.exceptions import DataException, EmptyTimelineException
from triplet_diarization.metrics import Annotation, LabelPair


def brute_force_nmi(truth, predicted):
    """NMI from the contingency table, arithmetic-mean normalization"""
    truth, predicted = np.asarray(truth), np.asarray(predicted)
    n = len(truth)
    mutual = 0.0
    for t in np.unique(truth):
        for p in np.unique(predicted):
            joint = np.sum((truth == t) & (predicted == p)) / n
            if joint > 0:
                mutual += joint * np.log(joint / (np.mean(truth == t) * np.mean(predicted == p)))

    def entropy(labels):
        probabilities = np.array([np.mean(labels == value) for value in np.unique(labels)])
        return float(-(probabilities * np.log(probabilities)).sum())

    h_truth, h_predicted = entropy(truth), entropy(predicted)
    if h_truth == 0 and h_predicted == 0:
        return 1.0
    return mutual / ((h_truth + h_predicted) / 2.0)


def random_annotation(rng, uri, speakers):
    """Back to back turns with random gaps, no overlap"""
    intervals = []
    cursor = 0.0
    for _ in range(rng.integers(4, 12)):
        cursor += rng.choice([0.0, rng.uniform(0.1, 1.0)])
        duration = rng.uniform(0.5, 3.0)
        intervals.append((round(cursor, 3), round(cursor + duration, 3), speakers[rng.integers(len(speakers))]))
        cursor += duration
    return Annotation(uri=uri, intervals=intervals)


class TestClusteringScores(object):
    """
    Unit Tests for NMI and purity
    """

    def test_identical_labelings(self):
        pairs = LabelPair(predicted=[0, 0, 1, 1, 2], truth=['a', 'a', 'b', 'b', 'c'])
        assert metrics.nmi(pairs) == pytest.approx(1.0)
        assert metrics.purity(pairs) == 1.0

    def test_single_predicted_cluster(self):
        pairs = LabelPair(predicted=[0, 0, 0, 0], truth=['a', 'a', 'b', 'b'])
        assert metrics.nmi(pairs) == pytest.approx(0.0)
        assert metrics.purity(pairs) == 0.5

    def test_both_trivial(self):
        assert metrics.nmi(LabelPair(predicted=[3, 3, 3], truth=['a', 'a', 'a'])) == 1.0

    def test_purity_example(self):
        pairs = LabelPair(predicted=[0, 0, 0, 1, 1], truth=['A', 'A', 'B', 'B', 'B'])
        assert metrics.purity(pairs) == pytest.approx(0.8)

    def test_singletons_are_pure(self):
        assert metrics.purity(LabelPair(predicted=[0, 1, 2, 3], truth=['a', 'a', 'b', 'b'])) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(DataException):
            LabelPair(predicted=[0, 1], truth=['a'])
        with pytest.raises(DataException):
            LabelPair(predicted=[], truth=[])

    def test_relabeling_does_not_matter(self):
        truth = ['a', 'b', 'a', 'c', 'c', 'b']
        first = LabelPair(predicted=[0, 1, 0, 2, 1, 1], truth=truth)
        second = LabelPair(predicted=[7, 4, 7, 9, 4, 4], truth=truth)
        assert metrics.nmi(first) == pytest.approx(metrics.nmi(second))
        assert metrics.purity(first) == metrics.purity(second)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            truth = rng.integers(0, rng.integers(1, 6), size=n)
            predicted = rng.integers(0, rng.integers(1, 6), size=n)
            pairs = LabelPair(predicted=predicted, truth=truth)
            assert metrics.nmi(pairs) == pytest.approx(brute_force_nmi(truth, predicted), abs=1e-9)
            assert 0.0 <= metrics.purity(pairs) <= 1.0


class TestTimeline(object):
    """
    Unit Tests for timeline helpers
    """

    def test_union_merges_touching(self):
        assert metrics.union([(3.0, 4.0), (0.0, 1.0), (1.0, 2.0)]) == [(0.0, 2.0), (3.0, 4.0)]

    def test_subtract(self):
        assert metrics.subtract([(0.0, 10.0)], [(2.0, 3.0), (9.0, 12.0)]) == [(0.0, 2.0), (3.0, 9.0)]
        assert metrics.subtract([(0.0, 1.0)], [(-1.0, 2.0)]) == []

    def test_overlap_regions(self):
        annotation = Annotation(uri='r', intervals=[(0.0, 10.0, 'A'), (5.0, 15.0, 'B'), (12.0, 13.0, 'B')])
        assert metrics.overlap_regions(annotation) == [(5.0, 10.0)]

    def test_interval_must_have_positive_length(self):
        with pytest.raises(DataException):
            Annotation(uri='r', intervals=[(1.0, 1.0, 'A')])


class TestDer(object):
    """
    Unit Tests for diarization error rate
    """

    def setup_method(self):
        self.reference = Annotation(uri='rec', intervals=[(0.0, 10.0, 'A')])

    def test_identical_is_zero(self):
        result = metrics.der(self.reference, Annotation(uri='rec', intervals=[(0.0, 10.0, 'A')]), collar=0.0)
        assert result.der == 0.0
        assert result.total == 10.0

    def test_twenty_percent_confusion(self):
        hypothesis = Annotation(uri='rec', intervals=[(0.0, 8.0, 'A'), (8.0, 10.0, 'B')])
        result = metrics.der(self.reference, hypothesis, collar=0.0)
        assert result.confusion == pytest.approx(2.0)
        assert result.miss == 0.0 and result.false_alarm == 0.0
        assert result.der == pytest.approx(0.2)
        assert result.mapping == {'A': 'A'}

    def test_swapped_labels(self):
        hypothesis = Annotation(uri='rec', intervals=[(0.0, 8.0, 'spk1'), (8.0, 10.0, 'spk0')])
        result = metrics.der(self.reference, hypothesis, collar=0.0)
        assert result.der == pytest.approx(0.2)
        assert result.mapping == {'spk1': 'A'}

    def test_miss_and_false_alarm(self):
        hypothesis = Annotation(uri='rec', intervals=[(2.0, 12.0, 'x')])
        result = metrics.der(self.reference, hypothesis, collar=0.0)
        assert result.miss == pytest.approx(2.0)
        # hypothesis speech outside the reference is not on the scored timeline
        assert result.false_alarm == 0.0
        assert result.der == pytest.approx(0.2)

    def test_collar_forgives_boundary_errors(self):
        reference = Annotation(uri='rec', intervals=[(0.0, 10.0, 'A'), (10.0, 20.0, 'B')])
        hypothesis = Annotation(uri='rec', intervals=[(0.0, 10.2, 'a'), (10.2, 20.0, 'b')])
        assert metrics.der(reference, hypothesis, collar=0.0).der == pytest.approx(0.01)
        assert metrics.der(reference, hypothesis, collar=0.25).der == 0.0

    def test_collar_eats_everything(self):
        reference = Annotation(uri='rec', intervals=[(0.0, 0.4, 'A')])
        with pytest.raises(EmptyTimelineException):
            metrics.der(reference, reference, collar=0.25)

    def test_overlap_skipping(self):
        reference = Annotation(uri='rec', intervals=[(0.0, 10.0, 'A'), (5.0, 15.0, 'B')])
        hypothesis = Annotation(uri='rec', intervals=[(0.0, 10.0, 'a'), (10.0, 15.0, 'b')])
        assert metrics.der(reference, hypothesis, collar=0.0, skip_overlap=True).der == 0.0
        with_overlap = metrics.der(reference, hypothesis, collar=0.0, skip_overlap=False)
        assert with_overlap.total == pytest.approx(20.0)
        assert with_overlap.miss == pytest.approx(5.0)
        assert with_overlap.der == pytest.approx(0.25)

    def test_uri_mismatch(self):
        with pytest.raises(DataException):
            metrics.der(self.reference, Annotation(uri='other', intervals=[(0.0, 1.0, 'A')]))

    def test_relabeling_hypothesis_does_not_matter(self):
        rng = np.random.default_rng(3)
        reference = random_annotation(rng, 'rec', ['A', 'B', 'C'])
        hypothesis = random_annotation(rng, 'rec', ['x', 'y', 'z'])
        renamed = Annotation(uri='rec', intervals=[(s, e, {'x': 'q', 'y': 'r', 'z': 's'}[spk])
                                                   for s, e, spk in hypothesis.intervals])
        assert metrics.der(reference, hypothesis, collar=0.0).der == \
            pytest.approx(metrics.der(reference, renamed, collar=0.0).der)

    @pytest.mark.parametrize('seed', range(30))
    @pytest.mark.parametrize('collar', [0.0, 0.25])
    def test_matches_best_permutation(self, seed, collar):
        rng = np.random.default_rng(seed)
        count = int(rng.integers(1, 7))
        ref_speakers = ['R{}'.format(i) for i in range(count)]
        hyp_speakers = ['h{}'.format(i) for i in range(count)]
        reference = random_annotation(rng, 'rec', ref_speakers)
        hypothesis = random_annotation(rng, 'rec', hyp_speakers)
        try:
            optimal = metrics.der(reference, hypothesis, collar=collar, skip_overlap=False)
        except EmptyTimelineException:
            pytest.skip('collar removed the whole reference')

        best = min(
            metrics.der_with_mapping(reference, hypothesis, dict(zip(hyp_speakers, order)),
                                     collar=collar, skip_overlap=False).der
            for order in itertools.permutations(ref_speakers)
        )
        assert optimal.der == pytest.approx(best, abs=1e-9)
        assert min(optimal.miss, optimal.false_alarm, optimal.confusion) >= 0.0

    def test_aggregate_is_duration_weighted(self):
        first = metrics.DERBreakdown(uri='a', miss=1.0, false_alarm=0.0, confusion=0.0, total=10.0)
        second = metrics.DERBreakdown(uri='b', miss=0.0, false_alarm=0.0, confusion=3.0, total=30.0)
        total = metrics.aggregate_der([first, second])
        assert total.uri == 'TOTAL'
        assert total.der == pytest.approx(0.1)
        assert total.confusion_only == pytest.approx(0.075)


class TestAnnotations(object):
    """
    Unit Tests for segment merging and RTTM
    """

    def test_segments_to_annotation_merges_runs(self):
        annotation = metrics.segments_to_annotation('rec', [2.0, 0.0, 4.0, 6.0], [2.0, 2.0, 2.0, 2.0],
                                                    ['spk0', 'spk0', 'spk1', 'spk0'])
        assert annotation.intervals == [(0.0, 4.0, 'spk0'), (4.0, 6.0, 'spk1'), (6.0, 8.0, 'spk0')]

    def test_gap_breaks_a_run(self):
        annotation = metrics.segments_to_annotation('rec', [0.0, 3.0], [2.0, 2.0], [1, 1])
        assert annotation.intervals == [(0.0, 2.0, '1'), (3.0, 5.0, '1')]

    def test_rttm_line_format(self):
        text = metrics.annotation_to_rttm(Annotation(uri='conv000', intervals=[(1.5, 3.25, 'spk0')]))
        assert text == 'SPEAKER conv000 1 1.500 1.750 <NA> <NA> spk0 <NA> <NA>\n'

    def test_rttm_round_trip(self, tmp_path):
        annotations = [Annotation(uri='a', intervals=[(0.0, 2.0, 'spk0'), (2.0, 4.5, 'spk1')]),
                       Annotation(uri='b', intervals=[(1.0, 3.0, 'spk1')])]
        path = str(tmp_path / 'out.rttm')
        metrics.write_rttm(path, annotations)
        parsed = metrics.read_rttm(path)
        assert list(parsed) == ['a', 'b']
        assert parsed['a'].intervals == annotations[0].intervals
        assert parsed['b'].intervals == annotations[1].intervals
        assert ''.join(metrics.annotation_to_rttm(a) for a in parsed.values()) == open(path).read()

    def test_rttm_skips_comments(self):
        parsed = metrics.parse_rttm(';; comment\n\nSPEAKER r 1 0.000 1.000 <NA> <NA> A <NA> <NA>\n')
        assert parsed['r'].intervals == [(0.0, 1.0, 'A')]

    @pytest.mark.parametrize('line', [
        'SPEAKER r 1 0.0 1.0 <NA> <NA>',
        'LEXEME r 1 0.0 1.0 <NA> <NA> A <NA> <NA>',
        'SPEAKER r 1 zero 1.0 <NA> <NA> A <NA> <NA>',
        'SPEAKER r 1 0.0 0.0 <NA> <NA> A <NA> <NA>',
    ])
    def test_invalid_rttm(self, line):
        with pytest.raises(DataException):
            metrics.parse_rttm(line)

    def test_unreadable_rttm(self, tmp_path):
        with pytest.raises(DataException):
            metrics.read_rttm(str(tmp_path / 'missing.rttm'))
        binary = tmp_path / 'binary.rttm'
        binary.write_bytes(b'SPEAKER r\xff 1 0.000 1.000 <NA> <NA> A <NA> <NA>\n')
        with pytest.raises(DataException):
            metrics.read_rttm(str(binary))
