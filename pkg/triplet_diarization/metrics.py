import itertools
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics.cluster import contingency_matrix, normalized_mutual_info_score

from triplet_diarization.exceptions import DataException, EmptyTimelineException

RTTM_NA = '<NA>'


@dataclass
class LabelPair:
    predicted: Sequence
    truth: Sequence

    def __post_init__(self):
        if len(self.predicted) != len(self.truth):
            raise DataException("Label length mismatch: {} predicted vs {} true labels".format(
                len(self.predicted), len(self.truth)))
        if len(self.truth) == 0:
            raise DataException("Cannot score an empty labeling")


def nmi(pairs: LabelPair):
    """Mutual information over the arithmetic mean of both entropies; 1.0 when both are trivial"""
    return float(normalized_mutual_info_score(pairs.truth, pairs.predicted, average_method='arithmetic'))


def purity(pairs: LabelPair):
    contingency = contingency_matrix(pairs.truth, pairs.predicted)
    return float(contingency.max(axis=0).sum()) / len(pairs.truth)


@dataclass
class Annotation:
    uri: str
    intervals: List[Tuple[float, float, str]] = field(default_factory=list)

    def __post_init__(self):
        for start, end, speaker in self.intervals:
            if not end > start:
                raise DataException("Interval of speaker {} in {} has end {} <= start {}".format(
                    speaker, self.uri, end, start))

    def labels(self):
        return sorted({speaker for _, _, speaker in self.intervals})

    def speech(self):
        return union([(start, end) for start, end, _ in self.intervals])

    def duration(self):
        return total_duration(self.speech())


@dataclass
class DERBreakdown:
    uri: str
    miss: float
    false_alarm: float
    confusion: float
    total: float
    mapping: Dict[str, str] = field(default_factory=dict)

    @property
    def der(self):
        return (self.miss + self.false_alarm + self.confusion) / self.total if self.total > 0 else 0.0

    @property
    def confusion_only(self):
        return self.confusion / self.total if self.total > 0 else 0.0


# Timelines are sorted lists of disjoint half-open (start, end) pairs

def union(intervals):
    merged = []
    for start, end in sorted(intervals):
        if end <= start:
            continue
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def subtract(timeline, removed):
    result = []
    removed = union(removed)
    for start, end in timeline:
        cursor = start
        for cut_start, cut_end in removed:
            if cut_end <= cursor or cut_start >= end:
                continue
            if cut_start > cursor:
                result.append((cursor, cut_start))
            cursor = max(cursor, cut_end)
            if cursor >= end:
                break
        if cursor < end:
            result.append((cursor, end))
    return result


def total_duration(timeline):
    return sum(end - start for start, end in timeline)


def overlap_regions(annotation: Annotation):
    """Where at least two different speakers of the annotation talk at once"""
    per_speaker = OrderedDict((speaker, union([(s, e) for s, e, spk in annotation.intervals if spk == speaker]))
                              for speaker in annotation.labels())
    regions = []
    for first, second in itertools.combinations(per_speaker.values(), 2):
        for a_start, a_end in first:
            for b_start, b_end in second:
                start, end = max(a_start, b_start), min(a_end, b_end)
                if end > start:
                    regions.append((start, end))
    return union(regions)


def evaluation_timeline(reference: Annotation, collar=0.0, skip_overlap=False):
    """Reference speech minus collars around reference boundaries (and overlap, if asked)"""
    removed = []
    if collar > 0:
        for start, end, _ in reference.intervals:
            removed.extend([(start - collar, start + collar), (end - collar, end + collar)])
    if skip_overlap:
        removed.extend(overlap_regions(reference))
    return subtract(reference.speech(), removed)


def _elementary_pieces(timeline, *annotations):
    """Split the timeline at every interval boundary; yields (start, end, active sets)"""
    boundaries = sorted({point for region in timeline for point in region} |
                        {point for annotation in annotations
                         for start, end, _ in annotation.intervals for point in (start, end)})
    for region_start, region_end in timeline:
        points = [region_start] + [p for p in boundaries if region_start < p < region_end] + [region_end]
        for start, end in zip(points[:-1], points[1:]):
            middle = (start + end) / 2.0
            yield start, end, [
                {speaker for s, e, speaker in annotation.intervals if s <= middle < e}
                for annotation in annotations
            ]


def overlap_matrix(reference, hypothesis, timeline):
    ref_labels, hyp_labels = reference.labels(), hypothesis.labels()
    matrix = np.zeros((len(ref_labels), len(hyp_labels)))
    for start, end, (ref_active, hyp_active) in _elementary_pieces(timeline, reference, hypothesis):
        for r in ref_active:
            for h in hyp_active:
                matrix[ref_labels.index(r), hyp_labels.index(h)] += end - start
    return ref_labels, hyp_labels, matrix


def optimal_mapping(reference, hypothesis, timeline):
    """One-to-one hypothesis -> reference speaker mapping maximizing co-occurring time"""
    ref_labels, hyp_labels, matrix = overlap_matrix(reference, hypothesis, timeline)
    if matrix.size == 0:
        return {}
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return {hyp_labels[c]: ref_labels[r] for r, c in zip(rows, cols) if matrix[r, c] > 0}


def der_with_mapping(reference, hypothesis, mapping, collar=0.0, skip_overlap=False):
    if reference.uri != hypothesis.uri:
        raise DataException("Cannot score {} against {}".format(hypothesis.uri, reference.uri))

    timeline = evaluation_timeline(reference, collar=collar, skip_overlap=skip_overlap)
    if total_duration(timeline) <= 0:
        raise EmptyTimelineException(
            "Nothing left to score in {}: collar {} s{} removes all reference speech".format(
                reference.uri, collar, ' and overlap exclusion' if skip_overlap else ''))

    miss = false_alarm = confusion = total = 0.0
    for start, end, (ref_active, hyp_active) in _elementary_pieces(timeline, reference, hypothesis):
        duration = end - start
        n_ref, n_hyp = len(ref_active), len(hyp_active)
        n_correct = sum(1 for h in hyp_active if mapping.get(h) in ref_active)
        total += duration * n_ref
        miss += duration * max(0, n_ref - n_hyp)
        false_alarm += duration * max(0, n_hyp - n_ref)
        confusion += duration * (min(n_ref, n_hyp) - n_correct)
    return DERBreakdown(uri=reference.uri, miss=miss, false_alarm=false_alarm, confusion=confusion,
                        total=total, mapping=dict(mapping))


def der(reference: Annotation, hypothesis: Annotation, collar=0.25, skip_overlap=True) -> DERBreakdown:
    timeline = evaluation_timeline(reference, collar=collar, skip_overlap=skip_overlap)
    mapping = optimal_mapping(reference, hypothesis, timeline)
    return der_with_mapping(reference, hypothesis, mapping, collar=collar, skip_overlap=skip_overlap)


def aggregate_der(results, uri='TOTAL'):
    """Duration-weighted total over recordings"""
    results = list(results)
    return DERBreakdown(uri=uri,
                        miss=sum(r.miss for r in results),
                        false_alarm=sum(r.false_alarm for r in results),
                        confusion=sum(r.confusion for r in results),
                        total=sum(r.total for r in results))


def segments_to_annotation(uri, starts, durations, labels):
    """Merge time-ordered, touching segments that carry the same label"""
    intervals = []
    for start, duration, label in sorted(zip(starts, durations, labels), key=lambda item: item[0]):
        end = start + duration
        label = str(label)
        if intervals and intervals[-1][2] == label and start <= intervals[-1][1] + 1e-9:
            intervals[-1] = (intervals[-1][0], max(intervals[-1][1], end), label)
        else:
            intervals.append((start, end, label))
    return Annotation(uri=uri, intervals=intervals)


def annotation_to_rttm(annotation: Annotation):
    lines = []
    for start, end, speaker in sorted(annotation.intervals, key=lambda i: (i[0], i[2], i[1])):
        lines.append('SPEAKER {} 1 {:.3f} {:.3f} {na} {na} {} {na} {na}\n'.format(
            annotation.uri, start, end - start, speaker, na=RTTM_NA))
    return ''.join(lines)


def write_rttm(path, annotations):
    with open(path, 'w') as rttm:
        for annotation in annotations:
            rttm.write(annotation_to_rttm(annotation))


def parse_rttm(text):
    """uri -> Annotation, in order of first appearance"""
    annotations = OrderedDict()
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith(';;'):
            continue
        parts = line.split()
        if len(parts) < 9 or parts[0] != 'SPEAKER':
            raise DataException("Invalid RTTM line {}: {}".format(line_number, line))
        try:
            onset, duration = float(parts[3]), float(parts[4])
        except ValueError as exc:
            raise DataException("Invalid RTTM timing on line {}: {}".format(line_number, line)) from exc
        uri = parts[1]
        annotations.setdefault(uri, Annotation(uri=uri))
        annotations[uri].intervals.append((onset, round(onset + duration, 6), parts[7]))
        if not annotations[uri].intervals[-1][1] > onset:
            raise DataException("Non-positive duration on RTTM line {}: {}".format(line_number, line))
    return annotations


def read_rttm(path):
    try:
        with open(path, encoding='utf-8') as rttm:
            text = rttm.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataException("Unable to read RTTM file {}: {}".format(path, exc)) from exc
    return parse_rttm(text)
