#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

import csv
import io
import json


def _csv_text(rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, delimiter=',', lineterminator='\n')
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def generate_CSV(report):
    """
    one row per (threshold, covered class): the data behind the class
    relevance plot
    """
    rows = [('threshold', 'class_id', 'class_name', 'mean_relevance', 'total_pixels')]
    for result in report.results:
        for class_id in sorted(result.profile.covered_classes):
            stat = result.profile.classes[class_id]
            rows.append(('%g' % result.threshold, class_id, report.names.get(class_id, ''),
                         repr(stat.mean_relevance), stat.total_pixels))
    return _csv_text(rows)


def generate_scores_CSV(ranked, labels, probabilities):
    rows = [('rank', 'sample_id', 'u', 'nearest_class', 'label', 'predicted', 'confidence')]
    for position, score in enumerate(ranked):
        p = probabilities[score.sample_id]
        rows.append((position, score.sample_id, repr(score.u), score.nearest_class,
                     int(labels[score.sample_id]), int(p.argmax()), repr(float(p.max()))))
    return _csv_text(rows)


def generate_summary(report):
    "entropy per threshold plus model-level metrics, as JSON"
    summary = {
        'num_samples': report.num_samples,
        'population': report.population,
        'ece': report.ece,
        'accuracy': report.accuracy,
        'index': report.index_name,
        'rank_correlation': report.rank,
        'thresholds': [{
            'threshold': result.threshold,
            'subset_size': result.size,
            'entropy': result.entropy,
            'pearson': result.pearson,
            'top_class': result.profile.top_class(),
        } for result in report.results],
        'most_confident': [[i, u] for i, u in report.most_confident],
        'least_confident': [[i, u] for i, u in report.least_confident],
        'class_names': {str(c): name for c, name in sorted(report.names.items())},
    }
    return json.dumps(summary, indent=2, sort_keys=True) + '\n'


def generate_digest(summary):
    names = summary.get('class_names', {})
    lines = []
    lines.append("-- CFR report --------------------------")
    lines.append("Samples:           %5d (%s)" % (summary['num_samples'], summary.get('population', 'all')))
    if summary.get('accuracy') is not None:
        lines.append("Test accuracy:     %8.4f" % summary['accuracy'])
    if summary.get('ece') is not None:
        lines.append("ECE:               %8.4f" % summary['ece'])
    index = summary.get('index')
    lines.append("")
    lines.append("threshold  size  entropy   top class%s" % ("   pearson(%s)" % index if index else ""))
    for row in summary['thresholds']:
        top = row.get('top_class')
        line = "%8g%%  %4d  %7.4f   %-12s" % (row['threshold'], row['subset_size'], row['entropy'],
                                              names.get(str(top), top))
        if index:
            line += "  %s" % ('n/a' if row['pearson'] is None else '%7.4f' % row['pearson'])
        lines.append(line)
    lines.append("")
    lines.append("Most confident:    %s" % ', '.join('%d (u=%.3f)' % (i, u) for i, u in summary['most_confident']))
    lines.append("Least confident:   %s" % ', '.join('%d (u=%.3f)' % (i, u) for i, u in summary['least_confident']))
    lines.append("-----------------------------------------")
    return '\n'.join(lines) + '\n'
