#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
The stages of a CFR run. Each stage reads the artifacts of the previous
ones from disk and writes its own, so running them one by one from the
command line and running run_pipeline() produce the same files.

    gen -> train -> uncertainty -> explain -> analyze (-> report)
"""

import functools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . import reporthelper
from .analysis import aggregate_by_class, partition, pearson, profile, relevance_entropy
from .ddu import UncertaintyScore, ece, fit, rank_by_confidence, save_discriminant, uncertainty
from .errors import CFRError, DimensionError, InputError, StageError, UndefinedCorrelationError
from .landcover import read_external_index
from .rollout import RelevanceMap, explain_image, write_pgm
from .synthetic import generate_synthetic, load_dataset, save_dataset, split
from .tensorcore import softmax_rows
from .tensorfile import read_tensors, write_tensors
from .transformer import forward, load_params, save_params, train

logger = logging.getLogger(__name__)

DDU_FILE = 'ddu.cfrt'
SCORES_FILE = 'scores.cfrt'
SCORES_TABLE = 'scores.csv'
RELEVANCE_FILE = 'relevance.cfrt'
PGM_DIR = 'pgm'
REPORT_TABLE = 'report.csv'
SUMMARY_FILE = 'summary.json'
RUN_CONFIG_FILE = 'run.conf'
CONFIDENT_LISTING = 5


@dataclass
class ThresholdResult:
    threshold: float
    size: int
    profile: object
    entropy: float
    pearson: float = None


@dataclass
class CFRReport:
    num_samples: int
    names: dict
    results: list = field(default_factory=list)
    ece: float = None
    accuracy: float = None
    index_name: str = None
    rank: bool = False
    most_confident: list = field(default_factory=list)
    least_confident: list = field(default_factory=list)
    population: str = 'all'


def stage(name):
    "tag every failure inside the stage with its name"
    def decorator(function):
        @functools.wraps(function)
        def wrapper(*args, **kwargs):
            try:
                return function(*args, **kwargs)
            except StageError:
                raise
            except (CFRError, OSError, KeyError, ValueError) as e:
                raise StageError(name, e) from e
        return wrapper
    return decorator


def parallel_map(function, items, threads):
    if threads <= 1:
        return list(map(function, items))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, items))


def _check_dataset(dataset, config):
    expected = (config.channels, config.image_size, config.image_size)
    if dataset.images.shape[1:] != expected:
        raise DimensionError("dataset images are %s, model expects %s" % (dataset.images.shape[1:], expected))
    for name in ('train', 'test'):
        if name not in dataset.splits:
            raise InputError("dataset has no '%s' split" % name)


@stage('gen')
def run_gen(config):
    dataset = generate_synthetic(config.synthetic_spec())
    dataset.splits = split(len(dataset), config.fractions, config.split_seed)
    save_dataset(config.dataset, dataset)
    logger.info("dataset written to %s", config.dataset)
    return dataset


@stage('train')
def run_train(config):
    dataset = load_dataset(config.dataset, config.verbose)
    _check_dataset(dataset, config)
    train_ids = dataset.splits['train']
    history = []
    params = train(dataset.images[train_ids], dataset.labels[train_ids], config.model_config(),
                   config.train_hyper(), history=history, progress=config.verbose > 0)
    save_params(config.model, params)
    if history:
        logger.info("trained %d steps, final loss %.6f", len(history), history[-1])
    return params


def _encode(image, params, model_config):
    logits, cache = forward(image, params, model_config)
    return cache.cls_embedding, softmax_rows(logits)


@stage('uncertainty')
def run_uncertainty(config):
    dataset = load_dataset(config.dataset, config.verbose)
    _check_dataset(dataset, config)
    model_config = config.model_config()
    params = load_params(config.model, model_config)

    encoded = parallel_map(lambda image: _encode(image, params, model_config), dataset.images, config.threads)
    embeddings = np.stack([e for e, _ in encoded])
    probabilities = np.stack([p for _, p in encoded])

    train_ids = dataset.splits['train']
    gd = fit(embeddings[train_ids], dataset.labels[train_ids], config.ridge_lambda,
             num_classes=config.num_classes, sample_ids=train_ids)
    scores = [uncertainty(gd, z, i) for i, z in enumerate(embeddings)]

    os.makedirs(config.output, exist_ok=True)
    save_discriminant(os.path.join(config.output, DDU_FILE), gd)
    write_tensors(os.path.join(config.output, SCORES_FILE), {
        'u': np.array([s.u for s in scores]),
        'nearest_class': np.array([s.nearest_class for s in scores]),
        'probabilities': probabilities,
        'embeddings': embeddings,
    })
    with open(os.path.join(config.output, SCORES_TABLE), 'w', newline='') as fd:
        fd.write(reporthelper.generate_scores_CSV(rank_by_confidence(scores), dataset.labels, probabilities))
    return scores


@stage('explain')
def run_explain(config):
    dataset = load_dataset(config.dataset, config.verbose)
    _check_dataset(dataset, config)
    model_config = config.model_config()
    params = load_params(config.model, model_config)

    def explain(image):
        return explain_image(image, params, model_config, config.target_class, config.relevance,
                             config.epsilon, config.grad_target)

    images = tqdm(dataset.images, desc='explain', disable=config.verbose == 0)
    maps = parallel_map(explain, images, config.threads)

    os.makedirs(config.output, exist_ok=True)
    write_tensors(os.path.join(config.output, RELEVANCE_FILE), {'maps': np.stack([m.values for m in maps])})
    if config.pgm:
        os.makedirs(os.path.join(config.output, PGM_DIR), exist_ok=True)
        for i, relevance_map in enumerate(maps):
            write_pgm(os.path.join(config.output, PGM_DIR, '%05d.pgm' % i), relevance_map)
    return maps


def load_scores(config):
    tensors = read_tensors(os.path.join(config.output, SCORES_FILE), config.verbose)
    scores = [UncertaintyScore(i, float(u), int(c))
              for i, (u, c) in enumerate(zip(tensors['u'], tensors['nearest_class']))]
    return scores, tensors['probabilities']


@stage('analyze')
def run_analyze(config):
    dataset = load_dataset(config.dataset, config.verbose)
    scores, probabilities = load_scores(config)
    maps = read_tensors(os.path.join(config.output, RELEVANCE_FILE), config.verbose)['maps']
    index = read_external_index(config.index) if config.index else None
    if not len(scores) == len(maps) == len(dataset):
        raise InputError("%d scores, %d relevance maps and %d images disagree" % (len(scores), len(maps), len(dataset)))

    if config.population == 'predicted':
        predicted = probabilities.argmax(axis=1)
        scores = [s for s in scores if predicted[s.sample_id] == config.target_class]
        if not scores:
            raise InputError("no sample is classified as class %d" % config.target_class)
        logger.info("analyzing the %d samples classified as class %d", len(scores), config.target_class)

    aggregates = dict(enumerate(parallel_map(
        lambda i: aggregate_by_class(RelevanceMap(maps[i]), dataset.rasters[i]), range(len(maps)), config.threads)))

    report = CFRReport(len(scores), dataset.names, index_name=index.name if index else None, rank=config.rank,
                       population=config.population)
    for subset in partition(scores, config.thresholds, config.partition_scope):
        p = profile(subset, aggregates, config.weighting)
        result = ThresholdResult(subset.threshold, len(subset.sample_ids), p, relevance_entropy(p))
        if index is not None:
            try:
                result.pearson = pearson(p, index, rank=config.rank)
            except (UndefinedCorrelationError, InputError) as e:
                logger.warning("no correlation at threshold %g: %s", subset.threshold, e)
        report.results.append(result)

    test_ids = dataset.splits.get('test', np.arange(len(dataset)))
    report.ece = ece(probabilities[test_ids], dataset.labels[test_ids], config.ece_bins)
    report.accuracy = float(np.mean(probabilities[test_ids].argmax(axis=1) == dataset.labels[test_ids]))
    ranked = rank_by_confidence(scores)
    report.most_confident = [(s.sample_id, s.u) for s in ranked[:CONFIDENT_LISTING]]
    report.least_confident = [(s.sample_id, s.u) for s in ranked[::-1][:CONFIDENT_LISTING]]

    os.makedirs(config.output, exist_ok=True)
    with open(os.path.join(config.output, REPORT_TABLE), 'w', newline='') as fd:
        fd.write(reporthelper.generate_CSV(report))
    with open(os.path.join(config.output, SUMMARY_FILE), 'w', newline='\n') as fd:
        fd.write(reporthelper.generate_summary(report))
    with open(os.path.join(config.output, RUN_CONFIG_FILE), 'w', newline='\n') as fd:
        fd.write(config.to_text())
    return report


@stage('report')
def run_report(config):
    with open(os.path.join(config.output, SUMMARY_FILE), encoding='utf-8') as fd:
        summary = json.load(fd)
    return reporthelper.generate_digest(summary)


def run_pipeline(config):
    "gen -> train -> uncertainty -> explain -> analyze"
    config.validate()
    run_gen(config)
    run_train(config)
    run_uncertainty(config)
    run_explain(config)
    return run_analyze(config)
