import math
import os

import numpy as np
import pytest

from cfrelevance import transformer
from cfrelevance.config import RunConfig
from cfrelevance.errors import (CacheInvalidError, ClassIndexError, DimensionError, DivergenceError,
                                InputError, ParameterError)
from cfrelevance.synthetic import SyntheticSpec, generate_synthetic, split
from cfrelevance.transformer import ModelConfig, TrainHyper

TINY = ModelConfig(image_size=8, patch_size=4, num_blocks=2, num_heads=2, embed_dim=8,
                   mlp_dim=16, num_classes=2, seed=3, channels=3)
GOLDEN = ModelConfig(image_size=8, patch_size=4, num_blocks=1, num_heads=1, embed_dim=4,
                     mlp_dim=8, num_classes=2, seed=7, channels=3)


def jittered_params(config=TINY, seed=11, scale=0.1):
    "initial weights plus noise so that biases and LN gains are not trivial"
    params = transformer.init_params(config)
    rng = np.random.default_rng(seed)
    for name, value in params.items():
        params[name] = value + rng.normal(scale=scale, size=value.shape)
    return params


def random_image(config=TINY, seed=5):
    return np.random.default_rng(seed).uniform(0, 1, size=(config.channels, config.image_size, config.image_size))


def relative_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def reference_forward(image, params, config):
    "token-by-token rendition of the forward pass"
    c, p, g = config.channels, config.patch_size, config.grid
    d, heads, dh = config.embed_dim, config.num_heads, config.head_dim

    def ln(vec, gain, bias):
        mean = sum(vec) / len(vec)
        var = sum((x - mean) ** 2 for x in vec) / len(vec)
        return np.array([(x - mean) / math.sqrt(var + 1e-6) for x in vec]) * gain + bias

    def gelu(x):
        return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    tokens = [params['cls'] + params['pos'][0]]
    for gy in range(g):
        for gx in range(g):
            flat = image[:, gy * p:(gy + 1) * p, gx * p:(gx + 1) * p].reshape(c * p * p)
            tokens.append(flat @ params['patch/w'] + params['patch/b'] + params['pos'][len(tokens)])
    x = [t.copy() for t in tokens]
    for b in range(config.num_blocks):
        pre = 'block%d/' % b
        h = [ln(t, params[pre + 'ln1/g'], params[pre + 'ln1/b']) for t in x]
        q = [t @ params[pre + 'wq'] for t in h]
        k = [t @ params[pre + 'wk'] for t in h]
        v = [t @ params[pre + 'wv'] for t in h]
        out = []
        for i in range(len(x)):
            ctx = np.zeros(d)
            for head in range(heads):
                sl = slice(head * dh, (head + 1) * dh)
                s = [float(q[i][sl] @ k[j][sl]) / math.sqrt(dh) for j in range(len(x))]
                top = max(s)
                e = [math.exp(v_ - top) for v_ in s]
                total = sum(e)
                for j in range(len(x)):
                    ctx[sl] += e[j] / total * v[j][sl]
            out.append(x[i] + ctx @ params[pre + 'wo'] + params[pre + 'bo'])
        x = []
        for t in out:
            h2 = ln(t, params[pre + 'ln2/g'], params[pre + 'ln2/b'])
            u = h2 @ params[pre + 'mlp/w1'] + params[pre + 'mlp/b1']
            a = np.array([gelu(val) for val in u])
            x.append(t + a @ params[pre + 'mlp/w2'] + params[pre + 'mlp/b2'])
    z = ln(x[0], params['ln/g'], params['ln/b'])
    return z @ params['head/w'] + params['head/b']


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(image_size=10, patch_size=4).validate()
    with pytest.raises(ParameterError):
        ModelConfig(embed_dim=10, num_heads=3).validate()
    assert TINY.num_tokens == 5
    assert TINY.patch_dim == 48


def test_forward_shapes_and_determinism():
    params = jittered_params()
    image = random_image()
    logits, cache = transformer.forward(image, params, TINY)
    again, cache2 = transformer.forward(image, params, TINY)
    assert logits.shape == (2,)
    assert np.array_equal(logits, again)
    assert len(cache.attention) == TINY.num_blocks
    for a, a2 in zip(cache.attention, cache2.attention):
        assert a.shape == (2, 5, 5)
        assert np.array_equal(a, a2)
        assert np.max(np.abs(a.sum(axis=-1) - 1)) < 1e-12


def test_forward_matches_reference():
    params = jittered_params()
    image = random_image()
    logits, _ = transformer.forward(image, params, TINY)
    assert np.max(np.abs(logits - reference_forward(image, params, TINY))) < 1e-10
    golden = transformer.init_params(GOLDEN)
    logits, _ = transformer.forward(random_image(GOLDEN), golden, GOLDEN)
    assert np.max(np.abs(logits - reference_forward(random_image(GOLDEN), golden, GOLDEN))) < 1e-10


def test_forward_golden_logits():
    # zero queries give uniform attention over 5 tokens; patch tokens are 0
    params = transformer.init_params(GOLDEN)
    for name in ('patch/w', 'patch/b', 'pos', 'block0/wq', 'block0/wk', 'block0/mlp/w1'):
        params[name] = np.zeros_like(params[name])
    params['cls'] = np.array([1.0, -1.0, 1.0, -1.0])
    params['block0/wv'] = np.eye(4)
    params['block0/wo'] = np.eye(4)
    params['head/w'] = np.array([[1.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 0.0]])
    params['head/b'] = np.array([0.5, -0.25])
    logits, _ = transformer.forward(random_image(GOLDEN), params, GOLDEN)

    scale = 1.0 + 0.2 / math.sqrt(1.0 + 1e-6)
    q = scale / math.sqrt(scale * scale + 1e-6)
    assert np.max(np.abs(logits - [q + 0.5, q - 0.25])) < 1e-12
    assert np.max(np.abs(logits - [1.4999996528, 0.7499996528])) < 1e-9


def test_forward_rejects_wrong_image():
    params = transformer.init_params(TINY)
    with pytest.raises(DimensionError):
        transformer.forward(np.zeros((3, 9, 9)), params, TINY)


def test_zero_queries_give_uniform_attention():
    params = transformer.init_params(TINY)
    for b in range(TINY.num_blocks):
        params['block%d/wq' % b] = np.zeros((8, 8))
        params['block%d/wk' % b] = np.zeros((8, 8))
    _, cache = transformer.forward(np.zeros((3, 8, 8)), params, TINY)
    for a in cache.attention:
        assert np.max(np.abs(a - 1 / 5)) < 1e-12


def test_patch_permutation_invariance():
    params = jittered_params()
    image = random_image()
    swapped = image.copy()
    swapped[:, 0:4, 0:4], swapped[:, 4:8, 4:8] = image[:, 4:8, 4:8], image[:, 0:4, 0:4]
    permuted = params.copy()
    permuted['pos'][[1, 4]] = params['pos'][[4, 1]]
    a, _ = transformer.forward(image, params, TINY)
    b, _ = transformer.forward(swapped, permuted, TINY)
    assert np.max(np.abs(a - b)) < 1e-10


def test_parameter_gradients_finite_differences():
    params = jittered_params()
    image = random_image()
    label = 1
    _, cache = transformer.forward(image, params, TINY)
    grads = transformer.backward_params(cache, label, params)

    rng = np.random.default_rng(21)
    names = sorted(params.tensors)
    h = 1e-5
    checked = 0
    for _ in range(60):
        name = names[rng.integers(len(names))]
        index = np.unravel_index(rng.integers(params[name].size), params[name].shape)
        plus, minus = params.copy(), params.copy()
        plus[name][index] += h
        minus[name][index] -= h
        numeric = (transformer.cross_entropy(transformer.forward(image, plus, TINY)[0], label)
                   - transformer.cross_entropy(transformer.forward(image, minus, TINY)[0], label)) / (2 * h)
        assert relative_error(grads[name][index], numeric) < 1e-4, (name, index)
        checked += 1
    assert checked >= 50


def test_zero_head_gradient():
    params = transformer.init_params(TINY)
    params['head/w'] = np.zeros((8, 2))
    params['head/b'] = np.zeros(2)
    _, cache = transformer.forward(random_image(), params, TINY)
    grads = transformer.backward_params(cache, 1, params)
    assert np.allclose(grads['head/b'], [0.5, -0.5], atol=1e-15)


def test_gradient_vanishes_at_minimum():
    params = transformer.init_params(TINY)
    params['head/w'] = np.zeros((8, 2))
    params['head/b'] = np.array([0.0, 50.0])
    _, cache = transformer.forward(random_image(), params, TINY)
    assert transformer.backward_params(cache, 1, params).norm() < 1e-6


def test_stale_cache_rejected():
    params = jittered_params()
    _, cache = transformer.forward(random_image(), params, TINY)
    changed = params.copy()
    changed['head/b'][0] += 1.0
    with pytest.raises(CacheInvalidError):
        transformer.backward_params(cache, 0, changed)
    params['head/b'][1] += 1.0
    with pytest.raises(CacheInvalidError):
        transformer.attention_gradients(cache, 1)


def test_class_out_of_range():
    _, cache = transformer.forward(random_image(), jittered_params(), TINY)
    with pytest.raises(ClassIndexError):
        transformer.attention_gradients(cache, 2)
    with pytest.raises(IndexError):
        transformer.lrp_relevance(cache, -1)


@pytest.mark.parametrize('grad_target', ['logit', 'probability'])
def test_attention_gradients_finite_differences(grad_target):
    params = jittered_params()
    image = random_image()
    target = 1
    logits, cache = transformer.forward(image, params, TINY)
    grads = transformer.attention_gradients(cache, target, grad_target)

    def objective(override):
        out, _ = transformer.forward(image, params, TINY, attention_override=override)
        if grad_target == 'logit':
            return out[target]
        e = np.exp(out - out.max())
        return e[target] / e.sum()

    rng = np.random.default_rng(8)
    h = 1e-5
    for _ in range(50):
        b = int(rng.integers(TINY.num_blocks))
        index = tuple(int(rng.integers(n)) for n in cache.attention[b].shape)
        plus, minus = cache.attention[b].copy(), cache.attention[b].copy()
        plus[index] += h
        minus[index] -= h
        numeric = (objective({b: plus}) - objective({b: minus})) / (2 * h)
        assert relative_error(grads[b][index], numeric) < 1e-4, (b, index)


def test_attention_gradients_zero_value_path():
    params = jittered_params()
    for b in range(TINY.num_blocks):
        params['block%d/wv' % b] = np.zeros((8, 8))
    _, cache = transformer.forward(random_image(), params, TINY)
    for g in transformer.attention_gradients(cache, 1):
        assert np.all(g == 0.0)


def test_attention_gradients_linear_in_seed():
    _, cache = transformer.forward(random_image(), jittered_params(), TINY)
    _, both = transformer.backward(cache, np.ones(2))
    g0 = transformer.attention_gradients(cache, 0)
    g1 = transformer.attention_gradients(cache, 1)
    for b in range(TINY.num_blocks):
        assert np.max(np.abs(both[b] - (g0[b] + g1[b]))) < 1e-10


def test_attention_gradients_bad_target():
    _, cache = transformer.forward(random_image(), jittered_params(), TINY)
    with pytest.raises(ParameterError):
        transformer.attention_gradients(cache, 1, 'loss')


@pytest.mark.parametrize('params', [transformer.init_params(TINY), jittered_params(seed=0), jittered_params()],
                         ids=['init', 'jitter0', 'jitter11'])
def test_lrp_conserves_relevance(params):
    _, cache = transformer.forward(random_image(), params, TINY)
    audit = {}
    relevance = transformer.lrp_relevance(cache, 1, audit=audit)
    assert len(relevance) == TINY.num_blocks
    assert relevance[0].shape == (2, 5, 5)
    for layer in ('cls', 'block1', 'block0', 'input'):
        assert abs(audit[layer] - audit['logit']) <= 0.05 * abs(audit['logit']), layer


def test_lrp_bias_takes_no_relevance():
    params = jittered_params(seed=0)
    _, cache = transformer.forward(random_image(), params, TINY)
    audit = {}
    transformer.lrp_relevance(cache, 1, audit=audit)
    params['head/b'][1] += 5.0
    _, shifted = transformer.forward(random_image(), params, TINY)
    shifted_audit = {}
    transformer.lrp_relevance(shifted, 1, audit=shifted_audit)
    assert shifted_audit['logit'] == pytest.approx(audit['logit'] + 5.0, rel=1e-12)
    assert shifted_audit['cls'] == pytest.approx(shifted_audit['logit'], rel=1e-3)


def test_lrp_uniform_attention_gives_uniform_columns():
    params = transformer.init_params(GOLDEN)
    params['patch/w'] = np.zeros_like(params['patch/w'])
    params['patch/b'] = np.array([0.5, -1.0, 2.0, 0.25])
    params['cls'] = params['patch/b'].copy()
    params['pos'] = np.zeros_like(params['pos'])
    for name in ('wq', 'wk'):
        params['block0/' + name] = np.zeros((4, 4))
    params['block0/wv'] = np.eye(4)
    params['block0/wo'] = np.eye(4)
    _, cache = transformer.forward(random_image(GOLDEN), params, GOLDEN)
    assert np.all(cache.attention[0] == 0.2)
    relevance = transformer.lrp_relevance(cache, 1)[0]
    assert np.any(relevance != 0.0)
    for row in relevance.reshape(-1, 5):
        assert np.ptp(row) <= 1e-12 * max(1.0, np.max(np.abs(row)))


def test_lrp_zero_logit_gives_zero_relevance():
    params = jittered_params()
    params['head/w'][:, 1] = 0.0
    params['head/b'][1] = 0.0
    _, cache = transformer.forward(random_image(), params, TINY)
    for r in transformer.lrp_relevance(cache, 1):
        assert np.all(r == 0.0)


def test_lrp_rejects_bad_epsilon():
    _, cache = transformer.forward(random_image(), jittered_params(), TINY)
    with pytest.raises(ParameterError):
        transformer.lrp_relevance(cache, 1, epsilon=0.0)


def test_attribution_inputs_providers():
    _, cache = transformer.forward(random_image(), jittered_params(), TINY)
    inputs = transformer.attribution_inputs(cache, 1, provider='attention')
    for r, a in zip(inputs.relevance, cache.attention):
        assert np.array_equal(r, a)
    with pytest.raises(ParameterError):
        transformer.attribution_inputs(cache, 1, provider='saliency')


def test_train_zero_learning_rate_keeps_init():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(4, 3, 8, 8))
    params = transformer.train(images, [0, 1, 0, 1], TINY, TrainHyper(epochs=2, batch_size=2, learning_rate=0.0))
    init = transformer.init_params(TINY)
    for name, value in init.items():
        assert np.array_equal(params[name], value)


def test_train_is_deterministic():
    rng = np.random.default_rng(1)
    images = rng.uniform(size=(6, 3, 8, 8))
    labels = [0, 1, 1, 0, 1, 0]
    hyper = TrainHyper(epochs=2, batch_size=4, learning_rate=0.1, seed=9)
    first_history, second_history = [], []
    a = transformer.train(images, labels, TINY, hyper, history=first_history)
    b = transformer.train(images, labels, TINY, hyper, history=second_history)
    assert first_history == second_history
    assert len(first_history) == 4
    for name in a:
        assert np.array_equal(a[name], b[name])


def test_train_rejects_empty_and_bad_labels():
    with pytest.raises(InputError):
        transformer.train(np.zeros((0, 3, 8, 8)), [], TINY, TrainHyper(epochs=1))
    with pytest.raises(InputError):
        transformer.train(np.zeros((2, 3, 8, 8)), [0, 2], TINY, TrainHyper(epochs=1))


def test_train_divergence_names_step():
    images = np.random.default_rng(2).uniform(size=(2, 3, 8, 8))
    with np.errstate(all='ignore'):
        with pytest.raises(DivergenceError) as excinfo:
            transformer.train(images, [0, 1], TINY, TrainHyper(epochs=3, batch_size=1, learning_rate=float('inf')))
    assert excinfo.value.step == 0
    with pytest.raises(ParameterError):
        transformer.train(images, [0, 1], TINY, TrainHyper(epochs=1, learning_rate=-0.1))


def smoothed(history, window=10):
    return np.convolve(history, np.ones(window) / window, mode='valid')


def test_train_full_batch_loss_never_rises():
    dataset = generate_synthetic(SyntheticSpec(num_images=8, image_size=8))
    history = []
    transformer.train(dataset.images, dataset.labels, TINY, TrainHyper(epochs=12, batch_size=8, learning_rate=0.1),
                      history=history)
    assert len(history) == 12
    assert np.all(np.diff(history) <= 0)
    assert np.all(np.diff(smoothed(history)) <= 1e-12)
    assert history[-1] < history[0]


def test_descend_backs_off_until_loss_drops():
    images = np.random.default_rng(3).uniform(size=(2, 3, 8, 8))
    labels = np.array([0, 1])
    params = transformer.init_params(TINY)
    batch = np.arange(2)
    loss, grads = transformer.batch_objective(images, labels, batch, params, TINY)
    stepped, new_loss, rate = transformer.descend(images, labels, batch, params, TINY, loss, grads, 1e6, 0)
    assert new_loss <= loss
    assert 0 < rate <= 1.1e6
    again, _ = transformer.batch_objective(images, labels, batch, stepped, TINY, gradients=False)
    assert again == new_loss


@pytest.mark.slow
def test_default_training_converges_monotonically():
    config = RunConfig()
    dataset = generate_synthetic(config.synthetic_spec())
    splits = split(len(dataset), config.fractions, config.split_seed)
    model_config = config.model_config()
    history = []
    params = transformer.train(dataset.images[splits['train']], dataset.labels[splits['train']], model_config,
                               config.train_hyper(), history=history)
    assert len(history) == config.epochs
    assert np.all(np.diff(smoothed(history)) <= 1e-12)
    assert history[-1] < 0.5 * history[0]
    predicted = transformer.predict_proba(dataset.images[splits['test']], params, model_config).argmax(axis=1)
    assert np.mean(predicted == dataset.labels[splits['test']]) >= 0.95


def test_params_round_trip(tmpdir):
    params = jittered_params()
    path = os.path.join(str(tmpdir), 'model.cfrt')
    transformer.save_params(path, params)
    loaded = transformer.load_params(path, TINY)
    for name, value in params.items():
        assert np.array_equal(loaded[name], value.astype(np.float32).astype(np.float64))
    with open(path + '.manifest') as fd:
        lines = fd.read().splitlines()
    assert len(lines) == len(TINY.shapes())
    assert 'pos,5x8' in lines
    with pytest.raises(DimensionError):
        transformer.load_params(path, ModelConfig(image_size=8, patch_size=4, num_blocks=1, num_heads=2,
                                                  embed_dim=8, mlp_dim=16))
