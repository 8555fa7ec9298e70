#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

"""
Desk-scale ViT surrogate, all numpy, float64.

    tokens  = [cls ; patches W_p + b_p] + pos
    block   : x += MHA(LN1(x)) W_o + b_o ;  x += GELU(LN2(x) W_1 + b_1) W_2 + b_2
    output  : z = LN(x)[0] ; logits = z W_h + b_h

forward() keeps every intermediate in an ActivationCache. backward() walks
the cache once and returns both the parameter gradients and the gradient of
the seeded output w.r.t. every post-softmax attention matrix (later
attention matrices are recomputed functions of earlier ones, so this is the
full derivative). lrp_relevance() walks the same cache with the epsilon rule.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from .errors import CacheInvalidError, ClassIndexError, DimensionError, DivergenceError, InputError, ParameterError
from .synthetic import STREAM_BATCHES, STREAM_INIT, philox
from .tensorcore import softmax_rows
from .tensorfile import read_tensors, write_tensors

logger = logging.getLogger(__name__)

LN_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)
LR_GROW = 1.1
LR_SHRINK = 0.5
MAX_BACKTRACK = 30


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    num_blocks: int = 2
    num_heads: int = 2
    embed_dim: int = 16
    mlp_dim: int = 32
    num_classes: int = 2
    seed: int = 0
    channels: int = 3

    def validate(self):
        for name in ('image_size', 'patch_size', 'num_blocks', 'num_heads', 'embed_dim',
                     'mlp_dim', 'num_classes', 'channels'):
            if getattr(self, name) < 1:
                raise ParameterError("%s must be positive" % name)
        if self.image_size % self.patch_size:
            raise ParameterError("image_size %d not divisible by patch_size %d" % (self.image_size, self.patch_size))
        if self.embed_dim % self.num_heads:
            raise ParameterError("embed_dim %d not divisible by num_heads %d" % (self.embed_dim, self.num_heads))

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def num_tokens(self):
        return self.num_patches + 1

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    def shapes(self):
        "name -> shape of every parameter, in serialisation order"
        d, m = self.embed_dim, self.mlp_dim
        shapes = {
            'patch/w': (self.patch_dim, d),
            'patch/b': (d,),
            'cls': (d,),
            'pos': (self.num_tokens, d),
        }
        for b in range(self.num_blocks):
            p = 'block%d/' % b
            shapes.update({
                p + 'ln1/g': (d,), p + 'ln1/b': (d,),
                p + 'wq': (d, d), p + 'wk': (d, d), p + 'wv': (d, d),
                p + 'wo': (d, d), p + 'bo': (d,),
                p + 'ln2/g': (d,), p + 'ln2/b': (d,),
                p + 'mlp/w1': (d, m), p + 'mlp/b1': (m,),
                p + 'mlp/w2': (m, d), p + 'mlp/b2': (d,),
            })
        shapes.update({'ln/g': (d,), 'ln/b': (d,),
                       'head/w': (d, self.num_classes), 'head/b': (self.num_classes,)})
        return shapes


class ModelParams:
    """
    Named float64 arrays. Also used for gradients, which share the layout.
    """

    def __init__(self, tensors):
        self.tensors = {name: np.asarray(value, dtype=np.float64) for name, value in tensors.items()}

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self):
        return ModelParams({name: value.copy() for name, value in self.items()})

    def zeros_like(self):
        return ModelParams({name: np.zeros_like(value) for name, value in self.items()})

    def norm(self):
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.tensors.values()))

    def check(self, config):
        expected = config.shapes()
        if set(expected) != set(self.tensors):
            raise DimensionError("parameter names differ from config: %s" %
                                 sorted(set(expected) ^ set(self.tensors)))
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError("%s has shape %s, expected %s" % (name, self.tensors[name].shape, shape))
            if not np.all(np.isfinite(self.tensors[name])):
                raise InputError("%s has non-finite values" % name)


def init_params(config):
    """
    Glorot-uniform weights from the config seed; biases 0, LN scales 1
    """
    config.validate()
    rng = philox(config.seed, STREAM_INIT)
    tensors = {}
    for name, shape in config.shapes().items():
        leaf = name.rsplit('/', 1)[-1]
        if leaf == 'g':
            tensors[name] = np.ones(shape)
        elif leaf in ('b', 'bo', 'b1', 'b2'):
            tensors[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape if len(shape) == 2 else (1, shape[0])
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-a, a, size=shape)
    return ModelParams(tensors)


def save_params(path, params):
    write_tensors(path, params.tensors)
    with open(path + '.manifest', 'w', encoding='utf-8', newline='\n') as fd:
        for name, value in params.items():
            fd.write("%s,%s\n" % (name, 'x'.join(str(n) for n in value.shape)))


def load_params(path, config):
    params = ModelParams(read_tensors(path))
    params.check(config)
    return params


def digest(image, params):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype=np.float64).tobytes())
    for name in sorted(params.tensors):
        h.update(name.encode('utf-8'))
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def patchify(image, config):
    "C x S x S -> P x (C p p), patches row-major over the grid"
    c, g, p = config.channels, config.grid, config.patch_size
    return image.reshape(c, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, c * p * p)


def layer_norm(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * g + b, (xhat, inv_std)


def layer_norm_backward(dy, stats, g):
    xhat, inv_std = stats
    dxhat = dy * g
    dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, np.sum(dy * xhat, axis=0), np.sum(dy, axis=0)


def gelu(u):
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + 0.044715 * u ** 3)))


def gelu_grad(u):
    t = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


@dataclass
class BlockCache:
    x_in: np.ndarray
    h1: np.ndarray
    ln1: tuple
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray     # H x T x T, pre-softmax
    attention: np.ndarray  # H x T x T
    ctx: np.ndarray
    attn_out: np.ndarray
    x_mid: np.ndarray
    h2: np.ndarray
    ln2: tuple
    u: np.ndarray
    a: np.ndarray
    m: np.ndarray
    x_out: np.ndarray


@dataclass
class ActivationCache:
    image: np.ndarray
    config: ModelConfig
    params: ModelParams
    digest: str
    patches: np.ndarray
    tokens: np.ndarray
    blocks: list
    ln_final: tuple
    encoded: np.ndarray
    cls_embedding: np.ndarray
    logits: np.ndarray

    @property
    def attention(self):
        return [block.attention for block in self.blocks]

    def validate(self):
        if digest(self.image, self.params) != self.digest:
            raise CacheInvalidError("activation cache is stale: input or parameters changed since forward")


@dataclass
class AttributionInputs:
    gradients: list = field(default_factory=list)  # per block, H x T x T
    relevance: list = field(default_factory=list)  # per block, H x T x T

    def check(self, cache):
        if len(self.gradients) != len(cache.blocks) or len(self.relevance) != len(cache.blocks):
            raise DimensionError("attribution inputs must cover every block")
        for b, block in enumerate(cache.blocks):
            for tensor in (self.gradients[b], self.relevance[b]):
                if tensor.shape != block.attention.shape:
                    raise DimensionError("block %d: shape %s != attention %s" % (b, tensor.shape, block.attention.shape))
                if not np.all(np.isfinite(tensor)):
                    raise InputError("block %d: non-finite attribution input" % b)


def forward(image, params, config, attention_override=None):
    """
    logits and full activation cache for one C x S x S image.
    attention_override maps block index -> H x T x T matrices used in place
    of the softmax output (finite-difference checks on A).
    """
    image = np.asarray(image, dtype=np.float64)
    expected = (config.channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise DimensionError("image shape %s, expected %s" % (image.shape, expected))

    H, dh = config.num_heads, config.head_dim
    patches = patchify(image, config)
    tokens = np.vstack([params['cls'][None, :], patches @ params['patch/w'] + params['patch/b']]) + params['pos']

    x = tokens
    blocks = []
    for b in range(config.num_blocks):
        p = 'block%d/' % b
        h1, ln1 = layer_norm(x, params[p + 'ln1/g'], params[p + 'ln1/b'])
        q, k, v = h1 @ params[p + 'wq'], h1 @ params[p + 'wk'], h1 @ params[p + 'wv']
        qh = q.reshape(-1, H, dh).transpose(1, 0, 2)
        kh = k.reshape(-1, H, dh).transpose(1, 0, 2)
        vh = v.reshape(-1, H, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
        attention = softmax_rows(scores)
        if attention_override is not None and b in attention_override:
            attention = np.asarray(attention_override[b], dtype=np.float64)
        ctx = (attention @ vh).transpose(1, 0, 2).reshape(-1, config.embed_dim)
        attn_out = ctx @ params[p + 'wo'] + params[p + 'bo']
        x_mid = x + attn_out
        h2, ln2 = layer_norm(x_mid, params[p + 'ln2/g'], params[p + 'ln2/b'])
        u = h2 @ params[p + 'mlp/w1'] + params[p + 'mlp/b1']
        a = gelu(u)
        m = a @ params[p + 'mlp/w2'] + params[p + 'mlp/b2']
        x_out = x_mid + m
        blocks.append(BlockCache(x, h1, ln1, q, k, v, scores, attention, ctx, attn_out,
                                 x_mid, h2, ln2, u, a, m, x_out))
        x = x_out

    encoded, ln_final = layer_norm(x, params['ln/g'], params['ln/b'])
    z = encoded[0].copy()
    logits = z @ params['head/w'] + params['head/b']
    cache = ActivationCache(image, config, params, digest(image, params), patches, tokens,
                            blocks, ln_final, encoded, z, logits)
    return logits, cache


def backward(cache, dlogits):
    """
    Backpropagate an output seed dL/dlogits. Returns (parameter gradients,
    per-block dL/dA as H x T x T arrays).
    """
    config, params = cache.config, cache.params
    H, dh = config.num_heads, config.head_dim
    grads = params.zeros_like()
    dlogits = np.asarray(dlogits, dtype=np.float64)

    grads['head/w'] = np.outer(cache.cls_embedding, dlogits)
    grads['head/b'] = dlogits.copy()
    dencoded = np.zeros_like(cache.encoded)
    dencoded[0] = params['head/w'] @ dlogits
    dx, grads['ln/g'], grads['ln/b'] = layer_norm_backward(dencoded, cache.ln_final, params['ln/g'])

    dattention = [None] * config.num_blocks
    for b in reversed(range(config.num_blocks)):
        p = 'block%d/' % b
        blk = cache.blocks[b]

        dm = dx
        grads[p + 'mlp/w2'] = blk.a.T @ dm
        grads[p + 'mlp/b2'] = dm.sum(axis=0)
        du = (dm @ params[p + 'mlp/w2'].T) * gelu_grad(blk.u)
        grads[p + 'mlp/w1'] = blk.h2.T @ du
        grads[p + 'mlp/b1'] = du.sum(axis=0)
        dmid, grads[p + 'ln2/g'], grads[p + 'ln2/b'] = layer_norm_backward(
            du @ params[p + 'mlp/w1'].T, blk.ln2, params[p + 'ln2/g'])
        dmid = dmid + dx

        grads[p + 'wo'] = blk.ctx.T @ dmid
        grads[p + 'bo'] = dmid.sum(axis=0)
        dctx = (dmid @ params[p + 'wo'].T).reshape(-1, H, dh).transpose(1, 0, 2)
        qh = blk.q.reshape(-1, H, dh).transpose(1, 0, 2)
        kh = blk.k.reshape(-1, H, dh).transpose(1, 0, 2)
        vh = blk.v.reshape(-1, H, dh).transpose(1, 0, 2)

        dA = dctx @ vh.transpose(0, 2, 1)
        dattention[b] = dA
        dvh = blk.attention.transpose(0, 2, 1) @ dctx
        dscores = blk.attention * (dA - np.sum(dA * blk.attention, axis=-1, keepdims=True)) / math.sqrt(dh)
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh

        dq = dqh.transpose(1, 0, 2).reshape(-1, config.embed_dim)
        dk = dkh.transpose(1, 0, 2).reshape(-1, config.embed_dim)
        dv = dvh.transpose(1, 0, 2).reshape(-1, config.embed_dim)
        grads[p + 'wq'] = blk.h1.T @ dq
        grads[p + 'wk'] = blk.h1.T @ dk
        grads[p + 'wv'] = blk.h1.T @ dv
        dh1 = dq @ params[p + 'wq'].T + dk @ params[p + 'wk'].T + dv @ params[p + 'wv'].T
        din, grads[p + 'ln1/g'], grads[p + 'ln1/b'] = layer_norm_backward(dh1, blk.ln1, params[p + 'ln1/g'])
        dx = dmid + din

    grads['pos'] = dx.copy()
    grads['cls'] = dx[0].copy()
    grads['patch/w'] = cache.patches.T @ dx[1:]
    grads['patch/b'] = dx[1:].sum(axis=0)
    return grads, dattention


def _check_class(cache, index):
    if not 0 <= int(index) < cache.config.num_classes:
        raise ClassIndexError("class %s out of range [0, %d)" % (index, cache.config.num_classes))


def cross_entropy(logits, label):
    shifted = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(shifted))) - shifted[label])


def backward_params(cache, label, params):
    "cross-entropy gradients for every parameter"
    if digest(cache.image, params) != cache.digest:
        raise CacheInvalidError("activation cache was computed with different inputs or parameters")
    _check_class(cache, label)
    dlogits = softmax_rows(cache.logits)
    dlogits[label] -= 1.0
    grads, _ = backward(cache, dlogits)
    return grads


def attention_gradients(cache, target_class, grad_target='logit'):
    """
    d(target)/dA for every block and head, where target is the pre-softmax
    logit (default) or the class probability.
    """
    cache.validate()
    _check_class(cache, target_class)
    seed = np.zeros(cache.config.num_classes)
    if grad_target == 'logit':
        seed[target_class] = 1.0
    elif grad_target == 'probability':
        probs = softmax_rows(cache.logits)
        seed = -probs[target_class] * probs
        seed[target_class] += probs[target_class]
    else:
        raise ParameterError("grad_target must be 'logit' or 'probability', got %r" % grad_target)
    _, dattention = backward(cache, seed)
    return dattention


def _stabilise(z, epsilon):
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def _lrp_linear(x, w, relevance, epsilon):
    """
    epsilon rule for y = x w + b. The denominator is x w without the bias,
    so the whole relevance of y reaches x, split in proportion to x_i w_ij
    """
    return x * ((relevance / _stabilise(x @ w, epsilon)) @ w.T)


def _lrp_sum(parts, total, relevance, epsilon):
    "proportional split of relevance over the addends of total"
    s = relevance / _stabilise(total, epsilon)
    return [part * s for part in parts]


def lrp_relevance(cache, target_class, epsilon=1e-6, audit=None):
    """
    Epsilon-rule relevance for every post-softmax attention matrix.

    The seed is the target logit. LayerNorm and GELU pass relevance through
    unchanged and bias terms take no share, so apart from the stabilisers
    the input receives all of the seed. At each attention-value product
    ctx = A v the contribution A[i,j] v[j,k] of the value path is what is
    credited to A[i,j]; the propagation towards the input follows the value
    path only. If `audit` is a dict it receives the total relevance per
    layer, ending at 'input'.
    """
    if epsilon <= 0:
        raise ParameterError("epsilon must be positive, got %r" % epsilon)
    cache.validate()
    _check_class(cache, target_class)
    config, params = cache.config, cache.params
    H, dh = config.num_heads, config.head_dim

    seed = np.zeros(config.num_classes)
    seed[target_class] = cache.logits[target_class]
    r_encoded = np.zeros_like(cache.encoded)
    r_encoded[0] = _lrp_linear(cache.cls_embedding, params['head/w'], seed, epsilon)
    if audit is not None:
        audit['logit'] = float(seed.sum())
        audit['cls'] = float(r_encoded.sum())

    r = r_encoded
    relevance = [None] * config.num_blocks
    for b in reversed(range(config.num_blocks)):
        p = 'block%d/' % b
        blk = cache.blocks[b]
        r_mid, r_m = _lrp_sum([blk.x_mid, blk.m], blk.x_out, r, epsilon)
        r_a = _lrp_linear(blk.a, params[p + 'mlp/w2'], r_m, epsilon)
        r_h2 = _lrp_linear(blk.h2, params[p + 'mlp/w1'], r_a, epsilon)
        r_mid = r_mid + r_h2

        r_in, r_attn = _lrp_sum([blk.x_in, blk.attn_out], blk.x_mid, r_mid, epsilon)
        r_ctx = _lrp_linear(blk.ctx, params[p + 'wo'], r_attn, epsilon)
        s = (r_ctx / _stabilise(blk.ctx, epsilon)).reshape(-1, H, dh).transpose(1, 0, 2)
        vh = blk.v.reshape(-1, H, dh).transpose(1, 0, 2)
        relevance[b] = blk.attention * (s @ vh.transpose(0, 2, 1))
        r_v = (vh * (blk.attention.transpose(0, 2, 1) @ s)).transpose(1, 0, 2).reshape(-1, config.embed_dim)
        r_h1 = _lrp_linear(blk.h1, params[p + 'wv'], r_v, epsilon)
        r = r_in + r_h1
        if audit is not None:
            audit['block%d' % b] = float(r.sum())

    if audit is not None:
        audit['input'] = float(r.sum())
    return relevance


def attention_relevance(cache):
    "degenerate provider: relevance equals attention"
    cache.validate()
    return [block.attention.copy() for block in cache.blocks]


def attribution_inputs(cache, target_class, provider='lrp', epsilon=1e-6, grad_target='logit'):
    gradients = attention_gradients(cache, target_class, grad_target)
    if provider == 'lrp':
        relevance = lrp_relevance(cache, target_class, epsilon)
    elif provider == 'attention':
        relevance = attention_relevance(cache)
    else:
        raise ParameterError("unknown relevance provider %r" % provider)
    inputs = AttributionInputs(gradients, relevance)
    inputs.check(cache)
    return inputs


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0


def batch_objective(images, labels, batch, params, config, gradients=True):
    "mean cross-entropy over `batch` and, unless disabled, its parameter gradients"
    total = params.zeros_like() if gradients else None
    loss = 0.0
    for i in batch:
        logits, cache = forward(images[i], params, config)
        loss += cross_entropy(logits, labels[i])
        if gradients:
            for name, g in backward_params(cache, labels[i], params).items():
                total[name] += g
    if gradients:
        for name in total:
            total[name] = total[name] / len(batch)
    return loss / len(batch), total


def _trial_loss(images, labels, batch, params, config):
    if not all(np.all(np.isfinite(v)) for v in params.tensors.values()):
        return math.inf
    try:
        loss, _ = batch_objective(images, labels, batch, params, config, gradients=False)
    except InputError:
        # activations overflowed
        return math.inf
    return loss


def descend(images, labels, batch, params, config, loss, grads, lr, step):
    """
    One step along -grads that does not raise the batch loss. A rejected
    step is retried at half the rate; an accepted one lets the next step
    start 10% larger. Returns (params, loss, next rate). When every retry
    fails the parameters stay put, unless no retry had a finite loss.
    """
    trial_loss = math.inf
    for _ in range(MAX_BACKTRACK):
        trial = ModelParams({name: params[name] - lr * grads[name] for name in params})
        trial_loss = _trial_loss(images, labels, batch, trial, config)
        if trial_loss <= loss:
            return trial, trial_loss, lr * LR_GROW
        lr *= LR_SHRINK
    if not math.isfinite(trial_loss):
        raise DivergenceError(step, trial_loss)
    logger.debug("step %d: no descent after %d retries", step, MAX_BACKTRACK)
    return params, loss, lr


def train(images, labels, config, hyper, history=None, progress=False):
    """
    Gradient descent on mean cross-entropy with a backtracking step size.
    The batch order comes from the hyper seed, the initial weights from the
    config seed. A step never raises the loss of its own batch, so when
    batch_size covers the training set (the default) the loss recorded in
    `history`, one value per step, never goes up.
    """
    config.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise InputError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise InputError("labels outside [0, %d)" % config.num_classes)
    if hyper.batch_size < 1 or hyper.epochs < 0 or not hyper.learning_rate >= 0:
        raise ParameterError("batch_size must be >= 1, epochs >= 0 and learning_rate >= 0")

    params = init_params(config)
    rng = philox(hyper.seed, STREAM_BATCHES)
    lr = hyper.learning_rate
    step = 0
    for epoch in tqdm(range(hyper.epochs), desc='train', disable=not progress):
        order = rng.permutation(len(labels))
        epoch_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = np.sort(order[start:start + hyper.batch_size])
            loss, grads = batch_objective(images, labels, batch, params, config)
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            params, loss, lr = descend(images, labels, batch, params, config, loss, grads, lr, step)
            if history is not None:
                history.append(loss)
            epoch_loss += loss * len(batch)
            step += 1
        logger.debug("epoch %d loss %.6f rate %.4g", epoch, epoch_loss / len(labels), lr)
    return params


def predict_proba(images, params, config):
    return np.stack([softmax_rows(forward(image, params, config)[0]) for image in images])


def embed(images, params, config):
    "CLS embeddings, N x d"
    return np.stack([forward(image, params, config)[1].cls_embedding for image in images])
