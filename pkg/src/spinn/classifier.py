"""Sentence-pair entailment head and the combined training objective.

Both sentences are encoded by one parameter set (a single ParamStore holds
encoder and classifier weights). The pair feature vector concatenates the
two sentence vectors, their difference, and their elementwise product; an
MLP with ReLU layers and a 3-way softmax sits on top. Batch normalization
and dropout are applied to the feature vector entering each MLP layer and
to the last hidden output, matching the projection-layer treatment.
"""

from dataclasses import dataclass

import numpy as np

from spinn import encoder, ops
from spinn.transitions import PAD

LABELS = ("entailment", "contradiction", "neutral")
N_LABELS = 3


@dataclass
class ClassifierConfig:
    mlp_layers: int = 1
    mlp_dim: int = 1024
    keep_mlp: float = 0.94

    def __post_init__(self):
        if not 0 <= self.mlp_layers <= 3:
            raise ops.ConfigError(f"mlp_layers must be 0..3, got {self.mlp_layers}")
        if self.mlp_layers and self.mlp_dim < 1:
            raise ops.ConfigError("mlp_dim must be positive")


@dataclass
class LossWeights:
    alpha: float = 0.0  # transition supervision weight
    l2: float = 0.0

    def __post_init__(self):
        if self.alpha < 0 or self.l2 < 0:
            raise ops.ConfigError("loss weights must be nonnegative")


def init_classifier_params(dim, config, rng, store, stats):
    """Add MLP and softmax parameters to an existing store/stats pair.

    Hidden weights use fan-in Gaussian init; the final softmax layer uses
    small uniform init like the transition classifier.
    """
    width = 4 * dim
    for i in range(config.mlp_layers):
        store.add(f"cls.bn{i}.gamma", ops.ones(width))
        store.add(f"cls.bn{i}.beta", ops.zeros(width))
        stats[f"cls.bn{i}.mean"] = ops.zeros(width)
        stats[f"cls.bn{i}.var"] = ops.ones(width)
        store.add(f"cls.{i}.W", ops.he_init(width, config.mlp_dim, rng))
        store.add(f"cls.{i}.b", ops.zeros(config.mlp_dim))
        width = config.mlp_dim
    store.add("cls.bn_out.gamma", ops.ones(width))
    store.add("cls.bn_out.beta", ops.zeros(width))
    stats["cls.bn_out.mean"] = ops.zeros(width)
    stats["cls.bn_out.var"] = ops.ones(width)
    store.add("cls.out.W", ops.uniform_init(width, N_LABELS, -0.005, 0.005, rng))
    store.add("cls.out.b", ops.uniform_init(1, N_LABELS, -0.005, 0.005, rng)[0])


def init_pair_model(enc_config, cls_config, rng):
    """One shared ParamStore for the encoder (used for both sentences) and
    the classifier head."""
    store, stats = encoder.init_params(enc_config, rng)
    init_classifier_params(enc_config.dim, cls_config, rng, store, stats)
    return store, stats


# ---------------------------------------------------------------------------
# pair features


def pair_features(h_premise, h_hypothesis):
    """[h_p; h_h; h_p - h_h; h_p * h_h] rows; returns (features, cache)."""
    h_premise = np.atleast_2d(h_premise)
    h_hypothesis = np.atleast_2d(h_hypothesis)
    if h_premise.shape != h_hypothesis.shape:
        raise ops.ShapeError(
            f"pair widths differ: {h_premise.shape} vs {h_hypothesis.shape}")
    features = np.concatenate([
        h_premise,
        h_hypothesis,
        h_premise - h_hypothesis,
        h_premise * h_hypothesis,
    ], axis=1)
    return features, (h_premise, h_hypothesis)


def pair_features_backward(cache, d_features):
    h_p, h_h = cache
    d = h_p.shape[1]
    g0 = d_features[:, 0:d]
    g1 = d_features[:, d:2 * d]
    g2 = d_features[:, 2 * d:3 * d]
    g3 = d_features[:, 3 * d:4 * d]
    d_hp = g0 + g2 + g3 * h_h
    d_hh = g1 - g2 + g3 * h_p
    return d_hp, d_hh


# ---------------------------------------------------------------------------
# MLP + softmax


def classify(features, store, stats, config, mode="eval", rng=None):
    """Forward the pair head. Returns (logits, probs, cache)."""
    x = features
    caches = []
    for i in range(config.mlp_layers):
        y, bn_cache = ops.batch_norm(x, store.value(f"cls.bn{i}.gamma"),
                                     store.value(f"cls.bn{i}.beta"), mode,
                                     stats[f"cls.bn{i}.mean"],
                                     stats[f"cls.bn{i}.var"])
        drop = None
        if mode == "train" and config.keep_mlp < 1.0:
            drop = ops.dropout_mask(y.shape, config.keep_mlp, rng)
            y = y * drop
        pre = ops.linear(y, store.value(f"cls.{i}.W"), store.value(f"cls.{i}.b"))
        x_next = ops.relu(pre)
        caches.append((x, bn_cache, drop, y, pre))
        x = x_next
    y, bn_cache = ops.batch_norm(x, store.value("cls.bn_out.gamma"),
                                 store.value("cls.bn_out.beta"), mode,
                                 stats["cls.bn_out.mean"], stats["cls.bn_out.var"])
    drop = None
    if mode == "train" and config.keep_mlp < 1.0:
        drop = ops.dropout_mask(y.shape, config.keep_mlp, rng)
        y = y * drop
    logits = ops.linear(y, store.value("cls.out.W"), store.value("cls.out.b"))
    probs = ops.softmax(logits)
    caches.append((x, bn_cache, drop, y, None))
    return logits, probs, caches


def classify_backward(caches, d_logits, store, config):
    """Returns d_features; accumulates all head parameter gradients."""
    x, bn_cache, drop, y, _ = caches[-1]
    d_y, d_w, d_b = ops.linear_backward(y, store.value("cls.out.W"), d_logits)
    store.accumulate("cls.out.W", d_w)
    store.accumulate("cls.out.b", d_b)
    if drop is not None:
        d_y = d_y * drop
    d_x, d_gamma, d_beta = ops.batch_norm_backward(bn_cache, d_y)
    store.accumulate("cls.bn_out.gamma", d_gamma)
    store.accumulate("cls.bn_out.beta", d_beta)
    for i in range(config.mlp_layers - 1, -1, -1):
        x, bn_cache, drop, y, pre = caches[i]
        d_pre = ops.relu_backward(pre, d_x)
        d_y, d_w, d_b = ops.linear_backward(y, store.value(f"cls.{i}.W"), d_pre)
        store.accumulate(f"cls.{i}.W", d_w)
        store.accumulate(f"cls.{i}.b", d_b)
        if drop is not None:
            d_y = d_y * drop
        d_x, d_gamma, d_beta = ops.batch_norm_backward(bn_cache, d_y)
        store.accumulate(f"cls.bn{i}.gamma", d_gamma)
        store.accumulate(f"cls.bn{i}.beta", d_beta)
    return d_x


# ---------------------------------------------------------------------------
# combined objective


@dataclass
class PairBatch:
    """Model-ready arrays for B sentence pairs (already padded)."""

    embeds_premise: np.ndarray     # (B, N, 300)
    mask_premise: np.ndarray       # (B, N) bool
    actions_premise: np.ndarray    # (B, 2N-1) int8
    embeds_hypothesis: np.ndarray
    mask_hypothesis: np.ndarray
    actions_hypothesis: np.ndarray
    labels: np.ndarray             # (B,) int

    @property
    def size(self):
        return self.labels.shape[0]


class LossResult:
    def __init__(self, total, label_loss, transition_loss, l2_loss,
                 probs, accuracy, transition_accuracy, n_supervised):
        self.total = total
        self.label_loss = label_loss
        self.transition_loss = transition_loss
        self.l2_loss = l2_loss
        self.probs = probs
        self.accuracy = accuracy
        self.transition_accuracy = transition_accuracy
        self.n_supervised = n_supervised


def supervised_transition_stats(logits, gold):
    """Mean cross entropy and accuracy of per-step transition logits against
    gold actions; pad steps are excluded from both. Returns
    (loss, d_logits, accuracy, n_cells)."""
    supervised = gold != PAD
    n_cells = int(np.count_nonzero(supervised))
    d_logits = np.zeros_like(logits)
    if n_cells == 0:
        return 0.0, d_logits, 0.0, 0
    flat = logits[supervised]
    labels = gold[supervised].astype(np.int64)
    loss, probs, d_flat = ops.softmax_xent(flat, labels)
    d_logits[supervised] = d_flat
    accuracy = float(np.mean(flat.argmax(axis=1) == labels))
    return float(loss), d_logits, accuracy, n_cells


def total_loss(batch, store, stats, enc_config, cls_config, weights,
               mode="train", rng=None, need_backward=True):
    """Combined objective: label cross entropy, alpha-weighted transition
    cross entropy (mean over the supervised steps of both sentences), and an
    L2 penalty over all trained parameters (embeddings are frozen and never
    enter the store).

    When need_backward, gradients are accumulated into the store.
    Both sentences run through one batched encoder call with shared
    parameters, so train-mode batch statistics pool premise and hypothesis
    rows.
    """
    b = batch.size
    if np.any(batch.labels < 0) or np.any(batch.labels >= N_LABELS):
        raise ValueError("labels must be in 0..2")
    embeds = np.concatenate([batch.embeds_premise, batch.embeds_hypothesis])
    mask = np.concatenate([batch.mask_premise, batch.mask_hypothesis])
    actions = np.concatenate([batch.actions_premise, batch.actions_hypothesis])

    enc = encoder.encode_batch(embeds, actions, store, stats, enc_config,
                               mode=mode, rng=rng, token_mask=mask,
                               need_backward=need_backward)
    features, feat_cache = pair_features(enc.h[:b], enc.h[b:])
    logits, probs, cls_cache = classify(features, store, stats, cls_config,
                                        mode=mode, rng=rng)
    label_loss, _, d_logits = ops.softmax_xent(logits, batch.labels)

    transition_loss = 0.0
    transition_acc = None
    d_trans = None
    n_supervised = 0
    if enc_config.has_head and weights.alpha > 0:
        transition_loss, d_trans_raw, transition_acc, n_supervised = \
            supervised_transition_stats(enc.logits, actions)
        d_trans = weights.alpha * d_trans_raw

    l2_loss = weights.l2 * store.l2_norm_sq() if weights.l2 else 0.0
    total = float(label_loss) + weights.alpha * transition_loss + l2_loss
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")

    if need_backward:
        d_features = classify_backward(cls_cache, d_logits, store, cls_config)
        d_hp, d_hh = pair_features_backward(feat_cache, d_features)
        d_h = np.concatenate([d_hp, d_hh])
        encoder.encode_batch_backward(enc, d_h, store, enc_config,
                                      d_logits=d_trans)
        if weights.l2:
            for name, value, grad, _ in store.items():
                grad += 2.0 * weights.l2 * value

    accuracy = float(np.mean(probs.argmax(axis=1) == batch.labels))
    return LossResult(total, float(label_loss), float(transition_loss),
                      float(l2_loss), probs, accuracy, transition_acc,
                      n_supervised)


def free_running_transition_accuracy(executed, gold):
    """Accuracy of executed predicted actions against gold actions.

    Predicted runs start their real actions at step 0, while gold sequences
    may be left-padded, so lane b's first (2n'-1) executed actions are
    scored against the non-pad suffix of its gold sequence. Returns
    (hits, cells).
    """
    executed = np.atleast_2d(executed)
    gold = np.atleast_2d(gold)
    hits = 0
    cells = 0
    for lane in range(gold.shape[0]):
        real = gold[lane][gold[lane] != PAD]
        hits += int(np.count_nonzero(executed[lane, :real.size] == real))
        cells += real.size
    return hits, cells
