"""Synthetic corpora for tests and desk-scale runs.

Sentences come from a small deterministic grammar: the bracketing is a
fixed function of the part-of-speech sequence, and each token belongs to
exactly one part of speech, so gold transitions are fully predictable from
the words. Pair labels follow simple lexical rules (same main verb entails,
the designated opposite verb contradicts, any other verb is neutral), which
keeps the 200-pair bundled corpus hand-checkable.
"""

import json

import numpy as np

from spinn import ops
from spinn.encoder import GLOVE_DIM
from spinn.transitions import BinaryTree

DETS = ["the", "a", "every", "some"]
ADJS = ["big", "small", "red", "blue", "old", "young"]
NOUNS = ["dog", "cat", "bird", "man", "woman", "child", "robot", "horse"]
VERBS = ["runs", "sleeps", "jumps", "falls", "sings", "waits"]
ADVS = ["quickly", "quietly", "happily", "slowly"]

# fixed verb opposition used by the contradiction rule
VERB_OPPOSITE = {"runs": "sleeps", "sleeps": "runs",
                 "jumps": "falls", "falls": "jumps",
                 "sings": "waits", "waits": "sings"}

LABEL_ENTAILMENT = "entailment"
LABEL_CONTRADICTION = "contradiction"
LABEL_NEUTRAL = "neutral"


def vocabulary():
    return sorted(set(DETS + ADJS + NOUNS + VERBS + ADVS))


def _leaf(token):
    return BinaryTree.leaf(token)


def _node(left, right):
    return BinaryTree.internal(left, right)


def _np_tree(det, adjs, noun):
    # ( det ( adj ( adj noun ) ) ): right-branching inside the noun phrase
    inner = _leaf(noun)
    for adj in reversed(adjs):
        inner = _node(_leaf(adj), inner)
    return _node(_leaf(det), inner)


def _random_np(rng, with_adjs=True):
    det = DETS[rng.integers(len(DETS))]
    n_adj = int(rng.integers(3)) if with_adjs else 0
    adjs = [ADJS[rng.integers(len(ADJS))] for _ in range(n_adj)]
    noun = NOUNS[rng.integers(len(NOUNS))]
    return det, adjs, noun


def _vp_tree(verb, adv, obj):
    if obj is not None:
        return _node(_leaf(verb), _np_tree(*obj))
    if adv is not None:
        return _node(_leaf(verb), _leaf(adv))
    return _leaf(verb)


class Sentence:
    def __init__(self, subject, verb, adv, obj):
        self.subject = subject  # (det, adjs, noun)
        self.verb = verb
        self.adv = adv
        self.obj = obj          # (det, adjs, noun) or None

    def tree(self):
        return _node(_np_tree(*self.subject), _vp_tree(self.verb, self.adv, self.obj))

    def without_adjectives(self):
        det, _, noun = self.subject
        obj = None
        if self.obj is not None:
            odet, _, onoun = self.obj
            obj = (odet, [], onoun)
        return Sentence((det, [], noun), self.verb, self.adv, obj)

    def with_verb(self, verb):
        return Sentence(self.subject, verb, self.adv, self.obj)


def random_sentence(rng):
    subject = _random_np(rng)
    verb = VERBS[rng.integers(len(VERBS))]
    shape = int(rng.integers(3))
    adv = ADVS[rng.integers(len(ADVS))] if shape == 1 else None
    obj = _random_np(rng) if shape == 2 else None
    return Sentence(subject, verb, adv, obj)


def make_pair(rng, label):
    """Premise plus a hypothesis constructed by the label's rule."""
    premise = random_sentence(rng)
    if label == LABEL_ENTAILMENT:
        hypothesis = premise.without_adjectives()
    elif label == LABEL_CONTRADICTION:
        hypothesis = premise.with_verb(VERB_OPPOSITE[premise.verb])
    else:
        same_or_opposite = {premise.verb, VERB_OPPOSITE[premise.verb]}
        others = [v for v in VERBS if v not in same_or_opposite]
        fresh = random_sentence(rng)
        hypothesis = Sentence(premise.without_adjectives().subject,
                              others[int(rng.integers(len(others)))],
                              fresh.adv, fresh.obj)
    return premise, hypothesis


def make_corpus(n_pairs, seed=0):
    """Balanced list of corpus rows in the line-delimited JSON format."""
    rng = ops.make_rng(seed)
    labels = [LABEL_ENTAILMENT, LABEL_CONTRADICTION, LABEL_NEUTRAL]
    rows = []
    for i in range(n_pairs):
        label = labels[i % 3]
        premise, hypothesis = make_pair(rng, label)
        rows.append({
            "gold_label": label,
            "sentence1_binary_parse": premise.tree().render(),
            "sentence2_binary_parse": hypothesis.tree().render(),
        })
    return rows


def write_corpus(rows, path):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def write_embeddings(path, seed=0, scale=0.4, decimals=5):
    """Random frozen embeddings for the toy vocabulary, in the standard
    token-plus-300-floats text format."""
    rng = ops.make_rng(seed)
    with open(path, "w", encoding="utf-8") as f:
        for token in vocabulary():
            vec = np.round(rng.uniform(-scale, scale, GLOVE_DIM), decimals)
            f.write(token + " " + " ".join(f"{x:.{decimals}f}" for x in vec) + "\n")


def toy_dir():
    """Directory holding the bundled toy corpus and embeddings."""
    import importlib.resources as resources

    return resources.files("spinn") / "data" / "toy"
