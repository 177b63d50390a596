"""Corpus and embedding loaders, vocabulary handling, and batching.

The corpus format is line-delimited JSON in the standard NLI layout: each
line carries gold_label, sentence1_binary_parse, and sentence2_binary_parse,
where parses are unlabeled binary bracketings with space-separated tokens.
A cached format (pre-converted token/transition lists) produced by the
`prep` command is read transparently. Embeddings are whitespace text, one
token plus 300 floats per line; they are frozen after loading.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from spinn import ops, transitions
from spinn.classifier import LABELS
from spinn.encoder import GLOVE_DIM

LABEL_TO_INT = {name: i for i, name in enumerate(LABELS)}


class DataError(ValueError):
    pass


@dataclass
class ExamplePair:
    premise_tokens: list
    premise_actions: np.ndarray
    hypothesis_tokens: list
    hypothesis_actions: np.ndarray
    label: int


def _convert_side(parse, line_no, field):
    try:
        return transitions.parse_to_transitions(parse)
    except transitions.ParseError as err:
        raise DataError(f"line {line_no}: bad {field}: {err}") from err


def load_corpus(path):
    """Load an NLI corpus (raw or cached). Returns (examples, n_skipped);
    unlabeled '-' examples are skipped and counted."""
    examples = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"line {line_no}: malformed JSON: {err}") from err
            if "gold_label" not in row:
                raise DataError(f"line {line_no}: missing field 'gold_label'")
            label = row["gold_label"]
            if label == "-":
                skipped += 1
                continue
            if label not in LABEL_TO_INT:
                raise DataError(f"line {line_no}: unknown label {label!r}")
            if "premise_tokens" in row:  # cached format
                for field in ("premise_transitions", "hypothesis_tokens",
                              "hypothesis_transitions"):
                    if field not in row:
                        raise DataError(f"line {line_no}: missing field {field!r}")
                examples.append(ExamplePair(
                    row["premise_tokens"],
                    transitions.parse_action_string(row["premise_transitions"]),
                    row["hypothesis_tokens"],
                    transitions.parse_action_string(row["hypothesis_transitions"]),
                    LABEL_TO_INT[label]))
                continue
            for field in ("sentence1_binary_parse", "sentence2_binary_parse"):
                if field not in row:
                    raise DataError(f"line {line_no}: missing field {field!r}")
            p_tokens, p_actions = _convert_side(row["sentence1_binary_parse"],
                                                line_no, "sentence1_binary_parse")
            h_tokens, h_actions = _convert_side(row["sentence2_binary_parse"],
                                                line_no, "sentence2_binary_parse")
            examples.append(ExamplePair(p_tokens, p_actions, h_tokens, h_actions,
                                        LABEL_TO_INT[label]))
    return examples, skipped


load_snli = load_corpus


def write_cache(examples, path):
    """Write the pre-converted cached format read by load_corpus."""
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({
                "gold_label": LABELS[ex.label],
                "premise_tokens": ex.premise_tokens,
                "premise_transitions": transitions.format_actions(ex.premise_actions),
                "hypothesis_tokens": ex.hypothesis_tokens,
                "hypothesis_transitions": transitions.format_actions(ex.hypothesis_actions),
            }) + "\n")


def build_vocab(examples):
    vocab = set()
    for ex in examples:
        vocab.update(ex.premise_tokens)
        vocab.update(ex.hypothesis_tokens)
    return sorted(vocab)


class EmbeddingTable:
    """Frozen token -> 300-wide vector table.

    Row 0 is the padding token and is exactly zero; row 1 is a single
    shared vector for every out-of-vocabulary token.
    """

    PAD_INDEX = 0
    OOV_INDEX = 1

    def __init__(self, vocab_to_row, matrix):
        self.vocab = vocab_to_row
        self.matrix = matrix
        self.matrix.flags.writeable = False

    def token_id(self, token):
        if token == transitions.EMPTY_TOKEN:
            return self.PAD_INDEX
        return self.vocab.get(token, self.OOV_INDEX)

    def ids(self, tokens):
        return np.array([self.token_id(t) for t in tokens], dtype=np.int32)

    def rows(self, ids):
        return self.matrix[ids]

    @classmethod
    def random(cls, vocab, seed=0, scale=0.1):
        """Random table for benchmarks and tests."""
        rng = ops.make_rng(seed)
        matrix = np.zeros((len(vocab) + 2, GLOVE_DIM), dtype=ops.default_dtype())
        matrix[1:] = rng.uniform(-scale, scale, size=(len(vocab) + 1, GLOVE_DIM))
        return cls({tok: i + 2 for i, tok in enumerate(vocab)}, matrix)


def load_glove(path, vocab_filter, oov_seed=0):
    """Load embeddings for the given vocabulary only.

    Tokens missing from the file share one random vector drawn once from
    U[-0.05, 0.05]; the padding token maps to the zero row.
    """
    wanted = set(vocab_filter)
    vocab_to_row = {}
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(" ")
            if len(parts) != GLOVE_DIM + 1:
                raise DataError(
                    f"line {line_no}: expected token + {GLOVE_DIM} values, "
                    f"got {len(parts) - 1}")
            token = parts[0]
            if token not in wanted or token in vocab_to_row:
                continue
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=ops.default_dtype())
            except ValueError as err:
                raise DataError(f"line {line_no}: bad float: {err}") from err
            vocab_to_row[token] = len(rows) + 2
            rows.append(vec)
    matrix = np.zeros((len(rows) + 2, GLOVE_DIM), dtype=ops.default_dtype())
    oov_rng = ops.make_rng(oov_seed)
    matrix[EmbeddingTable.OOV_INDEX] = oov_rng.uniform(-0.05, 0.05, GLOVE_DIM)
    for token, row in vocab_to_row.items():
        matrix[row] = rows[row - 2]
    return EmbeddingTable(vocab_to_row, matrix)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids_premise: np.ndarray        # (B, N) int32
    mask_premise: np.ndarray       # (B, N) bool
    actions_premise: np.ndarray    # (B, 2N-1) int8
    ids_hypothesis: np.ndarray
    mask_hypothesis: np.ndarray
    actions_hypothesis: np.ndarray
    labels: np.ndarray             # (B,) int64

    @property
    def size(self):
        return self.labels.shape[0]


class PreparedDataset:
    """All examples padded once to fixed length, ready for slicing."""

    def __init__(self, examples, table, n_tokens):
        count = len(examples)
        n_steps = 2 * n_tokens - 1
        self.n_tokens = n_tokens
        self.ids_p = np.zeros((count, n_tokens), dtype=np.int32)
        self.mask_p = np.zeros((count, n_tokens), dtype=bool)
        self.acts_p = np.zeros((count, n_steps), dtype=np.int8)
        self.ids_h = np.zeros((count, n_tokens), dtype=np.int32)
        self.mask_h = np.zeros((count, n_tokens), dtype=bool)
        self.acts_h = np.zeros((count, n_steps), dtype=np.int8)
        self.labels = np.zeros(count, dtype=np.int64)
        for i, ex in enumerate(examples):
            for (tokens, actions, ids, mask, acts) in (
                (ex.premise_tokens, ex.premise_actions,
                 self.ids_p, self.mask_p, self.acts_p),
                (ex.hypothesis_tokens, ex.hypothesis_actions,
                 self.ids_h, self.mask_h, self.acts_h),
            ):
                padded_tokens, padded_actions = transitions.pad_and_crop(
                    tokens, actions, n_tokens)
                ids[i] = table.ids(padded_tokens)
                mask[i] = [t != transitions.EMPTY_TOKEN for t in padded_tokens]
                acts[i] = padded_actions
            self.labels[i] = ex.label

    def __len__(self):
        return self.labels.shape[0]

    def slice(self, idx):
        return Batch(self.ids_p[idx], self.mask_p[idx], self.acts_p[idx],
                     self.ids_h[idx], self.mask_h[idx], self.acts_h[idx],
                     self.labels[idx])


def epoch_order(count, seed, epoch):
    """Deterministic shuffle for one epoch; reproducible for resumption."""
    rng = ops.make_rng((int(seed) * 1_000_003 + epoch) & 0x7FFFFFFFFFFFFFFF)
    return rng.permutation(count)


def make_batches(examples, batch_size, n_tokens, rng, table, train=True):
    """One pass over the examples in shuffled order.

    Training drops a final short batch; evaluation keeps it. The shuffle is
    a pure function of the generator passed in, so a fixed seed gives a
    fixed batch order.
    """
    prepared = (examples if isinstance(examples, PreparedDataset)
                else PreparedDataset(examples, table, n_tokens))
    order = rng.permutation(len(prepared))
    n_full = len(prepared) // batch_size
    for b in range(n_full):
        yield prepared.slice(order[b * batch_size:(b + 1) * batch_size])
    rest = order[n_full * batch_size:]
    if rest.size and not train:
        yield prepared.slice(rest)


def premise_lengths(batch):
    return batch.mask_premise.sum(axis=1)
