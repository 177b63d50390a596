"""The shift-reduce transition system: parse-string conversion, sequence
validity, fixed-length padding/cropping, and the counting laws tying token
and transition counts together.

Transitions are int8 codes. A valid unpadded sequence for N tokens has
length 2N-1 with N shifts and N-1 reduces, and no prefix may reduce with
fewer than two stack entries. PAD only appears as left padding emitted by
pad_and_crop; it executes as a shift of an empty (all-zero) token that does
not consume a real token slot.
"""

import numpy as np

SHIFT = 0
REDUCE = 1
PAD = 2

ACTION_NAMES = {SHIFT: "shift", REDUCE: "reduce", PAD: "pad"}
ACTION_LETTERS = {SHIFT: "S", REDUCE: "R", PAD: "P"}

EMPTY_TOKEN = ""


class ParseError(ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at token position {position})")
        self.position = position


class ValidityError(ValueError):
    def __init__(self, index, reason):
        super().__init__(f"invalid transition sequence at index {index}: {reason}")
        self.index = index
        self.reason = reason


class Violation:
    def __init__(self, index, reason):
        self.index = index
        self.reason = reason

    def __repr__(self):
        return f"Violation(index={self.index}, reason={self.reason!r})"

    def __eq__(self, other):
        return (isinstance(other, Violation)
                and (self.index, self.reason) == (other.index, other.reason))


class BinaryTree:
    """Strictly binary tree: either a leaf with a token or an internal node
    with two children."""

    __slots__ = ("token", "left", "right")

    def __init__(self, token=None, left=None, right=None):
        if (token is None) == (left is None or right is None):
            raise ValueError("node is either leaf(token) or internal(left, right)")
        self.token = token
        self.left = left
        self.right = right

    @classmethod
    def leaf(cls, token):
        return cls(token=token)

    @classmethod
    def internal(cls, left, right):
        return cls(left=left, right=right)

    def is_leaf(self):
        return self.token is not None

    def leaves(self):
        if self.is_leaf():
            return [self.token]
        return self.left.leaves() + self.right.leaves()

    def render(self):
        """Parse string with space-separated tokens and parentheses."""
        if self.is_leaf():
            return self.token
        return f"( {self.left.render()} {self.right.render()} )"

    def __eq__(self, other):
        if not isinstance(other, BinaryTree):
            return NotImplemented
        if self.is_leaf() != other.is_leaf():
            return False
        if self.is_leaf():
            return self.token == other.token
        return self.left == other.left and self.right == other.right


def _as_actions(seq):
    return np.asarray(seq, dtype=np.int8)


def parse_to_transitions(parse):
    """Convert an unlabeled binary parse string into (tokens, actions).

    Each word is a shift and each ')' is a reduce. Raises ParseError with
    the offending whitespace-token position for unbalanced or non-binary
    input.
    """
    pieces = parse.split()
    if not pieces:
        raise ParseError("empty parse", 0)
    tokens = []
    actions = []
    # child counts per open paren; a virtual root frame collects top-level items
    counts = [0]
    for pos, piece in enumerate(pieces):
        if piece == "(":
            counts.append(0)
        elif piece == ")":
            if len(counts) == 1:
                raise ParseError("unbalanced ')'", pos)
            n = counts.pop()
            if n != 2:
                raise ParseError(f"non-binary node with {n} children", pos)
            counts[-1] += 1
            actions.append(REDUCE)
        else:
            counts[-1] += 1
            tokens.append(piece)
            actions.append(SHIFT)
    if len(counts) != 1:
        raise ParseError("unbalanced '('", len(pieces))
    if counts[0] != 1:
        raise ParseError(f"expected a single root, found {counts[0]} items", len(pieces))
    return tokens, _as_actions(actions)


def transitions_to_tree(tokens, seq):
    """Execute a transition sequence over tokens, building the binary tree.

    Raises ValidityError naming the first offending index for sequences the
    stack machine cannot execute.
    """
    seq = _as_actions(seq)
    stack = []
    next_token = 0
    for i, action in enumerate(seq):
        if action == SHIFT:
            if next_token >= len(tokens):
                raise ValidityError(i, "shift with empty buffer")
            stack.append(BinaryTree.leaf(tokens[next_token]))
            next_token += 1
        elif action == REDUCE:
            if len(stack) < 2:
                raise ValidityError(i, "stack underflow")
            right = stack.pop()
            left = stack.pop()
            stack.append(BinaryTree.internal(left, right))
        else:
            raise ValidityError(i, "pad not allowed in an unpadded sequence")
    if next_token < len(tokens):
        raise ValidityError(len(seq), "unconsumed tokens")
    if len(stack) != 1:
        raise ValidityError(len(seq), "incomplete: stack does not hold a single tree")
    return stack[0]


def tree_to_transitions(tree):
    """Linearize a tree back to (tokens, actions); inverse of transitions_to_tree."""
    tokens = []
    actions = []

    def walk(node):
        if node.is_leaf():
            tokens.append(node.token)
            actions.append(SHIFT)
        else:
            walk(node.left)
            walk(node.right)
            actions.append(REDUCE)

    walk(tree)
    return tokens, _as_actions(actions)


def validate(seq, token_count):
    """Check the sequence invariants; returns None if ok, else the first
    Violation(index, reason)."""
    seq = _as_actions(seq)
    depth = 0
    shifts = 0
    for i, action in enumerate(seq):
        if action == SHIFT:
            shifts += 1
            if shifts > token_count:
                return Violation(int(i), "shift with empty buffer")
            depth += 1
        elif action == REDUCE:
            if depth < 2:
                return Violation(int(i), "stack underflow")
            depth -= 1
        else:
            return Violation(int(i), "pad not allowed in an unpadded sequence")
    if shifts < token_count:
        return Violation(len(seq), "unconsumed tokens")
    if depth != 1:
        return Violation(len(seq), "incomplete: stack does not hold a single tree")
    return None


def pad_and_crop(tokens, seq, n):
    """Fix (tokens, seq) to token length n and transition length 2n-1.

    Longer sequences are cropped at the left, dropping as many leading
    tokens as the cropped region held shifts; shorter ones are left-padded
    with PAD actions (shifts of the empty token, consuming no real slot).
    Tokens are right-padded with the empty token to length n.
    """
    if n < 1:
        raise ValueError(f"target length must be >= 1, got {n}")
    seq = _as_actions(seq)
    tokens = list(tokens)
    t_target = 2 * n - 1
    if len(seq) > t_target:
        drop = len(seq) - t_target
        dropped_shifts = int(np.count_nonzero(seq[:drop] == SHIFT))
        seq = seq[drop:]
        tokens = tokens[dropped_shifts:]
    elif len(seq) < t_target:
        seq = np.concatenate([np.full(t_target - len(seq), PAD, dtype=np.int8), seq])
    if len(tokens) > n:
        raise ValueError(
            f"{len(tokens)} tokens left for target {n}; sequence was not valid")
    tokens = tokens + [EMPTY_TOKEN] * (n - len(tokens))
    return tokens, seq


def random_tree(n_leaves, rng, tokens=None):
    """Uniform random binary bracketing over n_leaves leaves."""
    if tokens is None:
        tokens = [f"w{i}" for i in range(n_leaves)]

    def build(lo, hi):
        if hi - lo == 1:
            return BinaryTree.leaf(tokens[lo])
        split = lo + 1 + int(rng.integers(hi - lo - 1))
        return BinaryTree.internal(build(lo, split), build(split, hi))

    return build(0, n_leaves)


def format_actions(seq):
    return "".join(ACTION_LETTERS[int(a)] for a in seq)


def parse_action_string(text):
    """Parse 'SSRSR', 'S S R', or comma/word forms into an action array."""
    text = text.strip()
    if "," in text or " " in text:
        parts = text.replace(",", " ").split()
    else:
        parts = list(text)
    mapping = {"S": SHIFT, "R": REDUCE, "P": PAD,
               "SHIFT": SHIFT, "REDUCE": REDUCE, "PAD": PAD}
    actions = []
    for i, part in enumerate(parts):
        key = part.upper()
        if key not in mapping:
            raise ValueError(f"unknown action {part!r} at position {i}")
        actions.append(mapping[key])
    return _as_actions(actions)
