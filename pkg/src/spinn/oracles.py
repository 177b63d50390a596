"""Slow, obviously-correct references used by tests and the benchmark
pre-check: a copy-everything stack interpreter, a recursive tree encoder,
and central finite differences.

These deliberately share no code with the fast paths beyond the domain
types: all math here is written out with plain numpy expressions so that
agreement with the production implementations is meaningful evidence.
"""

import numpy as np

from spinn.transitions import REDUCE, SHIFT


class NaiveStack:
    """Literal stack semantics: the whole stack is copied at every step.

    Strict about validity (underflow raises); the thin stack's degenerate
    zero-substitution rules are tested separately.
    """

    def __init__(self):
        self.items = []
        self.floats_copied = 0
        self.snapshots = 0

    def apply(self, action, buffer_front, composer):
        items = [row.copy() for row in self.items]  # full copy each step
        self.floats_copied += sum(row.size for row in items)
        self.snapshots += 1
        if action == SHIFT:
            items.append(buffer_front.copy())
        elif action == REDUCE:
            if len(items) < 2:
                raise ValueError("reduce with fewer than two stack entries")
            right = items.pop()
            left = items.pop()
            items.append(composer(left, right))
        else:
            raise ValueError(f"naive stack cannot execute action {action}")
        self.items = items


def naive_stack_run(buffer, seq, composer, call_log=None):
    """Run a valid sequence with full stack copies; returns the final top row.

    call_log, if given, collects (left, right) argument copies per compose
    call for call-order comparisons.
    """
    buffer = np.asarray(buffer)
    stack = NaiveStack()
    v = 0

    def logging_composer(left, right):
        if call_log is not None:
            call_log.append((left.copy(), right.copy()))
        return composer(left, right)

    for action in seq:
        if action == SHIFT:
            if v >= len(buffer):
                raise ValueError("shift with empty buffer")
            stack.apply(action, buffer[v], logging_composer)
            v += 1
        else:
            stack.apply(action, None, logging_composer)
    if len(stack.items) != 1:
        raise ValueError("sequence did not finish with a single stack entry")
    return stack.items[-1], stack


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_project(x_embed, store, stats):
    """Word projection in eval mode, written out directly: linear map, then
    the running-stat normalization, as one numpy expression per step.

    Runs in the dtype of the stored parameters.
    """
    w = store.value("proj.W")
    b = store.value("proj.b")
    y = np.dot(np.asarray(x_embed, dtype=w.dtype), w) + b
    gamma = store.value("proj.bn.gamma")
    beta = store.value("proj.bn.beta")
    mean = stats["proj.bn.mean"]
    var = stats["proj.bn.var"]
    return gamma * (y - mean) / np.sqrt(var + 1e-5) + beta


def reference_compose(left_h, left_c, right_h, right_c, store, e=None,
                      swap_forget_gates=False):
    """Tree composition cell evaluated with plain numpy formulas."""
    w = store.value("comp.W")
    b = store.value("comp.b")
    x = np.concatenate([left_h, right_h] + ([e] if e is not None else []))
    pre = np.dot(x, w) + b
    d = left_h.shape[0]
    i = _sigmoid(pre[0:d])
    f_l = _sigmoid(pre[d:2 * d])
    f_r = _sigmoid(pre[2 * d:3 * d])
    o = _sigmoid(pre[3 * d:4 * d])
    g = np.tanh(pre[4 * d:5 * d])
    if swap_forget_gates:
        c = f_l * left_c + f_r * right_c + i * g
    else:
        c = f_l * right_c + f_r * left_c + i * g
    h = o * np.tanh(c)
    return h, c


def recursive_treelstm(tree, embed_lookup, store, stats, swap_forget_gates=False):
    """Structural recursion over an explicit tree: leaves are projected
    words, internal nodes compose their children. Returns (h, c)."""
    if tree.is_leaf():
        row = reference_project(embed_lookup(tree.token), store, stats)
        d = row.shape[0] // 2
        return row[:d], row[d:]
    lh, lc = recursive_treelstm(tree.left, embed_lookup, store, stats, swap_forget_gates)
    rh, rc = recursive_treelstm(tree.right, embed_lookup, store, stats, swap_forget_gates)
    return reference_compose(lh, lc, rh, rc, store, None, swap_forget_gates)


def finite_diff_grad(loss_fn, store, h=1e-4, names=None):
    """Central-difference gradients of loss_fn() per parameter coordinate.

    loss_fn must be deterministic (dropout disabled). Returns a dict
    name -> gradient array matching each parameter's shape.
    """
    grads = {}
    for name in (names if names is not None else store.names()):
        value = store.value(name)
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = grad
    return grads


def grad_mismatch(analytic, numeric, floor=1e-2):
    """Worst relative error between gradient sets, with a denominator floor
    so near-zero coordinates are compared on an absolute scale."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        worst = max(worst, err)
    return worst
