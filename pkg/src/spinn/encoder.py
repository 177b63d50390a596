"""Stack-based sentence encoders.

Three variants share one machinery: "pi_nt" (given transitions, no
tracking; a pure tree encoder), "pi" (given transitions plus a tracking
LSTM feeding the composition), and "full" (tracking LSTM plus a two-way
transition classifier, so the model can parse its own input).

A sentence is encoded by projecting its word vectors into <h, c> pairs
(the buffer), then executing shift/reduce transitions over a thin stack.
The tracking LSTM reads the buffer front and the top two stack entries
before each action. Transition codes follow spinn.transitions; pads
execute as shifts of the zero pair and never consume a real token slot.
"""

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from spinn import ops, thinstack
from spinn.transitions import PAD, REDUCE, SHIFT

GLOVE_DIM = 300

VARIANTS = ("pi_nt", "pi", "full")

_TRACKING_DEFAULTS = {"pi_nt": 0, "pi": 61, "full": 79}


class StatePair(NamedTuple):
    """The <h, c> active/memory pair stored in stack and buffer slots."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def from_row(cls, row):
        d = row.shape[-1] // 2
        return cls(row[..., :d], row[..., d:])

    def to_row(self):
        return np.concatenate([self.h, self.c], axis=-1)


@dataclass
class EncoderConfig:
    variant: str = "full"
    dim: int = 300
    tracking_dim: int = None
    max_tokens: int = 25
    transition_mode: str = "given"  # or "predicted"
    enforce_valid: bool = False
    # default pairs the left forget gate with the right child's memory;
    # set True to pair each forget gate with its own child's memory
    swap_forget_gates: bool = False
    keep_embed: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ops.ConfigError(f"unknown variant {self.variant!r}")
        if self.tracking_dim is None:
            self.tracking_dim = _TRACKING_DEFAULTS[self.variant]
        if self.variant == "pi_nt":
            if self.tracking_dim:
                raise ops.ConfigError("pi_nt has no tracking LSTM")
            if self.transition_mode != "given":
                raise ops.ConfigError("pi_nt cannot predict transitions")
        elif self.tracking_dim < 1:
            raise ops.ConfigError(f"{self.variant} needs tracking_dim >= 1")
        if self.transition_mode not in ("given", "predicted"):
            raise ops.ConfigError(f"unknown transition_mode {self.transition_mode!r}")
        if self.transition_mode == "predicted" and self.variant != "full":
            raise ops.ConfigError("only the full variant predicts transitions")

    @property
    def has_tracker(self):
        return self.variant in ("pi", "full")

    @property
    def has_head(self):
        return self.variant == "full"

    def with_mode(self, transition_mode):
        return replace(self, transition_mode=transition_mode)


def init_params(config, rng):
    """Build the ParamStore and batch-norm running stats for a config.

    Weights use fan-in Gaussian init; the transition softmax uses small
    uniform init; biases are zero except the composition forget gates,
    which start at 1.
    """
    d = config.dim
    store = ops.ParamStore()
    store.add("proj.W", ops.he_init(GLOVE_DIM, 2 * d, rng))
    store.add("proj.b", ops.zeros(2 * d))
    store.add("proj.bn.gamma", ops.ones(2 * d))
    store.add("proj.bn.beta", ops.zeros(2 * d))
    stats = {"proj.bn.mean": ops.zeros(2 * d), "proj.bn.var": ops.ones(2 * d)}
    comp_in = 2 * d + (config.tracking_dim if config.has_tracker else 0)
    store.add("comp.W", ops.he_init(comp_in, 5 * d, rng))
    b_comp = ops.zeros(5 * d)
    b_comp[d:3 * d] = 1.0  # forget gates open at init
    store.add("comp.b", b_comp)
    if config.has_tracker:
        dt = config.tracking_dim
        store.add("track.W", ops.he_init(3 * d + dt, 4 * dt, rng))
        store.add("track.b", ops.zeros(4 * dt))
    if config.has_head:
        dt = config.tracking_dim
        store.add("trans.W", ops.uniform_init(dt, 2, -0.005, 0.005, rng))
        store.add("trans.b", ops.uniform_init(1, 2, -0.005, 0.005, rng)[0])
    return store, stats


# ---------------------------------------------------------------------------
# word projection


def project_words(embeds, token_mask, store, stats, mode, rng=None, keep_rate=1.0):
    """Project word vectors (rows, 300) to <h, c> rows (rows, 2D).

    Train mode applies batch normalization over the row population and
    inverted dropout. Rows where token_mask is False (empty slots) are
    zeroed so padding never contributes state. Returns (rows, cache).
    """
    embeds = np.asarray(embeds)
    if embeds.ndim != 2 or embeds.shape[1] != GLOVE_DIM:
        raise ops.ShapeError(
            f"expected (rows, {GLOVE_DIM}) word vectors, got {embeds.shape}")
    lin = ops.linear(embeds, store.value("proj.W"), store.value("proj.b"))
    y, bn_cache = ops.batch_norm(lin, store.value("proj.bn.gamma"),
                                 store.value("proj.bn.beta"), mode,
                                 stats["proj.bn.mean"], stats["proj.bn.var"])
    drop_mask = None
    if mode == "train" and keep_rate < 1.0:
        drop_mask = ops.dropout_mask(y.shape, keep_rate, rng)
        y = y * drop_mask
    mask_col = np.asarray(token_mask, dtype=y.dtype)[:, None]
    y = y * mask_col
    ops.assert_finite(y, "projection output")
    return y, (embeds, bn_cache, drop_mask, mask_col)


def project_words_backward(cache, d_out, store):
    """Accumulate projection parameter gradients; embeddings stay frozen."""
    embeds, bn_cache, drop_mask, mask_col = cache
    d = d_out * mask_col
    if drop_mask is not None:
        d = d * drop_mask
    d, d_gamma, d_beta = ops.batch_norm_backward(bn_cache, d)
    store.accumulate("proj.bn.gamma", d_gamma)
    store.accumulate("proj.bn.beta", d_beta)
    _, d_w, d_b = ops.linear_backward(embeds, store.value("proj.W"), d)
    store.accumulate("proj.W", d_w)
    store.accumulate("proj.b", d_b)


def project_word(x_glove, store, stats, mode="eval", rng=None, keep_rate=1.0):
    """Single-word convenience wrapper returning a StatePair."""
    rows, _ = project_words(np.asarray(x_glove)[None, :], np.ones(1, bool),
                            store, stats, mode, rng, keep_rate)
    return StatePair.from_row(rows[0])


# ---------------------------------------------------------------------------
# composition cell


def compose_rows(left, right, e, store, config, packed=None):
    """Compose child rows (R, 2D) into parent rows.

    Gates are a single linear map of [left_h; right_h; e]; the new memory
    mixes the children's memories through the two forget gates and the
    input-gated candidate; the new active state is the gated tanh of it.
    """
    d = config.dim
    has_e = e is not None
    if has_e != config.has_tracker:
        raise ops.ConfigError("context input e must match the tracker setting")
    parts = [left[:, :d], right[:, :d]]
    if has_e:
        parts.append(e)
    x = np.concatenate(parts, axis=1)
    pre = ops.linear(x, store.value("comp.W"), store.value("comp.b"), packed=packed)
    i = ops.sigmoid(pre[:, 0:d])
    f_l = ops.sigmoid(pre[:, d:2 * d])
    f_r = ops.sigmoid(pre[:, 2 * d:3 * d])
    o = ops.sigmoid(pre[:, 3 * d:4 * d])
    g = ops.tanh(pre[:, 4 * d:5 * d])
    left_c = left[:, d:]
    right_c = right[:, d:]
    if config.swap_forget_gates:
        c = f_l * left_c + f_r * right_c + i * g
    else:
        c = f_l * right_c + f_r * left_c + i * g
    tc = ops.tanh(c)
    h = o * tc
    out = np.concatenate([h, c], axis=1)
    ops.assert_finite(out, "composition output")
    cache = (x, i, f_l, f_r, o, g, left_c, right_c, tc)
    return out, cache


def compose_rows_backward(cache, d_out, store, config):
    """Returns (d_left, d_right, d_e); accumulates comp.W / comp.b grads."""
    d = config.dim
    x, i, f_l, f_r, o, g, left_c, right_c, tc = cache
    d_h = d_out[:, :d]
    d_c_up = d_out[:, d:]
    d_o = d_h * tc
    d_c = d_c_up + d_h * o * (1.0 - tc * tc)
    if config.swap_forget_gates:
        d_fl = d_c * left_c
        d_left_c = d_c * f_l
        d_fr = d_c * right_c
        d_right_c = d_c * f_r
    else:
        d_fl = d_c * right_c
        d_right_c = d_c * f_l
        d_fr = d_c * left_c
        d_left_c = d_c * f_r
    d_i = d_c * g
    d_g = d_c * i
    d_pre = np.concatenate([
        d_i * i * (1.0 - i),
        d_fl * f_l * (1.0 - f_l),
        d_fr * f_r * (1.0 - f_r),
        d_o * o * (1.0 - o),
        d_g * (1.0 - g * g),
    ], axis=1)
    d_x, d_w, d_b = ops.linear_backward(x, store.value("comp.W"), d_pre)
    store.accumulate("comp.W", d_w)
    store.accumulate("comp.b", d_b)
    d_left = np.concatenate([d_x[:, :d], d_left_c], axis=1)
    d_right = np.concatenate([d_x[:, d:2 * d], d_right_c], axis=1)
    d_e = d_x[:, 2 * d:] if config.has_tracker else None
    return d_left, d_right, d_e


def compose(left, right, e, store, config):
    """Single-pair surface over compose_rows; takes and returns StatePairs."""
    rows, _ = compose_rows(left.to_row()[None, :], right.to_row()[None, :],
                           None if e is None else np.asarray(e)[None, :],
                           store, config)
    return StatePair.from_row(rows[0])


# ---------------------------------------------------------------------------
# tracking LSTM and transition head


def track_step(x, h_prev, c_prev, store, packed=None):
    """One LSTM step over x = [buffer_top_h; stack_top1_h; stack_top2_h].

    Returns (h, c, cache).
    """
    h, c, cache = ops.lstm_cell(x, h_prev, c_prev, store.value("track.W"),
                                store.value("track.b"), packed=packed)
    ops.assert_finite(h, "tracker state")
    return h, c, cache


def track_step_backward(cache, d_h, d_c, store):
    """Returns (d_x, d_h_prev, d_c_prev); accumulates track.W / track.b."""
    d_x, d_h_prev, d_c_prev, d_w, d_b = ops.lstm_cell_backward(
        cache, d_h, d_c, store.value("track.W"))
    store.accumulate("track.W", d_w)
    store.accumulate("track.b", d_b)
    return d_x, d_h_prev, d_c_prev


def track(buffer_top_h, stack_top1_h, stack_top2_h, state, store):
    """Single-example tracker surface: state is (h, c) vectors; missing
    inputs are zero-filled by the caller. Returns the new (h, c)."""
    x = np.concatenate([buffer_top_h, stack_top1_h, stack_top2_h])[None, :]
    h, c, _ = track_step(x, state[0][None, :], state[1][None, :], store)
    return h[0], c[0]


def predict_transition(h_tracking, store, config):
    """Two-way softmax over the tracker state. Returns (logits, probs)."""
    if not config.has_head:
        raise ops.ConfigError(f"variant {config.variant!r} has no transition classifier")
    logits = ops.linear(np.atleast_2d(h_tracking), store.value("trans.W"),
                        store.value("trans.b"))
    return logits, ops.softmax(logits)


def choose_actions(logits):
    """Higher unnormalized score wins; ties go to shift."""
    return np.where(logits[:, 1] > logits[:, 0], REDUCE, SHIFT).astype(np.int8)


# ---------------------------------------------------------------------------
# full encoder, single example


class EncodeResult:
    def __init__(self, h, c, logits, executed, trace, stack, caches):
        self.h = h
        self.c = c
        self.logits = logits          # (T, 2) or (B, T, 2); None without a head
        self.executed = executed      # actions actually run (predicted mode)
        self.trace = trace
        self.stack = stack
        self.caches = caches

    @property
    def compose_calls(self):
        return self.stack.compose_calls


class _Caches:
    def __init__(self):
        self.proj = None
        self.compose = {}     # t -> cache (single) or (lanes, cache) (batched)
        self.track = {}       # t -> cache
        self.track_h = {}     # t -> tracker h output
        self.n_steps = 0


def _resolve_steps(actions, n_tokens, config):
    if actions is not None:
        return len(actions) if np.ndim(actions) == 1 else actions.shape[1]
    if config.transition_mode != "predicted":
        raise ops.ConfigError("transitions are required in given mode")
    return 2 * n_tokens - 1


def encode(embeds, actions, store, stats, config, mode="eval", rng=None,
           token_mask=None, need_backward=None, record_q=False):
    """Encode one sentence; embeds is (N, 300), actions is (T,) or None in
    predicted mode. Returns an EncodeResult whose h is the D-vector at the
    top of the stack after the last step."""
    embeds = np.asarray(embeds)
    n_tokens = embeds.shape[0]
    if token_mask is None:
        token_mask = np.ones(n_tokens, dtype=bool)
    if need_backward is None:
        need_backward = mode == "train"
    d = config.dim
    width = 2 * d
    n_steps = _resolve_steps(actions, n_tokens, config)
    predicted_mode = actions is None

    caches = _Caches()
    caches.n_steps = n_steps
    proj, caches.proj = project_words(embeds, token_mask, store, stats, mode,
                                      rng, config.keep_embed)
    zero_row = np.zeros(width, dtype=proj.dtype)
    stack = thinstack.ThinStack(n_steps, width, dtype=proj.dtype)

    pads_remaining = 0 if predicted_mode else int(np.count_nonzero(np.asarray(actions) == PAD))
    n_real = int(np.count_nonzero(token_mask))
    h_tr = c_tr = None
    if config.has_tracker:
        h_tr = np.zeros((1, config.tracking_dim), dtype=proj.dtype)
        c_tr = np.zeros((1, config.tracking_dim), dtype=proj.dtype)
    all_logits = (np.zeros((n_steps, 2), dtype=proj.dtype)
                  if config.has_head else None)
    executed = np.zeros(n_steps, dtype=np.int8)

    trace_actions = np.zeros(n_steps, dtype=np.int8)
    pop_left = np.zeros(n_steps, dtype=np.int32)
    pop_right = np.zeros(n_steps, dtype=np.int32)
    shift_buf = np.full(n_steps, -1, dtype=np.int32)
    peek_buf = np.full(n_steps, -1, dtype=np.int32)
    peek_left = np.zeros(n_steps, dtype=np.int32)
    peek_right = np.zeros(n_steps, dtype=np.int32)
    q_history = [] if record_q else None

    v = 0
    for step_i in range(n_steps):
        t = step_i + 1
        left_i, right_i = stack.peek_top2_indices()
        peek_left[step_i], peek_right[step_i] = left_i, right_i
        front_is_empty = pads_remaining > 0 or v >= n_tokens
        front = zero_row if front_is_empty else proj[v]
        peek_buf[step_i] = -1 if front_is_empty else v

        logits_t = None
        if config.has_tracker:
            x = np.concatenate([front[:d], stack.S[right_i][:d],
                                stack.S[left_i][:d]])[None, :]
            h_tr, c_tr, tcache = track_step(x, h_tr, c_tr, store)
            if need_backward:
                caches.track[t] = tcache
                caches.track_h[t] = h_tr
            if config.has_head:
                logits_t = ops.linear(h_tr, store.value("trans.W"),
                                      store.value("trans.b"))
                all_logits[step_i] = logits_t[0]

        if predicted_mode:
            action = int(choose_actions(logits_t)[0])
            if config.enforce_valid:
                if v >= n_real:
                    action = REDUCE
                elif stack.depth() < 2:
                    action = SHIFT
        else:
            action = int(actions[step_i])
        executed[step_i] = action
        trace_actions[step_i] = action

        if action == REDUCE:
            def composer(left, right):
                e = h_tr if config.has_tracker else None
                out, ccache = compose_rows(left[None, :], right[None, :], e,
                                           store, config)
                if need_backward:
                    caches.compose[t] = ccache
                return out[0]

            pop_left[step_i], pop_right[step_i] = stack.step(action, None, composer)
        else:
            stack.step(action, front, None)
            if action == PAD:
                pads_remaining -= 1
            else:
                if v < n_tokens:
                    shift_buf[step_i] = v
                v += 1
        if record_q:
            q_history.append(stack.live_rows())

    trace = thinstack.Trace(trace_actions, pop_left, pop_right, shift_buf,
                            peek_buf, peek_left, peek_right, n_tokens, width,
                            q_history)
    top = stack.top_row()
    return EncodeResult(top[:d].copy(), top[d:].copy(), all_logits, executed,
                        trace, stack, caches)


def encode_backward(result, d_h, store, config, d_logits=None, d_c=None):
    """Backward pass for a single-example encode with need_backward=True.

    d_h is the gradient on the final active state; d_logits, when present,
    is (T, 2) on the per-step transition logits. Accumulates parameter
    gradients into the store.
    """
    d = config.dim
    caches = result.caches
    n_steps = caches.n_steps
    d_top = np.concatenate([d_h, np.zeros(d, d_h.dtype) if d_c is None else d_c])

    carry = {"h": None, "c": None}
    if config.has_tracker:
        dt = config.tracking_dim
        carry["h"] = np.zeros((1, dt), dtype=d_h.dtype)
        carry["c"] = np.zeros((1, dt), dtype=d_h.dtype)
    pending_de = {}

    def compose_backward(t, d_row):
        d_left, d_right, d_e = compose_rows_backward(
            caches.compose[t], d_row[None, :], store, config)
        if d_e is not None:
            pending_de[t] = d_e
        return d_left[0], d_right[0]

    def track_backward(t):
        if not config.has_tracker:
            return None
        d_h_tr = carry["h"].copy()
        if t in pending_de:
            d_h_tr += pending_de.pop(t)
        if d_logits is not None:
            dl = d_logits[t - 1][None, :]
            d_h_tr += ops.matmul(dl, np.ascontiguousarray(store.value("trans.W").T))
            store.accumulate("trans.W",
                             ops.matmul(np.ascontiguousarray(caches.track_h[t].T), dl))
            store.accumulate("trans.b", dl[0])
        d_x, d_h_prev, d_c_prev = track_step_backward(
            caches.track[t], d_h_tr, carry["c"], store)
        carry["h"] = d_h_prev
        carry["c"] = d_c_prev
        row = d_x[0]
        return row[:d], row[2 * d:3 * d], row[d:2 * d]  # buffer, left, right

    grad_buffer = thinstack.backprop_sequence(
        result.trace, d_top, compose_backward,
        track_backward if config.has_tracker else None)
    project_words_backward(caches.proj, grad_buffer, store)


# ---------------------------------------------------------------------------
# full encoder, batched


def encode_batch(embeds, actions, store, stats, config, mode="eval", rng=None,
                 token_mask=None, need_backward=None):
    """Encode B sentences lockstep; embeds is (B, N, 300), actions (B, T)
    or None in predicted mode. Lane results are bit-identical to encode()
    in eval mode."""
    embeds = np.asarray(embeds)
    batch, n_tokens = embeds.shape[0], embeds.shape[1]
    if token_mask is None:
        token_mask = np.ones((batch, n_tokens), dtype=bool)
    if need_backward is None:
        need_backward = mode == "train"
    d = config.dim
    width = 2 * d
    n_steps = _resolve_steps(actions, n_tokens, config)
    predicted_mode = actions is None
    if not predicted_mode:
        actions = np.asarray(actions)
        if actions.shape != (batch, n_steps):
            raise ops.ShapeError(
                f"actions shape {actions.shape} does not match batch {(batch, n_steps)}")

    caches = _Caches()
    caches.n_steps = n_steps
    flat, caches.proj = project_words(embeds.reshape(batch * n_tokens, GLOVE_DIM),
                                      np.asarray(token_mask).reshape(-1),
                                      store, stats, mode, rng, config.keep_embed)
    proj = flat.reshape(batch, n_tokens, width)
    comp_packed = ops.PackedMatrix(store.value("comp.W"))
    track_packed = (ops.PackedMatrix(store.value("track.W"))
                    if config.has_tracker else None)

    stacks = thinstack.BatchedThinStack(batch, n_steps, width, dtype=flat.dtype)
    lanes = np.arange(batch)
    pads_remaining = (np.zeros(batch, dtype=np.int32) if predicted_mode
                      else np.count_nonzero(actions == PAD, axis=1).astype(np.int32))
    n_real = np.count_nonzero(token_mask, axis=1).astype(np.int32)
    h_tr = c_tr = None
    if config.has_tracker:
        h_tr = np.zeros((batch, config.tracking_dim), dtype=flat.dtype)
        c_tr = np.zeros((batch, config.tracking_dim), dtype=flat.dtype)
    all_logits = (np.zeros((batch, n_steps, 2), dtype=flat.dtype)
                  if config.has_head else None)
    executed = np.zeros((batch, n_steps), dtype=np.int8)

    pop_left = np.zeros((batch, n_steps), dtype=np.int32)
    pop_right = np.zeros((batch, n_steps), dtype=np.int32)
    shift_buf = np.full((batch, n_steps), -1, dtype=np.int32)
    peek_buf = np.full((batch, n_steps), -1, dtype=np.int32)
    peek_left = np.zeros((batch, n_steps), dtype=np.int32)
    peek_right = np.zeros((batch, n_steps), dtype=np.int32)

    v = np.zeros(batch, dtype=np.int32)
    for step_i in range(n_steps):
        t = step_i + 1
        left_i, right_i = stacks.peek_top2_indices()
        peek_left[:, step_i] = left_i
        peek_right[:, step_i] = right_i
        front_is_empty = (pads_remaining > 0) | (v >= n_tokens)
        front = proj[lanes, np.minimum(v, n_tokens - 1)]
        front = np.where(front_is_empty[:, None], 0.0, front)
        peek_buf[:, step_i] = np.where(front_is_empty, -1, v)

        logits_t = None
        if config.has_tracker:
            x = np.concatenate([front[:, :d], stacks.rows(right_i)[:, :d],
                                stacks.rows(left_i)[:, :d]], axis=1)
            h_tr, c_tr, tcache = track_step(x, h_tr, c_tr, store, packed=track_packed)
            if need_backward:
                caches.track[t] = tcache
                caches.track_h[t] = h_tr
            if config.has_head:
                logits_t = ops.linear(h_tr, store.value("trans.W"),
                                      store.value("trans.b"))
                all_logits[:, step_i] = logits_t

        if predicted_mode:
            actions_t = choose_actions(logits_t)
            if config.enforce_valid:
                actions_t = np.where((stacks.qlen < 2) & (v < n_real), SHIFT, actions_t)
                actions_t = np.where(v >= n_real, REDUCE, actions_t)
                actions_t = actions_t.astype(np.int8)
        else:
            actions_t = actions[:, step_i]
        executed[:, step_i] = actions_t

        def composer(reduce_lanes, left, right):
            e = h_tr[reduce_lanes] if config.has_tracker else None
            out, ccache = compose_rows(left, right, e, store, config,
                                       packed=comp_packed)
            if need_backward:
                caches.compose[t] = (reduce_lanes, ccache)
            return out

        reduce_lanes, pl, pr = stacks.batched_step(actions_t, front, composer)
        pop_left[:, step_i] = pl
        pop_right[:, step_i] = pr
        is_pad = actions_t == PAD
        pads_remaining -= is_pad.astype(np.int32)
        is_shift = actions_t == SHIFT
        shift_buf[:, step_i] = np.where(is_shift & (v < n_tokens), v, -1)
        v += is_shift.astype(np.int32)

    trace = thinstack.Trace(executed.copy(), pop_left, pop_right, shift_buf,
                            peek_buf, peek_left, peek_right, n_tokens, width)
    top = stacks.S[:, n_steps]
    return EncodeResult(top[:, :d].copy(), top[:, d:].copy(), all_logits,
                        executed, trace, stacks, caches)


def rows_at_final_step(result, token_mask):
    """Per-lane h at the step where that lane's own run ends (2n'-1 for n'
    real tokens). Batched predicted runs execute a common number of steps,
    but rows are write-once, so each lane's encoding survives in the row
    written at its final real step."""
    stacks = result.stack
    n_real = np.count_nonzero(np.atleast_2d(token_mask), axis=1)
    t_final = np.clip(2 * n_real - 1, 1, stacks.n_steps)
    lanes = np.arange(stacks.S.shape[0])
    half = stacks.width // 2
    return stacks.S[lanes, t_final, :half]


def encode_batch_backward(result, d_h, store, config, d_logits=None, d_c=None):
    """Batched backward; d_h is (B, D), d_logits (B, T, 2) when supervised.
    Accumulates parameter gradients; returns nothing."""
    d = config.dim
    caches = result.caches
    batch = d_h.shape[0]
    d_top = np.concatenate(
        [d_h, np.zeros((batch, d), d_h.dtype) if d_c is None else d_c], axis=1)

    carry = {"h": None, "c": None}
    if config.has_tracker:
        dt = config.tracking_dim
        carry["h"] = np.zeros((batch, dt), dtype=d_h.dtype)
        carry["c"] = np.zeros((batch, dt), dtype=d_h.dtype)
    pending = {}

    def compose_backward(t, reduce_lanes, d_rows):
        saved_lanes, ccache = caches.compose[t]
        if not np.array_equal(saved_lanes, reduce_lanes):
            raise RuntimeError("trace does not match the recorded composition lanes")
        d_left, d_right, d_e = compose_rows_backward(ccache, d_rows, store, config)
        if d_e is not None:
            pending[t] = (reduce_lanes, d_e)
        return d_left, d_right

    def track_backward(t):
        if not config.has_tracker:
            return None
        d_h_tr = carry["h"].copy()
        if t in pending:
            reduce_lanes, d_e = pending.pop(t)
            d_h_tr[reduce_lanes] += d_e
        if d_logits is not None:
            dl = np.ascontiguousarray(d_logits[:, t - 1])
            d_h_tr += ops.matmul(dl, np.ascontiguousarray(store.value("trans.W").T))
            store.accumulate("trans.W",
                             ops.matmul(np.ascontiguousarray(caches.track_h[t].T), dl))
            store.accumulate("trans.b", dl.sum(axis=0))
        d_x, d_h_prev, d_c_prev = track_step_backward(
            caches.track[t], d_h_tr, carry["c"], store)
        carry["h"] = d_h_prev
        carry["c"] = d_c_prev
        return d_x[:, :d], d_x[:, 2 * d:3 * d], d_x[:, d:2 * d]

    grad_buffer = thinstack.backprop_batched(
        result.trace, d_top, compose_backward,
        track_backward if config.has_tracker else None)
    project_words_backward(caches.proj,
                           grad_buffer.reshape(-1, grad_buffer.shape[-1]), store)
