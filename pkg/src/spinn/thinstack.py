"""Space-efficient stack: one (T+1) x 2D write-once matrix per example plus
a backpointer queue identifying the live rows.

Row t is written exactly once, at step t, by either a shift (copy of the
buffer front) or a reduce (composition of the two rows named by the last
two queue pointers). Row 0 is a permanent zero pair used whenever a
degenerate sequence pops or peeks past the live stack; execution never
fails on invalid sequences. The same log supports exact backpropagation by
replaying the queue bookkeeping in reverse and routing each row's gradient
to its writer.
"""

import numpy as np

from spinn import ops
from spinn.transitions import PAD, REDUCE, SHIFT


class StackError(RuntimeError):
    pass


class ThinStack:
    def __init__(self, n_steps, width, dtype=None):
        dtype = dtype or ops.default_dtype()
        self.n_steps = n_steps
        self.width = width
        self.S = np.zeros((n_steps + 1, width), dtype=dtype)
        self.q = np.zeros(n_steps + 1, dtype=np.int32)
        self.qlen = 0
        self.t = 0
        self.writes = np.zeros(n_steps + 1, dtype=np.int32)
        self.compose_calls = 0

    @property
    def floats_allocated(self):
        return self.S.size

    def depth(self):
        return self.qlen

    def _pop(self):
        if self.qlen == 0:
            return 0
        self.qlen -= 1
        return int(self.q[self.qlen])

    def _push(self, idx):
        self.q[self.qlen] = idx
        self.qlen += 1

    def peek_top2_indices(self):
        """(left, right) row indices of the live top two; 0 fills gaps."""
        right = int(self.q[self.qlen - 1]) if self.qlen >= 1 else 0
        left = int(self.q[self.qlen - 2]) if self.qlen >= 2 else 0
        return left, right

    def peek_top2(self):
        left, right = self.peek_top2_indices()
        return self.S[left], self.S[right]

    def top_row(self):
        return self.S[self.q[self.qlen - 1]] if self.qlen >= 1 else self.S[0]

    def live_rows(self):
        return [int(i) for i in self.q[: self.qlen]]

    def step(self, action, buffer_top, composer):
        """Advance one timestep. Returns (left_idx, right_idx) for a reduce,
        (0, 0) otherwise.

        composer(left_row, right_row) -> new row; only called on reduce.
        buffer_top may be None for degenerate shifts (writes the zero pair).
        """
        if self.t >= self.n_steps:
            raise StackError(f"step past the last timestep {self.n_steps}")
        self.t += 1
        t = self.t
        left_idx = right_idx = 0
        if action == REDUCE:
            right_idx = self._pop()
            left_idx = self._pop()
            self.S[t] = composer(self.S[left_idx], self.S[right_idx])
            self.compose_calls += 1
        else:  # SHIFT or PAD (a shift of the empty token)
            if buffer_top is not None:
                self.S[t] = buffer_top
        self._push(t)
        self.writes[t] += 1
        return left_idx, right_idx


def step(buffer_top, action, t, stack, composer):
    """Single Step call; t must be the next timestep of `stack`."""
    if t != stack.t + 1:
        raise StackError(f"expected timestep {stack.t + 1}, got {t}")
    return stack.step(action, buffer_top, composer)


class Trace:
    """Per-step record of one run, sufficient to replay gradients.

    Arrays are (T,) for a single run or (B, T) for batched runs, indexed by
    step number i (timestep t = i + 1). Row and buffer indices of 0 / -1
    mark degenerate zero substitutions.
    """

    def __init__(self, actions, pop_left, pop_right, shift_buf, peek_buf,
                 peek_left, peek_right, n_buffer, width, q_history=None):
        self.actions = actions
        self.pop_left = pop_left
        self.pop_right = pop_right
        self.shift_buf = shift_buf
        self.peek_buf = peek_buf
        self.peek_left = peek_left
        self.peek_right = peek_right
        self.n_buffer = n_buffer
        self.width = width
        self.q_history = q_history

    @property
    def n_steps(self):
        return self.actions.shape[-1]


def run_sequence(buffer, seq, composer, step_hook=None, record_q=False):
    """Run a transition sequence over a buffer of state rows.

    buffer: (n, width) rows, front first. Shifts consume the front; pads
    write the zero pair without consuming; reduces compose the top two.
    step_hook(t, stack, buffer_top_row) is called before each action with
    the pre-step state. Returns (final_top_row, stack, trace).
    """
    buffer = np.asarray(buffer)
    n_steps = len(seq)
    width = buffer.shape[1]
    stack = ThinStack(n_steps, width, dtype=buffer.dtype)
    zero_row = np.zeros(width, dtype=buffer.dtype)

    actions = np.asarray(seq, dtype=np.int8)
    pop_left = np.zeros(n_steps, dtype=np.int32)
    pop_right = np.zeros(n_steps, dtype=np.int32)
    shift_buf = np.full(n_steps, -1, dtype=np.int32)
    peek_buf = np.full(n_steps, -1, dtype=np.int32)
    peek_left = np.zeros(n_steps, dtype=np.int32)
    peek_right = np.zeros(n_steps, dtype=np.int32)
    q_history = [] if record_q else None

    v = 0  # next unconsumed buffer slot
    for i, action in enumerate(actions):
        t = i + 1
        front = buffer[v] if v < len(buffer) else zero_row
        if action == PAD:
            front = zero_row
        peek_left[i], peek_right[i] = stack.peek_top2_indices()
        peek_buf[i] = v if (action != PAD and v < len(buffer)) else -1
        if step_hook is not None:
            step_hook(t, stack, front)
        if action == REDUCE:
            pop_left[i], pop_right[i] = stack.step(action, None, composer)
        else:
            stack.step(action, front, composer)
            if action == SHIFT:
                if v < len(buffer):
                    shift_buf[i] = v
                v += 1
        if record_q:
            q_history.append(stack.live_rows())

    trace = Trace(actions, pop_left, pop_right, shift_buf, peek_buf,
                  peek_left, peek_right, len(buffer), width, q_history)
    return stack.top_row().copy(), stack, trace


def backprop_sequence(trace, d_top, compose_backward, track_backward=None):
    """Replay a single-run trace in reverse, routing each row's gradient to
    its writer.

    compose_backward(t, d_row) -> (d_left, d_right): called once per reduce
    step, in reverse order; the callee accumulates its own parameter and
    context gradients.
    track_backward(t) -> (d_buf_h, d_left_h, d_right_h) or None: called once
    per step after the row routing; gradients go to the pre-step peeks.
    Returns grad_buffer of shape (n_buffer, width).
    """
    n_steps = trace.n_steps
    width = trace.width
    grad_rows = np.zeros((n_steps + 1, width), dtype=d_top.dtype)
    grad_buffer = np.zeros((trace.n_buffer, width), dtype=d_top.dtype)
    if n_steps == 0:
        return grad_buffer
    grad_rows[n_steps] += d_top
    half = width // 2
    for i in range(n_steps - 1, -1, -1):
        t = i + 1
        g = grad_rows[t]
        action = trace.actions[i]
        if action == REDUCE:
            d_left, d_right = compose_backward(t, g)
            grad_rows[trace.pop_left[i]] += d_left
            grad_rows[trace.pop_right[i]] += d_right
        elif trace.shift_buf[i] >= 0:
            grad_buffer[trace.shift_buf[i]] += g
        if track_backward is not None:
            peeked = track_backward(t)
            if peeked is not None:
                d_buf_h, d_left_h, d_right_h = peeked
                grad_rows[trace.peek_left[i], :half] += d_left_h
                grad_rows[trace.peek_right[i], :half] += d_right_h
                if trace.peek_buf[i] >= 0:
                    grad_buffer[trace.peek_buf[i], :half] += d_buf_h
    return grad_buffer


class BatchedThinStack:
    """B independent thin stacks sharing one storage block and a common
    timestep cursor; updates are performed batched and in place."""

    def __init__(self, batch, n_steps, width, dtype=None):
        dtype = dtype or ops.default_dtype()
        self.batch = batch
        self.n_steps = n_steps
        self.width = width
        self.S = np.zeros((batch, n_steps + 1, width), dtype=dtype)
        self.q = np.zeros((batch, n_steps + 1), dtype=np.int32)
        self.qlen = np.zeros(batch, dtype=np.int32)
        self.t = 0
        self.writes = np.zeros((batch, n_steps + 1), dtype=np.int32)
        self.compose_calls = 0
        self._lanes = np.arange(batch)

    @property
    def floats_allocated(self):
        return self.S.size

    def peek_top2_indices(self):
        """(left, right) index arrays (B,) of the live top two; 0 fills gaps."""
        ql = self.qlen
        right = np.where(ql >= 1, self.q[self._lanes, np.maximum(ql - 1, 0)], 0)
        left = np.where(ql >= 2, self.q[self._lanes, np.maximum(ql - 2, 0)], 0)
        return left.astype(np.int32), right.astype(np.int32)

    def rows(self, idx):
        return self.S[self._lanes, idx]

    def top_rows(self):
        _, right = self.peek_top2_indices()
        return self.S[self._lanes, right]

    def batched_step(self, actions, buffer_tops, composer):
        """One synchronized timestep across lanes: one batched composition
        over the reduce lanes, one batched copy over the rest.

        composer(lanes, left_rows, right_rows) -> rows for those lanes.
        Returns (reduce_lanes, left_idx (B,), right_idx (B,)).
        """
        if self.t >= self.n_steps:
            raise StackError(f"step past the last timestep {self.n_steps}")
        self.t += 1
        t = self.t
        actions = np.asarray(actions)
        if actions.shape != (self.batch,):
            raise StackError(f"actions must have shape ({self.batch},)")
        is_reduce = actions == REDUCE
        reduce_lanes = np.flatnonzero(is_reduce)
        left_idx = np.zeros(self.batch, dtype=np.int32)
        right_idx = np.zeros(self.batch, dtype=np.int32)
        if reduce_lanes.size:
            ql = self.qlen[reduce_lanes]
            right_idx[reduce_lanes] = np.where(
                ql >= 1, self.q[reduce_lanes, np.maximum(ql - 1, 0)], 0)
            left_idx[reduce_lanes] = np.where(
                ql >= 2, self.q[reduce_lanes, np.maximum(ql - 2, 0)], 0)
            self.qlen[reduce_lanes] = np.maximum(ql - 2, 0)
            left = self.S[reduce_lanes, left_idx[reduce_lanes]]
            right = self.S[reduce_lanes, right_idx[reduce_lanes]]
            self.S[reduce_lanes, t] = composer(reduce_lanes, left, right)
            self.compose_calls += 1
        shift_lanes = np.flatnonzero(~is_reduce)
        if shift_lanes.size:
            self.S[shift_lanes, t] = buffer_tops[shift_lanes]
        self.q[self._lanes, self.qlen] = t
        self.qlen += 1
        self.writes[:, t] += 1
        return reduce_lanes, left_idx, right_idx


def backprop_batched(trace, d_top, compose_backward, track_backward=None):
    """Batched analogue of backprop_sequence over a (B, T) trace.

    compose_backward(t, lanes, d_rows) -> (d_left, d_right) for those lanes.
    track_backward(t) -> (d_buf_h, d_left_h, d_right_h) as (B, D) arrays.
    Returns grad_buffer of shape (B, n_buffer, width).
    """
    batch, n_steps = trace.actions.shape
    width = trace.width
    grad_rows = np.zeros((batch, n_steps + 1, width), dtype=d_top.dtype)
    grad_buffer = np.zeros((batch, trace.n_buffer, width), dtype=d_top.dtype)
    if n_steps == 0:
        return grad_buffer
    lanes_all = np.arange(batch)
    grad_rows[:, n_steps] += d_top
    half = width // 2
    flat_rows = grad_rows.reshape(batch * (n_steps + 1), width)
    flat_buf = grad_buffer.reshape(batch * trace.n_buffer, width)

    def scatter_rows(lanes, idx, vals, h_only=False):
        flat = lanes * (n_steps + 1) + idx
        if h_only:
            np.add.at(flat_rows[:, :half], flat, vals)
        else:
            np.add.at(flat_rows, flat, vals)

    for i in range(n_steps - 1, -1, -1):
        t = i + 1
        g = grad_rows[:, t]
        reduce_lanes = np.flatnonzero(trace.actions[:, i] == REDUCE)
        if reduce_lanes.size:
            d_left, d_right = compose_backward(t, reduce_lanes, g[reduce_lanes])
            scatter_rows(reduce_lanes, trace.pop_left[reduce_lanes, i], d_left)
            scatter_rows(reduce_lanes, trace.pop_right[reduce_lanes, i], d_right)
        sb = trace.shift_buf[:, i]
        shifted = np.flatnonzero(sb >= 0)
        if shifted.size:
            np.add.at(flat_buf, shifted * trace.n_buffer + sb[shifted], g[shifted])
        if track_backward is not None:
            peeked = track_backward(t)
            if peeked is not None:
                d_buf_h, d_left_h, d_right_h = peeked
                scatter_rows(lanes_all, trace.peek_left[:, i], d_left_h, h_only=True)
                scatter_rows(lanes_all, trace.peek_right[:, i], d_right_h, h_only=True)
                pb = trace.peek_buf[:, i]
                readable = np.flatnonzero(pb >= 0)
                if readable.size:
                    np.add.at(flat_buf[:, :half],
                              readable * trace.n_buffer + pb[readable],
                              d_buf_h[readable])
    return grad_buffer
