import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinn import transitions as tr


def seq(*letters):
    return np.array([{"S": tr.SHIFT, "R": tr.REDUCE, "P": tr.PAD}[c] for c in letters],
                    dtype=np.int8)


class TestParseToTransitions:
    def test_two_pair_sentence(self):
        tokens, actions = tr.parse_to_transitions("( ( the cat ) ( sat down ) )")
        assert tokens == ["the", "cat", "sat", "down"]
        assert np.array_equal(actions, seq("S", "S", "R", "S", "S", "R", "R"))

    def test_single_leaf(self):
        tokens, actions = tr.parse_to_transitions("cat")
        assert tokens == ["cat"]
        assert np.array_equal(actions, seq("S"))

    def test_left_heavy(self):
        tokens, actions = tr.parse_to_transitions("( ( a b ) c )")
        assert tokens == ["a", "b", "c"]
        assert np.array_equal(actions, seq("S", "S", "R", "S", "R"))
        # round-trip through the tree builder confirms the linearization
        tree = tr.transitions_to_tree(tokens, actions)
        assert tree.render() == "( ( a b ) c )"

    def test_non_binary_node(self):
        with pytest.raises(tr.ParseError, match="position 4"):
            tr.parse_to_transitions("( a b c )")

    def test_unary_node(self):
        with pytest.raises(tr.ParseError, match="non-binary"):
            tr.parse_to_transitions("( ( a ) b )")

    def test_unbalanced(self):
        with pytest.raises(tr.ParseError):
            tr.parse_to_transitions("( a b")
        with pytest.raises(tr.ParseError):
            tr.parse_to_transitions("a b )")


class TestTransitionsToTree:
    def test_right_branching_three(self):
        tree = tr.transitions_to_tree(["Spot", "sat", "down"], seq("S", "S", "S", "R", "R"))
        assert tree.render() == "( Spot ( sat down ) )"

    def test_single(self):
        tree = tr.transitions_to_tree(["a"], seq("S"))
        assert tree.is_leaf() and tree.token == "a"

    def test_error_indexes(self):
        with pytest.raises(tr.ValidityError) as err:
            tr.transitions_to_tree(["a", "b"], seq("R", "S", "S"))
        assert err.value.index == 0

    @given(st.integers(min_value=1, max_value=10), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_random_trees(self, n_leaves, seed):
        rng = np.random.default_rng(seed)
        tree = tr.random_tree(n_leaves, rng)
        tokens, actions = tr.tree_to_transitions(tree)
        rebuilt = tr.transitions_to_tree(tokens, actions)
        assert rebuilt == tree
        tokens2, actions2 = tr.parse_to_transitions(rebuilt.render())
        assert tokens2 == tokens
        assert np.array_equal(actions2, actions)


class TestValidate:
    def test_ok(self):
        assert tr.validate(seq("S", "S", "R"), 2) is None

    def test_underflow_at_zero(self):
        v = tr.validate(seq("R", "S"), 1)
        assert v.index == 0 and "underflow" in v.reason

    def test_wrong_length(self):
        v = tr.validate(seq("S", "S", "S", "R"), 3)
        assert v is not None and v.index == 4

    def test_too_many_shifts(self):
        v = tr.validate(seq("S", "S", "S", "R", "R"), 2)
        assert v.index == 2 and "buffer" in v.reason

    @given(st.integers(min_value=1, max_value=12), st.integers(min_value=0, max_value=10**6),
           st.integers(min_value=0, max_value=3))
    @settings(max_examples=300, deadline=None)
    def test_agrees_with_tree_builder(self, n_leaves, seed, n_mutations):
        # validate() accepts exactly the sequences transitions_to_tree() accepts
        rng = np.random.default_rng(seed)
        tokens, actions = tr.tree_to_transitions(tr.random_tree(n_leaves, rng))
        actions = actions.copy()
        for _ in range(n_mutations):
            kind = rng.integers(3)
            if kind == 0 and len(actions):
                actions[rng.integers(len(actions))] = rng.integers(2)
            elif kind == 1:
                pos = rng.integers(len(actions) + 1)
                actions = np.insert(actions, pos, rng.integers(2))
            elif kind == 2 and len(actions):
                actions = np.delete(actions, rng.integers(len(actions)))
        verdict = tr.validate(actions, len(tokens))
        try:
            tr.transitions_to_tree(tokens, actions)
            built = True
            failure = None
        except tr.ValidityError as err:
            built = False
            failure = (err.index, err.reason)
        if built:
            assert verdict is None
        else:
            assert verdict is not None
            assert (verdict.index, verdict.reason) == failure


class TestPadAndCrop:
    def test_pad_short_sentence(self):
        tokens, actions = tr.parse_to_transitions("( ( the cat ) ( sat down ) )")
        padded_tokens, padded = tr.pad_and_crop(tokens, actions, 25)
        assert len(padded) == 49
        assert np.count_nonzero(padded == tr.PAD) == 42
        assert np.all(padded[:42] == tr.PAD)
        assert len(padded_tokens) == 25
        assert padded_tokens[:4] == tokens
        assert all(t == tr.EMPTY_TOKEN for t in padded_tokens[4:])
        # alignment: shifts in the padded sequence match real token slots
        assert np.count_nonzero(padded == tr.SHIFT) == 4

    def test_exact_length_unchanged(self):
        rng = np.random.default_rng(0)
        tokens, actions = tr.tree_to_transitions(tr.random_tree(25, rng))
        padded_tokens, padded = tr.pad_and_crop(tokens, actions, 25)
        assert padded_tokens == tokens
        assert np.array_equal(padded, actions)

    def test_crop_long_sentence(self):
        rng = np.random.default_rng(1)
        tokens, actions = tr.tree_to_transitions(tr.random_tree(30, rng))
        padded_tokens, padded = tr.pad_and_crop(tokens, actions, 25)
        assert len(padded) == 49
        dropped_shifts = int(np.count_nonzero(actions[:10] == tr.SHIFT))
        kept_real = [t for t in padded_tokens if t != tr.EMPTY_TOKEN]
        assert kept_real == tokens[dropped_shifts:]
        assert np.count_nonzero(padded == tr.SHIFT) == len(kept_real)
        assert len(padded_tokens) == 25

    def test_output_lengths_always_fixed(self):
        rng = np.random.default_rng(2)
        for n_leaves in [1, 3, 7, 25, 40, 60]:
            tokens, actions = tr.tree_to_transitions(tr.random_tree(n_leaves, rng))
            padded_tokens, padded = tr.pad_and_crop(tokens, actions, 25)
            assert len(padded_tokens) == 25
            assert len(padded) == 49

    def test_bad_target(self):
        with pytest.raises(ValueError):
            tr.pad_and_crop(["a"], seq("S"), 0)


class TestCountingLaws:
    @given(st.integers(min_value=1, max_value=25), st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=300, deadline=None)
    def test_length_and_counts(self, n_leaves, seed):
        rng = np.random.default_rng(seed)
        tokens, actions = tr.tree_to_transitions(tr.random_tree(n_leaves, rng))
        assert len(actions) == 2 * n_leaves - 1
        assert np.count_nonzero(actions == tr.SHIFT) == n_leaves
        assert np.count_nonzero(actions == tr.REDUCE) == n_leaves - 1
        assert tr.validate(actions, n_leaves) is None


class TestActionStrings:
    def test_format(self):
        assert tr.format_actions(seq("S", "S", "R")) == "SSR"

    def test_parse_forms(self):
        for text in ("SSRSR", "S S R S R", "shift,shift,reduce,shift,reduce"):
            assert np.array_equal(tr.parse_action_string(text), seq("S", "S", "R", "S", "R"))

    def test_parse_error(self):
        with pytest.raises(ValueError):
            tr.parse_action_string("SXR")
