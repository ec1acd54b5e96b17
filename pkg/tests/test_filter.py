import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfevit.errors import BookkeepingError, LabelError, NumericError
from mfevit.filter import (
    LabelState, RelabelLog, apply_filter_epoch, group_map, group_members, group_of, merge_predictions, num_labels,
    relabel,
)

from oracles import relabel_oracle

EXAMPLE = np.array([.05, .05, .10, .05, .60, .05, .01, .01, .02, .01, .04, .01])


def random_probs(rng, n_sub, peaked=True):
    z = rng.normal(0, 3 if peaked else 1, num_labels(n_sub))
    p = np.exp(z - z.max())
    return p / p.sum()


def random_state(rng, n_sub, sid="x"):
    e = int(rng.integers(6))
    return LabelState(sid, e, int(rng.choice(group_members(e, n_sub))))


# --------------------------------------------------------------------------
# layout


def test_group_of_examples():
    assert group_of(3, 5) == 3
    assert group_of(6, 5) == 0 and group_of(35, 5) == 5
    assert group_of(8, 1) == 2


def test_group_of_out_of_range():
    for bad in (-1, 36):
        with pytest.raises(LabelError):
            group_of(bad, 5)


@pytest.mark.parametrize("n_sub", [0, 1, 2, 5])
def test_groups_partition_label_space(n_sub):
    seen = []
    for e in range(6):
        members = group_members(e, n_sub)
        assert len(members) == n_sub + 1
        assert all(group_of(i, n_sub) == e for i in members)
        seen += members
    assert sorted(seen) == list(range(num_labels(n_sub)))
    assert group_map(n_sub).tolist() == [group_of(i, n_sub) for i in range(num_labels(n_sub))]


def test_state_starts_at_original():
    s = LabelState("a", 4)
    assert s.current_label == 4 and not s.is_subclass


# --------------------------------------------------------------------------
# relabel


def test_uniform_probs_never_relabel():
    p = np.full(36, 1 / 36)
    assert relabel(p, LabelState("a", 2), 0.4, 5) == 2


def test_worked_example_moves_to_subclass():
    assert relabel(EXAMPLE, LabelState("a", 2, 2), 0.4, 1) == 8


def test_worked_example_returns_to_main():
    assert relabel(EXAMPLE, LabelState("a", 2, 8), 0.4, 1) == 2


def test_unnormalized_probs_rejected():
    with pytest.raises(NumericError):
        relabel(EXAMPLE * 1.1, LabelState("a", 2), 0.4, 1)
    with pytest.raises(NumericError):
        relabel(np.r_[EXAMPLE[:-1], np.nan], LabelState("a", 2), 0.4, 1)


def test_no_subclasses_means_no_move():
    p = np.array([.9, .02, .02, .02, .02, .02])
    assert relabel(p, LabelState("a", 3), 0.4, 0) == 3


def test_ties_go_to_lowest_index():
    p = np.zeros(12)
    p[[0, 2, 8]] = [0.8, 0.1, 0.1]
    # within group {2, 8}: both 0.1, lowest index 2 is current, so runner-up 8
    assert relabel(p, LabelState("a", 2, 2), 0.4, 1) == 8
    assert relabel(p, LabelState("a", 2, 8), 0.4, 1) == 2


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0, 1, 2, 5]), st.floats(0.01, 0.99))
def test_relabel_matches_oracle_and_stays_in_group(seed, n_sub, delta):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, n_sub)
    state = random_state(rng, n_sub)
    new = relabel(p, state, delta, n_sub)
    assert new == relabel_oracle(p.tolist(), state.current_label, state.original_main, delta, n_sub)
    assert group_of(new, n_sub) == state.original_main


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99), st.floats(0.0, 1.0))
def test_trigger_is_monotone_in_delta(seed, delta, frac):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 5)
    state = random_state(rng, 5)
    if relabel(p, state, delta, 5) != state.current_label:
        assert relabel(p, state, delta * frac + 1e-6, 5) != state.current_label


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 5.0))
def test_delta_at_least_one_never_fires(seed, delta):
    rng = np.random.default_rng(seed)
    state = random_state(rng, 5)
    assert relabel(random_probs(rng, 5), state, delta, 5) == state.current_label


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.99))
def test_firing_always_changes_label(seed, delta):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, 3)
    state = random_state(rng, 3)
    if p.max() - p[state.current_label] > delta:
        assert relabel(p, state, delta, 3) != state.current_label


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_group_closure_over_histories(seed):
    rng = np.random.default_rng(seed)
    states = [random_state(rng, 2, f"s{i}") for i in range(8)]
    for epoch in range(1, 15):
        probs = {s.sample_id: random_probs(rng, 2) for s in states}
        apply_filter_epoch(states, probs, 0.3, epoch, 1, 2)
        assert all(group_of(s.current_label, 2) == s.original_main for s in states)


# --------------------------------------------------------------------------
# epochs


def test_no_relabels_before_start():
    rng = np.random.default_rng(0)
    states = [LabelState(f"s{i}", i % 6) for i in range(12)]
    probs = {s.sample_id: random_probs(rng, 5) for s in states}
    res = apply_filter_epoch(states, probs, 0.01, 19, 20, 5)
    assert res.count == 0 and all(s.current_label == s.original_main for s in states)


def test_confident_correct_samples_stay():
    states = [LabelState(f"s{i}", i % 6) for i in range(12)]
    probs = {}
    for s in states:
        p = np.full(36, 0.2 / 35)
        p[s.original_main] = 0.8
        probs[s.sample_id] = p
    assert apply_filter_epoch(states, probs, 0.4, 25, 20, 5).count == 0


def test_epoch_count_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    states = [random_state(rng, 5, f"s{i}") for i in range(200)]
    probs = {s.sample_id: random_probs(rng, 5) for s in states}
    expected = sum(
        relabel_oracle(probs[s.sample_id].tolist(), s.current_label, s.original_main, 0.4, 5) != s.current_label
        for s in states
    )
    res = apply_filter_epoch(states, probs, 0.4, 20, 20, 5)
    assert res.count == expected == len(res.events) > 0
    for ev in res.events:
        state = res.states[ev.sample_id]
        assert state.relabel_history[-1] == (20, ev.old, ev.new) and state.current_label == ev.new


def test_missing_probabilities():
    states = [LabelState("a", 0), LabelState("b", 1)]
    with pytest.raises(BookkeepingError):
        apply_filter_epoch(states, {"a": np.full(36, 1 / 36)}, 0.4, 20, 20, 5)


def test_epoch_counter_starts_at_one():
    with pytest.raises(ValueError):
        apply_filter_epoch([], {}, 0.4, 0, 1, 5)


def test_relabel_log_round_trip(tmp_path):
    states = [LabelState("a", 2, 2)]
    res = apply_filter_epoch(states, {"a": EXAMPLE}, 0.4, 21, 20, 1)
    log = RelabelLog(tmp_path / "relabel.log")
    log.append(res.events)
    log.append(res.events)
    events = RelabelLog.read(tmp_path / "relabel.log")
    assert len(events) == 2
    assert (events[0].epoch, events[0].sample_id, events[0].old, events[0].new) == (21, "a", 2, 8)
    assert events[0].p_max == pytest.approx(0.6) and events[0].p_gt == pytest.approx(0.1)


# --------------------------------------------------------------------------
# merging


def test_merge_without_subclasses_is_argmax():
    z = np.array([0.1, 2.0, -1.0, 0.5, 1.9, 0.0])
    assert merge_predictions(z, 0) == 1


def test_merge_one_hot_subclasses():
    for n_sub in (1, 5):
        for e in range(6):
            for k in range(n_sub):
                z = np.zeros(num_labels(n_sub))
                z[6 + e * n_sub + k] = 1.0
                assert merge_predictions(z, n_sub) == e


def test_merge_matches_brute_force():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1000, 36))
    # integer-valued logits force ties
    z[:500] = np.round(z[:500])
    expected = []
    for row in z:
        best = 0
        for i in range(36):
            if row[i] > row[best]:
                best = i
        expected.append(best if best < 6 else (best - 6) // 5)
    assert merge_predictions(z, 5).tolist() == expected


def test_merged_accuracy_identity():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(300, 36))
    truth = rng.integers(0, 6, 300)
    pred = merge_predictions(z, 5)
    via_groups = np.array([group_of(int(np.argmax(r)), 5) for r in z])
    assert np.mean(pred == truth) == np.mean(via_groups == np.array([group_of(t, 5) for t in truth]))
