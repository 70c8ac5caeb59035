import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resitta import oracle
from resitta.entrobank import Bank, BankConfig, entropy_of


def onehot_ish(label, c, conf):
    """Distribution with mass ``conf`` on ``label``, the rest spread evenly."""
    p = np.full(c, (1 - conf) / (c - 1))
    p[label] = conf
    return p


def test_entropy_examples():
    assert entropy_of([1, 0, 0]) < 1e-9
    assert entropy_of(np.full(10, 0.1)) == pytest.approx(math.log(10))
    assert entropy_of([0.7, 0.3]) == pytest.approx(0.6109, abs=1e-4)


def test_dominant_classes():
    bank = Bank(BankConfig(capacity=10, num_classes=3))
    with pytest.raises(ValueError):
        bank.dominant_classes()
    for lab in [0, 1, 1, 1, 2, 2, 2]:
        bank.add(None, onehot_ish(lab, 3, 0.9))
    assert bank.dominant_classes() == {1, 2}
    solo = Bank(BankConfig(capacity=4, num_classes=3))
    for _ in range(3):
        solo.add(None, onehot_ish(2, 3, 0.9))
    assert solo.dominant_classes() == {2}


def test_dominant_classes_random_matches_bruteforce():
    rng = np.random.default_rng(0)
    bank = Bank(BankConfig(capacity=64, num_classes=7))
    for i in range(64):
        bank.add(i, rng.dirichlet(np.ones(7)))
    counts = [sum(r.inferred_label == c for r in bank.records) for c in range(7)]
    assert bank.dominant_classes() == {c for c in range(7) if counts[c] == max(counts)}


def test_below_capacity_accepts():
    bank = Bank(BankConfig(capacity=3, num_classes=2))
    res = bank.add("a", [0.6, 0.4])
    assert res.accepted and res.evicted is None and res.reason == "insert"


def test_full_bank_rejects_more_uncertain_sample():
    bank = Bank(BankConfig(capacity=4, num_classes=2))
    for i in range(4):
        bank.add(i, onehot_ish(i % 2, 2, 0.9))
    before = [(r.sample, r.entropy) for r in bank.records]
    res = bank.add("new", [0.55, 0.45])
    assert not res.accepted and res.reason == "rejected"
    after = bank.records
    assert [(r.sample, r.entropy) for r in after] == before
    # ages still advanced on the rejected add
    assert [r.age for r in after] == [4, 3, 2, 1]


def test_outdated_record_evicted_regardless_of_entropy():
    # a live stream evicts at age 1000 already, so build the aged bank directly
    cfg = BankConfig(capacity=4, t_forget=1000, t_mature=200, num_classes=3)
    bank = Bank(cfg)
    metas = [
        ("old", 0, entropy_of(onehot_ish(0, 3, 0.6)), 0),
        ("x1", 1, entropy_of(onehot_ish(1, 3, 0.6)), 1190),
        ("x2", 2, entropy_of(onehot_ish(2, 3, 0.6)), 1195),
        ("x3", 0, entropy_of(onehot_ish(0, 3, 0.99)), 1198),
    ]
    bank.load_state(
        {"arrivals": 1199, "records": [{"inferred_label": l, "entropy": e, "stamp": t} for _, l, e, t in metas]},
        [m[0] for m in metas],
    )
    # the newcomer is the most uncertain sample seen, yet "old" still goes
    res = bank.add("new", np.full(3, 1 / 3))
    assert res.accepted and res.reason == "outdated" and res.evicted.sample == "old"
    assert res.evicted.age == 1200


def test_overconfident_priority_over_uncertainty():
    cfg = BankConfig(capacity=3, t_forget=50, t_mature=5, num_classes=2)
    bank = Bank(cfg)
    bank.add("sure", onehot_ish(0, 2, 0.99))
    bank.add("unsure", onehot_ish(0, 2, 0.55))
    bank.add("other", onehot_ish(1, 2, 0.9))
    # "sure" reaches age 5 exactly on the sixth arrival
    for _ in range(2):
        assert not bank.add("junk", [0.5, 0.5]).accepted
    res = bank.add("new", onehot_ish(1, 2, 0.8))
    assert res.reason == "overconfident" and res.evicted.sample == "sure"


def test_class_minimum_is_bank_wide_per_class():
    bank = Bank(BankConfig(capacity=4, t_forget=100, t_mature=0, num_classes=2))
    bank.add("a", onehot_ish(0, 2, 0.8))
    bank.add("b", onehot_ish(0, 2, 0.95))
    bank.add("c", onehot_ish(1, 2, 0.7))
    bank.add("d", onehot_ish(0, 2, 0.9))
    recs = {r.sample: r for r in bank.records}
    assert bank.is_class_min_entropy(recs["b"]) and not bank.is_class_min_entropy(recs["a"])
    assert bank.is_class_min_entropy(recs["c"])
    res = bank.add("e", [0.5, 0.5])
    assert res.reason == "overconfident" and res.evicted.sample == "b"


def test_ties_evict_earliest_inserted():
    # equal entropies in the uncertainty branch
    bank = Bank(BankConfig(capacity=3, t_forget=100, t_mature=100, num_classes=2))
    for name in "xyz":
        bank.add(name, [0.6, 0.4])
    res = bank.add("w", [0.9, 0.1])
    assert res.reason == "uncertainty" and res.evicted.sample == "x"
    # equal ages cannot occur, equal minimum entropies in the over-confident branch
    bank = Bank(BankConfig(capacity=3, t_forget=100, t_mature=1, num_classes=2))
    for name in "pqr":
        bank.add(name, [0.9, 0.1])
    res = bank.add("s", [0.6, 0.4])
    assert res.reason == "overconfident" and res.evicted.sample == "p"


def test_uncertainty_disabled_discards():
    bank = Bank(BankConfig(capacity=2, num_classes=2, use_uncertainty=False))
    bank.add("a", [0.6, 0.4])
    bank.add("b", [0.7, 0.3])
    res = bank.add("c", [0.99, 0.01])
    assert not res.accepted


def test_snapshot_examples():
    bank = Bank(BankConfig(capacity=5, num_classes=2))
    assert bank.snapshot() == []
    for i in range(3):
        bank.add(i, [0.8, 0.2])
    snap = bank.snapshot()
    assert len(snap) == 3 and snap == bank.snapshot()
    assert [s for s, _ in snap] == [0, 1, 2]


def test_dump_format():
    bank = Bank(BankConfig(capacity=2, num_classes=2))
    bank.add("a", [0.5, 0.5])
    bank.add("b", [0.0, 1.0])
    lines = bank.dump().splitlines()
    assert lines[0] == "# index inferred_label age entropy"
    assert lines[1].split()[:3] == ["0", "0", "1"]
    assert float(lines[1].split()[3]) == pytest.approx(math.log(2))
    assert lines[2].split()[:3] == ["1", "1", "0"]


def test_config_validation():
    with pytest.raises(ValueError):
        BankConfig(t_forget=10, t_mature=20)
    with pytest.raises(ValueError):
        BankConfig(capacity=0)
    with pytest.raises(ValueError):
        Bank(BankConfig(num_classes=3)).add(None, [0.5, 0.5])


def test_state_round_trip():
    rng = np.random.default_rng(1)
    bank = Bank(BankConfig(capacity=8, t_forget=30, t_mature=10, num_classes=4))
    for i in range(50):
        bank.add(i, rng.dirichlet(np.ones(4)))
    clone = Bank(bank.config)
    clone.load_state(bank.state_dict(), [s for s, _ in bank.snapshot()])
    for i in range(50, 100):
        d = rng.dirichlet(np.ones(4))
        assert bank.add(i, d).accepted == clone.add(i, d).accepted
    assert bank.dump() == clone.dump()


@settings(max_examples=60, deadline=None)
@given(
    st.integers(2, 8), st.integers(1, 12), st.integers(0, 40), st.integers(0, 40),
    st.booleans(), st.booleans(), st.booleans(), st.integers(0, 2**32 - 1),
)
def test_invariants_against_replay(c, cap, t_mature, extra, use_od, use_oc, use_su, seed):
    rng = np.random.default_rng(seed)
    cfg = BankConfig(cap, t_mature + extra, t_mature, c, use_od, use_oc, use_su)
    bank = Bank(cfg)
    adds, events = [], []
    ref_counts = []
    for i in range(200):
        # coarse probabilities make entropy ties common
        d = rng.dirichlet(np.full(c, 0.5)).round(1) + 1e-3
        d /= d.sum()
        adds.append((d, i))
        pre_dom = bank.dominant_classes() if len(bank) else frozenset()
        res = bank.add(i, d)
        assert len(bank) <= cap
        if res.evicted is not None:
            assert res.evicted.inferred_label in pre_dom
            if res.reason == "outdated":
                assert res.evicted.age >= cfg.t_forget
            if res.reason == "overconfident":
                assert res.evicted.age >= cfg.t_mature
        ref_counts.append(len(bank))
    ref = oracle.replay_bank(adds, cap, cfg.t_forget, t_mature, c, use_od, use_oc, use_su, events)
    got = sorted((r.sample, r.age) for r in bank.records)
    assert got == sorted((r["id"], r["age"]) for r in ref)
    for r, rr in zip(sorted(bank.records, key=lambda r: r.sample), sorted(ref, key=lambda r: r["id"])):
        assert r.entropy == pytest.approx(rr["entropy"], abs=1e-12)
        assert r.entropy <= math.log(c) + 1e-9
