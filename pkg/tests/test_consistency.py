import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maxico.consistency import (
    CNN_BRANCH,
    FUSED_FINAL,
    AxisToggles,
    Condition,
    TemporalBuffer,
    consistency_gap,
    enumerate_conditions,
    harden,
    pseudo_labels,
    upsample_soft,
    vote,
)
from maxico.data import Transform
from maxico.fusion import PredictionBundle
from maxico.losses import dice_ce, unsupervised_loss


def softmax_np(rng, shape):
    z = rng.normal(size=shape)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def brute_force_vote(softs):
    """Per-entry count of softs >= 0.5 divided by the voter count."""
    k, h, w = softs[0].shape
    out = np.zeros((k, h, w))
    for c in range(k):
        for i in range(h):
            for j in range(w):
                hits = 0
                for s in softs:
                    if s[c, i, j] >= 0.5:
                        hits += 1
                out[c, i, j] = hits / len(softs)
    return out


def random_bundle(rng, batch=1, size=8, scales=3, with_cnn=True):
    def sm(shape):
        return torch.softmax(torch.from_numpy(rng.normal(size=shape)), dim=1)
    return PredictionBundle(
        sm((batch, 2, size, size)),
        [sm((batch, 2, size >> s, size >> s)) for s in range(1, scales + 1)],
        sm((batch, 2, size, size)) if with_cnn else None,
    )


def test_harden_boundary():
    soft = torch.tensor([0.5, 0.49, 0.3, 0.7, 0.5 - 1e-16, 1.0, 0.0], dtype=torch.float64)
    assert harden(soft).tolist() == [1, 0, 0, 1, 0, 1, 0]
    assert harden(torch.tensor([0.5 - 2 ** -53], dtype=torch.float64)).item() == 0
    pixel = torch.tensor([[[0.3]], [[0.7]]])
    assert harden(pixel).flatten().tolist() == [0, 1]


def test_vote_examples():
    votes = [torch.tensor([v], dtype=torch.float64) for v in (1, 1, 0, 1)]
    assert vote(votes).item() == 0.75
    same = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    assert torch.equal(vote([same] * 5), same)
    with pytest.raises(ValueError):
        vote([])
    with pytest.raises(ValueError):
        vote([torch.zeros(2), torch.zeros(3)])


def test_vote_brute_force_three_voters():
    rng = np.random.default_rng(0)
    softs = [softmax_np(rng, (2, 4, 4)) for _ in range(3)]
    got = vote([harden(torch.from_numpy(s)) for s in softs]).numpy()
    assert np.array_equal(got, brute_force_vote(softs))


def test_vote_brute_force_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(500):
        h, w = rng.integers(1, 5, size=2)
        n = int(rng.integers(1, 7))
        softs = [softmax_np(rng, (2, h, w)) for _ in range(n)]
        # plant exact ties on the threshold
        for s in softs:
            if rng.random() < 0.3:
                s[:, 0, 0] = 0.5
        got = vote([harden(torch.from_numpy(s)) for s in softs]).numpy()
        assert np.array_equal(got, brute_force_vote(softs))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 12))
def test_vote_grid(seed, n):
    rng = np.random.default_rng(seed)
    hard = [harden(torch.from_numpy(softmax_np(rng, (2, 3, 3)))) for _ in range(n)]
    m = vote(hard).numpy()
    counts = m * n
    assert np.all(np.abs(counts - np.round(counts)) <= 1e-12)
    assert np.all((m >= 0) & (m <= 1))


def test_gap():
    rng = np.random.default_rng(2)
    a = torch.from_numpy(rng.normal(size=(2, 3, 3)))
    b = torch.from_numpy(rng.normal(size=(2, 3, 3)))
    assert consistency_gap(a, a) == 0.0
    assert consistency_gap(a, b) == consistency_gap(b, a)
    diff = (a - b).numpy()
    frob = math.sqrt(sum(float(x) ** 2 for x in diff.flat))
    assert abs(consistency_gap(a, b) - frob) < 1e-12
    with pytest.raises(ValueError):
        consistency_gap(a, b[:1])


def test_upsample_soft_normalised():
    q = torch.softmax(torch.randn(1, 2, 2, 2), dim=1)
    up = upsample_soft(q, (8, 8))
    assert up.shape == (1, 2, 8, 8)
    assert torch.allclose(up.sum(1), torch.ones(1, 8, 8), atol=1e-6)
    assert upsample_soft(q, (2, 2)) is q


def theta_sizes(toggles, warm):
    rng = np.random.default_rng(3)
    bundle = random_bundle(rng)
    buf = TemporalBuffer(depth=1)
    if warm:
        buf.push("s", 0, bundle.final[0])
    return enumerate_conditions(bundle, toggles, buf, "s", 0, step=1)


def test_theta_counts():
    assert len(theta_sizes(AxisToggles(True, True, True), warm=True)) == 6
    assert len(theta_sizes(AxisToggles(False, True, False), warm=True)) == 2
    assert len(theta_sizes(AxisToggles(True, False, False), warm=True)) == 4
    assert len(theta_sizes(AxisToggles(False, False, True), warm=True)) == 2
    # cold start: the temporal axis adds nothing and raises nothing
    assert len(theta_sizes(AxisToggles(False, False, True), warm=False)) == 1
    assert len(theta_sizes(AxisToggles(True, True, True), warm=False)) == 5
    with pytest.raises(ValueError):
        theta_sizes(AxisToggles(False, False, False), warm=True)


def test_theta_conditions_labelled():
    conds = [c for c, _ in theta_sizes(AxisToggles(True, True, True), warm=True)]
    assert conds == [Condition(FUSED_FINAL, 1), Condition(FUSED_FINAL, 2), Condition(FUSED_FINAL, 3),
                     Condition(FUSED_FINAL, 4), Condition(CNN_BRANCH, 1), Condition(FUSED_FINAL, 1, 1)]
    assert len(set(conds)) == len(conds)


def test_axis_monotonicity():
    for warm in (False, True):
        for sub in itertools.product([False, True], repeat=3):
            if not any(sub):
                continue
            small = {c for c, _ in theta_sizes(AxisToggles(*sub), warm)}
            for extra in range(3):
                if sub[extra]:
                    continue
                sup = list(sub)
                sup[extra] = True
                big = {c for c, _ in theta_sizes(AxisToggles(*sup), warm)}
                assert small <= big
                # an axis that has something to contribute strictly grows the set
                if extra != 2 or warm:
                    assert small < big


def test_temporal_hygiene():
    buf = TemporalBuffer(depth=3)
    soft = torch.full((2, 4, 4), 0.5)
    for step in (1, 4, 7):
        buf.push("a", step, soft)
    with pytest.raises(ValueError):
        buf.push("a", 7, soft)
    assert [s for s, _ in buf.history("a", 7)] == [4, 1]
    assert [s for s, _ in buf.history("a", 8)] == [7, 4, 1]
    assert buf.history("missing", 8) == []
    rng = np.random.default_rng(4)
    bundle = random_bundle(rng)
    theta = enumerate_conditions(bundle, AxisToggles(False, False, True), buf, "a", 0, step=7)
    assert all(c.time >= 1 for c, _ in theta[1:])
    assert len(theta) == 3


def test_buffer_ring_depth_and_detach():
    buf = TemporalBuffer(depth=2)
    x = torch.rand(2, 2, 2, requires_grad=True)
    for step in range(5):
        buf.push("a", step, x * step)
    hist = buf.history("a", 10)
    assert [s for s, _ in hist] == [4, 3]
    assert not any(t.requires_grad for _, t in hist)
    restored = TemporalBuffer()
    restored.load_state_dict(buf.state_dict())
    assert [s for s, _ in restored.history("a", 10)] == [4, 3]
    with pytest.raises(ValueError):
        TemporalBuffer(depth=0)


def test_history_is_mapped_into_current_orientation():
    canonical = torch.zeros(2, 4, 4)
    canonical[1, 0, 0] = 1.0
    canonical[0] = 1 - canonical[1]
    buf = TemporalBuffer()
    buf.push("a", 0, canonical)
    bundle = random_bundle(np.random.default_rng(5), size=4, scales=0)
    t = Transform(hflip=True, vflip=False, k=1)
    theta = enumerate_conditions(bundle, AxisToggles(False, False, True), buf, "a", 0, step=1, transform=t)
    assert torch.equal(theta[1][1], t.apply(canonical, spatial=(-2, -1)))


def test_recalibration_invariance():
    rng = np.random.default_rng(6)
    softs = [torch.from_numpy(softmax_np(rng, (2, 4, 4))) for _ in range(4)]

    def recal(p):
        # strictly increasing on [0, 1] with f(0.5) = 0.5
        return 0.5 + 0.5 * torch.tanh(3 * (p - 0.5)) / math.tanh(1.5)

    base = vote([harden(s) for s in softs])
    assert torch.equal(base, vote([harden(recal(s)) for s in softs]))


def test_unanimity_fixed_point():
    hard = torch.randint(0, 2, (1, 4, 4))
    onehot = torch.nn.functional.one_hot(hard, 2).permute(0, 3, 1, 2).double()
    confident = onehot * 0.999 + 0.0005
    pseudo = vote([harden(confident[0])] * 4)[None]
    assert torch.equal(pseudo, onehot)
    loss = unsupervised_loss([confident] * 4, pseudo)
    assert float(loss) <= float(dice_ce(confident, hard)) + 1e-12


def test_pseudo_labels_batch():
    rng = np.random.default_rng(7)
    bundle = random_bundle(rng, batch=3)
    buf = TemporalBuffer()
    buf.push("b", 0, bundle.final[1])
    labels, sizes = pseudo_labels(bundle, AxisToggles(), buf, ["a", "b", "c"], step=1)
    assert labels.shape == (3, 2, 8, 8)
    assert sizes == [5, 6, 5]
    for i, n in enumerate(sizes):
        counts = labels[i].numpy() * n
        assert np.all(np.abs(counts - np.round(counts)) <= 1e-12)
