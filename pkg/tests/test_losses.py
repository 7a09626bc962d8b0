import itertools
import math

import numpy as np
import pytest
import torch

from protobagnet.backbone import BackboneConfig, LayerSpec
from protobagnet.losses import (
    PROTO_BAGNET,
    PROTOPNET,
    LossWeights,
    cluster_loss,
    cross_entropy,
    dissimilarity_penalty,
    l1_classifier,
    l1_similarity,
    loss_terms,
    separation_loss,
    total_loss,
)
from protobagnet.classifier import SoftAggregation
from protobagnet.model import ProtoBagNet

from conftest import central_difference, relative_error


# brute-force oracles -------------------------------------------------------


def oracle_cluster(dist, labels, class_of, same=True):
    total = 0.0
    for i, y in enumerate(labels):
        best = math.inf
        for j, c in enumerate(class_of):
            if (c == y) == same:
                best = min(best, min(dist[i][j].ravel()))
        total += best
    return total / len(labels)


def oracle_diss(vectors):
    return sum(
        sum((a - b) ** 2 for a, b in zip(vectors[i], vectors[j]))
        for i, j in itertools.combinations(range(len(vectors)), 2)
    )


# values ---------------------------------------------------------------------


def test_cross_entropy_values():
    assert cross_entropy(torch.tensor([0.0, 0.0]), 0).item() == pytest.approx(math.log(2), abs=1e-6)
    assert cross_entropy(torch.tensor([0.0, 0.0]), 1).item() == pytest.approx(0.6931, abs=1e-4)
    lo = cross_entropy(torch.tensor([10.0, -10.0], dtype=torch.float64), 0).item()
    assert lo == pytest.approx(2.06e-9, rel=1e-2)
    assert cross_entropy(torch.tensor([10.0, -10.0], dtype=torch.float64), 1).item() == pytest.approx(20.0, abs=1e-6)


def test_cross_entropy_stable_for_huge_logits():
    v = cross_entropy(torch.tensor([[1e4, -1e4]]), torch.tensor([1]))
    assert torch.isfinite(v) and v.item() == pytest.approx(2e4)


def test_cluster_exact_match_contributes_zero():
    d = torch.tensor([[[[0.0, 3.0]], [[5.0, 6.0]]]])
    assert cluster_loss(d, torch.tensor([0]), torch.tensor([0, 1])).item() == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_cluster_and_separation_match_oracle(seed):
    g = np.random.default_rng(seed)
    dist = g.random((4, 4, 2, 3)) * 5
    labels = [0, 1, 1, 0]
    class_of = [0, 0, 1, 1]
    t = torch.tensor(dist)
    got_c = cluster_loss(t, torch.tensor(labels), torch.tensor(class_of)).item()
    got_s = separation_loss(t, torch.tensor(labels), torch.tensor(class_of)).item()
    assert got_c == pytest.approx(oracle_cluster(dist, labels, class_of, True), abs=1e-12)
    assert got_s == pytest.approx(-oracle_cluster(dist, labels, class_of, False), abs=1e-12)


def test_cluster_toy_instance():
    # one sample, two prototypes (one per class), two cells
    d = torch.tensor([[[[4.0, 1.5]], [[0.5, 9.0]]]])
    assert cluster_loss(d, torch.tensor([0]), torch.tensor([0, 1])).item() == 1.5
    assert separation_loss(d, torch.tensor([0]), torch.tensor([0, 1])).item() == -0.5


def test_identical_batch_equals_single():
    d = torch.rand(1, 4, 3, 3)
    cls = torch.tensor([0, 0, 1, 1])
    one = cluster_loss(d, torch.tensor([1]), cls)
    many = cluster_loss(d.expand(5, -1, -1, -1), torch.tensor([1] * 5), cls)
    assert many.item() == pytest.approx(one.item())


def test_separation_other_class_match_is_zero():
    d = torch.tensor([[[[2.0, 2.0]], [[0.0, 9.0]]]])
    assert separation_loss(d, torch.tensor([0]), torch.tensor([0, 1])).item() == 0.0


def test_label_swap_swaps_cluster_and_separation():
    d = torch.rand(3, 2, 2, 2)
    cls = torch.tensor([0, 1])
    y = torch.tensor([0, 1, 0])
    assert cluster_loss(d, y, cls).item() == pytest.approx(-separation_loss(d, 1 - y, cls).item())


def test_separation_single_class_bank_is_zero(caplog):
    d = torch.rand(2, 2, 2, 2)
    with caplog.at_level("WARNING"):
        v = separation_loss(d, torch.tensor([0, 0]), torch.tensor([0, 0]))
    assert v.item() == 0.0
    assert "single class" in caplog.text


def test_l1_classifier_values():
    head = SoftAggregation([0, 1])
    with torch.no_grad():
        head.weight.copy_(torch.tensor([1.0, -2.0]))
    assert l1_classifier(head).item() == 3.0


def test_l1_similarity_values():
    assert l1_similarity(torch.full((2, 3, 4, 4), 0.7)).item() == pytest.approx(0.7)
    s = torch.rand(2, 3, 4, 5, dtype=torch.float64)
    assert l1_similarity(2 * s).item() == pytest.approx(2 * l1_similarity(s).item())
    naive = sum(s[i, j].abs().sum().item() / 20 for i in range(2) for j in range(3)) / 6
    assert l1_similarity(s).item() == pytest.approx(naive, abs=1e-12)


def test_dissimilarity_values():
    assert dissimilarity_penalty(torch.ones(3, 4)).item() == 0.0
    assert dissimilarity_penalty(torch.stack([torch.zeros(4), torch.ones(4)])).item() == 4.0
    assert dissimilarity_penalty(torch.ones(1, 4)).item() == 0.0
    v = np.random.default_rng(0).random((3, 5))
    assert dissimilarity_penalty(torch.tensor(v)).item() == pytest.approx(oracle_diss(v.tolist()), abs=1e-12)


def test_within_class_dissimilarity_matches_per_class_oracle():
    v = np.random.default_rng(1).random((6, 3))
    class_of = [0, 0, 0, 1, 1, 1]
    ref = oracle_diss(v[:3].tolist()) + oracle_diss(v[3:].tolist())
    got = dissimilarity_penalty(torch.tensor(v), torch.tensor(class_of)).item()
    assert got == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_within_class_dissimilarity_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(6, 3, generator=g, dtype=torch.float64, requires_grad=True)
    c = torch.tensor([0, 1, 0, 1, 1, 0])
    fn = lambda: dissimilarity_penalty(p, c)  # noqa: E731
    fn().backward()
    assert relative_error(p.grad, central_difference(fn, p)) <= 1e-4


def test_dissimilarity_translation_invariant():
    v = torch.rand(6, 5, dtype=torch.float64)
    shift = torch.randn(5, dtype=torch.float64)
    assert dissimilarity_penalty(v + shift).item() == pytest.approx(dissimilarity_penalty(v).item(), abs=1e-10)


def test_dissimilarity_step_spreads_duplicates():
    base = torch.rand(1, 4, dtype=torch.float64)
    v = torch.cat([base, base, torch.rand(2, 4, dtype=torch.float64)]).requires_grad_(True)

    def min_pair(x):
        return min(float((x[i] - x[j]).norm()) for i, j in itertools.combinations(range(len(x)), 2))

    before = min_pair(v.detach())
    # only the dissimilarity term is active; a duplicated pair has zero gradient difference,
    # so break the tie the way any training batch would
    v.data[1] += 1e-6
    loss = total_loss(
        {"ce": 0, "clst": 0, "sep": 0, "l1c": 0, "l1s": 0, "diss": dissimilarity_penalty(v)},
        LossWeights(diss=5e-3),
    )
    loss.backward()
    with torch.no_grad():
        v -= 0.1 * v.grad
    assert min_pair(v.detach()) > before


def test_total_loss_combination():
    parts = {"ce": 1.0, "clst": 2.0, "sep": -3.0, "l1c": 4.0, "l1s": 5.0, "diss": 6.0}
    w = LossWeights(clst=0.1, sep=0.2, l1c=0.3, l1s=0.4, diss=0.5)
    assert total_loss(parts, w) == pytest.approx(1 + 0.2 - 0.6 + 1.2 + 2.0 - 3.0)
    zero = LossWeights(0, 0, 0, 0, 0)
    assert total_loss(parts, zero) == 1.0


def test_presets():
    assert (PROTO_BAGNET.l1s, PROTO_BAGNET.diss) == (4e-2, 5e-3)
    assert (PROTOPNET.l1s, PROTOPNET.diss) == (0.0, 0.0)
    assert (PROTO_BAGNET.clst, PROTO_BAGNET.sep, PROTO_BAGNET.l1c) == (0.8, 0.08, 1e-4)


@pytest.mark.parametrize("bad", [dict(clst=-1.0), dict(sep=float("nan")), dict(diss=float("inf"))])
def test_invalid_weights(bad):
    with pytest.raises(ValueError):
        LossWeights(**bad)


# finite-difference gradient suite ------------------------------------------

TERM_FNS = {
    "clst": lambda d, y, c: cluster_loss(d, y, c),
    "sep": lambda d, y, c: separation_loss(d, y, c),
}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("term", sorted(TERM_FNS))
def test_distance_term_gradients(term, seed):
    g = torch.Generator().manual_seed(seed)
    d = torch.rand(3, 4, 2, 3, generator=g, dtype=torch.float64, requires_grad=True)
    y, c = torch.tensor([0, 1, 1]), torch.tensor([0, 0, 1, 1])
    fn = lambda: TERM_FNS[term](d, y, c)  # noqa: E731
    fn().backward()
    assert relative_error(d.grad, central_difference(fn, d)) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 2, 1, 1])
    fn = lambda: cross_entropy(z, y)  # noqa: E731
    fn().backward()
    assert relative_error(z.grad, central_difference(fn, z)) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_l1_similarity_and_dissimilarity_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    s = torch.rand(2, 3, 2, 2, generator=g, dtype=torch.float64, requires_grad=True)
    p = torch.rand(4, 3, generator=g, dtype=torch.float64, requires_grad=True)
    l1_similarity(s).backward()
    assert relative_error(s.grad, central_difference(lambda: l1_similarity(s), s)) <= 1e-4
    dissimilarity_penalty(p).backward()
    assert relative_error(p.grad, central_difference(lambda: dissimilarity_penalty(p), p)) <= 1e-4


def _tiny_model(seed, head="sa"):
    layers = (LayerSpec(3, 1, 3), LayerSpec(3, 2, 3, nonlinearity="sigmoid"))
    cfg = BackboneConfig(layers, 1, 9, 9)
    return ProtoBagNet(cfg, m=2, n_classes=2, k=2, head=head, seed=seed, dtype=torch.float64)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("head", ["sa", "dense"])
def test_full_objective_gradients(seed, head):
    """Whole six-term loss against central differences for every parameter group."""
    torch.manual_seed(100 + seed)
    model = _tiny_model(seed, head)
    x = torch.rand(3, 1, 9, 9, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    w = LossWeights(clst=0.8, sep=0.08, l1c=1e-2, l1s=4e-2, diss=5e-3)

    def fn():
        return total_loss(loss_terms(model(x), y, model), w)

    model.zero_grad()
    fn().backward()
    for name, params in model.parameter_groups().items():
        for p in params:
            err = relative_error(p.grad, central_difference(fn, p))
            assert err <= 1e-4, (name, err)
