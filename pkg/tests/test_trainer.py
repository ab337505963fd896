import math

import numpy as np
import pytest

import ella.tensorcore as tc
from ella.ellanet import ModelConfig, init_params
from ella.encoder import MockBackend, PrototypeBackend, tokenize_graph
from ella.hetgraph import EdgeType, HeteroGraph, SchemaDef
from ella.tensorcore import Tensor, backward, zero_grads
from ella.trainer import (
    EdgeSample,
    EdgeSampleSet,
    SamplingError,
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    finetune,
    pretrain,
    pretrain_loss,
    sample_edges,
    similarity,
)

from fixtures import planted_link_fixture, planted_node_fixture


def bipartite_graph(n_users=3, n_items=3, edges=None):
    schema = SchemaDef(
        node_types=["user", "item"], edge_types=[EdgeType("buys", "user", "item")]
    )
    nodes = [(f"u{i}", "user") for i in range(n_users)] + [
        (f"i{j}", "item") for j in range(n_items)
    ]
    if edges is None:
        edges = [(f"u{i}", f"i{j}", "buys") for i in range(n_users) for j in range(n_items)]
    text = {nid: f"node {nid}" for nid, _ in nodes}
    return HeteroGraph(schema, nodes, edges, text)


# -- edge sampling ---------------------------------------------------------------


def test_complete_relation_has_no_negatives():
    g = bipartite_graph()  # complete bipartite
    with pytest.raises(SamplingError, match="complete"):
        sample_edges(g, ratio=1, seed=0)


def test_ratio_two_yields_two_absent_negatives():
    g = bipartite_graph(edges=[("u0", "i0", "buys")])
    samples = sample_edges(g, ratio=2, seed=0)
    sample = samples.by_type["buys"]
    assert len(sample.positives) == 1
    assert len(sample.negatives) == 2
    for s, t in sample.negatives:
        assert not g.has_edge(s, t, "buys")


def test_sampling_deterministic():
    g, _ = planted_link_fixture(seed=1, users=30, items=30)
    s1 = sample_edges(g, ratio=1, seed=5)
    s2 = sample_edges(g, ratio=1, seed=5)
    assert s1.by_type["reviews"].negatives == s2.by_type["reviews"].negatives
    s3 = sample_edges(g, ratio=1, seed=6)
    assert s3.by_type["reviews"].negatives != s1.by_type["reviews"].negatives


def test_negatives_never_intersect_edges():
    g, _ = planted_link_fixture(seed=2, users=30, items=30)
    for seed in range(5):
        samples = sample_edges(g, ratio=2, seed=seed)
        for sample in samples.by_type.values():
            for s, t in sample.negatives:
                assert not g.has_edge(s, t, "reviews")


# -- similarity ------------------------------------------------------------------


def one_d_params():
    cfg = ModelConfig(d=1, heads=1, type_layers=1, hop_layers=1, hops=1, d_llm=1)
    p = init_params(cfg, ["user", "item"], {}, seed=0)
    p["sim/user"].data[...] = np.array([[1.0]])
    p["sim/item"].data[...] = np.array([[1.0]])
    return p


def test_similarity_zero_projection_is_half():
    p = one_d_params()
    p["sim/user"].data[...] = 0.0
    sim = similarity(Tensor([[3.0]]), Tensor([[2.0]]), "user", "item", p)
    assert sim.item() == pytest.approx(0.5)


def test_similarity_sigmoid_of_one():
    p = one_d_params()
    sim = similarity(Tensor([[1.0]]), Tensor([[1.0]]), "user", "item", p)
    assert sim.item() == pytest.approx(0.7310585786300049, abs=1e-9)


def test_similarity_symmetric():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(d=8, heads=2, type_layers=1, hop_layers=1, hops=1, d_llm=8)
    p = init_params(cfg, ["user", "item"], {}, seed=1)
    for _ in range(200):
        zs = Tensor(rng.standard_normal((1, 8)))
        zt = Tensor(rng.standard_normal((1, 8)))
        a = similarity(zs, zt, "user", "item", p).item()
        b = similarity(zt, zs, "item", "user", p).item()
        assert abs(a - b) < 1e-12


def test_similarity_missing_projection():
    p = one_d_params()
    with pytest.raises(KeyError, match="ghost"):
        similarity(Tensor([[1.0]]), Tensor([[1.0]]), "ghost", "item", p)


# -- pretrain loss -----------------------------------------------------------------


def loss_for(pos_logits, neg_logits):
    """Build a 1-d fixture whose similarities are sigmoid(logit)."""
    p = one_d_params()
    samples = EdgeSampleSet()
    emb = {}
    pos, neg = [], []
    for i, logit in enumerate(pos_logits):
        s, t = f"u{i}", f"i{i}"
        emb[s] = Tensor([[1.0]])
        emb[t] = Tensor([[float(logit)]])
        pos.append((s, t))
    for i, logit in enumerate(neg_logits):
        s, t = f"nu{i}", f"ni{i}"
        emb[s] = Tensor([[1.0]])
        emb[t] = Tensor([[float(logit)]])
        neg.append((s, t))
    samples.by_type["buys"] = EdgeSample(positives=pos, negatives=neg)
    type_of = lambda n: "user" if n.startswith(("u", "nu")) else "item"
    return pretrain_loss(samples, emb, type_of, p)


def test_pretrain_loss_half_half():
    # 1 positive and 1 negative both at sim 0.5 -> 2 ln 2
    loss = loss_for([0.0], [0.0])
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_pretrain_loss_perfect_limit():
    loss = loss_for([30.0], [-30.0])
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_pretrain_loss_frozen_value():
    # sims 0.9, 0.8 positive and 0.3 negative -> -ln.9 - ln.8 - ln.7
    logits = [math.log(0.9 / 0.1), math.log(0.8 / 0.2)]
    neg = [math.log(0.3 / 0.7)]
    expected = -(math.log(0.9) + math.log(0.8) + math.log(0.7))
    assert loss_for(logits, neg).item() == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.685179, abs=1e-6)


def test_pretrain_loss_descends_under_small_sgd_step():
    g, _ = planted_link_fixture(seed=3, users=20, items=20)
    cfg = ModelConfig(d=8, heads=2, type_layers=1, hop_layers=1, hops=2, d_llm=8)
    table = tokenize_graph(MockBackend(dim=8), g, K=2)
    params = init_params(cfg, g.schema.node_types, {}, seed=4)
    samples = sample_edges(g, ratio=1, seed=7)

    from ella.ellanet import forward

    def compute_loss():
        emb = {n: forward(n, table, params, cfg) for n in sorted(samples.endpoints())}
        return pretrain_loss(samples, emb, g.node_type, params)

    loss0 = compute_loss()
    zero_grads(params.tensors)
    backward(loss0)
    for t in params.tensors.values():
        if t.grad is not None:
            t.data -= 1e-6 * t.grad
    loss1 = compute_loss()
    assert loss1.item() <= loss0.item() + 1e-12


# -- cross entropy ------------------------------------------------------------------


def test_uniform_head_gives_log_c():
    onehot = np.zeros((5, 3))
    onehot[np.arange(5), [0, 1, 2, 0, 1]] = 1.0
    loss = cross_entropy(Tensor(np.zeros((5, 3))), Tensor(onehot))
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


# -- pretrain loop ------------------------------------------------------------------


def small_link_setup(seed=0, users=24, items=24):
    g, labels = planted_link_fixture(seed=seed, users=users, items=items)
    cfg = ModelConfig(d=8, heads=2, type_layers=1, hop_layers=1, hops=2, d_llm=8)
    table = tokenize_graph(MockBackend(dim=8), g, K=2)
    return g, cfg, table


def test_pretrain_improves_validation_loss():
    # dense enough that neighborhood structure generalizes to held-out edges
    g, cfg, table = small_link_setup(users=64, items=64)
    result = pretrain(g, table, cfg, TrainConfig(max_epochs=50, patience=50), seed=0)
    assert min(result.val_curve[1:]) < result.val_curve[0]


def test_pretrain_frozen_val_stops_at_patience():
    g, cfg, table = small_link_setup()
    result = pretrain(g, table, cfg, TrainConfig(lr=0.0, max_epochs=100, patience=30), seed=0)
    assert result.best_epoch == 0
    assert result.last_epoch == 30
    assert len(result.val_curve) == 31


def test_pretrain_never_exceeds_best_plus_patience():
    g, cfg, table = small_link_setup()
    patience = 5
    result = pretrain(g, table, cfg, TrainConfig(max_epochs=200, patience=patience), seed=1)
    assert result.last_epoch <= result.best_epoch + patience


def test_pretrain_deterministic_checkpoints():
    g, cfg, table = small_link_setup()
    r1 = pretrain(g, table, cfg, TrainConfig(max_epochs=4, patience=30), seed=9)
    r2 = pretrain(g, table, cfg, TrainConfig(max_epochs=4, patience=30), seed=9)
    assert r1.params.content_hash() == r2.params.content_hash()
    r3 = pretrain(g, table, cfg, TrainConfig(max_epochs=4, patience=30), seed=10)
    assert r3.params.content_hash() != r1.params.content_hash()


def test_pretrain_divergence_aborts_with_dump(tmp_path):
    g, cfg, table = small_link_setup()
    params = init_params(cfg, g.schema.node_types, {}, seed=0)
    params["proj/W"].data[0, 0] = np.nan
    dump = tmp_path / "diverged.ckpt"
    with pytest.raises(TrainingDiverged):
        pretrain(
            g, table, cfg,
            TrainConfig(max_epochs=3, dump_path=str(dump)),
            seed=0, params=params,
        )
    assert dump.exists()


def test_pretrain_heads_untouched():
    g, cfg, table = small_link_setup()
    params = init_params(cfg, g.schema.node_types, {"user": 3}, seed=2)
    head_before = params["head/user"].data.copy()
    pretrain(g, table, cfg, TrainConfig(max_epochs=3), seed=2, params=params)
    assert np.array_equal(params["head/user"].data, head_before)


# -- finetune -----------------------------------------------------------------------


def node_task_setup(seed=0, papers=60, authors=60):
    g, labels = planted_node_fixture(seed=seed, papers=papers, authors=authors)
    cfg = ModelConfig(d=8, heads=2, type_layers=1, hop_layers=1, hops=2, d_llm=16)
    table = tokenize_graph(PrototypeBackend(dim=16, noise=0.5), g, K=2)
    params = init_params(cfg, g.schema.node_types, {"paper": 3, "author": 3}, seed=seed)
    return g, labels, cfg, table, params


def test_finetune_touches_only_head():
    g, labels, cfg, table, params = node_task_setup()
    paper_labels = {n: l for n, l in labels.items() if g.node_type(n) == "paper"}
    ids = sorted(paper_labels)
    train_ids, val_ids = ids[:30], ids[30:45]
    backbone_before = params.content_hash(sorted(params.backbone()))
    other_head_before = params["head/author"].data.copy()
    result = finetune(
        g, paper_labels, cfg, TrainConfig(max_epochs=60), params, table, "paper",
        train_ids, val_ids,
    )
    assert params.content_hash(sorted(params.backbone())) == backbone_before
    assert np.array_equal(params["head/author"].data, other_head_before)
    assert not np.allclose(params["head/paper"].data, 0.0)
    assert result.lr in TrainConfig().lr_grid


def test_finetune_learns_planted_classes():
    g, labels, cfg, table, params = node_task_setup()
    paper_labels = {n: l for n, l in labels.items() if g.node_type(n) == "paper"}
    by_class = {}
    for n, l in sorted(paper_labels.items()):
        by_class.setdefault(l, []).append(n)
    train_ids = [n for ids in by_class.values() for n in ids[:10]]
    val_ids = [n for ids in by_class.values() for n in ids[10:16]]
    test_ids = [n for ids in by_class.values() for n in ids[16:]]
    result = finetune(
        g, paper_labels, cfg, TrainConfig(max_epochs=80), params, table, "paper",
        train_ids, val_ids,
    )
    from ella.trainer import classify
    from ella.evalkit import micro_f1

    preds = classify(test_ids, params, table, cfg, "paper", result.label_vocab)
    golds = [paper_labels[n] for n in test_ids]
    assert micro_f1(preds, golds) >= 0.8


def test_finetune_unlabeled_type_errors():
    g, labels, cfg, table, params = node_task_setup()
    g.schema.class_labels.pop("author")
    with pytest.raises(ValueError, match="class labels"):
        finetune(g, labels, cfg, TrainConfig(), params, table, "author", [], [])
