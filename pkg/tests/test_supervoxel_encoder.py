import numpy as np
import pytest
import torch

from src.config import ModelConfig
from src.models.supervoxel_encoder import (
    AttentionBlock,
    EnsemblePredictor,
    GATv2Layer,
    SupervoxelGraphEncoder,
    count_parameters,
    count_parameters_analytic,
    diversity_penalty,
    edge_index_with_self_loops,
    loss,
    scatter_softmax,
)
from src.models.tensor_ops import parameter_gradient_check


def _model(cfg):
    return SupervoxelGraphEncoder(cfg).double().eval()


def _inputs(graph):
    return (
        torch.as_tensor(graph.patches, dtype=torch.float64),
        graph.edges,
        torch.as_tensor(graph.lap_pe, dtype=torch.float64),
    )


def test_forward_shapes_and_ranges(tiny_model_config, random_graph_factory):
    graph = random_graph_factory(n_nodes=7)
    out = _model(tiny_model_config)(*_inputs(graph))

    assert out["pred"].shape == (7,)
    assert torch.all((out["pred"] > 0) & (out["pred"] < 1))
    assert out["head_logits"].shape == (7, 3)
    assert torch.allclose(out["head_weights"].sum(-1), torch.ones(7, dtype=torch.float64))
    assert out["node_embeddings"].shape == (7, 8)

    patch_attn = out["patch_attention"][0]
    assert patch_attn.shape == (7, 2, 1 + 2 * 2, 1 + 2 * 2)
    assert torch.allclose(patch_attn.sum(-1), torch.ones_like(patch_attn.sum(-1)))

    n_directed = 2 * len(graph.edges) + 7
    for alpha in out["graph_attention"]:
        assert alpha.shape == (n_directed, 2)
        per_node = torch.zeros(7, 2, dtype=torch.float64).index_add(0, out["dst"], alpha)
        assert torch.allclose(per_node, torch.ones_like(per_node))


def test_self_loops_follow_both_edge_directions():
    src, dst = edge_index_with_self_loops(np.array([[0, 2]]), 3)
    assert src.tolist() == [0, 2, 0, 1, 2]
    assert dst.tolist() == [2, 0, 0, 1, 2]


def test_scatter_softmax_normalizes_per_group():
    scores = torch.tensor([[1.0], [2.0], [3.0], [50.0]], dtype=torch.float64)
    index = torch.tensor([0, 0, 1, 1])
    out = scatter_softmax(scores, index, 2)
    expected = torch.cat([torch.softmax(scores[:2], 0), torch.softmax(scores[2:], 0)])
    assert torch.allclose(out, expected, atol=1e-15)


def test_node_permutation_equivariance(tiny_model_config, random_graph_factory):
    rng = np.random.default_rng(5)
    for instance in range(50):
        n = int(rng.integers(3, 12))
        graph = random_graph_factory(n_nodes=n, k_nn=3, seed=instance)
        torch.manual_seed(instance)
        model = _model(tiny_model_config)
        patches, edges, pe = _inputs(graph)

        perm = rng.permutation(n)
        inverse = np.argsort(perm)
        permuted = model(patches[perm], inverse[edges], pe[perm])
        base = model(patches, edges, pe)

        assert torch.allclose(permuted["pred"], base["pred"][perm], atol=1e-10)
        assert torch.allclose(permuted["context"], base["context"][perm], atol=1e-10)


def test_patch_order_does_not_change_embedding(tiny_model_config, random_graph_factory):
    cfg = tiny_model_config
    rng = np.random.default_rng(8)
    for instance in range(50):
        graph = random_graph_factory(n_nodes=4, seed=instance)
        torch.manual_seed(instance)
        model = _model(cfg)
        patches, _, _ = _inputs(graph)

        # rows are patch-major: row = patch * n_modalities + modality
        rows = np.arange(cfg.patch_rows).reshape(cfg.n_patch, cfg.n_modalities)
        for m in range(cfg.n_modalities):
            rows[:, m] = rows[rng.permutation(cfg.n_patch), m]
        shuffled = patches[:, rows.ravel(), :]

        a = model.embedder(patches)[0]
        b = model.embedder(shuffled)[0]
        assert torch.allclose(a, b, atol=1e-10)


def test_no_edges_means_no_message_passing(tiny_model_config, random_graph_factory):
    graph = random_graph_factory(n_nodes=5)
    model = _model(tiny_model_config)
    patches, _, pe = _inputs(graph)
    no_edges = np.zeros((0, 2), dtype=np.int64)

    base = model(patches, no_edges, pe)["pred"]
    altered = patches.clone()
    altered[3] += 1.0
    changed = model(altered, no_edges, pe)["pred"]

    keep = [0, 1, 2, 4]
    assert torch.allclose(base[keep], changed[keep], atol=1e-12)
    assert not torch.allclose(base[3], changed[3])


def test_identical_heads_make_attention_irrelevant(tiny_model_config):
    predictor = EnsemblePredictor(tiny_model_config).double()
    with torch.no_grad():
        predictor.heads.weight.zero_()
        predictor.heads.bias.fill_(0.8)
    out = predictor(torch.randn(6, 8, dtype=torch.float64))
    assert torch.allclose(out["pred"], torch.sigmoid(torch.tensor(0.8, dtype=torch.float64)).expand(6))


def test_shape_mismatches_are_rejected(tiny_model_config, random_graph_factory):
    graph = random_graph_factory(n_nodes=4)
    model = _model(tiny_model_config)
    patches, edges, pe = _inputs(graph)
    with pytest.raises(ValueError):
        model(patches[:, :, :-1], edges, pe)
    with pytest.raises(ValueError):
        model(patches, edges, pe[:, :2])


def _out(pred, head_logits=None):
    pred = torch.as_tensor(pred, dtype=torch.float64)
    if head_logits is None:
        head_logits = torch.zeros(pred.shape[0], 2, dtype=torch.float64)
    return {"pred": pred, "logit": torch.logit(pred), "head_logits": head_logits}


def test_regression_loss_values():
    total, parts = loss(_out([0.5, 0.5]), torch.tensor([0.0, 1.0]), "regression", lambda_div=0.0)
    assert total.item() == pytest.approx(0.25)
    total, parts = loss(_out([0.2, 0.9]), torch.tensor([0.2, 0.9]), "regression")
    assert parts["task"] == pytest.approx(0.0, abs=1e-14)


def test_classification_loss_uses_logits():
    total, parts = loss(_out([0.5, 0.5]), torch.tensor([0, 1]), "classification", lambda_div=0.0)
    assert parts["task"] == pytest.approx(np.log(2.0))
    with pytest.raises(ValueError):
        loss(_out([0.5]), torch.tensor([0]), "segmentation")


def test_diversity_penalty_cases():
    seq = torch.tensor([0.1, -0.4, 0.7, 0.2], dtype=torch.float64)
    assert diversity_penalty(torch.stack([seq, seq], dim=1)).item() == pytest.approx(1.0)
    assert diversity_penalty(torch.stack([seq, -seq], dim=1)).item() == pytest.approx(1.0)
    orthogonal = torch.tensor([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)
    assert diversity_penalty(orthogonal).item() == pytest.approx(0.0, abs=1e-12)
    assert diversity_penalty(torch.randn(1, 3, dtype=torch.float64)).item() == 0.0


def test_parameter_count_formula(tiny_model_config):
    for cfg in (tiny_model_config, ModelConfig.from_profile("toy")):
        model = SupervoxelGraphEncoder(cfg)
        counts = count_parameters_analytic(cfg)
        assert counts["total"] == count_parameters(model)
        assert counts["embedder"] == count_parameters(model.embedder)
        assert counts["graph_encoder"] == count_parameters(model.graph_encoder)
        assert counts["predictor"] == count_parameters(model.predictor)


def test_attention_block_gradients():
    block = AttentionBlock(8, 2, mlp_ratio=2, dropout=0.0).double()
    x = torch.randn(2, 5, 8, dtype=torch.float64)
    w = torch.randn(2, 5, 8, dtype=torch.float64)
    errors = parameter_gradient_check(block, lambda: (block(x)[0] * w).sum())
    assert max(errors.values()) < 1e-4


def test_gat_layer_gradients():
    layer = GATv2Layer(6, 2).double()
    h = torch.randn(5, 6, dtype=torch.float64)
    src, dst = edge_index_with_self_loops(np.array([[0, 1], [1, 2], [2, 3], [0, 4]]), 5)
    w = torch.randn(5, 6, dtype=torch.float64)
    errors = parameter_gradient_check(layer, lambda: (layer(h, src, dst)[0] * w).sum())
    assert max(errors.values()) < 1e-4


def test_predictor_gradients(tiny_model_config):
    predictor = EnsemblePredictor(tiny_model_config).double()
    z = torch.randn(6, 8, dtype=torch.float64)
    y = torch.rand(6, dtype=torch.float64)
    errors = parameter_gradient_check(predictor, lambda: loss(predictor(z), y, "regression", 0.1)[0])
    assert max(errors.values()) < 1e-4


def test_full_model_gradients(tiny_model_config, random_graph_factory):
    graph = random_graph_factory(n_nodes=5, k_nn=2)
    model = _model(tiny_model_config)
    patches, edges, pe = _inputs(graph)
    y = torch.as_tensor(graph.y_reg, dtype=torch.float64)
    errors = parameter_gradient_check(
        model, lambda: loss(model(patches, edges, pe), y, "regression", lambda_div=0.01)[0]
    )
    assert set(errors) == {name for name, _ in model.named_parameters()}
    assert max(errors.values()) < 1e-4
