import numpy as np
import pandas as pd
import pytest
import torch

from src.config import TrainConfig
from src.training.metrics import metric_report
from src.training.trainer import (
    NonFiniteLossError,
    build_model,
    evaluate,
    load_model,
    model_config_for_graphs,
    predict,
    save_model,
    train,
)


def _graphs(factory, n=4):
    return [factory(n_nodes=5 + i, seed=i, graph_id=f"g{i}") for i in range(n)]


def _train_cfg(**overrides):
    return TrainConfig.from_profile("toy", **overrides)


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def test_accumulation_matches_larger_batches(tiny_model_config, random_graph_factory):
    graphs = _graphs(random_graph_factory)
    whole = train(graphs, build_model(tiny_model_config, seed=1),
                  _train_cfg(batch_size=4, accum_steps=1, max_epochs=5))
    split = train(graphs, build_model(tiny_model_config, seed=1),
                  _train_cfg(batch_size=2, accum_steps=2, max_epochs=5))

    assert whole.optimizer_steps == split.optimizer_steps == 5
    for a, b in zip(_params(whole.model), _params(split.model)):
        assert torch.allclose(a, b, atol=1e-10, rtol=0)


def test_step_counter_runs_across_epochs(tiny_model_config, random_graph_factory):
    graphs = _graphs(random_graph_factory, n=3)
    result = train(graphs, build_model(tiny_model_config),
                   _train_cfg(batch_size=1, accum_steps=2, max_epochs=3))
    assert result.optimizer_steps == 4
    assert result.history["optimizer_steps"].tolist() == [1, 3, 4]


def test_zero_epochs_keeps_initialization(tiny_model_config, random_graph_factory, tmp_path):
    model = build_model(tiny_model_config, seed=3)
    before = _params(model)
    result = train(_graphs(random_graph_factory), model, _train_cfg(max_epochs=0))
    assert result.optimizer_steps == 0
    assert result.history.empty
    for a, b in zip(before, _params(result.model)):
        assert torch.equal(a, b)

    path = save_model(result.model, tmp_path / "model.ckpt")
    loaded, extra = load_model(path)
    for a, b in zip(before, _params(loaded)):
        assert torch.equal(a, b)
    assert extra["model_config"]["d_model"] == tiny_model_config.d_model


def test_training_reduces_loss_and_logs(tiny_model_config, random_graph_factory, tmp_path):
    graphs = _graphs(random_graph_factory)
    log = tmp_path / "train_log.jsonl"
    result = train(graphs, build_model(tiny_model_config), _train_cfg(max_epochs=30, batch_size=2),
                   val_graphs=graphs[:1], log_path=log)

    history = result.history
    assert len(history) == 30
    assert history["train_loss"].iloc[-1] < history["train_loss"].iloc[0]
    assert {"lr", "train_task_loss", "train_diversity", "val_mae", "val_r2"} <= set(history.columns)
    logged = pd.read_json(log, lines=True)
    assert len(logged) == 30


def test_training_is_reproducible(tiny_model_config, random_graph_factory):
    graphs = _graphs(random_graph_factory)
    a = train(graphs, build_model(tiny_model_config, seed=5), _train_cfg(max_epochs=3))
    b = train(graphs, build_model(tiny_model_config, seed=5), _train_cfg(max_epochs=3))
    for x, y in zip(_params(a.model), _params(b.model)):
        assert torch.equal(x, y)


def test_classification_training_runs(tiny_model_config, random_graph_factory):
    cfg = tiny_model_config.updated(task="classification")
    result = train(_graphs(random_graph_factory), build_model(cfg), _train_cfg(max_epochs=2))
    assert np.isfinite(result.history["train_loss"]).all()


def test_nan_loss_names_the_sample(tiny_model_config, random_graph_factory):
    graphs = _graphs(random_graph_factory, n=2)
    graphs[1].patches[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(graphs, build_model(tiny_model_config), _train_cfg(max_epochs=1, batch_size=1))
    assert info.value.sample_id == "g1"


def test_empty_inputs_are_rejected(tiny_model_config):
    model = build_model(tiny_model_config)
    with pytest.raises(ValueError):
        train([], model, _train_cfg())
    with pytest.raises(ValueError):
        evaluate([], model)


def test_graphs_without_targets_cannot_train(tiny_model_config, random_graph_factory):
    graphs = [random_graph_factory(with_targets=False)]
    with pytest.raises(ValueError, match="no targets"):
        train(graphs, build_model(tiny_model_config), _train_cfg(max_epochs=1))


def test_evaluate_matches_exported_predictions(tiny_model_config, random_graph_factory):
    graphs = _graphs(random_graph_factory)
    model = build_model(tiny_model_config)
    report = evaluate(graphs, model)
    again = evaluate(graphs, model)

    assert report["pooled"] == again["pooled"]
    assert report["n_nodes"] == sum(g.n_nodes for g in graphs)
    recomputed = metric_report(report["predictions"], task="regression")
    assert recomputed["pooled"] == report["pooled"]


def test_predict_rows_follow_node_ids(tiny_model_config, random_graph_factory):
    graph = random_graph_factory(n_nodes=4, graph_id="only")
    frame = predict([graph], build_model(tiny_model_config))
    assert frame["graph_id"].unique().tolist() == ["only"]
    assert frame["node_id"].tolist() == graph.node_ids.tolist()
    assert frame["pred"].between(0, 1).all()


def test_model_config_follows_graph_layout(small_preprocessed):
    cfg = model_config_for_graphs([small_preprocessed.graph])
    assert (cfg.n_modalities, cfg.n_patch, cfg.patch_size, cfg.k_pe) == (4, 2, 4, 3)
    out = build_model(cfg)(
        torch.as_tensor(small_preprocessed.graph.patches, dtype=torch.float64),
        small_preprocessed.graph.edges,
        torch.as_tensor(small_preprocessed.graph.lap_pe, dtype=torch.float64),
    )
    assert out["pred"].shape == (small_preprocessed.graph.n_nodes,)
