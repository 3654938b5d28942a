import numpy as np
import pytest
import torch

from oodaug.datasets import SplitConfig, make_splits
from oodaug.downstream import (ClassifierConfig, ConfigError, GinClassifier, evaluate, run_comparison,
                               summarize, train_gnn, training_set)
from oodaug.graph import GraphDataset


@pytest.fixture(scope="module")
def splits():
    return make_splits(SplitConfig(sizes={"train": 90, "val": 30, "test": 30}, seed=5))


def _aug(ds, lambdas, r):
    g = [x.replace(meta={"lambda": lambdas[0]}) for x in ds.graphs[:6]]
    return GraphDataset(g, 3, "augmented", ds.n_max, ds.a, ds.b, ds.feature_blocks,
                        {"lambdas": lambdas, "r1": r, "r2": r})


def test_fits_train_split(splits):
    tr = splits[0]
    model = train_gnn(tr, ClassifierConfig(epochs=60, dropout=0.0), seed=0)
    assert evaluate(model, tr) > 0.95


def test_memorizes_single_graph(splits):
    one = splits[0].with_graphs([splits[0][0]] * 8)
    model = train_gnn(one, ClassifierConfig(epochs=30), seed=0)
    with torch.no_grad():
        from oodaug.models import to_tensors
        d = to_tensors(one.graphs)
        loss = torch.nn.functional.cross_entropy(model(d.x, d.adj, d.mask), d.labels)
    assert loss.item() < 0.05
    assert evaluate(model, one) == 1.0


def test_deterministic(splits):
    cfg = ClassifierConfig(epochs=3)
    a = train_gnn(splits[0], cfg, splits[1], seed=4)
    b = train_gnn(splits[0], cfg, splits[1], seed=4)
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k


def test_random_model_near_chance(splits):
    accs = []
    for seed in range(5):
        torch.manual_seed(seed)
        accs.append(evaluate(GinClassifier(splits[0].a, 3, ClassifierConfig()).eval(), splits[2]))
    assert abs(np.mean(accs) - 1 / 3) <= 0.1


def test_label_permutation_drops_to_chance(splits):
    tr, _, te = splits
    model = train_gnn(tr, ClassifierConfig(epochs=40, dropout=0.0), seed=0)
    held = make_splits(SplitConfig(sizes={"train": 60, "val": 0, "test": 0}, seed=9))[0]
    assert evaluate(model, held) > 0.8
    rng = np.random.default_rng(0)
    shuffled = held.with_graphs([g.replace(label=int(y)) for g, y in zip(held, rng.permutation(held.labels()))])
    assert abs(evaluate(model, shuffled) - 1 / 3) <= 0.15


def test_mode_audit(splits):
    tr = splits[0]
    assert training_set("erm", tr, None) is tr
    assert len(training_set("ooda", tr, _aug(tr, [0.1], 0.5))) == len(tr) + 6
    training_set("unconditional", tr, _aug(tr, [0.0], 0.0))
    training_set("lambda_only", tr, _aug(tr, [0.2], 0.0))
    training_set("alpha_only", tr, _aug(tr, [0.0], 0.5))
    with pytest.raises(ConfigError):
        training_set("ooda", tr, _aug(tr, [0.0], 0.5))
    with pytest.raises(ConfigError):
        training_set("unconditional", tr, None)
    with pytest.raises(ConfigError):
        run_comparison(splits, None, ClassifierConfig(epochs=1), "mixup")


def test_run_comparison_rows(splits):
    cfg = ClassifierConfig(epochs=2, seeds=(0, 1))
    erm = run_comparison(splits, None, cfg, "erm")
    ooda = run_comparison(splits, _aug(splits[0], [0.1], 0.5), cfg, "ooda")
    assert [r["seed"] for r in erm] == [0, 1]
    assert all(0 <= r["test_acc"] <= 1 for r in erm + ooda)
    assert ooda[0]["n_train"] > erm[0]["n_train"]
    s = summarize(erm + ooda)
    assert set(s) == {"erm", "ooda"}
    assert s["erm"][0] == pytest.approx(np.mean([r["test_acc"] for r in erm]))


def test_empty_inputs_rejected(splits):
    empty = splits[0].with_graphs([])
    with pytest.raises(ValueError):
        train_gnn(empty, ClassifierConfig(epochs=1))
    with pytest.raises(ValueError):
        evaluate(GinClassifier(splits[0].a, 3, ClassifierConfig()), empty)
