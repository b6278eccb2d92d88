import numpy as np
import pytest

from xraynet.data import AugmentConfig, ImageSet, preprocess
from xraynet.errors import ConfigError, EmptyDataset, NonFiniteLoss
from xraynet.harness import (
    Hyperparams,
    evaluate,
    fold_seed,
    optimizer_step,
    parse_experiment_config,
    run_cross_validation,
    train,
)
from xraynet.metrics import report_to_json
from xraynet.model import HEAD, StrategyConfig, apply_strategy, build_model, tiny_config
from xraynet.synthetic import make_pattern_arrays
from xraynet.weights import load_weights, save_weights

NO_AUG = AugmentConfig(enabled=False)


def micro_config(**kw):
    base = dict(input_size=(16, 16), stem_channels=8, last_channels=32, head_units=16)
    base.update(kw)
    return tiny_config(**base)


def pattern_set(n_per_class=4, size=16, seed=0):
    imgs, labels = make_pattern_arrays(n_per_class, size, seed)
    return ImageSet(np.stack([preprocess(i, (size, size)) for i in imgs]), labels)


def test_sgd_step():
    h = Hyperparams("sgd", 0.1)
    out, _ = optimizer_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, {}, h)
    assert out["p"][0] == pytest.approx(0.8)
    same, _ = optimizer_step({"p": np.array([1.0])}, {"p": np.array([2.0])}, {}, Hyperparams("sgd", 0.0))
    assert same["p"][0] == 1.0


def test_adam_first_step_is_lr_sized():
    out, state = optimizer_step({"p": np.array([1.0])}, {"p": np.array([-5.0])}, {}, Hyperparams("adam", 0.01))
    assert out["p"][0] == pytest.approx(1.01, abs=1e-7)
    assert state["t"] == 1


def test_adam_converges_on_quadratic():
    h = Hyperparams("adam", 0.1)
    params, state = {"p": np.array([-4.0, 10.0])}, {}
    for _ in range(500):
        params, state = optimizer_step(params, {"p": 2 * (params["p"] - 3.0)}, state, h)
    np.testing.assert_allclose(params["p"], 3.0, atol=1e-2)


def test_optimizer_does_not_mutate_inputs():
    p = np.array([1.0])
    optimizer_step({"p": p}, {"p": np.array([1.0])}, {}, Hyperparams("sgd", 1.0))
    assert p[0] == 1.0


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        Hyperparams("rmsprop")
    with pytest.raises(ValueError):
        Hyperparams(batch_size=0)


def test_train_is_deterministic():
    data = pattern_set()
    h = Hyperparams(epochs=2, batch_size=8, seed=3)
    runs = []
    for _ in range(2):
        model = build_model(micro_config(), 1)
        runs.append((train(model, data, h, AugmentConfig()).losses, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name])


def test_off_the_shelf_leaves_backbone_unchanged(tmp_path):
    path = tmp_path / "pre.snwt"
    save_weights(build_model(micro_config(), 9), path)
    model = apply_strategy(build_model(micro_config(), 0), StrategyConfig.off_the_shelf(path))
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(model, pattern_set(), Hyperparams(epochs=1, batch_size=8), NO_AUG)
    after = model.state_dict()
    for name in model.backbone_state_names():
        assert after[name].tobytes() == before[name].tobytes(), name
    changed = [n for n, b in model.block_of.items() if b == HEAD and not np.array_equal(after[n], before[n])]
    assert changed


def test_full_batch_loss_decreases():
    data = pattern_set(5)
    model = build_model(micro_config(dropout_rate=0.0), 0)
    losses = train(model, data, Hyperparams("adam", 1e-3, batch_size=len(data), epochs=60), NO_AUG).losses
    increases = [b - a for a, b in zip(losses, losses[1:]) if b > a]
    assert not increases
    assert losses[-1] < losses[0]


def test_training_raises_on_non_finite_loss():
    data = ImageSet(np.full((4, 1, 16, 16), 1e30, np.float32), np.array([0, 1, 2, 3]))
    with pytest.raises(NonFiniteLoss):
        train(build_model(micro_config(), 0), data, Hyperparams(epochs=1, batch_size=4), NO_AUG)


def test_train_empty():
    with pytest.raises(EmptyDataset):
        train(build_model(micro_config(), 0), ImageSet(np.zeros((0, 1, 16, 16)), np.zeros(0)), Hyperparams())


def test_checkpoint_holds_best_state(tmp_path):
    ckpt = tmp_path / "best.snwt"
    model = build_model(micro_config(), 0)
    result = train(model, pattern_set(), Hyperparams(epochs=3, batch_size=28), NO_AUG, ckpt)
    saved = load_weights(ckpt)
    assert set(saved) == set(model.state_dict())
    assert 0 <= result.best_epoch < 3


def _constant_model(winner=None):
    model = build_model(micro_config(), 0)
    model.params["head.out.weight"].data[:] = 0
    model.params["head.out.bias"].data[:] = 0
    if winner is not None:
        model.params["head.out.bias"].data[winner] = 5
    return model


def test_evaluate_constant_predictor():
    data = pattern_set(3)
    cm = evaluate(_constant_model(winner=4), data)
    assert cm.counts[4].tolist() == [3] * 7
    assert cm.total == 21


def test_evaluate_ties_go_to_first_class():
    cm = evaluate(_constant_model(), pattern_set(2))
    assert cm.counts[0].tolist() == [2] * 7


def test_evaluate_is_eval_mode():
    model = build_model(micro_config(), 0)
    data = pattern_set(2)
    first = evaluate(model, data)
    stats = {k: v.copy() for k, v in model.buffers.items()}
    assert evaluate(model, data) == first
    assert all(np.array_equal(stats[k], model.buffers[k]) for k in stats)


def test_fold_seeds_distinct():
    seeds = {fold_seed(0, f) for f in range(10)}
    assert len(seeds) == 10
    assert fold_seed(0, 1) == fold_seed(0, 1) != fold_seed(1, 1)


def test_cross_validation_conserves_samples(tmp_path):
    data = pattern_set(4)
    h = Hyperparams(epochs=1, batch_size=14, seed=2)
    report = run_cross_validation(
        data, micro_config(), StrategyConfig.scratch(), h, k=2, augment_cfg=NO_AUG, checkpoint_dir=tmp_path
    )
    assert [f.fold for f in report.folds] == [0, 1]
    assert report.pooled.total == len(data)
    assert report.pooled.actual_counts.tolist() == [4] * 7
    assert sum(f.test_size for f in report.folds) == len(data)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["fold0.snwt", "fold1.snwt"]
    assert report.config["strategy"] == "scratch" and report.config["k"] == 2


def test_parallel_folds_match_serial():
    data = pattern_set(3)
    h = Hyperparams(epochs=1, batch_size=7)
    args = (data, micro_config(), StrategyConfig.scratch(), h)
    serial = run_cross_validation(*args, k=3, augment_cfg=NO_AUG)
    parallel = run_cross_validation(*args, k=3, augment_cfg=NO_AUG, parallel_folds=3)
    assert report_to_json(serial) == report_to_json(parallel)


CONFIG = """
# tiny experiment
manifest = data/manifest.csv
strategy = finetune:2
weights = pre.snwt
k = 5
optimizer = sgd
learning_rate = 0.01
batch_size = 8
epochs = 3
seed = 11
model.input_size = 32x32
model.blocks = 1,8,1,1; 6,16,2,2
model.head_units = 64
augment.enabled = false
contrast_threshold = none
"""


def test_parse_experiment_config(tmp_path):
    cfg = parse_experiment_config(CONFIG, tmp_path / "e.cfg", tmp_path)
    assert cfg.manifest == tmp_path / "data/manifest.csv"
    assert str(cfg.strategy) == "finetune:2"
    assert cfg.strategy.pretrained_weights_path == str(tmp_path / "pre.snwt")
    assert cfg.k == 5
    assert cfg.hyperparams == Hyperparams("sgd", 0.01, 8, 3, 11)
    assert cfg.model == tiny_config()
    assert cfg.augment.enabled is False
    assert cfg.contrast_threshold is None


@pytest.mark.parametrize(
    "text, line",
    [
        ("seed = 1\nbogus = 2\n", 2),
        ("epochs = many\n", 1),
        ("\n\nmodel.colour = red\n", 3),
        ("just words\n", 1),
    ],
)
def test_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_experiment_config(text, "e.cfg")
    assert exc.value.line == line
    assert f"e.cfg:{line}" in str(exc.value)


def test_config_bad_strategy():
    with pytest.raises(ConfigError) as exc:
        parse_experiment_config("seed = 1\nstrategy = transfer\n")
    assert exc.value.line == 2
