import math
import subprocess
import sys
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from prior_attunet import checkpoint as ck
from prior_attunet import data as D
from prior_attunet.ablation import ABLATION_HEADER, AXES, parse_value, run_ablation
from prior_attunet.cli import _apply_threads, main
from prior_attunet.config import dump_config, from_flat, load_config
from prior_attunet.diffcore import ConfigurationError
from prior_attunet.heatmaps import HEATMAP_FILES, export_heatmaps, minmax_u8
from prior_attunet.losses import CSV_HEADER
from prior_attunet.net import ModelConfig, build_network
from prior_attunet.optim import AdamW, AdamWState, NonFiniteGradient, TrainConfig, adamw_step
from prior_attunet.train import (
    TrainingError,
    evaluate,
    evaluate_masks,
    model_from_checkpoint,
    pretrain_prior,
    prior_from_checkpoint,
    prior_split,
    prior_val_mse,
    train_segmentation,
)

SIZE = (32, 32)


def tiny_model(**kw):
    return ModelConfig.desk(**{"base_c": 4, "input_size": SIZE, "normnet_midc": 4, "vae_base_c": 4,
                               "vae_latent_dim": 8, **kw})


def tiny_train(**kw):
    return TrainConfig.desk(**{"epochs": 2, "prior_epochs": 2, **kw})


@pytest.fixture(scope="module")
def corpus():
    return D.generate_corpus(12, D.with_size(D.get_preset("desk"), SIZE), seed=0)


@pytest.fixture(scope="module")
def normal():
    return D.generate_corpus(10, D.with_size(D.get_preset("desk"), SIZE), seed=1, fluid_free=True)


@pytest.fixture(scope="module")
def vae(normal):
    return pretrain_prior(normal, tiny_model().vae_config(), tiny_train())[0]


# ---------------------------------------------------------------- AdamW

def test_adamw_zero_grad_no_decay_is_identity():
    p = torch.tensor([0.3, -2.0])
    before = p.clone()
    adamw_step([p], [torch.zeros(2)], AdamWState(), TrainConfig(weight_decay=0.0), 1)
    assert torch.equal(p, before)


def test_adamw_first_step_is_lr_sign():
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
    p = torch.zeros(3, dtype=torch.float64)
    g = torch.tensor([0.5, -2.0, 1e-3], dtype=torch.float64)
    adamw_step([p], [g], AdamWState(), cfg, 1)
    want = -cfg.lr * g / (g.abs() + cfg.eps_opt)
    assert torch.allclose(p, want, rtol=1e-12, atol=0)
    assert torch.allclose(p, -cfg.lr * g.sign(), rtol=1e-4)


def test_adamw_decoupled_decay_example():
    p = torch.tensor([1.0], dtype=torch.float64)
    adamw_step([p], [torch.zeros(1, dtype=torch.float64)], AdamWState(), TrainConfig(lr=1e-4, weight_decay=0.01), 1)
    assert p.item() == pytest.approx(0.999999, abs=1e-15)


def _reference_adamw(theta, grads, lr, b1, b2, eps, wd):
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps) - lr * wd * theta
    return theta


@given(st.integers(0, 10_000), st.floats(1e-5, 1e-2), st.floats(0, 0.1), st.integers(1, 6))
def test_adamw_matches_float64_reference(seed, lr, wd, steps):
    rng = np.random.default_rng(seed)
    theta0 = rng.normal(size=7)
    grads = [rng.normal(size=7) * 10 ** rng.uniform(-3, 1) for _ in range(steps)]
    cfg = TrainConfig(lr=lr, weight_decay=wd)
    p = torch.tensor(theta0, dtype=torch.float32)
    state = AdamWState()
    for t, g in enumerate(grads, start=1):
        adamw_step([p], [torch.tensor(g, dtype=torch.float32)], state, cfg, t)
    ref = _reference_adamw(theta0, grads, lr, *cfg.betas, cfg.eps_opt, wd)
    rel = np.abs(p.double().numpy() - ref) / np.maximum(np.abs(ref), 1e-3)
    assert rel.max() <= 1e-6


def test_adamw_non_finite_leaves_state_untouched():
    p, q = torch.ones(2), torch.ones(3)
    state = AdamWState()
    with pytest.raises(NonFiniteGradient, match="beta at step 1"):
        adamw_step([p, q], [torch.ones(2), torch.tensor([0.0, math.nan, 0.0])], state, TrainConfig(), 1,
                   names=["alpha", "beta"])
    assert p.tolist() == [1.0, 1.0] and state.m == [] and state.t == 0
    with pytest.raises(ValueError):
        adamw_step([p], [torch.ones(2)], state, TrainConfig(), 0)
    with pytest.raises(ValueError, match="shape"):
        adamw_step([p], [torch.ones(3)], state, TrainConfig(), 1)


def test_adamw_wrapper_counts_steps():
    w = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([("w", w)], TrainConfig(lr=0.1, weight_decay=0.0))
    for _ in range(3):
        opt.zero_grad()
        (w * torch.tensor([1.0, -1.0])).sum().backward()
        opt.step()
    assert opt.state.t == 3
    assert w.tolist() == pytest.approx([0.7, 1.3], rel=1e-5)


def test_train_config_validation():
    with pytest.raises(ConfigurationError, match="learning rates.*batch sizes"):
        TrainConfig(lr=0, batch_size=0).validate()
    with pytest.raises(ConfigurationError, match="unknown TrainConfig keys"):
        TrainConfig.from_dict({"momentum": 0.9})
    d = TrainConfig.desk().to_dict()
    assert TrainConfig.from_dict(d) == TrainConfig.desk()
    full = TrainConfig.full()
    assert (full.lr, full.betas, full.eps_opt, full.batch_size, full.epochs) == (1e-4, (0.9, 0.99), 1e-8, 16, 150)
    assert TrainConfig.desk().batch_size == 4


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    model = build_network(tiny_model(), seed=2)
    c = ck.Checkpoint({"kind": "segmentation", "x": [1, 2]}, ck.state_tensors(model), 7, 0.8125)
    path = ck.save(tmp_path / "m.ckpt", c)
    back = ck.load(path)
    assert back.config == c.config and back.epoch == 7 and back.best_mdsc == 0.8125
    assert list(back.tensors) == list(c.tensors)
    assert all(torch.equal(back.tensors[k], c.tensors[k]) for k in c.tensors)
    assert ck.to_bytes(back) == path.read_bytes()
    assert path.read_bytes()[:8] == b"PATTNCKP"


def test_checkpoint_rejects_damage():
    data = ck.to_bytes(ck.Checkpoint({}, ck.state_tensors(torch.nn.Linear(2, 3)), 1, 0.5))
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.from_bytes(data[:-3])
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.from_bytes(data + b"\0")
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.from_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.from_bytes(data[:8] + (2).to_bytes(4, "little") + data[12:])


def test_load_tensors_reports_mismatch():
    with pytest.raises(ck.CheckpointError):
        ck.load_tensors(torch.nn.Linear(2, 3), {"weight": torch.zeros(3, 2)})


# ---------------------------------------------------------------- evaluation

def test_evaluate_masks_hand_computed():
    gt = np.zeros((3, 2, 2), np.int64)
    gt[0, 0, 0] = 1
    gt[1, 0, :] = 2
    pred = gt.copy()
    pred[1, 0, 1] = 0
    pred[2, 1, 1] = 3
    res = evaluate_masks(pred, gt)
    # per-slice DSC, background / irf / srf / ped
    s0 = [1.0, 1.0, 1.0, 1.0]
    s1 = [2 * 2 / (3 + 2), 1.0, 2 * 1 / (1 + 2), 1.0]
    s2 = [2 * 3 / (3 + 4), 1.0, 1.0, 0.0]
    want = np.mean([s0, s1, s2], axis=0)
    assert res.slice_macro.per_class_dsc == pytest.approx(tuple(want), abs=1e-15)
    assert res.mdsc == pytest.approx(want.mean(), abs=1e-15)
    pooled_bg = 2 * 8 / (9 + 9)
    assert res.pooled.dsc_of(0) == pytest.approx(pooled_bg)
    assert res.n_slices == 3
    with pytest.raises(D.DatasetError):
        evaluate_masks(np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))


def test_evaluate_perfect_and_background_only(corpus):
    x, y = D.to_tensors(corpus, SIZE)
    res = evaluate_masks(y.numpy(), y.numpy())
    assert res.slice_macro.per_class_dsc == (1.0, 1.0, 1.0, 1.0)
    bg = evaluate_masks(np.zeros_like(y.numpy()), y.numpy())
    assert bg.slice_macro.dsc_of(0) > 0.9
    # slices lacking a class score 1 there under slice-macro, so check the pooled view
    assert bg.pooled.per_class_dsc[1:] == (0.0, 0.0, 0.0)


# ---------------------------------------------------------------- training

def test_pretrain_rejects_fluid(corpus):
    with pytest.raises(D.DatasetError, match="foreground found in: 00000"):
        pretrain_prior(corpus, tiny_model().vae_config(), tiny_train())


def test_pretrain_keeps_best_and_round_trips(normal, tmp_path):
    vae, c, hist = pretrain_prior(normal, tiny_model().vae_config(), tiny_train(prior_epochs=3), tmp_path / "p.ckpt")
    assert hist.epochs == [0, 1, 2, 3]
    assert hist.best_val_mse == min(hist.val_mse) <= hist.val_mse[-1]
    back = prior_from_checkpoint(ck.load(tmp_path / "p.ckpt"))
    x, _ = D.to_tensors(normal, SIZE)
    _, va = prior_split(len(normal), tiny_train())
    assert prior_val_mse(back, x[va]) == prior_val_mse(vae, x[va]) == pytest.approx(hist.best_val_mse, rel=1e-6)


def test_segmentation_run_contract(corpus, vae, tmp_path):
    before = {k: v.clone() for k, v in vae.state_dict().items()}
    res = train_segmentation(corpus, tiny_model(), tiny_train(epochs=3), vae, tmp_path / "s.ckpt", tmp_path / "s.csv")
    # frozen prior untouched
    assert all(torch.equal(before[k], v) for k, v in vae.state_dict().items())
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 1 + 2 * 3
    test_rows = [l.split(",") for l in lines[1:] if l.startswith("test,")]
    col = [float(r[-1]) for r in test_rows]
    assert res.best_mdsc == max(e.mdsc for e in res.evals)
    assert f"{res.best_mdsc:.6f}" == f"{max(col):.6f}"
    assert res.best_epoch == 1 + int(np.argmax([e.mdsc for e in res.evals]))
    c = ck.load(tmp_path / "s.ckpt")
    assert c.epoch == res.best_epoch and c.best_mdsc == res.best_mdsc
    model, _, _ = model_from_checkpoint(c)
    x, y = D.to_tensors([corpus[i] for i in res.split_ids[1]], SIZE)
    assert evaluate(model, x, y) == res.best
    assert set(res.split_ids[0]).isdisjoint(res.split_ids[1])


def test_segmentation_needs_prior(corpus):
    with pytest.raises(TrainingError, match="pretrained prior"):
        train_segmentation(corpus, tiny_model(), tiny_train(epochs=1))


def test_same_seed_same_bytes(corpus, vae, tmp_path):
    outs = []
    for k in range(2):
        train_segmentation(corpus, tiny_model(), tiny_train(), vae, tmp_path / f"{k}.ckpt", tmp_path / f"{k}.csv")
        outs.append(((tmp_path / f"{k}.ckpt").read_bytes(), (tmp_path / f"{k}.csv").read_text()))
    assert outs[0] == outs[1]
    other = train_segmentation(corpus, tiny_model(), tiny_train(seed=1), vae)
    assert "\n".join(other.csv_lines) + "\n" != outs[0][1]


def test_validation_selection_mode(corpus, vae):
    res = train_segmentation(corpus, tiny_model(), tiny_train(epochs=1, selection_split="val"), vae)
    assert res.csv_lines[1].startswith("val,1,")
    plan = D.split(len(corpus), 0.8, 0)
    assert set(res.split_ids[0]) | set(res.split_ids[1]) == set(plan.train_ids)


# ---------------------------------------------------------------- ablation

def test_ablation_axes_and_parsing():
    assert AXES["ratio"][1] == (1, 2, 3, 4, 5)
    assert parse_value("prior", "off") is False and parse_value("ratio", "3") == 3
    with pytest.raises(ConfigurationError):
        parse_value("depth", "3")
    with pytest.raises(ConfigurationError):
        parse_value("aspp", "maybe")


def test_ablation_csv(corpus, vae, tmp_path):
    rows, lines = run_ablation(tiny_model(), tiny_train(epochs=1), "prior", None, [0, 1], corpus,
                               lambda s: vae, tmp_path / "a.csv")
    assert lines[0] == ABLATION_HEADER
    assert [(r.variant, r.seed) for r in rows] == [("on", "0"), ("on", "1"), ("on", "mean"),
                                                   ("off", "0"), ("off", "1"), ("off", "mean")]
    on, off = rows[2], rows[5]
    assert off.params < on.params
    assert on.mdsc == pytest.approx((rows[0].mdsc + rows[1].mdsc) / 2)
    assert all(len(l.split(",")) == len(ABLATION_HEADER.split(",")) for l in lines)
    assert lines[3].split(",")[4] == "1.000"
    assert (tmp_path / "a.csv").read_text().splitlines() == lines


def test_ablation_skips_invalid_combo(corpus):
    rows, lines = run_ablation(tiny_model(prior_enabled=False, gate_variant="dual_no_prior"), tiny_train(epochs=1),
                               "ratio", [0], [0], corpus)
    assert rows[0].note.startswith("skipped") and "ratio" in rows[0].note
    assert lines[1].startswith("ratio,0,-,,")


# ---------------------------------------------------------------- heatmaps

def test_minmax_u8():
    assert minmax_u8(np.array([[2.0, 6.0], [3.0, 2.0]])).tolist() == [[0, 255], [64, 0]]
    assert (minmax_u8(np.full((3, 3), 0.7)) == 0).all()


@pytest.mark.parametrize("size,taps", [((64, 64), [4, 8, 16, 32, 64]), ((256, 256), [16, 32, 64, 128, 256])])
def test_heatmap_files(tmp_path, size, taps):
    model = build_network(tiny_model(input_size=size, normnet_source="raw"), seed=1)
    s = D.generate_corpus(1, D.with_size(D.get_preset("desk"), size), seed=3)[0]
    x, y = D.preprocess(s, size)
    paths = export_heatmaps(model, x, y.numpy(), tmp_path)
    assert [p.name for p in paths] == [f"{n}.pgm" for n in HEATMAP_FILES]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(f"{n}.pgm" for n in HEATMAP_FILES)
    for p, side in zip(paths, [size[0]] + taps):
        a = np.array(Image.open(p))
        assert a.dtype == np.uint8 and a.shape == (side, side)
        assert a.min() == 0 and a.max() == 255


# ---------------------------------------------------------------- config + CLI

def test_config_round_trip(tmp_path):
    run = from_flat({"base_c": 6, "epochs": 3, "lr": 0.002})
    assert run.model.base_c == 6 and run.train.epochs == 3 and run.model.ratio == 3
    dump_config(run, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == run
    full = from_flat({"preset": "full"})
    assert full.model.base_c == 64 and full.train.batch_size == 16
    with pytest.raises(ConfigurationError, match="unknown config keys: \\['depth'\\]"):
        from_flat({"depth": 3})
    with pytest.raises(ConfigurationError):
        from_flat({"ratio": 0})


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for key in ("base_c", "lr", "weight_decay", "normnet_midc", "PRIOR_ATTUNET_THREADS"):
        assert key in out


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("base_c: 4\ninput_size: [32, 32]\nnormnet_midc: 4\nvae_base_c: 4\nvae_latent_dim: 8\n"
                   "epochs: 1\nprior_epochs: 1\n")
    data, normal = tmp_path / "data", tmp_path / "normal"
    assert main(["gen-phantoms", "--out", str(data), "--count", "10", "--seed", "0", "--size", "32"]) == 0
    assert main(["gen-phantoms", "--out", str(normal), "--count", "6", "--fluid-free", "--size", "32",
                 "--format", "pgm"]) == 0
    assert main(["pretrain-prior", "--data", str(normal), "--out", str(tmp_path / "p.ckpt"), "--config", str(cfg)]) == 0
    assert main(["train", "--data", str(data), "--prior", str(tmp_path / "p.ckpt"), "--out", str(tmp_path / "m.ckpt"),
                 "--config", str(cfg)]) == 0
    assert (tmp_path / "m.csv").read_text().startswith(CSV_HEADER)
    assert main(["eval", "--data", str(data), "--model", str(tmp_path / "m.ckpt")]) == 0
    assert main(["infer", "--model", str(tmp_path / "m.ckpt"), "--image", str(data / "images" / "00000.png"),
                 "--out", str(tmp_path / "mask.png")]) == 0
    assert np.array(Image.open(tmp_path / "mask.png")).shape == (32, 32)
    assert main(["heatmaps", "--model", str(tmp_path / "m.ckpt"), "--image", str(data / "images" / "00001.png"),
                 "--out", str(tmp_path / "maps")]) == 0
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 6
    out = capsys.readouterr().out
    assert "slice_macro," in out and "pooled," in out


def test_cli_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "prior_attunet.cli", "gen-phantoms", "--help"], capture_output=True,
                       text=True, check=True)
    assert "--fluid-free" in r.stdout


def test_threads_env_var(monkeypatch):
    before = torch.get_num_threads()
    monkeypatch.setenv("PRIOR_ATTUNET_THREADS", "0")
    with pytest.raises(SystemExit):
        _apply_threads()
    monkeypatch.setenv("PRIOR_ATTUNET_THREADS", "1")
    _apply_threads()
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)
