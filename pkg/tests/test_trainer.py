import warnings

import numpy as np
import pytest
import torch

from conftest import tiny_config
from seq2seq_mri.errors import CheckpointError, ConfigError, DataError
from seq2seq_mri.generator.model import GeneratorConfig
from seq2seq_mri.objectives import LossWeights
from seq2seq_mri.trainer import (
    AvailabilityPlan,
    DataConfig,
    LossConfig,
    OptimConfig,
    TrainConfig,
    Trainer,
    TrainingSet,
    collate,
    load_checkpoint,
    load_generator,
    make_availability_plan,
    save_checkpoint,
    train,
    train_step,
    validate,
)
from seq2seq_mri.volume_io import Study, Volume


def make_studies(n, n_seq=3, shape=(4, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        base = rng.random(shape).astype(np.float32)
        seqs = {i: Volume(np.clip(base * (0.5 + 0.2 * i) + 0.1 * i, 0, 1).astype(np.float32))
                for i in range(n_seq)}
        out.append(Study(f"s{k:03d}", n_seq, seqs))
    return out


def make_config(tmp_path, steps=10, **kw):
    data = kw.pop("data", DataConfig(max_val_subjects=0))
    loss = kw.pop("loss", LossConfig(lambda_p=0.0))
    return TrainConfig(seed=kw.pop("seed", 0), out_dir=str(tmp_path), data=data,
                       model=kw.pop("model", tiny_config()), loss=loss,
                       train=OptimConfig(steps=steps, batch_size=kw.pop("batch_size", 2),
                                         checkpoint_every=kw.pop("checkpoint_every", 1000),
                                         val_every=1000), **kw)


# ---- silencing

def test_plan_s4_keeps_one_to_three():
    plan = make_availability_plan(500, 4, seed=0)
    kept = plan.mask.sum(1)
    assert kept.min() >= 1 and kept.max() <= 3
    assert set(kept.tolist()) == {1, 2, 3}


def test_plan_s2_keeps_exactly_one():
    plan = make_availability_plan(100, 2, seed=3)
    assert (plan.mask.sum(1) == 1).all()


def test_plan_deterministic_and_validated():
    a, b = make_availability_plan(50, 4, 9), make_availability_plan(50, 4, 9)
    assert np.array_equal(a.mask, b.mask)
    assert not np.array_equal(a.mask, make_availability_plan(50, 4, 10).mask)
    with pytest.raises(ConfigError):
        make_availability_plan(10, 1, 0)
    with pytest.raises(DataError):
        AvailabilityPlan(np.array([[False, False]]))


def test_plan_warns_when_sequence_globally_absent():
    with pytest.warns(RuntimeWarning):
        make_availability_plan(1, 2, 0)


class RecordingDict(dict):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.reads = []

    def __getitem__(self, k):
        self.reads.append(k)
        return super().__getitem__(k)


def test_silenced_sequences_are_never_read():
    studies = make_studies(40, n_seq=4)
    for st_ in studies:
        st_.sequences = RecordingDict(st_.sequences)
    plan = make_availability_plan(len(studies), 4, seed=1)
    data = TrainingSet(studies, plan, in_channels=1)
    rng = np.random.default_rng(0)
    for idx in rng.permutation(len(studies)):  # one full epoch
        sample = data.sample(idx, rng)
        assert sorted(sample) == plan.keeps(idx)
    for idx, st_ in enumerate(studies):
        silenced = set(range(4)) - set(plan.keeps(idx))
        assert st_.sequences.reads and not silenced & set(st_.sequences.reads)


def test_sample_shapes_and_collate():
    studies = make_studies(3)
    data = TrainingSet(studies, None, in_channels=3, crop_size=8)
    rng = np.random.default_rng(0)
    batch = collate([data.sample(i, rng) for i in range(3)])
    assert sorted(batch) == [0, 1, 2]
    rows, x = batch[1]
    assert rows == [0, 1, 2] and x.shape == (3, 1, 3, 8, 8)


# ---- train_step

def test_reconstruction_term_count(tmp_path):
    trainer = Trainer(make_config(tmp_path, batch_size=1))
    data = TrainingSet(make_studies(1), None, in_channels=1)
    rec = train_step(trainer.next_batch(data), trainer)
    assert len(rec.rec_terms) == 9
    assert set(rec.rec_terms) == {(i, j) for i in range(3) for j in range(3)}
    assert trainer.step_count == 1


class IdentityGenerator(torch.nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.gain = torch.nn.Parameter(torch.ones(()))

    @property
    def n_sequences(self):
        return self.cfg.n_sequences

    def encode_sequence(self, x):
        return x

    def decode_sequence(self, latent, target, t_out=1):
        return latent * self.gain


def test_single_available_sequence_is_self_reconstruction(tmp_path):
    cfg = make_config(tmp_path, batch_size=1)
    trainer = Trainer(cfg, generator=IdentityGenerator(cfg.model))
    studies = [Study("solo", 3, {1: Volume(np.random.default_rng(0).random((4, 8, 8)).astype(np.float32))})]
    rec = trainer.train_step(trainer.next_batch(TrainingSet(studies, None, 1)))
    assert list(rec.rec_terms) == [(1, 1)]
    assert rec.rec_terms[(1, 1)] == 0.0 and rec.total == 0.0
    assert rec.adv_g == rec.adv_d == rec.cyc == 0.0


def test_empty_batch_skipped_with_warning(tmp_path):
    trainer = Trainer(make_config(tmp_path))
    with pytest.warns(RuntimeWarning):
        rec = trainer.train_step({})
    assert rec.skipped and trainer.step_count == 0


def test_adversarial_and_cycle_step_updates_both_sides(tmp_path):
    loss = LossConfig(lambda_p=0.0, adversarial=True, cycle=True, disc_base_channels=4)
    trainer = Trainer(make_config(tmp_path, loss=loss, batch_size=1))
    d_before = [p.clone() for p in trainer.discriminators.parameters()]
    g_before = [p.clone() for p in trainer.generator.parameters()]
    data = TrainingSet(make_studies(2, shape=(3, 32, 32)), None, in_channels=1)
    rec = trainer.train_step(trainer.next_batch(data))
    assert rec.adv_d > 0 and rec.adv_g > 0 and rec.cyc > 0
    assert any(not torch.equal(a, b) for a, b in zip(d_before, trainer.discriminators.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(g_before, trainer.generator.parameters()))
    assert all(p.requires_grad for p in trainer.discriminators.parameters())


# ---- full runs

def _log(path):
    return (path / "train_log.csv").read_bytes()


def test_identical_seeds_give_identical_loss_logs(tmp_path):
    studies = make_studies(6)
    for run in ("a", "b"):
        train(make_config(tmp_path / run, steps=100, deterministic=True), studies)
    assert _log(tmp_path / "a") == _log(tmp_path / "b")
    train(make_config(tmp_path / "c", steps=100, seed=1), studies)
    assert _log(tmp_path / "a") != _log(tmp_path / "c")


def test_smoke_run_loss_decreases(tmp_path):
    cfg = make_config(tmp_path, steps=500, data=DataConfig(crop_size=8, max_val_subjects=0),
                      batch_size=4, model=tiny_config(n_sequences=2))
    res = train(cfg, make_studies(16, n_seq=2))
    totals = [r.total for r in res.history]
    assert res.steps == 500 and len(totals) == 500
    assert np.mean(totals[-10:]) <= 0.8 * np.mean(totals[:10])


def test_resume_continues_exactly(tmp_path):
    studies = make_studies(5)
    train(make_config(tmp_path / "full", steps=20), studies)
    train(make_config(tmp_path / "part", steps=10), studies)
    res = train(make_config(tmp_path / "part", steps=20), studies, resume_from=tmp_path / "part/last.pt")
    assert res.steps == 20
    assert load_checkpoint(res.last)["step"] == 20
    assert _log(tmp_path / "full") == _log(tmp_path / "part")


def test_validation_writes_best_checkpoint(tmp_path):
    studies = make_studies(4)
    cfg = make_config(tmp_path, steps=4)
    cfg.train.val_every = 2
    res = train(cfg, studies, val_studies=studies[:2])
    assert res.best is not None and res.best.exists()
    assert np.isfinite(validate(load_generator(res.best), studies[:2]))
    assert (tmp_path / "resolved_config.yaml").exists()
    assert b"validation" in (tmp_path / "events.jsonl").read_bytes()


def test_unwritable_output_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        train(make_config(blocker / "sub", steps=1), make_studies(1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(train=OptimConfig(learning_rate=0))
    with pytest.raises(ConfigError):
        TrainConfig(train=OptimConfig(steps=0))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"train": {"stepz": 3}})
    cfg = TrainConfig.from_dict({"train": {"betas": [0.5, 0.9]}, "model": {"n_sequences": 2}})
    assert cfg.train.betas == (0.5, 0.9) and cfg.model.n_sequences == 2
    assert TrainConfig(train=OptimConfig(epochs=10, batch_size=8)).total_steps(9000) == 11250


# ---- checkpoints

def test_checkpoint_roundtrip_bitwise(tmp_path):
    trainer = Trainer(make_config(tmp_path))
    path = save_checkpoint(tmp_path / "c.pt", trainer)
    g = load_generator(path)
    for (k, a), b in zip(trainer.generator.state_dict().items(), g.state_dict().values()):
        assert (a - b).abs().max().item() == 0, k
    x = torch.rand(1, 2, 1, 16, 16)
    trainer.generator.eval()
    with torch.no_grad():
        assert torch.equal(trainer.generator(x, 1), g(x, 1))


def test_corrupted_and_incompatible_checkpoints(tmp_path):
    trainer = Trainer(make_config(tmp_path))
    path = save_checkpoint(tmp_path / "c.pt", trainer)
    blob = path.read_bytes()
    (tmp_path / "cut.pt").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    state = torch.load(path, weights_only=True)
    state["format_version"] = 99
    torch.save(state, tmp_path / "future.pt")
    with pytest.raises(CheckpointError, match="incompatible"):
        load_checkpoint(tmp_path / "future.pt")
