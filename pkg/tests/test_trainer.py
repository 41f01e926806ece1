import numpy as np
import pytest

from i2vtoy import tensor as tc
from i2vtoy.checkpoint import load_arrays
from i2vtoy.conditioning import SemanticCondition, split_model_input
from i2vtoy.denoiser import DenoiserConfig, init_model
from i2vtoy.tensor import Rng, Tensor
from i2vtoy.toydata import make_dataset
from i2vtoy.trainer import (
    AdamState,
    MissingPretrainError,
    TrainConfig,
    TrainSample,
    adam_update,
    continue_from,
    load_training_checkpoint,
    spatial_hash,
    train,
    training_step,
)

TINY = DenoiserConfig(base_channels=8, n_res_blocks=1, n_tokens=2, d_model=4, time_embed_dim=8,
                      T_clip_max=4, h=4, w=4)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(40, 4, 8, 8, seed=3)


def test_adam_first_step_and_zero_grad():
    p = {"w": np.zeros(1)}
    st = AdamState()
    adam_update(p, {"w": np.ones(1)}, st, 0.01)
    assert p["w"][0] == pytest.approx(-0.01, rel=1e-6)
    before = p["w"].copy()
    q = {"w": before.copy()}
    adam_update(q, {"w": np.zeros(1)}, AdamState(), 0.01)
    assert np.array_equal(q["w"], before)


def test_adam_moves_against_constant_gradient():
    for sign in (1.0, -1.0):
        p, st = {"w": np.zeros(1)}, AdamState()
        path = []
        for _ in range(20):
            adam_update(p, {"w": np.full(1, sign)}, st, 0.1)
            path.append(p["w"][0])
        assert np.all(np.diff(path) * sign < 0)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


class OracleModel:
    """Duck-typed denoiser that returns the exact v-target for known clean latents."""

    def __init__(self, x0s, sched):
        self.x0s, self.sched = x0s, sched

    def tokens(self, vectors):
        return Tensor(np.zeros((len(vectors), 1, 1)))

    def forward(self, x9, ts, tokens):
        out = []
        for x, t, x0 in zip(x9, ts, self.x0s):
            x_t = split_model_input(x)[0].astype(np.float64)
            out.append((self.sched.alpha(int(t)) * x_t - x0) / self.sched.sigma(int(t)))
        return Tensor(np.stack(out), requires_grad=True)


def test_oracle_loss_is_zero(np_rng):
    cfg = TrainConfig()
    sched = cfg.schedule()
    x0s = [np_rng.normal(size=(3, 4, 4, 4)) for _ in range(4)]
    batch = [TrainSample(x, (0,), SemanticCondition(np.ones(8, np.float32))) for x in x0s]
    loss, _ = training_step(OracleModel(x0s, sched), batch, sched, cfg, Rng(0))
    assert 0 <= loss < 1e-10


def test_init_loss_near_one(tiny_data):
    # the near-zero initial prediction leaves E|v|^2, about 1 for unit-variance scaled latents
    data = make_dataset(200, 4, 32, 32, seed=0)
    cfg = TrainConfig(stage="spatial_pretrain", batch_size=16)
    model = init_model(DenoiserConfig(), Rng(0))
    sched = cfg.schedule()
    from i2vtoy.trainer import _sample_batch
    losses = []
    for step in range(4):
        batch = _sample_batch(data, cfg, Rng(1, step), model.cfg)
        with tc.no_grad():
            losses.append(training_step(model, batch, sched, cfg, Rng(2, step), backward=False)[0])
    assert np.mean(losses) == pytest.approx(1.0, abs=0.2)


def test_loss_reproducible(tiny_data):
    cfg = TrainConfig(stage="spatial_pretrain", steps=3, batch_size=2, eval_every=3)
    a = train(cfg, tiny_data, model_cfg=TINY).losses
    b = train(cfg, tiny_data, model_cfg=TINY).losses
    assert a == b


def test_temporal_stage_needs_pretrain(tiny_data):
    with pytest.raises(MissingPretrainError, match="spatial"):
        train(TrainConfig(stage="temporal", steps=1), tiny_data)


def test_freeze_contract(tiny_data):
    pre = train(TrainConfig(stage="spatial_pretrain", steps=4, batch_size=2, eval_every=4), tiny_data, model_cfg=TINY)
    before = {k: p.data.copy() for k, p in pre.model.params.items()}
    h0 = spatial_hash(pre.model)
    cfg = TrainConfig(stage="temporal", steps=6, batch_size=2, eval_every=6, eval_samples=0)
    res = train(cfg, tiny_data, model=pre.model)
    assert res.spatial_hash_before == res.spatial_hash_after == h0
    for name, p in res.model.params.items():
        changed = not np.array_equal(p.data, before[name])
        group = name.split("/")[0]
        if group == "spatial":
            assert not changed, name
    for group in ("temporal", "input_layer", "cross_attn"):
        assert any(not np.array_equal(p.data, before[n]) for n, p in res.model.named_parameters({group})), group


def test_spatial_stage_leaves_temporal_untouched(tiny_data):
    model = init_model(TINY, Rng(0))
    before = {k: p.data.copy() for k, p in model.named_parameters({"temporal"})}
    train(TrainConfig(stage="spatial_pretrain", steps=3, batch_size=2, eval_every=3), tiny_data, model=model)
    assert all(np.array_equal(p.data, before[k]) for k, p in model.named_parameters({"temporal"}))


def test_resume_is_bit_identical(tiny_data, tmp_path):
    pre = train(TrainConfig(stage="spatial_pretrain", steps=2, batch_size=2, eval_every=2), tiny_data, model_cfg=TINY)
    state = pre.model.state_dict()
    cfg = TrainConfig(stage="temporal", steps=6, batch_size=2, eval_every=3, eval_samples=0)

    fresh = init_model(TINY, Rng(1))
    fresh.load_state_dict(state)
    straight = train(cfg, tiny_data, model=fresh, out_dir=tmp_path / "a")

    first = init_model(TINY, Rng(1))
    first.load_state_dict(state)
    train(cfg, tiny_data, model=first, out_dir=tmp_path / "b")
    loaded = load_training_checkpoint(tmp_path / "b" / "temporal_step000003.ckpt")
    assert loaded.step == 3
    resumed = train(continue_from(loaded, "temporal"), tiny_data, model=loaded.model, adam=loaded.adam,
                    start_step=loaded.step, out_dir=tmp_path / "c")
    for k, p in straight.model.params.items():
        assert np.array_equal(p.data, resumed.model.params[k].data), k
    assert straight.losses[3:] == resumed.losses
    a = (tmp_path / "a" / "temporal_step000006.ckpt").read_bytes()
    assert a == (tmp_path / "c" / "temporal_step000006.ckpt").read_bytes()


def test_checkpoint_contents(tiny_data, tmp_path):
    cfg = TrainConfig(stage="spatial_pretrain", steps=2, batch_size=2, eval_every=2)
    res = train(cfg, tiny_data, model_cfg=TINY, out_dir=tmp_path)
    arrays = load_arrays(tmp_path / "spatial_pretrain_step000002.ckpt")
    assert "meta/train_config" in arrays and "schedule/a" in arrays and int(arrays["adam/step"]) == 2
    loaded = load_training_checkpoint(tmp_path / "spatial_pretrain_step000002.ckpt")
    assert loaded.train_config == cfg and loaded.model.cfg == TINY
    assert all(np.array_equal(loaded.model.params[k].data, p.data) for k, p in res.model.params.items())


def test_dropout_rate_over_run(tiny_data):
    cfg = TrainConfig(stage="spatial_pretrain", steps=150, batch_size=16, eval_every=150, p_drop=0.1)
    res = train(cfg, tiny_data, model_cfg=TINY)
    assert abs(res.null_fraction - 0.1) < 0.02


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="joint")
    with pytest.raises(ValueError):
        TrainConfig(p_drop=1.0)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip=1.0)
