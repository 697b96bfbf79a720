import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from asmunet.asm import AsmConfig
from asmunet.checkpoint import MAGIC, Checkpoint, CheckpointFormatError, pack, unpack
from asmunet.config import ConfigKeyError, RunConfig, preset
from asmunet.unet import ASMUNet, NetConfig

SMALL_NET = NetConfig(n_stages=2, strides=(1, 2), channels=(4, 6),
                      asm=AsmConfig(mamba_depth=1, n_g=8, d_state=4))


def _trained_pair():
    torch.manual_seed(0)
    model = ASMUNet(SMALL_NET)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    for _ in range(2):
        opt.zero_grad()
        model(torch.randn(1, 1, 8, 8, 8)).square().mean().backward()
        opt.step()
    return model, opt


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_bytes_roundtrip_bit_exact(tmp_path):
    model, opt = _trained_pair()
    ck = pack(model, opt, config={"a": 1}, meta={"epoch": 3})
    ck.save(tmp_path / "m.asmc")
    back = Checkpoint.load(tmp_path / "m.asmc")
    assert back.echo == ck.echo
    assert sorted(back.tensors) == sorted(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert back.to_bytes() == ck.to_bytes()


def test_unpack_restores_model_and_optimizer():
    model, opt = _trained_pair()
    ck = Checkpoint.from_bytes(pack(model, opt).to_bytes())
    fresh = ASMUNet(SMALL_NET)
    fresh_opt = torch.optim.Adam(fresh.parameters(), lr=1e-3)
    unpack(ck, fresh, fresh_opt)
    for (n, a), b in zip(model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(a, b), n
    for p, q in zip(model.parameters(), fresh.parameters()):
        sa, sb = opt.state[p], fresh_opt.state[q]
        assert torch.equal(sa["exp_avg"], sb["exp_avg"])
        assert torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])
        assert float(sa["step"]) == float(sb["step"])


@settings(max_examples=25, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=4),
       seed=st.integers(0, 10 ** 6))
def test_checkpoint_arbitrary_tensors_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {i * 7: rng.normal(size=s).astype(np.float32) for i, s in enumerate(shapes)}
    ck = Checkpoint(tensors, {"k": [1, 2]})
    back = Checkpoint.from_bytes(ck.to_bytes())
    assert all(back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
               for k, v in tensors.items())


def test_format_errors():
    raw = Checkpoint({0: np.ones(3, np.float32)}, {}).to_bytes()
    assert raw[:4] == MAGIC
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(raw[:12])
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(raw + b"junk")


def test_unpack_rejects_mismatched_model():
    model, _ = _trained_pair()
    other = ASMUNet(NetConfig(n_stages=2, strides=(1, 2), channels=(4, 6),
                              asm=AsmConfig(n_branches=0)))
    with pytest.raises(CheckpointFormatError):
        unpack(pack(model), other)


# ---------------------------------------------------------------- config


def test_config_text_roundtrip_idempotent():
    cfg = RunConfig().with_overrides(**{"train.patch": "24,16,16", "asm.score_mode": "group_only",
                                        "data.augment": "false", "train.lr0": "0.003"})
    text = cfg.to_text()
    again = RunConfig.from_text(text)
    assert again == cfg and again.to_text() == text
    assert again.train.patch == (24, 16, 16) and again.data.augment is False


def test_config_comments_and_blank_lines():
    cfg = RunConfig.from_text("# header\n\ntrain.seed = 7  # inline\n")
    assert cfg.train.seed == 7


@pytest.mark.parametrize("text", ["train.sed=1\n", "bogus.seed=1\n", "net.asm=1\n",
                                  "train.seed\n", "train.seed=1\ntrain.seed=2\n",
                                  "train.seed=abc\n", "data.augment=maybe\n",
                                  "train.patience=0\n", "asm.score_mode=odd\n"])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigKeyError):
        RunConfig.from_text(text)


def test_config_file_roundtrip(tmp_path):
    cfg = preset("m3")
    cfg.save(tmp_path / "c.txt")
    assert RunConfig.load(tmp_path / "c.txt") == cfg


def test_presets():
    assert preset("m1").asm.n_branches == 0
    assert preset("m1").to_text() == RunConfig().with_overrides(**{"asm.n_branches": 0}).to_text()
    assert preset("m2").asm.score_mode == "none"
    assert preset("m3").asm.score_mode == "individual_only"
    assert preset("m4").asm.score_mode == "group_only"
    m5 = preset("m5")
    assert m5.asm.score_mode == "both" and m5.asm.n_branches >= 1
    # every non-m1 preset keeps ASM on even from an ASM-off base
    assert preset("m4", preset("m1")).asm.n_branches == 1
    with pytest.raises(ConfigKeyError):
        preset("m9")
