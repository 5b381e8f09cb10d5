import csv

import numpy as np
import pytest
import torch

from nlcodec.errors import UsageError
from nlcodec.entropy import EntropyConfig, PostEntropyModel
from nlcodec.imageio import write_image
from nlcodec.model import Codec, CodecConfig
from nlcodec.quantizer import Quantizer
from nlcodec.synthetic import synthetic_images, uniform_codes
from nlcodec.training import (
    PlateauSchedule,
    bits_per_code,
    dihedral,
    TrainConfig,
    extract_codes,
    lr_schedule,
    make_adam,
    random_patches,
    rd_loss,
    rd_step,
    train,
    train_post,
    warm_start_post,
)

TINY = dict(width=8, latent_channels=4, local_blocks=2, feature_blocks=2, res_blocks=1, k_s=1)


def tiny_codec(seed=0):
    torch.manual_seed(seed)
    return Codec(CodecConfig.build(**TINY))


@pytest.fixture(scope="module")
def toy_images():
    return list(synthetic_images(np.random.default_rng(0), 16, 64))


def test_lr_schedule_examples():
    assert lr_schedule([5, 4, 3, 2, 1, 0.5]) == 1e-5
    assert lr_schedule([1.0] * 6) == 1e-6
    assert lr_schedule([1.0] * 11) == 1e-7
    assert lr_schedule([1.0] * 16) is None
    # improvement resets the patience counter
    assert lr_schedule([1, 1, 1, 1, 0.5, 0.5, 0.5, 0.5]) == 1e-5


def test_plateau_schedule_state():
    s = PlateauSchedule((1.0, 0.1), patience=2)
    assert s.update(3.0) == 1.0
    s.update(3.0)
    assert s.update(3.0) == 0.1 and not s.done
    s.update(3.0)
    s.update(3.0)
    assert s.done


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(lam=0.4, distortion="ms-ssim", patch_size=64, lr_levels=(1e-3, 1e-4))
    path = tmp_path / "train.cfg"
    path.write_text("# toy run\n" + cfg.to_text())
    assert TrainConfig.from_file(path) == cfg


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lam = 0.1\nwhatever = 3\n")
    with pytest.raises(UsageError, match="unknown key"):
        TrainConfig.from_file(bad)
    bad.write_text("lam 0.1\n")
    with pytest.raises(UsageError):
        TrainConfig.from_file(bad)
    with pytest.raises(UsageError):
        TrainConfig(lam=0)
    with pytest.raises(UsageError):
        TrainConfig(patch_size=60)
    with pytest.raises(UsageError):
        TrainConfig(distortion="l1")


def test_loss_decomposition(toy_images):
    model = tiny_codec()
    x = torch.as_tensor(np.stack(toy_images[:2]))
    total, dist, rate, qloss = rd_loss(model, x, 0.3)
    assert total.item() == pytest.approx(dist.item() + 0.3 * rate.item() + qloss.item(), abs=1e-12)
    assert np.isfinite([dist.item(), rate.item(), qloss.item()]).all()


def run_steps(model, images, cfg, n, use_rate=True):
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_levels[0])
    return [
        rd_step(model, opt, torch.as_tensor(random_patches(images, cfg.batch_size, cfg.patch_size, rng)), cfg, use_rate)
        for _ in range(n)
    ]


def test_small_lambda_reduces_distortion(toy_images):
    cfg = TrainConfig(lam=1e-6, patch_size=64, batch_size=2, lr_levels=(2e-3,))
    hist = run_steps(tiny_codec(1), toy_images, cfg, 100)
    d = [h.distortion for h in hist]
    assert np.mean(d[-10:]) < 0.8 * np.mean(d[:10])


def test_large_lambda_reduces_rate(toy_images):
    cfg = TrainConfig(lam=100.0, patch_size=64, batch_size=2, lr_levels=(2e-3,))
    hist = run_steps(tiny_codec(2), toy_images, cfg, 100)
    r = [h.rate for h in hist]
    assert np.mean(r[-10:]) < np.mean(r[:10])


def test_full_objective_decreases(toy_images):
    cfg = TrainConfig(lam=0.05, patch_size=64, batch_size=2, lr_levels=(2e-3,))
    hist = run_steps(tiny_codec(3), toy_images, cfg, 100)
    t = np.array([h.total for h in hist])
    assert np.isfinite(t).all()
    assert t[-20:].mean() < t[:20].mean()


def test_train_writes_metrics_and_is_deterministic(toy_images, tmp_path):
    cfg = TrainConfig(patch_size=64, batch_size=2, warmup_steps=3, steps_per_epoch=2, lr_levels=(1e-3,))
    csv_a = tmp_path / "a.csv"
    a, b = tiny_codec(4), tiny_codec(4)
    train(a, toy_images, cfg, metrics_csv=csv_a, steps=6)
    train(b, toy_images, cfg, steps=6)
    assert a.to_bytes() == b.to_bytes()
    rows = list(csv.reader(csv_a.open()))
    assert rows[0] == ["step", "L_D", "L_R", "lr"]
    assert len(rows) == 7


def test_extract_codes(toy_images, tmp_path):
    model = tiny_codec(5)
    a = extract_codes(model, toy_images[:3], crop=6, rng=np.random.default_rng(1))
    b = extract_codes(model, toy_images[:3], crop=6, rng=np.random.default_rng(1))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(c.shape == (4, 6, 6) for c in a)
    full = extract_codes(model, toy_images[:1], crop=60)
    assert full[0].shape == (4, 8, 8)
    assert np.array_equal(full[0], model.image_to_codes(toy_images[0]))
    codes = np.stack(a)
    assert codes.min() >= 0 and codes.max() < 8
    for r in range(4):
        counts = np.bincount(codes[:, r].ravel(), minlength=8)
        p = counts[counts > 0] / counts.sum()
        assert 0 <= -(p * np.log2(p)).sum() <= 3.0


def test_extract_codes_from_folder_skips_bad_files(toy_images, tmp_path, caplog):
    write_image(tmp_path / "a.png", toy_images[0])
    (tmp_path / "b.png").write_bytes(b"not an image")
    codes = extract_codes(tiny_codec(6), tmp_path, crop=None)
    assert len(codes) == 1
    assert "skipping" in caplog.text


def small_post(seed):
    torch.manual_seed(seed)
    return PostEntropyModel(EntropyConfig(channels=2, local_blocks=1, feature_blocks=2, res_blocks=1, k_s=1))


def test_train_post_keeps_best_heldout_checkpoint():
    # a few uniform blocks: anything learned beyond 3 bits is memorization
    rng = np.random.default_rng(8)
    train_blocks = list(uniform_codes(rng, 4, (2, 5, 5)))
    held = list(uniform_codes(rng, 8, (2, 5, 5)))
    omega = Quantizer(2).centers()
    kw = dict(steps=150, lr=1e-2, batch_size=4, heldout_blocks=held)
    plain = train_post(small_post(0), omega, train_blocks, **kw)
    picked = train_post(small_post(0), omega, train_blocks, eval_every=10, **kw)
    assert plain.train_bits < 2.5 and plain.heldout_bits > 3.0
    assert picked.heldout_bits <= plain.heldout_bits
    assert picked.heldout_bits <= bits_per_code(small_post(0), omega, held)


def test_train_post_single_block():
    rep = train_post(small_post(1), Quantizer(2).centers(), [np.zeros((2, 3, 3), int)], steps=5, eval_every=2)
    assert rep.train_bits == rep.heldout_bits
    assert len(rep.losses) == 5


def test_dihedral_variants():
    x = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    vs = list(dihedral(x))
    assert len(vs) == 8
    assert np.array_equal(vs[0], x)
    assert {v.shape for v in vs} == {(2, 3, 4), (2, 4, 3)}
    assert len({v.tobytes() for v in vs}) == 8
    # four quarter turns come back to the start
    assert np.array_equal(np.rot90(vs[6], 1, axes=(1, 2)), x)


def test_extract_codes_augment(toy_images):
    model = tiny_codec(7)
    plain = extract_codes(model, toy_images[:2], crop=None)
    aug = extract_codes(model, toy_images[:2], crop=None, augment=True)
    assert len(aug) == 16
    assert np.array_equal(aug[0], plain[0]) and np.array_equal(aug[8], plain[1])
    assert np.array_equal(aug[1], model.image_to_codes(toy_images[0][:, :, ::-1].copy()))


def test_warm_start_post_copies_backbone():
    model = tiny_codec(8)
    y = torch.as_tensor(np.random.default_rng(0).random((1, 4, 3, 3)))
    with torch.no_grad():
        assert not torch.equal(model.post.backbone(y), model.entropy.backbone(y))
        warm_start_post(model.post, model.entropy)
        assert torch.equal(model.post.backbone(y), model.entropy.backbone(y))


def test_make_adam_scales_proxy_step():
    model = tiny_codec(9)
    opt = make_adam(model, 1e-3)
    assert [g["lr"] for g in opt.param_groups] == pytest.approx([1e-3, 1e-2])
    # one proxy weight matrix in each of the two context models
    assert len(opt.param_groups[1]["params"]) == 2
    total = sum(p.numel() for g in opt.param_groups for p in g["params"])
    assert total == sum(p.numel() for p in model.parameters())
    plain = make_adam(model.synthesis, 1e-3)
    assert len(plain.param_groups) == 1
