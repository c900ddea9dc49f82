"""Training loop, datasets, checkpoints, and the metrics CSV."""

import numpy as np
import pytest

from otsteg import mcot
from otsteg import net as nn
from otsteg import train as tn
from otsteg.core import SeededRng


def tiny_config(**overrides) -> nn.TrainConfig:
    base = dict(epochs=2, batch=2, seed=0, patch_size=16, base_width=4, mlp_hidden=4)
    base.update(overrides)
    return nn.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_images():
    return tn.synthetic_images(count=4, side=16, seed=0)


@pytest.fixture(scope="module")
def tiny_run(tiny_images):
    return tn.train(tiny_images, tiny_config())


# --- datasets ---------------------------------------------------------------


def test_synthetic_images_contract():
    images = tn.synthetic_images()
    assert len(images) == 16
    for img in images:
        assert img.shape == (3, 32, 32)
        assert img.dtype == np.float64
        assert img.min() >= 0.0 and img.max() <= 1.0
    again = tn.synthetic_images()
    for a, b in zip(images, again):
        np.testing.assert_array_equal(a, b)


def test_synthetic_images_exposure_spread():
    # The generator is built around per-image brightness extremes; if the
    # spread collapses the transport ablation loses its signal.
    means = [float(img.mean()) for img in tn.synthetic_images()]
    assert min(means) < 0.2
    assert max(means) > 0.75


def test_textured_images_contract():
    images = tn.textured_images()
    assert len(images) == 16
    shapes = {img.shape for img in images}
    assert shapes == {(3, 32, 32)}
    stds = [float(img.std()) for img in images]
    assert min(stds) > 0.05


def test_write_and_load_dataset_round_trip(tmp_path):
    tn.write_synthetic_dataset(tmp_path, count=4, side=16)
    loaded = tn.load_dataset(tmp_path)
    assert len(loaded) == 4
    originals = tn.synthetic_images(count=4, side=16)
    for img, orig in zip(loaded, originals):
        assert img.shape == (3, 16, 16)
        # Files are 8-bit, so round trip is exact only to quantization.
        assert float(np.abs(img - orig).max()) <= 0.5 / 255.0 + 1e-12


def test_load_dataset_empty_dir(tmp_path):
    with pytest.raises(tn.DatasetError):
        tn.load_dataset(tmp_path)


def test_load_dataset_single_image(tmp_path):
    tn.write_synthetic_dataset(tmp_path, count=1, side=16)
    with pytest.raises(tn.DatasetError):
        tn.load_dataset(tmp_path)


def test_load_dataset_promotes_gray(tmp_path):
    from otsteg.core import save_image

    gray = SeededRng(3).uniforms(256).reshape(1, 16, 16)
    save_image(gray, tmp_path / "a.pgm")
    save_image(gray, tmp_path / "b.pgm")
    loaded = tn.load_dataset(tmp_path)
    assert loaded[0].shape == (3, 16, 16)
    np.testing.assert_array_equal(loaded[0][0], loaded[0][2])


def test_load_dataset_sorted_order(tmp_path):
    from otsteg.core import save_image

    for name, level in (("c.pgm", 0.75), ("a.pgm", 0.25), ("b.pgm", 0.5)):
        save_image(np.full((1, 16, 16), level), tmp_path / name)
    loaded = tn.load_dataset(tmp_path)
    means = [round(float(img.mean()), 2) for img in loaded]
    assert means == [0.25, 0.5, 0.75]


# --- augmentation -----------------------------------------------------------


def test_augment_shape_and_determinism():
    img = SeededRng(1).uniforms(3 * 24 * 24).reshape(3, 24, 24)
    out1 = tn.augment(img, 16, SeededRng(7))
    out2 = tn.augment(img, 16, SeededRng(7))
    assert out1.shape == (3, 16, 16)
    np.testing.assert_array_equal(out1, out2)
    other = tn.augment(img, 16, SeededRng(8))
    assert not np.array_equal(out1, other)


def test_augment_full_size_is_subset():
    img = SeededRng(2).uniforms(3 * 16 * 16).reshape(3, 16, 16)
    out = tn.augment(img, 16, SeededRng(0))
    # Crop is forced to the whole frame; flips and rotations permute pixels.
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))


def test_augment_rejects_oversized_crop():
    img = np.zeros((3, 16, 16))
    with pytest.raises(tn.DatasetError):
        tn.augment(img, 17, SeededRng(0))


def test_center_crop_values():
    img = np.arange(16.0).reshape(1, 4, 4)
    out = tn.center_crop(img, 2)
    np.testing.assert_array_equal(out[0], [[5.0, 6.0], [9.0, 10.0]])


# --- schedule and optimizer ---------------------------------------------------


def test_cosine_lr_endpoints():
    cfg = tiny_config(epochs=10, lr_init=1e-3, lr_final=1e-6)
    assert tn.cosine_lr(0, 10, cfg) == pytest.approx(1e-3, rel=1e-12)
    assert tn.cosine_lr(9, 10, cfg) == pytest.approx(1e-6, rel=1e-12)
    values = [tn.cosine_lr(e, 10, cfg) for e in range(10)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_optimizer_moves_toward_minimum():
    cfg = tiny_config(weight_decay=0.0)
    params = {"w": np.array([4.0, -2.0])}
    opt = tn.Optimizer(cfg)
    for step in range(200):
        grads = {"w": 2.0 * params["w"]}
        opt.step(params, grads, lr=0.05)
    assert float(np.abs(params["w"]).max()) < 1e-2


# --- training loop ------------------------------------------------------------


def test_train_history_columns(tiny_run):
    assert len(tiny_run.history) == 2
    for number, row in enumerate(tiny_run.history):
        assert tuple(row.keys()) == tn.CSV_COLUMNS
        assert row["epoch"] == number
        assert np.isfinite(row["L_total"])
    assert tiny_run.history[0]["lr"] > tiny_run.history[1]["lr"]


def test_train_is_deterministic(tiny_images, tiny_run):
    again = tn.train(tiny_images, tiny_config())
    assert tn.metrics_csv(again.history) == tn.metrics_csv(tiny_run.history)
    for key in tiny_run.hiding.params:
        np.testing.assert_array_equal(again.hiding.params[key], tiny_run.hiding.params[key])


def test_train_seed_changes_outcome(tiny_images, tiny_run):
    other = tn.train(tiny_images, tiny_config(seed=1))
    assert tn.metrics_csv(other.history) != tn.metrics_csv(tiny_run.history)


def test_train_loss_decreases(tiny_images):
    result = tn.train(tiny_images, tiny_config(epochs=30))
    assert result.history[29]["L_total"] < result.history[0]["L_total"]


def test_train_without_mcot_has_no_mlps(tiny_images):
    result = tn.train(tiny_images, tiny_config(use_mcot=False))
    assert result.mlps is None


def test_metrics_csv_format(tiny_run):
    text = tn.metrics_csv(tiny_run.history)
    lines = text.splitlines()
    assert lines[0] == ",".join(tn.CSV_COLUMNS)
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "0"
    assert first[1] == repr(tiny_run.history[0]["lr"])


def test_resume_continues_epoch_numbering(tiny_images):
    first = tn.train(tiny_images, tiny_config(epochs=2))
    second = tn.train(
        tiny_images,
        tiny_config(epochs=2),
        hiding=first.hiding,
        reveal_net=first.reveal_net,
        mlps=first.mlps,
        start_epoch=first.epochs_done,
    )
    assert [row["epoch"] for row in second.history] == [2, 3]
    assert second.epochs_done == 4
    # The resumed horizon spans all four epochs, so the schedule re-enters
    # partway down the cosine rather than continuing from the old floor.
    cfg = tiny_config(epochs=2)
    assert second.history[0]["lr"] == pytest.approx(tn.cosine_lr(2, 4, cfg), rel=1e-12)
    assert second.history[1]["lr"] == pytest.approx(cfg.lr_final, rel=1e-12)


# --- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    tn.save_checkpoint(path, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps,
                       cfg, tiny_run.epochs_done)
    hiding, reveal_net, mlps, meta = tn.load_checkpoint(path)
    assert meta == {
        "use_mcot": True,
        "patch_size": 16,
        "base_width": 4,
        "mlp_hidden": 4,
        "epochs_done": 2,
    }
    assert hiding.noise_seed == tiny_run.hiding.noise_seed
    for key in tiny_run.hiding.params:
        np.testing.assert_array_equal(hiding.params[key], tiny_run.hiding.params[key])
    for key in tiny_run.reveal_net.params:
        np.testing.assert_array_equal(reveal_net.params[key], tiny_run.reveal_net.params[key])
    assert len(mlps) == len(tiny_run.mlps)
    np.testing.assert_array_equal(mlps[0].w1, tiny_run.mlps[0].w1)


def test_checkpoint_bytes_are_stable(tmp_path, tiny_run):
    cfg = tiny_config()
    a, b = tmp_path / "a.stgo", tmp_path / "b.stgo"
    tn.save_checkpoint(a, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    tn.save_checkpoint(b, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    tn.save_checkpoint(path, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(tn.CheckpointFormatError):
        tn.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    tn.save_checkpoint(path, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 8])
    with pytest.raises(tn.CheckpointFormatError):
        tn.load_checkpoint(path)


def test_checkpoint_rejects_trailing_garbage(tmp_path, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    tn.save_checkpoint(path, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(tn.CheckpointFormatError):
        tn.load_checkpoint(path)


def test_checkpoint_rejects_nonfinite_params(tmp_path, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    broken = nn.NetParams(
        tiny_run.hiding.stages,
        {k: v.copy() for k, v in tiny_run.hiding.params.items()},
        in_channels=tiny_run.hiding.in_channels,
        use_skips=tiny_run.hiding.use_skips,
        noise_seed=tiny_run.hiding.noise_seed,
    )
    broken.params["enc0.w"][0, 0, 0, 0] = np.nan
    tn.save_checkpoint(path, broken, tiny_run.reveal_net, tiny_run.mlps, cfg, 2)
    with pytest.raises(tn.CheckpointFormatError):
        tn.load_checkpoint(path)


def test_checkpoint_loaded_model_reproduces_hide(tmp_path, tiny_images, tiny_run):
    cfg = tiny_config()
    path = tmp_path / "model.stgo"
    tn.save_checkpoint(path, tiny_run.hiding, tiny_run.reveal_net, tiny_run.mlps,
                       cfg, tiny_run.epochs_done)
    hiding, reveal_net, _, _ = tn.load_checkpoint(path)
    cover, secret = tiny_images[0], tiny_images[1]
    stego_a, result_a = nn.hide(cover, secret, tiny_run.hiding)
    stego_b, result_b = nn.hide(cover, secret, hiding)
    np.testing.assert_array_equal(stego_a, stego_b)
    rec_a = nn.reveal(stego_a, result_a.plans, tiny_run.reveal_net)
    rec_b = nn.reveal(stego_b, result_b.plans, reveal_net)
    np.testing.assert_array_equal(rec_a, rec_b)


def test_init_mlps_deterministic():
    cfg = tiny_config()
    a = tn.init_mlps(cfg, channels=3)
    b = tn.init_mlps(cfg, channels=3)
    assert len(a) == 3
    np.testing.assert_array_equal(a[1].w1, b[1].w1)
    assert not np.array_equal(a[0].w1, a[1].w1)
