from __future__ import annotations

import json
import math

import numpy as np
import pytest

from detektor.config import ModelSpec, RecurrentHeadSpec, TrainConfig
from detektor.errors import ConfigurationError, DataLoadError
from detektor.models import SampleDescriptor
from detektor.services.model import model_arrays
from detektor.services.training import (
    evaluate_checkpoint,
    load_trained_model,
    pretrain_backbone,
    train_end_to_end,
)
from detektor.storage import load_checkpoint, validate_checkpoint_archive
from toy_data import make_cached_descriptors, parameters_changed


def _make_spec(**overrides) -> ModelSpec:
    values = {
        "image_size": 8,
        "sequence_length": 2,
        "tinyconv_widths": (4, 8, 8, 8),
        "recurrent": RecurrentHeadSpec(hidden_size=4, bidirectional=True),
    }
    values.update(overrides)
    return ModelSpec(**values)


def _make_cfg(**overrides) -> TrainConfig:
    values = {"epochs": 1, "batch_size": 4, "seed": 3, "learning_rate": 1e-3}
    values.update(overrides)
    return TrainConfig(**values)


def test_pretrain_checkpoint_reloads_bit_identical(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 16, splits=("train", "train", "val", "test"))

    result = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "run", cache_dir=cache)

    assert result.best_checkpoint.is_file()
    assert result.last_checkpoint.is_file()
    header, arrays = load_checkpoint(result.best_checkpoint)
    assert header.stage == "pretrain"
    model, _, _ = load_trained_model(result.best_checkpoint)
    reloaded = model_arrays(model)
    assert reloaded.keys() == arrays.keys()
    assert all(np.array_equal(reloaded[name], arrays[name]) for name in arrays)
    assert "frame_head.weight" in arrays


def test_training_is_deterministic_per_seed(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 12, splits=("train", "val"))

    first = train_end_to_end(None, _make_spec(), descriptors, _make_cfg(epochs=2), run_dir=tmp_path / "a", cache_dir=cache)
    second = train_end_to_end(None, _make_spec(), descriptors, _make_cfg(epochs=2), run_dir=tmp_path / "b", cache_dir=cache)

    assert first.final_train_loss == second.final_train_loss
    assert (tmp_path / "a" / "checkpoints" / "best.ckpt").read_bytes() == (tmp_path / "b" / "checkpoints" / "best.ckpt").read_bytes()


def test_initial_loss_is_near_ln2_and_logged(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 16)

    result = train_end_to_end(None, _make_spec(), descriptors, _make_cfg(), run_dir=tmp_path / "run", cache_dir=cache)

    assert abs(result.initial_train_loss - math.log(2.0)) < 0.2
    rows = [json.loads(line) for line in (tmp_path / "run" / "log.jsonl").read_text(encoding="utf-8").splitlines()]
    assert rows[0]["epoch"] == 0
    assert {row["split"] for row in rows} == {"train"}
    assert result.best_val_accuracy is None


def test_pretraining_reduces_training_loss(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 16, separable=True)

    result = pretrain_backbone(
        _make_spec(),
        descriptors,
        _make_cfg(stage="pretrain", epochs=5, learning_rate=1e-2, early_stop_patience=None),
        run_dir=tmp_path / "run",
        cache_dir=cache,
    )

    assert result.final_train_loss < result.initial_train_loss


def test_zero_learning_rate_keeps_pretrained_weights(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 8)
    pretrained = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "pre", cache_dir=cache)
    _, before = load_checkpoint(pretrained.best_checkpoint)

    result = train_end_to_end(
        pretrained.best_checkpoint,
        _make_spec(),
        descriptors,
        _make_cfg(learning_rate=0.0),
        run_dir=tmp_path / "e2e",
        cache_dir=cache,
    )

    _, after = load_checkpoint(result.best_checkpoint)
    for name, value in before.items():
        if not name.startswith(("encoder.", "frame_head.")):
            continue
        assert np.array_equal(after[name], value), name


@pytest.mark.parametrize(
    "recurrent",
    [RecurrentHeadSpec(hidden_size=4, bidirectional=False), RecurrentHeadSpec(hidden_size=6, bidirectional=True)],
)
def test_end_to_end_accepts_pretrain_checkpoint_with_other_head(tmp_path, recurrent: RecurrentHeadSpec) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 8)
    pretrained = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "pre", cache_dir=cache)
    _, before = load_checkpoint(pretrained.best_checkpoint)

    result = train_end_to_end(
        pretrained.best_checkpoint,
        _make_spec(recurrent=recurrent),
        descriptors,
        _make_cfg(learning_rate=0.0),
        run_dir=tmp_path / "e2e",
        cache_dir=cache,
    )

    _, after = load_checkpoint(result.best_checkpoint)
    transferred = [name for name in before if name.startswith(("encoder.", "frame_head."))]
    assert "encoder.backbone.stages.0.0.weight" in transferred
    for name in transferred:
        assert np.array_equal(after[name], before[name]), name
    assert after["head.classifier.weight"].shape == (1, recurrent.hidden_size * (2 if recurrent.bidirectional else 1))


def test_one_end_to_end_step_updates_backbone(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 8)
    pretrained = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "pre", cache_dir=cache)
    _, before = load_checkpoint(pretrained.best_checkpoint)

    result = train_end_to_end(
        pretrained.best_checkpoint,
        _make_spec(),
        descriptors,
        _make_cfg(learning_rate=1e-4, max_steps_per_epoch=1),
        run_dir=tmp_path / "e2e",
        cache_dir=cache,
    )

    model, _, _ = load_trained_model(result.last_checkpoint)
    changed = parameters_changed(before, model, prefix="encoder.backbone.")
    assert "encoder.backbone.stages.0.0.weight" in changed


def test_end_to_end_rejects_incompatible_checkpoint(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 8)
    pretrained = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "pre", cache_dir=cache)

    with pytest.raises(ConfigurationError):
        train_end_to_end(
            pretrained.best_checkpoint,
            _make_spec(tinyconv_widths=(8, 8, 8, 8)),
            descriptors,
            _make_cfg(),
            run_dir=tmp_path / "e2e",
            cache_dir=cache,
        )


def test_training_requires_train_split(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 4, splits=("test",))

    with pytest.raises(ConfigurationError):
        train_end_to_end(None, _make_spec(), descriptors, _make_cfg(), run_dir=tmp_path / "run", cache_dir=cache)


def test_corrupt_checkpoint_is_a_configuration_error(tmp_path) -> None:
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"not a zip")

    with pytest.raises(ConfigurationError):
        validate_checkpoint_archive(path)


def test_evaluate_checkpoint_scores_every_sample_deterministically(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 20, splits=("train", "test"))
    trained = train_end_to_end(None, _make_spec(), descriptors, _make_cfg(), run_dir=tmp_path / "run", cache_dir=cache)

    first = evaluate_checkpoint(trained.best_checkpoint, descriptors, "test", cache_dir=cache, batch_size=3, alignment="none")
    second = evaluate_checkpoint(trained.best_checkpoint, descriptors, "test", cache_dir=cache, batch_size=7, alignment="none")

    assert len(first.scores.entries) == 10
    assert [e.sample_id for e in first.scores.entries] == [d.sample_id for d in descriptors if d.split == "test"]
    np.testing.assert_allclose(first.scores.scores, second.scores.scores, rtol=0, atol=1e-6)
    assert first.scores.metadata.frames == 2
    assert first.scores.metadata.description == "tinyconv 2f none bidir"


def test_evaluate_checkpoint_frame_head(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 8, splits=("train", "test"))
    trained = pretrain_backbone(_make_spec(), descriptors, _make_cfg(stage="pretrain"), run_dir=tmp_path / "run", cache_dir=cache)

    evaluation = evaluate_checkpoint(trained.best_checkpoint, descriptors, "test", cache_dir=cache, head="frame")

    assert len(evaluation.scores.entries) == 4
    assert evaluation.scores.metadata.frames == 1
    assert evaluation.scores.metadata.description.endswith("frame-head")


def test_evaluate_checkpoint_reports_missing_cache(tmp_path) -> None:
    cache = tmp_path / "cache"
    descriptors = make_cached_descriptors(cache, 4, splits=("train", "test"))
    trained = train_end_to_end(None, _make_spec(), descriptors, _make_cfg(), run_dir=tmp_path / "run", cache_dir=cache)
    ghost = SampleDescriptor(video_id="ghost", frame_indices=(0, 1), label=1, split="test", manipulation="synthetic")

    with pytest.raises(DataLoadError):
        evaluate_checkpoint(trained.best_checkpoint, descriptors + [ghost], "test", cache_dir=cache)
